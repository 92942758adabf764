#include "rfcam/review_service.hpp"

#include <algorithm>
#include <chrono>
#include <csignal>
#include <ctime>
#include <fstream>
#include <thread>

#include <httplib.h>
#include <spdlog/spdlog.h>

#include "rfcam/errors.hpp"

namespace rfcam {
namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;
using nlohmann::json;

namespace {

constexpr int kMaxPageSize = 500;

std::string utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

ApiResponse error_response(int status, const std::string& message,
                           const std::optional<std::string>& field = std::nullopt) {
    ApiResponse r;
    r.status = status;
    r.body["error"] = message;
    if (field) r.body["field"] = *field;
    return r;
}

std::optional<int> parse_int(const std::string& text) {
    try {
        std::size_t used = 0;
        const int v = std::stoi(text, &used);
        if (used != text.size()) return std::nullopt;
        return v;
    } catch (const std::exception&) {
        return std::nullopt;
    }
}

std::string media_url(const std::string& id, const char* kind) {
    return "/media/" + id + "/" + kind + ".png";
}

ReviewAction parse_action(const std::string& s) {
    if (s == "confirm") return ReviewAction::Confirm;
    if (s == "reject") return ReviewAction::Reject;
    if (s == "auto_flag") return ReviewAction::AutoFlag;
    throw FormatError("unknown review action '" + s + "'");
}

bool reviewable(ReviewStatus s) { return s == ReviewStatus::Pending || s == ReviewStatus::AutoFlagged; }

void apply_event(ReviewState& state, const ReviewEvent& e) {
    auto it = state.records.find(e.instance_id);
    if (it == state.records.end()) {
        spdlog::warn("event for unknown instance {} ignored", e.instance_id);
        return;
    }
    switch (e.action) {
        case ReviewAction::Confirm:
            it->second.status = ReviewStatus::Confirmed;
            state.groups[e.instance_id];
            break;
        case ReviewAction::Reject:
            it->second.status = ReviewStatus::Rejected;
            break;
        case ReviewAction::AutoFlag:
            it->second.status = ReviewStatus::AutoFlagged;
            if (e.source_instance) state.groups[*e.source_instance].push_back(e.instance_id);
            break;
    }
}

void serve_json(httplib::Response& res, const ApiResponse& api) {
    res.status = api.status;
    res.set_content(api.body.dump(), "application/json");
}

ReviewService::Query query_of(const httplib::Request& req) {
    ReviewService::Query q;
    for (const auto& [k, v] : req.params) q.emplace(k, v);
    return q;
}

constexpr const char* kPlaceholderPage =
    "<!doctype html><html><head><title>RF-CAM review</title></head><body>"
    "<h1>RF-CAM review service</h1><p>The review console is not installed. "
    "Start the service with <code>--static DIR</code> to serve it, or use the JSON API under "
    "<code>/api</code>.</p></body></html>";

}  // namespace

std::string to_string(ReviewAction action) {
    switch (action) {
        case ReviewAction::Confirm: return "confirm";
        case ReviewAction::Reject: return "reject";
        case ReviewAction::AutoFlag: return "auto_flag";
    }
    return "confirm";
}

ojson event_to_json(const ReviewEvent& e) {
    ojson j;
    j["timestamp"] = e.timestamp;
    j["instance_id"] = e.instance_id;
    j["action"] = to_string(e.action);
    j["actor"] = e.actor;
    j["note"] = e.note ? ojson(*e.note) : ojson(nullptr);
    j["feature"] = e.feature ? ojson(*e.feature) : ojson(nullptr);
    j["source_instance"] = e.source_instance ? ojson(*e.source_instance) : ojson(nullptr);
    return j;
}

ReviewEvent event_from_json(const json& j) {
    try {
        ReviewEvent e;
        e.timestamp = j.at("timestamp").get<std::string>();
        e.instance_id = j.at("instance_id").get<std::string>();
        e.action = parse_action(j.at("action").get<std::string>());
        e.actor = j.value("actor", std::string{});
        if (j.contains("note") && !j.at("note").is_null()) e.note = j.at("note").get<std::string>();
        if (j.contains("feature") && !j.at("feature").is_null()) e.feature = j.at("feature").get<int>();
        if (j.contains("source_instance") && !j.at("source_instance").is_null()) {
            e.source_instance = j.at("source_instance").get<std::string>();
        }
        return e;
    } catch (const json::exception& ex) {
        throw FormatError(std::string("review event: ") + ex.what());
    }
}

ReviewState fold_events(const std::vector<DetectionRecord>& records, const std::vector<ReviewEvent>& events) {
    ReviewState state;
    state.records = make_record_store(records);
    for (const auto& e : events) apply_event(state, e);
    return state;
}

std::vector<ReviewEvent> read_event_log(const fs::path& path) {
    std::vector<ReviewEvent> events;
    std::ifstream in(path);
    if (!in) return events;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
            events.push_back(event_from_json(json::parse(line)));
        } catch (const json::parse_error&) {
            // A torn final line from a crash mid-append; everything before it is intact.
            spdlog::warn("{}: skipping unparseable event line", path.string());
        }
    }
    return events;
}

ReviewService::ReviewService(std::shared_ptr<const TensorBundle> bundle, ServiceOptions options)
    : bundle_(std::move(bundle)), options_(std::move(options)) {
    const fs::path records_path = options_.run_dir / "records.jsonl";
    if (!fs::exists(records_path)) throw IoError("records not found: " + records_path.string());
    if (options_.events_path.empty()) options_.events_path = options_.run_dir / "review_events.jsonl";
    if (options_.auto_flag_top_n < 1) throw ValidationError("auto-flag top N must be >= 1");
    initial_ = read_records(records_path);
    state_ = std::make_shared<const ReviewState>(fold_events(initial_, read_event_log(options_.events_path)));
}

std::shared_ptr<const ReviewState> ReviewService::snapshot() const {
    std::lock_guard lock(snapshot_mutex_);
    return state_;
}

void ReviewService::append_events(const std::vector<ReviewEvent>& events) {
    std::ofstream out(options_.events_path, std::ios::app);
    if (!out) throw IoError("cannot append to " + options_.events_path.string());
    for (const auto& e : events) out << event_to_json(e).dump() << '\n';
    out.flush();
    if (!out) throw IoError("short write to " + options_.events_path.string());
}

ojson ReviewService::summary_item(const DetectionRecord& r) const {
    const auto& names = bundle_->manifest().class_names;
    ojson j;
    j["instance_id"] = r.instance_id;
    j["predicted_class"] = r.predicted_class;
    j["true_class"] = r.true_class;
    j["class_name"] = r.predicted_class < static_cast<int>(names.size()) ? names[r.predicted_class]
                                                                          : std::to_string(r.predicted_class);
    j["dissimilarity"] = r.dissimilarity;
    j["flagged"] = r.flagged;
    j["status"] = to_string(r.status);
    j["top_feature"] = r.top_feature;
    j["rf_url"] = r.rf_map_path.empty() ? ojson(nullptr) : ojson(media_url(r.instance_id, "rf"));
    j["gc_url"] = r.gc_map_path.empty() ? ojson(nullptr) : ojson(media_url(r.instance_id, "gc"));
    return j;
}

ApiResponse ReviewService::health() const { return {200, {{"status", "ok"}}}; }

ApiResponse ReviewService::list_instances(const Query& query) const {
    std::optional<ReviewStatus> status_filter;
    bool flagged_only = false;
    std::optional<int> class_filter;
    std::string sort = "dissimilarity";
    int page = 1, page_size = 20;

    for (const auto& [key, value] : query) {
        if (key == "status") {
            if (value == "flagged") {
                flagged_only = true;
            } else {
                try {
                    status_filter = parse_review_status(value);
                } catch (const ValidationError&) {
                    return error_response(400, "unknown status '" + value + "'", "status");
                }
            }
        } else if (key == "class") {
            class_filter = parse_int(value);
            if (!class_filter || *class_filter < 0 || *class_filter >= bundle_->manifest().num_classes) {
                return error_response(400, "class must be a valid class index", "class");
            }
        } else if (key == "sort") {
            if (value != "dissimilarity" && value != "id") {
                return error_response(400, "sort must be 'dissimilarity' or 'id'", "sort");
            }
            sort = value;
        } else if (key == "page") {
            const auto v = parse_int(value);
            if (!v || *v < 1) return error_response(400, "page must be an integer >= 1", "page");
            page = *v;
        } else if (key == "page_size") {
            const auto v = parse_int(value);
            if (!v || *v < 1 || *v > kMaxPageSize) {
                return error_response(400, "page_size must be in [1, 500]", "page_size");
            }
            page_size = *v;
        }
    }

    const auto state = snapshot();
    std::vector<const DetectionRecord*> rows;
    for (const auto& [id, r] : state->records) {
        if (flagged_only && !r.flagged) continue;
        if (status_filter && r.status != *status_filter) continue;
        if (class_filter && r.predicted_class != *class_filter) continue;
        rows.push_back(&r);
    }
    if (sort == "dissimilarity") {
        std::stable_sort(rows.begin(), rows.end(), [](const DetectionRecord* a, const DetectionRecord* b) {
            return a->dissimilarity > b->dissimilarity;
        });
    }

    ApiResponse resp;
    resp.body["total"] = rows.size();
    resp.body["page"] = page;
    resp.body["page_size"] = page_size;
    auto items = ojson::array();
    const std::size_t begin = static_cast<std::size_t>(page - 1) * page_size;
    for (std::size_t i = begin; i < rows.size() && i < begin + page_size; ++i) {
        items.push_back(summary_item(*rows[i]));
    }
    resp.body["items"] = std::move(items);
    return resp;
}

ApiResponse ReviewService::get_instance(const std::string& id) const {
    const auto state = snapshot();
    auto it = state->records.find(id);
    if (it == state->records.end()) return error_response(404, "unknown instance " + id);
    ojson body = summary_item(it->second);
    body["shap"] = {{"alpha0", it->second.shap.alpha0}, {"alpha", it->second.shap.alpha}};
    body["warning"] = it->second.warning ? ojson(*it->second.warning) : ojson(nullptr);
    return {200, std::move(body)};
}

ApiResponse ReviewService::review(const std::string& id, const json& body) {
    if (!body.is_object()) return error_response(400, "body must be a JSON object");
    const std::string decision = body.value("decision", std::string{});
    if (decision != "confirm" && decision != "reject") {
        return error_response(400, "decision must be 'confirm' or 'reject'", "decision");
    }
    std::optional<std::string> note;
    if (body.contains("note") && !body.at("note").is_null()) {
        if (!body.at("note").is_string()) return error_response(400, "note must be a string", "note");
        note = body.at("note").get<std::string>();
    }
    const std::string actor = body.value("actor", std::string("reviewer"));

    std::lock_guard writer(write_mutex_);
    const auto current = snapshot();
    auto it = current->records.find(id);
    if (it == current->records.end()) return error_response(404, "unknown instance " + id);
    if (!reviewable(it->second.status)) {
        return error_response(409, "instance " + id + " is " + to_string(it->second.status));
    }

    auto next = std::make_shared<ReviewState>(*current);
    std::vector<ReviewEvent> events;
    ReviewEvent e;
    e.timestamp = utc_now();
    e.instance_id = id;
    e.action = decision == "confirm" ? ReviewAction::Confirm : ReviewAction::Reject;
    e.actor = actor;
    e.note = note;
    events.push_back(e);
    apply_event(*next, e);

    std::vector<std::string> flagged_ids;
    if (e.action == ReviewAction::Confirm) {
        const DetectionRecord& rec = it->second;
        const auto has_record = [&](const ImageEntry& entry) { return current->records.contains(entry.id); };
        const RetrievalResult hits =
            similar_instances(*bundle_, rec.predicted_class, FeatureIndex{rec.top_feature}, id,
                              options_.auto_flag_top_n, has_record);
        flagged_ids = auto_flag(next->records, hits, options_.auto_flag_top_n);
        for (const auto& target : flagged_ids) {
            ReviewEvent af;
            af.timestamp = e.timestamp;
            af.instance_id = target;
            af.action = ReviewAction::AutoFlag;
            af.actor = actor;
            af.feature = rec.top_feature;
            af.source_instance = id;
            next->groups[id].push_back(target);
            events.push_back(std::move(af));
        }
    }

    append_events(events);
    {
        std::lock_guard lock(snapshot_mutex_);
        state_ = next;
    }

    ApiResponse resp;
    resp.body["record"] = summary_item(next->records.at(id));
    resp.body["auto_flagged"] = flagged_ids;
    return resp;
}

ApiResponse ReviewService::similar(const std::string& id, const Query& query) const {
    int n = 4;
    if (auto q = query.find("n"); q != query.end()) {
        const auto v = parse_int(q->second);
        if (!v || *v < 1) return error_response(400, "n must be an integer >= 1", "n");
        n = *v;
    }
    const auto state = snapshot();
    auto it = state->records.find(id);
    if (it == state->records.end()) return error_response(404, "unknown instance " + id);
    const DetectionRecord& rec = it->second;
    const auto has_record = [&](const ImageEntry& entry) { return state->records.contains(entry.id); };
    const RetrievalResult result =
        similar_instances(*bundle_, rec.predicted_class, FeatureIndex{rec.top_feature}, id, n, has_record);

    ApiResponse resp;
    resp.body["query_instance"] = result.query_instance;
    resp.body["class_index"] = result.class_index;
    resp.body["feature"] = result.feature.k;
    auto hits = ojson::array();
    for (const auto& h : result.ranked) {
        const DetectionRecord& hr = state->records.at(h.instance_id);
        ojson jh;
        jh["instance_id"] = h.instance_id;
        jh["score"] = h.score;
        jh["status"] = to_string(hr.status);
        jh["gc_url"] = hr.gc_map_path.empty() ? ojson(nullptr) : ojson(media_url(h.instance_id, "gc"));
        jh["rf_url"] = hr.rf_map_path.empty() ? ojson(nullptr) : ojson(media_url(h.instance_id, "rf"));
        hits.push_back(std::move(jh));
    }
    resp.body["hits"] = std::move(hits);
    return resp;
}

ApiResponse ReviewService::summary() const {
    const auto state = snapshot();
    const int num_classes = bundle_->manifest().num_classes;
    std::map<std::string, int> by_status;
    for (auto s : {ReviewStatus::Pending, ReviewStatus::Confirmed, ReviewStatus::Rejected,
                   ReviewStatus::Diagnostic, ReviewStatus::AutoFlagged}) {
        by_status[to_string(s)] = 0;
    }
    std::vector<std::array<int, 4>> per_class(num_classes, {0, 0, 0, 0});  // records, flagged, confirmed, auto
    int flagged = 0;
    for (const auto& [id, r] : state->records) {
        ++by_status[to_string(r.status)];
        auto& pc = per_class.at(r.predicted_class);
        ++pc[0];
        if (r.flagged) {
            ++flagged;
            ++pc[1];
        }
        if (r.status == ReviewStatus::Confirmed) ++pc[2];
        if (r.status == ReviewStatus::AutoFlagged) ++pc[3];
    }

    ApiResponse resp;
    resp.body["total"] = state->records.size();
    resp.body["flagged"] = flagged;
    resp.body["theta"] = options_.theta;
    ojson statuses;
    for (const auto& [k, v] : by_status) statuses[k] = v;
    resp.body["by_status"] = std::move(statuses);
    auto classes = ojson::array();
    for (int c = 0; c < num_classes; ++c) {
        classes.push_back({{"class_index", c},
                           {"records", per_class[c][0]},
                           {"flagged", per_class[c][1]},
                           {"confirmed", per_class[c][2]},
                           {"auto_flagged", per_class[c][3]}});
    }
    resp.body["classes"] = std::move(classes);
    ojson groups = ojson::object();
    for (const auto& [id, ids] : state->groups) groups[id] = ids;
    resp.body["groups"] = std::move(groups);
    return resp;
}

std::optional<fs::path> ReviewService::media_path(const std::string& id, const std::string& kind) const {
    const auto state = snapshot();
    auto it = state->records.find(id);
    if (it == state->records.end()) return std::nullopt;
    const std::string& rel = kind == "rf" ? it->second.rf_map_path : it->second.gc_map_path;
    if (rel.empty() || (kind != "rf" && kind != "gc")) return std::nullopt;
    const fs::path p = options_.run_dir / rel;
    if (!fs::exists(p)) return std::nullopt;
    return p;
}

void ReviewService::bind(httplib::Server& server) {
    server.Get("/api/health", [this](const httplib::Request&, httplib::Response& res) { serve_json(res, health()); });
    server.Get("/api/summary", [this](const httplib::Request&, httplib::Response& res) { serve_json(res, summary()); });
    server.Get("/api/schema", [](const httplib::Request&, httplib::Response& res) {
        res.set_content(api_schemas().dump(), "application/json");
    });
    server.Get("/api/instances", [this](const httplib::Request& req, httplib::Response& res) {
        serve_json(res, list_instances(query_of(req)));
    });
    server.Get(R"(/api/instances/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
        serve_json(res, get_instance(req.matches[1]));
    });
    server.Get(R"(/api/instances/([^/]+)/similar)", [this](const httplib::Request& req, httplib::Response& res) {
        serve_json(res, similar(req.matches[1], query_of(req)));
    });
    server.Post(R"(/api/instances/([^/]+)/review)", [this](const httplib::Request& req, httplib::Response& res) {
        json body = json::parse(req.body, nullptr, false);
        if (body.is_discarded()) {
            serve_json(res, error_response(400, "body is not valid JSON"));
            return;
        }
        try {
            serve_json(res, review(req.matches[1], body));
        } catch (const std::exception& e) {
            serve_json(res, error_response(500, e.what()));
        }
    });
    server.Get(R"(/media/([^/]+)/(rf|gc)\.png)", [this](const httplib::Request& req, httplib::Response& res) {
        const auto path = media_path(req.matches[1], req.matches[2]);
        if (!path) {
            serve_json(res, error_response(404, "no heatmap"));
            return;
        }
        std::ifstream in(*path, std::ios::binary);
        res.set_content(std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()),
                        "image/png");
    });
    if (options_.static_dir && server.set_mount_point("/", options_.static_dir->string())) return;
    server.Get("/", [](const httplib::Request&, httplib::Response& res) {
        res.set_content(kPlaceholderPage, "text/html");
    });
}

const json& api_schemas() {
    static const json schemas = [] {
        auto str = json{{"type", "string"}};
        auto integer = json{{"type", "integer"}};
        auto number = json{{"type", "number"}};
        auto boolean = json{{"type", "boolean"}};
        auto nullable_str = json{{"type", json::array({"string", "null"})}};
        auto status = json{{"type", "string"},
                           {"enum", {"pending", "confirmed", "rejected", "diagnostic", "auto_flagged"}}};
        auto object = [](json properties) {
            json required = json::array();
            for (auto it = properties.begin(); it != properties.end(); ++it) required.push_back(it.key());
            return json{{"type", "object"}, {"required", required}, {"properties", properties}};
        };
        auto array_of = [](json items) { return json{{"type", "array"}, {"items", items}}; };

        json summary_item = object({{"instance_id", str},
                                    {"predicted_class", integer},
                                    {"true_class", integer},
                                    {"class_name", str},
                                    {"dissimilarity", number},
                                    {"flagged", boolean},
                                    {"status", status},
                                    {"top_feature", integer},
                                    {"rf_url", nullable_str},
                                    {"gc_url", nullable_str}});
        json instance = summary_item;
        instance["properties"]["shap"] = object({{"alpha0", number}, {"alpha", array_of(number)}});
        instance["properties"]["warning"] = nullable_str;
        instance["required"].push_back("shap");
        instance["required"].push_back("warning");

        json s;
        s["error"] = json{{"type", "object"}, {"required", {"error"}},
                          {"properties", {{"error", str}, {"field", str}}}};
        s["health"] = object({{"status", json{{"type", "string"}, {"enum", {"ok"}}}}});
        s["instances"] = object({{"total", integer}, {"page", integer}, {"page_size", integer},
                                 {"items", array_of(summary_item)}});
        s["instance"] = instance;
        s["review"] = object({{"record", summary_item}, {"auto_flagged", array_of(str)}});
        s["similar"] = object({{"query_instance", str},
                               {"class_index", integer},
                               {"feature", integer},
                               {"hits", array_of(object({{"instance_id", str},
                                                         {"score", number},
                                                         {"status", status},
                                                         {"gc_url", nullable_str},
                                                         {"rf_url", nullable_str}}))}});
        s["summary"] = object({{"total", integer},
                               {"flagged", integer},
                               {"theta", number},
                               {"by_status", json{{"type", "object"}}},
                               {"classes", array_of(object({{"class_index", integer},
                                                            {"records", integer},
                                                            {"flagged", integer},
                                                            {"confirmed", integer},
                                                            {"auto_flagged", integer}}))},
                               {"groups", json{{"type", "object"}}}});
        return s;
    }();
    return schemas;
}

int serve(std::shared_ptr<const TensorBundle> bundle, ServiceOptions options, const std::string& listen_address) {
    const auto colon = listen_address.rfind(':');
    const auto port = colon == std::string::npos ? std::nullopt : parse_int(listen_address.substr(colon + 1));
    if (!port || *port < 0 || *port > 65535) {
        throw ValidationError("--listen must be HOST:PORT, got '" + listen_address + "'");
    }
    const std::string host = listen_address.substr(0, colon);

    ReviewService service(std::move(bundle), std::move(options));
    httplib::Server server;
    // SO_REUSEADDR only: the library default also sets SO_REUSEPORT, which would let a
    // second service share a busy port instead of failing.
    server.set_socket_options([](socket_t sock) {
        int yes = 1;
        setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
    });
    service.bind(server);
    if (!server.bind_to_port(host, *port)) {
        throw IoError("cannot listen on " + listen_address);
    }

    // Interrupts are handled on a dedicated thread so stop() runs outside signal context.
    sigset_t signals;
    sigemptyset(&signals);
    sigaddset(&signals, SIGINT);
    sigaddset(&signals, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &signals, nullptr);
    std::jthread watcher([&server, signals](std::stop_token) {
        int sig = 0;
        sigwait(&signals, &sig);
        spdlog::info("signal {} received, shutting down", sig);
        server.stop();
    });

    spdlog::info("review service listening on {}", listen_address);
    std::fprintf(stderr, "listening on %s\n", listen_address.c_str());
    server.listen_after_bind();
    watcher.detach();
    return 0;
}

}  // namespace rfcam
