#include "rfcam/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <thread>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "rfcam/errors.hpp"
#include "rfcam/fixtures.hpp"
#include "rfcam/retrieval.hpp"
#include "rfcam/review_service.hpp"

namespace rfcam {
namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;
using nlohmann::json;

namespace {

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("short write to " + path.string());
}

json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw NotFoundError("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

template <typename Fn>
void parallel_for(std::size_t count, int parallelism, Fn&& fn) {
    const int workers = std::clamp<int>(parallelism, 1, static_cast<int>(std::max<std::size_t>(count, 1)));
    if (workers == 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    for (int t = 0; t < workers; ++t) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < count; i = next++) fn(i);
        });
    }
}

// Options shared by the train/detect/serve family. Values given as flags win over
// values from --config, which win over defaults.
struct CommonFlags {
    std::string config_path;
    std::string bundle;
    std::string out;
    std::uint64_t seed = 42;
    int parallelism = 1;
    int rounds = 0, depth = 0;
    double lr = 0.0, theta = 0.0, mask_threshold = 0.0;

    CLI::Option* seed_opt = nullptr;
    CLI::Option* parallelism_opt = nullptr;
    CLI::Option* rounds_opt = nullptr;
    CLI::Option* depth_opt = nullptr;
    CLI::Option* lr_opt = nullptr;
    CLI::Option* theta_opt = nullptr;
    CLI::Option* mask_opt = nullptr;
};

void add_bundle_flags(CLI::App* app, CommonFlags& f) {
    app->add_option("--config", f.config_path, "JSON run configuration; flags override it");
    app->add_option("--bundle", f.bundle, "Tensor bundle directory");
    app->add_option("--out", f.out, "Output directory");
}

void add_boost_flags(CLI::App* app, CommonFlags& f) {
    f.rounds_opt = app->add_option("--rounds", f.rounds, "Boosting rounds (default 50)");
    f.depth_opt = app->add_option("--depth", f.depth, "Maximum tree depth (default 4)");
    f.lr_opt = app->add_option("--lr", f.lr, "Learning rate (default 0.1)");
    f.seed_opt = app->add_option("--seed", f.seed, "Seed recorded with the run (default 42)");
    f.parallelism_opt = app->add_option("--parallelism", f.parallelism, "Worker threads (default 1)");
}

void add_detection_flags(CLI::App* app, CommonFlags& f) {
    f.theta_opt = app->add_option("--theta", f.theta, "Dissimilarity threshold (default 15)");
    f.mask_opt = app->add_option("--mask-threshold", f.mask_threshold, "Mask intensity threshold (default 0.78)");
    if (!f.parallelism_opt) {
        f.parallelism_opt = app->add_option("--parallelism", f.parallelism, "Worker threads (default 1)");
    }
}

RunConfig resolve_config(const CommonFlags& f) {
    RunConfig rc;
    if (!f.config_path.empty()) {
        const json j = read_json_file(f.config_path);
        rc.bundle = j.value("bundle", std::string{});
        rc.out = j.value("out", std::string{});
        rc.seed = j.value("seed", rc.seed);
        rc.parallelism = j.value("parallelism", rc.parallelism);
        if (j.contains("boost")) {
            const json& b = j.at("boost");
            rc.boost.num_rounds = b.value("num_rounds", rc.boost.num_rounds);
            rc.boost.max_depth = b.value("max_depth", rc.boost.max_depth);
            rc.boost.learning_rate = b.value("learning_rate", rc.boost.learning_rate);
            rc.boost.min_child_cover = b.value("min_child_cover", rc.boost.min_child_cover);
            rc.boost.l2_regularization = b.value("l2_regularization", rc.boost.l2_regularization);
            rc.boost.positive_weight = b.value("positive_weight", rc.boost.positive_weight);
        }
        if (j.contains("detection")) {
            const json& d = j.at("detection");
            rc.detection.mask_threshold = d.value("mask_threshold", rc.detection.mask_threshold);
            rc.detection.mse_threshold = d.value("mse_threshold", rc.detection.mse_threshold);
        }
    }
    auto given = [](const CLI::Option* o) { return o != nullptr && o->count() > 0; };
    if (!f.bundle.empty()) rc.bundle = f.bundle;
    if (!f.out.empty()) rc.out = f.out;
    if (given(f.seed_opt)) rc.seed = f.seed;
    if (given(f.parallelism_opt)) rc.parallelism = f.parallelism;
    if (given(f.rounds_opt)) rc.boost.num_rounds = f.rounds;
    if (given(f.depth_opt)) rc.boost.max_depth = f.depth;
    if (given(f.lr_opt)) rc.boost.learning_rate = f.lr;
    if (given(f.theta_opt)) rc.detection.mse_threshold = f.theta;
    if (given(f.mask_opt)) rc.detection.mask_threshold = f.mask_threshold;
    rc.boost.seed = rc.seed;
    if (rc.bundle.empty()) throw ValidationError("--bundle is required");
    rc.validate();
    return rc;
}

int run_fixture_gen(const FixtureSpec& spec, const std::string& out) {
    const FixtureOutput fx = fixture_gen(spec, out);
    int test = 0, correct = 0;
    for (const auto& e : fx.bundle.images()) {
        if (e.split != Split::Test) continue;
        ++test;
        correct += e.correct() ? 1 : 0;
    }
    std::cout << fmt::format("wrote {} instances to {} (head test accuracy {:.4f})\n",
                             fx.bundle.images().size(), out, test ? double(correct) / test : 0.0);
    return 0;
}

int run_train(const RunConfig& rc) {
    const TensorBundle bundle = load_bundle(rc.bundle);
    const fs::path out = rc.out.empty() ? rc.bundle / "surrogates" : rc.out;
    const TrainSummary summary = train_surrogates(bundle, rc.boost, rc.parallelism);
    save_surrogates(out, summary);
    std::cout << fmt::format("trained {} surrogates into {} (mean test accuracy {:.4f}, weighted {:.4f})\n",
                             summary.models.size(), out.string(), summary.macro_test_accuracy,
                             summary.weighted_test_accuracy);
    for (int c : summary.unavailable_classes) {
        std::cout << fmt::format("class {}: no training instances, surrogate unavailable\n", c);
    }
    return 0;
}

int run_detect(const RunConfig& rc, const std::string& models_flag, bool render) {
    const TensorBundle bundle = load_bundle(rc.bundle);
    const fs::path models_dir = models_flag.empty() ? rc.bundle / "surrogates" : fs::path(models_flag);
    const SurrogateSet models = load_surrogates(models_dir, bundle.manifest().num_classes);
    const fs::path out = rc.out.empty() ? rc.bundle / "run" : rc.out;
    fs::create_directories(out);

    DetectOptions options;
    options.parallelism = rc.parallelism;
    if (render) options.render = RenderOptions{out, std::nullopt};
    DetectionRun run = detect_bundle(bundle, models, rc.detection, options);

    ojson echo;
    echo["bundle"] = rc.bundle.string();
    echo["models"] = models_dir.string();
    echo["seed"] = rc.seed;
    echo["parallelism"] = rc.parallelism;
    echo["render"] = render;
    for (auto& [k, v] : run.report.config_echo.items()) echo[k] = v;
    run.report.config_echo = std::move(echo);

    write_records(out / "records.jsonl", run.records);
    write_text(out / "report.json", report_to_json(run.report).dump(2) + "\n");
    std::cout << fmt::format("{} records, {} flagged, flag rate {:.4f} -> {}\n", run.report.records,
                             run.report.flagged, run.report.flag_rate, out.string());
    return 0;
}

int run_retrieve(const std::string& bundle_path, const std::string& instance, int top,
                 std::optional<int> feature) {
    const TensorBundle bundle = load_bundle(bundle_path);
    const ImageEntry* entry = bundle.find(instance);
    if (!entry) throw ValidationError("unknown instance " + instance);
    if (!feature) {
        const InstanceFeatures f = compute_instance_features(bundle, *entry);
        feature = top_feature(f.weights, f.means);
    }
    const RetrievalResult result =
        similar_instances(bundle, entry->predicted_label, FeatureIndex{*feature}, instance, top);
    std::cout << fmt::format("query {} class {} feature {}\n", instance, result.class_index, result.feature.k);
    std::cout << fmt::format("{:>4}  {:<24} {:>12}  {:>5}  {:>5}\n", "rank", "instance", "activation", "true", "pred");
    int rank = 0;
    for (const auto& hit : result.ranked) {
        const ImageEntry* e = bundle.find(hit.instance_id);
        std::cout << fmt::format("{:>4}  {:<24} {:>12.6f}  {:>5}  {:>5}\n", ++rank, hit.instance_id, hit.score,
                                 e->true_label, e->predicted_label);
    }
    return 0;
}

int run_report(const fs::path& run_dir) {
    const json rep = read_json_file(run_dir / "report.json");
    std::cout << fmt::format("records {}  correct {}  flagged {}  flag rate {:.4f}\n", rep.at("records").get<int>(),
                             rep.at("correct").get<int>(), rep.at("flagged").get<int>(),
                             rep.at("flag_rate").get<double>());
    std::cout << fmt::format("{:>5}  {:<16} {:>8} {:>8} {:>8} {:>10} {:>8}\n", "class", "name", "records", "correct",
                             "flagged", "flag_rate", "lsm_acc");
    for (const auto& c : rep.at("classes")) {
        std::cout << fmt::format("{:>5}  {:<16} {:>8} {:>8} {:>8} {:>10.4f} {:>8.4f}\n", c.at("class_index").get<int>(),
                                 c.at("class_name").get<std::string>(), c.at("records").get<int>(),
                                 c.at("correct").get<int>(), c.at("flagged").get<int>(),
                                 c.at("flag_rate").get<double>(), c.at("lsm_test_accuracy").get<double>());
    }
    return 0;
}

int exit_code_for(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Io:
        case ErrorKind::NotFound: return 2;
        default: return 1;
    }
}

}  // namespace

void RunConfig::validate() const {
    boost.validate();
    detection.validate();
    if (parallelism < 1) throw ValidationError("parallelism must be >= 1");
    if (!fs::exists(bundle)) throw NotFoundError("bundle not found: " + bundle.string());
}

TrainSummary train_surrogates(const TensorBundle& bundle, const BoostConfig& config, int parallelism) {
    const auto sets = build_misclassification_labels(bundle);
    std::vector<int> classes;
    for (const auto& [c, s] : sets) classes.push_back(c);

    std::vector<std::optional<TreeEnsemble>> trained(classes.size());
    parallel_for(classes.size(), parallelism, [&](std::size_t i) {
        const ClassExamples& s = sets.at(classes[i]);
        if (!s.available()) return;
        TreeEnsemble m = train_lsm(classes[i], s.train, config);
        m.metrics.train_count = static_cast<int>(s.train.size());
        m.metrics.test_count = static_cast<int>(s.test.size());
        m.metrics.train_accuracy = accuracy(m, s.train);
        m.metrics.test_accuracy = accuracy(m, s.test);
        trained[i] = std::move(m);
    });

    TrainSummary summary;
    double macro = 0.0, macro_train = 0.0, weighted = 0.0;
    int weight = 0;
    for (std::size_t i = 0; i < classes.size(); ++i) {
        if (!trained[i]) {
            summary.unavailable_classes.push_back(classes[i]);
            spdlog::warn("class {}: no training instances, surrogate unavailable", classes[i]);
            continue;
        }
        const LsmMetrics& m = trained[i]->metrics;
        macro += m.test_accuracy;
        macro_train += m.train_accuracy;
        weighted += m.test_accuracy * m.test_count;
        weight += m.test_count;
        summary.models.emplace(classes[i], std::move(*trained[i]));
    }
    if (!summary.models.empty()) {
        summary.macro_test_accuracy = macro / summary.models.size();
        summary.macro_train_accuracy = macro_train / summary.models.size();
    }
    summary.weighted_test_accuracy = weight ? weighted / weight : 0.0;
    return summary;
}

void save_surrogates(const fs::path& dir, const TrainSummary& summary) {
    fs::create_directories(dir);
    ojson metrics;
    auto classes = ojson::array();
    for (const auto& [c, m] : summary.models) {
        save_ensemble(dir / fmt::format("class_{}.lsm.json", c), m);
        classes.push_back({{"class_index", c},
                           {"train_accuracy", m.metrics.train_accuracy},
                           {"test_accuracy", m.metrics.test_accuracy},
                           {"train_count", m.metrics.train_count},
                           {"test_count", m.metrics.test_count},
                           {"trees", m.trees.size()}});
    }
    metrics["classes"] = std::move(classes);
    metrics["unavailable_classes"] = summary.unavailable_classes;
    metrics["macro_test_accuracy"] = summary.macro_test_accuracy;
    metrics["weighted_test_accuracy"] = summary.weighted_test_accuracy;
    metrics["macro_train_accuracy"] = summary.macro_train_accuracy;
    write_text(dir / "metrics.json", metrics.dump(2) + "\n");
}

SurrogateSet load_surrogates(const fs::path& dir, int num_classes) {
    SurrogateSet models;
    for (int c = 0; c < num_classes; ++c) {
        const fs::path p = dir / fmt::format("class_{}.lsm.json", c);
        if (fs::exists(p)) models.emplace(c, load_ensemble(p));
    }
    if (models.empty()) throw ValidationError("surrogates not found in " + dir.string() + " (run train first)");
    return models;
}

void init_logging() {
    static std::once_flag once;
    std::call_once(once, [] {
        auto logger = spdlog::stderr_color_mt("rfcam");
        spdlog::set_default_logger(logger);
        spdlog::set_level(spdlog::level::warn);
        if (const char* env = std::getenv("RFCAM_LOG")) {
            spdlog::set_level(spdlog::level::from_str(env));
        }
    });
}

int cli_main(int argc, const char* const* argv) {
    init_logging();
    CLI::App app{"Spurious-correlation detection with RF-CAM vs Grad-CAM saliency", "rfcam"};
    app.require_subcommand(1);

    FixtureSpec spec;
    std::string fixture_out;
    auto* fx = app.add_subcommand("fixture-gen", "Generate a synthetic bundle with planted spurious channels");
    fx->add_option("--out", fixture_out, "Output bundle directory")->required();
    fx->add_option("--seed", spec.seed, "Generator seed (default 42)");
    fx->add_option("--spurious-fraction", spec.spurious_fraction, "Fraction of spurious-reliant instances");
    fx->add_option("--hard-fraction", spec.hard_fraction, "Fraction of attenuated-core instances");
    fx->add_option("--noise", spec.noise_sigma, "Activation noise sigma");
    fx->add_option("--classes", spec.num_classes, "Number of classes");
    fx->add_option("--channels", spec.channels, "Channels K");
    fx->add_option("--map-size", spec.map_size, "Feature map height and width");
    fx->add_option("--train", spec.train_per_class, "Training instances per class");
    fx->add_option("--test", spec.test_per_class, "Test instances per class");

    CommonFlags train_flags;
    auto* train = app.add_subcommand("train", "Train one surrogate per class");
    add_bundle_flags(train, train_flags);
    add_boost_flags(train, train_flags);

    CommonFlags detect_flags;
    std::string models_dir;
    bool no_render = false;
    auto* detect = app.add_subcommand("detect", "Score every test instance and write records.jsonl and report.json");
    add_bundle_flags(detect, detect_flags);
    detect->add_option("--models", models_dir, "Surrogate directory (default BUNDLE/surrogates)");
    detect_flags.seed_opt = detect->add_option("--seed", detect_flags.seed, "Seed recorded with the run");
    add_detection_flags(detect, detect_flags);
    detect->add_flag("--no-render", no_render, "Skip heatmap PNGs");

    std::string retrieve_bundle, retrieve_instance;
    int retrieve_top = 10;
    std::optional<int> retrieve_feature;
    auto* retrieve = app.add_subcommand("retrieve", "Rank same-class instances by one neural feature");
    retrieve->add_option("--bundle", retrieve_bundle, "Tensor bundle directory")->required();
    retrieve->add_option("--instance", retrieve_instance, "Query instance id")->required();
    retrieve->add_option("--top", retrieve_top, "Number of hits (default 10)");
    retrieve->add_option("--feature", retrieve_feature, "Channel index (default: the instance's top feature)");

    std::string report_out, report_bundle;
    auto* report = app.add_subcommand("report", "Print per-class flag rates of a detection run");
    report->add_option("--out", report_out, "Run directory (default BUNDLE/run)");
    report->add_option("--bundle", report_bundle, "Tensor bundle directory");

    CommonFlags serve_flags;
    std::string listen = "127.0.0.1:8787", static_dir;
    int serve_top = 10;
    auto* serve_cmd = app.add_subcommand("serve", "Run the review service");
    add_bundle_flags(serve_cmd, serve_flags);
    serve_cmd->add_option("--listen", listen, "HOST:PORT (default 127.0.0.1:8787)");
    serve_cmd->add_option("--top", serve_top, "Instances auto-flagged per confirmation (default 10)");
    serve_cmd->add_option("--static", static_dir, "Directory of console assets served at /");
    serve_flags.theta_opt = serve_cmd->add_option("--theta", serve_flags.theta, "Threshold shown to reviewers");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n";
        const CLI::App* sub = nullptr;
        for (const auto* s : app.get_subcommands()) sub = s;
        std::cerr << (sub ? sub->help() : app.help());
        return 1;
    }

    try {
        if (*fx) return run_fixture_gen(spec, fixture_out);
        if (*train) return run_train(resolve_config(train_flags));
        if (*detect) return run_detect(resolve_config(detect_flags), models_dir, !no_render);
        if (*retrieve) return run_retrieve(retrieve_bundle, retrieve_instance, retrieve_top, retrieve_feature);
        if (*report) {
            if (report_out.empty() && report_bundle.empty()) throw ValidationError("report needs --out or --bundle");
            return run_report(report_out.empty() ? fs::path(report_bundle) / "run" : fs::path(report_out));
        }
        if (*serve_cmd) {
            const RunConfig rc = resolve_config(serve_flags);
            auto bundle = std::make_shared<const TensorBundle>(load_bundle(rc.bundle));
            ServiceOptions options;
            options.run_dir = rc.out.empty() ? rc.bundle / "run" : rc.out;
            options.auto_flag_top_n = serve_top;
            options.theta = rc.detection.mse_threshold;
            if (!static_dir.empty()) options.static_dir = static_dir;
            return serve(std::move(bundle), std::move(options), listen);
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code_for(e.kind());
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}

}  // namespace rfcam
