// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <chrono>
#include <cmath>
#include <cstring>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>

#include <fmt/format.h>

#include "oracles.hpp"
#include "rfcam/detector.hpp"
#include "rfcam/fixtures.hpp"
#include "rfcam/pipeline.hpp"
#include "rfcam/review_service.hpp"
#include "rfcam/saliency.hpp"
#include "rfcam/tree_shap.hpp"
#include "test_util.hpp"

using namespace rfcam;
namespace fs = std::filesystem;
using rfcam::testing::random_ensemble;
using rfcam::testing::random_tensor;
using rfcam::testing::random_vector;
using rfcam::testing::slurp;
using rfcam::testing::TempDir;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

int failures = 0;

void criterion(const std::string& name, double limit_seconds, const std::function<Outcome()>& body) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
        o = body();
    } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (secs >= limit_seconds) {
        o.pass = false;
        o.detail += fmt::format("; exceeded {:.0f} s limit", limit_seconds);
    }
    if (!o.pass) ++failures;
    std::cout << fmt::format("{} {:<34} {:>7.2f}s  {}", o.pass ? "PASS" : "FAIL", name, secs, o.detail)
              << std::endl;
}

int cli(std::vector<std::string> args) {
    args.insert(args.begin(), "rfcam");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    return cli_main(static_cast<int>(argv.size()), argv.data());
}

// fixture-gen -> train -> detect through the CLI, using paths relative to `cwd`.
void pipeline_in(const fs::path& cwd, const std::vector<std::string>& fixture_flags = {}) {
    const fs::path previous = fs::current_path();
    fs::current_path(cwd);
    std::ostringstream chatter;
    auto* saved = std::cout.rdbuf(chatter.rdbuf());
    std::vector<std::string> gen{"fixture-gen", "--seed", "42", "--out", "fx"};
    gen.insert(gen.end(), fixture_flags.begin(), fixture_flags.end());
    const int a = cli(gen);
    const int b = a == 0 ? cli({"train", "--bundle", "fx"}) : a;
    const int c = b == 0 ? cli({"detect", "--bundle", "fx"}) : b;
    std::cout.rdbuf(saved);
    fs::current_path(previous);
    if (c != 0) throw std::runtime_error(fmt::format("pipeline exit codes {} {} {}", a, b, c));
}

}  // namespace

int main() {
    TempDir work("rfcam-acceptance");

    criterion("shapley-local-accuracy", 10, [&] {
        const FixtureOutput fx = fixture_gen(FixtureSpec{}, work / "local");
        const TrainSummary trained = train_surrogates(fx.bundle, BoostConfig{}, 1);
        double worst = 0.0;
        std::size_t n = 0;
        for (const auto& e : fx.bundle.images()) {
            const auto it = trained.models.find(e.predicted_label);
            if (it == trained.models.end()) continue;
            const auto f = compute_instance_features(fx.bundle, e);
            const auto s = shap_for_instance(it->second, f.phi, e.id);
            worst = std::max(worst, std::abs(s.total() - predict_margin(it->second, f.phi)));
            ++n;
        }
        return Outcome{n == fx.bundle.images().size() && worst <= 1e-6,
                       fmt::format("{} instances, max |alpha0 + sum alpha - margin| = {:.2e}", n, worst)};
    });

    criterion("shapley-brute-force-equivalence", 60, [] {
        std::mt19937_64 rng(2024);
        double worst = 0.0;
        for (int trial = 0; trial < 200; ++trial) {
            const int k = 1 + trial % 8;
            const TreeEnsemble m = random_ensemble(rng, k, 3, 10);
            const auto x = random_vector(rng, k);
            const auto got = shap_for_instance(m, x).alpha;
            const auto want = oracle::brute_force_shap(m, x);
            for (int i = 0; i < k; ++i) worst = std::max(worst, std::abs(got[i] - want[i]));
        }
        return Outcome{worst <= 1e-9, fmt::format("200 ensembles, max per-feature error {:.2e}", worst)};
    });

    criterion("gradient-oracle", 10, [] {
        std::mt19937_64 rng(77);
        std::uniform_int_distribution<int> dim(1, 8), pow2(0, 3), classes(2, 6), channels(1, 24);
        int exact_f32 = 0, exact_f64 = 0, pow2_cases = 0;
        double worst_rel = 0.0;
        for (int trial = 0; trial < 100; ++trial) {
            const bool power_of_two = trial % 2 == 0;
            const int h = power_of_two ? 1 << pow2(rng) : dim(rng);
            const int w = power_of_two ? 1 << pow2(rng) : dim(rng);
            const int z = h * w, c = classes(rng), k = channels(rng);
            HeadWeights head{c, k, {}, random_vector(rng, c)};
            for (double v : random_vector(rng, c * k, -2, 2)) head.weights.push_back(static_cast<float>(v));
            const int cls = trial % c;
            const auto analytic = analytic_head_gradients(head, cls, z).values;

            Tensor grad;
            grad.shape = {static_cast<std::uint32_t>(k), static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(w)};
            for (int ch = 0; ch < k; ++ch) {
                for (int p = 0; p < z; ++p) grad.data.push_back(static_cast<float>(head.weight(cls, ch) / z));
            }
            const auto pooled = pool_gradients(grad).values;
            bool f32 = true, f64 = true;
            for (int ch = 0; ch < k; ++ch) {
                f32 = f32 && static_cast<float>(pooled[ch]) == static_cast<float>(analytic[ch]);
                f64 = f64 && pooled[ch] == analytic[ch];
            }
            exact_f32 += f32;
            if (power_of_two) {
                ++pow2_cases;
                exact_f64 += f64;
            }

            const auto a = random_vector(rng, k * z, 0, 1);
            const auto fd = oracle::finite_difference_weights(head, cls, a, k, z);
            for (int ch = 0; ch < k; ++ch) {
                const double denom = std::max(std::abs(analytic[ch]), 1e-12);
                if (analytic[ch] == 0.0 && fd[ch] == 0.0) continue;
                worst_rel = std::max(worst_rel, std::abs(fd[ch] - analytic[ch]) / denom);
            }
        }
        return Outcome{exact_f32 == 100 && exact_f64 == pow2_cases && worst_rel <= 1e-6,
                       fmt::format("pooled==analytic {}/100 (f32), {}/{} (f64, Z power of two); "
                                   "finite-difference max rel err {:.2e}",
                                   exact_f32, exact_f64, pow2_cases, worst_rel)};
    });

    criterion("weighted-activation-kernel", 5, [] {
        std::mt19937_64 rng(99);
        std::uniform_int_distribution<int> kd(1, 32), hd(1, 9);
        double worst = 0.0;
        for (int trial = 0; trial < 100; ++trial) {
            const Tensor a = random_tensor(rng, kd(rng), hd(rng), hd(rng));
            const auto coeffs = random_vector(rng, static_cast<int>(a.shape[0]));
            const auto got = weighted_activation_map(coeffs, a).data;
            const auto want = oracle::weighted_map(coeffs, a);
            for (std::size_t i = 0; i < got.size(); ++i) worst = std::max(worst, std::abs(got[i] - want[i]));
        }
        return Outcome{worst <= 1e-10, fmt::format("100 cases, max error {:.2e}", worst)};
    });

    criterion("surrogate-quality", 60, [&] {
        const FixtureOutput fx = fixture_gen(FixtureSpec{}, work / "quality");
        const TrainSummary trained = train_surrogates(fx.bundle, BoostConfig{}, 1);
        return Outcome{trained.macro_test_accuracy >= 0.95 && trained.unavailable_classes.empty(),
                       fmt::format("mean LSM test accuracy {:.4f} (weighted {:.4f}) over {} classes",
                                   trained.macro_test_accuracy, trained.weighted_test_accuracy,
                                   trained.models.size())};
    });

    criterion("detection-quality", 120, [&] {
        fs::create_directories(work / "detect-planted");
        pipeline_in(work / "detect-planted");
        const auto truth = read_ground_truth(work / "detect-planted/fx/ground_truth.json");
        const auto planted = score_detection(read_records(work / "detect-planted/fx/run/records.jsonl"), truth);

        fs::create_directories(work / "detect-clean");
        pipeline_in(work / "detect-clean", {"--spurious-fraction", "0"});
        const auto clean_truth = read_ground_truth(work / "detect-clean/fx/ground_truth.json");
        const auto clean = score_detection(read_records(work / "detect-clean/fx/run/records.jsonl"), clean_truth);

        const bool ok = planted.recall >= 0.9 && planted.precision >= 0.8 && clean.flag_rate <= 0.10;
        return Outcome{ok, fmt::format("recall {:.3f} ({}/{}), precision {:.3f}, flag rate {:.3f}; "
                                       "spurious_fraction=0 flag rate {:.3f}",
                                       planted.recall, planted.true_positives, planted.positives, planted.precision,
                                       planted.flag_rate, clean.flag_rate)};
    });

    criterion("dissimilarity-parameters", 1, [] {
        auto map_of = [](std::vector<double> d) {
            SaliencyMap m;
            m.height = 2;
            m.width = 2;
            m.data = std::move(d);
            return m;
        };
        const DetectionConfig cfg;
        const double hand = 100.0 * (1.0 - 0.1) * (1.0 - 0.1);
        const double score = dissimilarity(map_of({0.9, 0, 0, 0}), map_of({0.1, 0, 0, 0}), cfg);
        const double rounded = dissimilarity(map_of({0.9, 0, 0, 0}), map_of({0.85, 0, 0, 0}), cfg);
        return Outcome{score == hand && std::abs(score - 81.0) < 1e-12 && score > cfg.mse_threshold && rounded == 0.0,
                       fmt::format("2x2 case {:.17g} (hand {:.17g}), rounding case {}", score, hand, rounded)};
    });

    criterion("determinism", 240, [&] {
        for (const char* d : {"det-a", "det-b"}) {
            fs::create_directories(work / d);
            pipeline_in(work / d);
        }
        const bool records = slurp(work / "det-a/fx/run/records.jsonl") == slurp(work / "det-b/fx/run/records.jsonl");
        const bool report = slurp(work / "det-a/fx/run/report.json") == slurp(work / "det-b/fx/run/report.json");
        int pngs = 0, png_diffs = 0;
        for (const auto& e : fs::directory_iterator(work / "det-a/fx/run/heatmaps")) {
            ++pngs;
            png_diffs += slurp(e.path()) != slurp(work / "det-b/fx/run/heatmaps" / e.path().filename());
        }
        return Outcome{records && report && png_diffs == 0,
                       fmt::format("records.jsonl {}, report.json {}, {} heatmaps with {} differences",
                                   records ? "identical" : "DIFFER", report ? "identical" : "DIFFER", pngs,
                                   png_diffs)};
    });

    criterion("tensor-format-round-trip", 30, [&] {
        std::mt19937_64 rng(5);
        std::uniform_int_distribution<int> ndim(1, 4), extent(1, 8);
        std::uniform_int_distribution<std::uint32_t> bits;
        int ok = 0;
        for (int trial = 0; trial < 1000; ++trial) {
            std::vector<std::uint32_t> dims(ndim(rng));
            std::size_t n = 1;
            for (auto& d : dims) n *= (d = extent(rng));
            std::vector<float> data(n);
            for (auto& v : data) {
                do {
                    const std::uint32_t b = bits(rng);
                    std::memcpy(&v, &b, 4);
                } while (!std::isfinite(v));
            }
            write_tensor(work / "rt.scdt", dims, data);
            const Tensor t = read_tensor(work / "rt.scdt");
            ok += t.shape == dims && std::memcmp(t.data.data(), data.data(), n * 4) == 0;
        }
        return Outcome{ok == 1000, fmt::format("{}/1000 bit-exact", ok)};
    });

    // Secondary: the review loop on the planted fixture run.
    criterion("review-loop (secondary)", 60, [&] {
        const fs::path run = work / "detect-planted/fx/run";
        auto bundle = std::make_shared<const TensorBundle>(load_bundle(work / "detect-planted/fx"));
        const auto truth = read_ground_truth(work / "detect-planted/fx/ground_truth.json");
        ServiceOptions options;
        options.run_dir = run;
        std::string target;
        for (const auto& r : read_records(run / "records.jsonl")) {
            if (r.flagged && truth.find(r.instance_id)->is_spurious_reliant()) {
                target = r.instance_id;
                break;
            }
        }
        ReviewService first(bundle, options);
        const auto resp = first.review(target, {{"decision", "confirm"}});
        const std::size_t flagged = resp.body["auto_flagged"].size();
        const std::string before = first.summary().body.dump();
        ReviewService second(bundle, options);
        const bool replay = second.summary().body.dump() == before;
        return Outcome{resp.status == 200 && flagged >= 3 && replay,
                       fmt::format("confirm {} -> {} auto-flagged; restart summary {}", target, flagged,
                                   replay ? "identical" : "DIFFERS")};
    });

    std::cout << (failures == 0 ? "all criteria passed" : fmt::format("{} criteria failed", failures)) << std::endl;
    return failures == 0 ? 0 : 1;
}
