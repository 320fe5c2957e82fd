#pragma once

// The swinpg command line: train, enhance, evaluate, simulate, gradcheck.
// Machine-readable output is one JSON object per line on `out`; diagnostics
// go to `err` as a single line.
//
// Exit codes: 0 ok, 1 usage, 2 config, 3 IO, 4 numerical or contract failure.

#include <cmath>
#include <filesystem>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "swinpg/checkpoint.hpp"
#include "swinpg/gradcheck.hpp"
#include "swinpg/metrics.hpp"

namespace swinpg::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kConfig = 2, kIo = 3, kNumerical = 4 };

inline constexpr int kGradCheckSeeds = 3;

/// Pairs for training (`eval` false) or held-out evaluation.
inline std::vector<ImagePair> load_pairs(const DataConfig& d, bool eval) {
    std::vector<ImagePair> pairs;
    if (d.source == "simulated") {
        pairs = eval ? generate_dataset(d.eval_pairs, d.image_size, d.eval_seed) : generate_dataset(d.n_pairs, d.image_size, d.seed);
    } else if (!d.manifest.empty()) {
        pairs = load_manifest(d.manifest, d.image_size);
    } else {
        const auto& split = eval ? d.eval_split : d.split;
        pairs = load_euvp_dir(d.root, split == "train" ? Split::train : Split::validation, d.image_size);
    }
    if (pairs.empty()) {
        throw IoError("no image pairs found (" + (d.manifest.empty() ? d.root : d.manifest) + ")");
    }
    return pairs;
}

namespace detail {

inline std::string json_diff(const Json& ckpt, const Json& cfg) {
    std::string diff;
    for (const auto& [key, value] : ckpt.items()) {
        const auto other = cfg.contains(key) ? cfg.at(key) : Json();
        if (other != value) diff += " " + key + " (checkpoint " + value.dump() + ", config " + other.dump() + ")";
    }
    return diff;
}

}  // namespace detail

/// Throws ConfigError naming every field where the checkpoint's model and
/// training settings differ from the config. `epochs` may differ.
inline void require_matching_config(const TrainingState& s, const RunConfig& cfg, bool check_training) {
    auto diff = detail::json_diff(to_json(s.model), to_json(cfg.model));
    if (check_training) {
        auto a = s.train, b = cfg.training;
        a.epochs = b.epochs = 0;
        diff += detail::json_diff(to_json(a), to_json(b));
    }
    if (!diff.empty()) throw ConfigError("checkpoint does not match config:" + diff);
}

inline Enhancer model_enhancer(Generator<float>& g, int64_t size) {
    return [&g, size](const ImagePair& p) {
        return from_signed_tensor(enhance_batch(g, reshape(p.degraded, {1, 3, size, size})));
    };
}

inline Json epoch_json(const EpochStats& e) {
    return Json{{"epoch", e.epoch}, {"steps", e.steps}, {"loss_d", e.loss_d}, {"loss_g", e.loss_g}, {"l1", e.l1}};
}

// ---------------------------------------------------------------- subcommands

inline int cmd_train(const std::string& config_path, const std::string& resume, std::ostream& out, std::ostream& err) {
    const auto cfg = load_run_config(config_path);
    TrainingState s;
    if (resume.empty()) {
        s = make_training_state(cfg.model, cfg.training);
    } else {
        s = load_checkpoint(resume);
        require_matching_config(s, cfg, true);
        s.train.epochs = cfg.training.epochs;
    }
    const auto pairs = load_pairs(cfg.data, false);
    err << "training on " << pairs.size() << " pairs, epochs " << s.epoch + 1 << ".." << cfg.training.epochs << '\n';
    while (s.epoch < cfg.training.epochs) {
        const auto stats = train_epoch(s, pairs);
        if (!std::isfinite(stats.loss_d) || !std::isfinite(stats.loss_g) || !std::isfinite(stats.l1)) {
            throw ContractError("non-finite loss in epoch " + std::to_string(stats.epoch));
        }
        save_checkpoint(s, cfg.output.checkpoint_path);
        out << epoch_json(stats).dump() << '\n';
    }
    if (cfg.training.epochs == 0 || s.epoch == 0) save_checkpoint(s, cfg.output.checkpoint_path);
    return kOk;
}

inline int cmd_enhance(const std::string& ckpt, const std::string& input, const std::string& output,
                       const std::string& config_path, std::ostream& out) {
    auto s = load_checkpoint(ckpt);
    if (!config_path.empty()) require_matching_config(s, load_run_config(config_path), false);
    const int64_t size = s.model.image_size;
    const auto x = reshape(to_signed_tensor(resize_bilinear(to_float(read_ppm(input)), size, size)), {1, 3, size, size});
    const auto y = enhance_batch(s.generator, x);
    write_ppm(to_8bit(from_signed_tensor(y)), output);
    out << Json{{"input", input}, {"output", output}, {"size", size}}.dump() << '\n';
    return kOk;
}

inline int cmd_evaluate(const std::string& ckpt, const std::string& config_path, const std::string& baseline,
                        const std::string& report_path, std::ostream& out) {
    const auto cfg = load_run_config(config_path);
    const auto pairs = load_pairs(cfg.data, true);
    MetricReport report;
    if (baseline.empty()) {
        auto s = load_checkpoint(ckpt);
        require_matching_config(s, cfg, false);
        report = evaluate_dataset(pairs, model_enhancer(s.generator, s.model.image_size), "none", config_digest(cfg));
    } else {
        report = evaluate_dataset(pairs, baseline == "identity" ? Enhancer(identity_enhance) : Enhancer(histeq_enhance), baseline,
                                  config_digest(cfg));
    }
    const auto path = report_path.empty() ? cfg.output.report_path : report_path;
    const auto text = to_json(report).dump(2) + "\n";
    write_file(path, std::vector<uint8_t>(text.begin(), text.end()));
    const auto j = to_json(report);
    out << Json{{"report", path},
                {"baseline", report.baseline},
                {"images", report.images.size()},
                {"psnr_mean", j["aggregate"]["psnr_mean"]},
                {"ssim_mean", j["aggregate"]["ssim_mean"]},
                {"uiqm_mean", j["aggregate"]["uiqm_mean"]}}
               .dump()
        << '\n';
    return kOk;
}

inline int cmd_simulate(const std::string& config_path, const std::string& dir, std::ostream& out) {
    const auto cfg = load_run_config(config_path);
    const std::filesystem::path root(dir);
    std::error_code ec;
    std::filesystem::create_directories(root, ec);
    if (ec) throw IoError("cannot create " + root.string() + ": " + ec.message());
    Json manifest{{"pairs", Json::array()}};
    for (const auto& p : generate_dataset(cfg.data.n_pairs, cfg.data.image_size, cfg.data.seed)) {
        const auto a = p.id + "_A.ppm", b = p.id + "_B.ppm";
        write_ppm(to_8bit(from_signed_tensor(p.degraded)), root / a);
        write_ppm(to_8bit(from_signed_tensor(p.reference)), root / b);
        manifest["pairs"].push_back({{"a", a}, {"b", b}});
        out << Json{{"id", p.id}, {"a", (root / a).string()}, {"b", (root / b).string()}}.dump() << '\n';
    }
    const auto text = manifest.dump(2) + "\n";
    write_file(root / "manifest.json", std::vector<uint8_t>(text.begin(), text.end()));
    return kOk;
}

inline int cmd_gradcheck(const std::string& op, std::ostream& out) {
    const auto ops = op.empty() ? gradcheck_ops() : std::vector<std::string>{op};
    if (!op.empty() && !gradcheck_registry().count(op)) throw LookupError("unknown op \"" + op + "\"");
    bool all = true;
    for (const auto& name : ops) {
        double worst = 0.0, tolerance = 0.0;
        int64_t skipped = 0;
        bool passed = true;
        for (int seed = 0; seed < kGradCheckSeeds; ++seed) {
            const auto r = gradcheck(name, static_cast<uint64_t>(seed));
            worst = std::max(worst, r.max_relative_error);
            tolerance = r.tolerance;
            skipped += r.nonsmooth_skipped;
            passed = passed && r.passed;
        }
        all = all && passed;
        out << Json{{"op", name}, {"max_relative_error", swinpg::detail::metric_json(worst)}, {"tolerance", tolerance},
                    {"seeds", kGradCheckSeeds}, {"nonsmooth_skipped", skipped}, {"passed", passed}}
                   .dump()
            << '\n';
    }
    return all ? kOk : kNumerical;
}

// ---------------------------------------------------------------- entry point

namespace detail {

inline std::string one_line(std::string s) {
    for (auto& c : s)
        if (c == '\n' || c == '\r') c = ' ';
    return s;
}

}  // namespace detail

inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Swin-UNet + PatchGAN underwater image enhancement", "swinpg"};
    app.require_subcommand(1);

    std::string config, resume, ckpt, input, output, baseline, report, dir, op;
    auto* train = app.add_subcommand("train", "train from a JSON config, one JSON line per epoch");
    train->add_option("--config", config, "RunConfig JSON")->required();
    train->add_option("--resume", resume, "checkpoint to continue from");

    auto* enhance = app.add_subcommand("enhance", "enhance one PPM image");
    enhance->add_option("--ckpt", ckpt, "checkpoint")->required();
    enhance->add_option("--input", input, "input PPM")->required();
    enhance->add_option("--output", output, "output PPM")->required();
    enhance->add_option("--config", config, "RunConfig whose model must match the checkpoint");

    auto* evaluate = app.add_subcommand("evaluate", "score a checkpoint or a baseline on held-out pairs");
    evaluate->add_option("--ckpt", ckpt, "checkpoint (not needed with --baseline)");
    evaluate->add_option("--config", config, "RunConfig JSON")->required();
    evaluate->add_option("--baseline", baseline, "identity | histeq")->check(CLI::IsMember({"identity", "histeq"}));
    evaluate->add_option("--report", report, "report path (default: output.report_path)");

    auto* simulate = app.add_subcommand("simulate", "write simulated pairs as PPMs plus manifest.json");
    simulate->add_option("--config", config, "RunConfig JSON")->required();
    simulate->add_option("--out", dir, "output directory")->required();

    auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient checks, one JSON line per op");
    grad->add_option("--op", op, "single op name");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        app.exit(e, out, err);
        return kOk;
    } catch (const CLI::CallForAllHelp& e) {
        app.exit(e, out, err);
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << "swinpg: usage error: " << detail::one_line(e.what()) << '\n';
        return kUsage;
    }

    try {
        if (*train) return cmd_train(config, resume, out, err);
        if (*enhance) return cmd_enhance(ckpt, input, output, config, out);
        if (*evaluate) {
            if (baseline.empty() && ckpt.empty()) {
                err << "swinpg: usage error: evaluate needs --ckpt or --baseline\n";
                return kUsage;
            }
            return cmd_evaluate(ckpt, config, baseline, report, out);
        }
        if (*simulate) return cmd_simulate(config, dir, out);
        if (*grad) return cmd_gradcheck(op, out);
    } catch (const LookupError& e) {
        err << "swinpg: usage error: " << detail::one_line(e.what()) << '\n';
        return kUsage;
    } catch (const ConfigError& e) {
        err << "swinpg: config error: " << detail::one_line(e.what()) << '\n';
        return kConfig;
    } catch (const IoError& e) {
        err << "swinpg: io error: " << detail::one_line(e.what()) << '\n';
        return kIo;
    } catch (const std::exception& e) {
        err << "swinpg: error: " << detail::one_line(e.what()) << '\n';
        return kNumerical;
    }
    return kUsage;
}

}  // namespace swinpg::cli
