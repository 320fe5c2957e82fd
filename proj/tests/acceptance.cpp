// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "swinpg/cli.hpp"

using namespace swinpg;
namespace fs = std::filesystem;

namespace {

// pinned tolerances
constexpr double kAttentionTol = 1e-5;
constexpr double kLossTol = 1e-6;
constexpr double kSsimConstantTol = 1e-6;
constexpr double kPsnrPublished = 24.0486;
constexpr double kPsnrPublishedTol = 5e-4;
constexpr double kOverfitTarget = 0.05;
constexpr int kOverfitSteps = 300;
constexpr int kSmokeSteps = 200;
constexpr int kSmokePairs = 8;
constexpr double kSmokePsnrGain = 2.0;

// regression constants of the smoke protocol, seed 0
constexpr double kSmokePsnr = 16.045;
constexpr double kSmokeSsim = 0.5034;
constexpr double kIdentityPsnr = 13.394;
constexpr double kIdentitySsim = 0.7554;
constexpr double kRegressionPsnrTol = 0.1;
constexpr double kRegressionSsimTol = 0.01;

struct Outcome {
    bool pass = true;
    std::string detail;

    void check(bool ok, const std::string& what) {
        if (!ok) pass = false;
        if (!detail.empty()) detail += "; ";
        detail += (ok ? "" : "FAILED ") + what;
    }
};

std::string fmt(double v, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*g", digits + 2, v);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Tensor random_tensor(Shape shape, uint64_t seed) {
    Rng rng(seed);
    return Tensor::uniform(std::move(shape), rng, -1.0, 1.0);
}

WindowAttention<float> random_attention(int64_t dim, int64_t heads, int64_t window, uint64_t seed) {
    Rng rng(seed);
    auto p = WindowAttention<float>::make(dim, heads, window, rng);
    for (auto* t : {&p.qkv.weight, &p.qkv.bias, &p.proj.weight, &p.proj.bias, &p.bias_table})
        for (auto& v : t->mutable_data()) v = static_cast<float>(rng.uniform(-0.5, 0.5));
    return p;
}

/// Double-precision attention over one window row of `x`; token pairs with
/// different labels never attend to each other.
std::vector<double> oracle_attention(const Tensor& x, int64_t row, const WindowAttention<float>& p, const std::vector<int>& labels,
                                     bool use_bias) {
    const int64_t n = x.dim(1), c = x.dim(2), hd = p.head_dim(), m = p.window, span = 2 * m - 1;
    const auto* xs = x.data().data() + row * n * c;
    const auto wq = p.qkv.weight.data();
    const auto bq = p.qkv.bias.data();
    std::vector<double> qkv(static_cast<std::size_t>(n * 3 * c));
    for (int64_t t = 0; t < n; ++t)
        for (int64_t o = 0; o < 3 * c; ++o) {
            double s = bq[o];
            for (int64_t i = 0; i < c; ++i) s += double(xs[t * c + i]) * wq[i * 3 * c + o];
            qkv[t * 3 * c + o] = s;
        }
    std::vector<double> heads(static_cast<std::size_t>(n * c), 0.0);
    for (int64_t h = 0; h < p.heads; ++h)
        for (int64_t i = 0; i < n; ++i) {
            std::vector<double> w(static_cast<std::size_t>(n), 0.0);
            double mx = -INFINITY;
            for (int64_t j = 0; j < n; ++j) {
                if (labels[i] != labels[j]) continue;
                double s = 0;
                for (int64_t d = 0; d < hd; ++d) s += qkv[i * 3 * c + h * hd + d] * qkv[j * 3 * c + c + h * hd + d];
                s /= std::sqrt(double(hd));
                if (use_bias) {
                    const int64_t dr = i / m - j / m, dc = i % m - j % m;
                    s += p.bias_table.data()[((dr + m - 1) * span + dc + m - 1) * p.heads + h];
                }
                w[j] = s;
                mx = std::max(mx, s);
            }
            double z = 0;
            for (int64_t j = 0; j < n; ++j) z += (w[j] = labels[i] == labels[j] ? std::exp(w[j] - mx) : 0.0);
            for (int64_t j = 0; j < n; ++j)
                for (int64_t d = 0; d < hd; ++d) heads[i * c + h * hd + d] += w[j] / z * qkv[j * 3 * c + 2 * c + h * hd + d];
        }
    std::vector<double> out(static_cast<std::size_t>(n * c));
    for (int64_t t = 0; t < n; ++t)
        for (int64_t o = 0; o < c; ++o) {
            double s = p.proj.bias.data()[o];
            for (int64_t i = 0; i < c; ++i) s += heads[t * c + i] * p.proj.weight.data()[i * c + o];
            out[t * c + o] = s;
        }
    return out;
}

/// Region label of each token in window `wi` of a grid rolled by -shift:
/// whether its source row / column wrapped around the border.
std::vector<int> wrap_labels(int64_t size, int64_t m, int64_t shift, int64_t wi) {
    const int64_t per_row = size / m, r0 = (wi / per_row) * m, c0 = (wi % per_row) * m;
    std::vector<int> labels;
    for (int64_t i = 0; i < m * m; ++i) labels.push_back(int(r0 + i / m + shift >= size) * 2 + int(c0 + i % m + shift >= size));
    return labels;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (int64_t i = 0; i < a.numel(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

ModelConfig desk_at(int64_t size, BlockKind block, bool use_d) {
    auto cfg = ModelConfig::desk();
    cfg.image_size = size;
    cfg.block = block;
    cfg.use_discriminator = use_d;
    return cfg;
}

// ---------------------------------------------------------------- criteria

Outcome gradient_suite() {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    double worst_single = 0.0, worst_block = 0.0;
    for (const auto& op : gradcheck_ops()) {
        for (uint64_t seed = 0; seed < 3; ++seed) {
            const auto r = gradcheck(op, seed);
            if (op == "swin_block") worst_block = std::max(worst_block, r.max_relative_error);
            else if (r.tolerance == kSingleOpTolerance) worst_single = std::max(worst_single, r.max_relative_error);
            if (!r.passed) o.check(false, op + " seed " + std::to_string(seed) + " error " + fmt(r.max_relative_error));
        }
    }
    o.check(worst_single <= kSingleOpTolerance, std::to_string(gradcheck_ops().size()) + " ops x 3 seeds, single-op max " + fmt(worst_single));
    o.check(worst_block <= kCompositeTolerance, "swin_block max " + fmt(worst_block));
    o.check(true, "runtime " + fmt(seconds_since(t0), 2) + " s");
    return o;
}

Outcome attention_equivalence() {
    Outcome o;
    double worst = 0.0;
    for (uint64_t k = 0; k < 5; ++k) {
        auto p = random_attention(8, 2, 4, 100 + k);
        for (auto& v : p.bias_table.mutable_data()) v = 0.0f;
        const auto x = random_tensor({2, 16, 8}, 200 + k);
        const auto y = window_attention(x, p, Tensor());
        const std::vector<int> dense(16, 0);
        for (int64_t b = 0; b < 2; ++b) {
            const auto expect = oracle_attention(x, b, p, dense, false);
            for (int64_t i = 0; i < 128; ++i) worst = std::max(worst, std::abs(y[b * 128 + i] - expect[static_cast<std::size_t>(i)]));
        }
    }
    o.check(worst <= kAttentionTol, "5 instances, max abs error " + fmt(worst));
    return o;
}

Outcome shift_mask_oracle() {
    Outcome o;
    for (int64_t size : {4, 8}) {
        const int64_t m = 2, shift = 1, nw = (size / m) * (size / m), n = m * m;
        auto p = random_attention(8, 2, m, 300 + size);
        const auto mask = build_shift_mask<float>(size, size, m, shift);
        const auto x = random_tensor({nw, n, 8}, 400 + size);
        const auto y = window_attention(x, p, mask);
        double worst = 0.0;
        for (int64_t b = 0; b < nw; ++b) {
            const auto expect = oracle_attention(x, b, p, wrap_labels(size, m, shift, b), true);
            for (int64_t i = 0; i < n * 8; ++i) worst = std::max(worst, std::abs(y[b * n * 8 + i] - expect[static_cast<std::size_t>(i)]));
        }
        o.check(worst <= kAttentionTol, std::to_string(size) + "x" + std::to_string(size) + " max abs error " + fmt(worst));
    }
    return o;
}

Outcome structural_inverses() {
    Outcome o;
    bool partition = true, rolled = true;
    for (auto [h, w, m] : std::vector<std::array<int64_t, 3>>{{8, 8, 4}, {16, 16, 4}, {6, 9, 3}, {4, 4, 2}}) {
        const auto x = random_tensor({2, h, w, 5}, static_cast<uint64_t>(h * 31 + w));
        partition = partition && bit_equal(window_reverse(window_partition(x, m), m, h, w), x);
        for (int64_t s : {1, 2, -3}) rolled = rolled && bit_equal(roll(roll(x, s, s), -s, -s), x);
    }
    o.check(partition, "partition/reverse bit-exact");
    o.check(rolled, "roll/unroll bit-exact");
    const auto cfg = ModelConfig::desk();
    Rng rng(0);
    bool shapes = true;
    for (int64_t s = 0; s + 1 < cfg.num_stages(); ++s) {
        const int64_t r = cfg.stage_resolution(s), c = cfg.stage_dim(s);
        const auto merged = PatchMerge<float>::make(c, rng)(Tensor({1, r * r, c}), r, r);
        const auto restored = PatchExpand<float>::make(2 * c, 2, rng)(merged, r / 2, r / 2);
        shapes = shapes && restored.shape() == Shape{1, r * r, c};
    }
    o.check(shapes, "expand(merge) restores tokens and channels on " + std::to_string(cfg.num_stages() - 1) + " desk stages");
    return o;
}

Outcome shape_contracts() {
    Outcome o;
    auto d = build_discriminator(0);
    for (int64_t size : {224, 64}) {
        const int64_t expect = size == 224 ? 26 : 6;
        const auto y = discriminator_forward(d, random_tensor({1, 6, size, size}, 7));
        o.check(discriminator_output_size(size) == expect && y.shape() == Shape{1, 1, expect, expect},
                "D " + std::to_string(size) + " -> " + std::to_string(y.dim(2)) + "x" + std::to_string(y.dim(3)));
    }
    auto g = build_generator(ModelConfig::desk());
    const auto x = random_tensor({2, 3, 64, 64}, 8);
    const auto y = enhance_batch(g, x);
    bool inside = true;
    for (float v : y.data()) inside = inside && v > -1.0f && v < 1.0f;
    o.check(y.shape() == x.shape(), "G output shape " + shape_string(y.shape()));
    o.check(inside, "G values strictly inside (-1, 1)");
    return o;
}

Outcome loss_closed_forms() {
    Outcome o;
    using D = BasicTensor<double>;
    const D half({4, 1, 6, 6}, 0.5);
    const double ld = loss_discriminator(half, half)[0];
    o.check(std::abs(ld - 2.0 * std::log(2.0)) <= kLossTol, "L_D at 0.5 = " + fmt(ld, 8));
    Rng rng(9);
    const auto fake = D::uniform({2, 3, 8, 8}, rng, -1.0, 1.0), target = D::uniform({2, 3, 8, 8}, rng, -1.0, 1.0);
    const auto g1 = loss_generator(half, fake, target, 100.0), g2 = loss_generator(half, fake, target, 200.0);
    const double adv = g1.adversarial[0];
    o.check(std::abs(adv - std::log(2.0)) <= kLossTol, "adversarial at 0.5 = " + fmt(adv, 8));
    o.check(g2.weighted_l1[0] == 2.0 * g1.weighted_l1[0], "lambda doubling doubles L1 term exactly");
    return o;
}

Outcome overfit() {
    Outcome o;
    TrainConfig tc;
    tc.batch_size = 1;
    auto s = make_training_state(desk_at(32, BlockKind::swin, false), tc);
    const auto batch = make_batch(generate_dataset(1, 32, 0));
    const auto t0 = std::chrono::steady_clock::now();
    int reached = -1;
    double last = 0.0;
    for (int step = 1; step <= kOverfitSteps; ++step) {
        last = train_step(s, batch).l1;
        if (last < kOverfitTarget) {
            reached = step;
            break;
        }
    }
    o.check(reached > 0, reached > 0 ? "L1 " + fmt(last) + " < " + fmt(kOverfitTarget) + " at step " + std::to_string(reached)
                                     : "L1 " + fmt(last) + " after " + std::to_string(kOverfitSteps) + " steps");
    o.check(true, "runtime " + fmt(seconds_since(t0), 2) + " s");
    return o;
}

struct SmokeResult {
    MetricReport model;
    MetricReport identity;
    double final_l1 = 0.0;
};

SmokeResult smoke(BlockKind block) {
    auto s = make_training_state(desk_at(32, block, true), TrainConfig{});
    const auto train = generate_dataset(kSmokePairs, 32, 0);
    const auto held = generate_dataset(kSmokePairs, 32, 1);
    SmokeResult r;
    int64_t steps = 0;
    while (steps < kSmokeSteps) {
        const auto e = train_epoch(s, train);
        steps += e.steps;
        r.final_l1 = e.l1;
    }
    r.model = evaluate_dataset(held, cli::model_enhancer(s.generator, 32));
    r.identity = evaluate_dataset(held, identity_enhance);
    return r;
}

Outcome end_to_end(const SmokeResult& r) {
    Outcome o;
    const auto& m = r.model.aggregate;
    const auto& id = r.identity.aggregate;
    o.check(m.psnr_mean >= id.psnr_mean + kSmokePsnrGain, "PSNR " + fmt(m.psnr_mean) + " vs identity " + fmt(id.psnr_mean) + " (need +" +
                                                              fmt(kSmokePsnrGain) + " dB)");
    o.check(m.ssim_mean > id.ssim_mean, "SSIM " + fmt(m.ssim_mean) + " vs identity " + fmt(id.ssim_mean));
    const bool pinned = std::abs(m.psnr_mean - kSmokePsnr) <= kRegressionPsnrTol && std::abs(m.ssim_mean - kSmokeSsim) <= kRegressionSsimTol &&
                        std::abs(id.psnr_mean - kIdentityPsnr) <= kRegressionPsnrTol &&
                        std::abs(id.ssim_mean - kIdentitySsim) <= kRegressionSsimTol;
    o.check(pinned, "matches pinned regression values");
    return o;
}

Outcome ablation(const SmokeResult& swin, const SmokeResult& conv) {
    Outcome o;
    o.check(swin.final_l1 <= conv.final_l1, "final L1 swin " + fmt(swin.final_l1) + " vs conv " + fmt(conv.final_l1));
    return o;
}

Outcome metric_oracles() {
    Outcome o;
    Image x(3, 4, 4), y(3, 4, 4);
    Rng rng(2);
    for (std::size_t i = 0; i < x.pixels.size(); ++i) {
        x.pixels[i] = static_cast<float>(16 + rng.below(200));
        y.pixels[i] = x.pixels[i] + (rng.coin() ? 16.0f : -16.0f);
    }
    const double p = psnr(x, y, 255.0);
    o.check(std::abs(p - kPsnrPublished) <= kPsnrPublishedTol, "PSNR error 16 = " + fmt(p, 6));
    Image img(3, 16, 16);
    for (auto& v : img.pixels) v = static_cast<float>(rng.uniform());
    o.check(ssim(img, img) == 1.0, "SSIM(x,x) = 1");
    const double c1 = 0.01 * 0.01;
    const double expect = (2 * 0.25 * 0.75 + c1) / (0.25 * 0.25 + 0.75 * 0.75 + c1);
    const double got = ssim(Image(3, 16, 16, 0.25f), Image(3, 16, 16, 0.75f));
    o.check(std::abs(got - expect) <= kSsimConstantTol, "constant SSIM " + fmt(got, 8));
    const auto parts = uiqm_parts(Image(3, 32, 32, 128.0f / 255.0f));
    o.check(parts.uicm == 0.0 && parts.uism == 0.0, "mid-gray UICM " + fmt(parts.uicm) + " UISM " + fmt(parts.uism));
    return o;
}

struct CliRun {
    int code;
    std::string out;
};

CliRun run_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "swinpg");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str()};
}

std::string slurp(const fs::path& p) {
    const auto b = read_file(p);
    return {b.begin(), b.end()};
}

Outcome persistence() {
    Outcome o;
    auto cfg = desk_at(32, BlockKind::swin, true);
    TrainConfig tc;
    tc.batch_size = 2;
    const auto pairs = generate_dataset(4, 32, 3);

    auto straight = make_training_state(cfg, tc);
    train_epoch(straight, pairs);
    const auto midway = serialize_checkpoint(straight);
    std::istringstream in(midway);
    auto resumed = deserialize_checkpoint(in);
    o.check(serialize_checkpoint(resumed) == midway, "checkpoint round trip bit-exact");
    train_epoch(straight, pairs);
    train_epoch(resumed, pairs);
    o.check(serialize_checkpoint(resumed) == serialize_checkpoint(straight), "resume equals uninterrupted run");

    Image8 img(7, 5);
    Rng rng(4);
    for (auto& b : img.rgb) b = static_cast<uint8_t>(rng.below(256));
    o.check(decode_ppm(encode_ppm(img)) == img, "PPM round trip bit-exact");

    const auto root = fs::temp_directory_path() / ("swinpg_acceptance_" + std::to_string(::getpid()));
    auto pipeline = [&] {
        fs::remove_all(root);
        fs::create_directories(root);
        const auto run_cfg = (root / "run.json").string();
        std::ofstream(run_cfg) << Json{{"model", {{"image_size", 32}}},
                                       {"training", {{"epochs", 2}, {"batch_size", 2}, {"seed", 0}}},
                                       {"data", {{"source", "euvp"}, {"manifest", (root / "data" / "manifest.json").string()}, {"n_pairs", 4}}},
                                       {"output", {{"checkpoint_path", (root / "m.ckpt").string()}, {"report_path", (root / "r.json").string()}}}}
                                      .dump();
        std::vector<std::string> artifacts;
        int codes = run_cli({"simulate", "--config", run_cfg, "--out", (root / "data").string()}).code;
        const auto train = run_cli({"train", "--config", run_cfg});
        codes += train.code;
        codes += run_cli({"enhance", "--ckpt", (root / "m.ckpt").string(), "--input", (root / "data" / "sim_00001_A.ppm").string(), "--output",
                          (root / "e.ppm").string(), "--config", run_cfg})
                     .code;
        codes += run_cli({"evaluate", "--ckpt", (root / "m.ckpt").string(), "--config", run_cfg}).code;
        if (codes != 0) return std::vector<std::string>{};
        for (const auto& f : {"data/manifest.json", "data/sim_00000_A.ppm", "m.ckpt", "e.ppm", "r.json"}) artifacts.push_back(slurp(root / f));
        artifacts.push_back(train.out);
        return artifacts;
    };
    std::vector<std::string> a, b;
    try {
        a = pipeline();
        b = pipeline();
    } catch (const std::exception& e) {
        o.check(false, std::string("pipeline threw: ") + e.what());
    }
    fs::remove_all(root);
    o.check(!a.empty() && a == b, "CLI simulate/train/enhance/evaluate byte-reproducible");
    return o;
}

}  // namespace

int main() {
    int failures = 0;
    auto report = [&](const std::string& name, const std::function<Outcome()>& fn) {
        Outcome o;
        tape().clear();
        try {
            o = fn();
        } catch (const std::exception& e) {
            o.check(false, std::string("threw: ") + e.what());
        }
        if (!o.pass) ++failures;
        std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
        std::fflush(stdout);
    };

    report("gradient_suite", gradient_suite);
    report("attention_equivalence", attention_equivalence);
    report("shift_mask_oracle", shift_mask_oracle);
    report("structural_inverses", structural_inverses);
    report("shape_contracts", shape_contracts);
    report("loss_closed_forms", loss_closed_forms);
    report("overfit_convergence", overfit);

    SmokeResult swin, conv;
    bool smoke_ok = true;
    try {
        swin = smoke(BlockKind::swin);
        conv = smoke(BlockKind::conv);
    } catch (const std::exception& e) {
        smoke_ok = false;
        std::printf("smoke training threw: %s\n", e.what());
    }
    report("end_to_end_improvement", [&] {
        if (!smoke_ok) throw ContractError("smoke training failed");
        return end_to_end(swin);
    });
    report("ablation_direction", [&] {
        if (!smoke_ok) throw ContractError("smoke training failed");
        return ablation(swin, conv);
    });
    report("metric_oracles", metric_oracles);
    report("persistence", persistence);

    std::printf("%d of 11 criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
