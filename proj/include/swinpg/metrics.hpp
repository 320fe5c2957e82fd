#pragma once

// Image quality metrics: PSNR, SSIM (Gaussian 11x11, sigma 1.5, on luma),
// the no-reference UIQM, the histogram-equalisation baseline, and dataset
// evaluation into a JSON report.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "swinpg/data.hpp"

namespace swinpg {

inline constexpr double kInfinity = std::numeric_limits<double>::infinity();

// ---------------------------------------------------------------- PSNR

/// 10 log10(max^2 / MSE); identical images give +infinity.
inline double psnr(const Image& x, const Image& y, double max_value = 1.0) {
    require_same_size(x, y, "psnr");
    if (!(max_value > 0.0)) throw ContractError("psnr: max_value must be > 0");
    double se = 0.0;
    for (std::size_t i = 0; i < x.pixels.size(); ++i) {
        const double d = static_cast<double>(x.pixels[i]) - y.pixels[i];
        se += d * d;
    }
    if (se == 0.0) return kInfinity;
    const double mse = se / static_cast<double>(x.pixels.size());
    return 10.0 * std::log10(max_value * max_value / mse);
}

// ---------------------------------------------------------------- SSIM

struct SsimOptions {
    int64_t window = 11;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
    double dynamic_range = 1.0;
};

inline constexpr std::array<double, 3> kLumaWeights{0.299, 0.587, 0.114};

/// ITU-R BT.601 luma of a 3-channel image; 1-channel images pass through.
inline std::vector<double> luma(const Image& img) {
    std::vector<double> out(static_cast<std::size_t>(img.plane()));
    if (img.channels == 1) {
        std::copy(img.pixels.begin(), img.pixels.end(), out.begin());
        return out;
    }
    if (img.channels != 3) throw DimensionError("luma: expected 1 or 3 channels, got " + std::to_string(img.channels));
    const auto n = out.size();
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = kLumaWeights[0] * img.pixels[i] + kLumaWeights[1] * img.pixels[n + i] + kLumaWeights[2] * img.pixels[2 * n + i];
    }
    return out;
}

namespace detail {

inline std::vector<double> gaussian_kernel(int64_t size, double sigma) {
    std::vector<double> k(static_cast<std::size_t>(size));
    double sum = 0.0;
    for (int64_t i = 0; i < size; ++i) {
        const double d = static_cast<double>(i) - static_cast<double>(size - 1) / 2.0;
        k[static_cast<std::size_t>(i)] = std::exp(-d * d / (2.0 * sigma * sigma));
        sum += k[static_cast<std::size_t>(i)];
    }
    for (auto& v : k) v /= sum;
    return k;
}

/// Separable "valid" filtering of an h x w plane.
inline std::vector<double> filter_valid(const std::vector<double>& src, int64_t h, int64_t w, const std::vector<double>& k) {
    const auto n = static_cast<int64_t>(k.size());
    const int64_t oh = h - n + 1, ow = w - n + 1;
    std::vector<double> rows(static_cast<std::size_t>(h * ow));
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < ow; ++x) {
            double s = 0.0;
            for (int64_t i = 0; i < n; ++i) s += k[static_cast<std::size_t>(i)] * src[static_cast<std::size_t>(y * w + x + i)];
            rows[static_cast<std::size_t>(y * ow + x)] = s;
        }
    std::vector<double> out(static_cast<std::size_t>(oh * ow));
    for (int64_t y = 0; y < oh; ++y)
        for (int64_t x = 0; x < ow; ++x) {
            double s = 0.0;
            for (int64_t i = 0; i < n; ++i) s += k[static_cast<std::size_t>(i)] * rows[static_cast<std::size_t>((y + i) * ow + x)];
            out[static_cast<std::size_t>(y * ow + x)] = s;
        }
    return out;
}

}  // namespace detail

/// Mean local SSIM over every window position fully inside the image.
inline double ssim(const Image& x, const Image& y, const SsimOptions& opt = {}) {
    require_same_size(x, y, "ssim");
    if (x.height < opt.window || x.width < opt.window) {
        throw DimensionError("ssim: image " + std::to_string(x.height) + "x" + std::to_string(x.width) +
                             " smaller than the " + std::to_string(opt.window) + "x" + std::to_string(opt.window) + " window");
    }
    const auto a = luma(x), b = luma(y);
    const int64_t h = x.height, w = x.width;
    std::vector<double> aa(a.size()), bb(a.size()), ab(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        aa[i] = a[i] * a[i];
        bb[i] = b[i] * b[i];
        ab[i] = a[i] * b[i];
    }
    const auto k = detail::gaussian_kernel(opt.window, opt.sigma);
    const auto mu_a = detail::filter_valid(a, h, w, k), mu_b = detail::filter_valid(b, h, w, k);
    const auto e_aa = detail::filter_valid(aa, h, w, k), e_bb = detail::filter_valid(bb, h, w, k);
    const auto e_ab = detail::filter_valid(ab, h, w, k);
    const double c1 = (opt.k1 * opt.dynamic_range) * (opt.k1 * opt.dynamic_range);
    const double c2 = (opt.k2 * opt.dynamic_range) * (opt.k2 * opt.dynamic_range);
    double total = 0.0;
    for (std::size_t i = 0; i < mu_a.size(); ++i) {
        const double ma = mu_a[i], mb = mu_b[i];
        const double va = e_aa[i] - ma * ma, vb = e_bb[i] - mb * mb, cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    return total / static_cast<double>(mu_a.size());
}

// ---------------------------------------------------------------- UIQM

inline constexpr double kUicmWeight = 0.0282;
inline constexpr double kUismWeight = 0.2953;
inline constexpr double kUiconmWeight = 3.5753;
inline constexpr double kUiqmTrim = 0.1;
inline constexpr int64_t kUiqmBlock = 8;

struct UiqmParts {
    double uicm = 0.0;
    double uism = 0.0;
    double uiconm = 0.0;
    double uiqm = 0.0;
};

namespace detail {

/// Asymmetric alpha-trimmed mean and the spread about it.
inline std::pair<double, double> trimmed_stats(std::vector<double> v, double alpha_low, double alpha_high) {
    const auto k = v.size();
    std::sort(v.begin(), v.end());
    const auto lo = static_cast<std::size_t>(std::ceil(alpha_low * static_cast<double>(k)));
    const auto hi = static_cast<std::size_t>(std::floor(alpha_high * static_cast<double>(k)));
    double mu = 0.0;
    const std::size_t kept = k - lo - hi;
    for (std::size_t i = lo; i < k - hi; ++i) mu += v[i];
    mu /= static_cast<double>(kept);
    double var = 0.0;
    for (double x : v) var += (x - mu) * (x - mu);
    return {mu, var / static_cast<double>(k)};
}

inline double sobel_magnitude(const std::vector<double>& p, int64_t h, int64_t w, int64_t y, int64_t x) {
    auto at = [&](int64_t r, int64_t c) {
        r = std::clamp<int64_t>(r, 0, h - 1);
        c = std::clamp<int64_t>(c, 0, w - 1);
        return p[static_cast<std::size_t>(r * w + c)];
    };
    const double gx = (at(y - 1, x + 1) + 2 * at(y, x + 1) + at(y + 1, x + 1)) - (at(y - 1, x - 1) + 2 * at(y, x - 1) + at(y + 1, x - 1));
    const double gy = (at(y + 1, x - 1) + 2 * at(y + 1, x) + at(y + 1, x + 1)) - (at(y - 1, x - 1) + 2 * at(y - 1, x) + at(y - 1, x + 1));
    return std::sqrt(gx * gx + gy * gy);
}

/// Measure of enhancement: 2/(k1 k2) * sum over blocks of log(max/min),
/// blocks with a zero extreme contributing nothing.
inline double eme(const std::vector<double>& p, int64_t h, int64_t w, int64_t block) {
    const int64_t k1 = h / block, k2 = w / block;
    double sum = 0.0;
    for (int64_t by = 0; by < k1; ++by)
        for (int64_t bx = 0; bx < k2; ++bx) {
            double mx = -kInfinity, mn = kInfinity;
            for (int64_t y = by * block; y < (by + 1) * block; ++y)
                for (int64_t x = bx * block; x < (bx + 1) * block; ++x) {
                    mx = std::max(mx, p[static_cast<std::size_t>(y * w + x)]);
                    mn = std::min(mn, p[static_cast<std::size_t>(y * w + x)]);
                }
            if (mn > 0.0 && mx > 0.0) sum += std::log(mx / mn);
        }
    return 2.0 / static_cast<double>(k1 * k2) * sum;
}

}  // namespace detail

/// UIQM = 0.0282 UICM + 0.2953 UISM + 3.5753 UIConM on the 0-255 scale.
inline UiqmParts uiqm_parts(const Image& img) {
    if (img.channels != 3) throw DimensionError("uiqm: expected 3 channels, got " + std::to_string(img.channels));
    if (img.height < kUiqmBlock || img.width < kUiqmBlock) {
        throw DimensionError("uiqm: image smaller than one " + std::to_string(kUiqmBlock) + "x" + std::to_string(kUiqmBlock) + " block");
    }
    const int64_t h = img.height, w = img.width, n = h * w;
    std::array<std::vector<double>, 3> ch;
    for (std::size_t c = 0; c < 3; ++c) {
        ch[c].resize(static_cast<std::size_t>(n));
        for (int64_t i = 0; i < n; ++i) ch[c][static_cast<std::size_t>(i)] = 255.0 * img.pixels[static_cast<std::size_t>(static_cast<int64_t>(c) * n + i)];
    }
    UiqmParts out;

    std::vector<double> rg(static_cast<std::size_t>(n)), yb(static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < rg.size(); ++i) {
        rg[i] = ch[0][i] - ch[1][i];
        yb[i] = (ch[0][i] + ch[1][i]) / 2.0 - ch[2][i];
    }
    const auto [mu_rg, var_rg] = detail::trimmed_stats(rg, kUiqmTrim, kUiqmTrim);
    const auto [mu_yb, var_yb] = detail::trimmed_stats(yb, kUiqmTrim, kUiqmTrim);
    out.uicm = -0.0268 * std::sqrt(mu_rg * mu_rg + mu_yb * mu_yb) + 0.1586 * std::sqrt(var_rg + var_yb);

    for (std::size_t c = 0; c < 3; ++c) {
        std::vector<double> edge(static_cast<std::size_t>(n));
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x) {
                const auto i = static_cast<std::size_t>(y * w + x);
                edge[i] = detail::sobel_magnitude(ch[c], h, w, y, x) * ch[c][i];
            }
        out.uism += kLumaWeights[c] * detail::eme(edge, h, w, kUiqmBlock);
    }

    const int64_t k1 = h / kUiqmBlock, k2 = w / kUiqmBlock;
    double amee = 0.0;
    for (int64_t by = 0; by < k1; ++by)
        for (int64_t bx = 0; bx < k2; ++bx) {
            double mx = -kInfinity, mn = kInfinity;
            for (const auto& plane : ch)
                for (int64_t y = by * kUiqmBlock; y < (by + 1) * kUiqmBlock; ++y)
                    for (int64_t x = bx * kUiqmBlock; x < (bx + 1) * kUiqmBlock; ++x) {
                        mx = std::max(mx, plane[static_cast<std::size_t>(y * w + x)]);
                        mn = std::min(mn, plane[static_cast<std::size_t>(y * w + x)]);
                    }
            const double top = mx - mn, bottom = mx + mn;
            if (top <= 0.0 || bottom <= 0.0) continue;
            const double c = top / bottom;
            amee += c * std::log(c);
        }
    out.uiconm = -amee / static_cast<double>(k1 * k2);

    out.uiqm = kUicmWeight * out.uicm + kUismWeight * out.uism + kUiconmWeight * out.uiconm;
    return out;
}

inline double uiqm(const Image& img) { return uiqm_parts(img).uiqm; }

// ---------------------------------------------------------------- histogram equalisation

/// Per-channel CDF remapping: v -> round((cdf(v) - cdf_min) / (N - cdf_min) * 255).
/// A channel holding a single level is left unchanged.
inline Image8 hist_equalize(const Image8& img) {
    Image8 out = img;
    const auto n = static_cast<std::size_t>(img.height * img.width);
    for (std::size_t c = 0; c < 3; ++c) {
        std::array<uint64_t, 256> hist{};
        for (std::size_t i = 0; i < n; ++i) ++hist[img.rgb[i * 3 + c]];
        std::array<uint64_t, 256> cdf{};
        uint64_t run = 0, cdf_min = 0;
        for (std::size_t v = 0; v < 256; ++v) {
            run += hist[v];
            cdf[v] = run;
            if (cdf_min == 0 && run > 0) cdf_min = run;
        }
        if (cdf_min == n) continue;
        std::array<uint8_t, 256> lut{};
        for (std::size_t v = 0; v < 256; ++v) {
            const double u = cdf[v] < cdf_min ? 0.0 : static_cast<double>(cdf[v] - cdf_min) / static_cast<double>(n - cdf_min);
            lut[v] = static_cast<uint8_t>(std::lround(u * 255.0));
        }
        for (std::size_t i = 0; i < n; ++i) out.rgb[i * 3 + c] = lut[img.rgb[i * 3 + c]];
    }
    return out;
}

// ---------------------------------------------------------------- dataset evaluation

struct ImageMetrics {
    std::string id;
    double psnr = 0.0;
    double ssim = 0.0;
    double uiqm = 0.0;
};

struct MetricAggregate {
    double psnr_mean = 0.0, psnr_std = 0.0;
    double ssim_mean = 0.0, ssim_std = 0.0;
    double uiqm_mean = 0.0, uiqm_std = 0.0;
};

struct MetricReport {
    std::vector<ImageMetrics> images;  // sorted by id
    MetricAggregate aggregate;
    std::string baseline = "none";  // none | identity | histeq
    std::string config_digest;
};

/// Maps a pair to its enhanced [0,1] image.
using Enhancer = std::function<Image(const ImagePair&)>;

inline Image identity_enhance(const ImagePair& p) { return from_signed_tensor(p.degraded); }

inline Image histeq_enhance(const ImagePair& p) { return to_float(hist_equalize(to_8bit(from_signed_tensor(p.degraded)))); }

namespace detail {

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    if (std::isinf(mean)) return {mean, std::numeric_limits<double>::quiet_NaN()};
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    return {mean, std::sqrt(var / static_cast<double>(v.size()))};
}

}  // namespace detail

inline MetricAggregate aggregate_metrics(const std::vector<ImageMetrics>& images) {
    std::vector<double> p, s, u;
    for (const auto& m : images) {
        p.push_back(m.psnr);
        s.push_back(m.ssim);
        u.push_back(m.uiqm);
    }
    MetricAggregate a;
    std::tie(a.psnr_mean, a.psnr_std) = detail::mean_std(p);
    std::tie(a.ssim_mean, a.ssim_std) = detail::mean_std(s);
    std::tie(a.uiqm_mean, a.uiqm_std) = detail::mean_std(u);
    return a;
}

/// Scores every pair's enhanced image against its reference (PSNR with
/// max 1.0, SSIM, UIQM of the enhanced image).
inline MetricReport evaluate_dataset(const std::vector<ImagePair>& pairs, const Enhancer& enhance,
                                     std::string baseline = "none", std::string digest = {}) {
    if (pairs.empty()) throw ContractError("evaluate_dataset: no pairs to evaluate");
    MetricReport r;
    r.baseline = std::move(baseline);
    r.config_digest = std::move(digest);
    for (const auto& pair : pairs) {
        const auto out = enhance(pair);
        const auto ref = from_signed_tensor(pair.reference);
        r.images.push_back({pair.id, psnr(out, ref, 1.0), ssim(out, ref), uiqm(out)});
    }
    std::sort(r.images.begin(), r.images.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    r.aggregate = aggregate_metrics(r.images);
    return r;
}

namespace detail {

inline nlohmann::ordered_json metric_json(double v) {
    if (std::isnan(v)) return nullptr;
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return v;
}

}  // namespace detail

inline nlohmann::ordered_json to_json(const MetricReport& r) {
    using detail::metric_json;
    nlohmann::ordered_json images = nlohmann::ordered_json::array();
    for (const auto& m : r.images) {
        images.push_back({{"id", m.id}, {"psnr", metric_json(m.psnr)}, {"ssim", metric_json(m.ssim)}, {"uiqm", metric_json(m.uiqm)}});
    }
    const auto& a = r.aggregate;
    return {{"images", images},
            {"aggregate",
             {{"psnr_mean", metric_json(a.psnr_mean)},
              {"psnr_std", metric_json(a.psnr_std)},
              {"ssim_mean", metric_json(a.ssim_mean)},
              {"ssim_std", metric_json(a.ssim_std)},
              {"uiqm_mean", metric_json(a.uiqm_mean)},
              {"uiqm_std", metric_json(a.uiqm_std)}}},
            {"baseline", r.baseline},
            {"config_digest", r.config_digest}};
}

}  // namespace swinpg
