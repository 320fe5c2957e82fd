#pragma once

// Paired datasets: the underwater formation-model simulator, procedural
// clean scenes, EUVP-style directory ingestion, manifests, augmentation and
// batch assembly.

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "swinpg/image.hpp"
#include "swinpg/random.hpp"

namespace swinpg {

enum class DepthStyle { constant, linear, smooth_noise };

/// I = J t + B (1 - t), t = exp(-beta_c * depth), then a haze blend toward B
/// and a contrast reduction toward the per-channel mean.
struct DegradationParams {
    std::array<float, 3> background{0.05f, 0.35f, 0.45f};  // B, RGB
    std::array<float, 3> beta{1.4f, 0.55f, 0.3f};          // attenuation, RGB
    DepthStyle style = DepthStyle::smooth_noise;
    float depth = 1.0f;     // largest scene depth
    float haze = 0.1f;      // 0 = none, 1 = pure background
    float contrast = 0.2f;  // 0 = unchanged, 1 = flat

    void validate() const {
        for (std::size_t c = 0; c < 3; ++c) {
            if (!(background[c] >= 0.0f && background[c] <= 1.0f)) throw ConfigError("degradation: background light outside [0,1]");
            if (!(beta[c] >= 0.0f) || !std::isfinite(beta[c])) throw ConfigError("degradation: attenuation must be finite and >= 0");
        }
        if (!(depth >= 0.0f) || !std::isfinite(depth)) throw ConfigError("degradation: depth must be finite and >= 0");
        if (!(haze >= 0.0f && haze <= 1.0f)) throw ConfigError("degradation: haze outside [0,1]");
        if (!(contrast >= 0.0f && contrast <= 1.0f)) throw ConfigError("degradation: contrast reduction outside [0,1]");
    }

    friend bool operator==(const DegradationParams&, const DegradationParams&) = default;
};

inline const char* depth_style_name(DepthStyle s) {
    switch (s) {
        case DepthStyle::constant: return "constant";
        case DepthStyle::linear: return "linear";
        case DepthStyle::smooth_noise: return "smooth_noise";
    }
    return "?";
}

/// Depth map in [0, depth] for the chosen style.
inline std::vector<float> depth_field(const DegradationParams& p, int64_t h, int64_t w, uint64_t seed) {
    Rng rng(mix_seed(seed, 0xDE9));
    std::vector<float> d(static_cast<std::size_t>(h * w), p.depth);
    if (p.style == DepthStyle::linear) {
        const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double ca = std::cos(angle), sa = std::sin(angle);
        double lo = 1e300, hi = -1e300;
        std::vector<double> proj(d.size());
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x) {
                const double v = ca * static_cast<double>(x) + sa * static_cast<double>(y);
                proj[static_cast<std::size_t>(y * w + x)] = v;
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
        for (std::size_t i = 0; i < d.size(); ++i) {
            const double u = hi > lo ? (proj[i] - lo) / (hi - lo) : 1.0;
            d[i] = static_cast<float>(p.depth * (0.25 + 0.75 * u));
        }
    } else if (p.style == DepthStyle::smooth_noise) {
        constexpr int64_t grid = 4;
        Image coarse(1, grid, grid);
        for (auto& v : coarse.pixels) v = static_cast<float>(rng.uniform(0.25, 1.0));
        const auto fine = resize_bilinear(coarse, h, w);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = p.depth * fine.pixels[i];
    }
    return d;
}

/// Per-channel transmission t_c(x) = exp(-beta_c depth(x)) as a [3,H,W] image.
inline Image transmission_map(const DegradationParams& p, int64_t h, int64_t w, uint64_t seed) {
    p.validate();
    const auto d = depth_field(p, h, w, seed);
    Image t(3, h, w);
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t i = 0; i < h * w; ++i)
            t.pixels[static_cast<std::size_t>(c * h * w + i)] = std::exp(-p.beta[static_cast<std::size_t>(c)] * d[static_cast<std::size_t>(i)]);
    return t;
}

/// Formation model, haze and contrast reduction without clipping; affine in
/// `clean` for a fixed transmission map.
inline Image apply_formation(const Image& clean, const Image& t, const DegradationParams& p) {
    require_same_size(clean, t, "apply_formation");
    if (clean.channels != 3) throw DimensionError("apply_formation: expected 3 channels");
    Image out(3, clean.height, clean.width);
    const int64_t n = clean.plane();
    for (int64_t c = 0; c < 3; ++c) {
        const double b = p.background[static_cast<std::size_t>(c)];
        double mean = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            const auto k = static_cast<std::size_t>(c * n + i);
            double v = clean.pixels[k] * t.pixels[k] + b * (1.0 - t.pixels[k]);
            v = (1.0 - p.haze) * v + p.haze * b;
            out.pixels[k] = static_cast<float>(v);
            mean += v;
        }
        mean /= static_cast<double>(n);
        for (int64_t i = 0; i < n; ++i) {
            auto& v = out.pixels[static_cast<std::size_t>(c * n + i)];
            v = static_cast<float>(mean + (1.0 - p.contrast) * (v - mean));
        }
    }
    return out;
}

inline Image degrade_unclipped(const Image& clean, const DegradationParams& p, uint64_t seed) {
    return apply_formation(clean, transmission_map(p, clean.height, clean.width, seed), p);
}

/// Degraded rendering of a [0,1] scene, clipped to [0,1].
inline Image degrade(const Image& clean, const DegradationParams& p, uint64_t seed) {
    auto out = degrade_unclipped(clean, p, seed);
    for (auto& v : out.pixels) v = std::clamp(v, 0.0f, 1.0f);
    return out;
}

// ---------------------------------------------------------------- pairs

struct Provenance {
    enum class Source { euvp_disk, simulated };
    Source source = Source::simulated;
    uint64_t seed = 0;
    DegradationParams params;
    std::string path;
};

/// Degraded and reference images as [3,H,W] tensors in [-1,1].
struct ImagePair {
    Tensor degraded;
    Tensor reference;
    std::string id;
    Provenance provenance;
};

inline ImagePair make_pair(const Image& degraded, const Image& reference, std::string id, Provenance prov) {
    require_same_size(degraded, reference, "make_pair");
    return {to_signed_tensor(degraded), to_signed_tensor(reference), std::move(id), std::move(prov)};
}

/// FNV-1a over both images' bytes and the id.
inline uint64_t pair_checksum(const ImagePair& p) {
    uint64_t h = 0xcbf29ce484222325ull;
    auto mix = [&](const void* data, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 0x100000001b3ull;
    };
    mix(p.id.data(), p.id.size());
    mix(p.degraded.data().data(), p.degraded.data().size_bytes());
    mix(p.reference.data().data(), p.reference.data().size_bytes());
    return h;
}

/// Colour gradient background, a handful of flat shapes and a sinusoidal
/// texture, all drawn from `seed`.
inline Image synthesize_scene(int64_t size, uint64_t seed) {
    Rng rng(seed);
    Image img(3, size, size);
    auto colour = [&] {
        return std::array<double, 3>{rng.uniform(0.1, 0.95), rng.uniform(0.1, 0.95), rng.uniform(0.1, 0.95)};
    };
    const auto c0 = colour(), c1 = colour();
    const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double s = static_cast<double>(size);
    for (int64_t y = 0; y < size; ++y)
        for (int64_t x = 0; x < size; ++x) {
            const double u = 0.5 + 0.5 * ((x / s - 0.5) * std::cos(angle) + (y / s - 0.5) * std::sin(angle)) * 1.4;
            const double a = std::clamp(u, 0.0, 1.0);
            for (int64_t c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<float>(c0[c] * (1 - a) + c1[c] * a);
        }
    const auto shapes = 3 + static_cast<int64_t>(rng.below(4));
    for (int64_t k = 0; k < shapes; ++k) {
        const auto col = colour();
        const double cx = rng.uniform(0, s), cy = rng.uniform(0, s);
        const double r = rng.uniform(0.08, 0.25) * s;
        const bool disc = rng.coin();
        for (int64_t y = 0; y < size; ++y)
            for (int64_t x = 0; x < size; ++x) {
                const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
                const bool inside = disc ? dx * dx + dy * dy <= r * r : std::abs(dx) <= r && std::abs(dy) <= 0.6 * r;
                if (!inside) continue;
                for (int64_t c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<float>(col[c]);
            }
    }
    const double fx = rng.uniform(1.0, 4.0) * 2.0 * std::numbers::pi / s;
    const double fy = rng.uniform(1.0, 4.0) * 2.0 * std::numbers::pi / s;
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double amp = rng.uniform(0.03, 0.12);
    for (int64_t y = 0; y < size; ++y)
        for (int64_t x = 0; x < size; ++x) {
            const double tex = 1.0 + amp * std::sin(fx * x + phase) * std::sin(fy * y);
            for (int64_t c = 0; c < 3; ++c) img.at(c, y, x) = std::clamp(static_cast<float>(img.at(c, y, x) * tex), 0.0f, 1.0f);
        }
    return img;
}

inline std::string simulated_id(int64_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "sim_%05lld", static_cast<long long>(index));
    return buf;
}

/// n simulated pairs. Pair i draws its scene, depth style, depth scale and a
/// small background-light jitter from mix_seed(seed, i).
inline std::vector<ImagePair> generate_dataset(int64_t n, int64_t size, uint64_t seed,
                                               const DegradationParams& base = {}) {
    if (n < 1) throw ContractError("generate_dataset: n must be >= 1");
    if (size < 1) throw ContractError("generate_dataset: size must be >= 1");
    base.validate();
    std::vector<ImagePair> pairs;
    pairs.reserve(static_cast<std::size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const uint64_t s = mix_seed(seed, static_cast<uint64_t>(i));
        Rng rng(mix_seed(s, 1));
        DegradationParams p = base;
        p.style = static_cast<DepthStyle>(rng.below(3));
        p.depth = static_cast<float>(base.depth * rng.uniform(0.75, 1.25));
        for (auto& b : p.background) b = std::clamp(static_cast<float>(b + rng.uniform(-0.05, 0.05)), 0.0f, 1.0f);
        const auto clean = synthesize_scene(size, mix_seed(s, 2));
        const auto dirty = degrade(clean, p, mix_seed(s, 3));
        pairs.push_back(make_pair(dirty, clean, simulated_id(i), {Provenance::Source::simulated, s, p, {}}));
    }
    return pairs;
}

// ---------------------------------------------------------------- disk datasets

enum class Split { train, validation };

inline Image load_image(const std::filesystem::path& path, int64_t size) {
    Image8 raw;
    try {
        raw = read_ppm(path);
    } catch (const PpmError& e) {
        throw IoError(std::string("unreadable image ") + e.what());
    }
    return resize_bilinear(to_float(raw), size, size);
}

namespace detail {

inline std::map<std::string, std::filesystem::path> image_files(const std::filesystem::path& dir) {
    std::map<std::string, std::filesystem::path> files;
    if (!std::filesystem::is_directory(dir)) return files;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        const auto name = entry.path().filename().string();
        if (name.empty() || name[0] == '.') continue;
        files[entry.path().stem().string()] = entry.path();
    }
    return files;
}

}  // namespace detail

/// root/trainA + root/trainB (or validationA + validationB), paired by
/// filename stem and sorted by stem. Missing directories yield no pairs.
inline std::vector<ImagePair> load_euvp_dir(const std::filesystem::path& root, Split split, int64_t size) {
    const std::string base = split == Split::train ? "train" : "validation";
    const auto a = detail::image_files(root / (base + "A"));
    const auto b = detail::image_files(root / (base + "B"));
    std::vector<std::string> orphans;
    for (const auto& [stem, path] : a)
        if (!b.count(stem)) orphans.push_back(path.string());
    for (const auto& [stem, path] : b)
        if (!a.count(stem)) orphans.push_back(path.string());
    if (!orphans.empty()) {
        std::string msg = "unpaired files:";
        for (const auto& o : orphans) msg += " " + o;
        throw PairingError(msg, orphans);
    }
    std::vector<ImagePair> pairs;
    for (const auto& [stem, path] : a) {
        Provenance prov;
        prov.source = Provenance::Source::euvp_disk;
        prov.path = path.string();
        pairs.push_back(make_pair(load_image(path, size), load_image(b.at(stem), size), stem, prov));
    }
    return pairs;
}

/// {"pairs":[{"a": degraded, "b": reference}, ...]}; relative paths resolve
/// against the manifest's directory. Order is kept as listed.
inline std::vector<ImagePair> load_manifest(const std::filesystem::path& manifest, int64_t size) {
    const auto bytes = read_file(manifest);
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("manifest " + manifest.string() + ": " + e.what());
    }
    if (!doc.is_object() || !doc.contains("pairs") || !doc["pairs"].is_array()) {
        throw ConfigError("manifest " + manifest.string() + ": expected {\"pairs\": [...]}");
    }
    const auto dir = manifest.parent_path();
    std::vector<ImagePair> pairs;
    for (const auto& entry : doc["pairs"]) {
        if (!entry.is_object() || !entry.contains("a") || !entry.contains("b") || !entry["a"].is_string() ||
            !entry["b"].is_string()) {
            throw ConfigError("manifest " + manifest.string() + ": every pair needs string fields \"a\" and \"b\"");
        }
        auto resolve = [&](const std::string& p) {
            std::filesystem::path path(p);
            return path.is_absolute() ? path : dir / path;
        };
        const auto pa = resolve(entry["a"].get<std::string>());
        const auto pb = resolve(entry["b"].get<std::string>());
        Provenance prov;
        prov.source = Provenance::Source::euvp_disk;
        prov.path = pa.string();
        pairs.push_back(make_pair(load_image(pa, size), load_image(pb, size), pa.stem().string(), prov));
    }
    return pairs;
}

// ---------------------------------------------------------------- augmentation, batching

namespace detail {

inline Tensor hflip_chw(const Tensor& t) {
    const int64_t c = t.dim(0), h = t.dim(1), w = t.dim(2);
    Tensor out(t.shape());
    auto src = t.data();
    auto dst = out.mutable_data();
    for (int64_t k = 0; k < c * h; ++k)
        for (int64_t x = 0; x < w; ++x) dst[static_cast<std::size_t>(k * w + x)] = src[static_cast<std::size_t>(k * w + w - 1 - x)];
    return out;
}

}  // namespace detail

inline ImagePair flip_pair(const ImagePair& p) {
    ImagePair out = p;
    out.degraded = detail::hflip_chw(p.degraded);
    out.reference = detail::hflip_chw(p.reference);
    return out;
}

/// Flips both images together with probability 1/2.
inline ImagePair augment_hflip(const ImagePair& p, Rng& rng) { return rng.coin() ? flip_pair(p) : p; }

struct Batch {
    Tensor degraded;   // [n,3,H,W]
    Tensor reference;  // [n,3,H,W]
};

inline Batch make_batch(const std::vector<ImagePair>& pairs) {
    if (pairs.empty()) throw ContractError("make_batch: empty batch");
    const Shape one = pairs.front().degraded.shape();
    Shape shape = one;
    shape.insert(shape.begin(), static_cast<int64_t>(pairs.size()));
    Batch b{Tensor(shape), Tensor(shape)};
    const auto n = static_cast<std::size_t>(shape_numel(one));
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        if (pairs[i].degraded.shape() != one || pairs[i].reference.shape() != one) {
            throw DimensionError("make_batch: pair " + pairs[i].id + " has shape " + shape_string(pairs[i].degraded.shape()) +
                                 ", expected " + shape_string(one));
        }
        std::copy_n(pairs[i].degraded.data().begin(), n, b.degraded.mutable_data().begin() + static_cast<std::ptrdiff_t>(i * n));
        std::copy_n(pairs[i].reference.data().begin(), n, b.reference.mutable_data().begin() + static_cast<std::ptrdiff_t>(i * n));
    }
    return b;
}

}  // namespace swinpg
