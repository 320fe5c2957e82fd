#pragma once

// Images, binary PPM (P6) IO, bilinear resizing and the conversions between
// 8-bit pixels, [0,1] floats and [-1,1] model tensors.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "swinpg/tensor.hpp"

namespace swinpg {

/// Planar float image, channel-major [C, H, W], values nominally in [0, 1].
struct Image {
    int64_t channels = 3;
    int64_t height = 0;
    int64_t width = 0;
    std::vector<float> pixels;

    Image() = default;
    Image(int64_t c, int64_t h, int64_t w, float fill = 0.0f)
        : channels(c), height(h), width(w), pixels(static_cast<std::size_t>(c * h * w), fill) {}

    float& at(int64_t c, int64_t y, int64_t x) { return pixels[static_cast<std::size_t>((c * height + y) * width + x)]; }
    float at(int64_t c, int64_t y, int64_t x) const {
        return pixels[static_cast<std::size_t>((c * height + y) * width + x)];
    }
    int64_t plane() const { return height * width; }

    friend bool operator==(const Image&, const Image&) = default;
};

/// Interleaved 8-bit RGB, row-major, as stored in a P6 file.
struct Image8 {
    int64_t height = 0;
    int64_t width = 0;
    std::vector<uint8_t> rgb;

    Image8() = default;
    Image8(int64_t h, int64_t w) : height(h), width(w), rgb(static_cast<std::size_t>(3 * h * w), 0) {}

    friend bool operator==(const Image8&, const Image8&) = default;
};

inline void require_same_size(const Image& a, const Image& b, const char* what) {
    if (a.channels != b.channels || a.height != b.height || a.width != b.width) {
        throw DimensionError(std::string(what) + ": image sizes differ (" + std::to_string(a.channels) + "x" +
                             std::to_string(a.height) + "x" + std::to_string(a.width) + " vs " +
                             std::to_string(b.channels) + "x" + std::to_string(b.height) + "x" +
                             std::to_string(b.width) + ")");
    }
}

// ---------------------------------------------------------------- PPM

inline std::vector<uint8_t> encode_ppm(const Image8& img) {
    const std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    std::vector<uint8_t> out(header.begin(), header.end());
    out.insert(out.end(), img.rgb.begin(), img.rgb.end());
    return out;
}

inline Image8 decode_ppm(const std::vector<uint8_t>& bytes) {
    std::size_t pos = 0;
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw PpmError(PpmError::Kind::bad_magic, "not a P6 file");
    pos = 2;
    auto is_space = [](uint8_t c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; };
    auto next_number = [&](const char* field) -> int64_t {
        for (;;) {
            while (pos < bytes.size() && is_space(bytes[pos])) ++pos;
            if (pos < bytes.size() && bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
                continue;
            }
            break;
        }
        if (pos >= bytes.size()) throw PpmError(PpmError::Kind::truncated, std::string("header ends before ") + field);
        int64_t v = 0;
        std::size_t digits = 0;
        while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') {
            v = v * 10 + (bytes[pos] - '0');
            if (v > (int64_t{1} << 31)) throw PpmError(PpmError::Kind::malformed_header, std::string(field) + " too large");
            ++pos;
            ++digits;
        }
        if (digits == 0) throw PpmError(PpmError::Kind::malformed_header, std::string("expected ") + field);
        return v;
    };
    const int64_t w = next_number("width");
    const int64_t h = next_number("height");
    const int64_t maxval = next_number("maxval");
    if (w < 1 || h < 1) throw PpmError(PpmError::Kind::malformed_header, "zero image dimension");
    if (maxval != 255) throw PpmError(PpmError::Kind::bad_maxval, "maxval " + std::to_string(maxval) + " (only 255 supported)");
    if (pos >= bytes.size() || !is_space(bytes[pos])) {
        throw PpmError(PpmError::Kind::malformed_header, "missing whitespace after maxval");
    }
    ++pos;
    const auto need = static_cast<std::size_t>(3 * w * h);
    if (bytes.size() - pos < need) {
        throw PpmError(PpmError::Kind::truncated, "pixel data has " + std::to_string(bytes.size() - pos) + " of " +
                                                      std::to_string(need) + " bytes");
    }
    Image8 img(h, w);
    std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(pos), need, img.rgb.begin());
    return img;
}

inline std::vector<uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("cannot read " + path.string());
    return bytes;
}

inline void write_file(const std::filesystem::path& path, const std::vector<uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("cannot write " + path.string());
}

/// Parse errors keep their kind; the message gains the file name.
inline Image8 read_ppm(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    try {
        return decode_ppm(bytes);
    } catch (const PpmError& e) {
        throw PpmError(e.kind(), path.string() + ": " + e.what());
    }
}

inline void write_ppm(const Image8& img, const std::filesystem::path& path) { write_file(path, encode_ppm(img)); }

// ---------------------------------------------------------------- conversions

inline Image to_float(const Image8& img) {
    Image out(3, img.height, img.width);
    for (int64_t y = 0; y < img.height; ++y)
        for (int64_t x = 0; x < img.width; ++x)
            for (int64_t c = 0; c < 3; ++c)
                out.at(c, y, x) = static_cast<float>(img.rgb[static_cast<std::size_t>((y * img.width + x) * 3 + c)]) / 255.0f;
    return out;
}

inline uint8_t quantize(float v) {
    return static_cast<uint8_t>(std::lround(std::clamp(static_cast<double>(v), 0.0, 1.0) * 255.0));
}

inline Image8 to_8bit(const Image& img) {
    if (img.channels != 3) throw DimensionError("to_8bit: expected 3 channels, got " + std::to_string(img.channels));
    Image8 out(img.height, img.width);
    for (int64_t y = 0; y < img.height; ++y)
        for (int64_t x = 0; x < img.width; ++x)
            for (int64_t c = 0; c < 3; ++c) out.rgb[static_cast<std::size_t>((y * img.width + x) * 3 + c)] = quantize(img.at(c, y, x));
    return out;
}

/// [0,1] image -> [C,H,W] tensor in [-1,1].
inline Tensor to_signed_tensor(const Image& img) {
    Tensor t({img.channels, img.height, img.width});
    auto d = t.mutable_data();
    for (std::size_t i = 0; i < img.pixels.size(); ++i) d[i] = img.pixels[i] * 2.0f - 1.0f;
    return t;
}

/// [C,H,W] or [1,C,H,W] tensor in [-1,1] -> [0,1] image (clamped).
inline Image from_signed_tensor(const Tensor& t) {
    Shape s = t.shape();
    if (s.size() == 4 && s[0] == 1) s.erase(s.begin());
    if (s.size() != 3) throw DimensionError("from_signed_tensor: expected [C,H,W], got " + shape_string(t.shape()));
    Image img(s[0], s[1], s[2]);
    auto d = t.data();
    for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = std::clamp((d[i] + 1.0f) * 0.5f, 0.0f, 1.0f);
    return img;
}

// ---------------------------------------------------------------- resizing

/// Bilinear interpolation with half-pixel centres; samples outside the
/// source are clamped to the border.
inline Image resize_bilinear(const Image& img, int64_t out_h, int64_t out_w) {
    if (out_h < 1 || out_w < 1 || img.height < 1 || img.width < 1) {
        throw ContractError("resize_bilinear: dimensions must be >= 1 (" + std::to_string(img.height) + "x" +
                            std::to_string(img.width) + " -> " + std::to_string(out_h) + "x" + std::to_string(out_w) + ")");
    }
    if (out_h == img.height && out_w == img.width) return img;
    struct Tap {
        int64_t i0, i1;
        double f;
    };
    auto taps = [](int64_t in, int64_t out) {
        std::vector<Tap> t(static_cast<std::size_t>(out));
        const double ratio = static_cast<double>(in) / static_cast<double>(out);
        for (int64_t o = 0; o < out; ++o) {
            const double src = std::clamp((static_cast<double>(o) + 0.5) * ratio - 0.5, 0.0, static_cast<double>(in - 1));
            const auto i0 = static_cast<int64_t>(std::floor(src));
            t[static_cast<std::size_t>(o)] = {i0, std::min(i0 + 1, in - 1), src - static_cast<double>(i0)};
        }
        return t;
    };
    const auto ty = taps(img.height, out_h), tx = taps(img.width, out_w);
    Image out(img.channels, out_h, out_w);
    for (int64_t c = 0; c < img.channels; ++c)
        for (int64_t y = 0; y < out_h; ++y) {
            const auto& a = ty[static_cast<std::size_t>(y)];
            for (int64_t x = 0; x < out_w; ++x) {
                const auto& b = tx[static_cast<std::size_t>(x)];
                const double top = img.at(c, a.i0, b.i0) * (1 - b.f) + img.at(c, a.i0, b.i1) * b.f;
                const double bottom = img.at(c, a.i1, b.i0) * (1 - b.f) + img.at(c, a.i1, b.i1) * b.f;
                out.at(c, y, x) = static_cast<float>(top * (1 - a.f) + bottom * a.f);
            }
        }
    return out;
}

inline Image hflip(const Image& img) {
    Image out(img.channels, img.height, img.width);
    for (int64_t c = 0; c < img.channels; ++c)
        for (int64_t y = 0; y < img.height; ++y)
            for (int64_t x = 0; x < img.width; ++x) out.at(c, y, x) = img.at(c, y, img.width - 1 - x);
    return out;
}

}  // namespace swinpg
