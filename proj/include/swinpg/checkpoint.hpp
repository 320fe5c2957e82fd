#pragma once

// Versioned binary checkpoint of a TrainingState.
//
//   "SWPG" | u32 version | u32 header length | header JSON (UTF-8)
//   | u32 tensor count | per tensor: u16 name length, name, u8 ndim,
//   u32 dims..., float32 data
//
// All integers and floats little-endian. The header carries the model and
// training configs, epoch, Adam step counters and the PRNG state.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>

#include "swinpg/config.hpp"

namespace swinpg {

inline constexpr char kCheckpointMagic[4] = {'S', 'W', 'P', 'G'};
inline constexpr uint32_t kCheckpointVersion = 1;
inline constexpr uint32_t kMaxCheckpointDims = 8;
inline constexpr uint64_t kMaxCheckpointElements = uint64_t{1} << 32;

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace detail {

/// Visits every persisted tensor of the state under its checkpoint name.
inline void visit_checkpoint_tensors(TrainingState& s, const std::function<void(const std::string&, Tensor&)>& f) {
    s.generator.visit("G/", [&](const std::string& n, Tensor& t, TensorKind) { f(n, t); });
    s.discriminator.visit("D/", [&](const std::string& n, Tensor& t, TensorKind) { f(n, t); });
    auto moments = [&](const char* tag, Adam& a) {
        for (std::size_t i = 0; i < a.names.size(); ++i) {
            f(std::string(tag) + ".m/" + a.names[i], a.m[i]);
            f(std::string(tag) + ".v/" + a.names[i], a.v[i]);
        }
    };
    moments("adamG", s.adam_g);
    moments("adamD", s.adam_d);
}

class ByteWriter {
public:
    template <class T>
    void put(T v) {
        char b[sizeof(T)];
        std::memcpy(b, &v, sizeof(T));
        buf_.append(b, sizeof(T));
    }
    void bytes(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
    const std::string& str() const { return buf_; }

private:
    std::string buf_;
};

class ByteReader {
public:
    explicit ByteReader(std::istream& in) : in_(in) {}

    template <class T>
    T get(const char* what) {
        T v;
        read(&v, sizeof(T), what);
        return v;
    }

    void read(void* p, std::size_t n, const char* what) {
        in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n) {
            throw CheckpointError(CheckpointError::Kind::truncated, std::string("checkpoint truncated in ") + what);
        }
    }

    bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

private:
    std::istream& in_;
};

}  // namespace detail

inline Json checkpoint_header(const TrainingState& s) {
    return Json{{"model", to_json(s.model)},
                {"training", to_json(s.train)},
                {"epoch", s.epoch},
                {"step_g", s.adam_g.step_count},
                {"step_d", s.adam_d.step_count},
                {"rng", s.rng.state()}};
}

inline std::string serialize_checkpoint(TrainingState& s) {
    detail::ByteWriter w;
    w.bytes(kCheckpointMagic, 4);
    w.put<uint32_t>(kCheckpointVersion);
    const auto header = checkpoint_header(s).dump();
    w.put<uint32_t>(static_cast<uint32_t>(header.size()));
    w.bytes(header.data(), header.size());
    uint32_t count = 0;
    detail::visit_checkpoint_tensors(s, [&](const std::string&, Tensor&) { ++count; });
    w.put<uint32_t>(count);
    detail::visit_checkpoint_tensors(s, [&](const std::string& name, Tensor& t) {
        w.put<uint16_t>(static_cast<uint16_t>(name.size()));
        w.bytes(name.data(), name.size());
        w.put<uint8_t>(static_cast<uint8_t>(t.ndim()));
        for (int64_t d : t.shape()) w.put<uint32_t>(static_cast<uint32_t>(d));
        w.bytes(t.data().data(), t.data().size_bytes());
    });
    return w.str();
}

inline TrainingState deserialize_checkpoint(std::istream& in) {
    using Kind = CheckpointError::Kind;
    detail::ByteReader r(in);
    char magic[4];
    r.read(magic, 4, "magic");
    if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw CheckpointError(Kind::bad_magic, "not a swinpg checkpoint (bad magic)");
    const auto version = r.get<uint32_t>("version");
    if (version != kCheckpointVersion) {
        throw CheckpointError(Kind::version_mismatch, "checkpoint version " + std::to_string(version) + ", expected " +
                                                          std::to_string(kCheckpointVersion));
    }
    const auto header_len = r.get<uint32_t>("header length");
    if (header_len > (1u << 24)) throw CheckpointError(Kind::dimension_overflow, "checkpoint header length out of range");
    std::string header_text(header_len, '\0');
    r.read(header_text.data(), header_len, "header");

    TrainingState s;
    try {
        const auto h = Json::parse(header_text);
        s = make_training_state(model_from_json(h.at("model")), training_from_json(h.at("training")));
        s.epoch = h.at("epoch").get<int64_t>();
        s.adam_g.step_count = h.at("step_g").get<int64_t>();
        s.adam_d.step_count = h.at("step_d").get<int64_t>();
        s.rng.set_state(h.at("rng").get<std::string>());
    } catch (const Json::exception& e) {
        throw CheckpointError(Kind::malformed, std::string("checkpoint header: ") + e.what());
    } catch (const ConfigError& e) {
        throw CheckpointError(Kind::malformed, std::string("checkpoint header: ") + e.what());
    }

    std::map<std::string, Tensor> slots;
    detail::visit_checkpoint_tensors(s, [&](const std::string& name, Tensor& t) { slots.emplace(name, t); });
    const auto count = r.get<uint32_t>("tensor count");
    if (count != slots.size()) {
        throw CheckpointError(Kind::malformed, "checkpoint holds " + std::to_string(count) + " tensors, model expects " +
                                                   std::to_string(slots.size()));
    }
    std::map<std::string, bool> filled;
    for (uint32_t k = 0; k < count; ++k) {
        const auto name_len = r.get<uint16_t>("tensor name length");
        std::string name(name_len, '\0');
        r.read(name.data(), name_len, "tensor name");
        const auto ndim = r.get<uint8_t>("tensor rank");
        if (ndim > kMaxCheckpointDims) {
            throw CheckpointError(Kind::dimension_overflow, "tensor " + name + " has rank " + std::to_string(ndim));
        }
        Shape shape;
        uint64_t numel = 1;
        for (uint8_t i = 0; i < ndim; ++i) {
            const auto d = r.get<uint32_t>("tensor dims");
            numel *= d;
            if (numel > kMaxCheckpointElements) {
                throw CheckpointError(Kind::dimension_overflow, "tensor " + name + " dimensions overflow");
            }
            shape.push_back(d);
        }
        auto it = slots.find(name);
        if (it == slots.end()) throw CheckpointError(Kind::malformed, "unexpected tensor " + name);
        if (filled[name]) throw CheckpointError(Kind::malformed, "duplicate tensor " + name);
        if (it->second.shape() != shape) {
            throw CheckpointError(Kind::malformed, "tensor " + name + " has shape " + shape_string(shape) + ", model expects " +
                                                       shape_string(it->second.shape()));
        }
        auto data = it->second.mutable_data();
        r.read(data.data(), data.size_bytes(), "tensor data");
        filled[name] = true;
    }
    if (!r.at_end()) throw CheckpointError(Kind::malformed, "trailing bytes after last tensor");
    return s;
}

inline void save_checkpoint(TrainingState& s, const std::filesystem::path& path) {
    const auto bytes = serialize_checkpoint(s);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("cannot write checkpoint " + path.string());
}

inline TrainingState load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    try {
        return deserialize_checkpoint(in);
    } catch (const CheckpointError& e) {
        throw CheckpointError(e.kind(), path.string() + ": " + e.what());
    }
}

}  // namespace swinpg
