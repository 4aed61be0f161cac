#pragma once

// Binary checkpoint, little-endian:
//   "SKSG" | u32 version | NetworkConfig | SkipSpec | u32 tensor count |
//   per tensor: u32 rank, u32 dims[rank], f32 payload
// Tensors follow parameter declaration order, weights before bias for each convolution.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "error.hpp"
#include "network.hpp"

namespace skipseg {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::array<char, 4> kCheckpointMagic{'S', 'K', 'S', 'G'};

namespace detail {

class ByteWriter {
public:
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
    void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    std::vector<char> bytes;
};

class ByteReader {
public:
    ByteReader(std::vector<char> data, std::string path) : data_(std::move(data)), path_(std::move(path)) {}

    std::uint32_t u32() {
        if (pos_ + 4 > data_.size()) throw DataError(path_ + ": truncated checkpoint");
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
    float f32() { return std::bit_cast<float>(u32()); }
    [[nodiscard]] bool at_end() const { return pos_ == data_.size(); }
    [[nodiscard]] const std::vector<char>& data() const { return data_; }

private:
    std::vector<char> data_;
    std::string path_;
    std::size_t pos_ = 0;
};

}  // namespace detail

template <typename T>
std::vector<char> serialize_checkpoint(Network<T>& net) {
    detail::ByteWriter w;
    for (char c : kCheckpointMagic) w.bytes.push_back(c);
    w.u32(kCheckpointVersion);
    const auto& cfg = net.config();
    w.i32(cfg.input_size);
    w.i32(cfg.stages());
    for (int c : cfg.stage_channels) w.i32(c);
    w.i32(cfg.convs_per_stage);
    w.i32(cfg.n_classes);
    w.i32(cfg.grid_size);
    w.i32(static_cast<std::int32_t>(cfg.tap_points.size()));
    for (int t : cfg.tap_points) w.i32(t);
    w.i32(cfg.skip_channels);
    w.i32(cfg.upsample_mode == UpsampleMode::bilinear ? 1 : 0);
    w.i32(net.skip().tap_index ? *net.skip().tap_index : -1);
    w.i32(net.skip().filter_size);

    auto params = net.parameters();
    w.u32(static_cast<std::uint32_t>(params.size() * 2));
    for (auto& np : params) {
        const auto& s = np.params->weights.shape();
        w.u32(4);
        for (int d : {s.batch, s.channels, s.height, s.width}) w.u32(static_cast<std::uint32_t>(d));
        for (T v : np.params->weights.data()) w.f32(static_cast<float>(v));
        w.u32(1);
        w.u32(static_cast<std::uint32_t>(np.params->bias.size()));
        for (T v : np.params->bias) w.f32(static_cast<float>(v));
    }
    return std::move(w.bytes);
}

template <typename T = float>
Network<T> deserialize_checkpoint(std::vector<char> bytes, const std::string& path = "checkpoint") {
    detail::ByteReader r(std::move(bytes), path);
    if (r.data().size() < 4 || std::memcmp(r.data().data(), kCheckpointMagic.data(), 4) != 0) {
        throw DataError(path + ": not a checkpoint (bad magic)");
    }
    r.u32();
    const auto version = r.u32();
    if (version != kCheckpointVersion) {
        throw VersionError(path + ": checkpoint format version " + std::to_string(version) + ", expected " +
                           std::to_string(kCheckpointVersion));
    }
    NetworkConfig cfg;
    cfg.input_size = r.i32();
    const int stages = r.i32();
    if (stages < 0 || stages > 64) throw DataError(path + ": implausible stage count");
    cfg.stage_channels.resize(static_cast<std::size_t>(stages));
    for (auto& c : cfg.stage_channels) c = r.i32();
    cfg.convs_per_stage = r.i32();
    cfg.n_classes = r.i32();
    cfg.grid_size = r.i32();
    const int taps = r.i32();
    if (taps < 0 || taps > 64) throw DataError(path + ": implausible tap count");
    cfg.tap_points.resize(static_cast<std::size_t>(taps));
    for (auto& t : cfg.tap_points) t = r.i32();
    cfg.skip_channels = r.i32();
    cfg.upsample_mode = r.i32() == 1 ? UpsampleMode::bilinear : UpsampleMode::nearest;
    SkipSpec skip;
    const int tap = r.i32();
    if (tap >= 0) skip.tap_index = tap;
    skip.filter_size = r.i32();

    Network<T> net(cfg, skip);
    auto params = net.parameters();
    if (r.u32() != params.size() * 2) throw DataError(path + ": parameter tensor count does not match the network");
    for (auto& np : params) {
        const auto& s = np.params->weights.shape();
        if (r.u32() != 4) throw DataError(path + ": " + np.name + " weights must have rank 4");
        for (int d : {s.batch, s.channels, s.height, s.width}) {
            if (r.u32() != static_cast<std::uint32_t>(d)) throw DataError(path + ": " + np.name + " weight dims mismatch");
        }
        for (T& v : np.params->weights.data()) v = static_cast<T>(r.f32());
        if (r.u32() != 1 || r.u32() != np.params->bias.size()) throw DataError(path + ": " + np.name + " bias dims mismatch");
        for (T& v : np.params->bias) v = static_cast<T>(r.f32());
    }
    if (!r.at_end()) throw DataError(path + ": trailing bytes after parameters");
    return net;
}

template <typename T>
void save_checkpoint(Network<T>& net, const std::string& path) {
    const auto bytes = serialize_checkpoint(net);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError(path + ": cannot write checkpoint");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError(path + ": checkpoint write failed");
}

template <typename T = float>
Network<T> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError(path + ": cannot open checkpoint");
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint<T>(std::move(bytes), path);
}

}  // namespace skipseg
