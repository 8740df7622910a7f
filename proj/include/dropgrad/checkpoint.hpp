#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "dropgrad/errors.hpp"
#include "dropgrad/network.hpp"
#include "dropgrad/rng.hpp"

namespace dropgrad {

// Binary checkpoint, explicit little-endian:
//   "DRPT" | u32 version | u8 scalar_size | u64 spec_json_len | spec json
//   u64 step t | u64 rng seed | 4x u64 rng state
//   u32 n_layers | per layer: u64 count + theta scalars, u64 count + bias
//   (same block again for the optimizer velocity slots)
// Loading a checkpoint restores training bit-exactly from step t.
inline constexpr char kCheckpointMagic[4] = {'D', 'R', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename Scalar>
struct CheckpointState {
  NetworkSpec spec;  // unresolved drop overrides; resolve() re-derives policy
  std::vector<LayerParams<Scalar>> params;
  std::vector<LayerParams<Scalar>> velocity;
  std::uint64_t t = 0;
  std::uint64_t rng_seed = 0;
  std::array<std::uint64_t, 4> rng_state{};
};

namespace detail {

class BinWriter {
 public:
  explicit BinWriter(const std::string& path) : path_(path), f_(std::fopen(path.c_str(), "wb")) {
    if (f_ == nullptr) throw IoError("cannot write checkpoint '" + path + "'");
  }
  ~BinWriter() {
    if (f_ != nullptr) std::fclose(f_);
  }
  BinWriter(const BinWriter&) = delete;
  BinWriter& operator=(const BinWriter&) = delete;

  void bytes(const void* p, std::size_t n) {
    if (std::fwrite(p, 1, n, f_) != n) throw IoError("short write to '" + path_ + "'");
  }
  void u8(std::uint8_t v) { bytes(&v, 1); }
  void u32(std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    bytes(b, 4);
  }
  void u64(std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    bytes(b, 8);
  }
  template <typename Scalar>
  void scalars(const std::vector<Scalar>& v) {
    u64(v.size());
    for (Scalar s : v) {
      if constexpr (sizeof(Scalar) == 4) {
        std::uint32_t bits;
        std::memcpy(&bits, &s, 4);
        u32(bits);
      } else {
        std::uint64_t bits;
        std::memcpy(&bits, &s, 8);
        u64(bits);
      }
    }
  }

 private:
  std::string path_;
  std::FILE* f_ = nullptr;
};

class BinReader {
 public:
  explicit BinReader(const std::string& path) : path_(path), f_(std::fopen(path.c_str(), "rb")) {
    if (f_ == nullptr) throw IoError("cannot open checkpoint '" + path + "'");
  }
  ~BinReader() {
    if (f_ != nullptr) std::fclose(f_);
  }
  BinReader(const BinReader&) = delete;
  BinReader& operator=(const BinReader&) = delete;

  void bytes(void* p, std::size_t n) {
    if (std::fread(p, 1, n, f_) != n) throw IoError("truncated checkpoint '" + path_ + "'");
  }
  std::uint8_t u8() {
    std::uint8_t v;
    bytes(&v, 1);
    return v;
  }
  std::uint32_t u32() {
    unsigned char b[4];
    bytes(b, 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(b[i]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    unsigned char b[8];
    bytes(b, 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
    return v;
  }
  template <typename Scalar>
  std::vector<Scalar> scalars() {
    const std::uint64_t count = u64();
    std::vector<Scalar> v(count);
    for (std::uint64_t i = 0; i < count; ++i) {
      if constexpr (sizeof(Scalar) == 4) {
        const std::uint32_t bits = u32();
        std::memcpy(&v[i], &bits, 4);
      } else {
        const std::uint64_t bits = u64();
        std::memcpy(&v[i], &bits, 8);
      }
    }
    return v;
  }

 private:
  std::string path_;
  std::FILE* f_ = nullptr;
};

template <typename Scalar>
void write_param_block(BinWriter& w, const std::vector<LayerParams<Scalar>>& block) {
  w.u32(static_cast<std::uint32_t>(block.size()));
  for (const LayerParams<Scalar>& p : block) {
    w.scalars(p.theta.storage());
    w.scalars(p.bias.storage());
  }
}

template <typename Scalar>
void read_param_block(BinReader& r, const NetworkSpec& spec,
                      std::vector<LayerParams<Scalar>>& block) {
  const std::uint32_t n = r.u32();
  if (n != spec.layers.size()) throw IoError("checkpoint layer count does not match spec");
  block.clear();
  for (std::uint32_t i = 0; i < n; ++i) {
    LayerParams<Scalar> p;
    std::vector<Scalar> theta = r.scalars<Scalar>();
    std::vector<Scalar> bias = r.scalars<Scalar>();
    const LayerSpec& l = spec.layers[i];
    if (!theta.empty()) {
      Shape shape = l.kind == LayerKind::conv ? Shape{l.out, l.in, l.kernel, l.kernel}
                                              : Shape{l.out, l.in};
      if (numel(shape) != theta.size()) throw IoError("checkpoint theta size mismatch");
      p.theta = DenseTensor<Scalar>(shape, std::move(theta));
    }
    if (!bias.empty()) {
      if (bias.size() != l.out) throw IoError("checkpoint bias size mismatch");
      p.bias = DenseTensor<Scalar>({l.out}, std::move(bias));
    }
    block.push_back(std::move(p));
  }
}

}  // namespace detail

template <typename Scalar>
void save_checkpoint(const std::string& path, const CheckpointState<Scalar>& state) {
  detail::BinWriter w(path);
  w.bytes(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.u8(static_cast<std::uint8_t>(sizeof(Scalar)));
  const std::string spec_json = to_json(state.spec).dump();
  w.u64(spec_json.size());
  w.bytes(spec_json.data(), spec_json.size());
  w.u64(state.t);
  w.u64(state.rng_seed);
  for (std::uint64_t word : state.rng_state) w.u64(word);
  detail::write_param_block(w, state.params);
  detail::write_param_block(w, state.velocity);
}

template <typename Scalar>
CheckpointState<Scalar> load_checkpoint(const std::string& path) {
  detail::BinReader r(path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw IoError("'" + path + "' is not a checkpoint (bad magic)");
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint8_t scalar_size = r.u8();
  if (scalar_size != sizeof(Scalar)) {
    throw ConfigError("checkpoint precision (" + std::to_string(scalar_size * 8) +
                      "-bit) does not match run precision");
  }
  CheckpointState<Scalar> state;
  const std::uint64_t spec_len = r.u64();
  std::string spec_json(spec_len, '\0');
  r.bytes(spec_json.data(), spec_len);
  try {
    state.spec = network_spec_from_json(nlohmann::json::parse(spec_json));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint spec blob is corrupt: " + std::string(e.what()));
  }
  state.t = r.u64();
  state.rng_seed = r.u64();
  for (std::uint64_t& word : state.rng_state) word = r.u64();
  detail::read_param_block(r, state.spec, state.params);
  detail::read_param_block(r, state.spec, state.velocity);
  return state;
}

}  // namespace dropgrad
