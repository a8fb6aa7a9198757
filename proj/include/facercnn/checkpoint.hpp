#pragma once

// Binary model checkpoint, all integers and floats little-endian:
//
//   offset  size  field
//   0       8     magic "FRCNNCKP"
//   8       4     u32 format version (1)
//   12      8     u64 architecture digest (see architecture_digest)
//   20      8     u64 training step
//   28      4     u32 tensor count N
//   then N records:
//           4     u32 name length L
//           L     name bytes (no terminator)
//           4     u32 rank R
//           8*R   u64 dims
//           8*n   f64 values, n = product(dims), row-major
//
// Tensors are the model parameters in DetectorModel::named_params() order
// followed by "centers" ({2, feature_dim}).

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "facercnn/config.hpp"
#include "facercnn/losses.hpp"
#include "facercnn/model.hpp"

namespace facercnn {

inline constexpr char kCheckpointMagic[8] = {'F', 'R', 'C', 'N', 'N', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  DetectorModel model;
  Centers centers;
  std::uint64_t step = 0;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  explicit ByteReader(const std::string& bytes) : b_(bytes) {}
  std::uint64_t u(int n) {
    if (pos_ + static_cast<std::size_t>(n) > b_.size()) throw std::runtime_error("checkpoint: truncated file");
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::string str(std::size_t n) {
    if (pos_ + n > b_.size()) throw std::runtime_error("checkpoint: truncated file");
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  const std::string& b_;
  std::size_t pos_ = 0;
};

inline void put_tensor(std::string& out, const std::string& name, const std::vector<int>& shape,
                       const std::vector<double>& data) {
  put_u32(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  put_u32(out, static_cast<std::uint32_t>(shape.size()));
  for (int d : shape) put_u64(out, static_cast<std::uint64_t>(d));
  for (double v : data) put_u64(out, std::bit_cast<std::uint64_t>(v));
}

}  // namespace detail

inline std::string serialize_checkpoint(const DetectorModel& model, const Centers& centers, std::uint64_t step,
                                        std::uint64_t digest) {
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u64(out, digest);
  detail::put_u64(out, step);
  const auto params = model.named_params();
  detail::put_u32(out, static_cast<std::uint32_t>(params.size() + 1));
  for (const auto& [name, t] : params) detail::put_tensor(out, name, t->shape, t->data);
  detail::put_tensor(out, "centers",
                     {static_cast<int>(centers.values.rows), static_cast<int>(centers.values.cols)},
                     centers.values.data);
  return out;
}

/// Parses a checkpoint into a model built from `cfg`. Fails on a digest,
/// name or shape mismatch.
inline Checkpoint parse_checkpoint(const std::string& bytes, const Config& cfg) {
  detail::ByteReader r(bytes);
  if (r.str(8) != std::string(kCheckpointMagic, 8)) throw std::runtime_error("checkpoint: bad magic");
  const auto version = r.u(4);
  if (version != kCheckpointVersion) throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  const auto digest = r.u(8);
  if (digest != architecture_digest(cfg))
    throw std::runtime_error("checkpoint: architecture digest does not match the configuration");
  Checkpoint ck;
  ck.step = r.u(8);
  ck.model = DetectorModel::init(cfg.model, 0);
  ck.centers = Centers(static_cast<std::size_t>(cfg.model.feature_dim), cfg.center_alpha);
  auto params = ck.model.named_params();
  const auto count = r.u(4);
  if (count != params.size() + 1) throw std::runtime_error("checkpoint: unexpected tensor count");
  for (std::size_t i = 0; i < count; ++i) {
    const std::string name = r.str(static_cast<std::size_t>(r.u(4)));
    const auto rank = r.u(4);
    std::vector<int> shape;
    for (std::uint64_t k = 0; k < rank; ++k) shape.push_back(static_cast<int>(r.u(8)));
    std::vector<double>* dst = nullptr;
    std::vector<int> expected;
    if (i < params.size()) {
      if (name != params[i].first) throw std::runtime_error("checkpoint: expected tensor " + params[i].first + ", found " + name);
      dst = &params[i].second->data;
      expected = params[i].second->shape;
    } else {
      if (name != "centers") throw std::runtime_error("checkpoint: expected tensor centers, found " + name);
      dst = &ck.centers.values.data;
      expected = {static_cast<int>(ck.centers.values.rows), static_cast<int>(ck.centers.values.cols)};
    }
    if (shape != expected)
      throw std::runtime_error("checkpoint: tensor " + name + " has shape " + shape_string(shape) + ", expected " +
                               shape_string(expected));
    for (double& v : *dst) v = std::bit_cast<double>(r.u(8));
  }
  if (!r.done()) throw std::runtime_error("checkpoint: trailing bytes");
  return ck;
}

inline void save_checkpoint(const std::string& path, const DetectorModel& model, const Centers& centers,
                            std::uint64_t step, const Config& cfg) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  const auto bytes = serialize_checkpoint(model, centers, step, architecture_digest(cfg));
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("I/O error writing " + path);
}

inline Checkpoint load_checkpoint(const std::string& path, const Config& cfg) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes, cfg);
}

}  // namespace facercnn
