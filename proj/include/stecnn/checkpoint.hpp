#pragma once

#include "stecnn/models.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace stecnn {

inline constexpr char kCheckpointMagic[4] = {'S', 'T', 'E', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointProvenance {
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;
  std::string stage;  // "pretrain" or "supervised"
};

template <typename Scalar>
struct Checkpoint {
  CheckpointProvenance provenance;
  std::vector<std::pair<std::string, Tensor<Scalar>>> tensors;

  std::map<std::string, Tensor<Scalar>> tensor_map() const {
    std::map<std::string, Tensor<Scalar>> m;
    for (const auto& [name, t] : tensors) m.emplace(name, t);
    return m;
  }
};

inline std::uint64_t fnv1a_hash(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace detail {

template <typename Scalar>
constexpr std::uint8_t dtype_code() {
  static_assert(std::is_same_v<Scalar, float> || std::is_same_v<Scalar, double>,
                "checkpoints hold float32 or float64 tensors");
  return std::is_same_v<Scalar, float> ? 0 : 1;
}

inline void write_bytes_le(std::ostream& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t read_bytes_le(std::istream& in, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    const int c = in.get();
    if (c == EOF) fail_runtime("checkpoint: truncated file");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}

inline void write_string(std::ostream& out, const std::string& s) {
  write_bytes_le(out, s.size(), 4);
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& in) {
  const auto len = read_bytes_le(in, 4);
  std::string s(len, '\0');
  in.read(s.data(), static_cast<std::streamsize>(len));
  if (!in) fail_runtime("checkpoint: truncated file");
  return s;
}

}  // namespace detail

/// Writes named tensors with provenance. Layout (all integers little-endian):
/// magic "STEC", u32 version, u64 config hash, u64 seed, stage string,
/// u32 tensor count, then per tensor: name, u8 dtype, u8 rank, u32 dims,
/// IEEE-754 payload.
template <typename Scalar>
void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, Tensor<Scalar>>>& tensors,
                     const CheckpointProvenance& provenance) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail_runtime("save_checkpoint: cannot open ", path, " for writing");
  out.write(kCheckpointMagic, 4);
  detail::write_bytes_le(out, kCheckpointVersion, 4);
  detail::write_bytes_le(out, provenance.config_hash, 8);
  detail::write_bytes_le(out, provenance.seed, 8);
  detail::write_string(out, provenance.stage);
  detail::write_bytes_le(out, tensors.size(), 4);
  for (const auto& [name, t] : tensors) {
    detail::write_string(out, name);
    out.put(static_cast<char>(detail::dtype_code<Scalar>()));
    out.put(static_cast<char>(t.rank()));
    for (Index d = 0; d < t.rank(); ++d)
      detail::write_bytes_le(out, static_cast<std::uint64_t>(t.dim(static_cast<int>(d))), 4);
    for (Index i = 0; i < t.size(); ++i) {
      if constexpr (std::is_same_v<Scalar, float>) {
        detail::write_bytes_le(out, std::bit_cast<std::uint32_t>(t[i]), 4);
      } else {
        detail::write_bytes_le(out, std::bit_cast<std::uint64_t>(t[i]), 8);
      }
    }
  }
  if (!out) fail_runtime("save_checkpoint: write to ", path, " failed");
}

template <typename Scalar>
Checkpoint<Scalar> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_runtime("load_checkpoint: cannot open ", path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    fail_runtime("load_checkpoint: ", path, " is not a checkpoint");
  const auto version = detail::read_bytes_le(in, 4);
  if (version != kCheckpointVersion)
    fail_runtime("load_checkpoint: unsupported version ", version, " (expected ",
                 kCheckpointVersion, ")");
  Checkpoint<Scalar> ckpt;
  ckpt.provenance.config_hash = detail::read_bytes_le(in, 8);
  ckpt.provenance.seed = detail::read_bytes_le(in, 8);
  ckpt.provenance.stage = detail::read_string(in);
  const auto count = detail::read_bytes_le(in, 4);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string name = detail::read_string(in);
    const auto dtype = detail::read_bytes_le(in, 1);
    if (dtype != detail::dtype_code<Scalar>())
      fail_runtime("load_checkpoint: tensor '", name, "' stored as ",
                   dtype == 0 ? "float32" : "float64", "; load with matching precision");
    const auto rank = detail::read_bytes_le(in, 1);
    Shape shape;
    for (std::uint64_t d = 0; d < rank; ++d)
      shape.push_back(static_cast<Index>(detail::read_bytes_le(in, 4)));
    Tensor<Scalar> t = Tensor<Scalar>::empty(shape);
    for (Index j = 0; j < t.size(); ++j) {
      if constexpr (std::is_same_v<Scalar, float>) {
        t[j] = std::bit_cast<float>(static_cast<std::uint32_t>(detail::read_bytes_le(in, 4)));
      } else {
        t[j] = std::bit_cast<double>(detail::read_bytes_le(in, 8));
      }
    }
    ckpt.tensors.emplace_back(name, t);
  }
  return ckpt;
}

/// Restores a full model state: every checkpoint tensor must exist in the
/// model with a matching shape.
template <typename Scalar>
void load_into_model(const Checkpoint<Scalar>& ckpt, Model<Scalar>& model) {
  for (const auto& [name, tensor] : ckpt.tensors) {
    Tensor<Scalar>* dst = model.find_tensor(name);
    if (dst == nullptr)
      fail_runtime("load_into_model: model has no tensor named '", name, "'");
    if (dst->shape() != tensor.shape())
      fail_runtime("load_into_model: shape mismatch for '", name, "': checkpoint ",
                   to_string(tensor.shape()), " vs model ", to_string(dst->shape()));
    dst->values() = tensor.values();
  }
}

template <typename Scalar>
void save_model_checkpoint(const std::string& path, Model<Scalar>& model,
                           const CheckpointProvenance& provenance) {
  save_checkpoint(path, model.named_tensors(), provenance);
}

}  // namespace stecnn
