#pragma once

#include "bedseg/tensor.hpp"

#include <filesystem>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace bedseg {

using TensorData = std::variant<Tensor<float>, Tensor<double>>;

struct TensorEntry {
  std::string name;
  TensorData tensor;
};

/// Ordered, uniquely named tensor collection with a bit-exact binary format:
///
///   magic "BEDT" | u32 version | u32 entry-count
///   per entry: u32 name-len | name bytes | u8 dtype (0=f32, 1=f64)
///              | u32 rank | u64 dims... | raw little-endian values
///
/// All integers are little-endian regardless of host.
struct Checkpoint {
  std::uint32_t version = 1;
  std::vector<TensorEntry> entries;

  TensorEntry* find(std::string_view name);
  const TensorEntry* find(std::string_view name) const;
};

std::string checkpoint_to_bytes(const Checkpoint& ckpt);
Checkpoint checkpoint_from_bytes(std::string_view bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace bedseg
