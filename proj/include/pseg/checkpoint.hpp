#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pseg/optim.hpp"
#include "pseg/tensor.hpp"

namespace pseg {

// Serialized named-parameter table: magic + version header, config echo,
// per-tensor name/shape/float32-LE payload, optional optimizer moments,
// trailing CRC32 over everything after the magic. Loads reject unknown
// versions and corrupt payloads.
struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct OptStateBlob {
  std::int64_t step = 0;
  std::vector<std::vector<float>> first_moments;
  std::vector<std::vector<float>> second_moments;
};

struct Checkpoint {
  std::string config_echo;
  std::vector<CheckpointEntry> tensors;
  std::optional<OptStateBlob> opt_state;

  const CheckpointEntry* find(const std::string& name) const {
    for (const auto& e : tensors)
      if (e.name == name) return &e;
    return nullptr;
  }

  // Copies stored values into a live parameter table; names must cover it
  // and shapes must agree, otherwise ConfigError names the tensor.
  void apply_to(std::vector<NamedParam<float>>& params) const;

  static Checkpoint from_params(const std::vector<NamedParam<float>>& params,
                                const std::string& config_echo);
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

std::uint32_t crc32_bytes(const std::uint8_t* data, std::size_t len,
                          std::uint32_t seed = 0);

}  // namespace pseg
