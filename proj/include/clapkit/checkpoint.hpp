#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "clapkit/config.hpp"
#include "clapkit/model.hpp"
#include "clapkit/tensor.hpp"

namespace clapkit {

/// On-disk format: magic "CLPK", version u32, length-prefixed JSON metadata
/// (config + vocab), then named arrays as (name, rank, dims, little-endian
/// f64 data). Save -> load -> save is byte-identical.
struct Checkpoint {
  std::uint32_t version = 1;
  nlohmann::json metadata;
  std::vector<std::pair<std::string, Tensor>> arrays;
};

void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

Checkpoint checkpoint_from_model(ModelParams& params, const Config& cfg,
                                 const Vocab& vocab);
/// Rebuilds params/config/vocab; array names and shapes must match the set
/// the stored config implies.
void model_from_checkpoint(const Checkpoint& ck, ModelParams& params,
                           Config& cfg, Vocab& vocab);

nlohmann::json config_to_json(const Config& cfg);
Config config_from_json(const nlohmann::json& j);

}  // namespace clapkit
