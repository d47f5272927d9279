#pragma once

#include <string>

#include "json.hpp"
#include "vqnqs/model.hpp"

namespace vqnqs {

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// Binary model snapshot: magic "VQNQS1\0", u64-LE length-prefixed UTF-8 JSON
// header (ModelConfig + tensor manifest: name, shape, byte offset into the
// data section), then each tensor as raw little-endian float64 rows in
// manifest order.
void save_checkpoint(const VqTransformer& model, const std::string& path);
VqTransformer load_checkpoint(const std::string& path);

}  // namespace vqnqs
