#pragma once

// Checkpoint layout: "FBCK", u32 format version, u32 JSON length, the JSON
// config block, then every parameter array (parameter_views order) followed
// by the log temperature, as little-endian float64.

#include <string>
#include <string_view>

#include <json.hpp>

#include "fbrank/model.hpp"

namespace fbrank::model {

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string encode_checkpoint(const DualEncoder& model, const nlohmann::json& metadata = nlohmann::json::object());
DualEncoder decode_checkpoint(std::string_view bytes, nlohmann::json* metadata = nullptr);

void save_checkpoint(const std::string& path, const DualEncoder& model,
                     const nlohmann::json& metadata = nlohmann::json::object());
DualEncoder load_checkpoint(const std::string& path, nlohmann::json* metadata = nullptr);

}  // namespace fbrank::model
