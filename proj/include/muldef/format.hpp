#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "muldef/network.hpp"
#include "muldef/train.hpp"

namespace muldef {

using json = nlohmann::json;

// Container layout shared by model and adversarial-set files:
//   8-byte magic | u32 version | u64 header length | JSON header | float32 payload
// All integers and floats are little-endian.
inline constexpr std::uint32_t kFormatVersion = 1;

struct Container {
    json header;
    std::vector<float> payload;
};

std::vector<std::uint8_t> write_container(std::string_view magic, const json& header,
                                          std::span<const std::span<const Scalar>> blocks);
/// Validates magic and version; the payload must hold exactly
/// `header["payload_floats"]` values.
Container read_container(std::span<const std::uint8_t> bytes, std::string_view magic);

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
/// Writes through a temporary sibling and renames into place.
void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text(const std::filesystem::path& path, std::string_view text);

json spec_to_json(const NetworkSpec& spec);
NetworkSpec spec_from_json(const json& j);
json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const json& j);

std::vector<std::uint8_t> save_network(const Network& net);
Network load_network(std::span<const std::uint8_t> bytes);
void save_network_file(const Network& net, const std::filesystem::path& path);
Network load_network_file(const std::filesystem::path& path);

}  // namespace muldef
