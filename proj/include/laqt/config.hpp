#pragma once

// INI run configuration: sections [scenario], [agent], [mixer], [train].

#include <cstdint>
#include <string>

#include "laqt/trainer.hpp"

namespace laqt {

/// Parses INI text. Omitted keys keep their defaults; unknown sections or
/// keys and malformed values raise ConfigError naming the key and the
/// expected type.
TrainConfig parse_run_config(const std::string& text);
TrainConfig load_run_config(const std::string& path);

/// Canonical INI text with every key; parse_run_config(to_ini(c)) == c.
std::string to_ini(const TrainConfig& config);

/// FNV-1a 64 of the canonical text.
std::uint64_t config_hash(const TrainConfig& config);
std::uint64_t fnv1a64(const std::string& bytes);

}  // namespace laqt
