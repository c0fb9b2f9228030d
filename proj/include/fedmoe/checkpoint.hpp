// SPDX-License-Identifier: Apache-2.0
//
// Portable checkpoint container. Layout:
//   "DFCK" | u32 version | u32 config-json length | config json (canonical UTF-8)
//   | u32 manifest-json length | manifest json [["name",[dims...]],...]
//   | raw little-endian f64 weights in manifest order
// Round-trips are bit-exact; the container byte length is the size used for
// communication accounting.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fedmoe/model.hpp"

namespace fedmoe {

enum class ModelKind { dense, moe };

std::vector<uint8_t> save_checkpoint(const DenseLm& model);
std::vector<uint8_t> save_checkpoint(const MoeLm& model);

ModelKind checkpoint_kind(std::span<const uint8_t> bytes);
DenseLm load_dense_checkpoint(std::span<const uint8_t> bytes);
MoeLm load_moe_checkpoint(std::span<const uint8_t> bytes);

// Container size for a dense model of this config, without materializing one.
int64_t dense_checkpoint_bytes(const LmConfig& config);

void write_file(const std::filesystem::path& path, std::span<const uint8_t> bytes);
std::vector<uint8_t> read_file(const std::filesystem::path& path);

}  // namespace fedmoe
