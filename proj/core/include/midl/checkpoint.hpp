#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "midl/tensor.hpp"

// Flat binary container for named tensors, used for model checkpoints
// (magic "MIDL") and cached datasets (magic "DATA"). Layout, all integers and
// floats little-endian regardless of host:
//
//   magic[4] | u32 version | record*
//   record: u32 name_len | name bytes | u32 rank | u64 dims[rank] | f64 data[numel]
//
// Records are read until end-of-file; a partial record is a parse error
// naming the byte offset. Round-trips are bit-exact.

namespace midl {

inline constexpr std::string_view kModelMagic = "MIDL";
inline constexpr std::string_view kDatasetMagic = "DATA";
inline constexpr uint32_t kCheckpointVersion = 1;

void save_tensors(const std::string& path,
                  const std::vector<std::pair<std::string, Tensor>>& tensors,
                  std::string_view magic = kModelMagic);

std::vector<std::pair<std::string, Tensor>> load_tensors(
    const std::string& path, std::string_view expected_magic = kModelMagic);

// Serialize/parse against in-memory buffers (the file functions wrap these).
std::string serialize_tensors(
    const std::vector<std::pair<std::string, Tensor>>& tensors,
    std::string_view magic = kModelMagic);
std::vector<std::pair<std::string, Tensor>> parse_tensors(
    std::string_view bytes, std::string_view expected_magic = kModelMagic);

// Write-to-temp-then-rename; partial files never appear under `path`.
void write_file_atomic(const std::string& path, std::string_view contents);
std::string read_file(const std::string& path);

}  // namespace midl
