#pragma once

// Versioned binary tensor container and content checksums.
//
// Layout (all integers little-endian):
//
//   magic    "CBTC"                 4 bytes
//   version  u32                    currently 1
//   count    u32                    number of entries
//   entry*   name_len u32, name bytes,
//            dtype u8 (0=f32, 1=f64, 2=i64, 3=u8),
//            ndim u32, dims i64[ndim],
//            nbytes u64, raw element bytes in row-major order
//
// Entries are written in the order given and read back in the same order, so
// a file written twice from identical tensors is byte-identical.

#include <torch/torch.h>

#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace cbsm {

inline constexpr std::uint32_t kContainerVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, torch::Tensor>>;

void write_tensors(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors read_tensors(const std::filesystem::path& path);

// Looks up an entry by name; throws DataError if absent.
const torch::Tensor& find_tensor(const NamedTensors& tensors, std::string_view name);

// Parameters and buffers of a module, keyed by their registered names.
NamedTensors module_state(const torch::nn::Module& module);
void save_module(const torch::nn::Module& module, const std::filesystem::path& path);
// Copies stored values into an already-constructed module of the same shape.
void load_module(torch::nn::Module& module, const std::filesystem::path& path);

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

} // namespace cbsm
