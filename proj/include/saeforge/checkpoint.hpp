#pragma once

// Binary checkpoint:
//   8 bytes   "SAEFORGE"
//   u32 LE    format version
//   u64 LE    metadata length in bytes
//   metadata  UTF-8 JSON: {"tensors": [{name, dtype, shape, offset, nbytes}], "run": {...}}
//   payload   f32 LE buffers in metadata order; offsets are relative to the payload start

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "saeforge/sae.hpp"
#include "saeforge/tensor.hpp"
#include "saeforge/transformer.hpp"

namespace saeforge {

inline constexpr char kCheckpointMagic[8] = {'S', 'A', 'E', 'F', 'O', 'R', 'G', 'E'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor<float>>>;

struct Checkpoint {
    NamedTensors tensors;
    nlohmann::json run;  // caller-supplied metadata, round-tripped verbatim
};

// Raised for malformed files; offset is the byte position where reading failed.
class CheckpointError : public std::runtime_error {
public:
    CheckpointError(const std::string& what, std::uint64_t offset)
        : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
    std::uint64_t offset() const { return offset_; }

private:
    std::uint64_t offset_;
};

// Serialized bytes of a checkpoint. Throws std::invalid_argument on
// duplicate names.
std::vector<char> encode_checkpoint(const NamedTensors& tensors, const nlohmann::json& run);
Checkpoint decode_checkpoint(const std::vector<char>& bytes);

// Writes to a sibling temp file and renames it into place.
void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors, const nlohmann::json& run);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Writes bytes atomically (temp file + rename).
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);

// Typed wrappers. Run metadata gains "kind" ("sae" / "transformer") plus the
// shape-defining config; load_* validate both.
void save_sae(const std::filesystem::path& path, const SparseAutoencoder<float>& sae, nlohmann::json run = {});
SparseAutoencoder<float> sae_from_checkpoint(const Checkpoint& ckpt);
SparseAutoencoder<float> load_sae(const std::filesystem::path& path);

void save_transformer(const std::filesystem::path& path, const TransformerParams<float>& params,
                      nlohmann::json run = {});
TransformerParams<float> transformer_from_checkpoint(const Checkpoint& ckpt);
TransformerParams<float> load_transformer(const std::filesystem::path& path);

// FNV-1a 64-bit.
std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a64(const std::string& s);
std::string hex64(std::uint64_t v);

// Hash over every parameter byte, in named() order.
std::uint64_t parameter_hash(const TransformerParams<float>& params);
std::uint64_t parameter_hash(const SparseAutoencoder<float>& sae);

}  // namespace saeforge
