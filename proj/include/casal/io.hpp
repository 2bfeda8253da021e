#pragma once

#include "casal/model.hpp"

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace casal {

namespace fs = std::filesystem;

/// Binary tensor container shared by checkpoints, steering packs and activation caches.
///
/// Layout (all integers unsigned 64-bit little-endian):
///   magic            8 bytes
///   header length    u64, followed by that many bytes of UTF-8 JSON
///   tensor count     u64
///   per tensor:      name length u64, name bytes, rank u64, dims (rank x u64),
///                    row-major little-endian IEEE-754 doubles
struct TensorFile {
    std::string magic;  // exactly 8 bytes
    nlohmann::json header;
    std::vector<std::pair<std::string, Mat>> tensors;

    const Mat& tensor(const std::string& name) const;
};

inline constexpr char kCheckpointMagic[] = "CASALCK1";
inline constexpr char kPackMagic[] = "CASALSV1";
inline constexpr char kCacheMagic[] = "CASALAC1";

void write_tensor_file(const fs::path& path, const TensorFile& file);
TensorFile read_tensor_file(const fs::path& path, std::string_view expected_magic);

/// Serialized bytes of a container (what write_tensor_file puts on disk).
std::string encode_tensor_file(const TensorFile& file);
TensorFile decode_tensor_file(const std::string& bytes, std::string_view expected_magic);

struct Checkpoint {
    ModelConfig config;
    TransformerWeights weights;
};

void save_checkpoint(const fs::path& path, const ModelConfig& config, const TransformerWeights& weights);
Checkpoint load_checkpoint(const fs::path& path);

std::string read_text(const fs::path& path);
void write_text(const fs::path& path, std::string_view text);

/// SHA-256 of a file's bytes.
std::string hash_file(const fs::path& path);

}  // namespace casal
