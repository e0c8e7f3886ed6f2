#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cstn/tensor.hpp"

namespace cstn {

/// Raw image tensor file: 16-byte header (magic "CSTN" + u32 dims C,H,W),
/// then C*H*W little-endian float64 values.
void write_image_file(const std::string& path, const Tensor& t);

/// Reads a raw image tensor file. Bad magic, bad dims, or a short file
/// raise ParseError with the byte offset of the problem.
Tensor read_image_file(const std::string& path);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Versioned training snapshot. The tensor table carries model parameters,
/// batchnorm buffers, and optimizer slots under distinct name prefixes;
/// config_text is the full config the run was started with, so a
/// checkpoint is self-describing.
struct Checkpoint {
    std::uint32_t version = kCheckpointVersion;
    std::string config_text;
    std::uint64_t epoch = 0;
    std::uint64_t rng_state = 0;
    std::vector<std::pair<std::string, Tensor>> tensors;

    /// Table lookup; missing name throws ValueError listing what exists.
    const Tensor& tensor(const std::string& name) const;
    bool has_tensor(const std::string& name) const;
};

/// Binary container: magic "CKPT", u32 version, u64 epoch, u64 rng state,
/// length-prefixed config text, then a length-prefixed named tensor table
/// of little-endian float64.
void save_checkpoint(const std::string& path, const Checkpoint& c);

/// ParseError on malformed files (with byte offsets); a version other
/// than the library's refuses to load, printing both versions.
Checkpoint load_checkpoint(const std::string& path);

} // namespace cstn
