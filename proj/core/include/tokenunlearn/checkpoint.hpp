#pragma once

#include <filesystem>
#include <iosfwd>

#include "tokenunlearn/model.hpp"

namespace tokenunlearn {

/// Binary checkpoint, all integers and doubles little-endian:
///
///   offset  size  field
///   0       8     magic "TULMCKPT"
///   8       4     format version (u32, currently 1)
///   12      4     vocab_size (i32)
///   16      4     d_model (i32)
///   20      4     d_hidden (i32)
///   24      4     n_layers (i32)
///   28      4     context_length (i32)
///   32      1     has_reference (u8, 0 or 1)
///   33      8     parameter count N (u64)
///   41      8N    theta (IEEE-754 binary64)
///   ...     8N    theta_o, present only when has_reference = 1
///
/// Doubles are stored bit-exactly, so save/load is lossless.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(const ModelState& model, std::ostream& out);
ModelState read_checkpoint(std::istream& in);

/// Throws IoError on open/write failures.
void save_checkpoint(const ModelState& model, const std::filesystem::path& path);
/// Throws IoError / ParseError on unreadable or malformed files.
ModelState load_checkpoint(const std::filesystem::path& path);

}  // namespace tokenunlearn
