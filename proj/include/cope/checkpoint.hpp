#pragma once

// Binary checkpoints for base weights and adapters.
//
// All integers and doubles are little-endian.
//
//   base model                         adapter
//   ----------                         -------
//   "COPE1"          5 bytes           "COPE1"          5 bytes
//   'M'              u8                'A'              u8
//   vocab hash       u64               vocab hash       u64
//   vocab, window,   5 x u32           base hash        u64
//   embed, hidden,                     vocab, window,   5 x u32
//   pad                                embed, hidden,
//   count            u64                pad
//   parameters       count x f64       rank             u32
//   checksum         u64               scale            f64
//                                      count            u64
//                                      parameters       count x f64
//                                      checksum         u64
//
// Base parameter order: embedding, hidden_w, hidden_b, output_w, output_b.
// Adapter order: hidden.a, hidden.b, output.a, output.b. The checksum is
// FNV-1a over every preceding byte. A file's content hash is FNV-1a over the
// whole file; adapters record the content hash of the base they extend.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "cope/lmcore.hpp"
#include "cope/tinylm.hpp"

namespace cope {

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { io, corrupt_header, hash_mismatch, dimension_mismatch };

  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

/// Returns the file's content hash.
std::uint64_t save_checkpoint(const ModelParams& params, const Vocabulary& vocab,
                              const std::filesystem::path& path);
std::uint64_t save_checkpoint(const AdapterDelta& adapter, const ModelDims& dims,
                              const Vocabulary& vocab, std::uint64_t base_hash,
                              const std::filesystem::path& path);

/// Validates magic, checksum and the vocabulary hash.
ModelParams load_model_checkpoint(const std::filesystem::path& path, const Vocabulary& vocab);

/// Additionally validates the recorded base hash and the dims.
AdapterDelta load_adapter_checkpoint(const std::filesystem::path& path, const Vocabulary& vocab,
                                     const ModelDims& dims, std::uint64_t base_hash);

/// FNV-1a over a file's bytes.
std::uint64_t file_hash(const std::filesystem::path& path);

}  // namespace cope
