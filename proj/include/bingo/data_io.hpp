#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bingo/matrix.hpp"
#include "bingo/nets.hpp"

namespace bingo {

inline constexpr std::uint8_t kSplitTrain = 0;
inline constexpr std::uint8_t kSplitVal = 1;

struct Dataset {
  std::size_t n = 0;
  std::size_t input_dim = 0;
  Matrix rows;                       // n x input_dim
  std::vector<std::int32_t> labels;  // empty when unlabeled
  std::vector<std::uint8_t> split;   // kSplitTrain / kSplitVal, size n

  bool has_labels() const { return !labels.empty(); }
  std::vector<std::size_t> split_indices(std::uint8_t tag) const;
  Dataset subset(const std::vector<std::size_t>& indices) const;
  void validate() const;
};

// Synthetic Gaussian blobs: class centers are random unit vectors scaled by
// class_sep, instances are center + N(0, noise^2 I). Balanced classes, and a
// deterministic per-class val split of roughly val_fraction.
Dataset gen_blobs(std::size_t n, std::size_t dim, std::size_t classes, double class_sep,
                  double noise, std::uint64_t seed, double val_fraction = 0.2);

// IDX ingestion (big-endian, unsigned-byte payload). Pixels are scaled to [0,1].
Dataset load_idx(const std::string& path);
std::vector<std::int32_t> load_idx_labels(const std::string& path);
void attach_labels(Dataset& data, std::vector<std::int32_t> labels);
// Writers for the same formats (round-trip tooling).
void save_idx(const Dataset& data, const std::string& path);  // values clamped to [0,1] bytes
void save_idx_labels(const std::vector<std::int32_t>& labels, const std::string& path);

// Native containers, little-endian, CRC-32 trailer, atomic write.
void save_dataset(const Dataset& data, const std::string& path);
Dataset load_dataset(const std::string& path);
void save_labels(const std::vector<std::int32_t>& labels, const std::string& path);
std::vector<std::int32_t> load_labels(const std::string& path);

struct Checkpoint {
  std::uint32_t version = 1;
  EncoderParams params;
  std::uint32_t config_fingerprint = 0;
  std::string mode;  // creation metadata; deterministic fields only
  std::uint32_t epochs = 0;
  std::uint64_t seed = 0;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Embeddings are stored as 32-bit reals; loading renormalizes each row back to
// unit length and reports the largest correction.
struct LoadedEmbeddings {
  Matrix rows;               // unit rows after renormalization
  double max_renorm_delta = 0.0;
};
void save_embeddings(const Matrix& unit_rows, const std::string& path);
LoadedEmbeddings load_embeddings(const std::string& path);

std::uint32_t crc32_bytes(const void* data, std::size_t len);

}  // namespace bingo
