#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kalign/rng.hpp"
#include "kalign/types.hpp"

namespace kalign {

/// An n x d block of encoder outputs with optional per-row labels and ids.
/// Immutable once validated; share it read-only across threads.
struct EmbeddingSet {
  Matrix data;
  std::optional<std::vector<std::int64_t>> labels;
  std::optional<std::vector<std::string>> ids;
  std::map<std::string, std::string> meta;

  Index rows() const { return data.rows(); }
  Index dim() const { return data.cols(); }

  std::span<const double> row(Index i) const {
    return {data.data() + i * data.cols(), static_cast<std::size_t>(data.cols())};
  }

  /// Throws DataError naming the first violated invariant.
  void validate() const;
};

/// Row-aligned (source, target) sets over the same items.
struct PairedEmbeddings {
  EmbeddingSet source;
  EmbeddingSet target;

  Index rows() const { return source.rows(); }
};

/// Index pairs (i, j), i != j, drawn for one stochastic step.
struct PairBatch {
  std::vector<std::pair<Index, Index>> pairs;

  Index batch_size() const { return static_cast<Index>(pairs.size()); }

  /// Endpoints in slot order: i0, j0, i1, j1, ...
  std::vector<Index> rows() const;
};

enum class Dtype : std::uint8_t { kFloat32 = 1, kFloat64 = 2 };

// KEMB v1, little-endian:
//   "KEMB" | u32 version | u8 dtype | u64 n | u64 d | payload (n*d, row major)
//   | sections [u8 tag][u64 len][bytes]... | u32 crc32(payload)
// Section tags: 1 labels (n x i64), 2 ids (n x {u32 len, utf8}), 3 meta (JSON).
inline constexpr std::uint32_t kKembVersion = 1;
inline constexpr std::size_t kKembHeaderBytes = 25;

struct KembHeader {
  std::uint32_t version = 0;
  Dtype dtype = Dtype::kFloat64;
  std::uint64_t rows = 0;
  std::uint64_t cols = 0;
};

std::vector<std::uint8_t> encode_kemb(const EmbeddingSet& set, Dtype dtype = Dtype::kFloat64);
EmbeddingSet decode_kemb(std::span<const std::uint8_t> bytes);

void save(const EmbeddingSet& set, const std::filesystem::path& path,
          Dtype dtype = Dtype::kFloat64);
EmbeddingSet load(const std::filesystem::path& path);

/// Parses only the fixed header; does not touch the payload or checksum.
KembHeader read_kemb_header(std::span<const std::uint8_t> bytes);

/// Pairs two sets row by row. Errors report the smallest offending index.
PairedEmbeddings pair(EmbeddingSet source, EmbeddingSet target);

/// Draws `batch_size` disjoint pairs from 2*batch_size distinct rows, sampled
/// uniformly without replacement. When 2*batch_size > n, each pair is drawn
/// independently as a uniform ordered pair of distinct rows.
PairBatch sample_pair_batch(const PairedEmbeddings& paired, Index batch_size, Rng& rng);

/// One epoch of disjoint-pair batches over a fresh shuffle of [0, n):
/// ceil(n / (2*batch_size)) batches; the final batch wraps around the
/// permutation so that every batch holds exactly batch_size pairs.
std::vector<PairBatch> epoch_pair_batches(Index n, Index batch_size, Rng& rng);

/// Uniformly random permutation of [0, n) (Fisher-Yates).
std::vector<Index> shuffled_indices(Index n, Rng& rng);

}  // namespace kalign
