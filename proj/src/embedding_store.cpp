#include "kalign/embedding_store.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "json.hpp"

#include "kalign/detail/binary_io.hpp"
#include "kalign/error.hpp"

namespace kalign {
namespace {

constexpr char kMagic[4] = {'K', 'E', 'M', 'B'};

enum SectionTag : std::uint8_t { kLabels = 1, kIds = 2, kMeta = 3 };

std::string cell(Index r, Index c) {
  return "row " + std::to_string(r) + ", col " + std::to_string(c);
}

std::size_t dtype_size(Dtype dtype) { return dtype == Dtype::kFloat32 ? 4 : 8; }

}  // namespace

void EmbeddingSet::validate() const {
  if (data.rows() < 1 || data.cols() < 1) {
    throw DataError("embedding set must have n >= 1 and d >= 1 (got " +
                    std::to_string(data.rows()) + "x" + std::to_string(data.cols()) + ")");
  }
  for (Index r = 0; r < data.rows(); ++r) {
    for (Index c = 0; c < data.cols(); ++c) {
      if (!std::isfinite(data(r, c))) throw DataError("non-finite value at " + cell(r, c));
    }
  }
  if (labels && static_cast<Index>(labels->size()) != data.rows()) {
    throw DataError("labels length " + std::to_string(labels->size()) + " != n = " +
                    std::to_string(data.rows()));
  }
  if (ids && static_cast<Index>(ids->size()) != data.rows()) {
    throw DataError("ids length " + std::to_string(ids->size()) + " != n = " +
                    std::to_string(data.rows()));
  }
}

std::vector<Index> PairBatch::rows() const {
  std::vector<Index> out;
  out.reserve(pairs.size() * 2);
  for (const auto& [i, j] : pairs) {
    out.push_back(i);
    out.push_back(j);
  }
  return out;
}

std::vector<std::uint8_t> encode_kemb(const EmbeddingSet& set, Dtype dtype) {
  set.validate();
  if (dtype == Dtype::kFloat32) {
    for (Index r = 0; r < set.rows(); ++r) {
      for (Index c = 0; c < set.dim(); ++c) {
        if (!std::isfinite(static_cast<float>(set.data(r, c)))) {
          throw DataError("value at " + cell(r, c) + " overflows 32-bit float");
        }
      }
    }
  }

  detail::ByteWriter w;
  w.put_bytes(std::string_view(kMagic, 4));
  w.put<std::uint32_t>(kKembVersion);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(dtype));
  w.put<std::uint64_t>(static_cast<std::uint64_t>(set.rows()));
  w.put<std::uint64_t>(static_cast<std::uint64_t>(set.dim()));

  const std::size_t payload_start = w.size();
  for (Index r = 0; r < set.rows(); ++r) {
    for (Index c = 0; c < set.dim(); ++c) {
      if (dtype == Dtype::kFloat32) {
        w.put<float>(static_cast<float>(set.data(r, c)));
      } else {
        w.put<double>(set.data(r, c));
      }
    }
  }
  const std::uint32_t crc = detail::crc32(w.view(payload_start, w.size() - payload_start));

  if (set.labels) {
    w.put<std::uint8_t>(kLabels);
    w.put<std::uint64_t>(set.labels->size() * sizeof(std::int64_t));
    for (std::int64_t label : *set.labels) w.put<std::int64_t>(label);
  }
  if (set.ids) {
    std::uint64_t len = 0;
    for (const auto& id : *set.ids) len += sizeof(std::uint32_t) + id.size();
    w.put<std::uint8_t>(kIds);
    w.put<std::uint64_t>(len);
    for (const auto& id : *set.ids) {
      if (id.size() > std::numeric_limits<std::uint32_t>::max()) throw DataError("id too long");
      w.put<std::uint32_t>(static_cast<std::uint32_t>(id.size()));
      w.put_bytes(id);
    }
  }
  if (!set.meta.empty()) {
    const std::string json = nlohmann::json(set.meta).dump();
    w.put<std::uint8_t>(kMeta);
    w.put<std::uint64_t>(json.size());
    w.put_bytes(json);
  }
  w.put<std::uint32_t>(crc);
  return w.release();
}

KembHeader read_kemb_header(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes, "KEMB header");
  auto magic = r.take(4);
  if (!std::equal(magic.begin(), magic.end(), kMagic)) {
    throw FormatError(FormatError::Kind::kBadMagic, "bad magic: not a KEMB file");
  }
  KembHeader h;
  h.version = r.get<std::uint32_t>();
  if (h.version == 0 || h.version > kKembVersion) {
    throw FormatError(FormatError::Kind::kBadVersion,
                      "unsupported KEMB version " + std::to_string(h.version));
  }
  const auto code = r.get<std::uint8_t>();
  if (code != 1 && code != 2) {
    throw FormatError(FormatError::Kind::kBadDtype, "unknown dtype code " + std::to_string(code));
  }
  h.dtype = static_cast<Dtype>(code);
  h.rows = r.get<std::uint64_t>();
  h.cols = r.get<std::uint64_t>();
  return h;
}

EmbeddingSet decode_kemb(std::span<const std::uint8_t> bytes) {
  const KembHeader h = read_kemb_header(bytes);
  if (h.rows == 0 || h.cols == 0) throw DataError("KEMB file declares an empty matrix");
  const std::size_t elem = dtype_size(h.dtype);
  const std::uint64_t max_count = std::numeric_limits<std::uint64_t>::max() / elem;
  if (h.cols > max_count / h.rows) throw FormatError(FormatError::Kind::kTruncated, "KEMB shape overflows");
  const std::uint64_t payload_len = h.rows * h.cols * elem;
  if (bytes.size() < kKembHeaderBytes + 4 || payload_len > bytes.size() - kKembHeaderBytes - 4) {
    throw FormatError(FormatError::Kind::kTruncated,
                      "truncated payload: need " + std::to_string(payload_len) + " bytes");
  }

  const auto payload = bytes.subspan(kKembHeaderBytes, payload_len);
  const auto tail = bytes.subspan(kKembHeaderBytes + payload_len);
  detail::ByteReader sections(tail.first(tail.size() - 4), "KEMB sections");

  EmbeddingSet set;
  const auto n = static_cast<Index>(h.rows);
  while (sections.remaining() > 0) {
    const auto tag = sections.get<std::uint8_t>();
    const auto len = sections.get<std::uint64_t>();
    auto body = sections.take(len);
    detail::ByteReader br(body, "KEMB section " + std::to_string(tag));
    switch (tag) {
      case kLabels: {
        if (len != h.rows * sizeof(std::int64_t)) {
          throw FormatError(FormatError::Kind::kTruncated, "labels section length mismatch");
        }
        std::vector<std::int64_t> labels(h.rows);
        for (auto& l : labels) l = br.get<std::int64_t>();
        set.labels = std::move(labels);
        break;
      }
      case kIds: {
        std::vector<std::string> ids;
        ids.reserve(h.rows);
        for (Index i = 0; i < n; ++i) {
          const auto id_len = br.get<std::uint32_t>();
          auto s = br.take(id_len);
          ids.emplace_back(s.begin(), s.end());
        }
        set.ids = std::move(ids);
        break;
      }
      case kMeta: {
        auto parsed = nlohmann::json::parse(body.begin(), body.end(), nullptr, false);
        if (parsed.is_discarded() || !parsed.is_object()) {
          throw DataError("meta section is not a JSON object");
        }
        for (const auto& [k, v] : parsed.items()) {
          set.meta[k] = v.is_string() ? v.get<std::string>() : v.dump();
        }
        break;
      }
      default:
        break;  // unknown section: skipped
    }
  }

  std::uint32_t stored;
  std::memcpy(&stored, tail.data() + tail.size() - 4, 4);
  if (detail::crc32(payload) != stored) {
    throw FormatError(FormatError::Kind::kCrcMismatch, "CRC mismatch: payload is corrupt");
  }

  set.data.resize(n, static_cast<Index>(h.cols));
  const std::uint8_t* p = payload.data();
  for (Index r = 0; r < set.data.rows(); ++r) {
    for (Index c = 0; c < set.data.cols(); ++c) {
      if (h.dtype == Dtype::kFloat32) {
        float v;
        std::memcpy(&v, p, 4);
        set.data(r, c) = v;
      } else {
        std::memcpy(&set.data(r, c), p, 8);
      }
      p += elem;
    }
  }
  set.validate();
  return set;
}

void save(const EmbeddingSet& set, const std::filesystem::path& path, Dtype dtype) {
  detail::write_file(path, encode_kemb(set, dtype));
}

EmbeddingSet load(const std::filesystem::path& path) {
  return decode_kemb(detail::read_file(path));
}

PairedEmbeddings pair(EmbeddingSet source, EmbeddingSet target) {
  source.validate();
  target.validate();
  if (source.rows() != target.rows()) {
    throw DataError("row-count mismatch: source has " + std::to_string(source.rows()) +
                    " rows, target has " + std::to_string(target.rows()));
  }
  if (source.ids && target.ids) {
    const auto& a = *source.ids;
    const auto& b = *target.ids;
    auto [ia, ib] = std::mismatch(a.begin(), a.end(), b.begin());
    if (ia != a.end()) {
      const auto idx = std::distance(a.begin(), ia);
      throw DataError("id mismatch at index " + std::to_string(idx) + ": \"" + *ia + "\" vs \"" +
                      *ib + "\"");
    }
  }
  return PairedEmbeddings{std::move(source), std::move(target)};
}

std::vector<Index> shuffled_indices(Index n, Rng& rng) {
  std::vector<Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Index{0});
  for (Index i = n - 1; i > 0; --i) {
    const auto j = static_cast<Index>(uniform_below(rng, static_cast<std::uint64_t>(i + 1)));
    std::swap(perm[i], perm[j]);
  }
  return perm;
}

PairBatch sample_pair_batch(const PairedEmbeddings& paired, Index batch_size, Rng& rng) {
  const Index n = paired.rows();
  if (n < 2) throw DataError("pair sampling needs n >= 2 rows (got " + std::to_string(n) + ")");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");

  PairBatch batch;
  batch.pairs.reserve(static_cast<std::size_t>(batch_size));
  if (2 * batch_size <= n) {
    // Partial Fisher-Yates: the first 2B slots become a uniform sample
    // without replacement, paired off in draw order.
    std::vector<Index> pool(static_cast<std::size_t>(n));
    std::iota(pool.begin(), pool.end(), Index{0});
    for (Index k = 0; k < 2 * batch_size; ++k) {
      const auto j = k + static_cast<Index>(uniform_below(rng, static_cast<std::uint64_t>(n - k)));
      std::swap(pool[k], pool[j]);
    }
    for (Index p = 0; p < batch_size; ++p) batch.pairs.emplace_back(pool[2 * p], pool[2 * p + 1]);
  } else {
    const auto un = static_cast<std::uint64_t>(n);
    for (Index p = 0; p < batch_size; ++p) {
      const auto i = static_cast<Index>(uniform_below(rng, un));
      auto j = static_cast<Index>(uniform_below(rng, un - 1));
      if (j >= i) ++j;
      batch.pairs.emplace_back(i, j);
    }
  }
  return batch;
}

std::vector<PairBatch> epoch_pair_batches(Index n, Index batch_size, Rng& rng) {
  if (n < 2) throw DataError("pair sampling needs n >= 2 rows (got " + std::to_string(n) + ")");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  const auto perm = shuffled_indices(n, rng);
  const Index per_step = 2 * batch_size;
  const Index steps = (n + per_step - 1) / per_step;
  std::vector<PairBatch> out(static_cast<std::size_t>(steps));
  // Consecutive positions of a cyclic permutation are distinct rows, so the
  // wrap-around never produces i == j.
  for (Index s = 0; s < steps; ++s) {
    auto& b = out[static_cast<std::size_t>(s)];
    b.pairs.reserve(static_cast<std::size_t>(batch_size));
    for (Index p = 0; p < batch_size; ++p) {
      const Index a = (s * per_step + 2 * p) % n;
      b.pairs.emplace_back(perm[a], perm[(a + 1) % n]);
    }
  }
  return out;
}

}  // namespace kalign
