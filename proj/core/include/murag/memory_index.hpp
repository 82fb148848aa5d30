#pragma once

// Frozen CLS-vector memory and exact maximum inner product search.
//
// Index file, little-endian:
//   "MRGI" | version u32 | N u32 | D u32 | N x (u16 len | utf-8 id) |
//   fingerprint 32 bytes | N*D f32

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "murag/backbone.hpp"
#include "murag/records.hpp"

namespace murag {

inline constexpr std::uint32_t kIndexVersion = 1;

class IndexError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class EncodedMemory {
 public:
  EncodedMemory() = default;
  explicit EncodedMemory(std::size_t dim, Digest fingerprint = {}) : dim_(dim), fingerprint_(fingerprint) {}

  // Throws IndexError when frozen, on a duplicate id, or on a width mismatch.
  void add(std::string id, std::span<const float> vector);
  void freeze() { frozen_ = true; }

  bool frozen() const { return frozen_; }
  std::size_t size() const { return ids_.size(); }
  std::size_t dim() const { return dim_; }
  const std::vector<std::string>& ids() const { return ids_; }
  std::span<const float> vector(std::size_t i) const { return {vectors_.data() + i * dim_, dim_}; }
  std::span<const float> vectors() const { return vectors_; }
  const Digest& fingerprint() const { return fingerprint_; }
  std::optional<std::size_t> find(const std::string& id) const;

  // Frozen copy restricted to the given ids, in the given order.
  EncodedMemory subset(const std::vector<std::string>& ids) const;

  std::string serialize() const;
  static EncodedMemory parse(const std::string& bytes);
  void save(const std::filesystem::path& path) const;
  static EncodedMemory load(const std::filesystem::path& path);

  bool operator==(const EncodedMemory&) const = default;

 private:
  std::size_t dim_ = 0;
  std::vector<std::string> ids_;
  std::map<std::string, std::size_t> rows_;
  std::vector<float> vectors_;
  bool frozen_ = false;
  Digest fingerprint_{};
};

struct RetrievalResult {
  std::vector<std::string> ids;
  std::vector<double> scores;       // non-increasing
  std::vector<std::size_t> rows;    // positions in the index
  std::optional<std::string> warning;
};

double inner_product(std::span<const float> a, std::span<const float> b);

// Exact Top-K by inner product; ties go to the lexicographically smaller id.
// If query_fingerprint is given and differs from the index, the result
// carries a warning.
RetrievalResult top_k(std::span<const float> query, const EncodedMemory& index, std::size_t k,
                      const std::optional<Digest>& query_fingerprint = std::nullopt);

// Same result as top_k, scanning contiguous blocks on up to `workers` threads
// and merging the per-block winners.
RetrievalResult top_k_blocked(std::span<const float> query, const EncodedMemory& index, std::size_t k,
                              std::size_t workers, std::size_t block_size = 2048);

// Worker count from MURAG_THREADS, default 1.
std::size_t default_workers();

template <typename T>
std::vector<float> encode_entry(const Backbone<T>& model, const MemoryEntry& entry);

template <typename T>
std::vector<float> encode_query(const Backbone<T>& model, const Segment& query);

// Entries are partitioned across workers and results placed by position, so
// the vectors do not depend on the worker count.
template <typename T>
EncodedMemory build_index(const Backbone<T>& model, const std::vector<MemoryEntry>& entries,
                          std::size_t workers = 1);

struct InBatchMemory {
  std::vector<MemoryEntry> entries;
  std::vector<std::vector<std::size_t>> positives;  // per example, indices into entries
};

// Positives then negatives of each example in batch order; repeated ids are
// kept once at their first position.
InBatchMemory in_batch_memory(std::span<const FinetuneExample> batch, const MemoryStore& store);

}  // namespace murag
