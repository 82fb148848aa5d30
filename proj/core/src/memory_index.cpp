#include "murag/memory_index.hpp"

#include <algorithm>
#include <cstdlib>
#include <map>
#include <mutex>
#include <set>
#include <thread>

namespace murag {

namespace {

struct Scored {
  double score;
  std::size_t row;
};

// Strict total order: higher score first, then smaller id.
struct Ranking {
  const EncodedMemory* index;
  bool operator()(const Scored& a, const Scored& b) const {
    if (a.score != b.score) return a.score > b.score;
    return index->ids()[a.row] < index->ids()[b.row];
  }
};

void check_query(std::span<const float> query, const EncodedMemory& index, std::size_t k) {
  if (!index.frozen()) throw IndexError("top_k: index is not frozen");
  if (index.size() == 0) throw IndexError("top_k: index is empty");
  if (k == 0 || k > index.size()) {
    throw IndexError("top_k: K=" + std::to_string(k) + " outside [1, " + std::to_string(index.size()) + "]");
  }
  if (query.size() != index.dim()) {
    throw IndexError("top_k: query width " + std::to_string(query.size()) + " does not match index width " +
                     std::to_string(index.dim()));
  }
}

void select(std::vector<Scored>& pool, std::size_t k, const EncodedMemory& index) {
  const auto mid = pool.begin() + static_cast<std::ptrdiff_t>(std::min(k, pool.size()));
  std::partial_sort(pool.begin(), mid, pool.end(), Ranking{&index});
  pool.erase(mid, pool.end());
}

RetrievalResult finish(const std::vector<Scored>& best, const EncodedMemory& index) {
  RetrievalResult out;
  for (const auto& s : best) {
    out.ids.push_back(index.ids()[s.row]);
    out.scores.push_back(s.score);
    out.rows.push_back(s.row);
  }
  return out;
}

}  // namespace

void EncodedMemory::add(std::string id, std::span<const float> vector) {
  if (frozen_) throw IndexError("cannot add '" + id + "' to a frozen index");
  if (vector.size() != dim_) {
    throw IndexError("vector for '" + id + "' has width " + std::to_string(vector.size()) + ", index width is " +
                     std::to_string(dim_));
  }
  if (!rows_.emplace(id, ids_.size()).second) throw IndexError("duplicate memory id '" + id + "'");
  ids_.push_back(std::move(id));
  vectors_.insert(vectors_.end(), vector.begin(), vector.end());
}

std::optional<std::size_t> EncodedMemory::find(const std::string& id) const {
  auto it = rows_.find(id);
  if (it == rows_.end()) return std::nullopt;
  return it->second;
}

EncodedMemory EncodedMemory::subset(const std::vector<std::string>& ids) const {
  EncodedMemory out(dim_, fingerprint_);
  for (const auto& id : ids) {
    auto row = find(id);
    if (!row) throw IndexError("subset: unknown id '" + id + "'");
    out.add(id, vector(*row));
  }
  out.freeze();
  return out;
}

std::string EncodedMemory::serialize() const {
  std::string out = "MRGI";
  binary::put_u32(out, kIndexVersion);
  binary::put_u32(out, static_cast<std::uint32_t>(ids_.size()));
  binary::put_u32(out, static_cast<std::uint32_t>(dim_));
  for (const auto& id : ids_) binary::put_string16(out, id);
  out.append(reinterpret_cast<const char*>(fingerprint_.data()), fingerprint_.size());
  for (float v : vectors_) binary::put_f32(out, v);
  return out;
}

EncodedMemory EncodedMemory::parse(const std::string& bytes) {
  binary::Reader in(bytes);
  if (in.raw(4) != "MRGI") throw FormatError("index: bad magic");
  const auto version = in.u32();
  if (version != kIndexVersion) throw FormatError("index: unsupported version " + std::to_string(version));
  const auto n = in.u32();
  const auto d = in.u32();
  EncodedMemory out(d);
  std::vector<std::string> ids;
  for (std::uint32_t i = 0; i < n; ++i) ids.push_back(in.string16());
  const auto fp = in.raw(32);
  std::copy(fp.begin(), fp.end(), out.fingerprint_.begin());
  std::vector<float> row(d);
  for (std::uint32_t i = 0; i < n; ++i) {
    for (auto& v : row) v = in.f32();
    out.add(std::move(ids[i]), row);
  }
  if (!in.done()) throw FormatError("index: trailing bytes");
  out.freeze();
  return out;
}

void EncodedMemory::save(const std::filesystem::path& path) const { binary::write_file(path, serialize()); }

EncodedMemory EncodedMemory::load(const std::filesystem::path& path) { return parse(binary::read_file(path)); }

double inner_product(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

RetrievalResult top_k(std::span<const float> query, const EncodedMemory& index, std::size_t k,
                      const std::optional<Digest>& query_fingerprint) {
  check_query(query, index, k);
  std::vector<Scored> pool(index.size());
  for (std::size_t r = 0; r < index.size(); ++r) pool[r] = {inner_product(query, index.vector(r)), r};
  select(pool, k, index);
  auto out = finish(pool, index);
  if (query_fingerprint && *query_fingerprint != index.fingerprint()) {
    out.warning = "query encoder fingerprint " + to_hex(*query_fingerprint).substr(0, 12) +
                  " differs from index fingerprint " + to_hex(index.fingerprint()).substr(0, 12);
  }
  return out;
}

RetrievalResult top_k_blocked(std::span<const float> query, const EncodedMemory& index, std::size_t k,
                              std::size_t workers, std::size_t block_size) {
  check_query(query, index, k);
  if (block_size == 0) throw std::invalid_argument("top_k_blocked: block size must be positive");
  const std::size_t n = index.size();
  const std::size_t blocks = (n + block_size - 1) / block_size;
  std::vector<std::vector<Scored>> winners(blocks);
  auto scan = [&](std::size_t first_block) {
    for (std::size_t b = first_block; b < blocks; b += std::max<std::size_t>(workers, 1)) {
      const std::size_t lo = b * block_size, hi = std::min(n, lo + block_size);
      auto& pool = winners[b];
      pool.reserve(hi - lo);
      for (std::size_t r = lo; r < hi; ++r) pool.push_back({inner_product(query, index.vector(r)), r});
      select(pool, k, index);
    }
  };
  workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(blocks, 1));
  if (workers == 1) {
    scan(0);
  } else {
    std::vector<std::thread> threads;
    for (std::size_t w = 0; w < workers; ++w) threads.emplace_back(scan, w);
    for (auto& t : threads) t.join();
  }
  std::vector<Scored> merged;
  for (const auto& w : winners) merged.insert(merged.end(), w.begin(), w.end());
  select(merged, k, index);
  return finish(merged, index);
}

std::size_t default_workers() {
  if (const char* env = std::getenv("MURAG_THREADS")) {
    char* end = nullptr;
    const auto v = std::strtoul(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return v;
  }
  return 1;
}

template <typename T>
std::vector<float> encode_query(const Backbone<T>& model, const Segment& query) {
  TapePause pause;
  const auto cls = model.encode(MultimodalInput{{query}}).cls;
  return std::vector<float>(cls.data().begin(), cls.data().end());
}

template <typename T>
std::vector<float> encode_entry(const Backbone<T>& model, const MemoryEntry& entry) {
  return encode_query(model, entry.segment(model.config()));
}

template <typename T>
EncodedMemory build_index(const Backbone<T>& model, const std::vector<MemoryEntry>& entries, std::size_t workers) {
  std::set<std::string> seen;
  for (const auto& e : entries) {
    if (!seen.insert(e.id).second) throw IndexError("build_index: duplicate memory id '" + e.id + "'");
  }
  const std::size_t n = entries.size();
  std::vector<std::vector<float>> vectors(n);
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto run = [&](std::size_t lo, std::size_t hi) {
    try {
      for (std::size_t i = lo; i < hi; ++i) vectors[i] = encode_entry(model, entries[i]);
    } catch (...) {
      std::lock_guard lock(failure_mutex);
      if (!failure) failure = std::current_exception();
    }
  };
  workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(n, 1));
  if (workers == 1) {
    run(0, n);
  } else {
    std::vector<std::thread> threads;
    const std::size_t chunk = (n + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
      threads.emplace_back(run, std::min(n, w * chunk), std::min(n, (w + 1) * chunk));
    }
    for (auto& t : threads) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  EncodedMemory index(model.config().d_model, model.fingerprint());
  for (std::size_t i = 0; i < n; ++i) index.add(entries[i].id, vectors[i]);
  index.freeze();
  return index;
}

InBatchMemory in_batch_memory(std::span<const FinetuneExample> batch, const MemoryStore& store) {
  if (batch.empty()) throw std::invalid_argument("in_batch_memory: empty batch");
  InBatchMemory out;
  std::map<std::string, std::size_t> position;
  auto place = [&](const std::string& id) {
    auto [it, inserted] = position.emplace(id, out.entries.size());
    if (inserted) out.entries.push_back(store.at(id));
    return it->second;
  };
  for (const auto& ex : batch) {
    if (ex.positives.empty()) throw std::invalid_argument("in_batch_memory: example '" + ex.id + "' has no positives");
    std::vector<std::size_t> labels;
    for (const auto& id : ex.positives) labels.push_back(place(id));
    for (const auto& id : ex.negatives) place(id);
    out.positives.push_back(std::move(labels));
  }
  return out;
}

template std::vector<float> encode_query(const Backbone<float>&, const Segment&);
template std::vector<float> encode_query(const Backbone<double>&, const Segment&);
template std::vector<float> encode_entry(const Backbone<float>&, const MemoryEntry&);
template std::vector<float> encode_entry(const Backbone<double>&, const MemoryEntry&);
template EncodedMemory build_index(const Backbone<float>&, const std::vector<MemoryEntry>&, std::size_t);
template EncodedMemory build_index(const Backbone<double>&, const std::vector<MemoryEntry>&, std::size_t);

}  // namespace murag
