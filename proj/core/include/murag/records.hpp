#pragma once

// In-memory records shared by pre-training, fine-tuning and the index.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "murag/backbone.hpp"

namespace murag {

enum class EntryKind { caption, passage, image_text_pair };

std::string to_string(EntryKind kind);
EntryKind entry_kind_from_string(const std::string& name);

struct MemoryEntry {
  std::string id;
  std::optional<PatchGrid> image;
  TokenSeq text;
  EntryKind kind = EntryKind::passage;

  // The zero grid stands in for an absent image.
  Segment segment(const ModelConfig& config) const;
  bool operator==(const MemoryEntry&) const = default;
};

// Pre-training sources; stand-ins for the crawled caption set, the clean
// caption set, text QA and visual QA.
enum class Source { cap_crawl, cap_clean, qa_text, qa_image };

std::string to_string(Source source);
Source source_from_string(const std::string& name);
bool is_caption_source(Source source);

struct PretrainExample {
  std::string id;
  Source source = Source::cap_crawl;
  std::optional<PatchGrid> image;
  TokenSeq prompt;
  TokenSeq target;
  TokenSeq memory_text;
  std::string memory_id;  // equal texts share an id

  Segment query() const { return Segment{image, prompt}; }
};

struct FinetuneExample {
  std::string id;
  TokenSeq question;
  std::optional<PatchGrid> question_image;  // must stay empty; queries are text-only
  TokenSeq answer;
  std::vector<std::string> positives;
  std::vector<std::string> negatives;
};

// Id-addressed memory entries in insertion order.
class MemoryStore {
 public:
  void add(MemoryEntry entry);
  const MemoryEntry& at(const std::string& id) const;
  bool contains(const std::string& id) const { return by_id_.count(id) != 0; }
  const std::vector<MemoryEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

 private:
  std::vector<MemoryEntry> entries_;
  std::map<std::string, std::size_t> by_id_;
};

}  // namespace murag
