#include "murag/records.hpp"

#include <stdexcept>

namespace murag {

std::string to_string(EntryKind kind) {
  switch (kind) {
    case EntryKind::caption: return "caption";
    case EntryKind::passage: return "passage";
    case EntryKind::image_text_pair: return "image-text-pair";
  }
  return "?";
}

EntryKind entry_kind_from_string(const std::string& name) {
  if (name == "caption") return EntryKind::caption;
  if (name == "passage") return EntryKind::passage;
  if (name == "image-text-pair") return EntryKind::image_text_pair;
  throw std::invalid_argument("unknown memory entry kind '" + name + "'");
}

Segment MemoryEntry::segment(const ModelConfig& config) const {
  if (image) return Segment{image, text};
  return Segment{PatchGrid::zeros(config.image_size, config.image_size), text};
}

std::string to_string(Source source) {
  switch (source) {
    case Source::cap_crawl: return "cap-crawl";
    case Source::cap_clean: return "cap-clean";
    case Source::qa_text: return "qa-text";
    case Source::qa_image: return "qa-image";
  }
  return "?";
}

Source source_from_string(const std::string& name) {
  if (name == "cap-crawl") return Source::cap_crawl;
  if (name == "cap-clean") return Source::cap_clean;
  if (name == "qa-text") return Source::qa_text;
  if (name == "qa-image") return Source::qa_image;
  throw std::invalid_argument("unknown pre-training source '" + name + "'");
}

bool is_caption_source(Source source) { return source == Source::cap_crawl || source == Source::cap_clean; }

void MemoryStore::add(MemoryEntry entry) {
  if (entry.text.empty() && !entry.image) {
    throw std::invalid_argument("memory entry '" + entry.id + "' has neither image nor text");
  }
  if (!by_id_.emplace(entry.id, entries_.size()).second) {
    throw std::invalid_argument("duplicate memory entry id '" + entry.id + "'");
  }
  entries_.push_back(std::move(entry));
}

const MemoryEntry& MemoryStore::at(const std::string& id) const {
  auto it = by_id_.find(id);
  if (it == by_id_.end()) throw std::out_of_range("unknown memory entry id '" + id + "'");
  return entries_[it->second];
}

}  // namespace murag
