#pragma once

// Synthetic multimodal QA world.
//
// Each entity has a two-word pseudo name, an image of 1..max_count objects of
// one color and shape placed in distinct cells of a 4x4 grid, and a place.
// Memory holds, per entity, an image-text pair captioned only with the name
// and a text passage giving the place. Questions ask for an attribute that is
// only visible in the image, or the place. Pre-training examples cover four
// sources: noisy captions, clean captions, visual QA and text QA.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "murag/backbone.hpp"
#include "murag/records.hpp"

namespace murag {

struct WorldSpec {
  std::size_t image_size = 16;
  std::vector<std::string> colors{"red", "green", "blue", "yellow", "cyan", "magenta", "orange", "white"};
  std::vector<std::string> shapes{"square", "ring", "dot", "cross"};
  std::size_t max_count = 5;
  std::size_t entities = 500;
  std::size_t train_questions = 2000;
  std::size_t dev_questions = 200;
  std::size_t distractors_per_question = 5;
  std::vector<std::string> question_kinds{"color", "shape", "location"};
  std::size_t pretrain_entities = 300;
  std::size_t cap_crawl = 3000;
  std::size_t cap_clean = 1500;
  std::size_t qa_image = 1500;
  std::size_t qa_text = 600;
  std::uint64_t seed = 0;

  // Throws std::invalid_argument when the spec cannot be realized.
  void validate() const;
};

std::string to_json(const WorldSpec& spec);
// Fields absent from the document keep their defaults.
WorldSpec world_spec_from_json(const std::string& text);

// Color table used when drawing; values in {0, 0.5, 1}.
std::array<float, 3> color_rgb(const std::string& name);

struct CorpusRecord {
  std::string id;
  std::string kind;  // memory-entry | pretrain-example | finetune-example
  std::optional<PatchGrid> image;
  std::string text;
  std::string question;
  std::string answer;
  std::vector<std::string> positive_ids;
  std::vector<std::string> negative_ids;
  std::string source;

  bool operator==(const CorpusRecord&) const = default;
};

std::string record_to_json(const CorpusRecord& record);
CorpusRecord record_from_json(const std::string& line);

struct Corpus {
  std::vector<CorpusRecord> memory;
  std::vector<CorpusRecord> pretrain;
  std::vector<CorpusRecord> train;
  std::vector<CorpusRecord> dev;

  bool operator==(const Corpus&) const = default;
};

Corpus generate_corpus(const WorldSpec& spec);

// memory.jsonl, pretrain.jsonl, train.jsonl, dev.jsonl
void write_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus read_corpus(const std::filesystem::path& dir);

// Checks that every referenced id resolves and no answer leaks into the
// question or caption of its own entity. Throws std::invalid_argument.
void check_corpus(const Corpus& corpus);

// Reads the answer to a visual question directly from pixels.
std::optional<std::string> oracle_visual_answer(const WorldSpec& spec, const PatchGrid& image,
                                                const std::string& question_kind);

std::vector<std::string> tokenize(const std::string& text);

class Vocab {
 public:
  static Vocab build(const Corpus& corpus);
  static Vocab from_words(std::vector<std::string> words);

  TokenId id(const std::string& word) const;
  const std::string& word(TokenId id) const;
  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }

  TokenSeq encode(const std::string& text) const;
  // Drops reserved tokens and ids past the end of the vocabulary.
  std::string decode(const TokenSeq& tokens) const;

  bool operator==(const Vocab& other) const { return words_ == other.words_; }

 private:
  std::vector<std::string> words_;
  std::map<std::string, TokenId> ids_;
};

struct Dataset {
  MemoryStore store;
  std::vector<PretrainExample> pretrain;
  std::vector<FinetuneExample> train;
  std::vector<FinetuneExample> dev;
};

Dataset to_dataset(const Corpus& corpus, const Vocab& vocab);

}  // namespace murag
