#pragma once

// Two-stage fine-tuning: in-batch joint training over positives and hard
// negatives, then generation-only training against retrievals fixed at stage
// start from a frozen global index. Also inference.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "murag/backbone.hpp"
#include "murag/memory_index.hpp"
#include "murag/optim.hpp"
#include "murag/records.hpp"
#include "murag/training.hpp"

namespace murag {

enum class Stage { in_batch, fixed_retrieval };

std::string to_string(Stage stage);
Stage stage_from_string(const std::string& name);

struct StagePlan {
  Stage stage = Stage::in_batch;
  std::size_t steps = 1;
  std::size_t k = 4;
  std::size_t beam_width = 2;
  double lambda = 1.0;
  std::size_t batch_size = 8;
  double lr = 3e-4;
  std::uint64_t seed = 0;
  std::size_t max_answer_tokens = 8;

  void validate() const;
};

// Text-only query segment; a question carrying an image is rejected.
Segment question_segment(const FinetuneExample& example);

template <typename T>
LossBreakdown inbatch_finetune_step(Backbone<T>& model, Adam<T>& optimizer, std::span<const FinetuneExample> batch,
                                    const MemoryStore& store, const StagePlan& plan);

template <typename T>
EncodedMemory build_global_index(const Backbone<T>& model, const MemoryStore& store, std::size_t workers = 1);

struct ManifestLine {
  std::string question_id;
  std::vector<std::string> ids;
  std::vector<double> scores;

  bool operator==(const ManifestLine&) const = default;
};

using RetrievalManifest = std::vector<ManifestLine>;

std::string manifest_to_jsonl(const RetrievalManifest& manifest);
RetrievalManifest manifest_from_jsonl(const std::string& text);

// Top-K per question under the current encoder.
template <typename T>
RetrievalManifest retrieve_fixed(const Backbone<T>& model, std::span<const FinetuneExample> dataset,
                                 const EncodedMemory& index, std::size_t k);

// Generation loss of one example given its fixed retrievals.
template <typename T>
BasicTensor<T> fixed_generation_loss(const Backbone<T>& model, const FinetuneExample& example,
                                     const ManifestLine& retrieved, const MemoryStore& store);

using StepCallback = std::function<void(std::uint64_t step, const LossBreakdown& loss)>;

// Deterministic batches: reshuffled passes over the dataset seeded by plan.seed.
class BatchOrder {
 public:
  BatchOrder(std::size_t size, std::uint64_t seed);
  std::vector<std::size_t> next(std::size_t batch_size);

 private:
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  Rng rng_;
};

template <typename T>
void run_inbatch_stage(Backbone<T>& model, const std::vector<FinetuneExample>& dataset, const MemoryStore& store,
                       const StagePlan& plan, const StepCallback& on_step = {});

// Optimizes only the generation loss against the manifest, which is computed
// by the caller before the stage starts and not refreshed.
template <typename T>
void fixed_retrieval_finetune(Backbone<T>& model, const std::vector<FinetuneExample>& dataset,
                              const RetrievalManifest& manifest, const MemoryStore& store, const StagePlan& plan,
                              const StepCallback& on_step = {});

struct Answer {
  TokenSeq tokens;
  RetrievalResult retrieval;
  double log_prob = 0.0;
};

// The retriever encodes the question against the index (whose vectors came
// from the retriever's checkpoint); the reader generates over
// [retrieved..., question]. Both may be the same model.
template <typename T>
Answer answer(const Backbone<T>& retriever, const Backbone<T>& reader, const TokenSeq& question,
              const EncodedMemory& index, const MemoryStore& store, const StagePlan& plan);

template <typename T>
Answer answer(const Backbone<T>& model, const TokenSeq& question, const EncodedMemory& index,
              const MemoryStore& store, const StagePlan& plan) {
  return answer(model, model, question, index, store, plan);
}

// Index over the question's positives followed by its negatives.
EncodedMemory distractor_index(const EncodedMemory& global, const FinetuneExample& example);

}  // namespace murag
