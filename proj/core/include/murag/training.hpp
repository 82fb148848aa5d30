#pragma once

// Pre-training: contrastive and generative losses, the augmentation gate,
// the joint step over in-batch memory, and the two-phase mixture schedule.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "murag/backbone.hpp"
#include "murag/memory_index.hpp"
#include "murag/optim.hpp"
#include "murag/records.hpp"
#include "murag/rng.hpp"

namespace murag {

struct LossBreakdown {
  double l_con = 0.0;
  double l_gen = 0.0;
  double total = 0.0;
  std::size_t queries = 0;
  std::size_t top1_hits = 0;    // positive ranked first in the in-batch memory
  std::size_t topk_hits = 0;    // positive among the Top-K
  std::size_t memory_size = 0;

  double recall_at_1() const { return queries ? static_cast<double>(top1_hits) / static_cast<double>(queries) : 0.0; }
  bool retrieval_hit() const { return topk_hits == queries; }
};

// mean_b -mean_{p in positives[b]} log softmax(queries[b] . memory^T)[p]
template <typename T>
BasicTensor<T> contrastive_loss(const BasicTensor<T>& queries, const BasicTensor<T>& memory,
                                const std::vector<std::vector<std::size_t>>& positives);

// M_p: empty for caption sources, the retrieved ids in rank order otherwise.
std::vector<std::string> gate_augmentation(const PretrainExample& example, const RetrievalResult* retrieved);

// Teacher-forced cross-entropy of target given the encoder over
// [augmentation..., query]. Predicts target followed by the end token.
template <typename T>
BasicTensor<T> generative_loss(const Backbone<T>& model, std::span<const Segment> augmentation, const Segment& query,
                               const TokenSeq& target);

struct PretrainOptions {
  double lambda = 1.0;
  std::size_t topk = 4;
};

// Per-example record of what the gate produced, for inspection.
struct GateRecord {
  std::string example_id;
  Source source;
  std::size_t augmentation_size;
};

template <typename T>
LossBreakdown pretrain_step(Backbone<T>& model, Adam<T>& optimizer, std::span<const PretrainExample> batch,
                            const PretrainOptions& options, std::vector<GateRecord>* trace = nullptr);

// Same losses and retrieval statistics as pretrain_step without an update.
template <typename T>
LossBreakdown pretrain_eval(const Backbone<T>& model, std::span<const PretrainExample> batch,
                            const PretrainOptions& options);

struct MixtureConfig {
  Source phase1_source = Source::cap_crawl;
  std::uint64_t phase1_draws = 0;
  std::map<Source, double> ratios{{Source::cap_clean, 1.0}, {Source::qa_text, 1.0}, {Source::qa_image, 1.0}};
  std::uint64_t seed = 0;
};

// Deterministic stream of example positions. Phase 1 draws only the
// designated source; afterwards each draw picks a source i.i.d. by ratio.
// Within a source, examples are visited in reshuffled passes.
class MixtureSampler {
 public:
  MixtureSampler(const std::vector<PretrainExample>& examples, MixtureConfig config);

  std::size_t next();
  std::uint64_t draws() const { return draws_; }

 private:
  struct Pool {
    std::vector<std::size_t> order;
    std::size_t cursor = 0;
  };
  std::size_t take(Source source);

  MixtureConfig config_;
  Rng rng_;
  std::map<Source, Pool> pools_;
  std::vector<std::pair<Source, double>> cumulative_;
  std::uint64_t draws_ = 0;
};

struct TrainConfig {
  double lambda = 1.0;
  std::size_t batch_size = 32;
  double lr = 5e-4;
  std::uint64_t phase1_steps = 2000;
  std::uint64_t phase2_steps = 1000;
  std::map<Source, double> ratios{{Source::cap_clean, 1.0}, {Source::qa_text, 1.0}, {Source::qa_image, 1.0}};
  std::uint64_t seed = 0;
  std::size_t topk = 4;

  void validate() const;
};

std::string to_json(const TrainConfig& config);
// Fields absent from the document keep the values already in `base`.
TrainConfig train_config_from_json(const std::string& text, TrainConfig base = {});

struct StepMetrics {
  std::uint64_t step;
  LossBreakdown loss;
};

// {"step":..,"l_con":..,"l_gen":..,"total":..,"inbatch_recall@1":..}
std::string metrics_line(const StepMetrics& metrics);

// Runs phase 1 then phase 2. The callback sees every step.
template <typename T>
void run_pretraining(Backbone<T>& model, const std::vector<PretrainExample>& examples, const TrainConfig& config,
                     const std::function<void(const StepMetrics&)>& on_step = {});

}  // namespace murag
