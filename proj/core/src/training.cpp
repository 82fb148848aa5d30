#include "murag/training.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace murag {

namespace {

using json = nlohmann::json;

template <typename T>
struct Forward {
  LossBreakdown stats;
  BasicTensor<T> total;
};

template <typename T>
Forward<T> pretrain_forward(const Backbone<T>& model, std::span<const PretrainExample> batch,
                            const PretrainOptions& options, std::vector<GateRecord>* trace) {
  if (batch.empty()) throw std::invalid_argument("pretrain_step: empty batch");
  if (options.topk == 0) throw std::invalid_argument("pretrain_step: topk must be at least 1");

  // In-batch memory from the batch's m^T, one row per distinct memory id.
  std::vector<std::string> memory_ids;
  std::vector<Segment> memory_segments;
  std::map<std::string, std::size_t> memory_row;
  std::vector<std::vector<std::size_t>> positives;
  for (const auto& ex : batch) {
    auto [it, inserted] = memory_row.emplace(ex.memory_id, memory_ids.size());
    if (inserted) {
      memory_ids.push_back(ex.memory_id);
      memory_segments.push_back(Segment{std::nullopt, ex.memory_text});
    }
    positives.push_back({it->second});
  }

  std::vector<EncoderOutput<T>> query_enc;
  std::vector<BasicTensor<T>> query_cls, memory_cls;
  for (const auto& ex : batch) {
    query_enc.push_back(model.encode(MultimodalInput{{ex.query()}}));
    query_cls.push_back(query_enc.back().cls);
  }
  for (const auto& seg : memory_segments) memory_cls.push_back(model.encode(MultimodalInput{{seg}}).cls);
  const auto queries = concat_rows(std::span<const BasicTensor<T>>(query_cls));
  const auto memory = concat_rows(std::span<const BasicTensor<T>>(memory_cls));
  const auto l_con = contrastive_loss(queries, memory, positives);

  // Hard Top-K over detached vectors.
  EncodedMemory index(model.config().d_model);
  const std::size_t d = model.config().d_model;
  for (std::size_t m = 0; m < memory_ids.size(); ++m) {
    std::vector<float> row(memory.data().begin() + static_cast<std::ptrdiff_t>(m * d),
                           memory.data().begin() + static_cast<std::ptrdiff_t>((m + 1) * d));
    index.add(memory_ids[m], row);
  }
  index.freeze();
  const std::size_t k = std::min(options.topk, index.size());

  Forward<T> out;
  out.stats.queries = batch.size();
  out.stats.memory_size = memory_ids.size();
  std::vector<BasicTensor<T>> gen_terms;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& ex = batch[b];
    std::vector<float> q(queries.data().begin() + static_cast<std::ptrdiff_t>(b * d),
                         queries.data().begin() + static_cast<std::ptrdiff_t>((b + 1) * d));
    const auto retrieved = top_k(q, index, k);
    if (retrieved.rows.front() == positives[b][0]) ++out.stats.top1_hits;
    for (auto r : retrieved.rows)
      if (r == positives[b][0]) ++out.stats.topk_hits;

    const auto augmentation = gate_augmentation(ex, &retrieved);
    if (trace) trace->push_back({ex.id, ex.source, augmentation.size()});
    if (ex.target.empty()) throw std::invalid_argument("pretrain_step: example '" + ex.id + "' has an empty target");
    if (augmentation.empty()) {
      // The encoder input is the query alone, already encoded above.
      TokenSeq input{kStartId};
      input.insert(input.end(), ex.target.begin(), ex.target.end());
      TokenSeq targets(ex.target.begin(), ex.target.end());
      targets.push_back(kEndId);
      const auto logits = model.decode_logits(query_enc[b], input);
      gen_terms.push_back(cross_entropy(logits, std::span<const std::int32_t>(targets), -1));
    } else {
      std::vector<Segment> segments;
      for (const auto& id : augmentation) segments.push_back(memory_segments[memory_row.at(id)]);
      gen_terms.push_back(generative_loss(model, std::span<const Segment>(segments), ex.query(), ex.target));
    }
  }
  auto gen_sum = gen_terms.front();
  for (std::size_t i = 1; i < gen_terms.size(); ++i) gen_sum = add(gen_sum, gen_terms[i]);
  const auto l_gen = scale(gen_sum, static_cast<T>(1.0 / static_cast<double>(gen_terms.size())));

  out.stats.l_con = static_cast<double>(l_con.item());
  out.stats.l_gen = static_cast<double>(l_gen.item());
  out.total = options.lambda == 0.0 ? l_gen : add(l_gen, scale(l_con, static_cast<T>(options.lambda)));
  out.stats.total = static_cast<double>(out.total.item());
  if (!std::isfinite(out.stats.total)) throw NumericError("pretrain_step: non-finite loss");
  return out;
}

}  // namespace

template <typename T>
BasicTensor<T> contrastive_loss(const BasicTensor<T>& queries, const BasicTensor<T>& memory,
                                const std::vector<std::vector<std::size_t>>& positives) {
  if (memory.rank() != 2 || memory.dim(0) < 1) throw std::invalid_argument("contrastive_loss: memory is empty");
  if (queries.rank() != 2 || queries.dim(0) != positives.size()) {
    throw DimensionError("contrastive_loss: " + std::to_string(positives.size()) + " label sets for queries " +
                         shape_string(queries.shape()));
  }
  for (const auto& p : positives) {
    if (p.empty()) throw std::invalid_argument("contrastive_loss: query without a positive");
    for (auto i : p)
      if (i >= memory.dim(0)) throw std::out_of_range("contrastive_loss: positive index out of range");
  }
  return multi_target_cross_entropy(matmul(queries, transpose(memory)), positives);
}

std::vector<std::string> gate_augmentation(const PretrainExample& example, const RetrievalResult* retrieved) {
  if (is_caption_source(example.source)) return {};
  if (retrieved == nullptr) {
    throw std::invalid_argument("gate_augmentation: " + to_string(example.source) + " example '" + example.id +
                                "' needs a retrieval result");
  }
  return retrieved->ids;
}

template <typename T>
BasicTensor<T> generative_loss(const Backbone<T>& model, std::span<const Segment> augmentation, const Segment& query,
                               const TokenSeq& target) {
  if (target.empty()) throw std::invalid_argument("generative_loss: empty target");
  MultimodalInput input;
  input.segments.assign(augmentation.begin(), augmentation.end());
  input.segments.push_back(query);
  const auto encoded = model.encode(input);
  TokenSeq decoder_input{kStartId};
  decoder_input.insert(decoder_input.end(), target.begin(), target.end());
  TokenSeq targets(target.begin(), target.end());
  targets.push_back(kEndId);
  const auto logits = model.decode_logits(encoded, decoder_input);
  return cross_entropy(logits, std::span<const std::int32_t>(targets), -1);
}

template <typename T>
LossBreakdown pretrain_step(Backbone<T>& model, Adam<T>& optimizer, std::span<const PretrainExample> batch,
                            const PretrainOptions& options, std::vector<GateRecord>* trace) {
  optimizer.zero_grad();
  Tape tape;
  auto forward = pretrain_forward(model, batch, options, trace);
  tape.backward(forward.total);
  optimizer.step();
  return forward.stats;
}

template <typename T>
LossBreakdown pretrain_eval(const Backbone<T>& model, std::span<const PretrainExample> batch,
                            const PretrainOptions& options) {
  TapePause pause;
  return pretrain_forward(model, batch, options, nullptr).stats;
}

// ---------------------------------------------------------------------------

MixtureSampler::MixtureSampler(const std::vector<PretrainExample>& examples, MixtureConfig config)
    : config_(std::move(config)), rng_(config_.seed) {
  for (std::size_t i = 0; i < examples.size(); ++i) pools_[examples[i].source].order.push_back(i);
  auto require = [&](Source s) {
    if (pools_[s].order.empty()) throw std::invalid_argument("mixture: source " + to_string(s) + " has no examples");
  };
  if (config_.phase1_draws > 0) require(config_.phase1_source);
  double total = 0.0;
  for (const auto& [source, ratio] : config_.ratios) {
    if (!(ratio > 0.0)) throw std::invalid_argument("mixture: ratio for " + to_string(source) + " must be positive");
    require(source);
    total += ratio;
    cumulative_.push_back({source, total});
  }
  if (cumulative_.empty()) throw std::invalid_argument("mixture: no phase-2 sources");
  for (auto& [source, pool] : pools_) rng_.shuffle(pool.order.begin(), pool.order.end());
}

std::size_t MixtureSampler::take(Source source) {
  auto& pool = pools_.at(source);
  if (pool.cursor == pool.order.size()) {
    rng_.shuffle(pool.order.begin(), pool.order.end());
    pool.cursor = 0;
  }
  return pool.order[pool.cursor++];
}

std::size_t MixtureSampler::next() {
  const auto draw = draws_++;
  if (draw < config_.phase1_draws) return take(config_.phase1_source);
  const double u = rng_.uniform() * cumulative_.back().second;
  for (const auto& [source, bound] : cumulative_)
    if (u < bound) return take(source);
  return take(cumulative_.back().first);
}

// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (batch_size == 0) throw std::invalid_argument("train config: batch_size must be positive");
  if (!(lr > 0.0)) throw std::invalid_argument("train config: lr must be positive");
  if (!(lambda >= 0.0)) throw std::invalid_argument("train config: lambda must be non-negative");
  if (topk == 0) throw std::invalid_argument("train config: topk must be positive");
  if (phase1_steps + phase2_steps == 0) throw std::invalid_argument("train config: no steps scheduled");
  if (phase2_steps > 0 && ratios.empty()) throw std::invalid_argument("train config: phase 2 needs ratios");
  for (const auto& [source, r] : ratios)
    if (!(r > 0.0)) throw std::invalid_argument("train config: ratio for " + to_string(source) + " must be positive");
}

std::string to_json(const TrainConfig& c) {
  json ratios = json::object();
  for (const auto& [source, r] : c.ratios) ratios[to_string(source)] = r;
  json j = {{"lambda", c.lambda},           {"batch_size", c.batch_size}, {"lr", c.lr},
            {"phase1_steps", c.phase1_steps}, {"phase2_steps", c.phase2_steps}, {"ratios", ratios},
            {"seed", c.seed},               {"topk", c.topk}};
  return j.dump();
}

TrainConfig train_config_from_json(const std::string& text, TrainConfig c) {
  const json j = json::parse(text);
  if (!j.is_object()) throw std::invalid_argument("train config: expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key == "lambda") c.lambda = value.get<double>();
    else if (key == "batch_size") c.batch_size = value.get<std::size_t>();
    else if (key == "lr") c.lr = value.get<double>();
    else if (key == "phase1_steps") c.phase1_steps = value.get<std::uint64_t>();
    else if (key == "phase2_steps") c.phase2_steps = value.get<std::uint64_t>();
    else if (key == "seed") c.seed = value.get<std::uint64_t>();
    else if (key == "topk") c.topk = value.get<std::size_t>();
    else if (key == "ratios") {
      c.ratios.clear();
      for (const auto& [name, r] : value.items()) c.ratios[source_from_string(name)] = r.get<double>();
    } else {
      throw std::invalid_argument("train config: unknown field '" + key + "'");
    }
  }
  c.validate();
  return c;
}

std::string metrics_line(const StepMetrics& m) {
  json j = {{"step", m.step},
            {"l_con", m.loss.l_con},
            {"l_gen", m.loss.l_gen},
            {"total", m.loss.total},
            {"inbatch_recall@1", m.loss.recall_at_1()}};
  return j.dump();
}

template <typename T>
void run_pretraining(Backbone<T>& model, const std::vector<PretrainExample>& examples, const TrainConfig& config,
                     const std::function<void(const StepMetrics&)>& on_step) {
  config.validate();
  MixtureConfig mixture;
  mixture.phase1_draws = config.phase1_steps * config.batch_size;
  mixture.ratios = config.ratios;
  mixture.seed = config.seed;
  if (config.phase2_steps == 0) mixture.ratios = {{mixture.phase1_source, 1.0}};
  MixtureSampler sampler(examples, mixture);
  Adam<T> optimizer(model.parameters(), constant_schedule(config.lr));
  const PretrainOptions options{config.lambda, config.topk};
  std::vector<PretrainExample> batch(config.batch_size);
  for (std::uint64_t step = 1; step <= config.phase1_steps + config.phase2_steps; ++step) {
    for (auto& ex : batch) ex = examples[sampler.next()];
    const auto loss = pretrain_step(model, optimizer, std::span<const PretrainExample>(batch), options);
    if (on_step) on_step({step, loss});
  }
}

template BasicTensor<float> contrastive_loss(const BasicTensor<float>&, const BasicTensor<float>&,
                                             const std::vector<std::vector<std::size_t>>&);
template BasicTensor<double> contrastive_loss(const BasicTensor<double>&, const BasicTensor<double>&,
                                              const std::vector<std::vector<std::size_t>>&);
template BasicTensor<float> generative_loss(const Backbone<float>&, std::span<const Segment>, const Segment&,
                                            const TokenSeq&);
template BasicTensor<double> generative_loss(const Backbone<double>&, std::span<const Segment>, const Segment&,
                                             const TokenSeq&);
template LossBreakdown pretrain_step(Backbone<float>&, Adam<float>&, std::span<const PretrainExample>,
                                     const PretrainOptions&, std::vector<GateRecord>*);
template LossBreakdown pretrain_step(Backbone<double>&, Adam<double>&, std::span<const PretrainExample>,
                                     const PretrainOptions&, std::vector<GateRecord>*);
template LossBreakdown pretrain_eval(const Backbone<float>&, std::span<const PretrainExample>, const PretrainOptions&);
template LossBreakdown pretrain_eval(const Backbone<double>&, std::span<const PretrainExample>,
                                     const PretrainOptions&);
template void run_pretraining(Backbone<float>&, const std::vector<PretrainExample>&, const TrainConfig&,
                              const std::function<void(const StepMetrics&)>&);
template void run_pretraining(Backbone<double>&, const std::vector<PretrainExample>&, const TrainConfig&,
                              const std::function<void(const StepMetrics&)>&);

}  // namespace murag
