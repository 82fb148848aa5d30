#include "murag/finetune.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace murag {

namespace {

using json = nlohmann::json;

template <typename T>
BasicTensor<T> mean_of(const std::vector<BasicTensor<T>>& terms) {
  auto total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
  return scale(total, static_cast<T>(1.0 / static_cast<double>(terms.size())));
}

template <typename T>
std::vector<float> row_of(const BasicTensor<T>& m, std::size_t row) {
  const std::size_t d = m.dim(1);
  std::vector<float> out(d);
  for (std::size_t j = 0; j < d; ++j) out[j] = static_cast<float>(m.data()[row * d + j]);
  return out;
}

}  // namespace

std::string to_string(Stage stage) { return stage == Stage::in_batch ? "inbatch" : "fixed"; }

Stage stage_from_string(const std::string& name) {
  if (name == "inbatch" || name == "in-batch") return Stage::in_batch;
  if (name == "fixed" || name == "fixed-retrieval") return Stage::fixed_retrieval;
  throw std::invalid_argument("unknown stage '" + name + "' (expected inbatch or fixed)");
}

void StagePlan::validate() const {
  if (k == 0) throw std::invalid_argument("stage plan: K must be at least 1");
  if (steps == 0) throw std::invalid_argument("stage plan: steps must be at least 1");
  if (beam_width == 0) throw std::invalid_argument("stage plan: beam width must be at least 1");
  if (batch_size == 0) throw std::invalid_argument("stage plan: batch size must be positive");
  if (!(lr > 0.0)) throw std::invalid_argument("stage plan: lr must be positive");
  if (!(lambda >= 0.0)) throw std::invalid_argument("stage plan: lambda must be non-negative");
}

Segment question_segment(const FinetuneExample& example) {
  if (example.question_image) {
    throw std::invalid_argument("question '" + example.id + "' carries an image; fine-tuning queries are text-only");
  }
  if (example.question.empty()) throw std::invalid_argument("question '" + example.id + "' is empty");
  return Segment{std::nullopt, example.question};
}

template <typename T>
LossBreakdown inbatch_finetune_step(Backbone<T>& model, Adam<T>& optimizer, std::span<const FinetuneExample> batch,
                                    const MemoryStore& store, const StagePlan& plan) {
  if (plan.stage != Stage::in_batch) throw std::invalid_argument("inbatch_finetune_step: plan is not in-batch");
  const auto memory = in_batch_memory(batch, store);
  const auto& config = model.config();

  optimizer.zero_grad();
  Tape tape;
  std::vector<Segment> questions;
  std::vector<BasicTensor<T>> query_cls, memory_cls;
  for (const auto& ex : batch) {
    questions.push_back(question_segment(ex));
    query_cls.push_back(model.encode(MultimodalInput{{questions.back()}}).cls);
  }
  std::vector<Segment> entry_segments;
  for (const auto& entry : memory.entries) {
    entry_segments.push_back(entry.segment(config));
    memory_cls.push_back(model.encode(MultimodalInput{{entry_segments.back()}}).cls);
  }
  const auto q = concat_rows(std::span<const BasicTensor<T>>(query_cls));
  const auto m = concat_rows(std::span<const BasicTensor<T>>(memory_cls));
  const auto l_con = contrastive_loss(q, m, memory.positives);

  EncodedMemory index(config.d_model);
  for (std::size_t i = 0; i < memory.entries.size(); ++i) index.add(memory.entries[i].id, row_of(m, i));
  index.freeze();
  const std::size_t k = std::min(plan.k, index.size());

  LossBreakdown stats;
  stats.queries = batch.size();
  stats.memory_size = index.size();
  std::vector<BasicTensor<T>> gen_terms;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto retrieved = top_k(row_of(q, b), index, k);
    const auto& gold = memory.positives[b];
    if (std::find(gold.begin(), gold.end(), retrieved.rows.front()) != gold.end()) ++stats.top1_hits;
    for (auto r : retrieved.rows) {
      if (std::find(gold.begin(), gold.end(), r) != gold.end()) {
        ++stats.topk_hits;
        break;
      }
    }
    std::vector<Segment> augmentation;
    for (auto r : retrieved.rows) augmentation.push_back(entry_segments[r]);
    gen_terms.push_back(
        generative_loss(model, std::span<const Segment>(augmentation), questions[b], batch[b].answer));
  }
  const auto l_gen = mean_of(gen_terms);
  const auto total = plan.lambda == 0.0 ? l_gen : add(l_gen, scale(l_con, static_cast<T>(plan.lambda)));
  stats.l_con = static_cast<double>(l_con.item());
  stats.l_gen = static_cast<double>(l_gen.item());
  stats.total = static_cast<double>(total.item());
  if (!std::isfinite(stats.total)) throw NumericError("inbatch_finetune_step: non-finite loss");
  tape.backward(total);
  optimizer.step();
  return stats;
}

template <typename T>
EncodedMemory build_global_index(const Backbone<T>& model, const MemoryStore& store, std::size_t workers) {
  return build_index(model, store.entries(), workers);
}

std::string manifest_to_jsonl(const RetrievalManifest& manifest) {
  std::string out;
  for (const auto& line : manifest) {
    json j = {{"question_id", line.question_id}, {"ids", line.ids}, {"scores", line.scores}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

RetrievalManifest manifest_from_jsonl(const std::string& text) {
  RetrievalManifest out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = json::parse(line);
    out.push_back({j.at("question_id").get<std::string>(), j.at("ids").get<std::vector<std::string>>(),
                   j.at("scores").get<std::vector<double>>()});
  }
  return out;
}

template <typename T>
RetrievalManifest retrieve_fixed(const Backbone<T>& model, std::span<const FinetuneExample> dataset,
                                 const EncodedMemory& index, std::size_t k) {
  RetrievalManifest out;
  for (const auto& ex : dataset) {
    const auto r = top_k(encode_query(model, question_segment(ex)), index, k);
    out.push_back({ex.id, r.ids, r.scores});
  }
  return out;
}

template <typename T>
BasicTensor<T> fixed_generation_loss(const Backbone<T>& model, const FinetuneExample& example,
                                     const ManifestLine& retrieved, const MemoryStore& store) {
  if (retrieved.question_id != example.id) {
    throw std::invalid_argument("manifest line '" + retrieved.question_id + "' does not match question '" +
                                example.id + "'");
  }
  std::vector<Segment> augmentation;
  for (const auto& id : retrieved.ids) augmentation.push_back(store.at(id).segment(model.config()));
  return generative_loss(model, std::span<const Segment>(augmentation), question_segment(example), example.answer);
}

BatchOrder::BatchOrder(std::size_t size, std::uint64_t seed) : order_(size), rng_(seed) {
  if (size == 0) throw std::invalid_argument("batch order over an empty dataset");
  for (std::size_t i = 0; i < size; ++i) order_[i] = i;
  rng_.shuffle(order_.begin(), order_.end());
}

std::vector<std::size_t> BatchOrder::next(std::size_t batch_size) {
  std::vector<std::size_t> out;
  while (out.size() < batch_size) {
    if (cursor_ == order_.size()) {
      rng_.shuffle(order_.begin(), order_.end());
      cursor_ = 0;
    }
    out.push_back(order_[cursor_++]);
  }
  return out;
}

template <typename T>
void run_inbatch_stage(Backbone<T>& model, const std::vector<FinetuneExample>& dataset, const MemoryStore& store,
                       const StagePlan& plan, const StepCallback& on_step) {
  plan.validate();
  Adam<T> optimizer(model.parameters(), constant_schedule(plan.lr));
  BatchOrder order(dataset.size(), plan.seed);
  std::vector<FinetuneExample> batch;
  for (std::uint64_t step = 1; step <= plan.steps; ++step) {
    batch.clear();
    for (auto i : order.next(plan.batch_size)) batch.push_back(dataset[i]);
    const auto loss = inbatch_finetune_step(model, optimizer, std::span<const FinetuneExample>(batch), store, plan);
    if (on_step) on_step(step, loss);
  }
}

template <typename T>
void fixed_retrieval_finetune(Backbone<T>& model, const std::vector<FinetuneExample>& dataset,
                              const RetrievalManifest& manifest, const MemoryStore& store, const StagePlan& plan,
                              const StepCallback& on_step) {
  plan.validate();
  if (plan.stage != Stage::fixed_retrieval) throw std::invalid_argument("fixed_retrieval_finetune: wrong stage");
  if (manifest.size() != dataset.size()) {
    throw std::invalid_argument("fixed_retrieval_finetune: manifest has " + std::to_string(manifest.size()) +
                                " lines for " + std::to_string(dataset.size()) + " questions");
  }
  Adam<T> optimizer(model.parameters(), constant_schedule(plan.lr));
  BatchOrder order(dataset.size(), plan.seed);
  for (std::uint64_t step = 1; step <= plan.steps; ++step) {
    optimizer.zero_grad();
    Tape tape;
    std::vector<BasicTensor<T>> terms;
    for (auto i : order.next(plan.batch_size)) {
      terms.push_back(fixed_generation_loss(model, dataset[i], manifest[i], store));
    }
    const auto l_gen = mean_of(terms);
    LossBreakdown loss;
    loss.queries = terms.size();
    loss.l_gen = static_cast<double>(l_gen.item());
    loss.total = loss.l_gen;
    if (!std::isfinite(loss.total)) throw NumericError("fixed_retrieval_finetune: non-finite loss");
    tape.backward(l_gen);
    optimizer.step();
    if (on_step) on_step(step, loss);
  }
}

template <typename T>
Answer answer(const Backbone<T>& retriever, const Backbone<T>& reader, const TokenSeq& question,
              const EncodedMemory& index, const MemoryStore& store, const StagePlan& plan) {
  if (index.size() == 0) throw IndexError("answer: index is empty");
  TapePause pause;
  const Segment q{std::nullopt, question};
  Answer out;
  out.retrieval = top_k(encode_query(retriever, q), index, plan.k);
  MultimodalInput input;
  for (const auto& id : out.retrieval.ids) input.segments.push_back(store.at(id).segment(reader.config()));
  input.segments.push_back(q);
  const auto encoded = reader.encode(input);
  const auto hyp = generate_beam(reader, encoded, plan.beam_width, plan.max_answer_tokens);
  out.tokens = hyp.tokens;
  out.log_prob = hyp.log_prob;
  return out;
}

EncodedMemory distractor_index(const EncodedMemory& global, const FinetuneExample& example) {
  std::vector<std::string> ids = example.positives;
  ids.insert(ids.end(), example.negatives.begin(), example.negatives.end());
  return global.subset(ids);
}

template LossBreakdown inbatch_finetune_step(Backbone<float>&, Adam<float>&, std::span<const FinetuneExample>,
                                             const MemoryStore&, const StagePlan&);
template LossBreakdown inbatch_finetune_step(Backbone<double>&, Adam<double>&, std::span<const FinetuneExample>,
                                             const MemoryStore&, const StagePlan&);
template EncodedMemory build_global_index(const Backbone<float>&, const MemoryStore&, std::size_t);
template EncodedMemory build_global_index(const Backbone<double>&, const MemoryStore&, std::size_t);
template RetrievalManifest retrieve_fixed(const Backbone<float>&, std::span<const FinetuneExample>,
                                          const EncodedMemory&, std::size_t);
template RetrievalManifest retrieve_fixed(const Backbone<double>&, std::span<const FinetuneExample>,
                                          const EncodedMemory&, std::size_t);
template BasicTensor<float> fixed_generation_loss(const Backbone<float>&, const FinetuneExample&,
                                                  const ManifestLine&, const MemoryStore&);
template BasicTensor<double> fixed_generation_loss(const Backbone<double>&, const FinetuneExample&,
                                                   const ManifestLine&, const MemoryStore&);
template void run_inbatch_stage(Backbone<float>&, const std::vector<FinetuneExample>&, const MemoryStore&,
                                const StagePlan&, const StepCallback&);
template void run_inbatch_stage(Backbone<double>&, const std::vector<FinetuneExample>&, const MemoryStore&,
                                const StagePlan&, const StepCallback&);
template void fixed_retrieval_finetune(Backbone<float>&, const std::vector<FinetuneExample>&,
                                       const RetrievalManifest&, const MemoryStore&, const StagePlan&,
                                       const StepCallback&);
template void fixed_retrieval_finetune(Backbone<double>&, const std::vector<FinetuneExample>&,
                                       const RetrievalManifest&, const MemoryStore&, const StagePlan&,
                                       const StepCallback&);
template Answer answer(const Backbone<float>&, const Backbone<float>&, const TokenSeq&, const EncodedMemory&,
                       const MemoryStore&, const StagePlan&);
template Answer answer(const Backbone<double>&, const Backbone<double>&, const TokenSeq&, const EncodedMemory&,
                       const MemoryStore&, const StagePlan&);

}  // namespace murag
