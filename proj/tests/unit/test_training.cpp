#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "murag/corpus.hpp"
#include "murag/training.hpp"
#include "support/oracles.hpp"

namespace murag {
namespace {

using testing::random_tensor;
using testing::small_world;
using testing::tiny_config;

const Dataset& small_dataset() {
  static const Dataset data = [] {
    const auto corpus = generate_corpus(small_world());
    return to_dataset(corpus, Vocab::build(corpus));
  }();
  return data;
}

std::vector<PretrainExample> of_source(Source source, std::size_t n) {
  std::vector<PretrainExample> out;
  for (const auto& ex : small_dataset().pretrain)
    if (ex.source == source && out.size() < n) out.push_back(ex);
  return out;
}

TEST(ContrastiveLoss, SingleMemoryRowIsZero) {
  Rng rng(1);
  const auto loss = contrastive_loss(random_tensor(rng, {3, 4}), random_tensor(rng, {1, 4}), {{0}, {0}, {0}});
  EXPECT_EQ(loss.item(), 0.0);
}

TEST(ContrastiveLoss, SeparationLimit) {
  const auto q = Tensor64::from({1, 2}, {1, 0});
  double previous = 1e9;
  for (double s : {1.0, 10.0, 100.0}) {
    const auto m = Tensor64::from({3, 2}, {0, 1, s, 0, 0, -1});
    const double loss = contrastive_loss(q, m, {{1}}).item();
    EXPECT_LT(loss, previous);
    previous = loss;
  }
  EXPECT_LT(previous, 1e-40);
}

TEST(ContrastiveLoss, MatchesSoftmaxCrossEntropy) {
  Rng rng(2);
  const auto q = random_tensor(rng, {3, 6});
  const auto m = random_tensor(rng, {5, 6});
  const std::vector<std::vector<std::size_t>> pos{{4}, {0}, {2}};
  double expected = 0;
  for (std::size_t b = 0; b < 3; ++b) {
    std::vector<double> s(5);
    for (std::size_t j = 0; j < 5; ++j)
      for (std::size_t c = 0; c < 6; ++c) s[j] += q.at(b, c) * m.at(j, c);
    double z = 0;
    for (double v : s) z += std::exp(v);
    expected += -std::log(std::exp(s[pos[b][0]]) / z);
  }
  EXPECT_NEAR(contrastive_loss(q, m, pos).item(), expected / 3, 1e-10);
}

TEST(ContrastiveLoss, MultiplePositivesAreAveraged) {
  Rng rng(3);
  const auto q = random_tensor(rng, {1, 4});
  const auto m = random_tensor(rng, {4, 4});
  const double a = contrastive_loss(q, m, {{1}}).item();
  const double b = contrastive_loss(q, m, {{3}}).item();
  EXPECT_NEAR(contrastive_loss(q, m, {{1, 3}}).item(), (a + b) / 2, 1e-12);
}

TEST(ContrastiveLoss, PermutationEquivariant) {
  Rng rng(4);
  const auto q = random_tensor(rng, {3, 5});
  const auto m = random_tensor(rng, {6, 5});
  const std::vector<std::size_t> perm{3, 5, 0, 1, 4, 2};  // new row i holds old row perm[i]
  std::vector<double> shuffled;
  for (auto r : perm)
    for (std::size_t c = 0; c < 5; ++c) shuffled.push_back(m.at(r, c));
  auto where = [&](std::size_t old) {
    return static_cast<std::size_t>(std::find(perm.begin(), perm.end(), old) - perm.begin());
  };
  const std::vector<std::vector<std::size_t>> pos{{0}, {2, 5}, {4}};
  std::vector<std::vector<std::size_t>> moved;
  for (const auto& p : pos) {
    moved.emplace_back();
    for (auto i : p) moved.back().push_back(where(i));
  }
  EXPECT_NEAR(contrastive_loss(q, m, pos).item(), contrastive_loss(q, Tensor64::from({6, 5}, shuffled), moved).item(),
              1e-10);
}

TEST(ContrastiveLoss, EmptyMemoryIsAnError) {
  EXPECT_THROW(contrastive_loss(Tensor64::zeros({1, 3}), Tensor64::zeros({0, 3}), {{0}}), std::invalid_argument);
}

TEST(Gate, CaptionSourcesGetNothing) {
  RetrievalResult r{{"a", "b", "c", "d"}, {4, 3, 2, 1}, {0, 1, 2, 3}, std::nullopt};
  for (auto source : {Source::cap_crawl, Source::cap_clean}) {
    PretrainExample ex;
    ex.source = source;
    EXPECT_TRUE(gate_augmentation(ex, &r).empty());
    EXPECT_TRUE(gate_augmentation(ex, nullptr).empty());
  }
}

TEST(Gate, QaSourcesGetTopKInOrder) {
  RetrievalResult r{{"d", "a", "self", "b"}, {4, 3, 2, 1}, {3, 0, 9, 1}, std::nullopt};
  PretrainExample ex;
  ex.source = Source::qa_text;
  EXPECT_EQ(gate_augmentation(ex, &r), r.ids);
  ex.source = Source::qa_image;
  ex.memory_id = "self";
  EXPECT_EQ(gate_augmentation(ex, &r), r.ids);
  EXPECT_THROW(gate_augmentation(ex, nullptr), std::invalid_argument);
}

TEST(GenerativeLoss, EmptyAugmentationIsPlainCaptioning) {
  Backbone<double> model(tiny_config(), 5);
  const Segment query{PatchGrid::zeros(8, 8), {4, 5}};
  const TokenSeq y{7, 8};
  const auto logits = model.decode_logits(model.encode({{query}}), {kStartId, 7, 8});
  const std::vector<std::int32_t> targets{7, 8, kEndId};
  EXPECT_EQ(generative_loss(model, {}, query, y).item(), cross_entropy(logits, targets, -1).item());
}

TEST(GenerativeLoss, UniformLogitsGiveLogV) {
  auto config = tiny_config();
  config.vocab_size = 32;
  Backbone<double> model(config, 6);
  for (auto p : model.parameters())
    if (p.name == "dec.out.w")
      for (auto& w : p.tensor.mutable_data()) w = 0.0;
  // One target token plus the end token; both are uniform.
  EXPECT_NEAR(generative_loss(model, {}, Segment{std::nullopt, {4}}, {9}).item(), std::log(32.0), 1e-12);
}

TEST(GenerativeLoss, DecomposesIntoEncoderDecoderCrossEntropy) {
  Backbone<float> model(ModelConfig::toy(), 7);
  Rng rng(8);
  const std::vector<Segment> aug{{std::nullopt, {10, 11, 12}}, {testing::random_image(rng, 16), {13}}};
  const Segment query{std::nullopt, {20, 21}};
  const TokenSeq y{30, 31, 32};
  const auto enc = model.encode({{aug[0], aug[1], query}});
  const auto logits = model.decode_logits(enc, {kStartId, 30, 31, 32});
  const std::vector<std::int32_t> targets{30, 31, 32, kEndId};
  EXPECT_NEAR(generative_loss(model, aug, query, y).item(), cross_entropy(logits, targets, -1).item(), 1e-6);
  EXPECT_THROW(generative_loss(model, aug, query, {}), std::invalid_argument);
}

TEST(GenerativeLoss, OverlongInputIsAnError) {
  Backbone<float> model(ModelConfig::toy(), 9);
  std::vector<Segment> aug(20, Segment{PatchGrid::zeros(16, 16), TokenSeq(40, 5)});
  EXPECT_THROW(generative_loss(model, aug, Segment{std::nullopt, {4}}, {5}), std::invalid_argument);
}

TEST(PretrainStep, FiniteAtInitForEverySource) {
  Backbone<float> model(ModelConfig::toy(), 10);
  for (auto source : {Source::cap_crawl, Source::cap_clean, Source::qa_text, Source::qa_image}) {
    const auto batch = of_source(source, 8);
    ASSERT_EQ(batch.size(), 8u) << to_string(source);
    const auto loss = pretrain_eval(model, std::span<const PretrainExample>(batch), {});
    EXPECT_TRUE(std::isfinite(loss.l_con) && std::isfinite(loss.l_gen) && std::isfinite(loss.total))
        << to_string(source);
    EXPECT_NEAR(loss.total, loss.l_gen + loss.l_con, 1e-5);
  }
}

TEST(PretrainStep, InBatchMemoryIsDeduplicated) {
  Backbone<float> model(ModelConfig::toy(), 11);
  auto batch = of_source(Source::qa_image, 6);
  batch.push_back(batch[0]);
  batch.back().id += "-again";
  const auto loss = pretrain_eval(model, std::span<const PretrainExample>(batch), {});
  EXPECT_LE(loss.memory_size, batch.size() - 1);
}

TEST(PretrainStep, GateTraceMatchesSources) {
  Backbone<float> model(ModelConfig::toy(), 12);
  auto batch = of_source(Source::cap_clean, 3);
  for (const auto& ex : of_source(Source::qa_text, 3)) batch.push_back(ex);
  for (const auto& ex : of_source(Source::qa_image, 3)) batch.push_back(ex);
  Adam<float> adam(model.parameters(), constant_schedule(1e-4));
  std::vector<GateRecord> trace;
  pretrain_step(model, adam, std::span<const PretrainExample>(batch), {1.0, 4}, &trace);
  ASSERT_EQ(trace.size(), batch.size());
  for (const auto& g : trace) EXPECT_EQ(g.augmentation_size, is_caption_source(g.source) ? 0u : 4u);
}

// Fixed batch with distinct captions: l_con must fall at every step.
TEST(PretrainStep, ContrastiveLossDecreasesOnFixedBatch) {
  const auto batch = of_source(Source::cap_clean, 16);
  std::vector<int> monotone;
  std::vector<double> ratio;
  for (std::uint64_t seed : {1, 2, 3}) {
    Backbone<float> model(ModelConfig::toy(), seed);
    Adam<float> adam(model.parameters(), constant_schedule(5e-4));
    std::vector<double> curve;
    for (int step = 0; step < 50; ++step) {
      curve.push_back(pretrain_step(model, adam, std::span<const PretrainExample>(batch), {}).l_con);
    }
    monotone.push_back(std::is_sorted(curve.rbegin(), curve.rend()) ? 1 : 0);
    ratio.push_back(curve.back() / curve.front());
  }
  std::sort(monotone.begin(), monotone.end());
  std::sort(ratio.begin(), ratio.end());
  EXPECT_EQ(monotone[1], 1);
  EXPECT_LT(ratio[1], 0.5);
}

// pretrain_step with lambda = 0 against a hand-assembled generative-only step
// that creates the same operations in the same order.
TEST(PretrainStep, ZeroLambdaEqualsGenerativeOnlyTraining) {
  auto batch = of_source(Source::cap_crawl, 3);
  for (const auto& ex : of_source(Source::qa_text, 2)) batch.push_back(ex);
  for (const auto& ex : of_source(Source::qa_image, 2)) batch.push_back(ex);
  const auto config = ModelConfig::toy();
  Backbone<float> a(config, 13), b(config, 13);
  Adam<float> adam_a(a.parameters(), constant_schedule(1e-3)), adam_b(b.parameters(), constant_schedule(1e-3));
  for (int step = 0; step < 3; ++step) {
    pretrain_step(a, adam_a, std::span<const PretrainExample>(batch), {0.0, 4});

    adam_b.zero_grad();
    Tape tape;
    std::vector<EncoderOutput<float>> enc;
    for (const auto& ex : batch) enc.push_back(b.encode({{ex.query()}}));
    std::vector<std::string> ids;
    std::vector<Segment> segments;
    for (const auto& ex : batch) {
      if (std::find(ids.begin(), ids.end(), ex.memory_id) == ids.end()) {
        ids.push_back(ex.memory_id);
        segments.push_back({std::nullopt, ex.memory_text});
      }
    }
    EncodedMemory index(config.d_model);
    {
      TapePause pause;
      for (std::size_t i = 0; i < ids.size(); ++i) index.add(ids[i], encode_query(b, segments[i]));
    }
    index.freeze();
    std::vector<Tensor> terms;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto& ex = batch[i];
      if (is_caption_source(ex.source)) {
        TokenSeq in{kStartId};
        in.insert(in.end(), ex.target.begin(), ex.target.end());
        std::vector<std::int32_t> out(ex.target.begin(), ex.target.end());
        out.push_back(kEndId);
        terms.push_back(cross_entropy(b.decode_logits(enc[i], in), out, -1));
      } else {
        const auto cls = enc[i].cls.data();
        const auto r = top_k(std::vector<float>(cls.begin(), cls.end()), index, std::min<std::size_t>(4, ids.size()));
        std::vector<Segment> aug;
        for (const auto& id : r.ids)
          aug.push_back(segments[static_cast<std::size_t>(std::find(ids.begin(), ids.end(), id) - ids.begin())]);
        terms.push_back(generative_loss(b, aug, ex.query(), ex.target));
      }
    }
    auto total = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
    tape.backward(scale(total, static_cast<float>(1.0 / static_cast<double>(terms.size()))));
    adam_b.step();
  }
  EXPECT_EQ(a.fingerprint(), b.fingerprint());
}

// Gradients of l_gen + lambda * l_con equal the sum of the separately computed gradients.
TEST(PretrainStep, JointLossGradientsAreAdditive) {
  const auto batch = of_source(Source::qa_image, 4);
  Backbone<double> model(ModelConfig::toy(), 14);
  const double lambda = 0.5;
  auto grads_of = [&](int which) {
    for (const auto& p : model.parameters()) p.tensor.node()->grad.clear();
    Tape tape;
    std::vector<Tensor64> q, m, gen;
    for (const auto& ex : batch) {
      const auto enc = model.encode({{ex.query()}});
      q.push_back(enc.cls);
      m.push_back(model.encode({{Segment{std::nullopt, ex.memory_text}}}).cls);
      gen.push_back(generative_loss(model, std::vector<Segment>{{std::nullopt, ex.memory_text}}, ex.query(), ex.target));
    }
    std::vector<std::vector<std::size_t>> pos;
    for (std::size_t i = 0; i < batch.size(); ++i) pos.push_back({i});
    const auto l_con = contrastive_loss(concat_rows(std::span<const Tensor64>(q)), concat_rows(std::span<const Tensor64>(m)), pos);
    auto l_gen = gen[0];
    for (std::size_t i = 1; i < gen.size(); ++i) l_gen = add(l_gen, gen[i]);
    const auto weighted = scale(l_con, lambda);
    tape.backward(which == 0 ? add(l_gen, weighted) : which == 1 ? l_gen : weighted);
    std::vector<double> out;
    for (const auto& p : model.parameters()) {
      const auto g = p.tensor.grad();
      if (g.empty()) out.insert(out.end(), p.tensor.size(), 0.0);
      else out.insert(out.end(), g.begin(), g.end());
    }
    return out;
  };
  const auto joint = grads_of(0), gen = grads_of(1), con = grads_of(2);
  ASSERT_EQ(joint.size(), gen.size());
  double worst = 0;
  for (std::size_t i = 0; i < joint.size(); ++i) {
    worst = std::max(worst, std::abs(joint[i] - (gen[i] + con[i])));
  }
  EXPECT_LE(worst, 1e-6);
}

std::map<Source, std::size_t> count_draws(const std::vector<std::size_t>& draws) {
  std::map<Source, std::size_t> counts;
  for (auto i : draws) ++counts[small_dataset().pretrain[i].source];
  return counts;
}

TEST(Mixture, RatiosWithinTwoPercent) {
  const auto& examples = small_dataset().pretrain;
  MixtureSampler sampler(examples, {Source::cap_crawl, 0, {{Source::cap_clean, 1}, {Source::qa_text, 1}, {Source::qa_image, 1}}, 3});
  std::vector<std::size_t> draws;
  for (int i = 0; i < 30000; ++i) draws.push_back(sampler.next());
  const auto counts = count_draws(draws);
  EXPECT_EQ(counts.count(Source::cap_crawl), 0u);
  for (auto s : {Source::cap_clean, Source::qa_text, Source::qa_image}) {
    EXPECT_NEAR(static_cast<double>(counts.at(s)) / 30000.0, 1.0 / 3.0, 0.02) << to_string(s);
  }
}

TEST(Mixture, PhaseOneDrawsOnlyDesignatedSource) {
  const auto& examples = small_dataset().pretrain;
  MixtureSampler sampler(examples, {Source::cap_crawl, 100, {{Source::qa_text, 1}}, 4});
  for (int i = 0; i < 100; ++i) EXPECT_EQ(examples[sampler.next()].source, Source::cap_crawl);
  for (int i = 0; i < 50; ++i) EXPECT_EQ(examples[sampler.next()].source, Source::qa_text);
}

TEST(Mixture, SameSeedSameStream) {
  const auto& examples = small_dataset().pretrain;
  const MixtureConfig config{Source::cap_crawl, 10, {{Source::cap_clean, 2}, {Source::qa_image, 1}}, 5};
  MixtureSampler a(examples, config), b(examples, config);
  for (int i = 0; i < 500; ++i) EXPECT_EQ(a.next(), b.next());
}

TEST(Mixture, EmptySourceIsAnError) {
  const auto batch = of_source(Source::cap_crawl, 5);
  EXPECT_THROW(MixtureSampler(batch, {Source::cap_crawl, 1, {{Source::qa_text, 1}}, 0}), std::invalid_argument);
}

TEST(TrainConfig, JsonRoundTripAndPrecedence) {
  TrainConfig base;
  base.lambda = 0.5;
  const auto parsed = train_config_from_json(R"({"batch_size": 16, "ratios": {"qa-text": 2}})", base);
  EXPECT_EQ(parsed.lambda, 0.5);
  EXPECT_EQ(parsed.batch_size, 16u);
  EXPECT_EQ(parsed.ratios.size(), 1u);
  EXPECT_EQ(parsed.ratios.at(Source::qa_text), 2.0);
  const auto again = train_config_from_json(to_json(parsed));
  EXPECT_EQ(to_json(again), to_json(parsed));
  EXPECT_THROW(train_config_from_json(R"({"momentum": 1})"), std::invalid_argument);
}

TEST(TrainConfig, MetricsLineFields) {
  LossBreakdown loss;
  loss.l_con = 1.5;
  loss.l_gen = 2.0;
  loss.total = 3.5;
  loss.queries = 4;
  loss.top1_hits = 3;
  const auto line = metrics_line({7, loss});
  for (const char* key : {"\"step\":7", "\"l_con\":1.5", "\"l_gen\":2.0", "\"total\":3.5", "\"inbatch_recall@1\":0.75"}) {
    EXPECT_NE(line.find(key), std::string::npos) << line;
  }
}

}  // namespace
}  // namespace murag
