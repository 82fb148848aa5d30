#include <gtest/gtest.h>

#include <algorithm>

#include "murag/metrics.hpp"
#include "murag/rng.hpp"
#include "support/metric_cases.hpp"

namespace murag {
namespace {

double run_case(const testing::MetricCase& c) {
  switch (c.kind) {
    case testing::MetricKind::em:
      return exact_match(c.prediction, c.reference);
    case testing::MetricKind::token_f1:
      return token_f1(c.prediction, c.reference);
    case testing::MetricKind::keyword:
      return keyword_accuracy(c.prediction, c.left);
    case testing::MetricKind::retrieval_f1:
      return retrieval_f1(c.left, c.right);
  }
  return -1;
}

TEST(Metrics, HandBuiltTableMatchesExactly) {
  const auto cases = testing::metric_cases();
  ASSERT_EQ(cases.size(), 30u);
  for (std::size_t i = 0; i < cases.size(); ++i) EXPECT_EQ(run_case(cases[i]), cases[i].expected) << "case " << i;
}

TEST(Normalization, TwentyCaseTable) {
  const std::vector<std::pair<std::string, std::string>> table{
      {"Red", "red"},
      {"  red  ", "red"},
      {"RED SQUARE", "red square"},
      {"red,square", "redsquare"},
      {"red, square", "red square"},
      {"red\tsquare", "red square"},
      {"red\n\nsquare", "red square"},
      {"It's", "its"},
      {"(blue)", "blue"},
      {"blue.", "blue"},
      {"...", ""},
      {"", ""},
      {"   ", ""},
      {"a  b   c", "a b c"},
      {"Cavern!?", "cavern"},
      {"two-three", "twothree"},
      {"\"quoted\"", "quoted"},
      {"MiXeD CaSe", "mixed case"},
      {"x_y", "xy"},
      {"3 Rings", "3 rings"},
  };
  for (const auto& [in, out] : table) EXPECT_EQ(normalize_answer(in), out) << "[" << in << "]";
}

TEST(Metrics, RecallAtK) {
  const std::vector<std::vector<std::string>> gold{{"a"}, {"b"}};
  EXPECT_EQ(recall_at_k({{"a", "x"}, {"b", "y"}}, gold, 1), 1.0);
  EXPECT_EQ(recall_at_k({{"a", "x"}, {"b", "y"}}, gold, 2), 1.0);
  EXPECT_EQ(recall_at_k({{"x", "y"}, {"y", "z"}}, gold, 2), 0.0);
  EXPECT_EQ(recall_at_k({{"x", "a"}, {"b", "y"}}, gold, 1), 0.5);
  EXPECT_THROW(recall_at_k({}, {}, 0), std::invalid_argument);
}

TEST(Metrics, RecallAtKMonteCarlo) {
  Rng rng(21);
  const std::size_t trials = 10000, n = 100, k = 10;
  std::vector<std::vector<std::string>> results, gold;
  std::vector<std::string> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = "m" + std::to_string(i);
  for (std::size_t t = 0; t < trials; ++t) {
    std::vector<std::pair<double, std::string>> scored;
    for (const auto& id : ids) scored.emplace_back(rng.uniform(), id);
    std::sort(scored.rbegin(), scored.rend());
    std::vector<std::string> ranked;
    for (const auto& s : scored) ranked.push_back(s.second);
    results.push_back(ranked);
    gold.push_back({ids[rng.below(n)]});
  }
  EXPECT_NEAR(recall_at_k(results, gold, k), 0.1, 0.02);
}

TEST(Metrics, BoundsAndEmAtMostF1) {
  Rng rng(22);
  const std::vector<std::string> words{"red", "blue", "square", "Red", "ring,", "the", "", "a"};
  for (int i = 0; i < 2000; ++i) {
    std::string p, r;
    for (std::size_t j = rng.below(4); j > 0; --j) p += words[rng.below(words.size())] + " ";
    for (std::size_t j = rng.below(4); j > 0; --j) r += words[rng.below(words.size())] + " ";
    const double em = exact_match(p, r), f1 = token_f1(p, r);
    EXPECT_LE(em, f1) << "[" << p << "] [" << r << "]";
    EXPECT_GE(f1, 0.0);
    EXPECT_LE(f1, 1.0);
  }
}

TEST(Metrics, KeywordAccuracyNeedsKeywords) {
  EXPECT_THROW(keyword_accuracy("red", {}), std::invalid_argument);
  EXPECT_THROW(retrieval_f1({"a"}, {}), std::invalid_argument);
}

TEST(Metrics, EvaluateAggregatesById) {
  const std::vector<Prediction> preds{{"q2", "blue", {"x", "g2"}}, {"q1", "Red", {"g1", "x", "y", "z"}}};
  const std::vector<Reference> refs{{"q1", "red", {"g1"}}, {"q2", "green", {"g2"}}};
  const auto m = evaluate(preds, refs);
  EXPECT_EQ(m.count, 2u);
  EXPECT_EQ(m.em, 0.5);
  EXPECT_EQ(m.token_f1, 0.5);
  EXPECT_EQ(m.keyword_accuracy, 0.5);
  EXPECT_EQ(m.retrieval_f1, (2.0 / 5.0 + 2.0 / 3.0) / 2.0);
  EXPECT_EQ(m.recall_at_k.at(1), 0.5);
  EXPECT_EQ(m.recall_at_k.at(4), 1.0);
  EXPECT_THROW(evaluate({}, refs), std::invalid_argument);
  const auto json = metrics_to_json(m);
  for (const char* key : {"\"em\"", "\"token_f1\"", "\"keyword_accuracy\"", "\"retrieval_f1\"", "\"recall_at_k\"", "\"count\""}) {
    EXPECT_NE(json.find(key), std::string::npos);
  }
}

TEST(Metrics, PredictionJsonRoundTrip) {
  const Prediction p{"dev00001", "cross", {"e1-img", "e2-psg"}};
  const auto back = prediction_from_json(prediction_to_json(p));
  EXPECT_EQ(back.question_id, p.question_id);
  EXPECT_EQ(back.answer, p.answer);
  EXPECT_EQ(back.retrieved, p.retrieved);
}

}  // namespace
}  // namespace murag
