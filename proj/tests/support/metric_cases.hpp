#pragma once

// Hand-computed metric table. Expected values are written as the ratios they
// were derived from.

#include <string>
#include <vector>

namespace murag::testing {

enum class MetricKind { em, token_f1, keyword, retrieval_f1 };

struct MetricCase {
  MetricKind kind;
  std::string prediction;         // answer text (em, token_f1, keyword)
  std::string reference;          // reference answer (em, token_f1)
  std::vector<std::string> left;  // keywords, or retrieved ids
  std::vector<std::string> right; // gold ids
  double expected;
};

inline std::vector<MetricCase> metric_cases() {
  using K = MetricKind;
  return {
      {K::em, "Red", "red", {}, {}, 1.0},
      {K::em, "red square", "red", {}, {}, 0.0},
      {K::em, "  Blue. ", "blue", {}, {}, 1.0},
      {K::em, "the RED!", "the red", {}, {}, 1.0},
      {K::em, "", "", {}, {}, 1.0},
      {K::em, "red", "", {}, {}, 0.0},
      {K::em, "Two  squares", "two squares", {}, {}, 1.0},
      {K::em, "red-square", "red square", {}, {}, 0.0},  // punctuation is deleted, not split
      // P = 2/3, R = 1
      {K::token_f1, "two red squares", "red squares", {}, {}, 4.0 / 5.0},
      {K::token_f1, "red", "red", {}, {}, 1.0},
      {K::token_f1, "blue", "red", {}, {}, 0.0},
      {K::token_f1, "", "", {}, {}, 1.0},
      {K::token_f1, "", "red", {}, {}, 0.0},
      // one shared token: P = 1/2, R = 1
      {K::token_f1, "red red", "red", {}, {}, 2.0 / 3.0},
      // P = 2/4, R = 2/3
      {K::token_f1, "a b c d", "b d e", {}, {}, 4.0 / 7.0},
      {K::token_f1, "Village!", "village", {}, {}, 1.0},
      // P = 1/4, R = 1
      {K::keyword, "the shape is red", "", {"red"}, {}, 2.0 / 5.0},
      {K::keyword, "red", "", {"red"}, {}, 1.0},
      {K::keyword, "blue square", "", {"red"}, {}, 0.0},
      {K::keyword, "red square", "", {"red", "square"}, {}, 1.0},
      // both tokens are keyword hits: P = 1, R = 1
      {K::keyword, "red red", "", {"red"}, {}, 1.0},
      // P = 1/2, R = 1/2
      {K::keyword, "red circle", "", {"red", "square"}, {}, 1.0 / 2.0},
      {K::keyword, "", "", {"red"}, {}, 0.0},
      {K::retrieval_f1, "", "", {"a", "b"}, {"a", "b"}, 1.0},
      // K = 4 with one gold: P = 1/4, R = 1
      {K::retrieval_f1, "", "", {"a", "b", "c", "d"}, {"a"}, 2.0 / 5.0},
      {K::retrieval_f1, "", "", {"a", "b"}, {"c"}, 0.0},
      // P = 2/4, R = 1
      {K::retrieval_f1, "", "", {"a", "b", "c", "d"}, {"a", "b"}, 2.0 / 3.0},
      {K::retrieval_f1, "", "", {}, {"a"}, 0.0},
      // set semantics: {a, b} against {a}
      {K::retrieval_f1, "", "", {"a", "a", "b"}, {"a"}, 2.0 / 3.0},
      // P = 1/4, R = 1/2
      {K::retrieval_f1, "", "", {"b", "c", "d", "e"}, {"a", "b"}, 1.0 / 3.0},
  };
}

}  // namespace murag::testing
