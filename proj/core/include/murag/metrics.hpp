#pragma once

// Answer and retrieval metrics. Text is normalized by lowercasing, removing
// ASCII punctuation and collapsing whitespace.

#include <map>
#include <string>
#include <vector>

namespace murag {

std::string normalize_answer(const std::string& text);
std::vector<std::string> normalized_tokens(const std::string& text);

double exact_match(const std::string& prediction, const std::string& reference);
// Bag-of-tokens F1. Both empty gives 1, exactly one empty gives 0.
double token_f1(const std::string& prediction, const std::string& reference);
// F1 of the prediction tokens against the keyword set.
double keyword_accuracy(const std::string& prediction, const std::vector<std::string>& keywords);
// Set F1 of retrieved against gold ids.
double retrieval_f1(const std::vector<std::string>& retrieved, const std::vector<std::string>& gold);
// Fraction of queries with a gold id among the first k results.
double recall_at_k(const std::vector<std::vector<std::string>>& results,
                   const std::vector<std::vector<std::string>>& gold, std::size_t k);

struct Prediction {
  std::string question_id;
  std::string answer;
  std::vector<std::string> retrieved;  // ranked
};

struct Reference {
  std::string question_id;
  std::string answer;
  std::vector<std::string> gold;
};

struct Metrics {
  double em = 0.0;
  double token_f1 = 0.0;
  double keyword_accuracy = 0.0;
  double retrieval_f1 = 0.0;
  std::map<std::size_t, double> recall_at_k;
  std::size_t count = 0;
};

// Predictions and references are matched by question id; every reference
// needs a prediction.
Metrics evaluate(const std::vector<Prediction>& predictions, const std::vector<Reference>& references,
                 const std::vector<std::size_t>& ks = {1, 4});

std::string metrics_to_json(const Metrics& metrics);

std::string prediction_to_json(const Prediction& prediction);
Prediction prediction_from_json(const std::string& line);

}  // namespace murag
