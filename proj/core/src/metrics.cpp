#include "murag/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <set>
#include <stdexcept>

#include "json.hpp"

namespace murag {

namespace {

using json = nlohmann::json;

// 2PR/(P+R) with P = common/predicted and R = common/gold, as one integer ratio
// so that results are correctly rounded.
double f1(std::size_t common, std::size_t predicted, std::size_t gold) {
  if (common == 0) return 0.0;
  return static_cast<double>(2 * common) / static_cast<double>(predicted + gold);
}

std::size_t multiset_overlap(std::vector<std::string> a, std::vector<std::string> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::vector<std::string> common;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(common));
  return common.size();
}

}  // namespace

std::string normalize_answer(const std::string& text) {
  std::string out;
  bool space = false;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::ispunct(c)) continue;
    if (std::isspace(c)) {
      space = !out.empty();
      continue;
    }
    if (space) out.push_back(' ');
    space = false;
    out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

std::vector<std::string> normalized_tokens(const std::string& text) {
  std::vector<std::string> out;
  const auto norm = normalize_answer(text);
  std::size_t start = 0;
  while (start < norm.size()) {
    auto end = norm.find(' ', start);
    if (end == std::string::npos) end = norm.size();
    out.push_back(norm.substr(start, end - start));
    start = end + 1;
  }
  return out;
}

double exact_match(const std::string& prediction, const std::string& reference) {
  return normalize_answer(prediction) == normalize_answer(reference) ? 1.0 : 0.0;
}

double token_f1(const std::string& prediction, const std::string& reference) {
  const auto p = normalized_tokens(prediction), r = normalized_tokens(reference);
  if (p.empty() && r.empty()) return 1.0;
  if (p.empty() || r.empty()) return 0.0;
  return f1(multiset_overlap(p, r), p.size(), r.size());
}

double keyword_accuracy(const std::string& prediction, const std::vector<std::string>& keywords) {
  std::set<std::string> keys;
  for (const auto& k : keywords)
    for (const auto& t : normalized_tokens(k)) keys.insert(t);
  if (keys.empty()) throw std::invalid_argument("keyword_accuracy: no keywords");
  const auto p = normalized_tokens(prediction);
  if (p.empty()) return 0.0;
  const std::set<std::string> distinct(p.begin(), p.end());
  std::size_t hit_tokens = 0, found = 0;
  for (const auto& t : p)
    if (keys.count(t)) ++hit_tokens;
  for (const auto& k : keys)
    if (distinct.count(k)) ++found;
  if (hit_tokens == 0) return 0.0;
  // precision = hit_tokens / |p|, recall = found / |keys|
  return static_cast<double>(2 * hit_tokens * found) /
         static_cast<double>(hit_tokens * keys.size() + found * p.size());
}

double retrieval_f1(const std::vector<std::string>& retrieved, const std::vector<std::string>& gold) {
  const std::set<std::string> r(retrieved.begin(), retrieved.end()), g(gold.begin(), gold.end());
  if (g.empty()) throw std::invalid_argument("retrieval_f1: no gold ids");
  if (r.empty()) return 0.0;
  std::size_t common = 0;
  for (const auto& id : r)
    if (g.count(id)) ++common;
  return f1(common, r.size(), g.size());
}

double recall_at_k(const std::vector<std::vector<std::string>>& results,
                   const std::vector<std::vector<std::string>>& gold, std::size_t k) {
  if (k == 0) throw std::invalid_argument("recall_at_k: K must be at least 1");
  if (results.size() != gold.size()) throw std::invalid_argument("recall_at_k: result and gold counts differ");
  if (results.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t q = 0; q < results.size(); ++q) {
    const std::set<std::string> g(gold[q].begin(), gold[q].end());
    const std::size_t n = std::min(k, results[q].size());
    for (std::size_t i = 0; i < n; ++i) {
      if (g.count(results[q][i])) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(results.size());
}

Metrics evaluate(const std::vector<Prediction>& predictions, const std::vector<Reference>& references,
                 const std::vector<std::size_t>& ks) {
  std::map<std::string, const Prediction*> by_id;
  for (const auto& p : predictions) by_id[p.question_id] = &p;
  Metrics m;
  std::vector<std::vector<std::string>> results, gold;
  for (const auto& ref : references) {
    auto it = by_id.find(ref.question_id);
    if (it == by_id.end()) throw std::invalid_argument("no prediction for question '" + ref.question_id + "'");
    const auto& p = *it->second;
    m.em += exact_match(p.answer, ref.answer);
    m.token_f1 += token_f1(p.answer, ref.answer);
    m.keyword_accuracy += keyword_accuracy(p.answer, {ref.answer});
    m.retrieval_f1 += retrieval_f1(p.retrieved, ref.gold);
    results.push_back(p.retrieved);
    gold.push_back(ref.gold);
  }
  m.count = references.size();
  if (m.count > 0) {
    const double n = static_cast<double>(m.count);
    m.em /= n;
    m.token_f1 /= n;
    m.keyword_accuracy /= n;
    m.retrieval_f1 /= n;
  }
  for (auto k : ks) m.recall_at_k[k] = recall_at_k(results, gold, k);
  return m;
}

std::string metrics_to_json(const Metrics& m) {
  json recall = json::object();
  for (const auto& [k, v] : m.recall_at_k) recall[std::to_string(k)] = v;
  json j = {{"em", m.em},
            {"token_f1", m.token_f1},
            {"keyword_accuracy", m.keyword_accuracy},
            {"retrieval_f1", m.retrieval_f1},
            {"recall_at_k", recall},
            {"count", m.count}};
  return j.dump();
}

std::string prediction_to_json(const Prediction& p) {
  return json{{"id", p.question_id}, {"answer", p.answer}, {"retrieved_ids", p.retrieved}}.dump();
}

Prediction prediction_from_json(const std::string& line) {
  const auto j = json::parse(line);
  return {j.at("id").get<std::string>(), j.at("answer").get<std::string>(),
          j.value("retrieved_ids", std::vector<std::string>{})};
}

}  // namespace murag
