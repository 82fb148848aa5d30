// Acceptance suites. One suite per invocation:
//
//   murag_acceptance <suite> [--work DIR]
//
// Prints a PASS/FAIL line and a JSON report {name, pass, measured, threshold,
// seconds}. Exit 0 on pass, 1 on an unknown suite, 2 on fail.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "murag/checkpoint.hpp"
#include "murag/corpus.hpp"
#include "murag/finetune.hpp"
#include "murag/memory_index.hpp"
#include "murag/metrics.hpp"
#include "murag/training.hpp"
#include "murag_cli.hpp"
#include "support/metric_cases.hpp"
#include "support/oracles.hpp"

namespace {

using namespace murag;
namespace fs = std::filesystem;
using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

// Pinned thresholds.
constexpr double kGradTolerance = 1e-4;
constexpr double kGradSeconds = 60.0;
constexpr double kMipsSeconds = 5.0;
constexpr double kRetrievalRecall = 0.90;
constexpr std::uint64_t kRetrievalSteps = 2000;
constexpr std::size_t kRetrievalBatch = 32;
constexpr double kRetrievalSeconds = 15.0 * 60.0;
constexpr double kE2eEm = 0.70;
constexpr double kE2eRecall = 0.85;
constexpr double kE2eSeconds = 30.0 * 60.0;
constexpr double kAblationGap = 0.05;
constexpr std::size_t kBeamQuestions = 200;

// Pipeline schedule shared by the e2e and ablation suites.
constexpr std::uint64_t kPretrainPhase1 = 2000;
constexpr std::uint64_t kPretrainPhase2 = 1000;
constexpr std::size_t kInBatchSteps = 1500;
constexpr std::size_t kFixedSteps = 3000;

struct Report {
  std::string name;
  bool pass = false;
  json measured = json::object();
  json threshold = json::object();
  double seconds = 0.0;
  std::string summary;
};

double since(Clock::time_point start) { return std::chrono::duration<double>(Clock::now() - start).count(); }

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

void progress(const std::string& line) { std::cerr << "  " << line << std::endl; }

struct World {
  Corpus corpus;
  Vocab vocab;
  Dataset data;
};

World make_world(const WorldSpec& spec) {
  World w;
  w.corpus = generate_corpus(spec);
  w.vocab = Vocab::build(w.corpus);
  w.data = to_dataset(w.corpus, w.vocab);
  return w;
}

WorldSpec benchmark_spec(std::uint64_t seed) {
  WorldSpec spec;
  spec.seed = seed;
  return spec;
}

Backbone<float> pretrained(const World& world, std::uint64_t seed) {
  Backbone<float> model(ModelConfig::toy(), derive_seed(seed, "init"));
  TrainConfig config;
  config.phase1_steps = kPretrainPhase1;
  config.phase2_steps = kPretrainPhase2;
  config.seed = derive_seed(seed, "sampler");
  run_pretraining(model, world.data.pretrain, config);
  return model;
}

StagePlan stage_plan(Stage stage, std::size_t steps, std::uint64_t seed) {
  StagePlan plan;
  plan.stage = stage;
  plan.steps = steps;
  plan.seed = derive_seed(seed, "finetune-" + to_string(stage));
  return plan;
}

Metrics evaluate_dev(const World& world, const Backbone<float>& retriever, const Backbone<float>& reader) {
  const auto index = build_global_index(retriever, world.data.store);
  const StagePlan plan;
  std::vector<Prediction> predictions;
  std::vector<Reference> references;
  for (std::size_t i = 0; i < world.data.dev.size(); ++i) {
    const auto& ex = world.data.dev[i];
    const auto a = answer(retriever, reader, ex.question, index, world.data.store, plan);
    predictions.push_back({ex.id, world.vocab.decode(a.tokens), a.retrieval.ids});
    references.push_back({ex.id, world.corpus.dev[i].answer, ex.positives});
  }
  return evaluate(predictions, references);
}

// Two-stage fine-tune from a pre-trained model. Returns {retriever, reader}.
std::pair<Backbone<float>, Backbone<float>> two_stage(const World& world, Backbone<float> model, std::uint64_t seed,
                                                      Backbone<float>* after_inbatch = nullptr) {
  run_inbatch_stage(model, world.data.train, world.data.store, stage_plan(Stage::in_batch, kInBatchSteps, seed));
  if (after_inbatch) *after_inbatch = model.clone();
  auto retriever = model.clone();
  const auto index = build_global_index(retriever, world.data.store);
  const auto manifest = retrieve_fixed(retriever, std::span<const FinetuneExample>(world.data.train), index, 4);
  fixed_retrieval_finetune(model, world.data.train, manifest, world.data.store,
                           stage_plan(Stage::fixed_retrieval, kFixedSteps, seed));
  return {std::move(retriever), std::move(model)};
}

// ---------------------------------------------------------------------------

Report suite_grad(const fs::path&) {
  Report r{"grad"};
  const auto start = Clock::now();
  const auto config = testing::tiny_config();
  Backbone<double> model(config, 11);
  Rng rng(12);
  const std::vector<Segment> queries{{testing::random_image(rng, config.image_size), testing::random_tokens(rng, 3, 12)},
                                     {std::nullopt, testing::random_tokens(rng, 4, 12)}};
  const std::vector<Segment> memory{{testing::random_image(rng, config.image_size), testing::random_tokens(rng, 2, 12)},
                                    {std::nullopt, testing::random_tokens(rng, 5, 12)},
                                    {std::nullopt, testing::random_tokens(rng, 3, 12)}};
  const std::vector<std::vector<std::size_t>> positives{{0}, {1, 2}};
  const TokenSeq target = testing::random_tokens(rng, 3, 12);
  auto loss = [&] {
    std::vector<Tensor64> q, m;
    for (const auto& s : queries) q.push_back(model.encode({{s}}).cls);
    for (const auto& s : memory) m.push_back(model.encode({{s}}).cls);
    const auto l_con = contrastive_loss(concat_rows(std::span<const Tensor64>(q)),
                                        concat_rows(std::span<const Tensor64>(m)), positives);
    const std::vector<Segment> aug{memory[0], memory[1]};
    return add(l_con, generative_loss(model, std::span<const Segment>(aug), queries[0], target));
  };
  const auto check = testing::gradcheck(model.parameters(), loss);
  r.seconds = since(start);
  r.measured = {{"max_relative_error", check.max_error}, {"worst", check.worst}, {"coordinates", check.coordinates},
                {"parameters", model.parameter_count()}};
  r.threshold = {{"max_relative_error", kGradTolerance}, {"seconds", kGradSeconds}};
  r.pass = check.max_error <= kGradTolerance && check.coordinates == model.parameter_count() && r.seconds < kGradSeconds;
  r.summary = "max relative error " + std::to_string(check.max_error) + " over " + std::to_string(check.coordinates) +
              " coordinates";
  return r;
}

Report suite_mips(const fs::path&) {
  Report r{"mips"};
  const auto start = Clock::now();
  const std::size_t workers = std::max<std::size_t>(4, default_workers());
  std::size_t mismatched_ids = 0, comparisons = 0;
  double max_deviation = 0.0;
  for (bool coarse : {false, true}) {
    Rng rng(coarse ? 32 : 31);
    const auto index = testing::random_index(rng, 10000, 32, coarse);
    for (int q = 0; q < 100; ++q) {
      std::vector<float> query(32);
      for (auto& x : query) x = coarse ? static_cast<float>(rng.below(3)) : static_cast<float>(rng.normal());
      for (std::size_t k : {1u, 4u, 20u}) {
        const auto [ids, scores] = testing::argsort_top_k(query, index, k);
        const auto got = top_k_blocked(query, index, k, workers, 1024);
        ++comparisons;
        if (got.ids != ids) ++mismatched_ids;
        for (std::size_t i = 0; i < k; ++i) max_deviation = std::max(max_deviation, std::abs(got.scores[i] - scores[i]));
      }
    }
  }
  r.seconds = since(start);
  r.measured = {{"comparisons", comparisons}, {"id_mismatches", mismatched_ids},
                {"max_score_deviation", max_deviation}, {"workers", workers}};
  r.threshold = {{"id_mismatches", 0}, {"max_score_deviation", 0.0}, {"seconds", kMipsSeconds}};
  r.pass = mismatched_ids == 0 && max_deviation == 0.0 && r.seconds < kMipsSeconds;
  r.summary = std::to_string(comparisons) + " queries, " + std::to_string(mismatched_ids) +
              " id mismatches, max score deviation " + std::to_string(max_deviation);
  return r;
}

Report suite_retrieval(const fs::path&) {
  Report r{"retrieval"};
  const auto start = Clock::now();
  const auto world = make_world(benchmark_spec(1));
  std::vector<PretrainExample> held_out;
  for (const auto& ex : world.data.pretrain)
    if (ex.source == Source::cap_clean) held_out.push_back(ex);
  std::vector<double> recalls;
  json per_seed = json::array();
  for (std::uint64_t seed : {1, 2, 3}) {
    Backbone<float> model(ModelConfig::toy(), derive_seed(seed, "init"));
    TrainConfig config;
    config.phase1_steps = kRetrievalSteps;
    config.phase2_steps = 0;
    config.batch_size = kRetrievalBatch;
    config.seed = derive_seed(seed, "sampler");
    run_pretraining(model, world.data.pretrain, config);
    // In-batch recall@1 over disjoint held-out caption batches.
    std::size_t hits = 0, queries = 0;
    for (std::size_t b = 0; b + kRetrievalBatch <= held_out.size(); b += kRetrievalBatch) {
      const auto l = pretrain_eval(model, std::span<const PretrainExample>(held_out.data() + b, kRetrievalBatch),
                                   PretrainOptions{});
      hits += l.top1_hits;
      queries += l.queries;
    }
    const double recall = static_cast<double>(hits) / static_cast<double>(queries);
    recalls.push_back(recall);
    per_seed.push_back({{"seed", seed}, {"recall_at_1", recall}, {"queries", queries}});
    progress("retrieval seed " + std::to_string(seed) + " recall@1 " + fixed(recall) + " at " + fixed(since(start), 1) +
             " s");
  }
  const double med = median(recalls);
  r.seconds = since(start);
  r.measured = {{"median_recall_at_1", med}, {"per_seed", per_seed}, {"steps", kRetrievalSteps},
                {"batch_size", kRetrievalBatch}};
  r.threshold = {{"median_recall_at_1", kRetrievalRecall}, {"seconds", kRetrievalSeconds}};
  r.pass = med >= kRetrievalRecall && r.seconds < kRetrievalSeconds;
  r.summary = "median in-batch recall@1 " + fixed(med) + " after " + std::to_string(kRetrievalSteps) + " steps";
  return r;
}

Report suite_gate(const fs::path&) {
  Report r{"gate"};
  const auto start = Clock::now();
  const auto world = make_world(benchmark_spec(1));
  Backbone<float> model(ModelConfig::toy(), 5);
  Adam<float> adam(model.parameters(), constant_schedule(5e-4));
  PretrainOptions options;
  std::vector<GateRecord> trace;
  const auto& examples = world.data.pretrain;
  for (std::size_t b = 0; b < examples.size(); b += kRetrievalBatch) {
    const std::size_t n = std::min(kRetrievalBatch, examples.size() - b);
    pretrain_step(model, adam, std::span<const PretrainExample>(examples.data() + b, n), options, &trace);
  }
  std::map<std::string, std::pair<std::size_t, std::size_t>> by_source;  // {conforming, total}
  std::set<std::string> seen;
  for (const auto& g : trace) {
    seen.insert(g.example_id);
    const std::size_t expected = is_caption_source(g.source) ? 0 : options.topk;
    auto& [ok, total] = by_source[to_string(g.source)];
    ok += g.augmentation_size == expected ? 1 : 0;
    ++total;
  }
  bool all = seen.size() == examples.size();
  json per_source = json::object();
  for (const auto& [source, counts] : by_source) {
    per_source[source] = {{"conforming", counts.first}, {"total", counts.second}};
    all = all && counts.first == counts.second;
  }
  r.seconds = since(start);
  r.measured = {{"examples", examples.size()}, {"traced", seen.size()}, {"per_source", per_source}};
  r.threshold = {{"caption_augmentation", 0}, {"qa_augmentation", options.topk}, {"conforming_fraction", 1.0}};
  r.pass = all;
  r.summary = std::to_string(seen.size()) + " of " + std::to_string(examples.size()) +
              " examples traced over one epoch, gate " + (all ? "conforms" : "violated");
  return r;
}

Report suite_e2e(const fs::path&) {
  Report r{"e2e"};
  const auto start = Clock::now();
  const auto world = make_world(benchmark_spec(1));
  auto [retriever, reader] = two_stage(world, pretrained(world, 1), 1);
  const auto m = evaluate_dev(world, retriever, reader);
  r.seconds = since(start);
  r.measured = {{"em", m.em}, {"recall_at_4", m.recall_at_k.at(4)}, {"token_f1", m.token_f1},
                {"memory_entries", world.data.store.size()}, {"train", world.data.train.size()},
                {"dev", world.data.dev.size()}};
  r.threshold = {{"em", kE2eEm}, {"recall_at_4", kE2eRecall}, {"seconds", kE2eSeconds}};
  r.pass = m.em >= kE2eEm && m.recall_at_k.at(4) >= kE2eRecall && r.seconds < kE2eSeconds;
  r.summary = "EM " + fixed(m.em) + ", recall@4 " + fixed(m.recall_at_k.at(4));
  return r;
}

Report suite_ablation(const fs::path&) {
  Report r{"ablation"};
  const auto start = Clock::now();
  std::vector<double> both, inbatch, fixed_only;
  json per_seed = json::array();
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto world = make_world(benchmark_spec(seed));
    auto base = pretrained(world, seed);
    // Fixed-retrieval only: the pre-trained retriever supplies the frozen retrievals.
    auto fixed_model = base.clone();
    {
      const auto index = build_global_index(base, world.data.store);
      const auto manifest = retrieve_fixed(base, std::span<const FinetuneExample>(world.data.train), index, 4);
      fixed_retrieval_finetune(fixed_model, world.data.train, manifest, world.data.store,
                               stage_plan(Stage::fixed_retrieval, kFixedSteps, seed));
    }
    const auto m_fixed = evaluate_dev(world, base, fixed_model);
    Backbone<float> after_inbatch(ModelConfig::toy(), 0);
    auto [retriever, reader] = two_stage(world, std::move(base), seed, &after_inbatch);
    const auto m_inbatch = evaluate_dev(world, after_inbatch, after_inbatch);
    const auto m_both = evaluate_dev(world, retriever, reader);
    both.push_back(m_both.em);
    inbatch.push_back(m_inbatch.em);
    fixed_only.push_back(m_fixed.em);
    per_seed.push_back({{"seed", seed}, {"two_stage", m_both.em}, {"inbatch_only", m_inbatch.em},
                        {"fixed_only", m_fixed.em}});
    progress("ablation seed " + std::to_string(seed) + " two-stage " + fixed(m_both.em) + " inbatch " +
             fixed(m_inbatch.em) + " fixed " + fixed(m_fixed.em) + " at " + fixed(since(start), 1) + " s");
  }
  const double b = median(both), i = median(inbatch), f = median(fixed_only);
  r.seconds = since(start);
  r.measured = {{"two_stage", b}, {"inbatch_only", i}, {"fixed_only", f}, {"gap", b - f}, {"per_seed", per_seed}};
  r.threshold = {{"order", "two_stage >= inbatch_only >= fixed_only"}, {"gap", kAblationGap}};
  r.pass = b >= i && i >= f && b - f >= kAblationGap;
  r.summary = "median EM two-stage " + fixed(b) + ", in-batch only " + fixed(i) + ", fixed only " + fixed(f);
  return r;
}

Report suite_beam(const fs::path&) {
  Report r{"beam"};
  const auto start = Clock::now();
  const auto world = make_world(benchmark_spec(1));
  Backbone<float> model(ModelConfig::toy(), derive_seed(7, "init"));
  TrainConfig config;
  config.phase1_steps = 200;
  config.phase2_steps = 200;
  config.seed = 7;
  run_pretraining(model, world.data.pretrain, config);
  run_inbatch_stage(model, world.data.train, world.data.store, stage_plan(Stage::in_batch, 300, 7));
  const auto index = build_global_index(model, world.data.store);
  TapePause pause;
  std::size_t beam_ok = 0, identical = 0, strictly_better = 0;
  double worst_margin = std::numeric_limits<double>::infinity();
  const std::size_t n = std::min(kBeamQuestions, world.data.dev.size());
  const StagePlan plan;
  for (std::size_t i = 0; i < n; ++i) {
    const Segment q{std::nullopt, world.data.dev[i].question};
    const auto hits = top_k(encode_query(model, q), index, plan.k);
    MultimodalInput input;
    for (const auto& id : hits.ids) input.segments.push_back(world.data.store.at(id).segment(model.config()));
    input.segments.push_back(q);
    const auto enc = model.encode(input);
    const auto greedy = generate_greedy(model, enc, plan.max_answer_tokens);
    const auto beam1 = generate_beam(model, enc, 1, plan.max_answer_tokens);
    const auto beam2 = generate_beam(model, enc, 2, plan.max_answer_tokens);
    const double lp_greedy = sequence_log_prob(model, enc, greedy.tokens, greedy.finished);
    const double lp_beam2 = sequence_log_prob(model, enc, beam2.tokens, beam2.finished);
    worst_margin = std::min(worst_margin, lp_beam2 - lp_greedy);
    beam_ok += lp_beam2 >= lp_greedy ? 1 : 0;
    strictly_better += lp_beam2 > lp_greedy ? 1 : 0;
    identical += (beam1.tokens == greedy.tokens && beam1.log_prob == greedy.log_prob &&
                  beam1.finished == greedy.finished)
                     ? 1
                     : 0;
  }
  r.seconds = since(start);
  r.measured = {{"questions", n},
                {"beam2_at_least_greedy", beam_ok},
                {"beam2_strictly_better", strictly_better},
                {"beam1_identical_to_greedy", identical},
                {"worst_log_prob_margin", worst_margin}};
  r.threshold = {{"questions", kBeamQuestions}, {"beam2_at_least_greedy", n}, {"beam1_identical_to_greedy", n}};
  r.pass = n == kBeamQuestions && beam_ok == n && identical == n;
  r.summary = std::to_string(beam_ok) + "/" + std::to_string(n) + " beam-2 >= greedy, " + std::to_string(identical) +
              "/" + std::to_string(n) + " beam-1 identical to greedy";
  return r;
}

// Runs the CLI pipeline in `dir`, returning the artifacts it wrote.
std::vector<fs::path> cli_pipeline(const fs::path& dir) {
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto p = [&](const char* name) { return (dir / name).string(); };
  const std::vector<std::vector<std::string>> commands{
      {"gen-data", "--out", p("data"), "--seed", "7"},
      {"pretrain", "--data", p("data"), "--out", p("pt.ckpt"), "--seed", "7", "--phase1-steps", "150",
       "--phase2-steps", "100", "--metrics", p("pt.jsonl")},
      {"finetune", "--stage", "inbatch", "--data", p("data"), "--init", p("pt.ckpt"), "--out", p("ib.ckpt"), "--seed",
       "7", "--steps", "100", "--metrics", p("ib.jsonl")},
      {"index", "--data", p("data"), "--checkpoint", p("ib.ckpt"), "--out", p("ib.idx")},
      {"finetune", "--stage", "fixed", "--data", p("data"), "--init", p("ib.ckpt"), "--out", p("fx.ckpt"), "--index",
       p("ib.idx"), "--manifest", p("fx.manifest.jsonl"), "--seed", "7", "--steps", "100", "--metrics", p("fx.jsonl")},
      {"answer", "--data", p("data"), "--checkpoint", p("fx.ckpt"), "--retriever", p("ib.ckpt"), "--index", p("ib.idx"),
       "--split", "dev", "--out", p("preds.jsonl")},
      {"eval", "--data", p("data"), "--predictions", p("preds.jsonl"), "--split", "dev", "--out", p("metrics.json")},
  };
  for (const auto& args : commands) {
    std::ostringstream out, err;
    const int code = cli::run_cli(args, out, err);
    if (code != cli::kExitOk) throw std::runtime_error(args[0] + " exited " + std::to_string(code) + ": " + err.str());
  }
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), dir));
  std::sort(files.begin(), files.end());
  return files;
}

Report suite_determinism(const fs::path& work) {
  Report r{"determinism"};
  const auto start = Clock::now();
  // Both runs use the same directory so recorded paths agree; the first is moved aside.
  const auto run = work / "determinism_run", a = work / "determinism_a", b = work / "determinism_b";
  fs::remove_all(a);
  const auto files_a = cli_pipeline(run);
  fs::rename(run, a);
  const auto files_b = cli_pipeline(run);
  fs::remove_all(b);
  fs::rename(run, b);
  std::vector<std::string> differing;
  for (const auto& f : files_a) {
    if (!fs::exists(b / f) || binary::read_file(a / f) != binary::read_file(b / f)) differing.push_back(f.string());
  }
  std::vector<std::string> names;
  for (const auto& f : files_a) names.push_back(f.string());
  r.seconds = since(start);
  r.measured = {{"artifacts", names}, {"differing", differing}, {"same_file_set", files_a == files_b}};
  r.threshold = {{"differing", 0}};
  r.pass = differing.empty() && files_a == files_b && !files_a.empty();
  r.summary = std::to_string(files_a.size()) + " artifacts compared, " + std::to_string(differing.size()) + " differ";
  return r;
}

Report suite_metrics(const fs::path&) {
  Report r{"metrics"};
  const auto start = Clock::now();
  const auto cases = testing::metric_cases();
  std::size_t exact = 0;
  json failures = json::array();
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const auto& c = cases[i];
    double got = 0.0;
    switch (c.kind) {
      case testing::MetricKind::em: got = exact_match(c.prediction, c.reference); break;
      case testing::MetricKind::token_f1: got = token_f1(c.prediction, c.reference); break;
      case testing::MetricKind::keyword: got = keyword_accuracy(c.prediction, c.left); break;
      case testing::MetricKind::retrieval_f1: got = retrieval_f1(c.left, c.right); break;
    }
    if (got == c.expected) ++exact;
    else failures.push_back({{"case", i}, {"expected", c.expected}, {"got", got}});
  }
  r.seconds = since(start);
  r.measured = {{"cases", cases.size()}, {"exact", exact}, {"failures", failures}};
  r.threshold = {{"cases", 30}, {"exact", 30}};
  r.pass = cases.size() == 30 && exact == cases.size();
  r.summary = std::to_string(exact) + "/" + std::to_string(cases.size()) + " cases exact";
  return r;
}

struct Suite {
  int criterion;
  std::function<Report(const fs::path&)> run;
};

const std::map<std::string, Suite>& suites() {
  static const std::map<std::string, Suite> table{
      {"grad", {1, suite_grad}},           {"mips", {2, suite_mips}},         {"retrieval", {3, suite_retrieval}},
      {"gate", {4, suite_gate}},           {"e2e", {5, suite_e2e}},           {"ablation", {6, suite_ablation}},
      {"beam", {7, suite_beam}},           {"determinism", {8, suite_determinism}}, {"metrics", {9, suite_metrics}},
  };
  return table;
}

int usage() {
  std::cerr << "usage: murag_acceptance <suite> [--work DIR]\nsuites:";
  for (const auto& [name, _] : suites()) std::cerr << ' ' << name;
  std::cerr << '\n';
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) return usage();
  const std::string name = argv[1];
  fs::path work = fs::temp_directory_path() / "murag_acceptance";
  for (int i = 2; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--work" && i + 1 < argc) work = argv[++i];
    else return usage();
  }
  const auto it = suites().find(name);
  if (it == suites().end()) {
    std::cerr << "unknown suite '" << name << "'\n";
    return usage();
  }
  fs::create_directories(work);
  Report report;
  try {
    report = it->second.run(work);
  } catch (const std::exception& e) {
    report.name = name;
    report.pass = false;
    report.measured = {{"error", e.what()}};
    report.summary = std::string("error: ") + e.what();
  }
  std::cout << (report.pass ? "PASS" : "FAIL") << " criterion " << it->second.criterion << " " << name << ": "
            << report.summary << " (" << fixed(report.seconds, 1) << " s)\n";
  const json j = {{"name", report.name}, {"pass", report.pass}, {"measured", report.measured},
                  {"threshold", report.threshold}, {"seconds", report.seconds}};
  std::cout << j.dump() << '\n';
  std::ofstream(work / (name + ".json")) << j.dump(2) << '\n';
  return report.pass ? 0 : 2;
}
