#include "murag_cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "murag/backbone.hpp"
#include "murag/checkpoint.hpp"
#include "murag/corpus.hpp"
#include "murag/finetune.hpp"
#include "murag/memory_index.hpp"
#include "murag/metrics.hpp"
#include "murag/rng.hpp"
#include "murag/training.hpp"

namespace murag::cli {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

// Raised for missing or inconsistent inputs; maps to exit code 2.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string read_text(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("file not found: " + path.string());
  return binary::read_file(path);
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  binary::write_file(path, text);
}

fs::path sidecar(const fs::path& artifact) { return fs::path(artifact.string() + ".json"); }

void write_sidecar(const fs::path& artifact, const json& meta) { write_text(sidecar(artifact), meta.dump(2) + "\n"); }

json read_sidecar(const fs::path& artifact) {
  const auto path = sidecar(artifact);
  if (!fs::exists(path)) throw DataError("metadata file not found: " + path.string());
  return json::parse(read_text(path));
}

std::string fingerprint_of(const std::string& canonical) { return to_hex(sha256(canonical)); }

struct Loaded {
  Corpus corpus;
  Vocab vocab;
  Dataset data;
};

Loaded load_data(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("corpus directory not found: " + dir.string());
  Loaded l;
  l.corpus = read_corpus(dir);
  l.vocab = Vocab::build(l.corpus);
  l.data = to_dataset(l.corpus, l.vocab);
  return l;
}

ModelConfig resolve_model(const std::string& preset, const std::string& config_path) {
  if (!config_path.empty()) return model_config_from_json(read_text(config_path));
  return ModelConfig::preset(preset);
}

void check_vocab(const ModelConfig& config, const Vocab& vocab) {
  if (vocab.size() > config.vocab_size) {
    throw DataError("corpus vocabulary has " + std::to_string(vocab.size()) + " words but the model holds " +
                    std::to_string(config.vocab_size));
  }
}

Backbone<float> load_model(const fs::path& checkpoint) {
  if (!fs::exists(checkpoint)) throw DataError("checkpoint not found: " + checkpoint.string());
  const auto meta = read_sidecar(checkpoint);
  if (!meta.contains("model")) throw DataError("checkpoint metadata lacks a model config: " + sidecar(checkpoint).string());
  Backbone<float> model(model_config_from_json(meta.at("model").dump()), 0);
  model.load(load_checkpoint(checkpoint));
  return model;
}

std::uint64_t checkpoint_seed(const fs::path& checkpoint) { return read_sidecar(checkpoint).value("seed", 0ull); }

std::vector<FinetuneExample> split_of(const Dataset& data, const std::string& split) {
  if (split == "dev") return data.dev;
  if (split == "train") return data.train;
  throw DataError("unknown split '" + split + "' (expected dev or train)");
}

std::vector<CorpusRecord> records_of(const Corpus& corpus, const std::string& split) {
  return split == "train" ? corpus.train : corpus.dev;
}

void write_lines(const fs::path& path, const std::vector<std::string>& lines) {
  std::string text;
  for (const auto& l : lines) text += l + "\n";
  write_text(path, text);
}

// ---------------------------------------------------------------------------

struct GenData {
  std::string spec, out;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;

  int run(std::ostream& out_stream) const {
    WorldSpec ws;
    bool seeded = false;
    if (!spec.empty()) {
      const auto text = read_text(spec);
      ws = world_spec_from_json(text);
      seeded = json::parse(text).contains("seed");
    }
    if (seed_opt->count() > 0 || !seeded) ws.seed = derive_seed(seed, "data");
    const auto corpus = generate_corpus(ws);
    write_corpus(corpus, out);
    json files = json::object();
    for (const char* name : {"memory.jsonl", "pretrain.jsonl", "train.jsonl", "dev.jsonl"}) {
      files[name] = to_hex(sha256(binary::read_file(fs::path(out) / name)));
    }
    const auto spec_json = to_json(ws);
    json meta = {{"seed", seed},
                 {"spec", json::parse(spec_json)},
                 {"config_fingerprint", fingerprint_of(spec_json)},
                 {"files", files}};
    write_text(fs::path(out) / "corpus.json", meta.dump(2) + "\n");
    out_stream << "wrote " << corpus.memory.size() << " memory entries, " << corpus.pretrain.size()
               << " pre-training examples, " << corpus.train.size() << " train and " << corpus.dev.size()
               << " dev questions to " << out << "\n";
    return kExitOk;
  }
};

struct Pretrain {
  std::string data, out, config, train_preset = "default", model_preset = "toy", model_config, metrics;
  std::uint64_t seed = 0;
  double lambda = 1.0, lr = 5e-4;
  std::size_t batch_size = 32, topk = 4;
  std::uint64_t phase1_steps = 0, phase2_steps = 0;
  CLI::Option *seed_opt, *lambda_opt, *lr_opt, *batch_opt, *topk_opt, *p1_opt, *p2_opt;

  TrainConfig resolve() const {
    TrainConfig c;
    if (train_preset == "appendix") c.lambda = 0.5;
    else if (train_preset != "default") throw DataError("unknown training preset '" + train_preset + "'");
    if (!config.empty()) c = train_config_from_json(read_text(config), c);
    if (seed_opt->count()) c.seed = seed;
    if (lambda_opt->count()) c.lambda = lambda;
    if (lr_opt->count()) c.lr = lr;
    if (batch_opt->count()) c.batch_size = batch_size;
    if (topk_opt->count()) c.topk = topk;
    if (p1_opt->count()) c.phase1_steps = phase1_steps;
    if (p2_opt->count()) c.phase2_steps = phase2_steps;
    c.validate();
    return c;
  }

  int run(std::ostream& out_stream) const {
    const auto loaded = load_data(data);
    const auto train = resolve();
    const auto model_cfg = resolve_model(model_preset, model_config);
    check_vocab(model_cfg, loaded.vocab);
    Backbone<float> model(model_cfg, derive_seed(train.seed, "init"));
    auto schedule = train;
    schedule.seed = derive_seed(train.seed, "sampler");
    std::vector<std::string> lines;
    run_pretraining(model, loaded.data.pretrain, schedule, [&](const StepMetrics& m) {
      lines.push_back(metrics_line(m));
    });
    save_checkpoint(out, model.to_checkpoint());
    const auto canonical = to_json(model_cfg) + to_json(train);
    write_sidecar(out, {{"seed", train.seed},
                        {"stage", "pretrain"},
                        {"model", json::parse(to_json(model_cfg))},
                        {"train", json::parse(to_json(train))},
                        {"config_fingerprint", fingerprint_of(canonical)},
                        {"checkpoint_sha256", to_hex(model.fingerprint())}});
    if (!metrics.empty()) write_lines(metrics, lines);
    out_stream << "pre-trained " << (train.phase1_steps + train.phase2_steps) << " steps; final "
               << (lines.empty() ? "{}" : lines.back()) << "\n";
    return kExitOk;
  }
};

struct Finetune {
  std::string stage, data, init, out, config, index, manifest, metrics;
  std::uint64_t seed = 0;
  std::size_t steps = 0, batch_size = 8, k = 4;
  double lr = 3e-4, lambda = 1.0;
  CLI::Option *seed_opt, *steps_opt, *batch_opt, *k_opt, *lr_opt, *lambda_opt;

  StagePlan resolve() const {
    StagePlan p;
    p.stage = stage_from_string(stage);
    p.seed = checkpoint_seed(init);
    if (!config.empty()) {
      const auto j = json::parse(read_text(config));
      for (const auto& [key, v] : j.items()) {
        if (key == "steps") p.steps = v.get<std::size_t>();
        else if (key == "k") p.k = v.get<std::size_t>();
        else if (key == "beam_width") p.beam_width = v.get<std::size_t>();
        else if (key == "lambda") p.lambda = v.get<double>();
        else if (key == "batch_size") p.batch_size = v.get<std::size_t>();
        else if (key == "lr") p.lr = v.get<double>();
        else if (key == "seed") p.seed = v.get<std::uint64_t>();
        else throw DataError("stage config: unknown field '" + key + "'");
      }
    }
    if (seed_opt->count()) p.seed = seed;
    if (steps_opt->count()) p.steps = steps;
    if (batch_opt->count()) p.batch_size = batch_size;
    if (k_opt->count()) p.k = k;
    if (lr_opt->count()) p.lr = lr;
    if (lambda_opt->count()) p.lambda = lambda;
    p.validate();
    return p;
  }

  int run(std::ostream& out_stream, std::ostream& err) const {
    const auto plan = resolve();
    fs::path index_path;
    if (plan.stage == Stage::fixed_retrieval) {
      if (index.empty()) throw DataError("--stage fixed needs --index");
      index_path = index;
      if (!fs::exists(index_path)) throw DataError("frozen index not found: " + index_path.string());
    }
    const auto loaded = load_data(data);
    auto model = load_model(init);
    check_vocab(model.config(), loaded.vocab);
    auto stage_plan = plan;
    stage_plan.seed = derive_seed(plan.seed, "finetune-" + to_string(plan.stage));
    std::vector<std::string> lines;
    auto log = [&](std::uint64_t step, const LossBreakdown& loss) { lines.push_back(metrics_line({step, loss})); };
    json meta = {{"seed", plan.seed}, {"stage", to_string(plan.stage)}, {"model", json::parse(to_json(model.config()))},
                 {"parent_sha256", to_hex(model.fingerprint())}};
    if (plan.stage == Stage::in_batch) {
      run_inbatch_stage(model, loaded.data.train, loaded.data.store, stage_plan, log);
    } else {
      EncodedMemory frozen;
      try {
        frozen = EncodedMemory::load(index_path);
      } catch (const FormatError& e) {
        throw DataError("not a frozen index: " + index_path.string() + " (" + e.what() + ")");
      }
      if (frozen.fingerprint() != model.fingerprint()) {
        err << "warning: index " << index_path.string() << " was built from a different checkpoint than " << init
            << "\n";
      }
      const auto fixed = retrieve_fixed(model, std::span<const FinetuneExample>(loaded.data.train), frozen, plan.k);
      const fs::path manifest_path = manifest.empty() ? fs::path(out + ".manifest.jsonl") : fs::path(manifest);
      write_text(manifest_path, manifest_to_jsonl(fixed));
      fixed_retrieval_finetune(model, loaded.data.train, fixed, loaded.data.store, stage_plan, log);
      meta["index_sha256"] = to_hex(sha256(binary::read_file(index_path)));
      meta["manifest"] = manifest_path.string();
    }
    json plan_json = {{"steps", plan.steps}, {"k", plan.k},           {"beam_width", plan.beam_width},
                      {"lambda", plan.lambda}, {"batch_size", plan.batch_size}, {"lr", plan.lr}};
    meta["plan"] = plan_json;
    meta["config_fingerprint"] = fingerprint_of(to_json(model.config()) + plan_json.dump());
    meta["checkpoint_sha256"] = to_hex(model.fingerprint());
    save_checkpoint(out, model.to_checkpoint());
    write_sidecar(out, meta);
    if (!metrics.empty()) write_lines(metrics, lines);
    out_stream << to_string(plan.stage) << " stage: " << plan.steps << " steps; final "
               << (lines.empty() ? "{}" : lines.back()) << "\n";
    return kExitOk;
  }
};

struct Index {
  std::string data, checkpoint, out;
  std::size_t threads = 0;

  int run(std::ostream& out_stream) const {
    const auto loaded = load_data(data);
    const auto model = load_model(checkpoint);
    check_vocab(model.config(), loaded.vocab);
    const auto workers = threads > 0 ? threads : default_workers();
    const auto index = build_global_index(model, loaded.data.store, workers);
    index.save(out);
    write_sidecar(out, {{"seed", checkpoint_seed(checkpoint)},
                        {"checkpoint_sha256", to_hex(index.fingerprint())},
                        {"config_fingerprint", fingerprint_of(to_json(model.config()))},
                        {"entries", index.size()}});
    out_stream << "indexed " << index.size() << " entries into " << out << "\n";
    return kExitOk;
  }
};

struct AnswerCmd {
  std::string data, checkpoint, retriever, index, question, split = "dev", out, mode = "full";
  std::size_t k = 4, beam = 2, max_tokens = 8;

  int run(std::ostream& out_stream, std::ostream& err) const {
    if (!fs::exists(index)) throw DataError("frozen index not found: " + index);
    const auto loaded = load_data(data);
    const auto reader = load_model(checkpoint);
    std::optional<Backbone<float>> separate;
    if (!retriever.empty() && retriever != checkpoint) separate.emplace(load_model(retriever));
    const auto& retr = separate ? *separate : reader;
    check_vocab(reader.config(), loaded.vocab);
    const auto global = EncodedMemory::load(index);
    if (global.fingerprint() != retr.fingerprint()) {
      err << "warning: index " << index << " was not built from the retriever checkpoint\n";
    }
    StagePlan plan;
    plan.k = k;
    plan.beam_width = beam;
    plan.max_answer_tokens = max_tokens;
    plan.validate();
    if (mode != "full" && mode != "distractor") throw DataError("unknown mode '" + mode + "'");

    auto respond = [&](const TokenSeq& q, const EncodedMemory& idx) {
      const auto a = answer(retr, reader, q, idx, loaded.data.store, plan);
      return std::make_pair(loaded.vocab.decode(a.tokens), a);
    };
    if (!question.empty()) {
      if (mode == "distractor") throw DataError("--mode distractor needs a dataset question, not --question");
      const auto [text, a] = respond(loaded.vocab.encode(question), global);
      json j = {{"answer", text},
                {"retrieved_ids", a.retrieval.ids},
                {"scores", a.retrieval.scores},
                {"log_prob", a.log_prob},
                {"k", k},
                {"beam", beam}};
      out_stream << j.dump() << "\n";
      return kExitOk;
    }
    const auto questions = split_of(loaded.data, split);
    std::vector<std::string> lines;
    for (const auto& q : questions) {
      std::optional<EncodedMemory> local;
      if (mode == "distractor") local = distractor_index(global, q);
      const auto [text, a] = respond(q.question, local ? *local : global);
      lines.push_back(prediction_to_json({q.id, text, a.retrieval.ids}));
    }
    if (out.empty()) {
      for (const auto& l : lines) out_stream << l << "\n";
    } else {
      write_lines(out, lines);
      out_stream << "answered " << lines.size() << " " << split << " questions (k=" << k << ", beam=" << beam
                 << ", mode=" << mode << ") into " << out << "\n";
    }
    return kExitOk;
  }
};

struct Eval {
  std::string data, predictions, split = "dev", out;

  int run(std::ostream& out_stream) const {
    const auto loaded = load_data(data);
    std::vector<Prediction> preds;
    std::istringstream in(read_text(predictions));
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) preds.push_back(prediction_from_json(line));
    std::vector<Reference> refs;
    for (const auto& r : records_of(loaded.corpus, split)) refs.push_back({r.id, r.answer, r.positive_ids});
    const auto metrics = evaluate(preds, refs);
    auto report = json::parse(metrics_to_json(metrics));
    report["split"] = split;
    report["predictions_sha256"] = to_hex(sha256(read_text(predictions)));
    const auto corpus_meta = fs::path(data) / "corpus.json";
    if (fs::exists(corpus_meta)) {
      const auto meta = json::parse(read_text(corpus_meta));
      report["seed"] = meta.value("seed", 0ull);
      report["config_fingerprint"] = meta.value("config_fingerprint", std::string{});
    }
    if (out.empty()) out_stream << report.dump() << "\n";
    else {
      write_text(out, report.dump() + "\n");
      out_stream << report.dump() << "\n";
    }
    return kExitOk;
  }
};

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multimodal retrieval-augmented transformer at desk scale", "murag"};
  app.require_subcommand(1);

  GenData gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate the synthetic corpus");
  gen_cmd->add_option("--spec", gen.spec, "World spec JSON");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen.seed_opt = gen_cmd->add_option("--seed", gen.seed, "Root seed");

  Pretrain pre;
  auto* pre_cmd = app.add_subcommand("pretrain", "Joint contrastive and generative pre-training");
  pre_cmd->add_option("--data", pre.data, "Corpus directory")->required();
  pre_cmd->add_option("--out", pre.out, "Output checkpoint")->required();
  pre_cmd->add_option("--config", pre.config, "Training config JSON");
  pre_cmd->add_option("--train-preset", pre.train_preset, "default (lambda 1) or appendix (lambda 0.5)");
  pre_cmd->add_option("--preset", pre.model_preset, "Model preset: toy or paper-base");
  pre_cmd->add_option("--model-config", pre.model_config, "Model config JSON");
  pre_cmd->add_option("--metrics", pre.metrics, "Line-delimited metrics log");
  pre.seed_opt = pre_cmd->add_option("--seed", pre.seed, "Root seed");
  pre.lambda_opt = pre_cmd->add_option("--lambda", pre.lambda, "Contrastive weight");
  pre.lr_opt = pre_cmd->add_option("--lr", pre.lr, "Learning rate");
  pre.batch_opt = pre_cmd->add_option("--batch-size", pre.batch_size, "Batch size");
  pre.topk_opt = pre_cmd->add_option("--topk", pre.topk, "Top-K for the augmentation gate");
  pre.p1_opt = pre_cmd->add_option("--phase1-steps", pre.phase1_steps, "Single-source steps");
  pre.p2_opt = pre_cmd->add_option("--phase2-steps", pre.phase2_steps, "Mixture steps");

  Finetune fin;
  auto* fin_cmd = app.add_subcommand("finetune", "In-batch or fixed-retrieval fine-tuning");
  fin_cmd->add_option("--stage", fin.stage, "inbatch or fixed")->required();
  fin_cmd->add_option("--data", fin.data, "Corpus directory")->required();
  fin_cmd->add_option("--init", fin.init, "Starting checkpoint")->required();
  fin_cmd->add_option("--out", fin.out, "Output checkpoint")->required();
  fin_cmd->add_option("--config", fin.config, "Stage config JSON");
  fin_cmd->add_option("--index", fin.index, "Frozen index (fixed stage)");
  fin_cmd->add_option("--manifest", fin.manifest, "Retrieval manifest output (fixed stage)");
  fin_cmd->add_option("--metrics", fin.metrics, "Line-delimited metrics log");
  fin.seed_opt = fin_cmd->add_option("--seed", fin.seed, "Root seed");
  fin.steps_opt = fin_cmd->add_option("--steps", fin.steps, "Optimizer steps");
  fin.batch_opt = fin_cmd->add_option("--batch-size", fin.batch_size, "Questions per step");
  fin.k_opt = fin_cmd->add_option("--k", fin.k, "Top-K");
  fin.lr_opt = fin_cmd->add_option("--lr", fin.lr, "Learning rate");
  fin.lambda_opt = fin_cmd->add_option("--lambda", fin.lambda, "Contrastive weight (inbatch)");

  Index idx;
  auto* idx_cmd = app.add_subcommand("index", "Encode and freeze the memory");
  idx_cmd->add_option("--data", idx.data, "Corpus directory")->required();
  idx_cmd->add_option("--checkpoint", idx.checkpoint, "Encoder checkpoint")->required();
  idx_cmd->add_option("--out", idx.out, "Index file")->required();
  idx_cmd->add_option("--threads", idx.threads, "Workers (default MURAG_THREADS or 1)");

  AnswerCmd ans;
  auto* ans_cmd = app.add_subcommand("answer", "Retrieve and generate answers");
  ans_cmd->add_option("--data", ans.data, "Corpus directory")->required();
  ans_cmd->add_option("--checkpoint", ans.checkpoint, "Reader checkpoint")->required();
  ans_cmd->add_option("--retriever", ans.retriever, "Query encoder checkpoint (default: --checkpoint)");
  ans_cmd->add_option("--index", ans.index, "Frozen index")->required();
  ans_cmd->add_option("--question", ans.question, "Answer one question");
  ans_cmd->add_option("--split", ans.split, "dev or train");
  ans_cmd->add_option("--mode", ans.mode, "full or distractor");
  ans_cmd->add_option("--out", ans.out, "Predictions file");
  ans_cmd->add_option("--k", ans.k, "Top-K");
  ans_cmd->add_option("--beam", ans.beam, "Beam width");
  ans_cmd->add_option("--max-tokens", ans.max_tokens, "Answer length limit");

  Eval ev;
  auto* ev_cmd = app.add_subcommand("eval", "Score a predictions file");
  ev_cmd->add_option("--data", ev.data, "Corpus directory")->required();
  ev_cmd->add_option("--predictions", ev.predictions, "Predictions file")->required();
  ev_cmd->add_option("--split", ev.split, "dev or train");
  ev_cmd->add_option("--out", ev.out, "Metrics report");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    if (*gen_cmd) return gen.run(out);
    if (*pre_cmd) return pre.run(out);
    if (*fin_cmd) return fin.run(out, err);
    if (*idx_cmd) return idx.run(out);
    if (*ans_cmd) return ans.run(out, err);
    if (*ev_cmd) return ev.run(out);
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
  err << app.help();
  return kExitUsage;
}

}  // namespace murag::cli
