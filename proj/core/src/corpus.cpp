#include "murag/corpus.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "murag/rng.hpp"

namespace murag {

namespace {

using json = nlohmann::json;

constexpr std::size_t kGridCells = 4;

const std::vector<std::string> kFirstNames{
    "alder", "brisk", "corvo", "dunmo", "elvar", "fenno", "garro", "hobin", "ilmar", "jaspo",
    "kelto", "lumar", "morva", "nesko", "orrin", "pelto", "quarn", "rusko", "selva", "tormi",
    "ulvar", "vesko", "wilmo", "xandr", "yorin", "zelmo", "arvik", "belto", "cudra", "dorvi"};
const std::vector<std::string> kSecondNames{
    "ash", "bek", "cor", "dun", "eld", "fay", "gim", "hul", "isk", "jor", "kav", "lom", "mir", "nox", "orb",
    "pim", "quil", "rax", "sol", "tav", "urk", "vel", "wix", "yam", "zor", "bram", "clet", "drim", "frot", "glen"};
const std::vector<std::string> kPlaces{"harbor", "forest", "desert", "castle", "valley", "island", "market", "temple",
                                       "garden", "canyon", "bridge", "village", "tower", "meadow", "glacier", "cavern"};
const std::vector<std::string> kCountWords{"one", "two", "three", "four", "five", "six", "seven", "eight",
                                           "nine", "ten", "eleven", "twelve", "thirteen", "fourteen", "fifteen",
                                           "sixteen"};
const std::vector<std::string> kNoise{"photo", "stock", "hd", "image", "free", "download", "wallpaper", "jpg"};
const std::string kCaptionPrompt = "generate caption :";

const std::map<std::string, std::array<std::string, 2>> kTemplates{
    {"color", {"what color are the objects in {} ?", "which color does {} show ?"}},
    {"shape", {"what shape are the objects in {} ?", "which shape does {} show ?"}},
    {"count", {"how many objects are in {} ?", "what is the number of objects in {} ?"}},
    {"location", {"where is {} ?", "in which place is {} ?"}},
};
const std::map<std::string, std::string> kPretrainVisual{
    {"color", "what color are the objects ?"},
    {"shape", "what shape are the objects ?"},
    {"count", "how many objects are there ?"},
};

std::string fill(const std::string& pattern, const std::string& name) {
  auto pos = pattern.find("{}");
  return pattern.substr(0, pos) + name + pattern.substr(pos + 2);
}

std::string plural(const std::string& shape) {
  if (!shape.empty() && (shape.back() == 's' || shape.back() == 'x')) return shape + "es";
  return shape + "s";
}

struct Visual {
  std::size_t color;
  std::size_t shape;
  std::size_t count;
  PatchGrid image;
};

bool in_shape(const std::string& shape, std::size_t y, std::size_t x, std::size_t box) {
  const std::size_t mid = box / 2;
  const std::size_t half = box >= 5 ? box / 5 : 0;
  auto near_mid = [&](std::size_t v) { return v + half >= mid && v <= mid + half; };
  if (shape == "square") return true;
  if (shape == "ring") return y == 0 || x == 0 || y + 1 == box || x + 1 == box;
  if (shape == "dot") return near_mid(y) && near_mid(x);
  if (shape == "cross") return near_mid(y) || near_mid(x);
  // Further shapes: a diagonal.
  return y == x;
}

Visual draw(const WorldSpec& spec, Rng& rng) {
  Visual v;
  v.color = rng.below(spec.colors.size());
  v.shape = rng.below(spec.shapes.size());
  v.count = 1 + rng.below(spec.max_count);
  v.image = PatchGrid::zeros(spec.image_size, spec.image_size);
  const auto rgb = color_rgb(spec.colors[v.color]);
  std::vector<std::size_t> cells(kGridCells * kGridCells);
  for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = i;
  rng.shuffle(cells.begin(), cells.end());
  const std::size_t cell = spec.image_size / kGridCells;
  const std::size_t box = cell - 1;
  for (std::size_t n = 0; n < v.count; ++n) {
    const std::size_t cy = cells[n] / kGridCells, cx = cells[n] % kGridCells;
    for (std::size_t y = 0; y < box; ++y)
      for (std::size_t x = 0; x < box; ++x)
        if (in_shape(spec.shapes[v.shape], y, x, box))
          for (std::size_t c = 0; c < kImageChannels; ++c) v.image.at(cy * cell + y, cx * cell + x, c) = rgb[c];
  }
  return v;
}

std::string caption_of(const WorldSpec& spec, const Visual& v) {
  const auto& shape = spec.shapes[v.shape];
  return kCountWords[v.count - 1] + " " + spec.colors[v.color] + " " + (v.count == 1 ? shape : plural(shape));
}

struct Entity {
  std::string name;
  std::size_t first, second;
  Visual visual;
  std::size_t place;
};

std::string attribute(const WorldSpec& spec, const Entity& e, const std::string& kind) {
  if (kind == "color") return spec.colors[e.visual.color];
  if (kind == "shape") return spec.shapes[e.visual.shape];
  if (kind == "count") return kCountWords[e.visual.count - 1];
  return kPlaces[e.place];
}

std::string pad_id(const std::string& prefix, std::size_t i) {
  std::string digits = std::to_string(i);
  return prefix + std::string(digits.size() < 5 ? 5 - digits.size() : 0, '0') + digits;
}

json image_to_json(const PatchGrid& g) {
  json rows = json::array();
  for (std::size_t y = 0; y < g.height; ++y) {
    json row = json::array();
    for (std::size_t x = 0; x < g.width; ++x) {
      json px = json::array();
      for (std::size_t c = 0; c < g.channels; ++c) px.push_back(g.at(y, x, c));
      row.push_back(std::move(px));
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

PatchGrid image_from_json(const json& j) {
  PatchGrid g;
  g.height = j.size();
  if (g.height == 0) throw std::invalid_argument("image: no rows");
  g.width = j[0].size();
  if (g.width == 0) throw std::invalid_argument("image: no columns");
  g.channels = j[0][0].size();
  for (const auto& row : j) {
    if (row.size() != g.width) throw std::invalid_argument("image: ragged rows");
    for (const auto& px : row) {
      if (px.size() != g.channels) throw std::invalid_argument("image: ragged channels");
      for (const auto& v : px) {
        const float f = v.get<float>();
        if (!(f >= 0.0f && f <= 1.0f)) throw std::invalid_argument("image: value outside [0,1]");
        g.values.push_back(f);
      }
    }
  }
  return g;
}

std::vector<CorpusRecord> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open corpus file " + path.string());
  std::vector<CorpusRecord> out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty()) continue;
    try {
      out.push_back(record_from_json(line));
    } catch (const std::exception& e) {
      throw std::invalid_argument(path.string() + ":" + std::to_string(number) + ": " + e.what());
    }
  }
  return out;
}

void write_jsonl(const std::filesystem::path& path, const std::vector<CorpusRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::invalid_argument("cannot write corpus file " + path.string());
  for (const auto& r : records) out << record_to_json(r) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace

// ---------------------------------------------------------------------------

void WorldSpec::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("world spec: " + what); };
  if (colors.empty() || shapes.empty() || question_kinds.empty()) fail("attribute alphabets must be non-empty");
  for (const auto& c : colors) color_rgb(c);
  if (image_size % kGridCells != 0 || image_size / kGridCells < 3) {
    fail("image_size must be a multiple of 4 and at least 12");
  }
  if (max_count < 1 || max_count > kGridCells * kGridCells) fail("max_count must be in [1, 16]");
  for (const auto& k : question_kinds)
    if (!kTemplates.count(k)) fail("unknown question kind '" + k + "'");
  if (entities + pretrain_entities > kFirstNames.size() * kSecondNames.size()) {
    fail("at most " + std::to_string(kFirstNames.size() * kSecondNames.size()) + " distinct entity names");
  }
  if (entities == 0) fail("need at least one entity");
  const std::size_t pairs = entities * question_kinds.size();
  if (dev_questions > pairs) fail("more dev questions than (entity, kind) pairs");
  // Each (entity, kind, template) combination yields at most one question.
  if ((pairs - dev_questions) * 2 < train_questions) {
    fail("entities too few for " + std::to_string(train_questions) + " train and " + std::to_string(dev_questions) +
         " dev questions");
  }
  if (distractors_per_question + 1 > 2 * entities) fail("more distractors than memory entries");
  if ((qa_text > 0) && pretrain_entities == 0) fail("qa-text examples need pre-training entities");
}

std::string to_json(const WorldSpec& s) {
  json j = {{"image_size", s.image_size},
            {"colors", s.colors},
            {"shapes", s.shapes},
            {"max_count", s.max_count},
            {"entities", s.entities},
            {"train_questions", s.train_questions},
            {"dev_questions", s.dev_questions},
            {"distractors_per_question", s.distractors_per_question},
            {"question_kinds", s.question_kinds},
            {"pretrain_entities", s.pretrain_entities},
            {"cap_crawl", s.cap_crawl},
            {"cap_clean", s.cap_clean},
            {"qa_image", s.qa_image},
            {"qa_text", s.qa_text},
            {"seed", s.seed}};
  return j.dump();
}

WorldSpec world_spec_from_json(const std::string& text) {
  const json j = json::parse(text);
  if (!j.is_object()) throw std::invalid_argument("world spec: expected a JSON object");
  WorldSpec s;
  for (const auto& [key, v] : j.items()) {
    if (key == "image_size") s.image_size = v.get<std::size_t>();
    else if (key == "colors") s.colors = v.get<std::vector<std::string>>();
    else if (key == "shapes") s.shapes = v.get<std::vector<std::string>>();
    else if (key == "max_count") s.max_count = v.get<std::size_t>();
    else if (key == "entities") s.entities = v.get<std::size_t>();
    else if (key == "train_questions") s.train_questions = v.get<std::size_t>();
    else if (key == "dev_questions") s.dev_questions = v.get<std::size_t>();
    else if (key == "distractors_per_question") s.distractors_per_question = v.get<std::size_t>();
    else if (key == "question_kinds") s.question_kinds = v.get<std::vector<std::string>>();
    else if (key == "pretrain_entities") s.pretrain_entities = v.get<std::size_t>();
    else if (key == "cap_crawl") s.cap_crawl = v.get<std::size_t>();
    else if (key == "cap_clean") s.cap_clean = v.get<std::size_t>();
    else if (key == "qa_image") s.qa_image = v.get<std::size_t>();
    else if (key == "qa_text") s.qa_text = v.get<std::size_t>();
    else if (key == "seed") s.seed = v.get<std::uint64_t>();
    else throw std::invalid_argument("world spec: unknown field '" + key + "'");
  }
  s.validate();
  return s;
}

std::array<float, 3> color_rgb(const std::string& name) {
  static const std::map<std::string, std::array<float, 3>> table{
      {"red", {1.0f, 0.0f, 0.0f}},     {"green", {0.0f, 1.0f, 0.0f}},   {"blue", {0.0f, 0.0f, 1.0f}},
      {"yellow", {1.0f, 1.0f, 0.0f}},  {"cyan", {0.0f, 1.0f, 1.0f}},    {"magenta", {1.0f, 0.0f, 1.0f}},
      {"orange", {1.0f, 0.5f, 0.0f}},  {"white", {1.0f, 1.0f, 1.0f}},   {"purple", {0.5f, 0.0f, 1.0f}},
      {"gray", {0.5f, 0.5f, 0.5f}},    {"pink", {1.0f, 0.5f, 0.5f}},    {"olive", {0.5f, 0.5f, 0.0f}},
      {"teal", {0.0f, 0.5f, 0.5f}},    {"navy", {0.0f, 0.0f, 0.5f}},    {"maroon", {0.5f, 0.0f, 0.0f}},
      {"lime", {0.5f, 1.0f, 0.0f}}};
  auto it = table.find(name);
  if (it == table.end()) throw std::invalid_argument("world spec: no palette entry for color '" + name + "'");
  return it->second;
}

// ---------------------------------------------------------------------------

std::string record_to_json(const CorpusRecord& r) {
  json j = {{"id", r.id}, {"kind", r.kind}};
  if (r.image) j["image"] = image_to_json(*r.image);
  if (r.kind == "memory-entry") {
    j["text"] = r.text;
  } else if (r.kind == "pretrain-example") {
    j["text"] = r.text;
    j["question"] = r.question;
    j["answer"] = r.answer;
    j["positive_ids"] = r.positive_ids;
  } else {
    j["question"] = r.question;
    j["answer"] = r.answer;
    j["positive_ids"] = r.positive_ids;
    j["negative_ids"] = r.negative_ids;
  }
  j["source"] = r.source;
  return j.dump();
}

CorpusRecord record_from_json(const std::string& line) {
  const json j = json::parse(line);
  CorpusRecord r;
  r.id = j.at("id").get<std::string>();
  r.kind = j.at("kind").get<std::string>();
  if (r.kind != "memory-entry" && r.kind != "pretrain-example" && r.kind != "finetune-example") {
    throw std::invalid_argument("unknown record kind '" + r.kind + "'");
  }
  if (j.contains("image")) r.image = image_from_json(j.at("image"));
  r.text = j.value("text", std::string{});
  r.question = j.value("question", std::string{});
  r.answer = j.value("answer", std::string{});
  r.positive_ids = j.value("positive_ids", std::vector<std::string>{});
  r.negative_ids = j.value("negative_ids", std::vector<std::string>{});
  r.source = j.value("source", std::string{});
  return r;
}

Corpus generate_corpus(const WorldSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  Corpus corpus;

  std::vector<std::pair<std::size_t, std::size_t>> names;
  for (std::size_t a = 0; a < kFirstNames.size(); ++a)
    for (std::size_t b = 0; b < kSecondNames.size(); ++b) names.push_back({a, b});
  rng.shuffle(names.begin(), names.end());

  auto make_entity = [&](std::size_t i) {
    Entity e;
    e.first = names[i].first;
    e.second = names[i].second;
    e.name = kFirstNames[e.first] + " " + kSecondNames[e.second];
    e.visual = draw(spec, rng);
    e.place = rng.below(kPlaces.size());
    return e;
  };
  std::vector<Entity> entities;
  for (std::size_t i = 0; i < spec.entities; ++i) entities.push_back(make_entity(i));

  // Memory: image-text pair and passage per entity.
  auto image_id = [](std::size_t i) { return pad_id("e", i) + "-img"; };
  auto passage_id = [](std::size_t i) { return pad_id("e", i) + "-psg"; };
  for (std::size_t i = 0; i < entities.size(); ++i) {
    const auto& e = entities[i];
    corpus.memory.push_back({image_id(i), "memory-entry", e.visual.image, "a picture of " + e.name, "", "", {}, {},
                             to_string(EntryKind::image_text_pair)});
    corpus.memory.push_back({passage_id(i), "memory-entry", std::nullopt,
                             e.name + " is located in " + kPlaces[e.place] + " .", "", "", {}, {},
                             to_string(EntryKind::passage)});
  }

  // Questions: held-out (entity, kind) pairs for dev, paraphrases for train.
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i < entities.size(); ++i)
    for (std::size_t k = 0; k < spec.question_kinds.size(); ++k) pairs.push_back({i, k});
  rng.shuffle(pairs.begin(), pairs.end());

  auto make_question = [&](const std::string& id, std::size_t ent, std::size_t kind_index, std::size_t tmpl) {
    const auto& e = entities[ent];
    const auto& kind = spec.question_kinds[kind_index];
    const bool visual = kind != "location";
    const std::string positive = visual ? image_id(ent) : passage_id(ent);
    std::vector<std::string> negatives{visual ? passage_id(ent) : image_id(ent)};
    // Same-modality entries whose names share a word but differ in the asked attribute.
    std::vector<std::size_t> similar, others;
    for (std::size_t j = 0; j < entities.size(); ++j) {
      if (j == ent) continue;
      const bool shares = entities[j].first == e.first || entities[j].second == e.second;
      if (shares && attribute(spec, entities[j], kind) != attribute(spec, e, kind)) similar.push_back(j);
      else others.push_back(j);
    }
    rng.shuffle(similar.begin(), similar.end());
    rng.shuffle(others.begin(), others.end());
    for (std::size_t j : similar) {
      if (negatives.size() >= spec.distractors_per_question) break;
      negatives.push_back(visual ? image_id(j) : passage_id(j));
    }
    for (std::size_t j : others) {
      if (negatives.size() >= spec.distractors_per_question) break;
      negatives.push_back(rng.below(2) == 0 ? image_id(j) : passage_id(j));
    }
    negatives.resize(std::min(negatives.size(), spec.distractors_per_question));
    return CorpusRecord{id,
                        "finetune-example",
                        std::nullopt,
                        "",
                        fill(kTemplates.at(kind)[tmpl], e.name),
                        attribute(spec, e, kind),
                        {positive},
                        negatives,
                        kind};
  };

  for (std::size_t q = 0; q < spec.dev_questions; ++q) {
    const auto [ent, kind] = pairs[q];
    corpus.dev.push_back(make_question(pad_id("dev", q), ent, kind, rng.below(2)));
  }
  std::vector<std::array<std::size_t, 3>> train_slots;
  for (std::size_t p = spec.dev_questions; p < pairs.size(); ++p)
    for (std::size_t t = 0; t < 2; ++t) train_slots.push_back({pairs[p].first, pairs[p].second, t});
  rng.shuffle(train_slots.begin(), train_slots.end());
  for (std::size_t q = 0; q < spec.train_questions; ++q) {
    const auto& s = train_slots[q];
    corpus.train.push_back(make_question(pad_id("train", q), s[0], s[1], s[2]));
  }

  // Pre-training sources.
  auto pretrain = [&](const std::string& id, Source source, std::optional<PatchGrid> image, std::string prompt,
                      std::string target, std::string memory_text) {
    corpus.pretrain.push_back({id, "pretrain-example", std::move(image), memory_text, std::move(prompt),
                               std::move(target), {"txt:" + memory_text}, {}, to_string(source)});
  };
  for (std::size_t i = 0; i < spec.cap_crawl; ++i) {
    auto v = draw(spec, rng);
    auto caption = caption_of(spec, v);
    const auto noise = rng.below(3);
    for (std::size_t n = 0; n < noise; ++n) {
      const auto& w = kNoise[rng.below(kNoise.size())];
      caption = rng.below(2) == 0 ? w + " " + caption : caption + " " + w;
    }
    pretrain(pad_id("crawl", i), Source::cap_crawl, v.image, kCaptionPrompt, caption, caption);
  }
  for (std::size_t i = 0; i < spec.cap_clean; ++i) {
    auto v = draw(spec, rng);
    const auto caption = caption_of(spec, v);
    pretrain(pad_id("clean", i), Source::cap_clean, v.image, kCaptionPrompt, caption, caption);
  }
  std::vector<std::string> visual_kinds{"color", "shape", "count"};
  for (std::size_t i = 0; i < spec.qa_image; ++i) {
    auto v = draw(spec, rng);
    const auto& kind = visual_kinds[rng.below(visual_kinds.size())];
    Entity holder;
    holder.visual = v;
    pretrain(pad_id("vqa", i), Source::qa_image, v.image, kPretrainVisual.at(kind), attribute(spec, holder, kind),
             caption_of(spec, v));
  }
  std::vector<Entity> pretrain_entities;
  for (std::size_t i = 0; i < spec.pretrain_entities; ++i) pretrain_entities.push_back(make_entity(spec.entities + i));
  for (std::size_t i = 0; i < spec.qa_text; ++i) {
    const auto& e = pretrain_entities[i % pretrain_entities.size()];
    const auto tmpl = (i / pretrain_entities.size()) % 2;
    pretrain(pad_id("tqa", i), Source::qa_text, std::nullopt, fill(kTemplates.at("location")[tmpl], e.name),
             kPlaces[e.place], e.name + " is located in " + kPlaces[e.place] + " .");
  }

  check_corpus(corpus);
  return corpus;
}

void write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_jsonl(dir / "memory.jsonl", corpus.memory);
  write_jsonl(dir / "pretrain.jsonl", corpus.pretrain);
  write_jsonl(dir / "train.jsonl", corpus.train);
  write_jsonl(dir / "dev.jsonl", corpus.dev);
}

Corpus read_corpus(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw std::invalid_argument("corpus directory not found: " + dir.string());
  Corpus c;
  c.memory = read_jsonl(dir / "memory.jsonl");
  c.pretrain = read_jsonl(dir / "pretrain.jsonl");
  c.train = read_jsonl(dir / "train.jsonl");
  c.dev = read_jsonl(dir / "dev.jsonl");
  check_corpus(c);
  return c;
}

void check_corpus(const Corpus& corpus) {
  std::map<std::string, const CorpusRecord*> memory;
  for (const auto& r : corpus.memory) {
    if (r.kind != "memory-entry") throw std::invalid_argument("memory.jsonl: record '" + r.id + "' has kind " + r.kind);
    if (!memory.emplace(r.id, &r).second) throw std::invalid_argument("duplicate memory id '" + r.id + "'");
  }
  auto words = [](const std::string& s) {
    auto t = tokenize(s);
    return std::set<std::string>(t.begin(), t.end());
  };
  for (const auto* split : {&corpus.train, &corpus.dev}) {
    for (const auto& q : *split) {
      if (q.kind != "finetune-example") throw std::invalid_argument("question '" + q.id + "' has kind " + q.kind);
      if (q.positive_ids.empty()) throw std::invalid_argument("question '" + q.id + "' has no positives");
      std::set<std::string> pos(q.positive_ids.begin(), q.positive_ids.end());
      for (const auto* ids : {&q.positive_ids, &q.negative_ids}) {
        for (const auto& id : *ids) {
          if (!memory.count(id)) throw std::invalid_argument("question '" + q.id + "' references unknown id '" + id + "'");
        }
      }
      for (const auto& id : q.negative_ids)
        if (pos.count(id)) throw std::invalid_argument("question '" + q.id + "' lists '" + id + "' as both");
      const auto question_words = words(q.question);
      for (const auto& a : tokenize(q.answer)) {
        if (question_words.count(a)) throw std::invalid_argument("answer leaks into question '" + q.id + "'");
        for (const auto& id : q.positive_ids) {
          const auto& m = *memory.at(id);
          if (m.source == to_string(EntryKind::image_text_pair) && words(m.text).count(a)) {
            throw std::invalid_argument("answer leaks into caption of '" + id + "'");
          }
        }
      }
    }
  }
  for (const auto& p : corpus.pretrain) {
    if (p.kind != "pretrain-example") throw std::invalid_argument("pretrain record '" + p.id + "' has kind " + p.kind);
    const auto source = source_from_string(p.source);
    if (p.positive_ids.size() != 1) throw std::invalid_argument("pretrain record '" + p.id + "' needs one memory id");
    if (source == Source::qa_text && p.image) throw std::invalid_argument("qa-text record '" + p.id + "' has an image");
    if (is_caption_source(source) && p.answer != p.text) {
      throw std::invalid_argument("caption record '" + p.id + "' target differs from its memory text");
    }
  }
}

std::optional<std::string> oracle_visual_answer(const WorldSpec& spec, const PatchGrid& image,
                                                const std::string& kind) {
  const std::size_t cell = spec.image_size / kGridCells, box = cell - 1;
  std::size_t count = 0;
  std::optional<std::size_t> shape, color;
  for (std::size_t cy = 0; cy < kGridCells; ++cy) {
    for (std::size_t cx = 0; cx < kGridCells; ++cx) {
      bool any = false;
      for (std::size_t y = 0; y < box && !any; ++y)
        for (std::size_t x = 0; x < box && !any; ++x)
          for (std::size_t c = 0; c < kImageChannels; ++c)
            if (image.at(cy * cell + y, cx * cell + x, c) > 0.0f) any = true;
      if (!any) continue;
      ++count;
      for (std::size_t s = 0; s < spec.shapes.size() && !shape; ++s) {
        bool match = true;
        for (std::size_t y = 0; y < box && match; ++y)
          for (std::size_t x = 0; x < box && match; ++x) {
            const bool lit = image.at(cy * cell + y, cx * cell + x, 0) > 0.0f ||
                             image.at(cy * cell + y, cx * cell + x, 1) > 0.0f ||
                             image.at(cy * cell + y, cx * cell + x, 2) > 0.0f;
            match = lit == in_shape(spec.shapes[s], y, x, box);
          }
        if (match) shape = s;
      }
      for (std::size_t y = 0; y < box && !color; ++y)
        for (std::size_t x = 0; x < box && !color; ++x)
          for (std::size_t k = 0; k < spec.colors.size(); ++k) {
            const auto rgb = color_rgb(spec.colors[k]);
            if (image.at(cy * cell + y, cx * cell + x, 0) == rgb[0] &&
                image.at(cy * cell + y, cx * cell + x, 1) == rgb[1] &&
                image.at(cy * cell + y, cx * cell + x, 2) == rgb[2]) {
              color = k;
              break;
            }
          }
    }
  }
  if (kind == "count") return count ? std::optional(kCountWords[count - 1]) : std::nullopt;
  if (kind == "shape") return shape ? std::optional(spec.shapes[*shape]) : std::nullopt;
  if (kind == "color") return color ? std::optional(spec.colors[*color]) : std::nullopt;
  return std::nullopt;
}

// ---------------------------------------------------------------------------

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string word;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!word.empty()) out.push_back(std::move(word));
      word.clear();
    } else {
      word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!word.empty()) out.push_back(std::move(word));
  return out;
}

Vocab Vocab::build(const Corpus& corpus) {
  std::map<std::string, std::size_t> freq;
  auto count = [&](const std::string& s) {
    for (const auto& w : tokenize(s)) ++freq[w];
  };
  for (const auto* split : {&corpus.memory, &corpus.pretrain, &corpus.train, &corpus.dev}) {
    for (const auto& r : *split) {
      count(r.text);
      count(r.question);
      count(r.answer);
    }
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> words{"<pad>", "<s>", "</s>", "<unk>"};
  for (const auto& [w, _] : ranked) words.push_back(w);
  return from_words(std::move(words));
}

Vocab Vocab::from_words(std::vector<std::string> words) {
  if (words.size() < 4) throw std::invalid_argument("vocab: reserved tokens missing");
  Vocab v;
  v.words_ = std::move(words);
  for (std::size_t i = 0; i < v.words_.size(); ++i) {
    if (!v.ids_.emplace(v.words_[i], static_cast<TokenId>(i)).second) {
      throw std::invalid_argument("vocab: duplicate word '" + v.words_[i] + "'");
    }
  }
  return v;
}

TokenId Vocab::id(const std::string& word) const {
  auto it = ids_.find(word);
  return it == ids_.end() ? kUnkId : it->second;
}

const std::string& Vocab::word(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) throw std::out_of_range("vocab: id out of range");
  return words_[static_cast<std::size_t>(id)];
}

TokenSeq Vocab::encode(const std::string& text) const {
  TokenSeq out;
  for (const auto& w : tokenize(text)) out.push_back(id(w));
  return out;
}

std::string Vocab::decode(const TokenSeq& tokens) const {
  std::string out;
  for (auto t : tokens) {
    if (t <= kUnkId || static_cast<std::size_t>(t) >= words_.size()) continue;
    if (!out.empty()) out += ' ';
    out += word(t);
  }
  return out;
}

Dataset to_dataset(const Corpus& corpus, const Vocab& vocab) {
  Dataset d;
  for (const auto& r : corpus.memory) {
    d.store.add(MemoryEntry{r.id, r.image, vocab.encode(r.text), entry_kind_from_string(r.source)});
  }
  for (const auto& r : corpus.pretrain) {
    d.pretrain.push_back(PretrainExample{r.id, source_from_string(r.source), r.image, vocab.encode(r.question),
                                         vocab.encode(r.answer), vocab.encode(r.text), r.positive_ids.at(0)});
  }
  auto questions = [&](const std::vector<CorpusRecord>& records) {
    std::vector<FinetuneExample> out;
    for (const auto& r : records) {
      out.push_back(FinetuneExample{r.id, vocab.encode(r.question), r.image, vocab.encode(r.answer), r.positive_ids,
                                    r.negative_ids});
    }
    return out;
  };
  d.train = questions(corpus.train);
  d.dev = questions(corpus.dev);
  return d;
}

}  // namespace murag
