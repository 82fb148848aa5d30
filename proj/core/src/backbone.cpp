#include "murag/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "json.hpp"
#include "murag/rng.hpp"

namespace murag {

namespace {

using json = nlohmann::json;

constexpr const char* kConfigFields[] = {"d_model",    "encoder_layers", "decoder_layers", "heads",
                                         "ff_width",   "patch_size",     "image_size",     "vocab_size",
                                         "num_buckets", "max_distance"};

std::vector<double> log_softmax(std::span<const double> logits) {
  const double peak = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double v : logits) z += std::exp(v - peak);
  const double lse = peak + std::log(z);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

template <typename T>
std::vector<double> log_softmax(const BasicTensor<T>& logits) {
  std::vector<double> wide(logits.data().begin(), logits.data().end());
  return log_softmax(std::span<const double>(wide));
}

}  // namespace

// ---------------------------------------------------------------------------
// ModelConfig

ModelConfig ModelConfig::toy() { return ModelConfig{}; }

ModelConfig ModelConfig::paper_base() {
  ModelConfig c;
  c.d_model = 768;
  c.encoder_layers = 12;
  c.decoder_layers = 12;
  c.heads = 12;
  c.ff_width = 2048;
  c.patch_size = 16;
  c.image_size = 224;
  c.vocab_size = 32128;
  c.num_buckets = 32;
  c.max_distance = 128;
  return c;
}

ModelConfig ModelConfig::preset(const std::string& name) {
  if (name == "toy") return toy();
  if (name == "paper-base") return paper_base();
  throw std::invalid_argument("unknown model preset '" + name + "' (expected toy or paper-base)");
}

std::size_t ModelConfig::patches_per_image() const {
  const auto side = image_size / patch_size;
  return side * side;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("model config: " + what); };
  if (d_model == 0 || heads == 0 || ff_width == 0 || patch_size == 0 || image_size == 0 || vocab_size == 0) {
    fail("all sizes must be positive");
  }
  if (encoder_layers == 0 || decoder_layers == 0) fail("need at least one encoder and one decoder layer");
  if (d_model % heads != 0) fail("d_model " + std::to_string(d_model) + " not divisible by heads " + std::to_string(heads));
  if (image_size % patch_size != 0) fail("image_size not divisible by patch_size");
  if (vocab_size <= static_cast<std::size_t>(kUnkId)) fail("vocab_size must cover the reserved ids");
  if (num_buckets < 4) fail("num_buckets must be at least 4");
  if (max_distance <= num_buckets / 4) fail("max_distance must exceed the exact-bucket range");
}

std::string to_json(const ModelConfig& c) {
  json j = {{"d_model", c.d_model},       {"encoder_layers", c.encoder_layers},
            {"decoder_layers", c.decoder_layers}, {"heads", c.heads},
            {"ff_width", c.ff_width},     {"patch_size", c.patch_size},
            {"image_size", c.image_size}, {"vocab_size", c.vocab_size},
            {"num_buckets", c.num_buckets}, {"max_distance", c.max_distance}};
  return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
  const json j = json::parse(text);
  if (!j.is_object()) throw std::invalid_argument("model config: expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(std::begin(kConfigFields), std::end(kConfigFields), key) == std::end(kConfigFields)) {
      throw std::invalid_argument("model config: unknown field '" + key + "'");
    }
  }
  auto get = [&](const char* key) {
    if (!j.contains(key)) throw std::invalid_argument(std::string("model config: missing field '") + key + "'");
    return j.at(key).get<std::size_t>();
  };
  ModelConfig c;
  c.d_model = get("d_model");
  c.encoder_layers = get("encoder_layers");
  c.decoder_layers = get("decoder_layers");
  c.heads = get("heads");
  c.ff_width = get("ff_width");
  c.patch_size = get("patch_size");
  c.image_size = get("image_size");
  c.vocab_size = get("vocab_size");
  c.num_buckets = get("num_buckets");
  c.max_distance = get("max_distance");
  c.validate();
  return c;
}

PatchGrid PatchGrid::zeros(std::size_t height, std::size_t width, std::size_t channels) {
  return PatchGrid{height, width, channels, std::vector<float>(height * width * channels, 0.0f)};
}

// ---------------------------------------------------------------------------
// Backbone

template <typename T>
Backbone<T>::Backbone(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const std::size_t d = config_.d_model;

  auto tensor = [&](const std::string& name, Shape shape, double stddev, double fill = 0.0) {
    const auto n = shape_size(shape);
    std::vector<T> values(n);
    for (auto& v : values) v = static_cast<T>(stddev > 0.0 ? rng.normal() * stddev : fill);
    auto t = BasicTensor<T>::from(std::move(shape), std::move(values), true);
    registry_.push_back({name, t});
    return t;
  };
  auto linear = [&](const std::string& name, std::size_t in, std::size_t out) {
    Linear l;
    l.weight = tensor(name + ".w", {in, out}, 1.0 / std::sqrt(static_cast<double>(in)));
    l.bias = tensor(name + ".b", {out}, 0.0);
    return l;
  };
  auto norm = [&](const std::string& name) {
    Norm n;
    n.gain = tensor(name + ".g", {d}, 0.0, 1.0);
    n.bias = tensor(name + ".b", {d}, 0.0);
    return n;
  };
  auto attention = [&](const std::string& name) {
    return Attention{linear(name + ".q", d, d), linear(name + ".k", d, d), linear(name + ".v", d, d),
                     linear(name + ".o", d, d)};
  };
  auto feed_forward = [&](const std::string& name) {
    return FeedForward{linear(name + ".in", d, config_.ff_width), linear(name + ".out", config_.ff_width, d)};
  };

  patch_ = linear("embed.patch", config_.patch_dim(), d);
  token_table_ = tensor("embed.token", {config_.vocab_size, d}, 1.0);
  cls_ = tensor("embed.cls", {1, d}, 1.0);
  encoder_bias_ = tensor("enc.rel_bias", {config_.num_buckets, config_.heads}, 0.0);
  for (std::size_t i = 0; i < config_.encoder_layers; ++i) {
    const auto p = "enc." + std::to_string(i);
    encoder_.push_back({norm(p + ".ln1"), attention(p + ".attn"), norm(p + ".ln2"), feed_forward(p + ".ff")});
  }
  encoder_norm_ = norm("enc.ln");
  decoder_bias_ = tensor("dec.rel_bias", {config_.num_buckets, config_.heads}, 0.0);
  for (std::size_t i = 0; i < config_.decoder_layers; ++i) {
    const auto p = "dec." + std::to_string(i);
    decoder_.push_back({norm(p + ".ln1"), attention(p + ".self"), norm(p + ".ln2"), attention(p + ".cross"),
                        norm(p + ".ln3"), feed_forward(p + ".ff")});
  }
  decoder_norm_ = norm("dec.ln");
  output_ = tensor("dec.out.w", {d, config_.vocab_size}, 1.0 / std::sqrt(static_cast<double>(d)));
}

template <typename T>
Backbone<T> Backbone<T>::clone() const {
  Backbone<T> copy(config_, 0);
  for (std::size_t i = 0; i < registry_.size(); ++i) {
    const auto src = registry_[i].tensor.data();
    auto dst = copy.registry_[i].tensor.mutable_data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  return copy;
}

template <typename T>
std::int32_t Backbone<T>::relative_bucket(std::int64_t relative, bool bidirectional, std::size_t num_buckets,
                                          std::size_t max_distance) {
  std::int64_t buckets = static_cast<std::int64_t>(num_buckets);
  std::int64_t base = 0;
  std::int64_t n = -relative;
  if (bidirectional) {
    buckets /= 2;
    if (n < 0) base += buckets;
    n = n < 0 ? -n : n;
  } else {
    n = std::max<std::int64_t>(n, 0);
  }
  const std::int64_t max_exact = buckets / 2;
  if (n < max_exact) return static_cast<std::int32_t>(base + n);
  const double scaled = std::log(static_cast<double>(n) / static_cast<double>(max_exact)) /
                        std::log(static_cast<double>(max_distance) / static_cast<double>(max_exact)) *
                        static_cast<double>(buckets - max_exact);
  const std::int64_t large = std::min<std::int64_t>(max_exact + static_cast<std::int64_t>(scaled), buckets - 1);
  return static_cast<std::int32_t>(base + large);
}

template <typename T>
BasicTensor<T> Backbone<T>::linear(const Linear& layer, const BasicTensor<T>& x) const {
  return add_bias(matmul(x, layer.weight), layer.bias);
}

template <typename T>
BasicTensor<T> Backbone<T>::norm(const Norm& layer, const BasicTensor<T>& x) const {
  return layer_norm(x, layer.gain, layer.bias, T(1e-6));
}

template <typename T>
BasicTensor<T> Backbone<T>::feed_forward(const FeedForward& layer, const BasicTensor<T>& x) const {
  return linear(layer.out, gelu(linear(layer.in, x)));
}

template <typename T>
BasicTensor<T> Backbone<T>::self_bias(const BasicTensor<T>& table, std::size_t queries, std::size_t keys,
                                      std::size_t first_query, bool bidirectional) const {
  std::vector<std::int32_t> buckets(queries * keys);
  for (std::size_t i = 0; i < queries; ++i) {
    const auto qpos = static_cast<std::int64_t>(first_query + i);
    for (std::size_t j = 0; j < keys; ++j) {
      buckets[i * keys + j] = relative_bucket(static_cast<std::int64_t>(j) - qpos, bidirectional,
                                              config_.num_buckets, config_.max_distance);
    }
  }
  return bias_lookup(table, std::span<const std::int32_t>(buckets), queries, keys);
}

template <typename T>
BasicTensor<T> Backbone<T>::patch_embed(const PatchGrid& image) const {
  const std::size_t p = config_.patch_size;
  if (image.channels != kImageChannels) {
    throw DimensionError("patch_embed: expected " + std::to_string(kImageChannels) + " channels, got " +
                         std::to_string(image.channels));
  }
  if (image.height == 0 || image.width == 0 || image.height % p != 0 || image.width % p != 0) {
    throw DimensionError("patch_embed: image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                         " is not divisible into " + std::to_string(p) + "x" + std::to_string(p) + " patches");
  }
  if (image.values.size() != image.height * image.width * image.channels) {
    throw DimensionError("patch_embed: value count does not match image extents");
  }
  for (float v : image.values) {
    if (!(v >= 0.0f && v <= 1.0f)) throw std::invalid_argument("patch_embed: intensity outside [0,1]");
  }
  const std::size_t rows = (image.height / p) * (image.width / p);
  const std::size_t width = config_.patch_dim();
  std::vector<T> flat(rows * width);
  std::size_t r = 0;
  for (std::size_t py = 0; py < image.height / p; ++py) {
    for (std::size_t px = 0; px < image.width / p; ++px, ++r) {
      std::size_t col = 0;
      for (std::size_t dy = 0; dy < p; ++dy)
        for (std::size_t dx = 0; dx < p; ++dx)
          for (std::size_t c = 0; c < kImageChannels; ++c)
            flat[r * width + col++] = static_cast<T>(image.at(py * p + dy, px * p + dx, c));
    }
  }
  return linear(patch_, BasicTensor<T>::from({rows, width}, std::move(flat)));
}

template <typename T>
BasicTensor<T> Backbone<T>::token_embed(const TokenSeq& text) const {
  if (text.size() > kMaxTextTokens) {
    throw std::invalid_argument("token_embed: " + std::to_string(text.size()) + " tokens exceed the maximum of " +
                                std::to_string(kMaxTextTokens));
  }
  return embedding(token_table_, std::span<const std::int32_t>(text));
}

template <typename T>
BasicTensor<T> Backbone<T>::assemble(const MultimodalInput& input) const {
  std::vector<BasicTensor<T>> parts{cls_};
  for (const auto& segment : input.segments) {
    if (segment.image) parts.push_back(patch_embed(*segment.image));
    if (!segment.text.empty()) parts.push_back(token_embed(segment.text));
  }
  if (parts.size() == 1) throw std::invalid_argument("assemble: every segment is empty");
  auto rows = concat_rows(std::span<const BasicTensor<T>>(parts));
  if (rows.dim(0) > kMaxEncoderRows) {
    throw std::invalid_argument("assemble: " + std::to_string(rows.dim(0)) + " rows exceed the maximum of " +
                                std::to_string(kMaxEncoderRows));
  }
  return rows;
}

template <typename T>
EncoderOutput<T> Backbone<T>::encode(const BasicTensor<T>& rows, std::vector<AttentionMap>* probes) const {
  if (rows.rank() != 2 || rows.dim(0) == 0 || rows.dim(1) != config_.d_model) {
    throw DimensionError("encode: expected [n>=1, " + std::to_string(config_.d_model) + "] rows, got " +
                         shape_string(rows.shape()));
  }
  const std::size_t n = rows.dim(0);
  const auto bias = self_bias(encoder_bias_, n, n, 0, true);
  if (probes != nullptr) probes->assign(encoder_.size(), {});
  auto x = rows;
  for (std::size_t l = 0; l < encoder_.size(); ++l) {
    const auto& layer = encoder_[l];
    auto h = norm(layer.norm1, x);
    AttentionOptions opts{config_.heads, false, probes ? &(*probes)[l] : nullptr};
    auto a = attention(linear(layer.self.q, h), linear(layer.self.k, h), linear(layer.self.v, h), bias, opts);
    x = add(x, linear(layer.self.o, a));
    x = add(x, feed_forward(layer.ff, norm(layer.norm2, x)));
  }
  auto out = norm(encoder_norm_, x);
  auto cls = slice_rows(out, 0, 1);
  return {out, cls};
}

template <typename T>
BasicTensor<T> Backbone<T>::decode_logits(const EncoderOutput<T>& encoded, const TokenSeq& decoder_input) const {
  if (decoder_input.empty()) throw std::invalid_argument("decode: empty decoder input");
  if (decoder_input.size() > kMaxTextTokens + 1) {
    throw std::invalid_argument("decode: prefix of " + std::to_string(decoder_input.size()) +
                                " tokens exceeds the maximum of " + std::to_string(kMaxTextTokens + 1));
  }
  const std::size_t len = decoder_input.size();
  auto x = embedding(token_table_, std::span<const std::int32_t>(decoder_input));
  const auto bias = self_bias(decoder_bias_, len, len, 0, false);
  const AttentionOptions causal{config_.heads, true, nullptr};
  const AttentionOptions open{config_.heads, false, nullptr};
  for (const auto& layer : decoder_) {
    auto h = norm(layer.norm1, x);
    auto a = attention(linear(layer.self.q, h), linear(layer.self.k, h), linear(layer.self.v, h), bias, causal);
    x = add(x, linear(layer.self.o, a));
    h = norm(layer.norm2, x);
    auto c = attention(linear(layer.cross.q, h), linear(layer.cross.k, encoded.rows),
                       linear(layer.cross.v, encoded.rows), BasicTensor<T>{}, open);
    x = add(x, linear(layer.cross.o, c));
    x = add(x, feed_forward(layer.ff, norm(layer.norm3, x)));
  }
  return matmul(norm(decoder_norm_, x), output_);
}

template <typename T>
BasicTensor<T> Backbone<T>::decode_step(const EncoderOutput<T>& encoded, const TokenSeq& prefix) const {
  if (prefix.empty() || prefix.front() != kStartId) {
    throw std::invalid_argument("decode_step: prefix must begin with the start token");
  }
  if (prefix.size() > kMaxTextTokens + 1) {
    throw std::invalid_argument("decode_step: prefix of " + std::to_string(prefix.size()) +
                                " tokens exceeds the maximum of " + std::to_string(kMaxTextTokens + 1));
  }
  auto state = start_decoding(encoded);
  BasicTensor<T> logits;
  for (auto token : prefix) logits = advance(state, token);
  return logits;
}

template <typename T>
DecoderState<T> Backbone<T>::start_decoding(const EncoderOutput<T>& encoded) const {
  DecoderState<T> state;
  for (const auto& layer : decoder_) {
    state.self_keys.emplace_back();
    state.self_values.emplace_back();
    state.cross_keys.push_back(linear(layer.cross.k, encoded.rows));
    state.cross_values.push_back(linear(layer.cross.v, encoded.rows));
  }
  return state;
}

template <typename T>
BasicTensor<T> Backbone<T>::advance(DecoderState<T>& state, TokenId token) const {
  if (state.position >= kMaxTextTokens + 1) throw std::invalid_argument("decode: maximum length reached");
  const TokenSeq one{token};
  auto x = embedding(token_table_, std::span<const std::int32_t>(one));
  const std::size_t t = state.position;
  const auto bias = self_bias(decoder_bias_, 1, t + 1, t, false);
  const AttentionOptions open{config_.heads, false, nullptr};
  for (std::size_t l = 0; l < decoder_.size(); ++l) {
    const auto& layer = decoder_[l];
    auto h = norm(layer.norm1, x);
    auto k = linear(layer.self.k, h);
    auto v = linear(layer.self.v, h);
    if (t == 0) {
      state.self_keys[l] = k;
      state.self_values[l] = v;
    } else {
      const BasicTensor<T> keys[] = {state.self_keys[l], k};
      const BasicTensor<T> values[] = {state.self_values[l], v};
      state.self_keys[l] = concat_rows(std::span<const BasicTensor<T>>(keys));
      state.self_values[l] = concat_rows(std::span<const BasicTensor<T>>(values));
    }
    auto a = attention(linear(layer.self.q, h), state.self_keys[l], state.self_values[l], bias, open);
    x = add(x, linear(layer.self.o, a));
    h = norm(layer.norm2, x);
    auto c = attention(linear(layer.cross.q, h), state.cross_keys[l], state.cross_values[l], BasicTensor<T>{}, open);
    x = add(x, linear(layer.cross.o, c));
    x = add(x, feed_forward(layer.ff, norm(layer.norm3, x)));
  }
  ++state.position;
  return reshape(matmul(norm(decoder_norm_, x), output_), {config_.vocab_size});
}

template <typename T>
ParameterList<T> Backbone<T>::parameters() const {
  return registry_;
}

template <typename T>
std::size_t Backbone<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : registry_) n += p.tensor.size();
  return n;
}

template <typename T>
void Backbone<T>::load(const Checkpoint& checkpoint) {
  auto params = parameters();
  restore_checkpoint(checkpoint, params);
}

template <typename T>
Digest Backbone<T>::fingerprint() const {
  return sha256(serialize_checkpoint(to_checkpoint()));
}

// ---------------------------------------------------------------------------
// Generation

template <typename T>
Hypothesis generate_greedy(const Backbone<T>& model, const EncoderOutput<T>& encoded, std::size_t max_len) {
  TapePause pause;
  Hypothesis out;
  auto state = model.start_decoding(encoded);
  auto logits = model.advance(state, kStartId);
  for (std::size_t step = 0; step < max_len; ++step) {
    const auto lp = log_softmax(logits);
    std::size_t best = 0;
    for (std::size_t i = 1; i < lp.size(); ++i)
      if (lp[i] > lp[best]) best = i;
    out.log_prob += lp[best];
    const auto token = static_cast<TokenId>(best);
    if (token == kEndId) {
      out.finished = true;
      break;
    }
    out.tokens.push_back(token);
    if (step + 1 < max_len) logits = model.advance(state, token);
  }
  return out;
}

template <typename T>
Hypothesis generate_beam(const Backbone<T>& model, const EncoderOutput<T>& encoded, std::size_t beam_width,
                         std::size_t max_len) {
  if (beam_width == 0) throw std::invalid_argument("generate_beam: beam width must be at least 1");
  TapePause pause;
  struct Beam {
    Hypothesis hyp;
    DecoderState<T> state;
    std::vector<double> log_probs;
  };
  struct Candidate {
    double score;
    std::size_t beam;
    TokenId token;  // kEndId for carried finished beams too
  };

  std::vector<Beam> beams(1);
  beams[0].state = model.start_decoding(encoded);
  beams[0].log_probs = log_softmax(model.advance(beams[0].state, kStartId));

  // Lexicographic order over (beam tokens..., token); a finished beam's own
  // sequence already ends with kEndId implicitly, so its token is kEndId.
  auto sequence_less = [&](const Candidate& a, const Candidate& b) {
    const auto& ta = beams[a.beam].hyp.tokens;
    const auto& tb = beams[b.beam].hyp.tokens;
    const std::size_t la = ta.size() + 1, lb = tb.size() + 1;
    for (std::size_t i = 0; i < std::min(la, lb); ++i) {
      const TokenId x = i < ta.size() ? ta[i] : a.token;
      const TokenId y = i < tb.size() ? tb[i] : b.token;
      if (x != y) return x < y;
    }
    return la < lb;
  };

  for (std::size_t step = 0; step < max_len; ++step) {
    std::vector<Candidate> candidates;
    for (std::size_t b = 0; b < beams.size(); ++b) {
      if (beams[b].hyp.finished) {
        candidates.push_back({beams[b].hyp.log_prob, b, kEndId});
        continue;
      }
      const auto& lp = beams[b].log_probs;
      for (std::size_t tok = 0; tok < lp.size(); ++tok) {
        candidates.push_back({beams[b].hyp.log_prob + lp[tok], b, static_cast<TokenId>(tok)});
      }
    }
    const std::size_t keep = std::min(beam_width, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                      [&](const Candidate& a, const Candidate& b) {
                        if (a.score != b.score) return a.score > b.score;
                        return sequence_less(a, b);
                      });

    std::vector<Beam> next;
    bool all_finished = true;
    for (std::size_t i = 0; i < keep; ++i) {
      const auto& c = candidates[i];
      const auto& parent = beams[c.beam];
      Beam beam;
      beam.hyp = parent.hyp;
      if (parent.hyp.finished) {
        next.push_back(std::move(beam));
        continue;
      }
      beam.hyp.log_prob = c.score;
      if (c.token == kEndId) {
        beam.hyp.finished = true;
      } else {
        beam.hyp.tokens.push_back(c.token);
        all_finished = false;
        if (step + 1 < max_len) {
          beam.state = parent.state;
          beam.log_probs = log_softmax(model.advance(beam.state, c.token));
        }
      }
      next.push_back(std::move(beam));
    }
    beams = std::move(next);
    if (all_finished) break;
  }
  return beams.front().hyp;
}

template <typename T>
double sequence_log_prob(const Backbone<T>& model, const EncoderOutput<T>& encoded, const TokenSeq& tokens,
                         bool with_end) {
  TapePause pause;
  auto state = model.start_decoding(encoded);
  auto lp = log_softmax(model.advance(state, kStartId));
  double total = 0.0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    total += lp.at(static_cast<std::size_t>(tokens[i]));
    if (i + 1 < tokens.size() || with_end) lp = log_softmax(model.advance(state, tokens[i]));
  }
  if (with_end) total += lp[kEndId];
  return total;
}

template class Backbone<float>;
template class Backbone<double>;
template Hypothesis generate_greedy(const Backbone<float>&, const EncoderOutput<float>&, std::size_t);
template Hypothesis generate_greedy(const Backbone<double>&, const EncoderOutput<double>&, std::size_t);
template Hypothesis generate_beam(const Backbone<float>&, const EncoderOutput<float>&, std::size_t, std::size_t);
template Hypothesis generate_beam(const Backbone<double>&, const EncoderOutput<double>&, std::size_t, std::size_t);
template double sequence_log_prob(const Backbone<float>&, const EncoderOutput<float>&, const TokenSeq&, bool);
template double sequence_log_prob(const Backbone<double>&, const EncoderOutput<double>&, const TokenSeq&, bool);

}  // namespace murag
