#pragma once

// Shared multimodal encoder and text decoder.
//
// Inputs are ordered segments of (optional image, optional text). The encoder
// sees one sequence: a learned [CLS] row, then for each segment its patch rows
// followed by its token rows. All rows attend to all rows, with a T5-style
// bucketed relative position bias. Row 0 of the output is the pooled vector
// used for retrieval. The decoder is causal over its own prefix and attends to
// every encoder row.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "murag/checkpoint.hpp"
#include "murag/optim.hpp"
#include "murag/tensor.hpp"

namespace murag {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kStartId = 1;
inline constexpr TokenId kEndId = 2;
inline constexpr TokenId kUnkId = 3;

inline constexpr std::size_t kImageChannels = 3;
inline constexpr std::size_t kMaxTextTokens = 64;
inline constexpr std::size_t kMaxEncoderRows = 1024;

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t encoder_layers = 2;
  std::size_t decoder_layers = 2;
  std::size_t heads = 4;
  std::size_t ff_width = 256;
  std::size_t patch_size = 4;
  std::size_t image_size = 16;
  std::size_t vocab_size = 512;
  std::size_t num_buckets = 32;
  std::size_t max_distance = 128;

  static ModelConfig toy();
  static ModelConfig paper_base();
  static ModelConfig preset(const std::string& name);

  std::size_t patches_per_image() const;
  std::size_t patch_dim() const { return patch_size * patch_size * kImageChannels; }

  // Throws std::invalid_argument describing the first violated constraint.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

std::string to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const std::string& text);

// Row-major [height][width][channels] intensities in [0, 1].
struct PatchGrid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<float> values;

  static PatchGrid zeros(std::size_t height, std::size_t width, std::size_t channels = kImageChannels);
  float at(std::size_t y, std::size_t x, std::size_t c) const { return values[(y * width + x) * channels + c]; }
  float& at(std::size_t y, std::size_t x, std::size_t c) { return values[(y * width + x) * channels + c]; }

  bool operator==(const PatchGrid&) const = default;
};

struct Segment {
  std::optional<PatchGrid> image;
  TokenSeq text;

  bool empty() const { return !image && text.empty(); }
};

struct MultimodalInput {
  std::vector<Segment> segments;
};

template <typename T>
struct EncoderOutput {
  BasicTensor<T> rows;  // [1 + patches + tokens, D]
  BasicTensor<T> cls;   // [1, D], row 0 of rows
};

template <typename T>
struct DecoderState;

template <typename T>
class Backbone {
 public:
  Backbone(const ModelConfig& config, std::uint64_t seed);
  // Tensors are shared handles, so copies would alias parameters; use clone().
  Backbone(const Backbone&) = delete;
  Backbone& operator=(const Backbone&) = delete;
  Backbone(Backbone&&) noexcept = default;
  Backbone& operator=(Backbone&&) noexcept = default;

  // Independent copy with equal parameter values.
  Backbone clone() const;

  const ModelConfig& config() const { return config_; }

  // [(H/P)*(W/P), D]; patches are taken in row-major order of the patch grid,
  // each flattened as [py][px][c].
  BasicTensor<T> patch_embed(const PatchGrid& image) const;
  BasicTensor<T> token_embed(const TokenSeq& text) const;
  BasicTensor<T> assemble(const MultimodalInput& input) const;

  EncoderOutput<T> encode(const BasicTensor<T>& rows, std::vector<AttentionMap>* probes = nullptr) const;
  EncoderOutput<T> encode(const MultimodalInput& input) const { return encode(assemble(input)); }

  // Teacher-forced logits [L, V]; row i predicts the token after input[i].
  BasicTensor<T> decode_logits(const EncoderOutput<T>& encoded, const TokenSeq& decoder_input) const;
  // Next-token logits [V] for a prefix beginning with kStartId.
  BasicTensor<T> decode_step(const EncoderOutput<T>& encoded, const TokenSeq& prefix) const;

  // Incremental decoding with cached keys and values.
  DecoderState<T> start_decoding(const EncoderOutput<T>& encoded) const;
  // Consumes one token and returns the logits [V] for the following position.
  BasicTensor<T> advance(DecoderState<T>& state, TokenId token) const;

  ParameterList<T> parameters() const;
  std::size_t parameter_count() const;
  Checkpoint to_checkpoint() const { return make_checkpoint(parameters()); }
  void load(const Checkpoint& checkpoint);
  // sha256 of the serialized checkpoint.
  Digest fingerprint() const;

  // Bucket for key position minus query position.
  static std::int32_t relative_bucket(std::int64_t relative, bool bidirectional, std::size_t num_buckets,
                                      std::size_t max_distance);

 private:
  struct Linear {
    BasicTensor<T> weight;  // [in, out]
    BasicTensor<T> bias;    // [out]
  };
  struct Norm {
    BasicTensor<T> gain;
    BasicTensor<T> bias;
  };
  struct Attention {
    Linear q, k, v, o;
  };
  struct FeedForward {
    Linear in, out;
  };
  struct EncoderLayer {
    Norm norm1;
    Attention self;
    Norm norm2;
    FeedForward ff;
  };
  struct DecoderLayer {
    Norm norm1;
    Attention self;
    Norm norm2;
    Attention cross;
    Norm norm3;
    FeedForward ff;
  };

  BasicTensor<T> linear(const Linear& layer, const BasicTensor<T>& x) const;
  BasicTensor<T> norm(const Norm& layer, const BasicTensor<T>& x) const;
  BasicTensor<T> feed_forward(const FeedForward& layer, const BasicTensor<T>& x) const;
  BasicTensor<T> self_bias(const BasicTensor<T>& table, std::size_t queries, std::size_t keys,
                           std::size_t first_query, bool bidirectional) const;

  ModelConfig config_;
  Linear patch_;
  BasicTensor<T> token_table_;
  BasicTensor<T> cls_;
  BasicTensor<T> encoder_bias_;
  std::vector<EncoderLayer> encoder_;
  Norm encoder_norm_;
  BasicTensor<T> decoder_bias_;
  std::vector<DecoderLayer> decoder_;
  Norm decoder_norm_;
  BasicTensor<T> output_;  // [D, V]
  ParameterList<T> registry_;

  friend struct DecoderState<T>;
};

template <typename T>
struct DecoderState {
  std::vector<BasicTensor<T>> self_keys;    // per layer [t, D]
  std::vector<BasicTensor<T>> self_values;  // per layer [t, D]
  std::vector<BasicTensor<T>> cross_keys;   // per layer [rows, D]
  std::vector<BasicTensor<T>> cross_values;
  std::size_t position = 0;
};

struct Hypothesis {
  TokenSeq tokens;          // without start and end markers
  double log_prob = 0.0;    // includes the end token when finished
  bool finished = false;
};

// Argmax decoding; ties go to the lower token id. At most max_len steps, the
// end token counting as a step.
template <typename T>
Hypothesis generate_greedy(const Backbone<T>& model, const EncoderOutput<T>& encoded, std::size_t max_len);

// Beam search over summed token log-probabilities without length
// normalization. Candidates are ranked by score, then by token sequence.
template <typename T>
Hypothesis generate_beam(const Backbone<T>& model, const EncoderOutput<T>& encoded, std::size_t beam_width,
                         std::size_t max_len);

// Log-probability of tokens (optionally followed by the end token) under the
// incremental decoder.
template <typename T>
double sequence_log_prob(const Backbone<T>& model, const EncoderOutput<T>& encoded, const TokenSeq& tokens,
                         bool with_end);

}  // namespace murag
