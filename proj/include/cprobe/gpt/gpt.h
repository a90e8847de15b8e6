#pragma once

// Decoder-only transformer: learned token and position embeddings, pre-norm
// blocks (attention and a GELU feedforward, each with dropout and a residual
// connection), final layer norm and a vocabulary projection.

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cprobe/core/ops.h"
#include "cprobe/core/rng.h"
#include "cprobe/core/tensor.h"

namespace cprobe {

struct GptConfig {
  std::size_t vocab_size = 50257;
  std::size_t embed_dim = 896;
  std::size_t layers = 8;
  std::size_t heads = 14;
  double dropout = 0.2;
  std::size_t context_length = 256;
  std::uint64_t seed = 0;

  // Throws ConfigError on non-positive extents, heads not dividing
  // embed_dim, or dropout outside [0, 1).
  void validate() const;
  bool operator==(const GptConfig&) const = default;
};

inline constexpr float kLayerNormEps = 1e-5f;
inline constexpr double kInitStddev = 0.02;

struct GptBlock {
  Tensor<float> ln1_gain, ln1_bias;
  AttentionParams<float> attn;
  Tensor<float> ln2_gain, ln2_bias;
  Tensor<float> ff_w1, ff_b1;  // [d×4d], [4d]
  Tensor<float> ff_w2, ff_b2;  // [4d×d], [d]
};

struct GptWeights {
  Tensor<float> tok_emb;  // [V×d]
  Tensor<float> pos_emb;  // [context×d]
  std::vector<GptBlock> blocks;
  Tensor<float> lnf_gain, lnf_bias;
  Tensor<float> head_w, head_b;  // [d×V], [V]
};

// Block outputs after the residual addition (before the final norm), one
// [rows×d] tensor per layer. Attention weights [batch×heads×t×t] per layer
// when requested.
struct HiddenStateTrace {
  std::vector<Tensor<float>> layers;
  std::vector<Tensor<float>> attention;
};

struct ForwardOptions {
  bool training = false;
  Rng* rng = nullptr;  // required when training with dropout > 0
  HiddenStateTrace* trace = nullptr;
  bool capture_attention = false;
};

using NamedTensor = std::pair<std::string, Tensor<float>>;

class GptModel {
 public:
  // Embeddings and linear weights ~ normal(0, 0.02) drawn from config.seed,
  // biases zero, layer-norm gains one.
  explicit GptModel(const GptConfig& config);
  GptModel(const GptConfig& config, GptWeights weights);

  const GptConfig& config() const { return config_; }
  GptWeights& weights() { return weights_; }
  const GptWeights& weights() const { return weights_; }

  // Logits [t×V] for one sequence. Throws LengthError when t exceeds the
  // context, IndexError for ids outside the vocabulary.
  Tensor<float> forward(std::span<const std::int32_t> ids, const ForwardOptions& options = {}) const;

  // `ids` holds consecutive sequences of seq_len tokens; logits are
  // [(batch·seq_len)×V].
  Tensor<float> forward_batch(std::span<const std::int32_t> ids, std::size_t seq_len,
                              const ForwardOptions& options = {}) const;

  // Stable order, shared by initialization and checkpoints.
  std::vector<NamedTensor> named_parameters() const;
  std::vector<Tensor<float>> parameters() const;
  std::size_t parameter_count() const;

  // Names and shapes the architecture implies, without allocating.
  static std::vector<std::pair<std::string, Shape>> parameter_shapes(const GptConfig& config);

  // Independent copy of every weight.
  GptModel clone() const;

 private:
  GptConfig config_;
  GptWeights weights_;
};

// Autoregressive continuation of `prompt`. Temperature 0 is greedy (lowest
// index wins ties); otherwise tokens are sampled from
// softmax(logits / temperature) using a generator seeded with `seed`.
std::vector<std::int32_t> generate(const GptModel& model, std::span<const std::int32_t> prompt,
                                   std::size_t max_new, double temperature, std::uint64_t seed);

void save_model(const GptModel& model, const std::string& path);
// Throws FormatError (with the offending field and byte offset) on a bad
// magic, unsupported version, config/weight mismatch or truncation.
GptModel load_model(const std::string& path);

}  // namespace cprobe
