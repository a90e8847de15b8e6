#pragma once

// Top-k sparse autoencoder: latents = topk(relu(x·W_enc + b_enc)),
// reconstruction = latents·W_dec + b_dec, trained on squared error.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cprobe/activations/activations.h"
#include "cprobe/core/ops.h"
#include "cprobe/core/tensor.h"

namespace cprobe {

struct SaeConfig {
  std::uint32_t layer = 1;
  std::size_t input_dim = 896;
  std::size_t hidden_dim = 0;  // 0 selects the depth-scaled width
  std::size_t k = 50;
  std::size_t max_epochs = 500;
  std::size_t patience = 10;
  double lr = 1e-3;
  std::size_t batch_size = 256;
  std::uint64_t seed = 0;
  // Subtract the training mean before encoding (added back on decode).
  bool center = false;

  // 3× input for layers 1-2, 4× for 3-5, 5× from layer 6 on.
  static std::size_t depth_scaled_hidden(std::uint32_t layer, std::size_t input_dim);
  std::size_t resolved_hidden_dim() const {
    return hidden_dim ? hidden_dim : depth_scaled_hidden(layer, input_dim);
  }
  void validate() const;
  bool operator==(const SaeConfig&) const = default;
};

template <typename T>
struct SaeParams {
  Tensor<T> w_enc;  // [in×hidden]
  Tensor<T> b_enc;  // [hidden]
  Tensor<T> w_dec;  // [hidden×in]
  Tensor<T> b_dec;  // [in]
};

// Graph-building forward pieces, shared by training and gradient checks.
template <typename T>
Tensor<T> sae_latents(const SaeParams<T>& p, const Tensor<T>& x, std::size_t k) {
  return top_k_mask(relu(linear(x, p.w_enc, p.b_enc)), k);
}
template <typename T>
Tensor<T> sae_reconstruct(const SaeParams<T>& p, const Tensor<T>& latents) {
  return linear(latents, p.w_dec, p.b_dec);
}

// The k retained slots of one latent vector, ascending by index. Values may
// be zero when fewer than k pre-activations are positive.
struct LatentCode {
  std::vector<std::uint32_t> indices;
  std::vector<float> values;
  std::size_t hidden_dim = 0;

  std::vector<float> dense() const;
};

struct SaeModel {
  SaeConfig config;
  SaeParams<float> params;
  std::vector<float> center;  // empty unless config.center

  // Decoder rows drawn as random unit vectors from config.seed, encoder
  // set to their transpose, biases zero.
  static SaeModel initialize(const SaeConfig& config);

  std::vector<Tensor<float>> parameters() const {
    return {params.w_enc, params.b_enc, params.w_dec, params.b_dec};
  }
};

// Throws DimensionError when x has the wrong length.
LatentCode sae_encode(const SaeModel& model, std::span<const float> x);
std::vector<float> sae_decode(const SaeModel& model, const LatentCode& code);

// Dense latents [rows×hidden] for a batch of rows (no graph recorded).
std::vector<float> sae_encode_batch(const SaeModel& model, std::span<const float> rows, std::size_t n);
// Reconstructions [rows×in] for a batch of rows.
std::vector<float> sae_reconstruct_batch(const SaeModel& model, std::span<const float> rows, std::size_t n);

// "No improvement" means not lower than the best so far by at least
// min_delta. Training stops once `patience` consecutive epochs fail to
// improve.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience, double min_delta = 1e-6)
      : patience_(patience), min_delta_(min_delta) {}

  // Records one epoch's validation loss; returns true when training should stop.
  bool update(double val_loss);
  bool last_improved() const { return last_improved_; }
  std::optional<double> best() const { return best_; }
  std::size_t best_epoch() const { return best_epoch_; }
  std::size_t epochs() const { return epochs_; }

 private:
  std::size_t patience_;
  double min_delta_;
  std::optional<double> best_;
  std::size_t best_epoch_ = 0;
  std::size_t epochs_ = 0;
  std::size_t stale_ = 0;
  bool last_improved_ = false;
};

struct SaeEpochRecord {
  std::size_t epoch = 0;
  double train_mse = 0.0;
  double val_mse = 0.0;
  bool improved = false;
};

struct SaeTrainResult {
  SaeModel model;  // weights of the best validation epoch
  std::vector<SaeEpochRecord> log;
  std::size_t best_epoch = 0;
  double best_val_mse = 0.0;
  bool stopped_early = false;
};

// Adam (no weight decay) on mean squared reconstruction error over shuffled
// minibatches. Throws InputError for empty sets or dims that do not match
// the config, DivergenceError on a non-finite loss.
SaeTrainResult train_sae(const SaeConfig& config, const ActivationSet& train, const ActivationSet& val,
                         const std::function<void(const SaeEpochRecord&)>& on_epoch = {});

struct SaeMetrics {
  double mse = 0.0;     // mean over rows of the mean squared elementwise error
  double cosine = 0.0;  // mean over rows with non-zero norms of cos(x, x̂)
  std::size_t rows = 0;
  std::size_t zero_norm_rows = 0;
};

// Metrics of given reconstructions against inputs, both [rows×dim].
SaeMetrics reconstruction_metrics(std::span<const float> inputs, std::span<const float> recon, std::size_t dim);
// Throws InputError for an empty set, UndefinedMetricError when every row
// has zero norm.
SaeMetrics evaluate_sae(const SaeModel& model, const ActivationSet& set);

void save_sae(const SaeModel& model, const std::string& path);
SaeModel load_sae(const std::string& path);

}  // namespace cprobe
