#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lcflow/autodiff.hpp"
#include "lcflow/data.hpp"
#include "lcflow/flow.hpp"
#include "lcflow/plan.hpp"

namespace lcflow {

struct TrainConfig {
  std::size_t epochs = 30;
  // Unset means 30% of `epochs`, rounded up.
  std::optional<std::size_t> pretrain_epochs;
  std::size_t batch_size = 64;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double weight_decay = 5e-5;
  double dequant_alpha = 0.05;
  std::size_t scales = 2;
  std::size_t couplings_per_scale = 2;
  std::size_t final_couplings = 2;
  std::size_t hidden_width = 64;
  double scale_clamp = 4.0;
  std::size_t reference_batch = 4096;
  std::uint64_t seed = 0;

  std::size_t effective_pretrain_epochs() const;
  Architecture architecture(const Layout& input) const;

  // Throws InvalidArgumentError on out-of-range values.
  void validate() const;
  // Sets one field by its key=value name; throws on unknown keys or bad values.
  void set(std::string_view key, std::string_view value);
  std::string to_text() const;
  static TrainConfig parse(std::string_view text);
  static TrainConfig load(const std::filesystem::path& path);
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_bpd = 0.0;
  double valid_bpd = 0.0;
  double seconds = 0.0;  // wall-clock since the run started
};

struct RunMetrics {
  std::vector<EpochMetrics> epochs;  // epoch 0 is the untrained model
  std::string plan;                  // strategy tag, empty when unfactored

  double final_valid_bpd() const { return epochs.back().valid_bpd; }
};

// Columns epoch,split,bits_per_dim,seconds. Wall-clock values are only
// written with `timing`; otherwise the column is left empty so that the file
// depends on the seed alone.
std::string metrics_csv(const RunMetrics& metrics, bool timing);

struct Preprocessed {
  Tensor x;             // [B, D] logit space
  Tensor log_jacobian;  // [B] log|d x / d (pixels + noise)|
};

// u = alpha + (1 - alpha) * (pixels + noise) / 256, x = logit(u). `noise` has
// the pixels' element count with entries in [0, 1).
Preprocessed preprocess(const Tensor& pixels, double alpha, const Tensor& noise);
// Uniform dequantization noise from `rng`; no noise when rng is null.
Preprocessed preprocess(const Tensor& pixels, double alpha, std::mt19937_64* rng);
// Inverse of the logit map: 256 * (sigmoid(x) - alpha) / (1 - alpha).
Tensor postprocess(const Tensor& x, double alpha);

struct LossTerms {
  Var loss;               // mean NLL in nats per dim plus weight_decay * sum of squared weights
  Tensor log_likelihood;  // [B] in nats
};
LossTerms training_loss(const FlowModel& model, const Tensor& x, double weight_decay);

class Adam {
 public:
  Adam(std::vector<Parameter*> params, double lr, double beta1, double beta2, double eps);
  void step();

 private:
  std::vector<Parameter*> params_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  double lr_, beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
};

// Bits per dim of discrete images [B, s, s, c] including the dequantization
// correction. Noise for example i depends only on (noise_seed, i), so the
// result does not depend on `chunk`.
double evaluate_bpd(const FlowModel& model, const Tensor& pixels, double alpha,
                    std::uint64_t noise_seed = 0, std::size_t chunk = 512);
// Bits per dim of continuous rows [B, D] with no preprocessing.
double evaluate_bpd_continuous(const FlowModel& model, const Tensor& x);

struct PretrainResult {
  FlowModel model;
  std::vector<Tensor> logdet_maps;  // one [s, s, c] map per scale boundary
  RunMetrics metrics;
};
PretrainResult pretrain(const TrainConfig& config, const Dataset& data);

// Preprocessed reference batch used for the log-det maps.
Tensor reference_batch(const TrainConfig& config, const Dataset& data);

struct TrainResult {
  FlowModel model;
  RunMetrics metrics;
};
TrainResult train_with_plan(const TrainConfig& config, const Dataset& data, const FactorizationPlan& plan);

// Draws every latent part from N(0, 1) and inverts the flow, [n, D].
Tensor sample_model_space(const FlowModel& model, std::size_t n, std::mt19937_64& rng);
// As above, mapped back to pixel space and clamped to [0, 256), [n, s, s, c].
Tensor sample(const FlowModel& model, std::size_t n, double alpha, std::mt19937_64& rng);

// Encodes both images without dequantization noise, interpolates every latent
// part linearly and decodes `steps` frames ([s, s, c] each), endpoints
// included.
std::vector<Tensor> interpolate(const FlowModel& model, const Tensor& a, const Tensor& b,
                                std::size_t steps, double alpha);

}  // namespace lcflow
