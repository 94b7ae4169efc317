#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "lcflow/autodiff.hpp"
#include "lcflow/tensor.hpp"

namespace lcflow {

// Square image layout side x side x channels, flattened row-major with the
// channel index fastest.
struct Layout {
  std::size_t side = 0;
  std::size_t channels = 0;

  std::size_t dims() const { return side * side * channels; }
  std::size_t index(std::size_t row, std::size_t col, std::size_t ch) const {
    return (row * side + col) * channels + ch;
  }
  std::string str() const;
  static Layout parse(std::string_view text);

  friend bool operator==(const Layout&, const Layout&) = default;
};

// s x s x c -> s/2 x s/2 x 4c. Throws ShapeError when s is odd.
Layout squeezed(const Layout& in);

// perm[k] is the input flat index that lands at output position k. Each 2x2
// block of channel ch goes to output channels 4ch..4ch+3 in the order
// top-left, top-right, bottom-left, bottom-right.
std::vector<std::size_t> squeeze_permutation(const Layout& in);
std::vector<std::size_t> invert_permutation(std::span<const std::size_t> perm);

// Space-to-depth on tensors shaped [..., s, s, c].
Tensor squeeze(const Tensor& x);
Tensor unsqueeze(const Tensor& x);

// Flattens [s, s, c] or [B, s, s, c] or [B, D] to [B, D] for `layout`.
Tensor as_batch(const Tensor& x, const Layout& layout);

// Fully connected tanh network; the output layer is linear.
class DenseNet {
 public:
  DenseNet() = default;
  explicit DenseNet(std::span<const std::size_t> widths);

  std::size_t input_width() const;
  std::size_t output_width() const;

  Var forward(const Var& x, bool track) const;

  // Hidden weights ~ N(0, 1/fan_in), biases zero, output layer zero.
  void init(std::mt19937_64& rng);
  std::vector<Parameter>& weights() { return weights_; }
  std::vector<Parameter>& biases() { return biases_; }
  const std::vector<Parameter>& weights() const { return weights_; }
  const std::vector<Parameter>& biases() const { return biases_; }

 private:
  std::vector<Parameter> weights_;  // [in, out]
  std::vector<Parameter> biases_;   // [1, out]
};

// Affine coupling y_a = x_a * exp(s(x_p)) + t(x_p) on the dims where the mask
// is 0; dims where the mask is 1 pass through and condition the nets. The
// scale output is soft-clamped to c * tanh(raw / c).
class CouplingLayer {
 public:
  CouplingLayer(Layout layout, std::vector<std::uint8_t> mask, std::size_t hidden, double clamp);

  static CouplingLayer checkerboard(Layout layout, bool parity, std::size_t hidden, double clamp);
  static CouplingLayer channel_split(Layout layout, bool parity, std::size_t hidden, double clamp);

  const Layout& layout() const { return layout_; }
  const std::vector<std::uint8_t>& mask() const { return mask_; }
  const std::vector<std::size_t>& passive() const { return passive_; }
  const std::vector<std::size_t>& active() const { return active_; }
  double clamp() const { return clamp_; }

  DenseNet& scale_net() { return scale_net_; }
  DenseNet& shift_net() { return shift_net_; }
  const DenseNet& scale_net() const { return scale_net_; }
  const DenseNet& shift_net() const { return shift_net_; }

  struct GraphOutput {
    Var y;          // [B, D]
    Var log_scale;  // [B, |active|]; the per-dim log-jacobian of the active dims
  };
  GraphOutput forward(const Var& x, bool track) const;

  // Returns (y, per-dim log-det [B, D]) with zeros on the passive dims.
  std::pair<Tensor, Tensor> forward(const Tensor& x) const;
  Tensor inverse(const Tensor& y) const;

 private:
  std::pair<Var, Var> scale_shift(const Var& passive, bool track) const;

  Layout layout_;
  std::vector<std::uint8_t> mask_;
  std::vector<std::size_t> passive_;
  std::vector<std::size_t> active_;
  std::vector<std::size_t> merge_;  // position of each dim inside concat(passive, active)
  double clamp_ = 4.0;
  DenseNet scale_net_;
  DenseNet shift_net_;
};

class SqueezeLayer {
 public:
  explicit SqueezeLayer(Layout in);
  const Layout& input_layout() const { return in_; }
  Layout output_layout() const { return squeezed(in_); }
  const std::vector<std::size_t>& permutation() const { return perm_; }

 private:
  Layout in_;
  std::vector<std::size_t> perm_;
};

// Sends `factor` dims to the prior and continues with `keep`, gathered in
// list order into a side x side x channels/2 layout.
class FactorLayer {
 public:
  FactorLayer(Layout in, std::vector<std::size_t> keep, std::vector<std::size_t> factor);
  const Layout& input_layout() const { return in_; }
  Layout output_layout() const { return Layout{in_.side, in_.channels / 2}; }
  const std::vector<std::size_t>& keep() const { return keep_; }
  const std::vector<std::size_t>& factor() const { return factor_; }

 private:
  Layout in_;
  std::vector<std::size_t> keep_;
  std::vector<std::size_t> factor_;
};

using FlowLayer = std::variant<CouplingLayer, SqueezeLayer, FactorLayer>;

Layout layer_input_layout(const FlowLayer& layer);
Layout layer_output_layout(const FlowLayer& layer);

class FlowModel {
 public:
  FlowModel() = default;
  explicit FlowModel(Layout input);

  // Appends a layer; its input layout must equal the current output layout.
  void add(FlowLayer layer);
  // Records a scale boundary after the last added layer.
  void mark_boundary();

  const Layout& input_layout() const { return input_; }
  Layout output_layout() const;
  const std::vector<FlowLayer>& layers() const { return layers_; }
  std::vector<FlowLayer>& layers() { return layers_; }
  const std::vector<std::size_t>& boundaries() const { return boundaries_; }
  std::size_t factor_count() const;
  // Width of each latent part z_1..z_K.
  std::vector<std::size_t> part_dims() const;

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;

  void save(std::ostream& out) const;
  static FlowModel load(std::istream& in);
  void save(const std::filesystem::path& path) const;
  static FlowModel load(const std::filesystem::path& path);

 private:
  void renumber();

  Layout input_;
  std::vector<FlowLayer> layers_;
  std::vector<std::size_t> boundaries_;  // count of layers preceding each boundary
};

// Per-dimension accumulated log-det contributions, [B, dims] per block. Live
// columns follow the current variable layout; frozen blocks hold the dims
// removed by each factor layer at their value when removed.
struct LogDetMap {
  Layout live_layout;
  Tensor live;
  std::vector<Tensor> frozen;
  std::vector<std::size_t> live_origin;  // input-layout index of each live column
  std::vector<std::vector<std::size_t>> frozen_origin;

  // Per-example sum over live and frozen entries, shape [B].
  Tensor total() const;
  // All entries scattered back to input-layout order, [B, D_in].
  Tensor to_input_layout() const;
  // Mean over the batch of to_input_layout(), shape [D_in].
  Tensor batch_mean() const;
};

struct FlowGraph {
  std::vector<Var> z_parts;  // [B, d_k]
  Var logdet;                // [B]
  LogDetMap map;
  std::vector<Tensor> boundary_maps;  // input-layout [B, D_in] snapshot at each boundary
};

// Forward pass on a graph input x [B, D]. With `track` the model parameters
// become gradient leaves.
FlowGraph forward_graph(const FlowModel& model, const Var& x, bool track);

struct ForwardResult {
  std::vector<Tensor> z_parts;
  Tensor total_logdet;  // [B]
  LogDetMap logdet_map;
  std::vector<Tensor> boundary_maps;
};

ForwardResult flow_forward(const FlowModel& model, const Tensor& x);
Tensor flow_inverse(const FlowModel& model, std::span<const Tensor> z_parts);

// Standard-normal log density of each row over all parts, [B].
Var log_prior(std::span<const Var> z_parts);
Tensor log_prior(std::span<const Tensor> z_parts);

Var log_likelihood_graph(const FlowModel& model, const Var& x, bool track);
Tensor log_likelihood(const FlowModel& model, const Tensor& x);

struct Architecture {
  Layout input{8, 1};
  std::size_t scales = 2;
  std::size_t couplings_per_scale = 2;  // of each kind: checkerboard, then channel
  std::size_t final_couplings = 2;
  std::size_t hidden = 64;
  double clamp = 4.0;
};

struct FactorSpec {
  std::vector<std::size_t> keep;
  std::vector<std::size_t> factor;
};

// Layout entering each scale, ending with the final (post-scales) layout.
// With `factored` the kept half continues; otherwise all dims do. Throws
// ShapeError on layout underflow.
std::vector<Layout> scale_layouts(const Layout& input, std::size_t scales, bool factored);

// Per scale: checkerboard couplings, squeeze, channel couplings, optional
// factor layer, boundary. Then the final couplings. An empty `factors` builds
// the unfactored pretraining model.
FlowModel build_flow(const Architecture& arch, std::span<const FactorSpec> factors,
                     std::mt19937_64& rng);

}  // namespace lcflow
