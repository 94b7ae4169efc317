#include "lcflow/train.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "lcflow/errors.hpp"

namespace lcflow {

namespace {

constexpr std::uint64_t kEvalNoiseSeed = 0x5bd1e995ULL;
constexpr std::uint64_t kReferenceNoiseSeed = 0x27d4eb2fULL;

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(std::string_view key, std::string_view text) {
  T v{};
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end || text.empty()) {
    throw InvalidArgumentError("bad value '" + std::string(text) + "' for config key '" + std::string(key) + "'");
  }
  return v;
}

std::string format_double(double v) {
  std::array<char, 64> buf{};
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), ptr);
}

// Per-example noise stream, so that a row's noise does not depend on how the
// rows are batched.
void example_noise(std::uint64_t seed, std::size_t index, std::span<double> out) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (double& v : out) v = unit(rng);
}

Tensor flatten_rows(const Tensor& pixels) {
  if (pixels.rank() < 2) throw ShapeError("expected a batch of images, got " + shape_str(pixels.shape()));
  const std::size_t rows = pixels.dim(0);
  return pixels.reshaped({rows, pixels.numel() / rows});
}

struct Clock {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
};

void check_params_finite(const FlowModel& model) {
  for (const Parameter* p : model.parameters()) {
    if (!p->value.all_finite()) throw DivergenceError("parameters became non-finite");
  }
}

// Trains `model` in place and returns per-epoch metrics; epoch 0 is evaluated
// before any update.
RunMetrics run_training(FlowModel& model, const TrainConfig& cfg, const Dataset& data, std::size_t epochs,
                        std::mt19937_64& rng) {
  const Tensor train = flatten_rows(data.train());
  const Tensor valid = flatten_rows(data.valid());
  const std::size_t n = train.dim(0), dims = train.dim(1);
  const double alpha = cfg.dequant_alpha;

  RunMetrics metrics;
  Clock clock;
  metrics.epochs.push_back({0, evaluate_bpd(model, train, alpha, kEvalNoiseSeed),
                            evaluate_bpd(model, valid, alpha, kEvalNoiseSeed), clock.seconds()});
  if (epochs == 0) return metrics;

  Adam adam(model.parameters(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_epsilon);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double ll_sum = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t stop = std::min(n, start + cfg.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, stop - start);
      const Tensor pixels = gather(train, 0, idx);
      Tensor noise(pixels.shape());
      for (double& v : noise.data()) v = unit(rng);
      try {
        const Preprocessed pre = preprocess(pixels, alpha, noise);
        LossTerms terms = training_loss(model, pre.x, cfg.weight_decay);
        if (!std::isfinite(terms.loss.value().item())) throw DomainError("non-finite loss");
        backward(terms.loss);
        for (std::size_t b = 0; b < idx.size(); ++b) ll_sum += terms.log_likelihood[b] + pre.log_jacobian[b];
      } catch (const DomainError& e) {
        throw DivergenceError("training diverged at epoch " + std::to_string(epoch) + ": " + e.what());
      }
      adam.step();
      check_params_finite(model);
    }
    const double train_bpd = -ll_sum / (static_cast<double>(n * dims) * std::numbers::ln2);
    double valid_bpd = 0.0;
    try {
      valid_bpd = evaluate_bpd(model, valid, alpha, kEvalNoiseSeed);
    } catch (const DomainError& e) {
      throw DivergenceError("validation diverged at epoch " + std::to_string(epoch) + ": " + e.what());
    }
    metrics.epochs.push_back({epoch, train_bpd, valid_bpd, clock.seconds()});
  }
  return metrics;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

std::size_t TrainConfig::effective_pretrain_epochs() const {
  if (pretrain_epochs) return *pretrain_epochs;
  return (epochs * 3 + 9) / 10;
}

Architecture TrainConfig::architecture(const Layout& input) const {
  Architecture a;
  a.input = input;
  a.scales = scales;
  a.couplings_per_scale = couplings_per_scale;
  a.final_couplings = final_couplings;
  a.hidden = hidden_width;
  a.clamp = scale_clamp;
  return a;
}

void TrainConfig::validate() const {
  auto positive = [](std::size_t v, const char* key) {
    if (v == 0) throw InvalidArgumentError(std::string(key) + " must be positive");
  };
  positive(epochs, "epochs");
  positive(batch_size, "batch_size");
  positive(scales, "scales");
  positive(couplings_per_scale, "couplings_per_scale");
  positive(hidden_width, "hidden_width");
  positive(reference_batch, "reference_batch");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw InvalidArgumentError("learning_rate must be positive");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw InvalidArgumentError("adam betas must be in [0, 1)");
  }
  if (!(adam_epsilon > 0.0)) throw InvalidArgumentError("adam_epsilon must be positive");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
    throw InvalidArgumentError("weight_decay must be non-negative");
  }
  if (!(dequant_alpha > 0.0 && dequant_alpha < 0.5)) throw InvalidArgumentError("dequant_alpha must be in (0, 0.5)");
  if (!(scale_clamp > 0.0) || !std::isfinite(scale_clamp)) throw InvalidArgumentError("scale_clamp must be positive");
}

void TrainConfig::set(std::string_view key, std::string_view value) {
  const std::string v = trim(value);
  auto size = [&](std::size_t& field) { field = parse_number<std::size_t>(key, v); };
  auto real = [&](double& field) { field = parse_number<double>(key, v); };
  if (key == "epochs") size(epochs);
  else if (key == "pretrain_epochs") {
    if (v == "auto") pretrain_epochs.reset();
    else pretrain_epochs = parse_number<std::size_t>(key, v);
  } else if (key == "batch_size") size(batch_size);
  else if (key == "learning_rate") real(learning_rate);
  else if (key == "beta1") real(beta1);
  else if (key == "beta2") real(beta2);
  else if (key == "adam_epsilon") real(adam_epsilon);
  else if (key == "weight_decay") real(weight_decay);
  else if (key == "dequant_alpha") real(dequant_alpha);
  else if (key == "scales") size(scales);
  else if (key == "couplings_per_scale") size(couplings_per_scale);
  else if (key == "final_couplings") size(final_couplings);
  else if (key == "hidden_width") size(hidden_width);
  else if (key == "scale_clamp") real(scale_clamp);
  else if (key == "reference_batch") size(reference_batch);
  else if (key == "seed") seed = parse_number<std::uint64_t>(key, v);
  else throw InvalidArgumentError("unknown config key '" + std::string(key) + "'");
}

std::string TrainConfig::to_text() const {
  std::ostringstream out;
  out << "epochs=" << epochs << "\n"
      << "pretrain_epochs=" << (pretrain_epochs ? std::to_string(*pretrain_epochs) : std::string("auto")) << "\n"
      << "batch_size=" << batch_size << "\n"
      << "learning_rate=" << format_double(learning_rate) << "\n"
      << "beta1=" << format_double(beta1) << "\n"
      << "beta2=" << format_double(beta2) << "\n"
      << "adam_epsilon=" << format_double(adam_epsilon) << "\n"
      << "weight_decay=" << format_double(weight_decay) << "\n"
      << "dequant_alpha=" << format_double(dequant_alpha) << "\n"
      << "scales=" << scales << "\n"
      << "couplings_per_scale=" << couplings_per_scale << "\n"
      << "final_couplings=" << final_couplings << "\n"
      << "hidden_width=" << hidden_width << "\n"
      << "scale_clamp=" << format_double(scale_clamp) << "\n"
      << "reference_batch=" << reference_batch << "\n"
      << "seed=" << seed << "\n";
  return out.str();
}

TrainConfig TrainConfig::parse(std::string_view text) {
  TrainConfig cfg;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw InvalidArgumentError("config line '" + t + "' is not key=value");
    cfg.set(trim(std::string_view(t).substr(0, eq)), std::string_view(t).substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse(buf.str());
}

std::string metrics_csv(const RunMetrics& metrics, bool timing) {
  std::ostringstream out;
  out.precision(17);
  out << "epoch,split,bits_per_dim,seconds\n";
  for (const auto& e : metrics.epochs) {
    for (const auto& [split, bpd] : {std::pair{"train", e.train_bpd}, std::pair{"valid", e.valid_bpd}}) {
      out << e.epoch << "," << split << "," << bpd << ",";
      if (timing) out << e.seconds;
      out << "\n";
    }
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Preprocessing

Preprocessed preprocess(const Tensor& pixels, double alpha, const Tensor& noise) {
  if (!(alpha > 0.0 && alpha < 0.5)) throw InvalidArgumentError("dequantization alpha must be in (0, 0.5)");
  if (noise.numel() != pixels.numel()) throw ShapeError("noise does not match the pixel tensor");
  const Tensor flat = flatten_rows(pixels);
  const std::size_t rows = flat.dim(0), dims = flat.dim(1);
  Preprocessed out{Tensor(flat.shape()), Tensor({rows}, 0.0)};
  const double base = std::log1p(-alpha) - std::log(256.0);
  for (std::size_t b = 0; b < rows; ++b) {
    double corr = 0.0;
    for (std::size_t d = 0; d < dims; ++d) {
      const std::size_t i = b * dims + d;
      const double v = flat[i], e = noise[i];
      if (!(v >= 0.0 && v < 256.0)) throw InvalidArgumentError("pixel value out of [0, 256)");
      if (!(e >= 0.0 && e < 1.0)) throw InvalidArgumentError("dequantization noise out of [0, 1)");
      const double u = alpha + (1.0 - alpha) * (v + e) / 256.0;
      out.x[i] = std::log(u) - std::log1p(-u);
      corr += base - std::log(u) - std::log1p(-u);
    }
    out.log_jacobian[b] = corr;
  }
  return out;
}

Preprocessed preprocess(const Tensor& pixels, double alpha, std::mt19937_64* rng) {
  Tensor noise(pixels.shape(), 0.0);
  if (rng) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (double& v : noise.data()) v = unit(*rng);
  }
  return preprocess(pixels, alpha, noise);
}

Tensor postprocess(const Tensor& x, double alpha) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double u = 1.0 / (1.0 + std::exp(-x[i]));
    out[i] = 256.0 * (u - alpha) / (1.0 - alpha);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loss and optimizer

LossTerms training_loss(const FlowModel& model, const Tensor& x, double weight_decay) {
  const Var ll = log_likelihood_graph(model, Var::constant(x), true);
  const double scale = static_cast<double>(x.dim(0) * x.dim(1));
  Var loss = -reduce_sum_all(ll) / scale;
  if (weight_decay > 0.0) {
    for (const auto& layer : model.layers()) {
      const auto* c = std::get_if<CouplingLayer>(&layer);
      if (!c) continue;
      for (const DenseNet* net : {&c->scale_net(), &c->shift_net()}) {
        for (const Parameter& w : net->weights()) {
          const Var wv = Var::param(w);
          loss = loss + weight_decay * reduce_sum_all(wv * wv);
        }
      }
    }
  }
  return {loss, ll.value()};
}

Adam::Adam(std::vector<Parameter*> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const Parameter* p : params_) {
    m_.emplace_back(p->value.shape(), 0.0);
    v_.emplace_back(p->value.shape(), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto w = params_[k]->value.data();
    auto g = params_[k]->grad.data();
    auto m = m_[k].data();
    auto v = v_[k].data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      w[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

// ---------------------------------------------------------------------------
// Evaluation

double evaluate_bpd(const FlowModel& model, const Tensor& pixels, double alpha, std::uint64_t noise_seed,
                    std::size_t chunk) {
  if (chunk == 0) throw InvalidArgumentError("evaluation chunk must be positive");
  const Tensor flat = flatten_rows(pixels);
  const std::size_t n = flat.dim(0), dims = flat.dim(1);
  double total = 0.0;
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t stop = std::min(n, start + chunk);
    const Tensor rows = slice(flat, 0, start, stop);
    Tensor noise(rows.shape());
    for (std::size_t b = 0; b < stop - start; ++b) {
      example_noise(noise_seed, start + b, noise.data().subspan(b * dims, dims));
    }
    const Preprocessed pre = preprocess(rows, alpha, noise);
    const Tensor ll = log_likelihood(model, pre.x);
    for (std::size_t b = 0; b < stop - start; ++b) total += ll[b] + pre.log_jacobian[b];
  }
  return -total / (static_cast<double>(n * dims) * std::numbers::ln2);
}

double evaluate_bpd_continuous(const FlowModel& model, const Tensor& x) {
  const Tensor rows = as_batch(x, model.input_layout());
  const Tensor ll = log_likelihood(model, rows);
  double total = 0.0;
  for (double v : ll.data()) total += v;
  return -total / (static_cast<double>(rows.numel()) * std::numbers::ln2);
}

// ---------------------------------------------------------------------------
// Pipeline

Tensor reference_batch(const TrainConfig& config, const Dataset& data) {
  const std::size_t n = std::min(config.reference_batch, data.n_train);
  const Tensor pixels = flatten_rows(slice(data.images, 0, 0, n));
  Tensor noise(pixels.shape());
  const std::size_t dims = pixels.dim(1);
  for (std::size_t b = 0; b < n; ++b) example_noise(kReferenceNoiseSeed, b, noise.data().subspan(b * dims, dims));
  return preprocess(pixels, config.dequant_alpha, noise).x;
}

PretrainResult pretrain(const TrainConfig& config, const Dataset& data) {
  config.validate();
  validate_dataset(data);
  std::mt19937_64 rng(config.seed);
  FlowModel model = build_flow(config.architecture(data.layout()), {}, rng);
  RunMetrics metrics = run_training(model, config, data, config.effective_pretrain_epochs(), rng);
  auto maps = boundary_logdet_maps(model, reference_batch(config, data));
  return {std::move(model), std::move(maps), std::move(metrics)};
}

TrainResult train_with_plan(const TrainConfig& config, const Dataset& data, const FactorizationPlan& plan) {
  config.validate();
  validate_dataset(data);
  validate_plan(plan);
  if (!(plan.input_layout() == data.layout())) {
    throw ShapeError("plan layout " + plan.input_layout().str() + " does not match data layout " +
                     data.layout().str());
  }
  if (plan.scales.size() != config.scales) {
    throw ShapeError("plan has " + std::to_string(plan.scales.size()) + " scales, config expects " +
                     std::to_string(config.scales));
  }
  std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  const auto specs = plan.factor_specs();
  FlowModel model = build_flow(config.architecture(data.layout()), specs, rng);
  RunMetrics metrics = run_training(model, config, data, config.epochs, rng);
  metrics.plan = std::string(strategy_tag(plan.strategy));
  return {std::move(model), std::move(metrics)};
}

Tensor sample_model_space(const FlowModel& model, std::size_t n, std::mt19937_64& rng) {
  if (n == 0) throw InvalidArgumentError("sample count must be positive");
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Tensor> parts;
  for (std::size_t d : model.part_dims()) {
    Tensor z({n, d});
    for (double& v : z.data()) v = normal(rng);
    parts.push_back(std::move(z));
  }
  return flow_inverse(model, parts);
}

Tensor sample(const FlowModel& model, std::size_t n, double alpha, std::mt19937_64& rng) {
  Tensor x = postprocess(sample_model_space(model, n, rng), alpha);
  const double top = std::nextafter(256.0, 0.0);
  for (double& v : x.data()) v = std::clamp(v, 0.0, top);
  const Layout l = model.input_layout();
  return x.reshaped({n, l.side, l.side, l.channels});
}

std::vector<Tensor> interpolate(const FlowModel& model, const Tensor& a, const Tensor& b, std::size_t steps,
                                double alpha) {
  if (steps < 2) throw InvalidArgumentError("interpolation needs at least 2 steps");
  const Layout l = model.input_layout();
  const Tensor ends = concat(std::array<Tensor, 2>{as_batch(a, l), as_batch(b, l)}, 0);
  const auto z = flow_forward(model, preprocess(ends, alpha, nullptr).x).z_parts;
  std::vector<Tensor> frames;
  for (std::size_t k = 0; k < steps; ++k) {
    const double t = static_cast<double>(k) / static_cast<double>(steps - 1);
    std::vector<Tensor> parts;
    for (const auto& zk : z) {
      const std::size_t d = zk.dim(1);
      Tensor p({1, d});
      for (std::size_t i = 0; i < d; ++i) p[i] = (1.0 - t) * zk[i] + t * zk[d + i];
      parts.push_back(std::move(p));
    }
    frames.push_back(postprocess(flow_inverse(model, parts), alpha).reshaped({l.side, l.side, l.channels}));
  }
  return frames;
}

}  // namespace lcflow
