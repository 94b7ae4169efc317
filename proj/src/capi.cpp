#include "lcflow/lcflow.h"

#include <cstring>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "lcflow/ablation.hpp"
#include "lcflow/data.hpp"
#include "lcflow/errors.hpp"
#include "lcflow/flow.hpp"
#include "lcflow/plan.hpp"
#include "lcflow/train.hpp"

struct lcf_config {
  lcflow::TrainConfig value;
};
struct lcf_dataset {
  lcflow::Dataset value;
};
struct lcf_model {
  lcflow::FlowModel value;
};
struct lcf_maps {
  std::vector<lcflow::Tensor> value;
};
struct lcf_plan {
  lcflow::FactorizationPlan value;
};
struct lcf_metrics {
  lcflow::RunMetrics value;
};
struct lcf_ablation {
  lcflow::AblationResult value;
  std::vector<std::string> tags;  // keeps returned strategy strings alive
};

namespace {

thread_local std::string g_last_error;

lcf_status fail(lcf_status s, const char* what) {
  g_last_error = what;
  return s;
}

// Runs `body`, translating exceptions into status codes.
template <typename F>
lcf_status guarded(F&& body) {
  try {
    body();
    g_last_error.clear();
    return LCF_OK;
  } catch (const lcflow::DivergenceError& e) {
    return fail(LCF_ERR_DIVERGED, e.what());
  } catch (const lcflow::CorruptFileError& e) {
    return fail(LCF_ERR_CORRUPT, e.what());
  } catch (const lcflow::IoError& e) {
    return fail(LCF_ERR_IO, e.what());
  } catch (const lcflow::ShapeError& e) {
    return fail(LCF_ERR_SHAPE, e.what());
  } catch (const lcflow::DomainError& e) {
    return fail(LCF_ERR_DOMAIN, e.what());
  } catch (const lcflow::InvalidArgumentError& e) {
    return fail(LCF_ERR_INVALID_ARGUMENT, e.what());
  } catch (const std::bad_alloc&) {
    return fail(LCF_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(LCF_ERR_INTERNAL, e.what());
  } catch (...) {
    return fail(LCF_ERR_INTERNAL, "unknown error");
  }
}

void require(bool ok, const char* what) {
  if (!ok) throw lcflow::InvalidArgumentError(what);
}

void copy_out(std::span<const double> src, double* out, std::size_t len) {
  require(out != nullptr, "output buffer is null");
  if (len < src.size()) throw lcflow::ShapeError("output buffer too small");
  std::memcpy(out, src.data(), src.size() * sizeof(double));
}

}  // namespace

extern "C" {

const char* lcf_version(void) { return "1.0.0"; }

const char* lcf_status_string(lcf_status status) {
  switch (status) {
    case LCF_OK: return "ok";
    case LCF_ERR_INVALID_ARGUMENT: return "invalid argument";
    case LCF_ERR_SHAPE: return "shape mismatch";
    case LCF_ERR_DOMAIN: return "domain error";
    case LCF_ERR_IO: return "i/o error";
    case LCF_ERR_CORRUPT: return "corrupt file";
    case LCF_ERR_DIVERGED: return "training diverged";
    case LCF_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

const char* lcf_last_error(void) { return g_last_error.c_str(); }

// ---------------------------------------------------------------------------
// Config

lcf_status lcf_config_create(lcf_config** out) {
  return guarded([&] {
    require(out, "null output handle");
    *out = new lcf_config{};
  });
}

lcf_status lcf_config_load(const char* path, lcf_config** out) {
  return guarded([&] {
    require(path && out, "null argument");
    *out = new lcf_config{lcflow::TrainConfig::load(path)};
  });
}

lcf_status lcf_config_set(lcf_config* config, const char* key, const char* value) {
  return guarded([&] {
    require(config && key && value, "null argument");
    lcflow::TrainConfig next = config->value;
    next.set(key, value);
    next.validate();
    config->value = next;
  });
}

lcf_status lcf_config_get(const lcf_config* config, const char* key, char* buf, size_t len) {
  return guarded([&] {
    require(config && key && buf && len > 0, "null argument");
    const std::string text = config->value.to_text();
    const std::string prefix = std::string(key) + "=";
    std::size_t pos = 0;
    while (pos < text.size()) {
      const std::size_t eol = text.find('\n', pos);
      const std::string line = text.substr(pos, eol - pos);
      if (line.rfind(prefix, 0) == 0) {
        const std::string v = line.substr(prefix.size());
        const std::size_t n = std::min(len - 1, v.size());
        std::memcpy(buf, v.data(), n);
        buf[n] = '\0';
        return;
      }
      pos = eol + 1;
    }
    throw lcflow::InvalidArgumentError("unknown config key '" + std::string(key) + "'");
  });
}

lcf_status lcf_config_save(const lcf_config* config, const char* path) {
  return guarded([&] {
    require(config && path, "null argument");
    std::ofstream out(path);
    if (!out) throw lcflow::IoError(std::string("cannot open ") + path + " for writing");
    out << config->value.to_text();
    if (!out) throw lcflow::IoError(std::string("failed to write ") + path);
  });
}

void lcf_config_destroy(lcf_config* config) { delete config; }

// ---------------------------------------------------------------------------
// Datasets

lcf_status lcf_dataset_generate(size_t n, size_t side, size_t channels, uint64_t seed, double structure,
                                double valid_fraction, lcf_dataset** out) {
  return guarded([&] {
    require(out, "null output handle");
    lcflow::BlobOptions o;
    o.n = n;
    o.side = side;
    o.channels = channels;
    o.seed = seed;
    o.structure = structure;
    o.valid_fraction = valid_fraction;
    *out = new lcf_dataset{lcflow::generate_blobs(o)};
  });
}

lcf_status lcf_dataset_load(const char* path, lcf_dataset** out) {
  return guarded([&] {
    require(path && out, "null argument");
    *out = new lcf_dataset{lcflow::load_dataset(path)};
  });
}

lcf_status lcf_dataset_save(const lcf_dataset* data, const char* path) {
  return guarded([&] {
    require(data && path, "null argument");
    lcflow::save_dataset(data->value, path);
  });
}

lcf_status lcf_dataset_info(const lcf_dataset* data, size_t* n, size_t* n_train, size_t* side, size_t* channels) {
  return guarded([&] {
    require(data, "null dataset");
    const auto& d = data->value;
    if (n) *n = d.size();
    if (n_train) *n_train = d.n_train;
    if (side) *side = d.layout().side;
    if (channels) *channels = d.layout().channels;
  });
}

lcf_status lcf_dataset_image(const lcf_dataset* data, size_t index, double* out, size_t len) {
  return guarded([&] {
    require(data, "null dataset");
    require(index < data->value.size(), "image index out of range");
    copy_out(lcflow::slice(data->value.images, 0, index, index + 1).data(), out, len);
  });
}

lcf_status lcf_dataset_write_grid(const lcf_dataset* data, size_t count, const char* path) {
  return guarded([&] {
    require(data && path, "null argument");
    require(count > 0 && count <= data->value.size(), "image count out of range");
    const auto& imgs = data->value.images;
    const lcflow::Shape one{imgs.dim(1), imgs.dim(2), imgs.dim(3)};
    std::vector<lcflow::Tensor> tiles;
    for (std::size_t k = 0; k < count; ++k) tiles.push_back(lcflow::slice(imgs, 0, k, k + 1).reshaped(one));
    lcflow::write_image_grid(tiles, path);
  });
}

void lcf_dataset_destroy(lcf_dataset* data) { delete data; }

// ---------------------------------------------------------------------------
// Models and maps

lcf_status lcf_model_load(const char* path, lcf_model** out) {
  return guarded([&] {
    require(path && out, "null argument");
    *out = new lcf_model{lcflow::FlowModel::load(std::filesystem::path(path))};
  });
}

lcf_status lcf_model_save(const lcf_model* model, const char* path) {
  return guarded([&] {
    require(model && path, "null argument");
    model->value.save(std::filesystem::path(path));
  });
}

lcf_status lcf_model_info(const lcf_model* model, size_t* input_dims, size_t* layers, size_t* factor_layers,
                          size_t* parameters) {
  return guarded([&] {
    require(model, "null model");
    const auto& m = model->value;
    if (input_dims) *input_dims = m.input_layout().dims();
    if (layers) *layers = m.layers().size();
    if (factor_layers) *factor_layers = m.factor_count();
    if (parameters) {
      std::size_t count = 0;
      for (const auto* p : m.parameters()) count += p->value.numel();
      *parameters = count;
    }
  });
}

void lcf_model_destroy(lcf_model* model) { delete model; }

lcf_status lcf_maps_compute(const lcf_model* pretrained, const lcf_config* config, const lcf_dataset* data,
                            lcf_maps** out) {
  return guarded([&] {
    require(pretrained && config && data && out, "null argument");
    if (pretrained->value.factor_count() != 0) {
      throw lcflow::InvalidArgumentError("log-det maps need an unfactored (pretrained) model");
    }
    const lcflow::Tensor ref = lcflow::reference_batch(config->value, data->value);
    *out = new lcf_maps{lcflow::boundary_logdet_maps(pretrained->value, ref)};
  });
}

lcf_status lcf_maps_load(const char* path, lcf_maps** out) {
  return guarded([&] {
    require(path && out, "null argument");
    *out = new lcf_maps{lcflow::load_logdet_maps(path)};
  });
}

lcf_status lcf_maps_save(const lcf_maps* maps, const char* path) {
  return guarded([&] {
    require(maps && path, "null argument");
    lcflow::save_logdet_maps(path, maps->value);
  });
}

lcf_status lcf_maps_count(const lcf_maps* maps, size_t* count) {
  return guarded([&] {
    require(maps && count, "null argument");
    *count = maps->value.size();
  });
}

void lcf_maps_destroy(lcf_maps* maps) { delete maps; }

// ---------------------------------------------------------------------------
// Plans

lcf_status lcf_plan_derive(const char* strategy, size_t side, size_t channels, size_t scales, uint64_t seed,
                           const lcf_maps* maps, lcf_plan** out) {
  return guarded([&] {
    require(strategy && out, "null argument");
    const lcflow::Strategy s = lcflow::parse_strategy(strategy);
    std::span<const lcflow::Tensor> m;
    if (maps) m = maps->value;
    *out = new lcf_plan{lcflow::derive_plan(s, lcflow::Layout{side, channels}, scales, seed, m)};
  });
}

lcf_status lcf_plan_load(const char* path, lcf_plan** out) {
  return guarded([&] {
    require(path && out, "null argument");
    *out = new lcf_plan{lcflow::load_plan(path)};
  });
}

lcf_status lcf_plan_save(const lcf_plan* plan, const char* path) {
  return guarded([&] {
    require(plan && path, "null argument");
    lcflow::save_plan(path, plan->value);
  });
}

lcf_status lcf_plan_format(const lcf_plan* plan, char* buf, size_t len, size_t* needed) {
  return guarded([&] {
    require(plan, "null plan");
    const std::string text = lcflow::format_plan(plan->value);
    if (needed) *needed = text.size() + 1;
    if (buf && len > 0) {
      const std::size_t n = std::min(len - 1, text.size());
      std::memcpy(buf, text.data(), n);
      buf[n] = '\0';
    }
  });
}

void lcf_plan_destroy(lcf_plan* plan) { delete plan; }

// ---------------------------------------------------------------------------
// Training

lcf_status lcf_pretrain(const lcf_config* config, const lcf_dataset* data, lcf_model** model, lcf_maps** maps,
                        lcf_metrics** metrics) {
  return guarded([&] {
    require(config && data, "null argument");
    lcflow::PretrainResult r = lcflow::pretrain(config->value, data->value);
    if (model) *model = new lcf_model{std::move(r.model)};
    if (maps) *maps = new lcf_maps{std::move(r.logdet_maps)};
    if (metrics) *metrics = new lcf_metrics{std::move(r.metrics)};
  });
}

lcf_status lcf_train(const lcf_config* config, const lcf_dataset* data, const lcf_plan* plan, lcf_model** model,
                     lcf_metrics** metrics) {
  return guarded([&] {
    require(config && data && plan, "null argument");
    lcflow::TrainResult r = lcflow::train_with_plan(config->value, data->value, plan->value);
    if (model) *model = new lcf_model{std::move(r.model)};
    if (metrics) *metrics = new lcf_metrics{std::move(r.metrics)};
  });
}

lcf_status lcf_metrics_epochs(const lcf_metrics* metrics, size_t* count) {
  return guarded([&] {
    require(metrics && count, "null argument");
    *count = metrics->value.epochs.size();
  });
}

lcf_status lcf_metrics_epoch(const lcf_metrics* metrics, size_t index, double* train_bpd, double* valid_bpd,
                             double* seconds) {
  return guarded([&] {
    require(metrics, "null metrics");
    require(index < metrics->value.epochs.size(), "epoch index out of range");
    const auto& e = metrics->value.epochs[index];
    if (train_bpd) *train_bpd = e.train_bpd;
    if (valid_bpd) *valid_bpd = e.valid_bpd;
    if (seconds) *seconds = e.seconds;
  });
}

lcf_status lcf_metrics_save_csv(const lcf_metrics* metrics, const char* path, int timing) {
  return guarded([&] {
    require(metrics && path, "null argument");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw lcflow::IoError(std::string("cannot open ") + path + " for writing");
    out << lcflow::metrics_csv(metrics->value, timing != 0);
    if (!out) throw lcflow::IoError(std::string("failed to write ") + path);
  });
}

void lcf_metrics_destroy(lcf_metrics* metrics) { delete metrics; }

// ---------------------------------------------------------------------------
// Evaluation

lcf_status lcf_evaluate_bpd(const lcf_model* model, const lcf_dataset* data, lcf_split split, double alpha,
                            double* out_bpd) {
  return guarded([&] {
    require(model && data && out_bpd, "null argument");
    require(split == LCF_SPLIT_TRAIN || split == LCF_SPLIT_VALID, "unknown split");
    if (!(model->value.input_layout() == data->value.layout())) {
      throw lcflow::ShapeError("model layout does not match the dataset");
    }
    const lcflow::Tensor images = split == LCF_SPLIT_TRAIN ? data->value.train() : data->value.valid();
    *out_bpd = lcflow::evaluate_bpd(model->value, images, alpha);
  });
}

lcf_status lcf_sample(const lcf_model* model, size_t n, uint64_t seed, double alpha, double* out, size_t len) {
  return guarded([&] {
    require(model, "null model");
    std::mt19937_64 rng(seed);
    copy_out(lcflow::sample(model->value, n, alpha, rng).data(), out, len);
  });
}

lcf_status lcf_sample_grid(const lcf_model* model, size_t n, uint64_t seed, double alpha, const char* path) {
  return guarded([&] {
    require(model && path, "null argument");
    std::mt19937_64 rng(seed);
    const lcflow::Tensor s = lcflow::sample(model->value, n, alpha, rng);
    const lcflow::Shape one{s.dim(1), s.dim(2), s.dim(3)};
    std::vector<lcflow::Tensor> tiles;
    for (std::size_t k = 0; k < n; ++k) tiles.push_back(lcflow::slice(s, 0, k, k + 1).reshaped(one));
    lcflow::write_image_grid(tiles, path);
  });
}

lcf_status lcf_interpolate(const lcf_model* model, const double* a, const double* b, size_t dims, size_t steps,
                           double alpha, double* out, size_t len) {
  return guarded([&] {
    require(model && a && b, "null argument");
    require(dims == model->value.input_layout().dims(), "image size does not match the model");
    const lcflow::Tensor ta({1, dims}, std::vector<double>(a, a + dims));
    const lcflow::Tensor tb({1, dims}, std::vector<double>(b, b + dims));
    const auto frames = lcflow::interpolate(model->value, ta, tb, steps, alpha);
    require(out != nullptr, "output buffer is null");
    if (len < steps * dims) throw lcflow::ShapeError("output buffer too small");
    for (std::size_t k = 0; k < frames.size(); ++k) {
      std::memcpy(out + k * dims, frames[k].data().data(), dims * sizeof(double));
    }
  });
}

lcf_status lcf_interpolate_grid(const lcf_model* model, const lcf_dataset* data, size_t index_a, size_t index_b,
                                size_t steps, double alpha, const char* path) {
  return guarded([&] {
    require(model && data && path, "null argument");
    const auto& imgs = data->value.images;
    require(index_a < data->value.size() && index_b < data->value.size(), "image index out of range");
    const auto frames = lcflow::interpolate(model->value, lcflow::slice(imgs, 0, index_a, index_a + 1),
                                            lcflow::slice(imgs, 0, index_b, index_b + 1), steps, alpha);
    lcflow::write_image_grid(frames, path, steps);
  });
}

// ---------------------------------------------------------------------------
// Ablation

lcf_status lcf_ablate(const lcf_config* config, const lcf_dataset* data, size_t seeds, size_t jobs,
                      const char* out_dir, int timing, lcf_ablation** out) {
  return guarded([&] {
    require(config && data, "null argument");
    auto result = std::make_unique<lcf_ablation>();
    result->value = lcflow::run_ablation(config->value, data->value, seeds, jobs);
    for (const auto s : lcflow::ablation_order()) result->tags.emplace_back(lcflow::strategy_tag(s));
    if (out_dir) lcflow::write_ablation(result->value, out_dir, timing != 0);
    if (out) *out = result.release();
  });
}

lcf_status lcf_ablation_rows(const lcf_ablation* ablation, size_t* count) {
  return guarded([&] {
    require(ablation && count, "null argument");
    *count = ablation->value.rows.size();
  });
}

namespace {
const char* tag_of(const lcf_ablation* a, lcflow::Strategy s) {
  const auto order = lcflow::ablation_order();
  for (std::size_t k = 0; k < order.size(); ++k)
    if (order[k] == s) return a->tags[k].c_str();
  return "";
}
}  // namespace

lcf_status lcf_ablation_row(const lcf_ablation* ablation, size_t index, const char** strategy, uint64_t* seed,
                            double* final_valid_bpd) {
  return guarded([&] {
    require(ablation, "null ablation");
    require(index < ablation->value.rows.size(), "row index out of range");
    const auto& r = ablation->value.rows[index];
    if (strategy) *strategy = tag_of(ablation, r.strategy);
    if (seed) *seed = r.seed;
    if (final_valid_bpd) *final_valid_bpd = r.final_valid_bpd;
  });
}

lcf_status lcf_ablation_summary(const lcf_ablation* ablation, size_t index, const char** strategy, double* mean,
                                double* stddev) {
  return guarded([&] {
    require(ablation, "null ablation");
    require(index < ablation->value.summary.size(), "summary index out of range");
    const auto& s = ablation->value.summary[index];
    if (strategy) *strategy = tag_of(ablation, s.strategy);
    if (mean) *mean = s.mean;
    if (stddev) *stddev = s.stddev;
  });
}

void lcf_ablation_destroy(lcf_ablation* ablation) { delete ablation; }

}  // extern "C"
