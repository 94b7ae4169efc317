// Command-line front end. Talks to the library only through lcflow.h.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "lcflow/lcflow.h"

namespace fs = std::filesystem;

namespace {

// Library failure carrying its status; mapped to the process exit code.
struct Failure {
  lcf_status status;
  std::string message;
};

void check(lcf_status s) {
  if (s != LCF_OK) throw Failure{s, lcf_last_error()};
}

// RAII owner of a C handle.
template <typename T, void (*Destroy)(T*)>
class Handle {
 public:
  Handle() = default;
  Handle(const Handle&) = delete;
  Handle& operator=(const Handle&) = delete;
  ~Handle() {
    if (p_) Destroy(p_);
  }
  T** out() { return &p_; }
  T* get() const { return p_; }

 private:
  T* p_ = nullptr;
};

using Config = Handle<lcf_config, lcf_config_destroy>;
using Dataset = Handle<lcf_dataset, lcf_dataset_destroy>;
using Model = Handle<lcf_model, lcf_model_destroy>;
using Maps = Handle<lcf_maps, lcf_maps_destroy>;
using Plan = Handle<lcf_plan, lcf_plan_destroy>;
using Metrics = Handle<lcf_metrics, lcf_metrics_destroy>;
using Ablation = Handle<lcf_ablation, lcf_ablation_destroy>;

struct Options {
  std::string config;
  std::string data;
  std::string model;
  std::string plan;
  std::string maps;
  std::string out = ".";
  std::optional<std::uint64_t> seed;
  std::string strategy = "lcma";
  std::size_t seeds = 5;
  std::size_t steps = 8;
  std::size_t n = 1000;
  std::size_t jobs = 1;
  std::string layout = "8x8x1";
  double structure = 1.0;
  double valid_fraction = 0.2;
  std::string split = "valid";
  std::size_t index_a = 0;
  std::size_t index_b = 1;
  bool timing = false;
};

void load_config(const Options& o, Config& cfg) {
  if (o.config.empty()) check(lcf_config_create(cfg.out()));
  else check(lcf_config_load(o.config.c_str(), cfg.out()));
  if (o.seed) check(lcf_config_set(cfg.get(), "seed", std::to_string(*o.seed).c_str()));
}

std::string config_value(const Config& cfg, const char* key) {
  char buf[64];
  check(lcf_config_get(cfg.get(), key, buf, sizeof buf));
  return buf;
}

double alpha_of(const Config& cfg) { return std::stod(config_value(cfg, "dequant_alpha")); }
std::size_t scales_of(const Config& cfg) { return std::stoull(config_value(cfg, "scales")); }
std::uint64_t seed_of(const Config& cfg) { return std::stoull(config_value(cfg, "seed")); }

std::string out_path(const Options& o, const std::string& name) {
  fs::create_directories(o.out);
  return (fs::path(o.out) / name).string();
}

void parse_layout(const std::string& text, std::size_t& side, std::size_t& channels) {
  std::size_t a = 0, b = 0, c = 0;
  char x1 = 0, x2 = 0;
  if (std::sscanf(text.c_str(), "%zu%c%zu%c%zu", &a, &x1, &b, &x2, &c) != 5 || x1 != 'x' || x2 != 'x' || a != b) {
    throw CLI::ValidationError("--layout", "expected <s>x<s>x<c>, got '" + text + "'");
  }
  side = a;
  channels = c;
}

void print_final(const Metrics& m, const char* label) {
  std::size_t count = 0;
  check(lcf_metrics_epochs(m.get(), &count));
  double train = 0, valid = 0;
  check(lcf_metrics_epoch(m.get(), count - 1, &train, &valid, nullptr));
  std::printf("%s: %zu epochs, train %.4f bits/dim, valid %.4f bits/dim\n", label, count - 1, train, valid);
}

void cmd_gen_data(const Options& o) {
  std::size_t side = 0, channels = 0;
  parse_layout(o.layout, side, channels);
  Dataset d;
  check(lcf_dataset_generate(o.n, side, channels, o.seed.value_or(0), o.structure, o.valid_fraction, d.out()));
  const std::string path = out_path(o, "data.fft");
  check(lcf_dataset_save(d.get(), path.c_str()));
  check(lcf_dataset_write_grid(d.get(), std::min<std::size_t>(o.n, 64), out_path(o, "data_preview.pgm").c_str()));
  std::printf("wrote %s (%zu images %s)\n", path.c_str(), o.n, o.layout.c_str());
}

void cmd_pretrain(const Options& o) {
  Config cfg;
  load_config(o, cfg);
  Dataset d;
  check(lcf_dataset_load(o.data.c_str(), d.out()));
  Model m;
  Maps maps;
  Metrics metrics;
  check(lcf_pretrain(cfg.get(), d.get(), m.out(), maps.out(), metrics.out()));
  check(lcf_model_save(m.get(), out_path(o, "pretrained.ffm").c_str()));
  check(lcf_maps_save(maps.get(), out_path(o, "logdet_maps.ffmaps").c_str()));
  check(lcf_metrics_save_csv(metrics.get(), out_path(o, "pretrain_metrics.csv").c_str(), o.timing));
  print_final(metrics, "pretrain");
}

void cmd_plan(const Options& o) {
  Config cfg;
  load_config(o, cfg);
  std::size_t side = 0, channels = 0;
  Dataset d;
  if (!o.data.empty()) {
    check(lcf_dataset_load(o.data.c_str(), d.out()));
    check(lcf_dataset_info(d.get(), nullptr, nullptr, &side, &channels));
  } else {
    parse_layout(o.layout, side, channels);
  }
  Maps maps;
  if (!o.maps.empty()) {
    check(lcf_maps_load(o.maps.c_str(), maps.out()));
  } else if (!o.model.empty()) {
    if (!d.get()) throw CLI::RequiredError("--data (needed with --model to compute log-det maps)");
    Model m;
    check(lcf_model_load(o.model.c_str(), m.out()));
    check(lcf_maps_compute(m.get(), cfg.get(), d.get(), maps.out()));
  }
  Plan p;
  check(lcf_plan_derive(o.strategy.c_str(), side, channels, scales_of(cfg), seed_of(cfg), maps.get(), p.out()));
  const std::string path = out_path(o, "plan.ffplan");
  check(lcf_plan_save(p.get(), path.c_str()));
  std::printf("wrote %s\n", path.c_str());
}

void cmd_train(const Options& o) {
  Config cfg;
  load_config(o, cfg);
  Dataset d;
  check(lcf_dataset_load(o.data.c_str(), d.out()));
  Plan p;
  check(lcf_plan_load(o.plan.c_str(), p.out()));
  Model m;
  Metrics metrics;
  check(lcf_train(cfg.get(), d.get(), p.get(), m.out(), metrics.out()));
  check(lcf_model_save(m.get(), out_path(o, "model.ffm").c_str()));
  check(lcf_metrics_save_csv(metrics.get(), out_path(o, "metrics.csv").c_str(), o.timing));
  print_final(metrics, "train");
}

void cmd_eval(const Options& o) {
  Config cfg;
  load_config(o, cfg);
  Model m;
  check(lcf_model_load(o.model.c_str(), m.out()));
  Dataset d;
  check(lcf_dataset_load(o.data.c_str(), d.out()));
  double bpd = 0;
  check(lcf_evaluate_bpd(m.get(), d.get(), o.split == "train" ? LCF_SPLIT_TRAIN : LCF_SPLIT_VALID, alpha_of(cfg),
                         &bpd));
  std::printf("%.6f\n", bpd);
}

void cmd_sample(const Options& o) {
  Config cfg;
  load_config(o, cfg);
  Model m;
  check(lcf_model_load(o.model.c_str(), m.out()));
  const std::string path = out_path(o, "samples.pgm");
  check(lcf_sample_grid(m.get(), o.n, seed_of(cfg), alpha_of(cfg), path.c_str()));
  std::printf("wrote %s\n", path.c_str());
}

void cmd_interpolate(const Options& o) {
  Config cfg;
  load_config(o, cfg);
  Model m;
  check(lcf_model_load(o.model.c_str(), m.out()));
  Dataset d;
  check(lcf_dataset_load(o.data.c_str(), d.out()));
  const std::string path = out_path(o, "interpolation.pgm");
  check(lcf_interpolate_grid(m.get(), d.get(), o.index_a, o.index_b, o.steps, alpha_of(cfg), path.c_str()));
  std::printf("wrote %s\n", path.c_str());
}

void cmd_ablate(const Options& o) {
  Config cfg;
  load_config(o, cfg);
  Dataset d;
  check(lcf_dataset_load(o.data.c_str(), d.out()));
  fs::create_directories(o.out);
  Ablation a;
  check(lcf_ablate(cfg.get(), d.get(), o.seeds, o.jobs, o.out.c_str(), o.timing, a.out()));
  std::printf("%-16s %s\n", "strategy", "valid bits/dim (mean +- std)");
  for (std::size_t k = 0; k < 4; ++k) {
    const char* tag = nullptr;
    double mean = 0, sd = 0;
    check(lcf_ablation_summary(a.get(), k, &tag, &mean, &sd));
    std::printf("%-16s %.4f +- %.4f\n", tag, mean, sd);
  }
  std::printf("wrote %s\n", (fs::path(o.out) / "ablation.csv").string().c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Normalizing flows with likelihood-contribution based multi-scale factorization"};
  app.require_subcommand(1, 1);
  Options o;

  auto add_config = [&](CLI::App* c) {
    c->add_option("--config", o.config, "key=value training config");
    c->add_option("--seed", o.seed, "overrides the config seed");
  };
  auto add_out = [&](CLI::App* c) { c->add_option("--out", o.out, "output directory"); };
  auto add_data = [&](CLI::App* c, bool required) {
    auto* opt = c->add_option("--data", o.data, "dataset file");
    if (required) opt->required();
  };
  auto add_model = [&](CLI::App* c, bool required) {
    auto* opt = c->add_option("--model", o.model, "model file");
    if (required) opt->required();
  };

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic blob dataset");
  gen->add_option("--n", o.n, "number of images");
  gen->add_option("--layout,--size", o.layout, "image layout <s>x<s>x<c>");
  gen->add_option("--seed", o.seed, "generator seed");
  gen->add_option("--structure", o.structure, "structure level in [0, 1]");
  gen->add_option("--valid-fraction", o.valid_fraction, "fraction held out for validation");
  add_out(gen);
  gen->callback([&] { cmd_gen_data(o); });

  auto* pre = app.add_subcommand("pretrain", "train the unfactored model and record log-det maps");
  add_config(pre);
  add_data(pre, true);
  add_out(pre);
  pre->add_flag("--timing", o.timing, "record wall-clock seconds in the metrics");
  pre->callback([&] { cmd_pretrain(o); });

  auto* plan = app.add_subcommand("plan", "derive a factorization plan");
  add_config(plan);
  plan->add_option("--strategy", o.strategy, "lcma, static, random or reverse")->required();
  add_data(plan, false);
  add_model(plan, false);
  plan->add_option("--maps", o.maps, "log-det maps from pretrain");
  plan->add_option("--layout", o.layout, "input layout when no --data is given");
  add_out(plan);
  plan->callback([&] { cmd_plan(o); });

  auto* train = app.add_subcommand("train", "train a fresh model with a plan");
  add_config(train);
  add_data(train, true);
  train->add_option("--plan", o.plan, "plan file")->required();
  add_out(train);
  train->add_flag("--timing", o.timing, "record wall-clock seconds in the metrics");
  train->callback([&] { cmd_train(o); });

  auto* eval = app.add_subcommand("eval", "print bits/dim of a model on a dataset split");
  add_config(eval);
  add_model(eval, true);
  add_data(eval, true);
  eval->add_option("--split", o.split, "train or valid")->check(CLI::IsMember({"train", "valid"}));
  eval->callback([&] { cmd_eval(o); });

  auto* smp = app.add_subcommand("sample", "draw samples into an image grid");
  add_config(smp);
  add_model(smp, true);
  smp->add_option("--n", o.n, "number of samples")->default_val(16);
  add_out(smp);
  smp->callback([&] { cmd_sample(o); });

  auto* interp = app.add_subcommand("interpolate", "decode a latent-space line between two images");
  add_config(interp);
  add_model(interp, true);
  add_data(interp, true);
  interp->add_option("--steps", o.steps, "frames including both endpoints");
  interp->add_option("--a", o.index_a, "index of the first image");
  interp->add_option("--b", o.index_b, "index of the second image");
  add_out(interp);
  interp->callback([&] { cmd_interpolate(o); });

  auto* abl = app.add_subcommand("ablate", "compare all four factorization strategies over seeds");
  add_config(abl);
  add_data(abl, true);
  abl->add_option("--seeds", o.seeds, "number of seeds, starting at the config seed");
  abl->add_option("--jobs", o.jobs, "seeds run in parallel");
  add_out(abl);
  abl->add_flag("--timing", o.timing, "record wall-clock seconds in the CSV");
  abl->callback([&] { cmd_ablate(o); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // Prints help for --help, otherwise the error and a usage hint.
    return app.exit(e) == 0 ? 0 : 2;
  } catch (const Failure& f) {
    std::cerr << "error: " << lcf_status_string(f.status) << ": " << f.message << "\n";
    return f.status == LCF_ERR_DIVERGED ? 3 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
