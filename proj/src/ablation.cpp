#include "lcflow/ablation.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "lcflow/errors.hpp"

namespace lcflow {

namespace {

struct SeedOutcome {
  std::vector<AblationRow> rows;  // in ablation_order()
  std::vector<AblationPlan> plans;
};

SeedOutcome run_seed(TrainConfig cfg, const Dataset& data, std::uint64_t seed) {
  cfg.seed = seed;
  const PretrainResult pre = pretrain(cfg, data);
  SeedOutcome out;
  for (Strategy s : ablation_order()) {
    const auto start = std::chrono::steady_clock::now();
    FactorizationPlan plan = derive_plan(s, data.layout(), cfg.scales, seed, pre.logdet_maps);
    const TrainResult r = train_with_plan(cfg, data, plan);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    out.rows.push_back({s, seed, r.metrics.final_valid_bpd(), secs});
    out.plans.push_back({s, seed, std::move(plan)});
  }
  return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("failed to write " + path.string());
}

}  // namespace

std::vector<Strategy> ablation_order() {
  return {Strategy::random, Strategy::reverse_lcma, Strategy::static_realnvp, Strategy::lcma};
}

AblationResult run_ablation(const TrainConfig& config, const Dataset& data, std::size_t seeds,
                            std::size_t jobs) {
  if (seeds == 0) throw InvalidArgumentError("ablation needs at least one seed");
  config.validate();
  validate_dataset(data);
  std::vector<SeedOutcome> outcomes(seeds);

  if (jobs <= 1) {
    for (std::size_t k = 0; k < seeds; ++k) outcomes[k] = run_seed(config, data, config.seed + k);
  } else {
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto worker = [&] {
      for (std::size_t k = next++; k < seeds; k = next++) {
        try {
          outcomes[k] = run_seed(config, data, config.seed + k);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    };
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < std::min(jobs, seeds); ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
  }

  AblationResult result;
  const auto order = ablation_order();
  for (std::size_t si = 0; si < order.size(); ++si) {
    AblationSummary sum{order[si], 0.0, 0.0, seeds};
    for (const auto& o : outcomes) {
      result.rows.push_back(o.rows[si]);
      result.plans.push_back(o.plans[si]);
      sum.mean += o.rows[si].final_valid_bpd;
    }
    sum.mean /= static_cast<double>(seeds);
    if (seeds > 1) {
      double ss = 0.0;
      for (const auto& o : outcomes) ss += (o.rows[si].final_valid_bpd - sum.mean) * (o.rows[si].final_valid_bpd - sum.mean);
      sum.stddev = std::sqrt(ss / static_cast<double>(seeds - 1));
    }
    result.summary.push_back(sum);
  }
  return result;
}

std::string ablation_csv(const AblationResult& result, bool timing) {
  std::ostringstream out;
  out.precision(17);
  out << "strategy,seed,final_valid_bpd,seconds\n";
  for (const auto& r : result.rows) {
    out << strategy_tag(r.strategy) << "," << r.seed << "," << r.final_valid_bpd << ",";
    if (timing) out << r.seconds;
    out << "\n";
  }
  return out.str();
}

std::string ablation_summary_csv(const AblationResult& result) {
  std::ostringstream out;
  out.precision(17);
  out << "strategy,runs,mean_bpd,std_bpd\n";
  for (const auto& s : result.summary) {
    out << strategy_tag(s.strategy) << "," << s.runs << "," << s.mean << "," << s.stddev << "\n";
  }
  return out.str();
}

void write_ablation(const AblationResult& result, const std::filesystem::path& dir, bool timing) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "plans", ec);
  if (ec) throw IoError("cannot create " + (dir / "plans").string() + ": " + ec.message());
  write_text(dir / "ablation.csv", ablation_csv(result, timing));
  write_text(dir / "ablation_summary.csv", ablation_summary_csv(result));
  for (const auto& p : result.plans) {
    save_plan(dir / "plans" / (std::string(strategy_tag(p.strategy)) + "_seed" + std::to_string(p.seed) + ".ffplan"),
              p.plan);
  }
}

}  // namespace lcflow
