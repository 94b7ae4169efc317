#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lcflow/data.hpp"
#include "lcflow/plan.hpp"
#include "lcflow/train.hpp"

namespace lcflow {

struct AblationRow {
  Strategy strategy = Strategy::lcma;
  std::uint64_t seed = 0;
  double final_valid_bpd = 0.0;
  double seconds = 0.0;
};

struct AblationSummary {
  Strategy strategy = Strategy::lcma;
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation, 0 for a single run
  std::size_t runs = 0;
};

struct AblationPlan {
  Strategy strategy = Strategy::lcma;
  std::uint64_t seed = 0;
  FactorizationPlan plan;
};

struct AblationResult {
  std::vector<AblationRow> rows;  // strategy-major in ablation_order(), then by seed
  std::vector<AblationSummary> summary;
  std::vector<AblationPlan> plans;
};

// random, reverse-lcma, static-realnvp, lcma.
std::vector<Strategy> ablation_order();

// Runs seeds config.seed .. config.seed + seeds - 1. Each seed pretrains once,
// derives all four plans, and trains each plan with that seed. With jobs > 1
// seeds run on separate threads; results do not depend on `jobs`.
AblationResult run_ablation(const TrainConfig& config, const Dataset& data, std::size_t seeds,
                            std::size_t jobs = 1);

// Columns strategy,seed,final_valid_bpd,seconds. Seconds are blank unless
// `timing`, keeping the file a function of the seeds alone.
std::string ablation_csv(const AblationResult& result, bool timing);
// Columns strategy,runs,mean_bpd,std_bpd.
std::string ablation_summary_csv(const AblationResult& result);

// Writes ablation.csv, ablation_summary.csv and plans/<strategy>_seed<k>.ffplan.
void write_ablation(const AblationResult& result, const std::filesystem::path& dir, bool timing);

}  // namespace lcflow
