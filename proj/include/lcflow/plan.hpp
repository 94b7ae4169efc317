#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lcflow/flow.hpp"
#include "lcflow/tensor.hpp"

namespace lcflow {

enum class Strategy { lcma, static_realnvp, random, reverse_lcma };

// Canonical tags: "lcma", "static-realnvp", "random", "reverse-lcma".
std::string_view strategy_tag(Strategy s);
// Also accepts the short forms "static" and "reverse".
Strategy parse_strategy(std::string_view tag);

// Keep/factor split of one scale. `layout` is the live layout entering the
// scale; indices address its squeezed layout.
struct ScaleSplit {
  std::size_t scale = 0;  // 1-based
  Layout layout;
  std::vector<std::size_t> keep;
  std::vector<std::size_t> factor;

  friend bool operator==(const ScaleSplit&, const ScaleSplit&) = default;
};

struct FactorizationPlan {
  Strategy strategy = Strategy::lcma;
  std::uint64_t seed = 0;
  std::vector<ScaleSplit> scales;

  Layout input_layout() const { return scales.front().layout; }
  std::vector<FactorSpec> factor_specs() const;

  friend bool operator==(const FactorizationPlan&, const FactorizationPlan&) = default;
};

struct BlockSplit {
  std::vector<std::size_t> keep;
  std::vector<std::size_t> factor;
};

// Ranks the four entries of every 2x2 block of every channel of an s x s x c
// log-det map. The two highest go to keep, the two lowest to factor (swapped
// when `reverse`). Ties go to the earlier sub-pixel in raster order. Indices
// are in the squeezed s/2 x s/2 x 4c layout, ordered by position, channel,
// then rank.
BlockSplit rank_blocks(const Tensor& logdet_map, bool reverse = false);

// Mean per-dim log-det at each scale boundary of `model` over `batch`
// ([B, D]), each shaped [s, s, c] in input layout.
std::vector<Tensor> boundary_logdet_maps(const FlowModel& model, const Tensor& batch);

// Recursive ranking plan (lcma or reverse-lcma) from boundary maps in input
// layout; map k drives the split at scale k over the dims still live.
FactorizationPlan derive_plan_from_maps(Strategy strategy, const Layout& input,
                                        std::span<const Tensor> boundary_maps);

// LCMA plan from an unfactored pretrained model and a reference batch.
FactorizationPlan derive_plan_lcma(const FlowModel& pretrained, const Tensor& reference_batch);

// static-realnvp, random(seed) or reverse-lcma (which needs `maps`).
FactorizationPlan derive_plan_baseline(Strategy strategy, const Layout& input, std::size_t scales,
                                       std::uint64_t seed, std::span<const Tensor> maps = {});

// Any strategy; lcma and reverse-lcma need `maps`.
FactorizationPlan derive_plan(Strategy strategy, const Layout& input, std::size_t scales,
                              std::uint64_t seed, std::span<const Tensor> maps);

// Throws InvalidArgumentError unless every scale partitions its live dims
// into equal halves and the layouts chain.
void validate_plan(const FactorizationPlan& plan);

// "FFMAPS" + u32 count + that many FFT1 tensors.
void save_logdet_maps(const std::filesystem::path& path, std::span<const Tensor> maps);
std::vector<Tensor> load_logdet_maps(const std::filesystem::path& path);

// "FFPLAN v1" text format.
std::string format_plan(const FactorizationPlan& plan);
FactorizationPlan parse_plan(std::string_view text);
void save_plan(const std::filesystem::path& path, const FactorizationPlan& plan);
FactorizationPlan load_plan(const std::filesystem::path& path);

}  // namespace lcflow
