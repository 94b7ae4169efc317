#include "lcflow/plan.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "lcflow/errors.hpp"

namespace lcflow {

namespace {

std::vector<std::size_t> select(std::span<const std::size_t> v, std::span<const std::size_t> idx) {
  std::vector<std::size_t> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(v[i]);
  return out;
}

Layout kept_layout(const Layout& live) {
  const Layout sq = squeezed(live);
  return Layout{sq.side, sq.channels / 2};
}

Layout map_layout(const Tensor& map) {
  if (map.rank() != 3 || map.dim(0) != map.dim(1)) {
    throw ShapeError("log-det map must be shaped [s, s, c], got " + shape_str(map.shape()));
  }
  return Layout{map.dim(0), map.dim(2)};
}

}  // namespace

std::string_view strategy_tag(Strategy s) {
  switch (s) {
    case Strategy::lcma: return "lcma";
    case Strategy::static_realnvp: return "static-realnvp";
    case Strategy::random: return "random";
    case Strategy::reverse_lcma: return "reverse-lcma";
  }
  return "unknown";
}

Strategy parse_strategy(std::string_view tag) {
  if (tag == "lcma") return Strategy::lcma;
  if (tag == "static-realnvp" || tag == "static") return Strategy::static_realnvp;
  if (tag == "random") return Strategy::random;
  if (tag == "reverse-lcma" || tag == "reverse") return Strategy::reverse_lcma;
  throw InvalidArgumentError("unknown strategy '" + std::string(tag) + "'");
}

std::vector<FactorSpec> FactorizationPlan::factor_specs() const {
  std::vector<FactorSpec> out;
  for (const auto& s : scales) out.push_back({s.keep, s.factor});
  return out;
}

BlockSplit rank_blocks(const Tensor& logdet_map, bool reverse) {
  const Layout in = map_layout(logdet_map);
  const Layout sq = squeezed(in);
  BlockSplit split;
  split.keep.reserve(in.dims() / 2);
  split.factor.reserve(in.dims() / 2);
  std::array<std::size_t, 4> order{};
  std::array<double, 4> val{};
  for (std::size_t i = 0; i < sq.side; ++i) {
    for (std::size_t j = 0; j < sq.side; ++j) {
      for (std::size_t ch = 0; ch < in.channels; ++ch) {
        for (std::size_t sub = 0; sub < 4; ++sub) {
          val[sub] = logdet_map[in.index(2 * i + sub / 2, 2 * j + sub % 2, ch)];
        }
        std::iota(order.begin(), order.end(), std::size_t{0});
        // Stable sort keeps raster order among equal values.
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
          return reverse ? val[a] < val[b] : val[a] > val[b];
        });
        for (std::size_t r = 0; r < 4; ++r) {
          const std::size_t idx = sq.index(i, j, ch * 4 + order[r]);
          (r < 2 ? split.keep : split.factor).push_back(idx);
        }
      }
    }
  }
  return split;
}

std::vector<Tensor> boundary_logdet_maps(const FlowModel& model, const Tensor& batch) {
  const Layout in = model.input_layout();
  const Tensor x = as_batch(batch, in);
  const std::size_t rows = x.dim(0);
  if (rows == 0) throw InvalidArgumentError("reference batch is empty");
  const std::size_t n_bound = model.boundaries().size();
  std::vector<std::vector<double>> sums(n_bound, std::vector<double>(in.dims(), 0.0));
  constexpr std::size_t chunk = 512;
  for (std::size_t start = 0; start < rows; start += chunk) {
    const std::size_t end = std::min(rows, start + chunk);
    const ForwardResult r = flow_forward(model, slice(x, 0, start, end));
    for (std::size_t k = 0; k < n_bound; ++k) {
      const Tensor& m = r.boundary_maps[k];
      for (std::size_t b = 0; b < end - start; ++b)
        for (std::size_t d = 0; d < in.dims(); ++d) sums[k][d] += m[b * in.dims() + d];
    }
  }
  std::vector<Tensor> maps;
  for (auto& s : sums) {
    for (auto& v : s) v /= static_cast<double>(rows);
    maps.emplace_back(Shape{in.side, in.side, in.channels}, std::move(s));
  }
  return maps;
}

FactorizationPlan derive_plan_from_maps(Strategy strategy, const Layout& input,
                                        std::span<const Tensor> boundary_maps) {
  if (strategy != Strategy::lcma && strategy != Strategy::reverse_lcma) {
    throw InvalidArgumentError("map-driven plans are lcma or reverse-lcma");
  }
  if (boundary_maps.empty()) throw InvalidArgumentError("no log-det maps to plan from");
  const bool reverse = strategy == Strategy::reverse_lcma;
  scale_layouts(input, boundary_maps.size(), true);  // layout underflow check

  FactorizationPlan plan;
  plan.strategy = strategy;
  std::vector<std::size_t> origin(input.dims());
  std::iota(origin.begin(), origin.end(), std::size_t{0});
  Layout live = input;
  for (std::size_t k = 0; k < boundary_maps.size(); ++k) {
    const Tensor& full = boundary_maps[k];
    if (full.numel() != input.dims()) {
      throw ShapeError("log-det map " + std::to_string(k + 1) + " does not match input layout " + input.str());
    }
    // Restrict the boundary map to the dims still live, in live order.
    std::vector<double> restricted(origin.size());
    for (std::size_t d = 0; d < origin.size(); ++d) restricted[d] = full[origin[d]];
    const Tensor map(Shape{live.side, live.side, live.channels}, std::move(restricted));
    BlockSplit split = rank_blocks(map, reverse);

    const auto sq_origin = select(origin, squeeze_permutation(live));
    origin = select(sq_origin, split.keep);
    plan.scales.push_back({k + 1, live, std::move(split.keep), std::move(split.factor)});
    live = kept_layout(live);
  }
  return plan;
}

FactorizationPlan derive_plan_lcma(const FlowModel& pretrained, const Tensor& reference_batch) {
  if (pretrained.factor_count() != 0) {
    throw InvalidArgumentError("LCMA planning expects a model without factor layers");
  }
  if (pretrained.boundaries().empty()) throw InvalidArgumentError("pretrained model has no scale boundaries");
  const auto maps = boundary_logdet_maps(pretrained, reference_batch);
  return derive_plan_from_maps(Strategy::lcma, pretrained.input_layout(), maps);
}

FactorizationPlan derive_plan_baseline(Strategy strategy, const Layout& input, std::size_t scales,
                                       std::uint64_t seed, std::span<const Tensor> maps) {
  if (scales == 0) throw InvalidArgumentError("a plan needs at least one scale");
  if (strategy == Strategy::reverse_lcma) {
    if (maps.size() < scales) throw InvalidArgumentError("reverse-lcma needs one log-det map per scale");
    return derive_plan_from_maps(strategy, input, maps.first(scales));
  }
  if (strategy != Strategy::static_realnvp && strategy != Strategy::random) {
    throw InvalidArgumentError("unknown baseline strategy '" + std::string(strategy_tag(strategy)) + "'");
  }
  const auto layouts = scale_layouts(input, scales, true);
  FactorizationPlan plan;
  plan.strategy = strategy;
  plan.seed = strategy == Strategy::random ? seed : 0;
  std::mt19937_64 rng(seed);
  for (std::size_t k = 0; k < scales; ++k) {
    const Layout live = layouts[k];
    const Layout sq = squeezed(live);
    ScaleSplit split{k + 1, live, {}, {}};
    if (strategy == Strategy::static_realnvp) {
      const std::size_t half = sq.channels / 2;
      for (std::size_t p = 0; p < sq.side * sq.side; ++p)
        for (std::size_t ch = 0; ch < sq.channels; ++ch)
          (ch < half ? split.keep : split.factor).push_back(p * sq.channels + ch);
    } else {
      std::vector<std::size_t> idx(sq.dims());
      std::iota(idx.begin(), idx.end(), std::size_t{0});
      std::shuffle(idx.begin(), idx.end(), rng);
      const auto mid = idx.begin() + static_cast<std::ptrdiff_t>(idx.size() / 2);
      split.keep.assign(idx.begin(), mid);
      split.factor.assign(mid, idx.end());
      std::sort(split.keep.begin(), split.keep.end());
      std::sort(split.factor.begin(), split.factor.end());
    }
    plan.scales.push_back(std::move(split));
  }
  return plan;
}

FactorizationPlan derive_plan(Strategy strategy, const Layout& input, std::size_t scales,
                              std::uint64_t seed, std::span<const Tensor> maps) {
  if (strategy == Strategy::lcma) {
    if (maps.size() < scales) throw InvalidArgumentError("lcma needs one log-det map per scale");
    return derive_plan_from_maps(strategy, input, maps.first(scales));
  }
  return derive_plan_baseline(strategy, input, scales, seed, maps);
}

void validate_plan(const FactorizationPlan& plan) {
  if (plan.scales.empty()) throw InvalidArgumentError("plan has no scales");
  Layout expected = plan.scales.front().layout;
  for (std::size_t k = 0; k < plan.scales.size(); ++k) {
    const ScaleSplit& s = plan.scales[k];
    if (s.scale != k + 1) throw InvalidArgumentError("plan scales must be numbered 1..K in order");
    if (!(s.layout == expected)) {
      throw InvalidArgumentError("scale " + std::to_string(s.scale) + " layout " + s.layout.str() +
                                 " does not follow the previous scale (" + expected.str() + ")");
    }
    Layout sq;
    try {
      sq = squeezed(s.layout);
    } catch (const ShapeError& e) {
      throw InvalidArgumentError(e.what());
    }
    if (s.keep.size() != s.factor.size() || s.keep.size() * 2 != sq.dims()) {
      throw InvalidArgumentError("scale " + std::to_string(s.scale) + " does not split its dims in half");
    }
    std::vector<std::uint8_t> hit(sq.dims(), 0);
    for (const auto* list : {&s.keep, &s.factor}) {
      for (auto i : *list) {
        if (i >= sq.dims() || hit[i]++) {
          throw InvalidArgumentError("scale " + std::to_string(s.scale) + " indices do not partition the layout");
        }
      }
    }
    expected = Layout{sq.side, sq.channels / 2};
  }
}

// ---------------------------------------------------------------------------
// Text format

namespace {

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(v[i]);
  }
  return s;
}

std::vector<std::size_t> split_csv(std::string_view text) {
  std::vector<std::size_t> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t comma = std::min(text.find(',', pos), text.size());
    const std::string item(text.substr(pos, comma - pos));
    std::size_t used = 0;
    std::size_t v = 0;
    try {
      v = std::stoull(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (item.empty() || used != item.size()) throw CorruptFileError("bad index '" + item + "' in plan");
    out.push_back(v);
    pos = comma + 1;
  }
  return out;
}

}  // namespace

std::string format_plan(const FactorizationPlan& plan) {
  std::ostringstream out;
  out << "FFPLAN v1\n";
  out << "strategy=" << strategy_tag(plan.strategy) << "\n";
  out << "seed=" << plan.seed << "\n";
  for (const auto& s : plan.scales) {
    out << "scale=" << s.scale << " layout=" << s.layout.str() << " keep=" << join(s.keep)
        << " factor=" << join(s.factor) << "\n";
  }
  return out.str();
}

FactorizationPlan parse_plan(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != "FFPLAN v1") throw CorruptFileError("missing 'FFPLAN v1' header");
  FactorizationPlan plan;
  bool have_strategy = false, have_seed = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      if (line.rfind("strategy=", 0) == 0) {
        plan.strategy = parse_strategy(line.substr(9));
        have_strategy = true;
      } else if (line.rfind("seed=", 0) == 0) {
        plan.seed = std::stoull(line.substr(5));
        have_seed = true;
      } else if (line.rfind("scale=", 0) == 0) {
        std::istringstream fields(line);
        std::string tok;
        ScaleSplit s;
        int seen = 0;
        while (fields >> tok) {
          const auto eq = tok.find('=');
          if (eq == std::string::npos) throw CorruptFileError("malformed plan field '" + tok + "'");
          const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
          if (key == "scale") s.scale = std::stoull(val), seen |= 1;
          else if (key == "layout") s.layout = Layout::parse(val), seen |= 2;
          else if (key == "keep") s.keep = split_csv(val), seen |= 4;
          else if (key == "factor") s.factor = split_csv(val), seen |= 8;
          else throw CorruptFileError("unknown plan field '" + key + "'");
        }
        if (seen != 15) throw CorruptFileError("incomplete scale line in plan");
        plan.scales.push_back(std::move(s));
      } else {
        throw CorruptFileError("unexpected plan line '" + line + "'");
      }
    } catch (const InvalidArgumentError& e) {
      throw CorruptFileError(e.what());
    } catch (const std::logic_error&) {
      throw CorruptFileError("malformed number in plan line '" + line + "'");
    }
  }
  if (!have_strategy || !have_seed) throw CorruptFileError("plan lacks strategy= or seed= line");
  try {
    validate_plan(plan);
  } catch (const InvalidArgumentError& e) {
    throw CorruptFileError(std::string("invalid plan: ") + e.what());
  }
  return plan;
}

void save_logdet_maps(const std::filesystem::path& path, std::span<const Tensor> maps) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write("FFMAPS", 6);
  write_u32(out, static_cast<std::uint32_t>(maps.size()));
  for (const auto& m : maps) write_tensor(out, m);
  if (!out) throw IoError("failed to write " + path.string());
}

std::vector<Tensor> load_logdet_maps(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  expect_magic(in, "FFMAPS");
  const std::uint32_t count = read_u32(in);
  if (count > 64) throw CorruptFileError("implausible log-det map count");
  std::vector<Tensor> maps;
  for (std::uint32_t k = 0; k < count; ++k) {
    maps.push_back(read_tensor(in));
    if (maps.back().rank() != 3) throw CorruptFileError("log-det map must be shaped [s, s, c]");
  }
  return maps;
}

void save_plan(const std::filesystem::path& path, const FactorizationPlan& plan) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << format_plan(plan);
  if (!out) throw IoError("failed to write " + path.string());
}

FactorizationPlan load_plan(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_plan(ss.str());
}

}  // namespace lcflow
