#include "lcflow/flow.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "lcflow/errors.hpp"

namespace lcflow {

namespace {

std::vector<std::size_t> iota_index(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

std::vector<std::size_t> select(std::span<const std::size_t> v, std::span<const std::size_t> idx) {
  std::vector<std::size_t> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(v[i]);
  return out;
}

// Position of each dim of the merged vector inside concat(first, second).
std::vector<std::size_t> merge_positions(std::span<const std::size_t> first,
                                         std::span<const std::size_t> second) {
  std::vector<std::size_t> pos(first.size() + second.size());
  for (std::size_t i = 0; i < first.size(); ++i) pos[first[i]] = i;
  for (std::size_t i = 0; i < second.size(); ++i) pos[second[i]] = first.size() + i;
  return pos;
}

void check_partition(std::size_t dims, std::span<const std::size_t> a, std::span<const std::size_t> b) {
  std::vector<std::uint8_t> hit(dims, 0);
  for (auto span : {a, b}) {
    for (auto i : span) {
      if (i >= dims) throw ShapeError("factor index " + std::to_string(i) + " out of range");
      if (hit[i]++) throw ShapeError("factor index " + std::to_string(i) + " listed twice");
    }
  }
  if (a.size() + b.size() != dims) throw ShapeError("factor indices do not cover the layout");
}

Tensor zeros_like_rows(std::size_t rows, std::size_t cols) { return Tensor({rows, cols}, 0.0); }

}  // namespace

// ---------------------------------------------------------------------------
// Layout and squeeze

std::string Layout::str() const {
  return std::to_string(side) + "x" + std::to_string(side) + "x" + std::to_string(channels);
}

Layout Layout::parse(std::string_view text) {
  std::size_t a = 0, b = 0, c = 0;
  char x1 = 0, x2 = 0;
  std::istringstream in{std::string(text)};
  if (!(in >> a >> x1 >> b >> x2 >> c) || x1 != 'x' || x2 != 'x' || a != b || a == 0 || c == 0) {
    throw InvalidArgumentError("bad layout '" + std::string(text) + "', expected <s>x<s>x<c>");
  }
  std::string rest;
  if (in >> rest) throw InvalidArgumentError("bad layout '" + std::string(text) + "'");
  return Layout{a, c};
}

Layout squeezed(const Layout& in) {
  if (in.side < 2 || in.side % 2 != 0) {
    throw ShapeError("cannot squeeze layout " + in.str() + ": side must be even");
  }
  return Layout{in.side / 2, in.channels * 4};
}

std::vector<std::size_t> squeeze_permutation(const Layout& in) {
  const Layout out = squeezed(in);
  std::vector<std::size_t> perm(in.dims());
  for (std::size_t i = 0; i < out.side; ++i)
    for (std::size_t j = 0; j < out.side; ++j)
      for (std::size_t ch = 0; ch < in.channels; ++ch)
        for (std::size_t sub = 0; sub < 4; ++sub)
          perm[out.index(i, j, ch * 4 + sub)] = in.index(2 * i + sub / 2, 2 * j + sub % 2, ch);
  return perm;
}

std::vector<std::size_t> invert_permutation(std::span<const std::size_t> perm) {
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t k = 0; k < perm.size(); ++k) inv[perm[k]] = k;
  return inv;
}

namespace {

Tensor permute_trailing(const Tensor& x, const Layout& in, std::span<const std::size_t> perm,
                        const Layout& out) {
  Shape prefix(x.shape().begin(), x.shape().end() - 3);
  const std::size_t rows = shape_numel(prefix);
  Tensor flat = gather(x.reshaped({rows, in.dims()}), 1, perm);
  Shape shape = prefix;
  shape.insert(shape.end(), {out.side, out.side, out.channels});
  return flat.reshaped(shape);
}

}  // namespace

Tensor squeeze(const Tensor& x) {
  if (x.rank() < 3 || x.shape()[x.rank() - 3] != x.shape()[x.rank() - 2]) {
    throw ShapeError("squeeze expects [..., s, s, c], got " + shape_str(x.shape()));
  }
  const Layout in{x.shape()[x.rank() - 2], x.shape()[x.rank() - 1]};
  return permute_trailing(x, in, squeeze_permutation(in), squeezed(in));
}

Tensor unsqueeze(const Tensor& x) {
  if (x.rank() < 3 || x.shape()[x.rank() - 3] != x.shape()[x.rank() - 2] ||
      x.shape().back() % 4 != 0) {
    throw ShapeError("unsqueeze expects [..., s, s, 4c], got " + shape_str(x.shape()));
  }
  const Layout out{x.shape()[x.rank() - 2] * 2, x.shape().back() / 4};
  const Layout in = squeezed(out);
  return permute_trailing(x, in, invert_permutation(squeeze_permutation(out)), out);
}

Tensor as_batch(const Tensor& x, const Layout& layout) {
  const Shape& s = x.shape();
  if (s.size() == 2 && s[1] == layout.dims()) return x;
  if (s == Shape{layout.side, layout.side, layout.channels}) return x.reshaped({1, layout.dims()});
  if (s.size() == 4 && s[1] == layout.side && s[2] == layout.side && s[3] == layout.channels) {
    return x.reshaped({s[0], layout.dims()});
  }
  throw ShapeError("input " + shape_str(s) + " does not match layout " + layout.str());
}

// ---------------------------------------------------------------------------
// DenseNet

DenseNet::DenseNet(std::span<const std::size_t> widths) {
  if (widths.size() < 2) throw InvalidArgumentError("DenseNet needs at least two widths");
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    weights_.emplace_back(0, Tensor({widths[l], widths[l + 1]}, 0.0));
    biases_.emplace_back(0, Tensor({1, widths[l + 1]}, 0.0));
  }
}

std::size_t DenseNet::input_width() const { return weights_.front().value.dim(0); }
std::size_t DenseNet::output_width() const { return weights_.back().value.dim(1); }

Var DenseNet::forward(const Var& x, bool track) const {
  const std::size_t rows = x.shape()[0];
  const Var ones = Var::constant(Tensor({rows, 1}, 1.0));
  Var h = x;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    const Var w = track ? Var::param(weights_[l]) : Var::constant(weights_[l].value);
    const Var b = track ? Var::param(biases_[l]) : Var::constant(biases_[l].value);
    h = matmul(h, w) + matmul(ones, b);
    if (l + 1 < weights_.size()) h = tanh(h);
  }
  return h;
}

void DenseNet::init(std::mt19937_64& rng) {
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    auto& w = weights_[l].value;
    if (l + 1 == weights_.size()) {
      std::fill(w.data().begin(), w.data().end(), 0.0);
    } else {
      std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(w.dim(0))));
      for (auto& v : w.data()) v = dist(rng);
    }
    std::fill(biases_[l].value.data().begin(), biases_[l].value.data().end(), 0.0);
  }
}

// ---------------------------------------------------------------------------
// CouplingLayer

CouplingLayer::CouplingLayer(Layout layout, std::vector<std::uint8_t> mask, std::size_t hidden,
                             double clamp)
    : layout_(layout), mask_(std::move(mask)), clamp_(clamp) {
  if (mask_.size() != layout_.dims()) throw ShapeError("coupling mask size does not match layout");
  if (!(clamp_ > 0.0)) throw InvalidArgumentError("coupling scale clamp must be positive");
  for (std::size_t d = 0; d < mask_.size(); ++d) {
    if (mask_[d] > 1) throw InvalidArgumentError("coupling mask must be binary");
    (mask_[d] ? passive_ : active_).push_back(d);
  }
  if (passive_.empty() || active_.empty()) {
    throw InvalidArgumentError("coupling mask needs at least one 0 and one 1 entry");
  }
  merge_ = merge_positions(passive_, active_);
  const std::array<std::size_t, 4> widths{passive_.size(), hidden, hidden, active_.size()};
  scale_net_ = DenseNet(widths);
  shift_net_ = DenseNet(widths);
}

CouplingLayer CouplingLayer::checkerboard(Layout layout, bool parity, std::size_t hidden, double clamp) {
  std::vector<std::uint8_t> mask(layout.dims());
  for (std::size_t i = 0; i < layout.side; ++i)
    for (std::size_t j = 0; j < layout.side; ++j)
      for (std::size_t ch = 0; ch < layout.channels; ++ch)
        mask[layout.index(i, j, ch)] = static_cast<std::uint8_t>((i + j + parity) % 2 == 0);
  return CouplingLayer(layout, std::move(mask), hidden, clamp);
}

CouplingLayer CouplingLayer::channel_split(Layout layout, bool parity, std::size_t hidden, double clamp) {
  std::vector<std::uint8_t> mask(layout.dims());
  const std::size_t half = layout.channels / 2;
  for (std::size_t p = 0; p < layout.side * layout.side; ++p)
    for (std::size_t ch = 0; ch < layout.channels; ++ch)
      mask[p * layout.channels + ch] = static_cast<std::uint8_t>((ch < half) != parity);
  return CouplingLayer(layout, std::move(mask), hidden, clamp);
}

std::pair<Var, Var> CouplingLayer::scale_shift(const Var& passive, bool track) const {
  Var raw = scale_net_.forward(passive, track);
  Var s = clamp_ * tanh(raw / clamp_);
  Var t = shift_net_.forward(passive, track);
  return {s, t};
}

CouplingLayer::GraphOutput CouplingLayer::forward(const Var& x, bool track) const {
  if (x.shape().size() != 2 || x.shape()[1] != layout_.dims()) {
    throw ShapeError("coupling input " + shape_str(x.shape()) + " does not match layout " + layout_.str());
  }
  Var xp = gather(x, 1, passive_);
  Var xa = gather(x, 1, active_);
  auto [s, t] = scale_shift(xp, track);
  Var ya = xa * exp(s) + t;
  const std::array<Var, 2> parts{xp, ya};
  return {gather(concat(parts, 1), 1, merge_), s};
}

std::pair<Tensor, Tensor> CouplingLayer::forward(const Tensor& x) const {
  const Tensor xb = as_batch(x, layout_);
  auto out = forward(Var::constant(xb), false);
  Tensor per_dim = scatter_add(out.log_scale.value(), 1, active_, xb.shape());
  return {out.y.value().reshaped(x.shape()), per_dim};
}

Tensor CouplingLayer::inverse(const Tensor& y) const {
  const Tensor yb = as_batch(y, layout_);
  Var v = Var::constant(yb);
  Var yp = gather(v, 1, passive_);
  Var ya = gather(v, 1, active_);
  auto [s, t] = scale_shift(yp, false);
  Var xa = (ya - t) * exp(-s);
  const std::array<Var, 2> parts{yp, xa};
  return gather(concat(parts, 1), 1, merge_).value().reshaped(y.shape());
}

// ---------------------------------------------------------------------------
// Squeeze / factor layers

SqueezeLayer::SqueezeLayer(Layout in) : in_(in), perm_(squeeze_permutation(in)) {}

FactorLayer::FactorLayer(Layout in, std::vector<std::size_t> keep, std::vector<std::size_t> factor)
    : in_(in), keep_(std::move(keep)), factor_(std::move(factor)) {
  if (in_.channels % 2 != 0) throw ShapeError("factor layer needs an even channel count: " + in_.str());
  if (keep_.size() != factor_.size()) throw ShapeError("factor layer must split dims in half");
  check_partition(in_.dims(), keep_, factor_);
}

Layout layer_input_layout(const FlowLayer& layer) {
  return std::visit(
      [](const auto& l) -> Layout {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, CouplingLayer>) return l.layout();
        else return l.input_layout();
      },
      layer);
}

Layout layer_output_layout(const FlowLayer& layer) {
  return std::visit(
      [](const auto& l) -> Layout {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, CouplingLayer>) return l.layout();
        else return l.output_layout();
      },
      layer);
}

// ---------------------------------------------------------------------------
// FlowModel

FlowModel::FlowModel(Layout input) : input_(input) {
  if (input_.dims() == 0) throw InvalidArgumentError("empty input layout");
}

Layout FlowModel::output_layout() const {
  return layers_.empty() ? input_ : layer_output_layout(layers_.back());
}

void FlowModel::add(FlowLayer layer) {
  const Layout in = layer_input_layout(layer);
  if (!(in == output_layout())) {
    throw ShapeError("layer expects layout " + in.str() + " but the chain is at " + output_layout().str());
  }
  layers_.push_back(std::move(layer));
  renumber();
}

void FlowModel::mark_boundary() { boundaries_.push_back(layers_.size()); }

std::size_t FlowModel::factor_count() const {
  return static_cast<std::size_t>(std::count_if(layers_.begin(), layers_.end(), [](const FlowLayer& l) {
    return std::holds_alternative<FactorLayer>(l);
  }));
}

std::vector<std::size_t> FlowModel::part_dims() const {
  std::vector<std::size_t> dims;
  for (const auto& l : layers_)
    if (auto* f = std::get_if<FactorLayer>(&l)) dims.push_back(f->factor().size());
  dims.push_back(output_layout().dims());
  return dims;
}

std::vector<Parameter*> FlowModel::parameters() {
  std::vector<Parameter*> out;
  for (auto& l : layers_) {
    if (auto* c = std::get_if<CouplingLayer>(&l)) {
      for (DenseNet* net : {&c->scale_net(), &c->shift_net()}) {
        for (std::size_t i = 0; i < net->weights().size(); ++i) {
          out.push_back(&net->weights()[i]);
          out.push_back(&net->biases()[i]);
        }
      }
    }
  }
  return out;
}

std::vector<const Parameter*> FlowModel::parameters() const {
  auto ps = const_cast<FlowModel*>(this)->parameters();
  return {ps.begin(), ps.end()};
}

void FlowModel::renumber() {
  std::uint64_t id = 0;
  for (auto* p : parameters()) p->id = id++;
}

namespace {

void write_layout(std::ostream& out, const Layout& l) {
  write_u64(out, l.side);
  write_u64(out, l.channels);
}

Layout read_layout(std::istream& in) {
  Layout l;
  l.side = read_u64(in);
  l.channels = read_u64(in);
  if (l.side == 0 || l.channels == 0 || l.side > 4096 || l.channels > 1 << 20) {
    throw CorruptFileError("invalid layout in model file");
  }
  return l;
}

void write_index(std::ostream& out, const std::vector<std::size_t>& v) {
  write_u64(out, v.size());
  for (auto i : v) write_u64(out, i);
}

std::vector<std::size_t> read_index(std::istream& in, std::size_t limit) {
  const std::uint64_t n = read_u64(in);
  if (n > limit) throw CorruptFileError("index list longer than its layout");
  std::vector<std::size_t> v(n);
  for (auto& i : v) i = read_u64(in);
  return v;
}

}  // namespace

void FlowModel::save(std::ostream& out) const {
  out.write("FFM1", 4);
  write_u32(out, 1);
  write_layout(out, input_);
  write_u32(out, static_cast<std::uint32_t>(layers_.size()));
  write_u32(out, static_cast<std::uint32_t>(boundaries_.size()));
  for (auto b : boundaries_) write_u64(out, b);
  for (const auto& layer : layers_) {
    if (auto* c = std::get_if<CouplingLayer>(&layer)) {
      out.put('C');
      write_layout(out, c->layout());
      write_f64(out, c->clamp());
      std::vector<double> mask(c->mask().begin(), c->mask().end());
      write_tensor(out, Tensor({c->layout().side, c->layout().side, c->layout().channels}, std::move(mask)));
      const DenseNet* nets[] = {&c->scale_net(), &c->shift_net()};
      write_u32(out, static_cast<std::uint32_t>(c->scale_net().weights().size()));
      for (const DenseNet* net : nets) {
        for (std::size_t i = 0; i < net->weights().size(); ++i) {
          write_tensor(out, net->weights()[i].value);
          write_tensor(out, net->biases()[i].value);
        }
      }
    } else if (auto* s = std::get_if<SqueezeLayer>(&layer)) {
      out.put('S');
      write_layout(out, s->input_layout());
    } else {
      const auto& f = std::get<FactorLayer>(layer);
      out.put('F');
      write_layout(out, f.input_layout());
      write_index(out, f.keep());
      write_index(out, f.factor());
    }
  }
  if (!out) throw IoError("failed to write model");
}

FlowModel FlowModel::load(std::istream& in) {
  expect_magic(in, "FFM1");
  if (read_u32(in) != 1) throw CorruptFileError("unsupported model version");
  FlowModel model(read_layout(in));
  const std::uint32_t n_layers = read_u32(in);
  const std::uint32_t n_bound = read_u32(in);
  if (n_layers > 100000 || n_bound > n_layers + 1) throw CorruptFileError("implausible layer count");
  std::vector<std::size_t> bounds(n_bound);
  for (auto& b : bounds) {
    b = read_u64(in);
    if (b > n_layers) throw CorruptFileError("boundary beyond layer list");
  }
  try {
    for (std::uint32_t k = 0; k < n_layers; ++k) {
      const int tag = in.get();
      if (tag == std::char_traits<char>::eof()) throw CorruptFileError("unexpected end of file");
      if (tag == 'C') {
        const Layout layout = read_layout(in);
        const double clamp = read_f64(in);
        const Tensor mask_t = read_tensor(in);
        if (mask_t.numel() != layout.dims()) throw CorruptFileError("coupling mask size mismatch");
        std::vector<std::uint8_t> mask;
        for (double v : mask_t.data()) {
          if (v != 0.0 && v != 1.0) throw CorruptFileError("coupling mask is not binary");
          mask.push_back(static_cast<std::uint8_t>(v));
        }
        const std::uint32_t depth = read_u32(in);
        if (depth == 0 || depth > 64) throw CorruptFileError("implausible network depth");
        std::vector<Tensor> tensors;
        for (std::uint32_t i = 0; i < 4 * depth; ++i) tensors.push_back(read_tensor(in));
        std::vector<std::size_t> widths{tensors[0].shape().at(0)};
        for (std::uint32_t i = 0; i < depth; ++i) widths.push_back(tensors[2 * i].shape().at(1));
        const std::size_t hidden = depth >= 2 ? widths[1] : 1;
        CouplingLayer layer(layout, std::move(mask), hidden, clamp);
        DenseNet* nets[] = {&layer.scale_net(), &layer.shift_net()};
        for (std::size_t n = 0; n < 2; ++n) {
          *nets[n] = DenseNet(widths);
          for (std::uint32_t i = 0; i < depth; ++i) {
            Tensor& w = nets[n]->weights()[i].value;
            Tensor& b = nets[n]->biases()[i].value;
            const Tensor& tw = tensors[n * 2 * depth + 2 * i];
            const Tensor& tb = tensors[n * 2 * depth + 2 * i + 1];
            if (tw.shape() != w.shape() || tb.shape() != b.shape()) {
              throw CorruptFileError("coupling parameter shape mismatch");
            }
            w = tw;
            b = tb;
            nets[n]->weights()[i].grad = Tensor(w.shape());
            nets[n]->biases()[i].grad = Tensor(b.shape());
          }
        }
        if (nets[0]->input_width() != layer.passive().size() ||
            nets[0]->output_width() != layer.active().size()) {
          throw CorruptFileError("coupling network widths do not match its mask");
        }
        model.add(std::move(layer));
      } else if (tag == 'S') {
        model.add(SqueezeLayer(read_layout(in)));
      } else if (tag == 'F') {
        const Layout layout = read_layout(in);
        auto keep = read_index(in, layout.dims());
        auto factor = read_index(in, layout.dims());
        model.add(FactorLayer(layout, std::move(keep), std::move(factor)));
      } else {
        throw CorruptFileError("unknown layer tag");
      }
    }
  } catch (const ShapeError& e) {
    throw CorruptFileError(std::string("inconsistent model file: ") + e.what());
  } catch (const InvalidArgumentError& e) {
    throw CorruptFileError(std::string("inconsistent model file: ") + e.what());
  }
  model.boundaries_ = std::move(bounds);
  return model;
}

void FlowModel::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  save(out);
}

FlowModel FlowModel::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return load(in);
}

// ---------------------------------------------------------------------------
// LogDetMap

Tensor LogDetMap::total() const {
  const std::size_t rows = live.dim(0);
  Tensor out({rows}, 0.0);
  auto add_rows = [&](const Tensor& t) {
    const std::size_t cols = t.dim(1);
    for (std::size_t b = 0; b < rows; ++b)
      for (std::size_t j = 0; j < cols; ++j) out[b] += t[b * cols + j];
  };
  add_rows(live);
  for (const auto& f : frozen) add_rows(f);
  return out;
}

Tensor LogDetMap::to_input_layout() const {
  const std::size_t rows = live.dim(0);
  std::size_t dims = live_origin.size();
  for (const auto& o : frozen_origin) dims += o.size();
  Shape shape{rows, dims};
  Tensor out = scatter_add(live, 1, live_origin, shape);
  for (std::size_t k = 0; k < frozen.size(); ++k) {
    const Tensor part = scatter_add(frozen[k], 1, frozen_origin[k], shape);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += part[i];
  }
  return out;
}

Tensor LogDetMap::batch_mean() const {
  const Tensor all = to_input_layout();
  const std::size_t rows = all.dim(0), dims = all.dim(1);
  std::vector<double> mean(dims, 0.0);
  for (std::size_t b = 0; b < rows; ++b)
    for (std::size_t j = 0; j < dims; ++j) mean[j] += all[b * dims + j];
  for (auto& v : mean) v /= static_cast<double>(rows);
  return Tensor({dims}, std::move(mean));
}

// ---------------------------------------------------------------------------
// Forward / inverse

FlowGraph forward_graph(const FlowModel& model, const Var& x, bool track) {
  const Layout input = model.input_layout();
  if (x.shape().size() != 2 || x.shape()[1] != input.dims()) {
    throw ShapeError("flow input " + shape_str(x.shape()) + " does not match layout " + input.str());
  }
  const std::size_t rows = x.shape()[0];
  FlowGraph g;
  g.logdet = Var::constant(Tensor({rows}, 0.0));
  LogDetMap& map = g.map;
  map.live = zeros_like_rows(rows, input.dims());
  map.live_origin = iota_index(input.dims());

  Var live = x;
  const auto& bounds = model.boundaries();
  std::size_t next_bound = 0;
  auto snapshot = [&](std::size_t done) {
    while (next_bound < bounds.size() && bounds[next_bound] == done) {
      g.boundary_maps.push_back(map.to_input_layout());
      ++next_bound;
    }
  };
  snapshot(0);

  const auto& layers = model.layers();
  for (std::size_t li = 0; li < layers.size(); ++li) {
    const FlowLayer& layer = layers[li];
    if (auto* c = std::get_if<CouplingLayer>(&layer)) {
      auto out = c->forward(live, track);
      live = out.y;
      const std::array<std::size_t, 1> axis{1};
      g.logdet = g.logdet + reduce_sum(out.log_scale, axis);
      const Tensor& s = out.log_scale.value();
      const auto& active = c->active();
      const std::size_t d = map.live.dim(1), na = active.size();
      for (std::size_t b = 0; b < rows; ++b)
        for (std::size_t j = 0; j < na; ++j) map.live[b * d + active[j]] += s[b * na + j];
    } else if (auto* sq = std::get_if<SqueezeLayer>(&layer)) {
      live = gather(live, 1, sq->permutation());
      map.live = gather(map.live, 1, sq->permutation());
      map.live_origin = select(map.live_origin, sq->permutation());
    } else {
      const auto& f = std::get<FactorLayer>(layer);
      g.z_parts.push_back(gather(live, 1, f.factor()));
      map.frozen.push_back(gather(map.live, 1, f.factor()));
      map.frozen_origin.push_back(select(map.live_origin, f.factor()));
      live = gather(live, 1, f.keep());
      map.live = gather(map.live, 1, f.keep());
      map.live_origin = select(map.live_origin, f.keep());
    }
    snapshot(li + 1);
  }
  g.z_parts.push_back(live);
  map.live_layout = model.output_layout();
  return g;
}

ForwardResult flow_forward(const FlowModel& model, const Tensor& x) {
  FlowGraph g = forward_graph(model, Var::constant(as_batch(x, model.input_layout())), false);
  ForwardResult r;
  for (const auto& z : g.z_parts) r.z_parts.push_back(z.value());
  r.total_logdet = g.logdet.value();
  r.logdet_map = std::move(g.map);
  r.boundary_maps = std::move(g.boundary_maps);
  return r;
}

Tensor flow_inverse(const FlowModel& model, std::span<const Tensor> z_parts) {
  const auto dims = model.part_dims();
  if (z_parts.size() != dims.size()) {
    throw ShapeError("expected " + std::to_string(dims.size()) + " latent parts, got " +
                     std::to_string(z_parts.size()));
  }
  const std::size_t rows = z_parts.front().rank() == 2 ? z_parts.front().dim(0) : 0;
  for (std::size_t k = 0; k < dims.size(); ++k) {
    if (z_parts[k].shape() != Shape{rows, dims[k]}) {
      throw ShapeError("latent part " + std::to_string(k) + " has shape " + shape_str(z_parts[k].shape()) +
                       ", expected [" + std::to_string(rows) + "," + std::to_string(dims[k]) + "]");
    }
  }
  Tensor live = z_parts.back();
  std::size_t part = dims.size() - 1;
  const auto& layers = model.layers();
  for (std::size_t li = layers.size(); li-- > 0;) {
    const FlowLayer& layer = layers[li];
    if (auto* c = std::get_if<CouplingLayer>(&layer)) {
      live = c->inverse(live);
    } else if (auto* sq = std::get_if<SqueezeLayer>(&layer)) {
      live = gather(live, 1, invert_permutation(sq->permutation()));
    } else {
      const auto& f = std::get<FactorLayer>(layer);
      const std::array<Tensor, 2> parts{z_parts[--part], live};
      live = gather(concat(parts, 1), 1, merge_positions(f.factor(), f.keep()));
    }
  }
  return live;
}

Var log_prior(std::span<const Var> z_parts) {
  const std::array<std::size_t, 1> axis{1};
  Var total;
  std::size_t dims = 0;
  for (const auto& z : z_parts) {
    Var sq = reduce_sum(z * z, axis);
    total = total.valid() ? total + sq : sq;
    dims += z.shape()[1];
  }
  const double norm = 0.5 * static_cast<double>(dims) * std::log(2.0 * std::numbers::pi);
  return total * -0.5 - norm;
}

Tensor log_prior(std::span<const Tensor> z_parts) {
  std::vector<Var> vars;
  for (const auto& z : z_parts) vars.push_back(Var::constant(z));
  return log_prior(vars).value();
}

Var log_likelihood_graph(const FlowModel& model, const Var& x, bool track) {
  FlowGraph g = forward_graph(model, x, track);
  return log_prior(g.z_parts) + g.logdet;
}

Tensor log_likelihood(const FlowModel& model, const Tensor& x) {
  return log_likelihood_graph(model, Var::constant(as_batch(x, model.input_layout())), false).value();
}

// ---------------------------------------------------------------------------
// Builder

std::vector<Layout> scale_layouts(const Layout& input, std::size_t scales, bool factored) {
  std::vector<Layout> out{input};
  for (std::size_t k = 0; k < scales; ++k) {
    Layout sq;
    try {
      sq = squeezed(out.back());
    } catch (const ShapeError&) {
      throw ShapeError("layout underflow: " + std::to_string(scales) + " scales do not fit input " +
                       input.str());
    }
    out.push_back(factored ? Layout{sq.side, sq.channels / 2} : sq);
  }
  return out;
}

FlowModel build_flow(const Architecture& arch, std::span<const FactorSpec> factors, std::mt19937_64& rng) {
  const bool factored = !factors.empty();
  if (factored && factors.size() != arch.scales) {
    throw ShapeError("plan has " + std::to_string(factors.size()) + " scales, architecture expects " +
                     std::to_string(arch.scales));
  }
  const auto layouts = scale_layouts(arch.input, arch.scales, factored);
  FlowModel model(arch.input);
  auto add_coupling = [&](CouplingLayer layer) {
    layer.scale_net().init(rng);
    layer.shift_net().init(rng);
    model.add(std::move(layer));
  };
  for (std::size_t k = 0; k < arch.scales; ++k) {
    const Layout live = layouts[k];
    for (std::size_t i = 0; i < arch.couplings_per_scale; ++i) {
      add_coupling(CouplingLayer::checkerboard(live, i % 2 == 1, arch.hidden, arch.clamp));
    }
    model.add(SqueezeLayer(live));
    const Layout sq = squeezed(live);
    for (std::size_t i = 0; i < arch.couplings_per_scale; ++i) {
      add_coupling(CouplingLayer::channel_split(sq, i % 2 == 1, arch.hidden, arch.clamp));
    }
    if (factored) model.add(FactorLayer(sq, factors[k].keep, factors[k].factor));
    model.mark_boundary();
  }
  const Layout last = layouts.back();
  for (std::size_t i = 0; i < arch.final_couplings; ++i) {
    if (last.side >= 2) {
      add_coupling(CouplingLayer::checkerboard(last, i % 2 == 1, arch.hidden, arch.clamp));
    } else {
      add_coupling(CouplingLayer::channel_split(last, i % 2 == 1, arch.hidden, arch.clamp));
    }
  }
  return model;
}

}  // namespace lcflow
