#include "lcflow/tensor.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "lcflow/errors.hpp"

namespace lcflow {

namespace {

void check_shape(const Shape& shape) {
  for (auto e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be positive: " + shape_str(shape));
  }
}

void require_finite(const Tensor& t, const char* what) {
  if (!t.all_finite()) throw DomainError(std::string(what) + " produced a non-finite value");
}

// Splits `shape` around `axis` into (outer, extent, inner) for strided loops.
struct AxisView {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisView axis_view(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  }
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  v.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

double apply(BinaryOp op, double a, double b) {
  switch (op) {
    case BinaryOp::add: return a + b;
    case BinaryOp::sub: return a - b;
    case BinaryOp::mul: return a * b;
    case BinaryOp::div:
      if (b == 0.0) throw DomainError("division by zero");
      return a / b;
  }
  return 0.0;
}

double apply(UnaryOp op, double a) {
  switch (op) {
    case UnaryOp::exp: return std::exp(a);
    case UnaryOp::log:
      if (!(a > 0.0)) throw DomainError("log of non-positive value");
      return std::log(a);
    case UnaryOp::tanh: return std::tanh(a);
    case UnaryOp::sigmoid:
      return a >= 0.0 ? 1.0 / (1.0 + std::exp(-a)) : std::exp(a) / (1.0 + std::exp(a));
    case UnaryOp::neg: return -a;
  }
  return 0.0;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor() : data_(1, 0.0) {}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (data_.size() != shape_numel(shape_)) {
    throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_str(shape_));
  }
}

Tensor::Tensor(Shape shape, std::initializer_list<double> data)
    : Tensor(std::move(shape), std::vector<double>(data)) {}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) throw ShapeError("axis out of range for " + shape_str(shape_));
  return shape_[axis];
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor elementwise(BinaryOp op, const Tensor& a, const Tensor& b) {
  Tensor out;
  if (a.shape() == b.shape()) {
    out = a;
    auto o = out.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = apply(op, o[i], bd[i]);
  } else if (b.rank() == 0) {
    return elementwise(op, a, b.item());
  } else if (a.rank() == 0) {
    out = b;
    const double av = a.item();
    for (auto& v : out.data()) v = apply(op, av, v);
  } else {
    throw ShapeError("elementwise shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  require_finite(out, "elementwise");
  return out;
}

Tensor elementwise(BinaryOp op, const Tensor& a, double b) {
  Tensor out = a;
  for (auto& v : out.data()) v = apply(op, v, b);
  require_finite(out, "elementwise");
  return out;
}

Tensor elementwise(UnaryOp op, const Tensor& a) {
  Tensor out = a;
  for (auto& v : out.data()) v = apply(op, v);
  require_finite(out, "elementwise");
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  const double* ap = a.data().data();
  const double* bp = b.data().data();
  double* op = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = op + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ap[i * k + p];
      if (av == 0.0) continue;
      const double* brow = bp + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  require_finite(out, "matmul");
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose expects rank 2, got " + shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  return out;
}

Tensor reduce_sum(const Tensor& a, std::span<const std::size_t> axes) {
  std::vector<bool> reduced(a.rank(), false);
  for (auto ax : axes) {
    if (ax >= a.rank()) {
      throw ShapeError("reduce_sum axis " + std::to_string(ax) + " invalid for " +
                       shape_str(a.shape()));
    }
    reduced[ax] = true;
  }
  Shape out_shape;
  for (std::size_t i = 0; i < a.rank(); ++i)
    if (!reduced[i]) out_shape.push_back(a.shape()[i]);
  Tensor out(out_shape, 0.0);

  // Walk the input in row-major order, tracking the output offset.
  const std::size_t r = a.rank();
  std::vector<std::size_t> out_stride(r, 0);
  std::size_t stride = 1;
  for (std::size_t i = r; i-- > 0;) {
    if (!reduced[i]) {
      out_stride[i] = stride;
      stride *= a.shape()[i];
    }
  }
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t flat = 0; flat < a.numel(); ++flat) {
    out[off] += a[flat];
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      off += out_stride[d];
      if (idx[d] < a.shape()[d]) break;
      off -= out_stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  return out;
}

Tensor reduce_sum_all(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return Tensor::scalar(s);
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Shape shape = parts[0].shape();
  if (axis >= shape.size()) throw ShapeError("concat axis out of range");
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != shape.size()) throw ShapeError("concat rank mismatch");
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i != axis && p.shape()[i] != shape[i]) {
        throw ShapeError("concat shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(shape));
      }
    }
    total += p.shape()[axis];
  }
  shape[axis] = total;
  Tensor out(shape);
  const AxisView ov = axis_view(shape, axis);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const AxisView pv = axis_view(p.shape(), axis);
    for (std::size_t o = 0; o < pv.outer; ++o) {
      const double* src = p.data().data() + o * pv.extent * pv.inner;
      double* dst = out.data().data() + (o * ov.extent + offset) * ov.inner;
      std::copy(src, src + pv.extent * pv.inner, dst);
    }
    offset += pv.extent;
  }
  return out;
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const AxisView v = axis_view(a.shape(), axis);
  if (begin >= end || end > v.extent) {
    throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for extent " + std::to_string(v.extent));
  }
  Shape shape = a.shape();
  shape[axis] = end - begin;
  Tensor out(shape);
  const std::size_t len = (end - begin) * v.inner;
  for (std::size_t o = 0; o < v.outer; ++o) {
    const double* src = a.data().data() + (o * v.extent + begin) * v.inner;
    std::copy(src, src + len, out.data().data() + o * len);
  }
  return out;
}

Tensor gather(const Tensor& a, std::size_t axis, std::span<const std::size_t> index) {
  const AxisView v = axis_view(a.shape(), axis);
  if (index.empty()) throw ShapeError("gather with empty index");
  for (auto i : index) {
    if (i >= v.extent) throw ShapeError("gather index " + std::to_string(i) + " out of range");
  }
  Shape shape = a.shape();
  shape[axis] = index.size();
  Tensor out(shape);
  const double* src = a.data().data();
  double* dst = out.data().data();
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t k = 0; k < index.size(); ++k) {
      const double* s = src + (o * v.extent + index[k]) * v.inner;
      std::copy(s, s + v.inner, dst + (o * index.size() + k) * v.inner);
    }
  }
  return out;
}

Tensor scatter_add(const Tensor& src, std::size_t axis, std::span<const std::size_t> index,
                   const Shape& shape) {
  Tensor out(shape, 0.0);
  const AxisView v = axis_view(shape, axis);
  if (src.rank() != shape.size() || src.shape()[axis] != index.size()) {
    throw ShapeError("scatter_add shape mismatch");
  }
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t k = 0; k < index.size(); ++k) {
      if (index[k] >= v.extent) throw ShapeError("scatter_add index out of range");
      const double* s = src.data().data() + (o * index.size() + k) * v.inner;
      double* d = out.data().data() + (o * v.extent + index[k]) * v.inner;
      for (std::size_t i = 0; i < v.inner; ++i) d[i] += s[i];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Binary container

namespace {

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
}

template <typename T>
void write_raw(std::ostream& out, T v) {
  v = to_little(v);
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
  if (!out) throw IoError("write failed");
}

template <typename T>
T read_raw(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (in.gcount() != static_cast<std::streamsize>(sizeof(T))) {
    throw CorruptFileError("unexpected end of file");
  }
  return to_little(v);
}

}  // namespace

void write_u32(std::ostream& out, std::uint32_t v) { write_raw(out, v); }
void write_u64(std::ostream& out, std::uint64_t v) { write_raw(out, v); }
void write_f64(std::ostream& out, double v) { write_raw(out, std::bit_cast<std::uint64_t>(v)); }
std::uint32_t read_u32(std::istream& in) { return read_raw<std::uint32_t>(in); }
std::uint64_t read_u64(std::istream& in) { return read_raw<std::uint64_t>(in); }
double read_f64(std::istream& in) { return std::bit_cast<double>(read_raw<std::uint64_t>(in)); }

void expect_magic(std::istream& in, std::string_view magic) {
  std::string got(magic.size(), '\0');
  in.read(got.data(), static_cast<std::streamsize>(magic.size()));
  if (in.gcount() != static_cast<std::streamsize>(magic.size())) {
    throw CorruptFileError("unexpected end of file while reading magic");
  }
  if (got != magic) {
    throw CorruptFileError("magic mismatch: expected '" + std::string(magic) + "'");
  }
}

void write_tensor(std::ostream& out, const Tensor& t) {
  out.write("FFT1", 4);
  write_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) write_u64(out, e);
  for (double v : t.data()) write_f64(out, v);
}

Tensor read_tensor(std::istream& in) {
  expect_magic(in, "FFT1");
  const std::uint32_t rank = read_u32(in);
  if (rank > 16) throw CorruptFileError("implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  std::size_t n = 1;
  for (auto& e : shape) {
    e = read_u64(in);
    if (e == 0 || e > (std::size_t{1} << 40)) throw CorruptFileError("invalid tensor extent");
    n *= e;
    if (n > (std::size_t{1} << 34)) throw CorruptFileError("tensor too large");
  }
  std::vector<double> data(n);
  for (auto& v : data) v = read_f64(in);
  return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor(out, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_tensor(in);
}

}  // namespace lcflow
