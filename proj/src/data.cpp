#include "lcflow/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "lcflow/errors.hpp"

namespace lcflow {

namespace {

Tensor rows_of(const Tensor& images, std::size_t begin, std::size_t end) {
  if (begin >= end) throw InvalidArgumentError("dataset split is empty");
  return slice(images, 0, begin, end);
}

std::uint8_t to_byte(double v) {
  if (!std::isfinite(v)) return 0;
  return static_cast<std::uint8_t>(std::floor(std::clamp(v, 0.0, 255.0)));
}

}  // namespace

Tensor Dataset::train() const { return rows_of(images, 0, n_train); }
Tensor Dataset::valid() const { return rows_of(images, n_train, size()); }

std::vector<std::uint8_t> informative_mask(const Layout& layout, std::uint64_t seed) {
  if (layout.side % 2 != 0) throw InvalidArgumentError("image side must be even");
  std::mt19937_64 rng(seed ^ 0x6a09e667f3bcc908ULL);
  std::vector<std::uint8_t> mask(layout.dims(), 0);
  std::array<std::size_t, 4> sub{0, 1, 2, 3};
  for (std::size_t i = 0; i < layout.side; i += 2)
    for (std::size_t j = 0; j < layout.side; j += 2)
      for (std::size_t ch = 0; ch < layout.channels; ++ch) {
        std::shuffle(sub.begin(), sub.end(), rng);
        for (std::size_t k = 0; k < 2; ++k) mask[layout.index(i + sub[k] / 2, j + sub[k] % 2, ch)] = 1;
      }
  return mask;
}

Dataset generate_blobs(const BlobOptions& o, BlobCenters* centers) {
  if (o.n == 0) throw InvalidArgumentError("dataset size must be positive");
  if (o.side < 2 || o.side % 2 != 0) throw InvalidArgumentError("image side must be even and >= 2");
  if (o.channels == 0) throw InvalidArgumentError("channel count must be positive");
  if (!(o.structure >= 0.0 && o.structure <= 1.0)) throw InvalidArgumentError("structure level must be in [0, 1]");
  if (!(o.valid_fraction >= 0.0 && o.valid_fraction < 1.0)) {
    throw InvalidArgumentError("validation fraction must be in [0, 1)");
  }
  const Layout layout{o.side, o.channels};
  const auto mask = informative_mask(layout, o.seed);
  const double s = static_cast<double>(o.side);

  std::mt19937_64 rng(o.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pos(0, o.side - 1);
  std::uniform_int_distribution<int> count(1, 3);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  Tensor images({o.n, o.side, o.side, o.channels});
  std::vector<double> field(layout.dims());
  if (centers) centers->assign(o.n, {});
  for (std::size_t n = 0; n < o.n; ++n) {
    const double base = uniform(60.0, 190.0);
    const double gx = uniform(-64.0, 64.0) / s;
    const double gy = uniform(-64.0, 64.0) / s;
    const int blobs = count(rng);
    struct Blob {
      double r, c, amp, sigma;
    };
    std::vector<Blob> bs;
    for (int b = 0; b < blobs; ++b) {
      const std::size_t r = pos(rng), c = pos(rng);
      const double sign = unit(rng) < 0.5 ? -1.0 : 1.0;
      bs.push_back({static_cast<double>(r), static_cast<double>(c), sign * uniform(40.0, 100.0),
                    uniform(0.08, 0.2) * s});
      if (centers) (*centers)[n].emplace_back(r, c);
    }
    std::vector<double> gain(o.channels);
    for (auto& g : gain) g = uniform(0.7, 1.3);
    for (std::size_t i = 0; i < o.side; ++i)
      for (std::size_t j = 0; j < o.side; ++j) {
        double v = base + gx * (static_cast<double>(i) - s / 2) + gy * (static_cast<double>(j) - s / 2);
        for (const auto& b : bs) {
          const double d2 = (i - b.r) * (i - b.r) + (j - b.c) * (j - b.c);
          v += b.amp * std::exp(-d2 / (2.0 * b.sigma * b.sigma));
        }
        for (std::size_t ch = 0; ch < o.channels; ++ch) field[layout.index(i, j, ch)] = v * gain[ch];
      }
    for (std::size_t d = 0; d < layout.dims(); ++d) {
      const double noise = uniform(0.0, 256.0);
      const double v = mask[d] ? o.structure * field[d] + (1.0 - o.structure) * noise : noise;
      images[n * layout.dims() + d] = std::floor(std::clamp(v, 0.0, 255.0));
    }
  }

  Dataset d;
  d.name = "blobs";
  d.seed = o.seed;
  d.structure = o.structure;
  std::size_t n_valid = static_cast<std::size_t>(std::llround(o.valid_fraction * static_cast<double>(o.n)));
  if (o.valid_fraction > 0.0 && n_valid == 0 && o.n > 1) n_valid = 1;
  if (n_valid >= o.n) n_valid = o.n - 1;
  d.n_train = o.n - n_valid;
  d.images = std::move(images);
  return d;
}

Dataset constant_images(std::size_t n, const Layout& layout, double value, double valid_fraction) {
  if (n == 0) throw InvalidArgumentError("dataset size must be positive");
  if (!(value >= 0.0 && value < 256.0)) throw InvalidArgumentError("pixel value out of range");
  Dataset d;
  d.name = "constant";
  d.structure = 1.0;
  d.images = Tensor({n, layout.side, layout.side, layout.channels}, std::floor(value));
  std::size_t n_valid = static_cast<std::size_t>(std::llround(valid_fraction * static_cast<double>(n)));
  if (n_valid >= n) n_valid = n - 1;
  d.n_train = n - n_valid;
  return d;
}

void validate_dataset(const Dataset& d) {
  if (d.images.rank() != 4 || d.images.dim(1) != d.images.dim(2)) {
    throw InvalidArgumentError("dataset images must be shaped [n, s, s, c]");
  }
  if (d.n_train == 0 || d.n_train > d.size()) throw InvalidArgumentError("invalid train/validation split");
  for (double v : d.images.data()) {
    if (!(v >= 0.0 && v < 256.0) || v != std::floor(v)) {
      throw InvalidArgumentError("dataset values must be integers in [0, 256)");
    }
  }
}

void save_dataset(const Dataset& d, const std::filesystem::path& path) {
  validate_dataset(d);
  save_tensor(path, d.images);
  std::ofstream meta(path.string() + ".meta");
  if (!meta) throw IoError("cannot write metadata for " + path.string());
  std::ostringstream structure;
  structure.precision(17);
  structure << d.structure;
  meta << "name=" << d.name << "\n"
       << "seed=" << d.seed << "\n"
       << "n=" << d.size() << "\n"
       << "s=" << d.images.dim(1) << "\n"
       << "c=" << d.images.dim(3) << "\n"
       << "structure=" << structure.str() << "\n"
       << "n_train=" << d.n_train << "\n";
  if (!meta) throw IoError("failed to write metadata for " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
  Dataset d;
  d.images = load_tensor(path);
  std::ifstream meta(path.string() + ".meta");
  if (!meta) throw IoError("missing metadata sidecar " + path.string() + ".meta");
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(meta, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CorruptFileError("malformed metadata line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  for (const char* key : {"name", "seed", "n", "s", "c", "structure", "n_train"}) {
    if (!kv.count(key)) throw CorruptFileError(std::string("metadata lacks '") + key + "'");
  }
  try {
    d.name = kv["name"];
    d.seed = std::stoull(kv["seed"]);
    d.structure = std::stod(kv["structure"]);
    d.n_train = std::stoull(kv["n_train"]);
    const Shape expect{std::stoull(kv["n"]), std::stoull(kv["s"]), std::stoull(kv["s"]), std::stoull(kv["c"])};
    if (d.images.shape() != expect) throw CorruptFileError("dataset payload does not match its metadata");
  } catch (const std::logic_error&) {
    throw CorruptFileError("malformed number in dataset metadata");
  }
  try {
    validate_dataset(d);
  } catch (const InvalidArgumentError& e) {
    throw CorruptFileError(e.what());
  }
  return d;
}

void write_image_grid(std::span<const Tensor> images, const std::filesystem::path& path, std::size_t columns) {
  if (images.empty()) throw InvalidArgumentError("no images to write");
  Shape shape = images[0].shape();
  if (shape.size() == 4 && shape[0] == 1) shape.erase(shape.begin());
  if (shape.size() != 3) throw ShapeError("images must be shaped [h, w, c]");
  const std::size_t h = shape[0], w = shape[1], c = shape[2];
  if (c != 1 && c != 3) throw InvalidArgumentError("unsupported channel count " + std::to_string(c));
  for (const auto& im : images) {
    if (im.numel() != h * w * c) throw ShapeError("images in a grid must share one shape");
  }
  const std::size_t k = images.size();
  const std::size_t cols =
      columns ? columns : static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(k))));
  const std::size_t rows = (k + cols - 1) / cols;
  const std::size_t width = cols * w, height = rows * h;
  std::vector<std::uint8_t> pixels(width * height * c, 0);
  for (std::size_t n = 0; n < k; ++n) {
    const std::size_t r0 = (n / cols) * h, c0 = (n % cols) * w;
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j)
        for (std::size_t ch = 0; ch < c; ++ch)
          pixels[((r0 + i) * width + c0 + j) * c + ch] = to_byte(images[n][(i * w + j) * c + ch]);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << (c == 1 ? "P5" : "P6") << "\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!out) throw IoError("failed to write " + path.string());
}

Tensor read_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string magic;
  std::size_t width = 0, height = 0, maxval = 0;
  in >> magic >> width >> height >> maxval;
  if (!in || (magic != "P5" && magic != "P6") || maxval != 255 || width == 0 || height == 0) {
    throw CorruptFileError("unsupported or malformed PNM header in " + path.string());
  }
  in.get();
  const std::size_t c = magic == "P5" ? 1 : 3;
  std::vector<std::uint8_t> pixels(width * height * c);
  in.read(reinterpret_cast<char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(pixels.size())) {
    throw CorruptFileError("truncated image payload in " + path.string());
  }
  return Tensor({height, width, c}, std::vector<double>(pixels.begin(), pixels.end()));
}

}  // namespace lcflow
