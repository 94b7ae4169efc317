#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lcflow/flow.hpp"
#include "lcflow/tensor.hpp"

namespace lcflow {

// Images [n, s, s, c] with integer values in [0, 256). The first n_train
// examples form the training split, the rest the validation split.
struct Dataset {
  std::string name;
  std::uint64_t seed = 0;
  double structure = 0.0;
  std::size_t n_train = 0;
  Tensor images;

  std::size_t size() const { return images.rank() == 4 ? images.dim(0) : 0; }
  std::size_t n_valid() const { return size() - n_train; }
  Layout layout() const { return Layout{images.dim(1), images.dim(3)}; }
  Tensor train() const;
  Tensor valid() const;
};

struct BlobOptions {
  std::size_t n = 1000;
  std::size_t side = 8;
  std::size_t channels = 1;
  std::uint64_t seed = 0;
  double structure = 1.0;  // in [0, 1]
  double valid_fraction = 0.2;
};

using BlobCenters = std::vector<std::vector<std::pair<std::size_t, std::size_t>>>;

// Pixels selected by informative_mask() carry a smooth field (background
// gradient plus 1-3 Gaussian blobs at uniformly drawn pixel positions) mixed
// with uniform noise in proportion `structure`; all other pixels are uniform
// noise. Structure 0 gives i.i.d. uniform noise images. Blob centers of each
// image are reported through `centers` when given.
Dataset generate_blobs(const BlobOptions& options, BlobCenters* centers = nullptr);

// Two of the four pixels in every 2x2 block of every channel, drawn once per
// dataset seed. 1 marks an informative pixel.
std::vector<std::uint8_t> informative_mask(const Layout& layout, std::uint64_t seed);

// Every pixel equal to `value`.
Dataset constant_images(std::size_t n, const Layout& layout, double value, double valid_fraction = 0.2);

// Throws InvalidArgumentError if the images are out of range or the split is
// inconsistent.
void validate_dataset(const Dataset& d);

// FFT1 payload at `path`, key=value metadata at `path` + ".meta".
void save_dataset(const Dataset& d, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

// Tiles images ([s, s, c] each, all alike) row-major into a binary PGM (c=1)
// or PPM (c=3). `columns` = 0 picks ceil(sqrt(k)). Values are clamped to
// [0, 256) and floored.
void write_image_grid(std::span<const Tensor> images, const std::filesystem::path& path,
                      std::size_t columns = 0);
// Reads a binary PGM/PPM into [h, w, c].
Tensor read_image(const std::filesystem::path& path);

}  // namespace lcflow
