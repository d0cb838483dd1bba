#pragma once

// Image decoding and preprocessing, dataset scanning, and the synthetic
// otoscopy-like dataset used for desk-scale training.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "earnet/tensor.hpp"

namespace earnet {

inline const std::vector<std::string> kDefaultClassNames = {"AOM", "CME", "CSOM", "EACB", "IC",
                                                            "NE",  "OE",  "SOM",  "TMC"};

inline constexpr std::array<float, 3> kChannelMean = {0.485f, 0.456f, 0.406f};
inline constexpr std::array<float, 3> kChannelStd = {0.229f, 0.224f, 0.225f};

// 8-bit RGB, row-major, interleaved.
struct RgbImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;

  bool empty() const { return pixels.empty(); }
};

// Decodes PNG/JPEG/... bytes; throws InputError naming `what` on failure.
RgbImage decode_image(std::span<const std::uint8_t> bytes, const std::string& what = "image");
RgbImage load_image(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_png(const RgbImage& img);
std::vector<std::uint8_t> encode_jpeg(const RgbImage& img, int quality = 90);
void save_png(const RgbImage& img, const std::filesystem::path& path);

// Bilinear resize to size x size (skipped when already that size), scale to
// [0, 1], then per-channel (x - mean) / std. Writes 3 x size x size floats.
void preprocess_into(const RgbImage& img, std::size_t size, float* out);
Tensor<float> preprocess(const RgbImage& img, std::size_t size);

// Inverse of the normalisation (no resize), clamped to [0, 255].
RgbImage denormalize(const float* chw, std::size_t size);

RgbImage resize_image(const RgbImage& img, std::size_t width, std::size_t height);

// Variance of the 3x3 Laplacian response over the grayscale image.
double sharpness(const RgbImage& img);

// Gate threshold for sharpness(): 10th percentile (nearest rank) of the
// 900-image synthetic set with seed 0 rendered at 128 x 128.
inline constexpr double kDefaultSharpnessThreshold = 19.363;

struct ClassCatalog {
  std::vector<std::string> names;
  int id(const std::string& name) const;  // -1 when absent
};

struct LabeledImage {
  std::filesystem::path path;
  int label = -1;
};

struct DatasetListing {
  std::vector<LabeledImage> items;  // ordered by class name, then file name
  ClassCatalog catalog;
  std::map<std::string, std::size_t> counts;
  std::vector<std::string> notices;  // empty classes, skipped files, ...
};

// Layout root/<class>/*.{png,jpg,jpeg}. A root/manifest.csv with rows
// `path,class` (paths relative to root) overrides directory labels. Classes
// are ordered lexicographically.
DatasetListing scan_dataset(const std::filesystem::path& root);

struct SynthOptions {
  std::size_t n_per_class = 60;
  std::size_t num_classes = 9;
  std::uint64_t seed = 0;
  std::size_t image_size = 128;
};

// Renders one synthetic frame of class `cls`. Deterministic in (cls, seed).
RgbImage synth_image(std::size_t cls, std::uint64_t seed, std::size_t size = 128);

// Writes out_dir/<class>/<class>_<i>.png for every class and returns the
// listing (class names from kDefaultClassNames, or C<i> beyond nine).
DatasetListing synth_generate(const SynthOptions& opts, const std::filesystem::path& out_dir);

// Preprocessed images held in memory as one N x 3 x S x S block.
struct TensorDataset {
  std::size_t image_size = 0;
  std::vector<float> pixels;
  std::vector<int> labels;
  std::vector<std::string> class_names;

  std::size_t size() const { return labels.size(); }
  std::size_t num_classes() const { return class_names.size(); }
  Tensor<float> batch(std::span<const std::size_t> indices) const;
  std::vector<int> batch_labels(std::span<const std::size_t> indices) const;

  // Keeps only samples of `classes` (in the given order) and relabels them
  // 0..classes.size()-1.
  TensorDataset select_classes(std::span<const int> classes) const;
};

// Decodes and preprocesses every listed image (parallel, order preserved).
TensorDataset load_tensor_dataset(const DatasetListing& listing, std::size_t image_size);

// Same, but renders the synthetic images in memory instead of reading files.
TensorDataset synth_tensor_dataset(const SynthOptions& opts, std::size_t image_size);

}  // namespace earnet
