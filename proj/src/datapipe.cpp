#include "earnet/datapipe.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <random>
#include <sstream>

#include "earnet/errors.hpp"
#include "earnet/ops.hpp"

namespace earnet {

namespace {

cv::Mat as_mat(const RgbImage& img) {
  return cv::Mat(static_cast<int>(img.height), static_cast<int>(img.width), CV_8UC3,
                 const_cast<std::uint8_t*>(img.pixels.data()));
}

RgbImage from_mat(const cv::Mat& rgb) {
  cv::Mat m = rgb.isContinuous() ? rgb : rgb.clone();
  RgbImage img;
  img.width = static_cast<std::size_t>(m.cols);
  img.height = static_cast<std::size_t>(m.rows);
  img.pixels.assign(m.data, m.data + m.total() * 3);
  return img;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t image_seed(std::uint64_t seed, std::size_t cls, std::size_t index) {
  return splitmix64(splitmix64(splitmix64(seed) ^ cls) ^ index);
}

std::string class_name(std::size_t c) {
  return c < kDefaultClassNames.size() ? kDefaultClassNames[c] : "C" + std::to_string(c);
}

bool is_image_file(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

}  // namespace

RgbImage decode_image(std::span<const std::uint8_t> bytes, const std::string& what) {
  if (bytes.empty()) throw InputError("cannot decode " + what + ": no data");
  const cv::Mat raw(1, static_cast<int>(bytes.size()), CV_8UC1, const_cast<std::uint8_t*>(bytes.data()));
  cv::Mat bgr = cv::imdecode(raw, cv::IMREAD_COLOR);
  if (bgr.empty()) throw InputError("cannot decode " + what + ": not a supported image");
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  return from_mat(rgb);
}

RgbImage load_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read image " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_image(bytes, path.string());
}

namespace {

std::vector<std::uint8_t> encode(const RgbImage& img, const std::string& ext, std::vector<int> params) {
  if (img.empty()) throw InputError("cannot encode an empty image");
  cv::Mat bgr;
  cv::cvtColor(as_mat(img), bgr, cv::COLOR_RGB2BGR);
  std::vector<std::uint8_t> out;
  if (!cv::imencode(ext, bgr, out, params)) throw InputError("image encoding failed");
  return out;
}

}  // namespace

std::vector<std::uint8_t> encode_png(const RgbImage& img) { return encode(img, ".png", {}); }

std::vector<std::uint8_t> encode_jpeg(const RgbImage& img, int quality) {
  return encode(img, ".jpg", {cv::IMWRITE_JPEG_QUALITY, quality});
}

void save_png(const RgbImage& img, const std::filesystem::path& path) {
  const auto bytes = encode_png(img);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

RgbImage resize_image(const RgbImage& img, std::size_t width, std::size_t height) {
  if (img.width == width && img.height == height) return img;
  cv::Mat out;
  cv::resize(as_mat(img), out, cv::Size(static_cast<int>(width), static_cast<int>(height)), 0, 0,
             cv::INTER_LINEAR);
  return from_mat(out);
}

void preprocess_into(const RgbImage& img, std::size_t size, float* out) {
  if (img.empty() || img.pixels.size() != img.width * img.height * 3) {
    throw InputError("preprocess: image is not 8-bit RGB");
  }
  const RgbImage sized = resize_image(img, size, size);
  const std::size_t plane = size * size;
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      const float v = static_cast<float>(sized.pixels[i * 3 + c]) / 255.0f;
      out[c * plane + i] = (v - kChannelMean[c]) / kChannelStd[c];
    }
  }
}

Tensor<float> preprocess(const RgbImage& img, std::size_t size) {
  Tensor<float> t({3, size, size});
  preprocess_into(img, size, t.ptr());
  return t;
}

RgbImage denormalize(const float* chw, std::size_t size) {
  RgbImage img{size, size, std::vector<std::uint8_t>(size * size * 3)};
  const std::size_t plane = size * size;
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      const float v = (chw[c * plane + i] * kChannelStd[c] + kChannelMean[c]) * 255.0f;
      img.pixels[i * 3 + c] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
    }
  }
  return img;
}

double sharpness(const RgbImage& img) {
  if (img.empty()) throw InputError("sharpness: empty image");
  cv::Mat gray, lap;
  cv::cvtColor(as_mat(img), gray, cv::COLOR_RGB2GRAY);
  cv::Laplacian(gray, lap, CV_64F, 1, 1.0, 0.0, cv::BORDER_REFLECT_101);
  cv::Scalar mean, stddev;
  cv::meanStdDev(lap, mean, stddev);
  return stddev[0] * stddev[0];
}

int ClassCatalog::id(const std::string& name) const {
  const auto it = std::find(names.begin(), names.end(), name);
  return it == names.end() ? -1 : static_cast<int>(it - names.begin());
}

DatasetListing scan_dataset(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  DatasetListing out;
  if (!fs::is_directory(root)) {
    out.notices.push_back("dataset root " + root.string() + " does not exist");
    return out;
  }
  std::vector<std::pair<std::string, fs::path>> labelled;  // class, path
  const fs::path manifest = root / "manifest.csv";
  if (fs::exists(manifest)) {
    std::ifstream in(manifest);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || (line_no == 1 && line == "path,class")) continue;
      const auto comma = line.rfind(',');
      if (comma == std::string::npos) {
        throw InputError("manifest.csv line " + std::to_string(line_no) + ": expected path,class");
      }
      fs::path p = root / line.substr(0, comma);
      if (!fs::exists(p)) {
        out.notices.push_back("manifest entry missing on disk: " + p.string());
        continue;
      }
      labelled.emplace_back(line.substr(comma + 1), p);
    }
  } else {
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(root)) {
      if (e.is_directory()) dirs.push_back(e.path());
    }
    std::sort(dirs.begin(), dirs.end());
    for (const auto& d : dirs) {
      const std::string cls = d.filename().string();
      std::size_t found = 0;
      for (const auto& e : fs::directory_iterator(d)) {
        if (!e.is_regular_file()) continue;
        if (!is_image_file(e.path())) {
          out.notices.push_back("skipped non-image file " + e.path().string());
          continue;
        }
        labelled.emplace_back(cls, e.path());
        ++found;
      }
      if (found == 0) {
        out.notices.push_back("class directory " + cls + " is empty");
        out.catalog.names.push_back(cls);
        out.counts[cls] = 0;
      }
    }
  }
  for (const auto& [cls, p] : labelled) {
    if (out.catalog.id(cls) < 0) out.catalog.names.push_back(cls);
  }
  std::sort(out.catalog.names.begin(), out.catalog.names.end());
  std::sort(labelled.begin(), labelled.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first < b.first : a.second.filename() < b.second.filename();
  });
  for (const auto& [cls, p] : labelled) {
    out.items.push_back({p, out.catalog.id(cls)});
    ++out.counts[cls];
  }
  if (out.items.empty()) out.notices.push_back("no images found under " + root.string());
  return out;
}

RgbImage synth_image(std::size_t cls, std::uint64_t seed, std::size_t size) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto jitter = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };
  const int n = static_cast<int>(size);
  const double s = static_cast<double>(size);

  // Dim, warm canal wall darkening towards the border.
  cv::Mat img(n, n, CV_8UC3);
  const double wall_gain = jitter(0.8, 1.2);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const double r = std::hypot(x - s / 2, y - s / 2) / (s / 2);
      const double g = std::clamp(1.0 - 0.6 * r, 0.2, 1.0) * wall_gain;
      img.at<cv::Vec3b>(y, x) = cv::Vec3b(cv::saturate_cast<uchar>(50 * g),
                                          cv::saturate_cast<uchar>(70 * g),
                                          cv::saturate_cast<uchar>(120 * g));
    }
  }

  // Membrane disk: hue family by class group, small offset within the group.
  const std::size_t family = cls / 3, variant = cls % 3;
  const double hue = std::fmod(family * 60.0 + variant * 12.0 + jitter(-5, 5) + 180.0, 180.0);
  cv::Mat hsv(1, 1, CV_8UC3, cv::Scalar(hue, jitter(110, 200), jitter(150, 230)));
  cv::Mat bgr_px;
  cv::cvtColor(hsv, bgr_px, cv::COLOR_HSV2BGR);
  const cv::Vec3b disk = bgr_px.at<cv::Vec3b>(0, 0);
  const cv::Point2d c(s / 2 + jitter(-0.06, 0.06) * s, s / 2 + jitter(-0.06, 0.06) * s);
  const double radius = jitter(0.30, 0.38) * s;
  const auto pt = [](double x, double y) {
    return cv::Point(static_cast<int>(std::lround(x)), static_cast<int>(std::lround(y)));
  };
  cv::circle(img, pt(c.x, c.y), static_cast<int>(radius), cv::Scalar(disk[0], disk[1], disk[2]),
             cv::FILLED, cv::LINE_AA);

  // Texture: blobs, rings or streaks, with a class-specific count/angle.
  const cv::Scalar light(jitter(200, 255), jitter(220, 255), jitter(220, 255));
  const int thick = std::max(1, static_cast<int>(std::lround(0.03 * s)));
  const double theta0 = jitter(0, 2 * std::numbers::pi);
  switch (variant) {
    case 0: {
      const int blobs = 2 + 2 * static_cast<int>(family);
      for (int b = 0; b < blobs; ++b) {
        const double a = theta0 + 2 * std::numbers::pi * b / blobs;
        const double d = radius * jitter(0.35, 0.65);
        cv::circle(img, pt(c.x + d * std::cos(a), c.y + d * std::sin(a)),
                   static_cast<int>(0.06 * s), light, cv::FILLED, cv::LINE_AA);
      }
      break;
    }
    case 1: {
      const int rings = 1 + static_cast<int>(family);
      for (int r = 1; r <= rings; ++r) {
        cv::circle(img, pt(c.x, c.y), static_cast<int>(radius * r / (rings + 1.0)), light, thick,
                   cv::LINE_AA);
      }
      break;
    }
    default: {
      const double angle = (30.0 + 60.0 * family + jitter(-8, 8)) * std::numbers::pi / 180.0;
      const double dx = std::cos(angle), dy = std::sin(angle);
      for (int k = -2; k <= 2; ++k) {
        const double off = k * radius * 0.3;
        const double ox = c.x - dy * off, oy = c.y + dx * off;
        const double half = std::sqrt(std::max(0.0, radius * radius - off * off)) * 0.9;
        cv::line(img, pt(ox - dx * half, oy - dy * half), pt(ox + dx * half, oy + dy * half), light,
                 thick, cv::LINE_AA);
      }
      break;
    }
  }

  cv::Mat noise(n, n, CV_16SC3);
  cv::RNG cvrng(seed ^ 0x5eedULL);
  cvrng.fill(noise, cv::RNG::NORMAL, cv::Scalar::all(0), cv::Scalar::all(6));
  cv::Mat noisy;
  img.convertTo(noisy, CV_16SC3);
  noisy += noise;
  noisy.convertTo(img, CV_8UC3);

  // Some frames are out of focus.
  if (u(rng) < 0.3) {
    const double sigma = jitter(0.6, 2.0);
    cv::GaussianBlur(img, img, cv::Size(0, 0), sigma, sigma, cv::BORDER_REFLECT_101);
  }
  cv::Mat rgb;
  cv::cvtColor(img, rgb, cv::COLOR_BGR2RGB);
  return from_mat(rgb);
}

DatasetListing synth_generate(const SynthOptions& opts, const std::filesystem::path& out_dir) {
  if (opts.n_per_class < 1) throw ConfigError("n_per_class must be at least 1");
  if (opts.num_classes < 2) throw ConfigError("num_classes must be at least 2");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw InputError("cannot create " + out_dir.string() + ": " + ec.message());
  for (std::size_t c = 0; c < opts.num_classes; ++c) {
    const std::string name = class_name(c);
    const auto dir = out_dir / name;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw InputError("cannot create " + dir.string() + ": " + ec.message());
    for (std::size_t i = 0; i < opts.n_per_class; ++i) {
      char file[64];
      std::snprintf(file, sizeof file, "%s_%04zu.png", name.c_str(), i);
      save_png(synth_image(c, image_seed(opts.seed, c, i), opts.image_size), dir / file);
    }
  }
  return scan_dataset(out_dir);
}

Tensor<float> TensorDataset::batch(std::span<const std::size_t> indices) const {
  const std::size_t per = 3 * image_size * image_size;
  Tensor<float> t({indices.size(), 3, image_size, image_size});
  float* dst = t.ptr();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= size()) throw InputError("dataset index out of range");
    std::copy_n(pixels.data() + indices[i] * per, per, dst + i * per);
  }
  return t;
}

std::vector<int> TensorDataset::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(labels.at(i));
  return out;
}

TensorDataset TensorDataset::select_classes(std::span<const int> classes) const {
  TensorDataset out;
  out.image_size = image_size;
  std::vector<int> remap(num_classes(), -1);
  for (std::size_t k = 0; k < classes.size(); ++k) {
    const int c = classes[k];
    if (c < 0 || static_cast<std::size_t>(c) >= num_classes() || remap[c] >= 0) {
      throw InputError("select_classes: invalid or repeated class " + std::to_string(c));
    }
    remap[c] = static_cast<int>(k);
    out.class_names.push_back(class_names[c]);
  }
  const std::size_t per = 3 * image_size * image_size;
  for (std::size_t i = 0; i < size(); ++i) {
    if (remap[labels[i]] < 0) continue;
    out.labels.push_back(remap[labels[i]]);
    out.pixels.insert(out.pixels.end(), pixels.begin() + i * per, pixels.begin() + (i + 1) * per);
  }
  return out;
}

TensorDataset load_tensor_dataset(const DatasetListing& listing, std::size_t image_size) {
  TensorDataset ds;
  ds.image_size = image_size;
  ds.class_names = listing.catalog.names;
  const std::size_t n = listing.items.size(), per = 3 * image_size * image_size;
  ds.pixels.resize(n * per);
  ds.labels.resize(n);
  std::vector<std::string> errors(n);
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < n; ++i) {
    try {
      preprocess_into(load_image(listing.items[i].path), image_size, ds.pixels.data() + i * per);
      ds.labels[i] = listing.items[i].label;
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  }
  for (const auto& e : errors) {
    if (!e.empty()) throw InputError(e);
  }
  return ds;
}

TensorDataset synth_tensor_dataset(const SynthOptions& opts, std::size_t image_size) {
  TensorDataset ds;
  ds.image_size = image_size;
  for (std::size_t c = 0; c < opts.num_classes; ++c) ds.class_names.push_back(class_name(c));
  const std::size_t n = opts.n_per_class * opts.num_classes, per = 3 * image_size * image_size;
  ds.pixels.resize(n * per);
  ds.labels.resize(n);
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i / opts.n_per_class, k = i % opts.n_per_class;
    preprocess_into(synth_image(c, image_seed(opts.seed, c, k), opts.image_size), image_size,
                    ds.pixels.data() + i * per);
    ds.labels[i] = static_cast<int>(c);
  }
  return ds;
}

}  // namespace earnet
