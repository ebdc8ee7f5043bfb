#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cnf/errors.hpp"
#include "cnf/tensor.hpp"

namespace cnf {

/// Images [N,3,R,R] with values in [0,1] before normalization.
template <typename T>
struct ImageDataset {
  Tensor<T> images;
  std::vector<int> labels;
  std::vector<std::string> class_names;

  std::size_t size() const { return labels.size(); }
  int num_classes() const { return static_cast<int>(class_names.size()); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t resolution() const { return images.dim(2); }
  std::size_t image_volume() const { return images.dim(1) * images.dim(2) * images.dim(3); }

  void validate() const {
    if (labels.empty()) throw InputError("dataset is empty");
    if (images.rank() != 4 || images.dim(0) != labels.size())
      throw StructuralError("dataset images " + shape_string(images.shape()) + " vs " +
                            std::to_string(labels.size()) + " labels");
    for (int y : labels)
      if (y < 0 || y >= num_classes()) throw InputError("label " + std::to_string(y) + " out of range");
  }

  Tensor<T> image(std::size_t i) const {
    const std::size_t v = image_volume();
    std::vector<T> d(images.data() + i * v, images.data() + (i + 1) * v);
    return Tensor<T>(Shape{images.dim(1), images.dim(2), images.dim(3)}, std::move(d));
  }

  ImageDataset subset(std::span<const std::size_t> indices) const {
    ImageDataset out;
    out.class_names = class_names;
    const std::size_t v = image_volume();
    out.images = Tensor<T>(Shape{indices.size(), images.dim(1), images.dim(2), images.dim(3)});
    out.labels.reserve(indices.size());
    for (std::size_t k = 0; k < indices.size(); ++k) {
      const std::size_t i = indices[k];
      std::copy_n(images.data() + i * v, v, out.images.data() + k * v);
      out.labels.push_back(labels.at(i));
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

/// Index lists into the source dataset, one per requested fraction.
struct SplitIndices {
  std::vector<std::vector<std::size_t>> parts;
};

/// Per-class quotas round(fraction * class count) by largest remainder
/// (ties go to the earlier split); items shuffled per class with `seed`.
inline SplitIndices stratified_split_indices(std::span<const int> labels, int num_classes,
                                             std::span<const double> fractions, std::uint64_t seed) {
  if (fractions.empty()) throw InputError("split: no fractions");
  double total = 0;
  for (double f : fractions) {
    if (!(f > 0)) throw InputError("split: fractions must be positive");
    total += f;
  }
  if (total > 1 + 1e-9) throw InputError("split: fractions sum to more than 1");

  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(num_classes));
  for (std::size_t i = 0; i < labels.size(); ++i) by_class.at(static_cast<std::size_t>(labels[i])).push_back(i);

  SplitIndices out;
  out.parts.resize(fractions.size());
  std::mt19937_64 rng(seed);
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& items = by_class[c];
    if (items.empty()) continue;
    if (items.size() < fractions.size())
      throw InputError("split: class " + std::to_string(c) + " has " + std::to_string(items.size()) +
                       " items, fewer than " + std::to_string(fractions.size()) + " splits");
    std::shuffle(items.begin(), items.end(), rng);
    const double n = static_cast<double>(items.size());
    const auto target = std::min(items.size(), static_cast<std::size_t>(std::llround(total * n)));
    std::vector<std::size_t> quota(fractions.size());
    std::vector<std::pair<double, std::size_t>> rema;
    std::size_t assigned = 0;
    for (std::size_t k = 0; k < fractions.size(); ++k) {
      const double exact = fractions[k] * n;
      quota[k] = static_cast<std::size_t>(std::floor(exact + 1e-9));
      assigned += quota[k];
      rema.emplace_back(exact - std::floor(exact + 1e-9), k);
    }
    std::stable_sort(rema.begin(), rema.end(), [](auto& a, auto& b) { return a.first > b.first; });
    for (std::size_t r = 0; assigned < target && r < rema.size(); ++r, ++assigned) ++quota[rema[r].second];
    std::size_t pos = 0;
    for (std::size_t k = 0; k < fractions.size(); ++k)
      for (std::size_t j = 0; j < quota[k]; ++j) out.parts[k].push_back(items[pos++]);
  }
  for (auto& p : out.parts) std::sort(p.begin(), p.end());
  return out;
}

template <typename T>
std::vector<ImageDataset<T>> stratified_split(const ImageDataset<T>& ds, std::span<const double> fractions,
                                              std::uint64_t seed, SplitIndices* indices_out = nullptr) {
  auto idx = stratified_split_indices(ds.labels, ds.num_classes(), fractions, seed);
  std::vector<ImageDataset<T>> out;
  for (const auto& p : idx.parts) out.push_back(ds.subset(p));
  if (indices_out) *indices_out = std::move(idx);
  return out;
}

inline void write_index_list(const std::filesystem::path& path, std::span<const std::size_t> idx) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write " + path.string());
  for (std::size_t i : idx) os << i << '\n';
}

inline std::vector<std::size_t> read_index_list(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot read " + path.string());
  std::vector<std::size_t> out;
  std::size_t i;
  while (is >> i) out.push_back(i);
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugmentConfig {
  std::array<double, 3> mean{0.5, 0.5, 0.5};
  std::array<double, 3> stddev{0.25, 0.25, 0.25};
  int resize = 0;          // 0 keeps the input size
  int crop = 0;            // 0 crops to the resized size
  int padding = 4;         // zero padding before the random crop
  double flip_prob = 0.5;

  void validate(int input_size) const {
    const int r = resize ? resize : input_size;
    const int c = crop ? crop : r;
    if (c > r) throw InputError("augment: crop size exceeds resized size");
    if (padding < 0) throw InputError("augment: negative padding");
    if (flip_prob < 0 || flip_prob > 1) throw InputError("augment: flip probability outside [0,1]");
    for (double s : stddev)
      if (!(s > 0)) throw InputError("augment: normalization std must be positive");
  }
};

/// Bilinear (half-pixel) resize of a [C,H,W] image.
template <typename T>
Tensor<T> resize_image(const Tensor<T>& img, std::size_t out_h, std::size_t out_w) {
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  if (out_h == H && out_w == W) return img;
  Tensor<T> out(Shape{C, out_h, out_w});
  auto coord = [](std::size_t o, std::size_t in, std::size_t out_n, std::size_t& i0, std::size_t& i1,
                  double& lam) {
    double src = (static_cast<double>(o) + 0.5) * static_cast<double>(in) / static_cast<double>(out_n) - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    i0 = static_cast<std::size_t>(src);
    i1 = std::min(i0 + 1, in - 1);
    lam = src - static_cast<double>(i0);
  };
  for (std::size_t y = 0; y < out_h; ++y) {
    std::size_t y0, y1;
    double ly;
    coord(y, H, out_h, y0, y1, ly);
    for (std::size_t x = 0; x < out_w; ++x) {
      std::size_t x0, x1;
      double lx;
      coord(x, W, out_w, x0, x1, lx);
      for (std::size_t c = 0; c < C; ++c) {
        const T* p = img.data() + c * H * W;
        const double v = (1 - ly) * ((1 - lx) * p[y0 * W + x0] + lx * p[y0 * W + x1]) +
                         ly * ((1 - lx) * p[y1 * W + x0] + lx * p[y1 * W + x1]);
        out[(c * out_h + y) * out_w + x] = static_cast<T>(v);
      }
    }
  }
  return out;
}

/// Crop of size `crop` at offset (top, left) in the zero-padded image.
template <typename T>
Tensor<T> padded_crop(const Tensor<T>& img, int padding, int crop, int top, int left) {
  const std::size_t C = img.dim(0);
  const int H = static_cast<int>(img.dim(1)), W = static_cast<int>(img.dim(2));
  Tensor<T> out(Shape{C, static_cast<std::size_t>(crop), static_cast<std::size_t>(crop)});
  for (std::size_t c = 0; c < C; ++c)
    for (int y = 0; y < crop; ++y)
      for (int x = 0; x < crop; ++x) {
        const int sy = y + top - padding, sx = x + left - padding;
        if (sy < 0 || sy >= H || sx < 0 || sx >= W) continue;
        out[(c * crop + y) * crop + x] = img[(c * H + sy) * W + sx];
      }
  return out;
}

template <typename T>
Tensor<T> hflip(const Tensor<T>& img) {
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  Tensor<T> out(img.shape());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) out[(c * H + y) * W + x] = img[(c * H + y) * W + (W - 1 - x)];
  return out;
}

template <typename T>
Tensor<T> normalize(Tensor<T> img, const AugmentConfig& cfg) {
  const std::size_t C = img.dim(0), HW = img.dim(1) * img.dim(2);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < HW; ++i)
      img[c * HW + i] = static_cast<T>((img[c * HW + i] - cfg.mean[c % 3]) / cfg.stddev[c % 3]);
  return img;
}

template <typename T>
Tensor<T> unnormalize(Tensor<T> img, const AugmentConfig& cfg) {
  const std::size_t C = img.dim(0), HW = img.dim(1) * img.dim(2);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < HW; ++i)
      img[c * HW + i] = static_cast<T>(img[c * HW + i] * cfg.stddev[c % 3] + cfg.mean[c % 3]);
  return img;
}

/// resize -> random padded crop -> random horizontal flip -> normalize.
/// Deterministic in `seed`.
template <typename T>
Tensor<T> augment(const Tensor<T>& img, const AugmentConfig& cfg, std::uint64_t seed) {
  const int in = static_cast<int>(img.dim(1));
  cfg.validate(in);
  const int r = cfg.resize ? cfg.resize : in;
  const int crop = cfg.crop ? cfg.crop : r;
  std::mt19937_64 rng(seed);
  Tensor<T> x = resize_image(img, static_cast<std::size_t>(r), static_cast<std::size_t>(r));
  std::uniform_int_distribution<int> off(0, r + 2 * cfg.padding - crop);
  const int top = off(rng), left = off(rng);
  x = padded_crop(x, cfg.padding, crop, top, left);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  if (u(rng) < cfg.flip_prob) x = hflip(x);
  return normalize(std::move(x), cfg);
}

/// Evaluation-time preprocessing: resize, center crop, normalize.
template <typename T>
Tensor<T> preprocess(const Tensor<T>& img, const AugmentConfig& cfg) {
  const int in = static_cast<int>(img.dim(1));
  const int r = cfg.resize ? cfg.resize : in;
  const int crop = cfg.crop ? cfg.crop : r;
  Tensor<T> x = resize_image(img, static_cast<std::size_t>(r), static_cast<std::size_t>(r));
  if (crop != r) x = padded_crop(x, 0, crop, (r - crop) / 2, (r - crop) / 2);
  return normalize(std::move(x), cfg);
}

// ---------------------------------------------------------------------------
// Dominant-object labelling for multi-object annotations
// ---------------------------------------------------------------------------

struct AnnotatedObject {
  int label = 0;
  double area = 0;  // bounding-box width * height, pixels^2
};

struct AnnotationRecord {
  std::vector<AnnotatedObject> objects;
};

/// Single class present -> that class. Otherwise areas are summed per class
/// and the largest class is kept if it covers at least twice the area of
/// the runner-up; nullopt means discard.
inline std::optional<int> dominant_object_label(const AnnotationRecord& record) {
  if (record.objects.empty()) throw InputError("annotation record has no objects");
  std::map<int, double> area;
  for (const auto& o : record.objects) {
    if (!(o.area > 0)) throw InputError("annotation object area must be positive");
    area[o.label] += o.area;
  }
  if (area.size() == 1) return area.begin()->first;
  std::vector<std::pair<double, int>> v;
  for (auto [label, a] : area) v.emplace_back(a, label);
  std::sort(v.begin(), v.end(), [](auto& x, auto& y) { return x.first > y.first; });
  if (v[0].first >= 2.0 * v[1].first) return v[0].second;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Binary records: [label byte][C*R*R pixel bytes, channel-major] per item
// ---------------------------------------------------------------------------

struct RecordLayout {
  std::size_t channels = 3;
  std::size_t resolution = 32;
  int classes = 10;

  std::size_t record_size() const { return 1 + channels * resolution * resolution; }
};

template <typename T>
ImageDataset<T> load_binary_records(const std::filesystem::path& path, const RecordLayout& layout) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  const std::size_t rs = layout.record_size();
  if (bytes.empty() || bytes.size() % rs != 0)
    throw FormatError(path.string() + ": size " + std::to_string(bytes.size()) +
                      " bytes is not a positive multiple of the record size " + std::to_string(rs) +
                      " (expected " + std::to_string((bytes.size() / rs + 1) * rs) + " or " +
                      std::to_string(bytes.size() / rs * rs) + ")");
  const std::size_t n = bytes.size() / rs;
  ImageDataset<T> ds;
  ds.images = Tensor<T>(Shape{n, layout.channels, layout.resolution, layout.resolution});
  ds.labels.resize(n);
  for (int c = 0; c < layout.classes; ++c) ds.class_names.push_back("class" + std::to_string(c));
  const std::size_t px = rs - 1;
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* rec = bytes.data() + i * rs;
    if (rec[0] >= layout.classes)
      throw FormatError(path.string() + ": label " + std::to_string(rec[0]) + " at byte offset " +
                        std::to_string(i * rs) + " is not below " + std::to_string(layout.classes));
    ds.labels[i] = rec[0];
    for (std::size_t k = 0; k < px; ++k) ds.images[i * px + k] = static_cast<T>(rec[1 + k] / 255.0);
  }
  return ds;
}

template <typename T>
void write_binary_records(const std::filesystem::path& path, const ImageDataset<T>& ds) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write " + path.string());
  const std::size_t px = ds.image_volume();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    os.put(static_cast<char>(ds.labels[i]));
    for (std::size_t k = 0; k < px; ++k) {
      const double v = std::clamp(static_cast<double>(ds.images[i * px + k]), 0.0, 1.0);
      os.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
    }
  }
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

struct SyntheticSpec {
  int classes = 3;
  int per_class = 150;
  int resolution = 16;
  double difficulty = 0.0;  // 0 = well separated, 1 = heavily overlapping
  std::uint64_t seed = 1;
};

/// Each class is a coloured, oriented stripe blob: class c gets its own hue
/// and stripe orientation. Per-item jitter in position, size and amplitude
/// plus pixel noise; `difficulty` shrinks the class signal and raises noise.
template <typename T>
ImageDataset<T> make_synthetic(const SyntheticSpec& spec) {
  const int R = spec.resolution;
  if (R < 2 || (R & (R - 1)) != 0) throw InputError("synthetic: resolution must be a power of two");
  if (spec.classes < 1 || spec.per_class < 1) throw InputError("synthetic: need classes and items");
  const double d = std::clamp(spec.difficulty, 0.0, 1.0);
  const std::size_t K = static_cast<std::size_t>(spec.classes);
  const std::size_t N = K * static_cast<std::size_t>(spec.per_class);
  const auto Rs = static_cast<std::size_t>(R);
  ImageDataset<T> ds;
  ds.images = Tensor<T>(Shape{N, 3, Rs, Rs});
  ds.labels.resize(N);
  for (std::size_t c = 0; c < K; ++c) ds.class_names.push_back("class" + std::to_string(c));

  auto hue_rgb = [](double h) {
    std::array<double, 3> rgb{};
    for (int k = 0; k < 3; ++k) {
      const double x = std::fmod(h * 6.0 + 4.0 - 2.0 * k + 6.0, 6.0);  // r:+4, g:+2, b:0 offsets
      rgb[static_cast<std::size_t>(k)] = std::clamp(std::abs(x - 3.0) - 1.0, 0.0, 1.0);
    }
    return rgb;
  };

  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const double noise = 0.04 + 0.30 * d;
  const double signal = 1.0 - 0.75 * d;
  const double mix = 0.85 * d;  // share of a random other class's colour
  for (std::size_t i = 0; i < N; ++i) {
    const std::size_t c = i % K;
    ds.labels[i] = static_cast<int>(c);
    auto color = hue_rgb(static_cast<double>(c) / static_cast<double>(K));
    const auto other = hue_rgb(uni(rng));
    const double m = mix * uni(rng);
    for (int k = 0; k < 3; ++k) {
      auto& v = color[static_cast<std::size_t>(k)];
      v = (1 - m) * v + m * other[static_cast<std::size_t>(k)];
    }
    const double theta = std::numbers::pi * static_cast<double>(c) / static_cast<double>(K);
    const double freq = 2.0 * std::numbers::pi / std::max(4.0, R / 3.0);
    const double cy = R / 2.0 + (uni(rng) - 0.5) * R * (0.3 + 0.3 * d);
    const double cx = R / 2.0 + (uni(rng) - 0.5) * R * (0.3 + 0.3 * d);
    const double sigma = R * (0.22 + 0.1 * uni(rng));
    const double amp = signal * (0.7 + 0.3 * uni(rng));
    const double phase = 2.0 * std::numbers::pi * uni(rng);
    T* img = ds.images.data() + i * 3 * Rs * Rs;
    for (int y = 0; y < R; ++y)
      for (int x = 0; x < R; ++x) {
        const double dy = y - cy, dx = x - cx;
        const double blob = std::exp(-(dy * dy + dx * dx) / (2 * sigma * sigma));
        const double stripe = 0.5 + 0.5 * std::cos(freq * (dx * std::cos(theta) + dy * std::sin(theta)) + phase);
        const double shape = amp * blob * (0.4 + 0.6 * stripe);
        for (std::size_t k = 0; k < 3; ++k) {
          const double v = 0.5 + (color[k] - 0.5) * shape + noise * gauss(rng);
          img[(k * Rs + static_cast<std::size_t>(y)) * Rs + static_cast<std::size_t>(x)] =
              static_cast<T>(std::clamp(v, 0.0, 1.0));
        }
      }
  }
  return ds;
}

}  // namespace cnf
