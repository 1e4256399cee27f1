#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ugeforge/error.hpp"
#include "ugeforge/hash.hpp"
#include "ugeforge/rng.hpp"
#include "ugeforge/tensor.hpp"

namespace ugeforge {

// Labeled image collection. Pixels are reals in [0,1] stored N x H x W x C.
//
// source_id/source_index record where every sample came from so that splits
// consumed by different stages can be proven disjoint.
struct Dataset {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> images;
  std::vector<int> labels;
  std::vector<std::string> class_names;
  std::string split_tag;
  std::string source_id;
  std::vector<std::int64_t> source_index;

  int size() const { return static_cast<int>(labels.size()); }
  int num_classes() const { return static_cast<int>(class_names.size()); }
  std::size_t sample_size() const { return static_cast<std::size_t>(height) * width * channels; }
  std::span<const double> image(int i) const {
    return {images.data() + i * sample_size(), sample_size()};
  }
};

// Throws a descriptive Error when an invariant does not hold.
inline void validate(const Dataset& d) {
  const std::string tag = d.split_tag.empty() ? std::string("dataset") : d.split_tag;
  UGE_REQUIRE(d.size() >= 1, tag + ": dataset is empty");
  UGE_REQUIRE(d.num_classes() >= 2, tag + ": need at least 2 classes, have " + std::to_string(d.num_classes()));
  UGE_REQUIRE(d.height > 0 && d.width > 0 && d.channels > 0, tag + ": invalid image geometry");
  UGE_REQUIRE(d.images.size() == d.sample_size() * d.labels.size(),
              tag + ": pixel buffer holds " + std::to_string(d.images.size()) + " values, expected " +
                  std::to_string(d.sample_size() * d.labels.size()));
  UGE_REQUIRE(d.source_index.empty() || d.source_index.size() == d.labels.size(),
              tag + ": provenance index count mismatch");
  for (int i = 0; i < d.size(); ++i) {
    UGE_REQUIRE(d.labels[i] >= 0 && d.labels[i] < d.num_classes(),
                tag + ": record " + std::to_string(i) + " has label " + std::to_string(d.labels[i]) +
                    " outside [0," + std::to_string(d.num_classes()) + ")");
  }
  for (std::size_t j = 0; j < d.images.size(); ++j) {
    const double p = d.images[j];
    UGE_REQUIRE(std::isfinite(p) && p >= 0.0 && p <= 1.0,
                tag + ": record " + std::to_string(j / d.sample_size()) + " has pixel value " +
                    std::to_string(p) + " outside [0,1]");
  }
}

// Content hash over geometry, pixels and labels (not the tag).
inline std::string dataset_hash(const Dataset& d) {
  Sha256 h;
  h.update_u64(d.height).update_u64(d.width).update_u64(d.channels);
  h.update(std::span<const double>(d.images));
  h.update(std::span<const int>(d.labels));
  for (const auto& n : d.class_names) h.update(n).update_u64(n.size());
  return h.hex();
}

inline Dataset subset(const Dataset& d, std::span<const int> indices, std::string tag) {
  Dataset out;
  out.height = d.height;
  out.width = d.width;
  out.channels = d.channels;
  out.class_names = d.class_names;
  out.split_tag = std::move(tag);
  out.source_id = d.source_id;
  const std::size_t ss = d.sample_size();
  out.images.reserve(indices.size() * ss);
  for (int i : indices) {
    UGE_REQUIRE(i >= 0 && i < d.size(), "subset: index " + std::to_string(i) + " out of range");
    const auto img = d.image(i);
    out.images.insert(out.images.end(), img.begin(), img.end());
    out.labels.push_back(d.labels[i]);
    out.source_index.push_back(d.source_index.empty() ? i : d.source_index[i]);
  }
  return out;
}

// Concatenation of datasets with identical geometry and class list.
inline Dataset concat(const std::vector<const Dataset*>& parts, std::string tag) {
  UGE_REQUIRE(!parts.empty(), "concat: no datasets");
  Dataset out;
  const Dataset& first = *parts.front();
  out.height = first.height;
  out.width = first.width;
  out.channels = first.channels;
  out.class_names = first.class_names;
  out.source_id = first.source_id;
  out.split_tag = std::move(tag);
  for (const Dataset* p : parts) {
    UGE_REQUIRE(p->height == out.height && p->width == out.width && p->channels == out.channels &&
                    p->class_names == out.class_names,
                "concat: incompatible dataset '" + p->split_tag + "'");
    out.images.insert(out.images.end(), p->images.begin(), p->images.end());
    out.labels.insert(out.labels.end(), p->labels.begin(), p->labels.end());
    for (int i = 0; i < p->size(); ++i)
      out.source_index.push_back(p->source_index.empty() ? i : p->source_index[i]);
  }
  return out;
}

// NHWC samples -> NCHW tensor.
template <class T = double>
Tensor<T> gather_batch(const Dataset& d, std::span<const int> indices) {
  Tensor<T> t(static_cast<int>(indices.size()), d.channels, d.height, d.width);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const double* src = d.images.data() + indices[b] * d.sample_size();
    for (int y = 0; y < d.height; ++y)
      for (int x = 0; x < d.width; ++x)
        for (int c = 0; c < d.channels; ++c)
          t.at(static_cast<int>(b), c, y, x) = T(src[(static_cast<std::size_t>(y) * d.width + x) * d.channels + c]);
  }
  return t;
}

inline std::vector<int> gather_labels(const Dataset& d, std::span<const int> indices) {
  std::vector<int> y;
  y.reserve(indices.size());
  for (int i : indices) y.push_back(d.labels[i]);
  return y;
}

// NCHW tensor -> NHWC rows written into dataset slots.
inline void scatter_batch(const Tensor<double>& t, std::span<const int> indices, Dataset& d) {
  for (std::size_t b = 0; b < indices.size(); ++b) {
    double* dst = d.images.data() + indices[b] * d.sample_size();
    for (int y = 0; y < d.height; ++y)
      for (int x = 0; x < d.width; ++x)
        for (int c = 0; c < d.channels; ++c)
          dst[(static_cast<std::size_t>(y) * d.width + x) * d.channels + c] = t.at(static_cast<int>(b), c, y, x);
  }
}

// ---------------------------------------------------------------------------
// Perturbation budget

struct PerturbationBudget {
  double rho = 0.04;  // l-inf radius on the [0,1] pixel scale
};

inline void validate(const PerturbationBudget& b) {
  UGE_REQUIRE(std::isfinite(b.rho) && b.rho >= 0.0 && b.rho <= 1.0,
              "perturbation budget rho=" + std::to_string(b.rho) + " outside [0,1]");
}

// The budget predicate exactly as every checker evaluates it.
inline bool within_budget(double o, double x, double rho) {
  return std::abs(o - x) <= rho && o >= 0.0 && o <= 1.0;
}

// Projects one pixel onto {o : |o - x| <= rho, 0 <= o <= 1}. Pixels already
// inside are returned untouched; bounds are nudged by ulps so the projected
// value satisfies within_budget() in floating point, not just in exact math.
inline double clamp_pixel(double raw, double x, double rho) {
  UGE_REQUIRE(std::isfinite(raw), "clamp_to_budget: non-finite pixel");
  if (within_budget(raw, x, rho)) return raw;
  double hi = std::min(x + rho, 1.0);
  while (!within_budget(hi, x, rho)) hi = std::nextafter(hi, -1.0);
  double lo = std::max(x - rho, 0.0);
  while (!within_budget(lo, x, rho)) lo = std::nextafter(lo, 2.0);
  return raw < lo ? lo : hi;
}

inline std::vector<double> clamp_to_budget(std::span<const double> raw, std::span<const double> x,
                                           const PerturbationBudget& budget) {
  UGE_REQUIRE(raw.size() == x.size(), "clamp_to_budget: shape mismatch (" + std::to_string(raw.size()) +
                                          " vs " + std::to_string(x.size()) + " elements)");
  validate(budget);
  std::vector<double> out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = clamp_pixel(raw[i], x[i], budget.rho);
  return out;
}

inline Tensor<double> clamp_to_budget(const Tensor<double>& raw, const Tensor<double>& x,
                                      const PerturbationBudget& budget) {
  UGE_REQUIRE(raw.same_shape(x), "clamp_to_budget: shape mismatch " + shape_str(raw.shape) + " vs " +
                                     shape_str(x.shape));
  Tensor<double> out;
  out.shape = raw.shape;
  out.data = clamp_to_budget(std::span<const double>(raw.data), std::span<const double>(x.data), budget);
  return out;
}

// Largest elementwise |a - b| over two aligned datasets.
inline double linf_distance(const Dataset& a, const Dataset& b) {
  UGE_REQUIRE(a.images.size() == b.images.size(), "linf_distance: datasets not aligned");
  double m = 0.0;
  for (std::size_t i = 0; i < a.images.size(); ++i) m = std::max(m, std::abs(a.images[i] - b.images[i]));
  return m;
}

inline double quantize_pixel(double p) { return std::round(255.0 * p) / 255.0; }

inline Dataset quantized(Dataset d) {
  for (double& p : d.images) p = quantize_pixel(p);
  return d;
}

// ---------------------------------------------------------------------------
// Splitting

struct SplitSpec {
  std::vector<std::pair<std::string, double>> fractions;  // ordered
  std::uint64_t seed = 0;
  bool stratified = true;
};

inline void validate(const SplitSpec& s) {
  UGE_REQUIRE(!s.fractions.empty(), "split spec: no splits");
  double total = 0.0;
  for (const auto& [name, f] : s.fractions) {
    UGE_REQUIRE(f > 0.0 && f <= 1.0, "split spec: fraction of '" + name + "' outside (0,1]");
    total += f;
  }
  UGE_REQUIRE(total <= 1.0 + 1e-9, "split spec: fractions sum to " + std::to_string(total) + " > 1");
}

namespace detail {

// Per-split counts for n items: floor(f*n), and when the fractions cover the
// whole set the remainder goes to the largest fractional parts (ties: split
// order rotated by `rotate`, which balances leftovers across classes).
inline std::vector<int> allocate(int n, const SplitSpec& s, int rotate) {
  const std::size_t m = s.fractions.size();
  std::vector<int> counts(m);
  std::vector<double> frac(m);
  double total = 0.0;
  int used = 0;
  for (std::size_t k = 0; k < m; ++k) {
    const double ideal = s.fractions[k].second * n;
    counts[k] = static_cast<int>(std::floor(ideal + 1e-9));
    frac[k] = ideal - counts[k];
    used += counts[k];
    total += s.fractions[k].second;
  }
  if (std::abs(total - 1.0) < 1e-9) {
    std::vector<std::size_t> order(m);
    for (std::size_t k = 0; k < m; ++k) order[k] = (k + rotate) % m;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return frac[a] > frac[b] + 1e-12; });
    for (std::size_t r = 0; used < n; ++r, ++used) ++counts[order[r % m]];
  }
  return counts;
}

}  // namespace detail

inline std::map<std::string, Dataset> split_dataset(const Dataset& d, const SplitSpec& spec) {
  validate(spec);
  Rng rng(spec.seed);
  const std::size_t m = spec.fractions.size();
  std::vector<std::vector<int>> members(m);
  if (spec.stratified) {
    std::vector<std::vector<int>> by_class(d.num_classes());
    for (int i = 0; i < d.size(); ++i) by_class[d.labels[i]].push_back(i);
    for (int c = 0; c < d.num_classes(); ++c) {
      auto& idx = by_class[c];
      rng.shuffle(idx.begin(), idx.end());
      const auto counts = detail::allocate(static_cast<int>(idx.size()), spec, c);
      std::size_t pos = 0;
      for (std::size_t k = 0; k < m; ++k)
        for (int j = 0; j < counts[k]; ++j) members[k].push_back(idx[pos++]);
    }
    for (auto& mem : members) std::sort(mem.begin(), mem.end());
  } else {
    auto perm = rng.permutation(d.size());
    const auto counts = detail::allocate(d.size(), spec, 0);
    std::size_t pos = 0;
    for (std::size_t k = 0; k < m; ++k) {
      for (int j = 0; j < counts[k]; ++j) members[k].push_back(perm[pos++]);
      std::sort(members[k].begin(), members[k].end());
    }
  }
  std::map<std::string, Dataset> out;
  for (std::size_t k = 0; k < m; ++k) {
    const auto& name = spec.fractions[k].first;
    UGE_REQUIRE(!members[k].empty(), "split '" + name + "' is empty after rounding");
    out.emplace(name, subset(d, members[k], name));
  }
  return out;
}

// True when two splits share a provenance index from the same source.
inline bool overlaps(const Dataset& a, const Dataset& b) {
  if (a.source_id != b.source_id) return false;
  std::vector<std::int64_t> x = a.source_index, y = b.source_index;
  std::sort(x.begin(), x.end());
  std::sort(y.begin(), y.end());
  std::size_t i = 0, j = 0;
  while (i < x.size() && j < y.size()) {
    if (x[i] == y[j]) return true;
    x[i] < y[j] ? ++i : ++j;
  }
  return false;
}

// ---------------------------------------------------------------------------
// Synthetic Gaussian-blob corpus

struct BlobsSpec {
  int classes = 4;
  int count = 2000;
  int height = 16;
  int width = 16;
  int channels = 1;
  double amplitude = 0.3;   // peak blob intensity above background
  double noise = 0.08;      // per-pixel Gaussian noise std
  double jitter = 1.5;      // center jitter (pixels, uniform)
  double blob_sigma = 2.0;  // blob radius (pixels)
  std::uint64_t seed = 7;
};

inline std::string blobs_source_id(const BlobsSpec& s) {
  return "blobs:K=" + std::to_string(s.classes) + ",N=" + std::to_string(s.count) + ",H=" +
         std::to_string(s.height) + ",W=" + std::to_string(s.width) + ",C=" + std::to_string(s.channels) +
         ",amp=" + std::to_string(s.amplitude) + ",noise=" + std::to_string(s.noise) +
         ",seed=" + std::to_string(s.seed);
}

// Each class is a blob at its own position on a circle around the image
// center, rendered on a mid-gray noisy background and stored 8-bit quantized
// like any real image corpus. Labels cycle 0..K-1 so classes are balanced.
inline Dataset make_blobs(const BlobsSpec& s) {
  UGE_REQUIRE(s.classes >= 2, "blobs: need at least 2 classes");
  UGE_REQUIRE(s.count >= 1 && s.height >= 4 && s.width >= 4 && s.channels >= 1, "blobs: invalid geometry");
  Dataset d;
  d.height = s.height;
  d.width = s.width;
  d.channels = s.channels;
  for (int c = 0; c < s.classes; ++c) d.class_names.push_back("blob" + std::to_string(c));
  d.split_tag = "all";
  d.source_id = blobs_source_id(s);
  d.images.resize(static_cast<std::size_t>(s.count) * s.height * s.width * s.channels);
  d.labels.resize(s.count);
  d.source_index.resize(s.count);
  Rng rng(s.seed);
  const double radius = 0.3 * std::min(s.height, s.width);
  for (int i = 0; i < s.count; ++i) {
    const int y = i % s.classes;
    d.labels[i] = y;
    d.source_index[i] = i;
    const double angle = 2.0 * std::numbers::pi * y / s.classes;
    const double cy = 0.5 * (s.height - 1) + radius * std::sin(angle) + rng.uniform(-s.jitter, s.jitter);
    const double cx = 0.5 * (s.width - 1) + radius * std::cos(angle) + rng.uniform(-s.jitter, s.jitter);
    const double amp = s.amplitude * rng.uniform(0.75, 1.25);
    const double inv2s2 = 1.0 / (2.0 * s.blob_sigma * s.blob_sigma);
    double* img = d.images.data() + static_cast<std::size_t>(i) * d.sample_size();
    for (int py = 0; py < s.height; ++py) {
      for (int px = 0; px < s.width; ++px) {
        const double r2 = (py - cy) * (py - cy) + (px - cx) * (px - cx);
        const double blob = amp * std::exp(-r2 * inv2s2);
        for (int ch = 0; ch < s.channels; ++ch) {
          const double v = 0.5 + blob + s.noise * rng.normal();
          img[(static_cast<std::size_t>(py) * s.width + px) * s.channels + ch] =
              quantize_pixel(std::clamp(v, 0.0, 1.0));
        }
      }
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// CIFAR binary archives

// Reads CIFAR-10 (1 label byte) or CIFAR-100 (coarse + fine label bytes, fine
// used) records of 32x32x3 planar RGB. `limit` < 0 reads everything.
inline void append_cifar_file(const std::filesystem::path& file, int label_bytes, int num_classes, Dataset& d,
                              long limit) {
  std::ifstream in(file, std::ios::binary);
  UGE_REQUIRE(in.good(), "cannot read CIFAR archive '" + file.string() + "'");
  constexpr int kPixels = 32 * 32 * 3;
  std::vector<unsigned char> rec(label_bytes + kPixels);
  long record = 0;
  while (limit < 0 || d.size() < limit) {
    in.read(reinterpret_cast<char*>(rec.data()), static_cast<std::streamsize>(rec.size()));
    if (in.gcount() == 0) break;
    UGE_REQUIRE(in.gcount() == static_cast<std::streamsize>(rec.size()),
                "corrupt CIFAR archive '" + file.string() + "': truncated record " + std::to_string(record));
    const int label = rec[label_bytes - 1];
    UGE_REQUIRE(label < num_classes, "CIFAR archive '" + file.string() + "': record " + std::to_string(record) +
                                         " has label " + std::to_string(label) + " outside [0," +
                                         std::to_string(num_classes) + ")");
    d.labels.push_back(label);
    d.source_index.push_back(static_cast<std::int64_t>(d.source_index.size()));
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x)
        for (int c = 0; c < 3; ++c) d.images.push_back(rec[label_bytes + c * 1024 + y * 32 + x] / 255.0);
    ++record;
  }
}

inline Dataset load_cifar(const std::filesystem::path& dir, bool cifar100, bool train, long limit = -1) {
  Dataset d;
  d.height = d.width = 32;
  d.channels = 3;
  if (cifar100) {
    for (int c = 0; c < 100; ++c) d.class_names.push_back("class" + std::to_string(c));
    append_cifar_file(dir / (train ? "train.bin" : "test.bin"), 2, 100, d, limit);
  } else {
    d.class_names = {"airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"};
    if (train) {
      for (int b = 1; b <= 5 && (limit < 0 || d.size() < limit); ++b)
        append_cifar_file(dir / ("data_batch_" + std::to_string(b) + ".bin"), 1, 10, d, limit);
    } else {
      append_cifar_file(dir / "test_batch.bin", 1, 10, d, limit);
    }
  }
  d.split_tag = train ? "train" : "test";
  d.source_id = std::string(cifar100 ? "cifar100:" : "cifar10:") + (train ? "train" : "test");
  validate(d);
  return d;
}

}  // namespace ugeforge
