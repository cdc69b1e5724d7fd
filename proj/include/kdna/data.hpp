/*
 * Copyright 2026 The KernelDNA Engine Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

// IDX files: big-endian u32 magic (0x00000800 | ndim in the low byte, u8
// payload), ndim big-endian u32 extents, then the bytes. 0x801 holds
// labels, 0x803 holds [n,h,w] images; 0x804 is accepted as [n,c,h,w].

#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "kdna/tensor.hpp"

namespace kdna {

struct IdxArray {
  std::vector<std::size_t> dims;
  std::vector<std::uint8_t> bytes;
};

namespace detail {

inline std::uint32_t read_be32(std::istream& is, std::size_t& offset, const char* what) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (is.gcount() != 4)
    throw FormatError(std::string("truncated ") + what + " at byte offset " + std::to_string(offset));
  offset += 4;
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) | b[3];
}

inline void write_be32(std::ostream& os, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>((v >> 16) & 0xff),
                     static_cast<char>((v >> 8) & 0xff), static_cast<char>(v & 0xff)};
  os.write(b, 4);
}

}  // namespace detail

inline IdxArray read_idx(std::istream& is) {
  std::size_t offset = 0;
  const std::uint32_t magic = detail::read_be32(is, offset, "IDX magic");
  const std::uint32_t ndim = magic & 0xff;
  if ((magic & 0xffffff00u) != 0x800u || ndim == 0 || ndim > 4) {
    std::ostringstream m;
    m << "bad IDX magic 0x" << std::hex << magic << " at byte offset 0";
    throw FormatError(m.str());
  }
  IdxArray a;
  for (std::uint32_t d = 0; d < ndim; ++d) {
    const std::size_t at = offset;
    const std::uint32_t e = detail::read_be32(is, offset, "IDX dimension");
    if (e == 0) throw FormatError("zero IDX extent at byte offset " + std::to_string(at));
    a.dims.push_back(e);
  }
  std::size_t n = 1;
  for (auto e : a.dims) n *= e;
  a.bytes.resize(n);
  is.read(reinterpret_cast<char*>(a.bytes.data()), static_cast<std::streamsize>(n));
  const auto got = static_cast<std::size_t>(is.gcount());
  if (got != n)
    throw FormatError("truncated IDX payload at byte offset " + std::to_string(offset + got) + ": expected " +
                      std::to_string(n) + " bytes, got " + std::to_string(got));
  return a;
}

inline IdxArray read_idx_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open '" + path + "'");
  return read_idx(is);
}

inline std::string encode_idx(const IdxArray& a) {
  std::ostringstream os(std::ios::binary);
  detail::write_be32(os, 0x800u | static_cast<std::uint32_t>(a.dims.size()));
  for (auto e : a.dims) detail::write_be32(os, static_cast<std::uint32_t>(e));
  os.write(reinterpret_cast<const char*>(a.bytes.data()), static_cast<std::streamsize>(a.bytes.size()));
  return os.str();
}

inline void write_idx_file(const std::string& path, const IdxArray& a) {
  io::write_file_atomic(path, encode_idx(a));
}

/// Images with labels. `images` is normalised per channel with `mean` and
/// `stddev`; a validation split carries the statistics of its training split.
struct Dataset {
  Tensor images;  // [n, c, h, w]
  std::vector<int> labels;
  std::size_t num_classes = 0;
  std::vector<double> mean, stddev;
  std::string split;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t channels() const { return images.shape()[1]; }
  std::size_t height() const { return images.shape()[2]; }

  Tensor gather(std::span<const std::size_t> idx) const {
    const Shape& s = images.shape();
    const std::size_t per = s[1] * s[2] * s[3];
    Tensor out(Shape{idx.size(), s[1], s[2], s[3]});
    for (std::size_t i = 0; i < idx.size(); ++i)
      std::copy_n(images.data() + idx[i] * per, per, out.data() + i * per);
    return out;
  }

  std::vector<int> gather_labels(std::span<const std::size_t> idx) const {
    std::vector<int> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(labels[i]);
    return out;
  }
};

/// u8 images -> [n,c,h,w] in [0,1].
inline Tensor idx_to_images(const IdxArray& a) {
  Shape s;
  if (a.dims.size() == 3)
    s = {a.dims[0], 1, a.dims[1], a.dims[2]};
  else if (a.dims.size() == 4)
    s = {a.dims[0], a.dims[1], a.dims[2], a.dims[3]};
  else
    throw FormatError("IDX image file must have 3 or 4 dimensions, got " + std::to_string(a.dims.size()));
  Tensor t(s);
  for (std::size_t i = 0; i < a.bytes.size(); ++i) t[i] = a.bytes[i] / 255.0;
  return t;
}

inline std::vector<int> idx_to_labels(const IdxArray& a, std::size_t num_classes) {
  if (a.dims.size() != 1) throw FormatError("IDX label file must be one-dimensional");
  std::vector<int> out(a.bytes.begin(), a.bytes.end());
  for (std::size_t i = 0; i < out.size(); ++i)
    if (static_cast<std::size_t>(out[i]) >= num_classes)
      throw InputError("label " + std::to_string(out[i]) + " at index " + std::to_string(i) +
                       " is outside [0," + std::to_string(num_classes) + ")");
  return out;
}

inline void channel_stats(const Tensor& images, std::vector<double>& mean, std::vector<double>& stddev) {
  const Shape& s = images.shape();
  const std::size_t plane = s[2] * s[3];
  mean.assign(s[1], 0.0);
  stddev.assign(s[1], 0.0);
  for (std::size_t c = 0; c < s[1]; ++c) {
    double sum = 0, sq = 0;
    for (std::size_t b = 0; b < s[0]; ++b) {
      const double* p = images.data() + (b * s[1] + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        sum += p[i];
        sq += p[i] * p[i];
      }
    }
    const double n = static_cast<double>(s[0] * plane);
    mean[c] = sum / n;
    const double var = std::max(0.0, sq / n - mean[c] * mean[c]);
    stddev[c] = var > 1e-12 ? std::sqrt(var) : 1.0;
  }
}

inline void normalise(Tensor& images, const std::vector<double>& mean, const std::vector<double>& stddev) {
  const Shape& s = images.shape();
  if (mean.size() != s[1] || stddev.size() != s[1])
    throw ShapeError("normalisation statistics for " + std::to_string(mean.size()) + " channels, images have " +
                     std::to_string(s[1]));
  const std::size_t plane = s[2] * s[3];
  for (std::size_t b = 0; b < s[0]; ++b)
    for (std::size_t c = 0; c < s[1]; ++c) {
      double* p = images.data() + (b * s[1] + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] = (p[i] - mean[c]) / stddev[c];
    }
}

/// Loads one split. Pass the training split's statistics for validation;
/// with none given, statistics are computed from these images.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                        std::size_t num_classes, std::string split, const Dataset* stats_from = nullptr) {
  Dataset d;
  d.images = idx_to_images(read_idx_file(images_path));
  d.labels = idx_to_labels(read_idx_file(labels_path), num_classes);
  if (d.labels.size() != d.images.shape()[0])
    throw FormatError(std::to_string(d.images.shape()[0]) + " images but " + std::to_string(d.labels.size()) +
                      " labels");
  d.num_classes = num_classes;
  d.split = std::move(split);
  if (stats_from) {
    d.mean = stats_from->mean;
    d.stddev = stats_from->stddev;
  } else {
    channel_stats(d.images, d.mean, d.stddev);
  }
  normalise(d.images, d.mean, d.stddev);
  return d;
}

struct DataSplits {
  Dataset train, val;
};

/// A data directory holds train-images.idx, train-labels.idx,
/// val-images.idx and val-labels.idx.
inline DataSplits load_data_dir(const std::string& dir, std::size_t num_classes) {
  DataSplits s;
  s.train = load_idx(dir + "/train-images.idx", dir + "/train-labels.idx", num_classes, "train");
  s.val = load_idx(dir + "/val-images.idx", dir + "/val-labels.idx", num_classes, "val", &s.train);
  return s;
}

// Procedural shapes ---------------------------------------------------------

inline constexpr std::size_t kSyntheticClasses = 10;

/// Ten classes of randomly placed, scaled and rotated glyphs over noisy
/// backgrounds: disk, ring, square, square outline, triangle, plus, cross,
/// bars, grating, checkerboard. With three channels the glyph and the
/// background get random colours, so colour carries no label information.
inline std::pair<IdxArray, IdxArray> make_synthetic(std::size_t n, std::size_t channels, std::size_t size,
                                                     std::uint64_t seed, double noise = 0.18) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  IdxArray images, labels;
  images.dims = channels == 1 ? std::vector<std::size_t>{n, size, size}
                              : std::vector<std::size_t>{n, channels, size, size};
  labels.dims = {n};
  images.bytes.resize(n * channels * size * size);
  labels.bytes.resize(n);
  const double S = static_cast<double>(size);
  std::vector<double> fg(channels), bg(channels);
  for (std::size_t i = 0; i < n; ++i) {
    const int cls = static_cast<int>(i % kSyntheticClasses);
    labels.bytes[i] = static_cast<std::uint8_t>(cls);
    const double r = S * (0.2 + 0.14 * u01(rng));
    const double cx = S / 2 + (u01(rng) - 0.5) * (S - 2 * r) * 0.6;
    const double cy = S / 2 + (u01(rng) - 0.5) * (S - 2 * r) * 0.6;
    const double theta = (u01(rng) - 0.5) * 0.5;
    const double period = 2.5 + 1.5 * u01(rng);
    const double contrast = 0.35 + 0.45 * u01(rng);
    for (std::size_t c = 0; c < channels; ++c) {
      bg[c] = 0.2 + 0.3 * u01(rng);
      fg[c] = channels == 1 ? bg[c] + contrast : bg[c] + contrast * (0.4 + 0.6 * u01(rng));
    }
    const double ct = std::cos(theta), st = std::sin(theta);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double dx0 = (static_cast<double>(x) + 0.5 - cx), dy0 = (static_cast<double>(y) + 0.5 - cy);
        const double dx = ct * dx0 + st * dy0, dy = -st * dx0 + ct * dy0;
        const double ax = std::abs(dx), ay = std::abs(dy), rho = std::hypot(dx, dy);
        const double w = std::max(1.0, r * 0.28);
        bool on = false;
        switch (cls) {
          case 0: on = rho <= r; break;
          case 1: on = rho <= r && rho >= r - w; break;
          case 2: on = ax <= r * 0.85 && ay <= r * 0.85; break;
          case 3: on = ax <= r * 0.85 && ay <= r * 0.85 && (ax >= r * 0.85 - w || ay >= r * 0.85 - w); break;
          case 4: on = dy <= r * 0.7 && dy >= -r && ax <= (dy + r) * 0.6; break;
          case 5: on = (ax <= w * 0.6 && ay <= r) || (ay <= w * 0.6 && ax <= r); break;
          case 6: on = rho <= r && (std::abs(dx - dy) <= w * 0.85 || std::abs(dx + dy) <= w * 0.85); break;
          case 7: on = ax <= r && ay <= r && std::fmod(dy + 64 * period, period) < period / 2; break;
          case 8: on = ax <= r && ay <= r && std::fmod(dx + dy + 64 * period, period * 1.4) < period * 0.7; break;
          case 9:
            on = ax <= r && ay <= r &&
                 ((static_cast<int>(std::floor((dx + 64 * period) / period)) +
                   static_cast<int>(std::floor((dy + 64 * period) / period))) % 2 == 0);
            break;
          default: break;
        }
        for (std::size_t c = 0; c < channels; ++c) {
          const double v = (on ? fg[c] : bg[c]) + noise * gauss(rng);
          images.bytes[((i * channels + c) * size + y) * size + x] =
              static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
        }
      }
  }
  return {std::move(images), std::move(labels)};
}

/// Writes a train/val pair of synthetic splits into `dir`.
inline void write_synthetic_dir(const std::string& dir, std::size_t n_train, std::size_t n_val,
                                std::size_t channels, std::size_t size, std::uint64_t seed) {
  auto [ti, tl] = make_synthetic(n_train, channels, size, seed);
  auto [vi, vl] = make_synthetic(n_val, channels, size, seed ^ 0x9e3779b97f4a7c15ULL);
  write_idx_file(dir + "/train-images.idx", ti);
  write_idx_file(dir + "/train-labels.idx", tl);
  write_idx_file(dir + "/val-images.idx", vi);
  write_idx_file(dir + "/val-labels.idx", vl);
}

}  // namespace kdna
