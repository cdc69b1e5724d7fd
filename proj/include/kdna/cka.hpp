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

#include <Eigen/Dense>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "kdna/model.hpp"

namespace kdna {

/// Linear CKA between two representations of the same n samples:
/// ||Y^T X||_F^2 / (||X^T X||_F ||Y^T Y||_F) after centring every column.
/// Inputs are [n, p] tensors (any trailing dims are flattened into p).
inline double linear_cka(const Tensor& xa, const Tensor& xb) {
  const std::size_t n = xa.shape()[0];
  if (xb.shape()[0] != n)
    throw ShapeError("linear_cka needs the same sample count, got " + std::to_string(n) + " and " +
                     std::to_string(xb.shape()[0]));
  if (n < 2) throw DegenerateInputError("linear_cka needs at least two samples");
  const std::size_t p1 = xa.size() / n, p2 = xb.size() / n;
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Mat X = Eigen::Map<const Mat>(xa.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p1));
  Mat Y = Eigen::Map<const Mat>(xb.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p2));
  X.rowwise() -= X.colwise().mean();
  Y.rowwise() -= Y.colwise().mean();
  const double xx = (X.transpose() * X).norm();
  const double yy = (Y.transpose() * Y).norm();
  if (!(xx > 0) || !(yy > 0)) throw DegenerateInputError("linear_cka input has zero variance");
  const double yx = (Y.transpose() * X).squaredNorm();
  return std::clamp(yx / (xx * yy), 0.0, 1.0);
}

struct CkaMatrix {
  std::vector<std::string> labels;
  std::vector<double> values;  // row-major, labels.size() squared

  std::size_t size() const noexcept { return labels.size(); }
  double operator()(std::size_t i, std::size_t j) const { return values[i * labels.size() + j]; }
  double& operator()(std::size_t i, std::size_t j) { return values[i * labels.size() + j]; }
};

namespace detail {

/// Average-pools [b,c,h,w] by an integer factor so h becomes `target`,
/// then folds positions into rows: [b*target*target, c].
inline Tensor fold_positions(const Tensor& a, std::size_t target) {
  const Shape& s = a.shape();
  if (s[2] % target != 0 || s[3] % target != 0)
    throw ShapeError("cannot pool " + shape_string(s) + " down to " + std::to_string(target));
  const std::size_t fh = s[2] / target, fw = s[3] / target;
  Tensor out(Shape{s[0] * target * target, s[1]});
  const double inv = 1.0 / static_cast<double>(fh * fw);
  for (std::size_t b = 0; b < s[0]; ++b)
    for (std::size_t c = 0; c < s[1]; ++c) {
      const double* plane = a.data() + (b * s[1] + c) * s[2] * s[3];
      for (std::size_t i = 0; i < target; ++i)
        for (std::size_t j = 0; j < target; ++j) {
          double acc = 0;
          for (std::size_t p = 0; p < fh; ++p)
            for (std::size_t q = 0; q < fw; ++q) acc += plane[(i * fh + p) * s[3] + j * fw + q];
          out((b * target + i) * target + j, c) = acc * inv;
        }
    }
  return out;
}

/// Post-activation maps of every probed conv over `images`, pooled to the
/// smallest probed resolution and folded to [rows, channels].
inline std::vector<std::pair<std::string, Tensor>> collect_probes(Model& model, const Tensor& images,
                                                                  std::size_t batch) {
  const Mode before = model.mode();
  model.set_mode(Mode::eval);
  const Shape& s = images.shape();
  const std::size_t per = s[1] * s[2] * s[3];

  std::size_t target = SIZE_MAX;
  {
    ProbeSink sizes = [&](const std::string&, const Tensor& a) { target = std::min(target, a.shape()[2]); };
    Tensor one(Shape{1, s[1], s[2], s[3]}, std::vector<double>(images.data(), images.data() + per));
    model.predict(one, &sizes);
  }
  std::vector<std::pair<std::string, std::vector<double>>> acc;
  std::map<std::string, std::size_t> where;
  for (std::size_t start = 0; start < s[0]; start += batch) {
    const std::size_t n = std::min(batch, s[0] - start);
    Tensor x(Shape{n, s[1], s[2], s[3]},
             std::vector<double>(images.data() + start * per, images.data() + (start + n) * per));
    ProbeSink sink = [&](const std::string& label, const Tensor& a) {
      Tensor folded = fold_positions(a, target);
      auto [it, fresh] = where.try_emplace(label, acc.size());
      if (fresh) acc.emplace_back(label, std::vector<double>());
      auto& dst = acc[it->second].second;
      dst.insert(dst.end(), folded.begin(), folded.end());
    };
    model.predict(x, &sink);
  }
  if (before == Mode::train) model.set_mode(Mode::train);
  std::vector<std::pair<std::string, Tensor>> out;
  const std::size_t rows = s[0] * target * target;
  for (auto& [label, v] : acc) {
    const std::size_t cols = v.size() / rows;
    out.emplace_back(label, Tensor(Shape{rows, cols}, std::move(v)));
  }
  return out;
}

}  // namespace detail

/// Pairwise linear CKA over the post-ReLU outputs of every probed 3x3 conv.
/// Maps are pooled to the coarsest probed resolution, then every
/// (sample, row, col) position is one observation.
inline CkaMatrix cka_grid(Model& model, const Tensor& images, std::size_t batch = 64) {
  if (images.shape()[0] < 2) throw DegenerateInputError("cka_grid needs at least two samples");
  auto probes = detail::collect_probes(model, images, batch);
  CkaMatrix m;
  for (const auto& p : probes) m.labels.push_back(p.first);
  const std::size_t L = m.labels.size();
  m.values.assign(L * L, 0.0);
  for (std::size_t i = 0; i < L; ++i) {
    m(i, i) = 1.0;
    for (std::size_t j = i + 1; j < L; ++j) m(i, j) = m(j, i) = linear_cka(probes[i].second, probes[j].second);
  }
  return m;
}

/// Rectangular variant: rows are probes of `a`, columns probes of `b`.
inline CkaMatrix cka_cross(Model& a, Model& b, const Tensor& images, std::size_t batch = 64) {
  auto pa = detail::collect_probes(a, images, batch);
  auto pb = detail::collect_probes(b, images, batch);
  if (pa.size() != pb.size()) throw ShapeError("cka_cross needs models with the same number of probes");
  CkaMatrix m;
  for (const auto& p : pa) m.labels.push_back(p.first);
  const std::size_t L = m.labels.size();
  m.values.assign(L * L, 0.0);
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = 0; j < L; ++j) m(i, j) = linear_cka(pa[i].second, pb[j].second);
  return m;
}

struct SharingSimilarity {
  double within_parent = 0;  // mean CKA over child pairs bound to one parent
  double cross_parent = 0;   // mean CKA over same-stage child pairs with different parents
  std::size_t within_pairs = 0, cross_pairs = 0;
};

/// Compares child pairs that share a parent against child pairs in the same
/// stage that do not.
inline SharingSimilarity sharing_similarity(Model& model, const CkaMatrix& grid) {
  const auto index = [&](const std::string& label) -> std::size_t {
    for (std::size_t i = 0; i < grid.size(); ++i)
      if (grid.labels[i] == label) return i;
    throw ContractError("probe '" + label + "' missing from CKA grid");
  };
  const auto kids = model.children();
  SharingSimilarity s;
  for (std::size_t a = 0; a < kids.size(); ++a)
    for (std::size_t b = a + 1; b < kids.size(); ++b) {
      if (kids[a].stage != kids[b].stage) continue;
      const double v = grid(index(kids[a].name), index(kids[b].name));
      if (kids[a].parent == kids[b].parent) {
        s.within_parent += v;
        ++s.within_pairs;
      } else {
        s.cross_parent += v;
        ++s.cross_pairs;
      }
    }
  if (s.within_pairs) s.within_parent /= static_cast<double>(s.within_pairs);
  if (s.cross_pairs) s.cross_parent /= static_cast<double>(s.cross_pairs);
  return s;
}

// Output formats ------------------------------------------------------------

inline std::string format_cka_csv(const CkaMatrix& m) {
  std::ostringstream out;
  out << std::setprecision(17) << "layer";
  for (const auto& l : m.labels) out << ',' << l;
  out << '\n';
  for (std::size_t i = 0; i < m.size(); ++i) {
    out << m.labels[i];
    for (std::size_t j = 0; j < m.size(); ++j) out << ',' << m(i, j);
    out << '\n';
  }
  return out.str();
}

struct GrayImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;
};

/// Binary PGM (P5, maxval 255).
inline std::string encode_pgm(const GrayImage& img) {
  std::string out = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(img.pixels.begin(), img.pixels.end());
  return out;
}

inline GrayImage decode_pgm(std::string_view bytes) {
  std::size_t pos = 0;
  const auto token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) throw FormatError("truncated PGM header at byte offset " + std::to_string(start));
    return std::string(bytes.substr(start, pos - start));
  };
  if (token() != "P5") throw FormatError("not a binary PGM (expected P5) at byte offset 0");
  GrayImage img;
  try {
    img.width = std::stoul(token());
    img.height = std::stoul(token());
    if (std::stoul(token()) != 255) throw FormatError("only maxval 255 PGM files are supported");
  } catch (const std::logic_error&) {
    throw FormatError("malformed PGM header");
  }
  ++pos;  // single whitespace after maxval
  const std::size_t n = img.width * img.height;
  if (bytes.size() < pos + n)
    throw FormatError("truncated PGM payload at byte offset " + std::to_string(bytes.size()));
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                    bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
  return img;
}

/// Heatmap of a CKA matrix: 0 -> black, 1 -> white, each cell drawn as a
/// `cell` x `cell` square.
inline GrayImage cka_heatmap(const CkaMatrix& m, std::size_t cell = 1) {
  GrayImage img;
  img.width = img.height = m.size() * cell;
  img.pixels.resize(img.width * img.height);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      img.pixels[y * img.width + x] =
          static_cast<std::uint8_t>(std::lround(std::clamp(m(y / cell, x / cell), 0.0, 1.0) * 255.0));
  return img;
}

/// (1 + alpha_s) maps span roughly [0, 2]; pixels are 255 * v / 2 clamped,
/// so the untrained value 1.0 lands on mid-grey 128.
inline GrayImage spatial_map_image(const Tensor& map) {
  const std::size_t k = map.shape()[map.rank() - 1];
  GrayImage img;
  img.width = img.height = k;
  img.pixels.resize(k * k);
  for (std::size_t i = 0; i < k * k; ++i)
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(255.0 * map[i] / 2.0, 0.0, 255.0)));
  return img;
}

/// (1 + alpha_s) of a child as a k x k tensor.
inline Tensor spatial_map(const ChildConvLayer& child) {
  const std::size_t k = child.kernel();
  Tensor m(Shape{k, k}, 1.0);
  if (child.adapter().spatial_attn)
    for (std::size_t i = 0; i < k * k; ++i) m[i] += child.adapter().spatial_attn.value()[i];
  return m;
}

inline std::string format_spatial_csv(const Tensor& map) {
  const std::size_t k = map.shape()[0];
  std::ostringstream out;
  out << std::setprecision(17) << "row";
  for (std::size_t j = 0; j < k; ++j) out << ",c" << j;
  out << '\n';
  for (std::size_t i = 0; i < k; ++i) {
    out << i;
    for (std::size_t j = 0; j < k; ++j) out << ',' << map(i, j);
    out << '\n';
  }
  return out.str();
}

/// Writes attn_<child>.pgm and attn_<child>.csv for every child with a
/// spatial attention. Returns the child names written.
inline std::vector<std::string> export_spatial_attn(Model& model, const std::string& dir) {
  std::vector<std::string> written;
  for (const auto& c : model.children()) {
    if (!c.layer->adapter().spatial_attn) continue;
    const Tensor map = spatial_map(*c.layer);
    io::write_file_atomic(dir + "/attn_" + c.name + ".pgm", encode_pgm(spatial_map_image(map)));
    io::write_file_atomic(dir + "/attn_" + c.name + ".csv", format_spatial_csv(map));
    written.push_back(c.name);
  }
  return written;
}

}  // namespace kdna
