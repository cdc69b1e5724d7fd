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

#include <algorithm>
#include <array>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "kdna/error.hpp"

namespace kdna {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

inline std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

inline Shape row_major_strides(const Shape& shape) {
  Shape strides(shape.size(), 1);
  for (std::size_t d = shape.size(); d-- > 1;) strides[d - 1] = strides[d] * shape[d];
  return strides;
}

/// Dense row-major N-d array. Rank is at least 1; scalars are shape [1].
/// A default-constructed tensor is the "unset" value (no shape, no data).
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
    validate(shape_);
    data_.assign(shape_size(shape_), fill);
  }

  BasicTensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    validate(shape_);
    if (data_.size() != shape_size(shape_))
      throw ShapeError("shape " + shape_string(shape_) + " needs " +
                       std::to_string(shape_size(shape_)) + " values, got " +
                       std::to_string(data_.size()));
  }

  static BasicTensor scalar(T v) { return BasicTensor(Shape{1}, v); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::size_t extent(std::size_t d) const {
    if (d >= shape_.size())
      throw ShapeError("dimension " + std::to_string(d) + " out of range for rank " +
                       std::to_string(shape_.size()));
    return shape_[d];
  }

  Shape strides() const { return row_major_strides(shape_); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  auto begin() noexcept { return data_.begin(); }
  auto end() noexcept { return data_.end(); }
  auto begin() const noexcept { return data_.begin(); }
  auto end() const noexcept { return data_.end(); }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  template <typename... I>
  T& operator()(I... idx) noexcept {
    return data_[offset_of(idx...)];
  }
  template <typename... I>
  const T& operator()(I... idx) const noexcept {
    return data_[offset_of(idx...)];
  }

  T item() const {
    if (data_.size() != 1)
      throw ContractError("item() on tensor of shape " + shape_string(shape_));
    return data_[0];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  BasicTensor reshape(Shape shape) const& {
    BasicTensor copy = *this;
    return std::move(copy).reshape(std::move(shape));
  }
  BasicTensor reshape(Shape shape) && {
    validate(shape);
    if (shape_size(shape) != data_.size())
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    shape_ = std::move(shape);
    return std::move(*this);
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static void validate(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor rank must be at least 1");
    for (std::size_t d = 0; d < shape.size(); ++d)
      if (shape[d] == 0)
        throw ShapeError("extent of dimension " + std::to_string(d) + " is zero in " +
                         shape_string(shape));
  }

  template <typename... I>
  std::size_t offset_of(I... idx) const noexcept {
    std::array<std::size_t, sizeof...(I)> index{static_cast<std::size_t>(idx)...};
    std::size_t off = 0;
    for (std::size_t d = 0; d < index.size(); ++d) off = off * shape_[d] + index[d];
    return off;
  }

  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<double>;

/// Checked constructor for extents that come from user input.
template <typename T = double>
BasicTensor<T> tensor_new(std::span<const std::int64_t> extents, T fill) {
  Shape shape;
  for (std::size_t d = 0; d < extents.size(); ++d) {
    if (extents[d] <= 0)
      throw ShapeError("extent of dimension " + std::to_string(d) + " must be positive, got " +
                       std::to_string(extents[d]));
    shape.push_back(static_cast<std::size_t>(extents[d]));
  }
  return BasicTensor<T>(std::move(shape), fill);
}

template <typename T = double>
BasicTensor<T> tensor_new(std::initializer_list<std::int64_t> extents, T fill) {
  return tensor_new<T>(std::span<const std::int64_t>(extents.begin(), extents.size()), fill);
}

// ---------------------------------------------------------------------------
// Broadcasting (trailing-dimension alignment)

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t d = 0; d < rank; ++d) {
    const std::size_t ea = d + a.size() >= rank ? a[d + a.size() - rank] : 1;
    const std::size_t eb = d + b.size() >= rank ? b[d + b.size() - rank] : 1;
    if (ea != eb && ea != 1 && eb != 1)
      throw BroadcastError("cannot broadcast " + shape_string(a) + " with " + shape_string(b) +
                           ": dimension " + std::to_string(d) + " has extents " +
                           std::to_string(ea) + " and " + std::to_string(eb));
    out[d] = std::max(ea, eb);
  }
  return out;
}

namespace detail {

/// A loop nest over `extents` with per-operand element strides. Adjacent
/// dimensions that are contiguous for every operand are merged so the
/// innermost run is as long as possible.
template <std::size_t N>
struct StridedLoop {
  std::vector<std::size_t> extents;
  std::vector<std::array<std::ptrdiff_t, N>> strides;
};

template <std::size_t N>
StridedLoop<N> make_loop(const Shape& out, const std::array<const Shape*, N>& operands) {
  const std::size_t rank = out.size();
  std::vector<std::array<std::ptrdiff_t, N>> strides(rank);
  for (std::size_t k = 0; k < N; ++k) {
    const Shape& s = *operands[k];
    const Shape st = row_major_strides(s);
    for (std::size_t d = 0; d < rank; ++d) {
      if (d + s.size() < rank) {
        strides[d][k] = 0;
        continue;
      }
      const std::size_t sd = d + s.size() - rank;
      strides[d][k] = s[sd] == 1 ? 0 : static_cast<std::ptrdiff_t>(st[sd]);
    }
  }
  StridedLoop<N> loop;
  for (std::size_t d = 0; d < rank; ++d) {
    if (out[d] == 1) continue;
    if (!loop.extents.empty()) {
      auto& prev = loop.strides.back();
      bool mergeable = true;
      for (std::size_t k = 0; k < N; ++k)
        if (prev[k] != strides[d][k] * static_cast<std::ptrdiff_t>(out[d])) mergeable = false;
      if (mergeable) {
        loop.extents.back() *= out[d];
        prev = strides[d];
        continue;
      }
    }
    loop.extents.push_back(out[d]);
    loop.strides.push_back(strides[d]);
  }
  if (loop.extents.empty()) {
    loop.extents.push_back(1);
    loop.strides.push_back({});
  }
  return loop;
}

/// Calls `inner(offsets, len, inner_strides)` once per innermost run.
template <std::size_t N, typename F>
void run_loop(const StridedLoop<N>& loop, F&& inner) {
  const std::size_t depth = loop.extents.size();
  const std::size_t len = loop.extents.back();
  const auto& inner_strides = loop.strides.back();
  std::vector<std::size_t> idx(depth, 0);
  std::array<std::ptrdiff_t, N> off{};
  while (true) {
    inner(off, len, inner_strides);
    std::size_t d = depth - 1;
    while (true) {
      if (d == 0) return;
      --d;
      ++idx[d];
      for (std::size_t k = 0; k < N; ++k) off[k] += loop.strides[d][k];
      if (idx[d] < loop.extents[d]) break;
      for (std::size_t k = 0; k < N; ++k)
        off[k] -= loop.strides[d][k] * static_cast<std::ptrdiff_t>(idx[d]);
      idx[d] = 0;
    }
  }
}

}  // namespace detail

/// Elementwise binary op with broadcasting.
template <typename T, typename Op>
BasicTensor<T> broadcast_apply(const BasicTensor<T>& a, const BasicTensor<T>& b, Op op) {
  if (a.shape() == b.shape()) {
    BasicTensor<T> out(a.shape());
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (std::size_t i = 0, n = out.size(); i < n; ++i) po[i] = op(pa[i], pb[i]);
    return out;
  }
  const Shape shape = broadcast_shape(a.shape(), b.shape());
  BasicTensor<T> out(shape);
  const auto loop = detail::make_loop<3>(shape, {&shape, &a.shape(), &b.shape()});
  T* po = out.data();
  const T* pa = a.data();
  const T* pb = b.data();
  detail::run_loop(loop, [&](const auto& off, std::size_t len, const auto& s) {
    T* o = po + off[0];
    const T* x = pa + off[1];
    const T* y = pb + off[2];
    const std::ptrdiff_t sa = s[1], sb = s[2];
    if (sa == 1 && sb == 1) {
      for (std::size_t i = 0; i < len; ++i) o[i] = op(x[i], y[i]);
    } else if (sa == 1 && sb == 0) {
      const T yv = *y;
      for (std::size_t i = 0; i < len; ++i) o[i] = op(x[i], yv);
    } else if (sa == 0 && sb == 1) {
      const T xv = *x;
      for (std::size_t i = 0; i < len; ++i) o[i] = op(xv, y[i]);
    } else {
      for (std::size_t i = 0; i < len; ++i) o[i] = op(x[i * sa], y[i * sb]);
    }
  });
  return out;
}

template <typename T>
BasicTensor<T> mul_broadcast(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return broadcast_apply(a, b, [](T x, T y) { return x * y; });
}

template <typename T>
BasicTensor<T> add_broadcast(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return broadcast_apply(a, b, [](T x, T y) { return x + y; });
}

/// Sums `g` down to `target` (the adjoint of broadcasting `target` up to g's shape).
template <typename T>
BasicTensor<T> reduce_to_shape(const BasicTensor<T>& g, const Shape& target) {
  if (g.shape() == target) return g;
  if (broadcast_shape(target, g.shape()) != g.shape())
    throw BroadcastError("cannot reduce " + shape_string(g.shape()) + " to " +
                         shape_string(target));
  BasicTensor<T> out(target);
  const auto loop = detail::make_loop<2>(g.shape(), {&g.shape(), &target});
  const T* pg = g.data();
  T* po = out.data();
  detail::run_loop(loop, [&](const auto& off, std::size_t len, const auto& s) {
    const T* x = pg + off[0];
    T* o = po + off[1];
    if (s[1] == 0) {
      T acc = *o;
      for (std::size_t i = 0; i < len; ++i) acc += x[i * s[0]];
      *o = acc;
    } else {
      for (std::size_t i = 0; i < len; ++i) o[i * s[1]] += x[i * s[0]];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// In-place helpers used by layer code.

template <typename T>
void add_into(BasicTensor<T>& dst, const BasicTensor<T>& src) {
  if (dst.shape() != src.shape())
    throw ShapeError("add_into: " + shape_string(dst.shape()) + " vs " +
                     shape_string(src.shape()));
  T* d = dst.data();
  const T* s = src.data();
  for (std::size_t i = 0, n = dst.size(); i < n; ++i) d[i] += s[i];
}

template <typename T>
void scale_inplace(BasicTensor<T>& t, T s) {
  for (auto& v : t) v *= s;
}

template <typename T>
T sum_all(const BasicTensor<T>& t) {
  T acc = 0;
  for (auto v : t) acc += v;
  return acc;
}

// ---------------------------------------------------------------------------
// Binary serialization: "KTNS", u32 rank, u32 extents, f64 payload, all
// little-endian.

namespace io {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                     static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b, 4);
}

inline void write_f64(std::ostream& os, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
  os.write(b, 8);
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline void read_exact(std::istream& is, char* buf, std::size_t n, const char* what) {
  const auto start = is.tellg();
  is.read(buf, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) {
    const long long at = start < 0 ? -1 : static_cast<long long>(start);
    throw FormatError(std::string("truncated ") + what + " at byte offset " + std::to_string(at));
  }
}

inline std::uint32_t read_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  read_exact(is, reinterpret_cast<char*>(b), 4, what);
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
         (std::uint32_t(b[3]) << 24);
}

inline double read_f64(std::istream& is, const char* what) {
  unsigned char b[8];
  read_exact(is, reinterpret_cast<char*>(b), 8, what);
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= std::uint64_t(b[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

inline std::string read_string(std::istream& is, const char* what) {
  const std::uint32_t n = read_u32(is, what);
  std::string s(n, '\0');
  read_exact(is, s.data(), n, what);
  return s;
}

/// Writes `bytes` to a sibling temp file and renames it over `path`, so
/// readers never observe a partial file.
inline void write_file_atomic(const std::string& path, std::string_view bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw InputError("cannot open " + tmp + " for writing");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw InputError("write to " + tmp + " failed");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    std::remove(tmp.c_str());
    throw InputError("cannot move " + tmp + " to " + path);
  }
}

}  // namespace io

template <typename T>
void write_tensor(std::ostream& os, const BasicTensor<T>& t) {
  os.write("KTNS", 4);
  io::write_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) io::write_u32(os, static_cast<std::uint32_t>(e));
  std::vector<char> payload(t.size() * 8);
  for (std::size_t i = 0; i < t.size(); ++i) {
    const auto bits = std::bit_cast<std::uint64_t>(static_cast<double>(t[i]));
    for (int j = 0; j < 8; ++j) payload[i * 8 + j] = static_cast<char>((bits >> (8 * j)) & 0xff);
  }
  os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
}

inline Tensor read_tensor(std::istream& is) {
  char magic[4];
  const auto at = is.tellg();
  io::read_exact(is, magic, 4, "tensor magic");
  if (std::string(magic, 4) != "KTNS")
    throw FormatError("bad tensor magic at byte offset " + std::to_string(static_cast<long long>(at)));
  const std::uint32_t rank = io::read_u32(is, "tensor rank");
  if (rank == 0 || rank > 8) throw FormatError("unsupported tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) {
    e = io::read_u32(is, "tensor extent");
    if (e == 0) throw FormatError("zero extent in tensor header");
  }
  std::vector<double> data(shape_size(shape));
  std::vector<unsigned char> payload(data.size() * 8);
  io::read_exact(is, reinterpret_cast<char*>(payload.data()), payload.size(), "tensor payload");
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::uint64_t bits = 0;
    for (int j = 0; j < 8; ++j) bits |= std::uint64_t(payload[i * 8 + j]) << (8 * j);
    data[i] = std::bit_cast<double>(bits);
  }
  return Tensor(std::move(shape), std::move(data));
}

inline void save_tensor(const std::string& path, const Tensor& t) {
  std::ostringstream os(std::ios::binary);
  write_tensor(os, t);
  io::write_file_atomic(path, os.str());
}

inline Tensor load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open " + path);
  return read_tensor(is);
}

}  // namespace kdna
