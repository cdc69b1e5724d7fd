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

// Inference timing and transient-kernel accounting for one topology under
// several conv implementations:
//
//   standard           every S replaced by its own F (same conv count)
//   kdna-unfused       children rebuild W*(1+af)*(1+as) on every forward
//   kdna-fused         static modulation cached, channel attention on
//   kdna-static        fused and channel attention disabled
//   kernel-pool-n4     standard topology, each conv a 4-kernel pool
//   batch-expanded-n4  standard topology, each conv purely dynamic, n=4

#include <algorithm>
#include <chrono>
#include <iomanip>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "kdna/cost.hpp"

namespace kdna {

inline std::vector<std::string> bench_variants() {
  return {"standard", "kdna-unfused", "kdna-fused", "kdna-static", "kernel-pool-n4", "batch-expanded-n4"};
}

struct BenchCase {
  std::string variant;
  TopologySpec base;  // the KernelDNA topology the variants derive from
  std::size_t batch = 32;
  std::size_t warmup = 10;
  std::size_t iters = 100;
  std::size_t latency_iters = 100;
  std::size_t threads = 1;
  std::size_t rounds = 5;  // throughput is the median over rounds of iters/rounds each
  std::uint64_t input_seed = 1234;

  void validate() const {
    if (warmup < 10) throw ConfigError("bench warmup must be at least 10 iterations");
    if (iters < 100 || latency_iters < 100) throw ConfigError("bench needs at least 100 measured iterations");
    if (batch == 0 || threads == 0) throw ConfigError("batch and threads must be positive");
    if (rounds == 0 || rounds > iters) throw ConfigError("rounds must be in [1, iters]");
  }
};

struct BenchResult {
  std::string variant;
  std::size_t batch = 0;
  std::size_t threads = 1;
  double throughput = 0;  // samples / second at `batch`
  double latency_ms = 0;  // median batch-1 forward
  double latency_p95_ms = 0;
  std::size_t peak_kernel_bytes = 0;        // largest transient kernel tensor in one forward
  std::size_t persistent_kernel_bytes = 0;  // stored conv kernels
  std::uint64_t params = 0;
  double flops = 0;
  std::string status = "ok";  // or "skipped: <reason>"
};

/// Builds the model a variant runs, in eval mode with its caches prepared.
inline Model make_bench_model(const std::string& variant, const TopologySpec& base, std::uint64_t seed = 0) {
  const auto with = [&](Variant v) {
    TopologySpec s = variant_expand(base);
    s.variant = v;
    s.pool_size = 4;
    s.name = base.name + "/" + variant;
    return s;
  };
  std::optional<Model> m;
  if (variant == "standard") {
    m.emplace(Model::build(with(Variant::adapter), seed));
  } else if (variant == "kdna-unfused" || variant == "kdna-fused" || variant == "kdna-static") {
    TopologySpec s = base;
    s.name = base.name + "/" + variant;
    m.emplace(Model::build(s, seed));
  } else if (variant == "kernel-pool-n4") {
    m.emplace(Model::build(with(Variant::kernel_pool), seed));
  } else if (variant == "batch-expanded-n4") {
    m.emplace(Model::build(with(Variant::batch_expanded), seed));
  } else {
    throw ConfigError("unknown bench variant '" + variant + "'");
  }
  m->set_mode(Mode::eval);
  if (variant == "kdna-fused" || variant == "kdna-static") m->fuse_static();
  if (variant == "kdna-static") m->set_dynamic(false);
  return std::move(*m);
}

namespace detail {

inline Tensor bench_input(const TopologySpec& spec, std::size_t batch, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Tensor x(Shape{batch, spec.input_channels, spec.input_size, spec.input_size});
  for (auto& v : x) v = g(rng);
  return x;
}

/// Eval forward, split over `threads` workers by batch slices.
inline void parallel_predict(Model& model, const Tensor& x, std::size_t threads) {
  const std::size_t b = x.shape()[0];
  if (threads <= 1 || b < 2) {
    model.predict(x);
    return;
  }
  const std::size_t workers = std::min(threads, b);
  const std::size_t per = x.size() / b;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t lo = b * w / workers, hi = b * (w + 1) / workers;
    pool.emplace_back([&, lo, hi] {
      Shape s = x.shape();
      s[0] = hi - lo;
      Tensor part(s, std::vector<double>(x.data() + lo * per, x.data() + hi * per));
      model.predict(part);
    });
  }
  for (auto& t : pool) t.join();
}

inline std::size_t stored_kernel_bytes(Model& model) {
  std::size_t bytes = 0;
  for (const auto& p : model.parameters()) {
    const auto& n = p.name;
    const bool kernel = n.ends_with(".weight") || n.ends_with(".kernels");
    if (kernel && n.rfind("stage", 0) == 0 && p.var.shape().size() >= 4) bytes += p.var.value().size() * sizeof(double);
  }
  return bytes;
}

inline double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (v[hi] - v[lo]) * (pos - static_cast<double>(lo));
}

}  // namespace detail

/// Peak transient kernel bytes for one eval forward at `batch`.
inline std::size_t measure_kernel_bytes(Model& model, std::size_t batch, std::uint64_t seed = 1234) {
  const Tensor x = detail::bench_input(model.spec(), batch, seed);
  KernelMeter::current().reset();
  model.predict(x);
  return KernelMeter::current().peak_bytes();
}

/// Runs several cases with their timed rounds interleaved, so slow drift in
/// machine load hits every variant alike. Each throughput is the median of
/// the per-round rates.
inline std::vector<BenchResult> run_bench_suite(const std::vector<BenchCase>& cases) {
  using clock = std::chrono::steady_clock;
  struct Live {
    const BenchCase* c;
    std::optional<Model> model;
    Tensor xb;
    std::vector<double> rates;
  };
  std::vector<BenchResult> out(cases.size());
  std::vector<Live> live;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const BenchCase& c = cases[i];
    c.validate();
    BenchResult& r = out[i];
    r.variant = c.variant;
    r.batch = c.batch;
    r.threads = c.threads;
    Live l{&c, std::nullopt, Tensor(), {}};
    try {
      l.model.emplace(make_bench_model(c.variant, c.base));
    } catch (const Error& e) {
      r.status = std::string("skipped: ") + e.what();
      continue;
    }
    Model& m = *l.model;
    l.xb = detail::bench_input(m.spec(), c.batch, c.input_seed);
    r.peak_kernel_bytes = measure_kernel_bytes(m, c.batch, c.input_seed);
    r.persistent_kernel_bytes = detail::stored_kernel_bytes(m);
    const CostReport cost = count_costs(m, m.spec().input_size);
    r.params = cost.total_params;
    r.flops = cost.total_flops();
    for (std::size_t w = 0; w < c.warmup; ++w) detail::parallel_predict(m, l.xb, c.threads);
    live.push_back(std::move(l));
  }

  std::size_t max_rounds = 0;
  for (const auto& l : live) max_rounds = std::max(max_rounds, l.c->rounds);
  for (std::size_t round = 0; round < max_rounds; ++round)
    for (auto& l : live) {
      const BenchCase& c = *l.c;
      if (round >= c.rounds) continue;
      const std::size_t n = c.iters * (round + 1) / c.rounds - c.iters * round / c.rounds;
      const auto t0 = clock::now();
      for (std::size_t i = 0; i < n; ++i) detail::parallel_predict(*l.model, l.xb, c.threads);
      const double secs = std::chrono::duration<double>(clock::now() - t0).count();
      l.rates.push_back(static_cast<double>(c.batch * n) / secs);
    }

  for (auto& l : live) {
    const BenchCase& c = *l.c;
    BenchResult& r = out[static_cast<std::size_t>(l.c - cases.data())];
    r.throughput = detail::percentile(l.rates, 0.5);
    Model& m = *l.model;
    const Tensor x1 = detail::bench_input(m.spec(), 1, c.input_seed);
    for (std::size_t i = 0; i < c.warmup; ++i) m.predict(x1);
    std::vector<double> lat;
    lat.reserve(c.latency_iters);
    for (std::size_t i = 0; i < c.latency_iters; ++i) {
      const auto s = clock::now();
      m.predict(x1);
      lat.push_back(std::chrono::duration<double, std::milli>(clock::now() - s).count());
    }
    r.latency_ms = detail::percentile(lat, 0.5);
    r.latency_p95_ms = detail::percentile(lat, 0.95);
  }
  return out;
}

inline BenchResult run_bench(const BenchCase& c) { return run_bench_suite({c}).front(); }

/// Keeps freed blocks inside the heap instead of returning them to the OS.
/// Forward passes allocate and release the same large activations every
/// iteration; without this, glibc maps and unmaps them each time.
inline void retain_heap_allocations() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

// Reports -------------------------------------------------------------------

inline std::vector<BenchResult> sorted_by_variant(std::vector<BenchResult> rs) {
  std::stable_sort(rs.begin(), rs.end(), [](const BenchResult& a, const BenchResult& b) {
    return a.variant != b.variant ? a.variant < b.variant : a.batch < b.batch;
  });
  return rs;
}

inline std::string format_bench_csv(const std::vector<BenchResult>& results) {
  std::ostringstream out;
  out << "variant,batch,throughput,latency_ms,peak_kernel_bytes,params,flops,latency_p95_ms,"
         "persistent_kernel_bytes,threads,status\n";
  out << std::setprecision(10);
  for (const auto& r : sorted_by_variant(results)) {
    out << r.variant << ',' << r.batch << ',';
    if (r.status == "ok")
      out << r.throughput << ',' << r.latency_ms << ',' << r.peak_kernel_bytes << ',' << r.params << ','
          << std::fixed << std::setprecision(0) << r.flops << std::defaultfloat << std::setprecision(10) << ','
          << r.latency_p95_ms << ',' << r.persistent_kernel_bytes << ',';
    else
      out << ",,,,,,,";
    std::string status = r.status;
    std::replace(status.begin(), status.end(), ',', ';');
    out << r.threads << ',' << status << '\n';
  }
  return out.str();
}

inline std::string format_bench_markdown(const std::vector<BenchResult>& results) {
  std::ostringstream out;
  out << "| Variant | Batch | Pm (M) | FP (G) | TP CPU (fps) | Lt CPU (ms) | Lt p95 (ms) | Peak kernel (KiB) |\n";
  out << "|---|---:|---:|---:|---:|---:|---:|---:|\n";
  out << std::fixed;
  for (const auto& r : sorted_by_variant(results)) {
    if (r.status != "ok") {
      out << "| " << r.variant << " | " << r.batch << " | " << r.status << " | | | | | |\n";
      continue;
    }
    out << "| " << r.variant << " | " << r.batch << " | " << std::setprecision(3)
        << static_cast<double>(r.params) / 1e6 << " | " << std::setprecision(4) << r.flops / 1e9 << " | "
        << std::setprecision(1) << r.throughput << " | " << std::setprecision(3) << r.latency_ms << " | "
        << r.latency_p95_ms << " | " << std::setprecision(1) << static_cast<double>(r.peak_kernel_bytes) / 1024.0
        << " |\n";
  }
  return out.str();
}

}  // namespace kdna
