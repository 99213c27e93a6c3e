#pragma once

// Scalar-generic multi-head attention kernels over sets of contiguous key
// ranges. The graph ops in attention.hpp wrap the double instantiation; the
// benchmark harness can run the float one.

#include "ensa/graph.hpp"
#include "ensa/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <thread>
#include <vector>

namespace ensa {

// Query-key dot products evaluated by the attention kernels, counted once per
// (query, key) pair regardless of head count. Process-wide.
class ScoreCounter {
public:
  static void add(std::uint64_t n) { value().fetch_add(n, std::memory_order_relaxed); }
  static std::uint64_t count() { return value().load(); }
  static void reset() { value().store(0); }

private:
  static std::atomic<std::uint64_t>& value() {
    static std::atomic<std::uint64_t> v{0};
    return v;
  }
};

// Worker count for the forward kernels. Results do not depend on it: every
// query row is reduced by one worker in a fixed order.
void set_num_threads(int n);
int num_threads();
// True when ENSA_DETERMINISTIC=1 is set; forces num_threads() == 1.
bool deterministic_mode();

template <typename F>
void parallel_for(Index n, F&& body) {
  const int workers = static_cast<int>(std::min<Index>(num_threads(), std::max<Index>(n, 1)));
  if (workers <= 1) {
    for (Index i = 0; i < n; ++i) body(i, 0);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      const Index lo = n * w / workers, hi = n * (w + 1) / workers;
      for (Index i = lo; i < hi; ++i) body(i, w);
    });
  }
  for (auto& t : pool) t.join();
}

struct KeyRange {
  Index begin = 0;
  Index count = 0;
};

// Per-query normaliser (row max and exp-sum of the logits, per head), kept so
// backward can recompute probabilities without storing them.
template <typename Scalar>
struct SoftmaxStats {
  RowMatrix<Scalar> row_max;
  RowMatrix<Scalar> row_sum;
};

struct NoProbSink {
  template <typename Scalar>
  void operator()(Index, Index, Index, Scalar) const {}
};

// out(i, head h) = sum_t p_t V(key_t, head h) with
//   p = softmax_t(Q(i,h) . K(key_t,h) / sqrt(d) + bias(i*stride + t, h))
// over the keys listed by keys_of(i, ranges). Keys with key_mask false get
// kMaskedLogit. `bias` may be null. sink(i, h, key, p) sees every probability.
template <typename Scalar, typename KeysFn, typename Sink = NoProbSink>
void attention_forward(const RowMatrix<Scalar>& Q, const RowMatrix<Scalar>& K,
                       const RowMatrix<Scalar>& V, Index heads, const Mask& key_mask,
                       KeysFn&& keys_of, const RowMatrix<Scalar>* bias, Index bias_stride,
                       RowMatrix<Scalar>& out, SoftmaxStats<Scalar>* stats, Sink&& sink = {},
                       bool allow_parallel = true) {
  const Index rows = Q.rows();
  const Index d = Q.cols() / heads;
  const Scalar inv_sqrt_d = Scalar(1) / std::sqrt(static_cast<Scalar>(d));
  out.setZero(rows, Q.cols());
  if (stats) {
    stats->row_max.resize(rows, heads);
    stats->row_sum.resize(rows, heads);
  }
  const int workers = allow_parallel ? num_threads() : 1;
  std::vector<std::vector<KeyRange>> ranges(static_cast<std::size_t>(std::max(workers, 1)));
  std::vector<std::vector<Scalar>> logits(ranges.size());
  std::vector<std::uint64_t> evaluated(ranges.size(), 0);

  auto body = [&](Index i, int w) {
    auto& rs = ranges[static_cast<std::size_t>(w)];
    auto& lg = logits[static_cast<std::size_t>(w)];
    rs.clear();
    keys_of(i, rs);
    Index total = 0;
    for (const KeyRange& r : rs) total += r.count;
    evaluated[static_cast<std::size_t>(w)] += static_cast<std::uint64_t>(total);
    lg.resize(static_cast<std::size_t>(total));
    for (Index h = 0; h < heads; ++h) {
      const auto q = Q.row(i).segment(h * d, d);
      Scalar mx = Scalar(kMaskedLogit);
      Index t = 0;
      for (const KeyRange& r : rs) {
        for (Index j = r.begin; j < r.begin + r.count; ++j, ++t) {
          Scalar s;
          if (key_mask(j)) {
            s = q.dot(K.row(j).segment(h * d, d)) * inv_sqrt_d;
            if (bias) s += (*bias)(i * bias_stride + t, h);
          } else {
            s = Scalar(kMaskedLogit);
          }
          lg[static_cast<std::size_t>(t)] = s;
          mx = std::max(mx, s);
        }
      }
      Scalar sum = 0;
      for (Scalar& s : lg) {
        s = std::exp(s - mx);
        sum += s;
      }
      auto o = out.row(i).segment(h * d, d);
      t = 0;
      for (const KeyRange& r : rs) {
        for (Index j = r.begin; j < r.begin + r.count; ++j, ++t) {
          const Scalar p = lg[static_cast<std::size_t>(t)] / sum;
          if (p != Scalar(0)) o.noalias() += p * V.row(j).segment(h * d, d);
          sink(i, h, j, p);
        }
      }
      if (stats) {
        stats->row_max(i, h) = mx;
        stats->row_sum(i, h) = sum;
      }
    }
  };
  if (workers <= 1) {
    for (Index i = 0; i < rows; ++i) body(i, 0);
  } else {
    parallel_for(rows, body);
  }
  std::uint64_t n = 0;
  for (auto e : evaluated) n += e;
  ScoreCounter::add(n);
}

// Gradients of attention_forward. Probabilities are recomputed from the
// stored normalisers. dQ/dK/dV/dbias are accumulated (not overwritten);
// null outputs are skipped.
template <typename Scalar, typename KeysFn>
void attention_backward(const RowMatrix<Scalar>& Q, const RowMatrix<Scalar>& K,
                        const RowMatrix<Scalar>& V, Index heads, const Mask& key_mask,
                        KeysFn&& keys_of, const RowMatrix<Scalar>* bias, Index bias_stride,
                        const SoftmaxStats<Scalar>& stats, const RowMatrix<Scalar>& dout,
                        RowMatrix<Scalar>* dQ, RowMatrix<Scalar>* dK, RowMatrix<Scalar>* dV,
                        RowMatrix<Scalar>* dbias) {
  const Index rows = Q.rows();
  const Index d = Q.cols() / heads;
  const Scalar inv_sqrt_d = Scalar(1) / std::sqrt(static_cast<Scalar>(d));
  std::vector<KeyRange> rs;
  std::vector<Scalar> p;
  std::vector<Scalar> dp;
  for (Index i = 0; i < rows; ++i) {
    rs.clear();
    keys_of(i, rs);
    Index total = 0;
    for (const KeyRange& r : rs) total += r.count;
    p.resize(static_cast<std::size_t>(total));
    dp.resize(static_cast<std::size_t>(total));
    for (Index h = 0; h < heads; ++h) {
      const auto q = Q.row(i).segment(h * d, d);
      const auto go = dout.row(i).segment(h * d, d);
      const Scalar mx = stats.row_max(i, h), sum = stats.row_sum(i, h);
      Scalar weighted = 0;
      Index t = 0;
      for (const KeyRange& r : rs) {
        for (Index j = r.begin; j < r.begin + r.count; ++j, ++t) {
          Scalar s = Scalar(kMaskedLogit);
          if (key_mask(j)) {
            s = q.dot(K.row(j).segment(h * d, d)) * inv_sqrt_d;
            if (bias) s += (*bias)(i * bias_stride + t, h);
          }
          const Scalar pt = std::exp(s - mx) / sum;
          const Scalar dpt = go.dot(V.row(j).segment(h * d, d));
          p[static_cast<std::size_t>(t)] = pt;
          dp[static_cast<std::size_t>(t)] = dpt;
          weighted += pt * dpt;
        }
      }
      t = 0;
      for (const KeyRange& r : rs) {
        for (Index j = r.begin; j < r.begin + r.count; ++j, ++t) {
          const Scalar pt = p[static_cast<std::size_t>(t)];
          if (pt == Scalar(0)) continue;
          if (dV) dV->row(j).segment(h * d, d).noalias() += pt * go;
          if (!key_mask(j)) continue;
          const Scalar ds = pt * (dp[static_cast<std::size_t>(t)] - weighted);
          if (dQ) dQ->row(i).segment(h * d, d).noalias() += (ds * inv_sqrt_d) * K.row(j).segment(h * d, d);
          if (dK) dK->row(j).segment(h * d, d).noalias() += (ds * inv_sqrt_d) * q;
          if (dbias) (*dbias)(i * bias_stride + t, h) += ds;
        }
      }
    }
  }
}

// Full attention of every query over every unmasked key, evaluated in query
// blocks with dense products. Forward only; used as the quadratic baseline.
template <typename Scalar>
void dense_attention_forward(const RowMatrix<Scalar>& Q, const RowMatrix<Scalar>& K,
                             const RowMatrix<Scalar>& V, Index heads, const Mask& key_mask,
                             RowMatrix<Scalar>& out, Index block = 256) {
  const Index rows = Q.rows(), keys = K.rows();
  const Index d = Q.cols() / heads;
  const Scalar inv_sqrt_d = Scalar(1) / std::sqrt(static_cast<Scalar>(d));
  out.setZero(rows, Q.cols());
  RowMatrix<Scalar> logits;
  for (Index h = 0; h < heads; ++h) {
    const auto Kh = K.middleCols(h * d, d);
    const auto Vh = V.middleCols(h * d, d);
    for (Index b = 0; b < rows; b += block) {
      const Index nb = std::min(block, rows - b);
      logits.noalias() = (Q.block(b, h * d, nb, d) * Kh.transpose()) * inv_sqrt_d;
      for (Index j = 0; j < keys; ++j) {
        if (!key_mask(j)) logits.col(j).setConstant(Scalar(kMaskedLogit));
      }
      for (Index r = 0; r < nb; ++r) {
        const Scalar mx = logits.row(r).maxCoeff();
        logits.row(r) = (logits.row(r).array() - mx).exp().matrix();
        logits.row(r) /= logits.row(r).sum();
      }
      out.block(b, h * d, nb, d).noalias() = logits * Vh;
    }
  }
  ScoreCounter::add(static_cast<std::uint64_t>(rows) * static_cast<std::uint64_t>(keys));
}

}  // namespace ensa
