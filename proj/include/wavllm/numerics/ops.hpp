// Copyright (c) 2026, the wavllm-desk authors
// SPDX-License-Identifier: Apache-2.0
//
// Differentiable primitives. Every function computes its forward value
// eagerly and records a backward rule on the tape of its inputs.

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "wavllm/numerics/array.hpp"
#include "wavllm/numerics/tape.hpp"

namespace wavllm::numerics {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

inline MapC cmat(const Array& a) { return MapC(a.data(), a.rows(), a.cols()); }
inline Map mmat(Array& a) { return Map(a.data(), a.rows(), a.cols()); }

inline void require_rank2(const std::string& op, const Array& a) {
  if (a.rank() != 2) throw ShapeError(op + ": expected rank-2 operand, got " + shape_str(a.shape()));
}

inline void require_same(const std::string& op, const Array& a, const Array& b) {
  if (a.shape() != b.shape()) shape_fail(op, a.shape(), b.shape());
}

inline void add_into(Array* slot, const Array& g) {
  if (slot) *slot += g;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

}  // namespace detail

// ---------------------------------------------------------------- linear algebra

/// a[m,k] · b[k,n]
inline Var matmul(Var a, Var b) {
  const Array& av = a.value();
  const Array& bv = b.value();
  detail::require_rank2("matmul", av);
  detail::require_rank2("matmul", bv);
  if (av.cols() != bv.rows()) shape_fail("matmul", av.shape(), bv.shape());
  Array out({av.rows(), bv.cols()});
  detail::mmat(out).noalias() = detail::cmat(av) * detail::cmat(bv);
  return a.tape->record(std::move(out), {a, b}, [ai = a.id, bi = b.id](Tape& t, std::uint32_t self) {
    const Array& g = *t.grad_slot(self);
    if (Array* ga = t.grad_slot(ai)) detail::mmat(*ga).noalias() += detail::cmat(g) * detail::cmat(t.value(bi)).transpose();
    if (Array* gb = t.grad_slot(bi)) detail::mmat(*gb).noalias() += detail::cmat(t.value(ai)).transpose() * detail::cmat(g);
  });
}

/// a[m,k] · b[n,k]ᵀ
inline Var matmul_nt(Var a, Var b) {
  const Array& av = a.value();
  const Array& bv = b.value();
  detail::require_rank2("matmul_nt", av);
  detail::require_rank2("matmul_nt", bv);
  if (av.cols() != bv.cols()) shape_fail("matmul_nt", av.shape(), bv.shape());
  Array out({av.rows(), bv.rows()});
  detail::mmat(out).noalias() = detail::cmat(av) * detail::cmat(bv).transpose();
  return a.tape->record(std::move(out), {a, b}, [ai = a.id, bi = b.id](Tape& t, std::uint32_t self) {
    const Array& g = *t.grad_slot(self);
    if (Array* ga = t.grad_slot(ai)) detail::mmat(*ga).noalias() += detail::cmat(g) * detail::cmat(t.value(bi));
    if (Array* gb = t.grad_slot(bi)) detail::mmat(*gb).noalias() += detail::cmat(g).transpose() * detail::cmat(t.value(ai));
  });
}

inline Var transpose(Var a) {
  const Array& av = a.value();
  detail::require_rank2("transpose", av);
  Array out({av.cols(), av.rows()});
  detail::mmat(out) = detail::cmat(av).transpose();
  return a.tape->record(std::move(out), {a}, [ai = a.id](Tape& t, std::uint32_t self) {
    if (Array* ga = t.grad_slot(ai)) detail::mmat(*ga) += detail::cmat(*t.grad_slot(self)).transpose();
  });
}

inline Var reshape(Var a, Shape shape) {
  Array out = a.value().reshaped(std::move(shape));
  return a.tape->record(std::move(out), {a}, [ai = a.id](Tape& t, std::uint32_t self) {
    if (Array* ga = t.grad_slot(ai)) {
      const Array& g = *t.grad_slot(self);
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    }
  });
}

// ---------------------------------------------------------------- elementwise

inline Var add(Var a, Var b) {
  detail::require_same("add", a.value(), b.value());
  Array out = a.value();
  out += b.value();
  return a.tape->record(std::move(out), {a, b}, [ai = a.id, bi = b.id](Tape& t, std::uint32_t self) {
    const Array& g = *t.grad_slot(self);
    detail::add_into(t.grad_slot(ai), g);
    detail::add_into(t.grad_slot(bi), g);
  });
}

inline Var mul(Var a, Var b) {
  detail::require_same("mul", a.value(), b.value());
  const Array& av = a.value();
  const Array& bv = b.value();
  Array out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return a.tape->record(std::move(out), {a, b}, [ai = a.id, bi = b.id](Tape& t, std::uint32_t self) {
    const Array& g = *t.grad_slot(self);
    if (Array* ga = t.grad_slot(ai)) {
      const Array& bv = t.value(bi);
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
    }
    if (Array* gb = t.grad_slot(bi)) {
      const Array& av = t.value(ai);
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
    }
  });
}

inline Var scale(Var a, double c) {
  Array out = a.value();
  for (double& x : out.values()) x *= c;
  return a.tape->record(std::move(out), {a}, [ai = a.id, c](Tape& t, std::uint32_t self) {
    if (Array* ga = t.grad_slot(ai)) {
      const Array& g = *t.grad_slot(self);
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += c * g[i];
    }
  });
}

/// a[m,n] + row[1,n] broadcast over rows (bias add).
inline Var add_row(Var a, Var row) {
  const Array& av = a.value();
  const Array& rv = row.value();
  detail::require_rank2("add_row", av);
  if (rv.rank() != 2 || rv.rows() != 1 || rv.cols() != av.cols()) shape_fail("add_row", av.shape(), rv.shape());
  Array out = av;
  const std::size_t n = av.cols();
  for (std::size_t r = 0; r < av.rows(); ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] += rv[c];
  return a.tape->record(std::move(out), {a, row}, [ai = a.id, ri = row.id, n](Tape& t, std::uint32_t self) {
    const Array& g = *t.grad_slot(self);
    detail::add_into(t.grad_slot(ai), g);
    if (Array* gr = t.grad_slot(ri)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gr)[i % n] += g[i];
    }
  });
}

/// a[m,n] ⊙ row[1,n] broadcast over rows.
inline Var mul_row(Var a, Var row) {
  const Array& av = a.value();
  const Array& rv = row.value();
  detail::require_rank2("mul_row", av);
  if (rv.rank() != 2 || rv.rows() != 1 || rv.cols() != av.cols()) shape_fail("mul_row", av.shape(), rv.shape());
  Array out = av;
  const std::size_t n = av.cols();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= rv[i % n];
  return a.tape->record(std::move(out), {a, row}, [ai = a.id, ri = row.id, n](Tape& t, std::uint32_t self) {
    const Array& g = *t.grad_slot(self);
    const Array& av = t.value(ai);
    const Array& rv = t.value(ri);
    if (Array* ga = t.grad_slot(ai))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * rv[i % n];
    if (Array* gr = t.grad_slot(ri))
      for (std::size_t i = 0; i < g.size(); ++i) (*gr)[i % n] += g[i] * av[i];
  });
}

/// a[m,n] ⊙ col[m,1] broadcast over columns.
inline Var mul_col(Var a, Var col) {
  const Array& av = a.value();
  const Array& cv = col.value();
  detail::require_rank2("mul_col", av);
  if (cv.rank() != 2 || cv.cols() != 1 || cv.rows() != av.rows()) shape_fail("mul_col", av.shape(), cv.shape());
  Array out = av;
  const std::size_t n = av.cols();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= cv[i / n];
  return a.tape->record(std::move(out), {a, col}, [ai = a.id, ci = col.id, n](Tape& t, std::uint32_t self) {
    const Array& g = *t.grad_slot(self);
    const Array& av = t.value(ai);
    const Array& cv = t.value(ci);
    if (Array* ga = t.grad_slot(ai))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * cv[i / n];
    if (Array* gc = t.grad_slot(ci))
      for (std::size_t i = 0; i < g.size(); ++i) (*gc)[i / n] += g[i] * av[i];
  });
}

inline Var gelu(Var a) {
  Array out = a.value();
  for (double& x : out.values()) x = detail::gelu(x);
  return a.tape->record(std::move(out), {a}, [ai = a.id](Tape& t, std::uint32_t self) {
    if (Array* ga = t.grad_slot(ai)) {
      const Array& g = *t.grad_slot(self);
      const Array& x = t.value(ai);
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * detail::gelu_grad(x[i]);
    }
  });
}

/// Row-wise root-mean-square normalisation without gain.
inline Var rms_norm(Var a, double eps = 1e-6) {
  const Array& av = a.value();
  detail::require_rank2("rms_norm", av);
  const std::size_t m = av.rows(), n = av.cols();
  Array out(av.shape());
  std::vector<double> inv(m);
  for (std::size_t r = 0; r < m; ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < n; ++c) ss += av[r * n + c] * av[r * n + c];
    inv[r] = 1.0 / std::sqrt(ss / static_cast<double>(n) + eps);
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = av[r * n + c] * inv[r];
  }
  return a.tape->record(std::move(out), {a}, [ai = a.id, inv = std::move(inv), m, n](Tape& t, std::uint32_t self) {
    Array* ga = t.grad_slot(ai);
    if (!ga) return;
    const Array& g = *t.grad_slot(self);
    const Array& y = t.value(self);
    for (std::size_t r = 0; r < m; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < n; ++c) dot += g[r * n + c] * y[r * n + c];
      dot /= static_cast<double>(n);
      for (std::size_t c = 0; c < n; ++c) (*ga)[r * n + c] += inv[r] * (g[r * n + c] - y[r * n + c] * dot);
    }
  });
}

// ---------------------------------------------------------------- reductions

/// Softmax along `axis` (0 = down columns, 1 = along rows) of a rank-2 array.
inline Var softmax(Var a, int axis) {
  const Array& av = a.value();
  detail::require_rank2("softmax", av);
  if (axis != 0 && axis != 1) throw std::invalid_argument("softmax: axis must be 0 or 1, got " + std::to_string(axis));
  const std::size_t m = av.rows(), n = av.cols();
  const std::size_t lines = axis == 1 ? m : n, len = axis == 1 ? n : m;
  const std::size_t stride = axis == 1 ? 1 : n, line_step = axis == 1 ? n : 1;
  Array out(av.shape());
  for (std::size_t l = 0; l < lines; ++l) {
    const std::size_t base = l * line_step;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, av[base + k * stride]);
    double s = 0.0;
    for (std::size_t k = 0; k < len; ++k) s += (out[base + k * stride] = std::exp(av[base + k * stride] - mx));
    for (std::size_t k = 0; k < len; ++k) out[base + k * stride] /= s;
  }
  return a.tape->record(std::move(out), {a}, [ai = a.id, lines, len, stride, line_step](Tape& t, std::uint32_t self) {
    Array* ga = t.grad_slot(ai);
    if (!ga) return;
    const Array& g = *t.grad_slot(self);
    const Array& y = t.value(self);
    for (std::size_t l = 0; l < lines; ++l) {
      const std::size_t base = l * line_step;
      double dot = 0.0;
      for (std::size_t k = 0; k < len; ++k) dot += g[base + k * stride] * y[base + k * stride];
      for (std::size_t k = 0; k < len; ++k) {
        const std::size_t i = base + k * stride;
        (*ga)[i] += y[i] * (g[i] - dot);
      }
    }
  });
}

/// Row softmax restricted to columns j <= i (strictly causal attention
/// weights); masked entries are exactly zero.
inline Var causal_softmax(Var a) {
  const Array& av = a.value();
  detail::require_rank2("causal_softmax", av);
  if (av.rows() != av.cols()) throw ShapeError("causal_softmax: expected square scores, got " + shape_str(av.shape()));
  const std::size_t n = av.cols();
  Array out(av.shape());
  for (std::size_t r = 0; r < n; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c <= r; ++c) mx = std::max(mx, av[r * n + c]);
    double s = 0.0;
    for (std::size_t c = 0; c <= r; ++c) s += (out[r * n + c] = std::exp(av[r * n + c] - mx));
    for (std::size_t c = 0; c <= r; ++c) out[r * n + c] /= s;
  }
  return a.tape->record(std::move(out), {a}, [ai = a.id, n](Tape& t, std::uint32_t self) {
    Array* ga = t.grad_slot(ai);
    if (!ga) return;
    const Array& g = *t.grad_slot(self);
    const Array& y = t.value(self);
    for (std::size_t r = 0; r < n; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c <= r; ++c) dot += g[r * n + c] * y[r * n + c];
      for (std::size_t c = 0; c <= r; ++c) (*ga)[r * n + c] += y[r * n + c] * (g[r * n + c] - dot);
    }
  });
}

/// Sum of a rank-2 array along `axis`; the reduced extent becomes 1.
inline Var sum(Var a, int axis) {
  const Array& av = a.value();
  detail::require_rank2("sum", av);
  if (axis != 0 && axis != 1) throw std::invalid_argument("sum: axis must be 0 or 1, got " + std::to_string(axis));
  const std::size_t m = av.rows(), n = av.cols();
  Array out(axis == 0 ? Shape{1, n} : Shape{m, 1});
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[axis == 0 ? c : r] += av[r * n + c];
  return a.tape->record(std::move(out), {a}, [ai = a.id, axis, m, n](Tape& t, std::uint32_t self) {
    Array* ga = t.grad_slot(ai);
    if (!ga) return;
    const Array& g = *t.grad_slot(self);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c) (*ga)[r * n + c] += g[axis == 0 ? c : r];
  });
}

inline Var mean(Var a, int axis) {
  const Array& av = a.value();
  detail::require_rank2("mean", av);
  const double count = static_cast<double>(axis == 0 ? av.rows() : av.cols());
  return scale(sum(a, axis), 1.0 / count);
}

/// Sum of all entries as a scalar.
inline Var sum_all(Var a) {
  const Array& av = a.value();
  double s = 0.0;
  for (double x : av.values()) s += x;
  return a.tape->record(Array::scalar(s), {a}, [ai = a.id](Tape& t, std::uint32_t self) {
    if (Array* ga = t.grad_slot(ai)) {
      const double g = (*t.grad_slot(self))[0];
      for (double& x : ga->values()) x += g;
    }
  });
}

// ---------------------------------------------------------------- structure

/// Rows `ids` of table[V,n]. Backward scatters into the referenced rows.
inline Var embedding_lookup(Var table, std::span<const std::size_t> ids) {
  const Array& tv = table.value();
  detail::require_rank2("embedding_lookup", tv);
  if (ids.empty()) throw ShapeError("embedding_lookup: empty id list");
  const std::size_t n = tv.cols();
  Array out({ids.size(), n});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= tv.rows())
      throw std::out_of_range("embedding_lookup: id " + std::to_string(ids[i]) + " outside table " + shape_str(tv.shape()));
    std::copy_n(tv.data() + ids[i] * n, n, out.data() + i * n);
  }
  std::vector<std::size_t> keep(ids.begin(), ids.end());
  return table.tape->record(std::move(out), {table}, [ti = table.id, keep = std::move(keep), n](Tape& t, std::uint32_t self) {
    Array* gt = t.grad_slot(ti);
    if (!gt) return;
    const Array& g = *t.grad_slot(self);
    for (std::size_t i = 0; i < keep.size(); ++i)
      for (std::size_t c = 0; c < n; ++c) (*gt)[keep[i] * n + c] += g[i * n + c];
  });
}

/// Sub-block a[r0:r0+nr, c0:c0+nc].
inline Var slice(Var a, std::size_t r0, std::size_t nr, std::size_t c0, std::size_t nc) {
  const Array& av = a.value();
  detail::require_rank2("slice", av);
  if (r0 + nr > av.rows() || c0 + nc > av.cols() || nr == 0 || nc == 0)
    shape_fail("slice", av.shape(), Shape{r0 + nr, c0 + nc});
  const std::size_t n = av.cols();
  Array out({nr, nc});
  for (std::size_t r = 0; r < nr; ++r) std::copy_n(av.data() + (r0 + r) * n + c0, nc, out.data() + r * nc);
  return a.tape->record(std::move(out), {a}, [ai = a.id, r0, nr, c0, nc, n](Tape& t, std::uint32_t self) {
    Array* ga = t.grad_slot(ai);
    if (!ga) return;
    const Array& g = *t.grad_slot(self);
    for (std::size_t r = 0; r < nr; ++r)
      for (std::size_t c = 0; c < nc; ++c) (*ga)[(r0 + r) * n + c0 + c] += g[r * nc + c];
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t n = parts[0].value().cols();
  std::size_t m = 0;
  for (const Var& p : parts) {
    detail::require_rank2("concat_rows", p.value());
    if (p.value().cols() != n) shape_fail("concat_rows", parts[0].shape(), p.shape());
    m += p.value().rows();
  }
  Array out({m, n});
  std::size_t off = 0;
  std::vector<std::size_t> offsets;
  for (const Var& p : parts) {
    offsets.push_back(off);
    std::copy_n(p.value().data(), p.value().size(), out.data() + off);
    off += p.value().size();
  }
  std::vector<std::uint32_t> ids;
  for (const Var& p : parts) ids.push_back(p.id);
  return parts[0].tape->record(std::move(out), parts, [ids, offsets](Tape& t, std::uint32_t self) {
    const Array& g = *t.grad_slot(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (Array* gp = t.grad_slot(ids[k]))
        for (std::size_t i = 0; i < gp->size(); ++i) (*gp)[i] += g[offsets[k] + i];
    }
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t m = parts[0].value().rows();
  std::size_t n = 0;
  std::vector<std::size_t> offsets;
  for (const Var& p : parts) {
    detail::require_rank2("concat_cols", p.value());
    if (p.value().rows() != m) shape_fail("concat_cols", parts[0].shape(), p.shape());
    offsets.push_back(n);
    n += p.value().cols();
  }
  Array out({m, n});
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Array& pv = parts[k].value();
    const std::size_t w = pv.cols();
    for (std::size_t r = 0; r < m; ++r) std::copy_n(pv.data() + r * w, w, out.data() + r * n + offsets[k]);
  }
  std::vector<std::uint32_t> ids;
  for (const Var& p : parts) ids.push_back(p.id);
  return parts[0].tape->record(std::move(out), parts, [ids, offsets, m, n](Tape& t, std::uint32_t self) {
    const Array& g = *t.grad_slot(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      Array* gp = t.grad_slot(ids[k]);
      if (!gp) continue;
      const std::size_t w = gp->cols();
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < w; ++c) (*gp)[r * w + c] += g[r * n + offsets[k] + c];
    }
  });
}

// ---------------------------------------------------------------- attention

/// A contiguous run of rows forming one sequence in a packed batch.
struct Segment {
  std::size_t offset = 0;
  std::size_t length = 0;
};

/// Multi-head causal self-attention over packed sequences. q, k, v are
/// [T, D]; head h owns columns [h*D/H, (h+1)*D/H). Rows attend only to
/// earlier-or-equal rows of their own segment. Scores are scaled by
/// 1/sqrt(D/H).
inline Var causal_attention(Var q, Var k, Var v, std::span<const Segment> segments, std::size_t heads) {
  const Array& qv = q.value();
  const Array& kv = k.value();
  const Array& vv = v.value();
  detail::require_rank2("causal_attention", qv);
  detail::require_same("causal_attention", qv, kv);
  detail::require_same("causal_attention", qv, vv);
  const std::size_t rows = qv.rows(), dim = qv.cols();
  if (heads == 0 || dim % heads != 0)
    throw std::invalid_argument("causal_attention: " + std::to_string(dim) + " columns do not split into " +
                                std::to_string(heads) + " heads");
  std::size_t covered = 0;
  for (const Segment& s : segments) {
    if (s.offset != covered || s.length == 0) throw std::invalid_argument("causal_attention: segments must tile the rows");
    covered += s.length;
  }
  if (covered != rows) throw std::invalid_argument("causal_attention: segments cover " + std::to_string(covered) +
                                                   " of " + std::to_string(rows) + " rows");
  const std::size_t hd = dim / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<Segment> segs(segments.begin(), segments.end());
  // Attention probabilities per (segment, head), kept for the backward pass.
  auto probs = std::make_shared<std::vector<detail::RowMat>>();
  probs->reserve(segs.size() * heads);
  Array out({rows, dim});
  auto Q = detail::cmat(qv), K = detail::cmat(kv), V = detail::cmat(vv);
  auto O = detail::mmat(out);
  for (const Segment& s : segs) {
    for (std::size_t h = 0; h < heads; ++h) {
      detail::RowMat p = (Q.block(s.offset, h * hd, s.length, hd) * K.block(s.offset, h * hd, s.length, hd).transpose()) * scale;
      for (std::size_t r = 0; r < s.length; ++r) {
        const double mx = p.row(r).head(r + 1).maxCoeff();
        double z = 0.0;
        for (std::size_t c = 0; c <= r; ++c) z += (p(r, c) = std::exp(p(r, c) - mx));
        for (std::size_t c = 0; c <= r; ++c) p(r, c) /= z;
        for (std::size_t c = r + 1; c < s.length; ++c) p(r, c) = 0.0;
      }
      O.block(s.offset, h * hd, s.length, hd).noalias() = p * V.block(s.offset, h * hd, s.length, hd);
      probs->push_back(std::move(p));
    }
  }
  return q.tape->record(
      std::move(out), {q, k, v},
      [qi = q.id, ki = k.id, vi = v.id, segs = std::move(segs), probs, heads, hd, scale](Tape& t, std::uint32_t self) {
        const Array& g = *t.grad_slot(self);
        auto G = detail::cmat(g);
        auto Q = detail::cmat(t.value(qi)), K = detail::cmat(t.value(ki)), V = detail::cmat(t.value(vi));
        Array* gq = t.grad_slot(qi);
        Array* gk = t.grad_slot(ki);
        Array* gv = t.grad_slot(vi);
        std::size_t idx = 0;
        for (const Segment& s : segs) {
          for (std::size_t h = 0; h < heads; ++h, ++idx) {
            const detail::RowMat& p = (*probs)[idx];
            auto go = G.block(s.offset, h * hd, s.length, hd);
            if (gv) detail::mmat(*gv).block(s.offset, h * hd, s.length, hd).noalias() += p.transpose() * go;
            if (!gq && !gk) continue;
            detail::RowMat dp = go * V.block(s.offset, h * hd, s.length, hd).transpose();
            for (std::size_t r = 0; r < s.length; ++r) {
              double dot = 0.0;
              for (std::size_t c = 0; c <= r; ++c) dot += dp(r, c) * p(r, c);
              for (std::size_t c = 0; c < s.length; ++c) dp(r, c) = c <= r ? p(r, c) * (dp(r, c) - dot) * scale : 0.0;
            }
            if (gq) detail::mmat(*gq).block(s.offset, h * hd, s.length, hd).noalias() += dp * K.block(s.offset, h * hd, s.length, hd);
            if (gk) detail::mmat(*gk).block(s.offset, h * hd, s.length, hd).noalias() += dp.transpose() * Q.block(s.offset, h * hd, s.length, hd);
          }
        }
      });
}

// ---------------------------------------------------------------- convolution

/// Output length of a same-padded strided convolution: ceil(len / stride).
inline std::size_t conv1d_out_len(std::size_t len, std::size_t stride) { return (len + stride - 1) / stride; }

/// Temporal convolution of signal[N, Cin] with kernel[Cout, Cin, K] and
/// bias[1, Cout]. Odd K only; (K-1)/2 zeros are padded on both sides and
/// output position o is centred on input o*stride.
inline Var conv1d(Var signal, Var kernel, Var bias, std::size_t stride) {
  const Array& x = signal.value();
  const Array& w = kernel.value();
  const Array& b = bias.value();
  detail::require_rank2("conv1d", x);
  if (w.rank() != 3) throw ShapeError("conv1d: kernel must be [Cout,Cin,K], got " + shape_str(w.shape()));
  const std::size_t len = x.rows(), cin = x.cols(), cout = w.shape()[0], k = w.shape()[2];
  if (w.shape()[1] != cin) shape_fail("conv1d", x.shape(), w.shape());
  if (k % 2 == 0) throw std::invalid_argument("conv1d: kernel size must be odd, got " + std::to_string(k));
  if (b.rank() != 2 || b.rows() != 1 || b.cols() != cout) shape_fail("conv1d", w.shape(), b.shape());
  if (stride == 0) throw std::invalid_argument("conv1d: stride must be positive");
  const std::size_t out_len = conv1d_out_len(len, stride);
  const long pad = static_cast<long>(k / 2);
  Array out({out_len, cout});
  for (std::size_t o = 0; o < out_len; ++o) {
    for (std::size_t co = 0; co < cout; ++co) {
      double acc = b[co];
      for (std::size_t j = 0; j < k; ++j) {
        const long src = static_cast<long>(o * stride) + static_cast<long>(j) - pad;
        if (src < 0 || src >= static_cast<long>(len)) continue;
        const double* xr = x.data() + static_cast<std::size_t>(src) * cin;
        const double* wr = w.data() + co * cin * k + j;
        for (std::size_t ci = 0; ci < cin; ++ci) acc += wr[ci * k] * xr[ci];
      }
      out[o * cout + co] = acc;
    }
  }
  return signal.tape->record(
      std::move(out), {signal, kernel, bias},
      [xi = signal.id, wi = kernel.id, bi = bias.id, len, cin, cout, k, stride, out_len, pad](Tape& t, std::uint32_t self) {
        const Array& g = *t.grad_slot(self);
        const Array& x = t.value(xi);
        const Array& w = t.value(wi);
        Array* gx = t.grad_slot(xi);
        Array* gw = t.grad_slot(wi);
        if (Array* gb = t.grad_slot(bi))
          for (std::size_t o = 0; o < out_len; ++o)
            for (std::size_t co = 0; co < cout; ++co) (*gb)[co] += g[o * cout + co];
        for (std::size_t o = 0; o < out_len; ++o) {
          for (std::size_t co = 0; co < cout; ++co) {
            const double go = g[o * cout + co];
            for (std::size_t j = 0; j < k; ++j) {
              const long src = static_cast<long>(o * stride) + static_cast<long>(j) - pad;
              if (src < 0 || src >= static_cast<long>(len)) continue;
              const std::size_t s = static_cast<std::size_t>(src);
              for (std::size_t ci = 0; ci < cin; ++ci) {
                if (gw) (*gw)[co * cin * k + ci * k + j] += go * x[s * cin + ci];
                if (gx) (*gx)[s * cin + ci] += go * w[co * cin * k + ci * k + j];
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------- loss

/// Mean over mask-1 rows of -log softmax(logits[i])[targets[i]].
inline Var masked_cross_entropy(Var logits, std::span<const std::size_t> targets, std::span<const double> mask) {
  const Array& lv = logits.value();
  detail::require_rank2("masked_cross_entropy", lv);
  const std::size_t m = lv.rows(), v = lv.cols();
  if (targets.size() != m || mask.size() != m)
    shape_fail("masked_cross_entropy", lv.shape(), Shape{targets.size(), mask.size()});
  double count = 0.0;
  for (double w : mask) {
    if (w != 0.0 && w != 1.0) throw std::invalid_argument("masked_cross_entropy: mask entries must be 0 or 1");
    count += w;
  }
  if (count == 0.0) throw std::invalid_argument("masked_cross_entropy: mask selects no positions");
  Array probs({m, v});
  double total = 0.0;
  for (std::size_t r = 0; r < m; ++r) {
    if (mask[r] == 0.0) continue;
    if (targets[r] >= v) throw std::out_of_range("masked_cross_entropy: target id outside vocabulary");
    const double* row = lv.data() + r * v;
    const double mx = *std::max_element(row, row + v);
    double s = 0.0;
    for (std::size_t c = 0; c < v; ++c) s += (probs[r * v + c] = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < v; ++c) probs[r * v + c] /= s;
    total += -(row[targets[r]] - mx - std::log(s));
  }
  std::vector<std::size_t> tg(targets.begin(), targets.end());
  std::vector<double> mk(mask.begin(), mask.end());
  return logits.tape->record(
      Array::scalar(total / count), {logits},
      [li = logits.id, probs = std::move(probs), tg = std::move(tg), mk = std::move(mk), count, v](Tape& t, std::uint32_t self) {
        Array* gl = t.grad_slot(li);
        if (!gl) return;
        const double g = (*t.grad_slot(self))[0] / count;
        for (std::size_t r = 0; r < tg.size(); ++r) {
          if (mk[r] == 0.0) continue;
          for (std::size_t c = 0; c < v; ++c) (*gl)[r * v + c] += g * probs[r * v + c];
          (*gl)[r * v + tg[r]] -= g;
        }
      });
}

}  // namespace wavllm::numerics
