#include "pclab/diff/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>

namespace pclab::diff {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

Tape& common_tape(const Tensor& a, const Tensor& b) {
  if (&a.tape() != &b.tape()) throw std::logic_error("operands recorded on different tapes");
  return a.tape();
}

// Offsets of each output element into the two broadcast operands. Empty
// vectors mean "same index as the output".
struct Broadcast {
  Shape out;
  std::vector<std::size_t> ia;
  std::vector<std::size_t> ib;
};

Broadcast broadcast(const Shape& a, const Shape& b) {
  Broadcast bc;
  if (a == b) {
    bc.out = a;
    return bc;
  }
  const std::size_t r = std::max(a.size(), b.size());
  Shape pa(r - a.size(), 1), pb(r - b.size(), 1);
  pa.insert(pa.end(), a.begin(), a.end());
  pb.insert(pb.end(), b.begin(), b.end());
  bc.out.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) {
      throw ShapeError("cannot broadcast " + shape_string(a) + " with " + shape_string(b));
    }
    bc.out[i] = std::max(pa[i], pb[i]);
  }
  const std::size_t n = numel(bc.out);
  auto strides = [&](const Shape& p) {
    std::vector<std::size_t> s(r, 0);
    std::size_t acc = 1;
    for (std::size_t i = r; i-- > 0;) {
      s[i] = p[i] == 1 ? 0 : acc;
      acc *= p[i];
    }
    return s;
  };
  const auto sa = strides(pa), sb = strides(pb);
  bc.ia.resize(n);
  bc.ib.resize(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    bc.ia[flat] = oa;
    bc.ib[flat] = ob;
    for (std::size_t d = r; d-- > 0;) {
      if (++idx[d] < bc.out[d]) {
        oa += sa[d];
        ob += sb[d];
        break;
      }
      oa -= sa[d] * (bc.out[d] - 1);
      ob -= sb[d] * (bc.out[d] - 1);
      idx[d] = 0;
    }
  }
  return bc;
}

enum class Arith { kAdd, kSub, kMul };

Tensor arith(const Tensor& a, const Tensor& b, Arith op) {
  Tape& tape = common_tape(a, b);
  auto bc = std::make_shared<Broadcast>(broadcast(a.shape(), b.shape()));
  auto at = [bc](const std::vector<std::size_t>& m, std::size_t i) { return m.empty() ? i : m[i]; };
  return tape.record(
      bc->out, {a.id(), b.id()},
      [bc, op, at](Tape& t, std::size_t self) {
        auto x = t.value(t.input(self, 0));
        auto y = t.value(t.input(self, 1));
        auto& out = t.mutable_value(self);
        for (std::size_t i = 0; i < out.size(); ++i) {
          const double u = x[at(bc->ia, i)], v = y[at(bc->ib, i)];
          out[i] = op == Arith::kAdd ? u + v : op == Arith::kSub ? u - v : u * v;
        }
      },
      [bc, op, at](Tape& t, std::size_t self) {
        const auto g = t.grad(self);
        const auto ia = t.input(self, 0), ib = t.input(self, 1);
        if (t.requires_grad(ia)) {
          auto& ga = t.grad_buffer(ia);
          auto y = t.value(ib);
          for (std::size_t i = 0; i < g.size(); ++i) {
            ga[at(bc->ia, i)] += op == Arith::kMul ? g[i] * y[at(bc->ib, i)] : g[i];
          }
        }
        if (t.requires_grad(ib)) {
          auto& gb = t.grad_buffer(ib);
          auto x = t.value(ia);
          for (std::size_t i = 0; i < g.size(); ++i) {
            const double d = op == Arith::kAdd ? g[i]
                             : op == Arith::kSub ? -g[i]
                                                 : g[i] * x[at(bc->ia, i)];
            gb[at(bc->ib, i)] += d;
          }
        }
      });
}

// Elementwise map with derivative expressed through input and output values.
template <class F, class DF>
Tensor unary(const Tensor& x, F f, DF df) {
  Tape& tape = x.tape();
  return tape.record(
      x.shape(), {x.id()},
      [f](Tape& t, std::size_t self) {
        auto in = t.value(t.input(self, 0));
        auto& out = t.mutable_value(self);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
      },
      [df](Tape& t, std::size_t self) {
        const auto src = t.input(self, 0);
        if (!t.requires_grad(src)) return;
        auto in = t.value(src);
        auto out = t.value(self);
        auto g = t.grad(self);
        auto& gi = t.grad_buffer(src);
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * df(in[i], out[i]);
      });
}

// Splits a shape around an axis into (outer, n, inner).
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
  Shape reduced;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_string(s));
  }
  AxisSplit a;
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  a.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != axis) a.reduced.push_back(s[i]);
  }
  return a;
}

std::size_t last_extent(const Tensor& x, const char* op) {
  if (x.rank() == 0) throw ShapeError(std::string(op) + ": scalar input");
  return x.shape().back();
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return arith(a, b, Arith::kAdd); }
Tensor sub(const Tensor& a, const Tensor& b) { return arith(a, b, Arith::kSub); }
Tensor mul(const Tensor& a, const Tensor& b) { return arith(a, b, Arith::kMul); }

Tensor scale(const Tensor& x, double factor) {
  return unary(
      x, [factor](double v) { return v * factor; },
      [factor](double, double) { return factor; });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(
      x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor softplus(const Tensor& x) {
  return unary(
      x,
      [](double v) { return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); },
      [](double v, double) { return 1.0 / (1.0 + std::exp(-v)); });
}

Tensor gelu(const Tensor& x) {
  return unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2)); },
      [](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
        const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * M_PI);
        return cdf + v * pdf;
      });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape " + shape_string(x.shape()) + " -> " + shape_string(shape));
  }
  return x.tape().record(
      std::move(shape), {x.id()},
      [](Tape& t, std::size_t self) {
        auto in = t.value(t.input(self, 0));
        auto& out = t.mutable_value(self);
        std::copy(in.begin(), in.end(), out.begin());
      },
      [](Tape& t, std::size_t self) {
        const auto src = t.input(self, 0);
        if (!t.requires_grad(src)) return;
        auto g = t.grad(self);
        auto& gi = t.grad_buffer(src);
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
      });
}

Tensor transpose_last2(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("transpose_last2 needs rank >= 2");
  Shape s = x.shape();
  const std::size_t rows = s[s.size() - 2], cols = s.back();
  const std::size_t batch = x.size() / (rows * cols);
  std::swap(s[s.size() - 2], s.back());
  return x.tape().record(
      s, {x.id()},
      [=](Tape& t, std::size_t self) {
        auto in = t.value(t.input(self, 0));
        auto& out = t.mutable_value(self);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j)
              out[b * rows * cols + j * rows + i] = in[b * rows * cols + i * cols + j];
      },
      [=](Tape& t, std::size_t self) {
        const auto src = t.input(self, 0);
        if (!t.requires_grad(src)) return;
        auto g = t.grad(self);
        auto& gi = t.grad_buffer(src);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j)
              gi[b * rows * cols + i * cols + j] += g[b * rows * cols + j * rows + i];
      });
}

Tensor slice_last(const Tensor& x, std::size_t start, std::size_t len) {
  const std::size_t n = last_extent(x, "slice_last");
  if (start + len > n || len == 0) throw ShapeError("slice_last: range out of bounds");
  Shape s = x.shape();
  s.back() = len;
  const std::size_t rows = x.size() / n;
  return x.tape().record(
      s, {x.id()},
      [=](Tape& t, std::size_t self) {
        auto in = t.value(t.input(self, 0));
        auto& out = t.mutable_value(self);
        for (std::size_t r = 0; r < rows; ++r)
          std::copy_n(in.begin() + r * n + start, len, out.begin() + r * len);
      },
      [=](Tape& t, std::size_t self) {
        const auto src = t.input(self, 0);
        if (!t.requires_grad(src)) return;
        auto g = t.grad(self);
        auto& gi = t.grad_buffer(src);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < len; ++j) gi[r * n + start + j] += g[r * len + j];
      });
}

Tensor stack_last(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("stack_last: no inputs");
  Tape& tape = parts[0].tape();
  std::vector<std::size_t> ids;
  for (const auto& p : parts) {
    if (&p.tape() != &tape) throw std::logic_error("stack_last: mixed tapes");
    if (p.shape() != parts[0].shape()) throw ShapeError("stack_last: shape mismatch");
    ids.push_back(p.id());
  }
  Shape s = parts[0].shape();
  const std::size_t k = parts.size(), n = parts[0].size();
  s.push_back(k);
  return tape.record(
      s, ids,
      [=](Tape& t, std::size_t self) {
        auto& out = t.mutable_value(self);
        for (std::size_t j = 0; j < k; ++j) {
          auto in = t.value(t.input(self, j));
          for (std::size_t i = 0; i < n; ++i) out[i * k + j] = in[i];
        }
      },
      [=](Tape& t, std::size_t self) {
        auto g = t.grad(self);
        for (std::size_t j = 0; j < k; ++j) {
          const auto src = t.input(self, j);
          if (!t.requires_grad(src)) continue;
          auto& gi = t.grad_buffer(src);
          for (std::size_t i = 0; i < n; ++i) gi[i] += g[i * k + j];
        }
      });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  Tape& tape = common_tape(a, b);
  if (a.rank() < 2 || b.rank() != 2) {
    throw ShapeError("matmul expects (..., M, K) x (K, N), got " + shape_string(a.shape()) +
                     " x " + shape_string(b.shape()));
  }
  const std::size_t kk = a.shape().back();
  if (b.shape()[0] != kk) {
    throw ShapeError("matmul inner mismatch " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  }
  const std::size_t nn = b.shape()[1];
  const std::size_t rows = a.size() / kk;
  Shape s = a.shape();
  s.back() = nn;
  return tape.record(
      s, {a.id(), b.id()},
      [=](Tape& t, std::size_t self) {
        auto x = t.value(t.input(self, 0));
        auto w = t.value(t.input(self, 1));
        auto& out = t.mutable_value(self);
        std::fill(out.begin(), out.end(), 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
          double* o = out.data() + r * nn;
          for (std::size_t k = 0; k < kk; ++k) {
            const double xv = x[r * kk + k];
            const double* wr = w.data() + k * nn;
            for (std::size_t j = 0; j < nn; ++j) o[j] += xv * wr[j];
          }
        }
      },
      [=](Tape& t, std::size_t self) {
        auto g = t.grad(self);
        const auto ia = t.input(self, 0), ib = t.input(self, 1);
        auto x = t.value(ia);
        auto w = t.value(ib);
        if (t.requires_grad(ia)) {
          auto& ga = t.grad_buffer(ia);
          for (std::size_t r = 0; r < rows; ++r) {
            const double* gr = g.data() + r * nn;
            for (std::size_t k = 0; k < kk; ++k) {
              const double* wr = w.data() + k * nn;
              double acc = 0.0;
              for (std::size_t j = 0; j < nn; ++j) acc += gr[j] * wr[j];
              ga[r * kk + k] += acc;
            }
          }
        }
        if (t.requires_grad(ib)) {
          auto& gb = t.grad_buffer(ib);
          for (std::size_t r = 0; r < rows; ++r) {
            const double* gr = g.data() + r * nn;
            for (std::size_t k = 0; k < kk; ++k) {
              const double xv = x[r * kk + k];
              double* gw = gb.data() + k * nn;
              for (std::size_t j = 0; j < nn; ++j) gw[j] += xv * gr[j];
            }
          }
        }
      });
}

Tensor sum(const Tensor& x) {
  return x.tape().record(
      {}, {x.id()},
      [](Tape& t, std::size_t self) {
        auto in = t.value(t.input(self, 0));
        t.mutable_value(self)[0] = std::accumulate(in.begin(), in.end(), 0.0);
      },
      [](Tape& t, std::size_t self) {
        const auto src = t.input(self, 0);
        if (!t.requires_grad(src)) return;
        const double g = t.grad(self)[0];
        for (auto& v : t.grad_buffer(src)) v += g;
      });
}

Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

Tensor sum(const Tensor& x, std::size_t axis) {
  const AxisSplit a = split_axis(x.shape(), axis);
  return x.tape().record(
      a.reduced, {x.id()},
      [a](Tape& t, std::size_t self) {
        auto in = t.value(t.input(self, 0));
        auto& out = t.mutable_value(self);
        std::fill(out.begin(), out.end(), 0.0);
        for (std::size_t o = 0; o < a.outer; ++o)
          for (std::size_t k = 0; k < a.n; ++k)
            for (std::size_t i = 0; i < a.inner; ++i)
              out[o * a.inner + i] += in[(o * a.n + k) * a.inner + i];
      },
      [a](Tape& t, std::size_t self) {
        const auto src = t.input(self, 0);
        if (!t.requires_grad(src)) return;
        auto g = t.grad(self);
        auto& gi = t.grad_buffer(src);
        for (std::size_t o = 0; o < a.outer; ++o)
          for (std::size_t k = 0; k < a.n; ++k)
            for (std::size_t i = 0; i < a.inner; ++i)
              gi[(o * a.n + k) * a.inner + i] += g[o * a.inner + i];
      });
}

Tensor logsumexp(const Tensor& x, std::size_t axis) {
  const AxisSplit a = split_axis(x.shape(), axis);
  return x.tape().record(
      a.reduced, {x.id()},
      [a](Tape& t, std::size_t self) {
        auto in = t.value(t.input(self, 0));
        auto& out = t.mutable_value(self);
        for (std::size_t o = 0; o < a.outer; ++o)
          for (std::size_t i = 0; i < a.inner; ++i) {
            double m = kNegInf;
            for (std::size_t k = 0; k < a.n; ++k) m = std::max(m, in[(o * a.n + k) * a.inner + i]);
            double s = 0.0;
            for (std::size_t k = 0; k < a.n; ++k) s += std::exp(in[(o * a.n + k) * a.inner + i] - m);
            out[o * a.inner + i] = m + std::log(s);
          }
      },
      [a](Tape& t, std::size_t self) {
        const auto src = t.input(self, 0);
        if (!t.requires_grad(src)) return;
        auto in = t.value(src);
        auto out = t.value(self);
        auto g = t.grad(self);
        auto& gi = t.grad_buffer(src);
        for (std::size_t o = 0; o < a.outer; ++o)
          for (std::size_t k = 0; k < a.n; ++k)
            for (std::size_t i = 0; i < a.inner; ++i) {
              const std::size_t j = (o * a.n + k) * a.inner + i;
              gi[j] += g[o * a.inner + i] * std::exp(in[j] - out[o * a.inner + i]);
            }
      });
}

Tensor log_softmax(const Tensor& x) {
  const std::size_t n = last_extent(x, "log_softmax");
  const std::size_t rows = x.size() / n;
  return x.tape().record(
      x.shape(), {x.id()},
      [=](Tape& t, std::size_t self) {
        auto in = t.value(t.input(self, 0));
        auto& out = t.mutable_value(self);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* row = in.data() + r * n;
          const double m = *std::max_element(row, row + n);
          double s = 0.0;
          for (std::size_t k = 0; k < n; ++k) s += std::exp(row[k] - m);
          const double lse = m + std::log(s);
          for (std::size_t k = 0; k < n; ++k) out[r * n + k] = row[k] - lse;
        }
      },
      [=](Tape& t, std::size_t self) {
        const auto src = t.input(self, 0);
        if (!t.requires_grad(src)) return;
        auto out = t.value(self);
        auto g = t.grad(self);
        auto& gi = t.grad_buffer(src);
        for (std::size_t r = 0; r < rows; ++r) {
          double gs = 0.0;
          for (std::size_t k = 0; k < n; ++k) gs += g[r * n + k];
          for (std::size_t k = 0; k < n; ++k)
            gi[r * n + k] += g[r * n + k] - std::exp(out[r * n + k]) * gs;
        }
      });
}

Tensor softmax(const Tensor& x) {
  const std::size_t n = last_extent(x, "softmax");
  const std::size_t rows = x.size() / n;
  return x.tape().record(
      x.shape(), {x.id()},
      [=](Tape& t, std::size_t self) {
        auto in = t.value(t.input(self, 0));
        auto& out = t.mutable_value(self);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* row = in.data() + r * n;
          const double m = *std::max_element(row, row + n);
          double s = 0.0;
          for (std::size_t k = 0; k < n; ++k) s += (out[r * n + k] = std::exp(row[k] - m));
          for (std::size_t k = 0; k < n; ++k) out[r * n + k] /= s;
        }
      },
      [=](Tape& t, std::size_t self) {
        const auto src = t.input(self, 0);
        if (!t.requires_grad(src)) return;
        auto y = t.value(self);
        auto g = t.grad(self);
        auto& gi = t.grad_buffer(src);
        for (std::size_t r = 0; r < rows; ++r) {
          double dot = 0.0;
          for (std::size_t k = 0; k < n; ++k) dot += g[r * n + k] * y[r * n + k];
          for (std::size_t k = 0; k < n; ++k) gi[r * n + k] += y[r * n + k] * (g[r * n + k] - dot);
        }
      });
}

Tensor embedding(const Tensor& table, std::span<const std::uint32_t> ids, Shape ids_shape) {
  if (table.rank() != 2) throw ShapeError("embedding table must be (V, d)");
  if (numel(ids_shape) != ids.size()) throw ShapeError("embedding: ids shape mismatch");
  const std::size_t vocab = table.shape()[0], d = table.shape()[1];
  for (auto id : ids) {
    if (id >= vocab) throw std::out_of_range("embedding: id " + std::to_string(id) + " >= " +
                                             std::to_string(vocab));
  }
  auto idx = std::make_shared<std::vector<std::uint32_t>>(ids.begin(), ids.end());
  Shape s = std::move(ids_shape);
  s.push_back(d);
  return table.tape().record(
      s, {table.id()},
      [idx, d](Tape& t, std::size_t self) {
        auto tab = t.value(t.input(self, 0));
        auto& out = t.mutable_value(self);
        for (std::size_t i = 0; i < idx->size(); ++i)
          std::copy_n(tab.begin() + (*idx)[i] * d, d, out.begin() + i * d);
      },
      [idx, d](Tape& t, std::size_t self) {
        const auto src = t.input(self, 0);
        if (!t.requires_grad(src)) return;
        auto g = t.grad(self);
        auto& gi = t.grad_buffer(src);
        for (std::size_t i = 0; i < idx->size(); ++i)
          for (std::size_t j = 0; j < d; ++j) gi[(*idx)[i] * d + j] += g[i * d + j];
      });
}

Tensor gather_last(const Tensor& x, std::span<const std::uint32_t> index) {
  const std::size_t n = last_extent(x, "gather_last");
  const std::size_t rows = x.size() / n;
  if (index.size() != rows) throw ShapeError("gather_last: one index per row required");
  for (auto i : index) {
    if (i >= n) throw std::out_of_range("gather_last: index out of range");
  }
  auto idx = std::make_shared<std::vector<std::uint32_t>>(index.begin(), index.end());
  Shape s(x.shape().begin(), x.shape().end() - 1);
  return x.tape().record(
      s, {x.id()},
      [idx, n](Tape& t, std::size_t self) {
        auto in = t.value(t.input(self, 0));
        auto& out = t.mutable_value(self);
        for (std::size_t r = 0; r < idx->size(); ++r) out[r] = in[r * n + (*idx)[r]];
      },
      [idx, n](Tape& t, std::size_t self) {
        const auto src = t.input(self, 0);
        if (!t.requires_grad(src)) return;
        auto g = t.grad(self);
        auto& gi = t.grad_buffer(src);
        for (std::size_t r = 0; r < idx->size(); ++r) gi[r * n + (*idx)[r]] += g[r];
      });
}

Tensor gather_table(const Tensor& table, std::span<const std::uint32_t> ids, std::size_t batch) {
  if (table.rank() != 3) throw ShapeError("gather_table: table must be (G, C, V)");
  const std::size_t groups = table.shape()[0], ch = table.shape()[1], vocab = table.shape()[2];
  if (ids.size() != batch * groups) throw ShapeError("gather_table: ids must be (B, G)");
  for (auto i : ids) {
    if (i >= vocab) throw std::out_of_range("gather_table: token out of range");
  }
  auto idx = std::make_shared<std::vector<std::uint32_t>>(ids.begin(), ids.end());
  return table.tape().record(
      {batch, groups, ch}, {table.id()},
      [=](Tape& t, std::size_t self) {
        auto tab = t.value(t.input(self, 0));
        auto& out = t.mutable_value(self);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t g = 0; g < groups; ++g) {
            const std::size_t v = (*idx)[b * groups + g];
            for (std::size_t c = 0; c < ch; ++c)
              out[(b * groups + g) * ch + c] = tab[(g * ch + c) * vocab + v];
          }
      },
      [=](Tape& t, std::size_t self) {
        const auto src = t.input(self, 0);
        if (!t.requires_grad(src)) return;
        auto gr = t.grad(self);
        auto& gi = t.grad_buffer(src);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t g = 0; g < groups; ++g) {
            const std::size_t v = (*idx)[b * groups + g];
            for (std::size_t c = 0; c < ch; ++c)
              gi[(g * ch + c) * vocab + v] += gr[(b * groups + g) * ch + c];
          }
      });
}

Tensor log_matmul(const Tensor& x, const Tensor& w) {
  Tape& tape = common_tape(x, w);
  if (x.rank() != 3 || w.rank() != 3) throw ShapeError("log_matmul expects (B,G,K) and (G,C,K)");
  const std::size_t batch = x.shape()[0], groups = x.shape()[1], kk = x.shape()[2];
  const std::size_t wg = w.shape()[0], cc = w.shape()[1];
  if (w.shape()[2] != kk || (wg != groups && wg != 1)) {
    throw ShapeError("log_matmul shape mismatch " + shape_string(x.shape()) + " vs " +
                     shape_string(w.shape()));
  }
  // Cached responsibilities exp(x + w - out), shape (B, G, C, K).
  auto resp = std::make_shared<std::vector<double>>();
  return tape.record(
      {batch, groups, cc}, {x.id(), w.id()},
      [=](Tape& t, std::size_t self) {
        auto xv = t.value(t.input(self, 0));
        auto wv = t.value(t.input(self, 1));
        auto& out = t.mutable_value(self);
        resp->resize(batch * groups * cc * kk);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t g = 0; g < groups; ++g) {
            const double* xr = xv.data() + (b * groups + g) * kk;
            const double* wgp = wv.data() + (wg == 1 ? 0 : g) * cc * kk;
            for (std::size_t c = 0; c < cc; ++c) {
              const double* wr = wgp + c * kk;
              double* rr = resp->data() + ((b * groups + g) * cc + c) * kk;
              double m = kNegInf;
              for (std::size_t k = 0; k < kk; ++k) {
                rr[k] = xr[k] + wr[k];
                m = std::max(m, rr[k]);
              }
              double s = 0.0;
              for (std::size_t k = 0; k < kk; ++k) s += (rr[k] = std::exp(rr[k] - m));
              const double inv = 1.0 / s;
              for (std::size_t k = 0; k < kk; ++k) rr[k] *= inv;
              out[(b * groups + g) * cc + c] = m + std::log(s);
            }
          }
      },
      [=](Tape& t, std::size_t self) {
        auto g = t.grad(self);
        const auto ix = t.input(self, 0), iw = t.input(self, 1);
        std::vector<double>* gx = t.requires_grad(ix) ? &t.grad_buffer(ix) : nullptr;
        std::vector<double>* gw = t.requires_grad(iw) ? &t.grad_buffer(iw) : nullptr;
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t gi = 0; gi < groups; ++gi)
            for (std::size_t c = 0; c < cc; ++c) {
              const double go = g[(b * groups + gi) * cc + c];
              if (go == 0.0) continue;
              const double* rr = resp->data() + ((b * groups + gi) * cc + c) * kk;
              if (gx) {
                double* dst = gx->data() + (b * groups + gi) * kk;
                for (std::size_t k = 0; k < kk; ++k) dst[k] += go * rr[k];
              }
              if (gw) {
                double* dst = gw->data() + ((wg == 1 ? 0 : gi) * cc + c) * kk;
                for (std::size_t k = 0; k < kk; ++k) dst[k] += go * rr[k];
              }
            }
      });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t d = last_extent(x, "layer_norm");
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw ShapeError("layer_norm: gain/bias must have shape (" + std::to_string(d) + ")");
  }
  const std::size_t rows = x.size() / d;
  // Cached normalized values and reciprocal standard deviations.
  auto xhat = std::make_shared<std::vector<double>>();
  auto rstd = std::make_shared<std::vector<double>>();
  return x.tape().record(
      x.shape(), {x.id(), gain.id(), bias.id()},
      [=](Tape& t, std::size_t self) {
        auto in = t.value(t.input(self, 0));
        auto gv = t.value(t.input(self, 1));
        auto bv = t.value(t.input(self, 2));
        auto& out = t.mutable_value(self);
        xhat->resize(rows * d);
        rstd->resize(rows);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* row = in.data() + r * d;
          double mu = 0.0;
          for (std::size_t k = 0; k < d; ++k) mu += row[k];
          mu /= static_cast<double>(d);
          double var = 0.0;
          for (std::size_t k = 0; k < d; ++k) var += (row[k] - mu) * (row[k] - mu);
          var /= static_cast<double>(d);
          const double rs = 1.0 / std::sqrt(var + eps);
          (*rstd)[r] = rs;
          for (std::size_t k = 0; k < d; ++k) {
            const double h = (row[k] - mu) * rs;
            (*xhat)[r * d + k] = h;
            out[r * d + k] = h * gv[k] + bv[k];
          }
        }
      },
      [=](Tape& t, std::size_t self) {
        auto g = t.grad(self);
        const auto ix = t.input(self, 0), ig = t.input(self, 1), ib = t.input(self, 2);
        auto gv = t.value(ig);
        if (t.requires_grad(ig) || t.requires_grad(ib)) {
          std::vector<double>* gg = t.requires_grad(ig) ? &t.grad_buffer(ig) : nullptr;
          std::vector<double>* gb = t.requires_grad(ib) ? &t.grad_buffer(ib) : nullptr;
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t k = 0; k < d; ++k) {
              if (gg) (*gg)[k] += g[r * d + k] * (*xhat)[r * d + k];
              if (gb) (*gb)[k] += g[r * d + k];
            }
        }
        if (t.requires_grad(ix)) {
          auto& gx = t.grad_buffer(ix);
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
              const double dh = g[r * d + k] * gv[k];
              s1 += dh;
              s2 += dh * (*xhat)[r * d + k];
            }
            for (std::size_t k = 0; k < d; ++k) {
              const double dh = g[r * d + k] * gv[k];
              gx[r * d + k] +=
                  (*rstd)[r] * (dh - inv_d * s1 - (*xhat)[r * d + k] * inv_d * s2);
            }
          }
        }
      });
}

Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng, bool training) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout rate must be in [0, 1)");
  if (!training || rate == 0.0) return x;
  auto keep = std::make_shared<std::vector<double>>(x.size());
  std::bernoulli_distribution draw(1.0 - rate);
  const double scale_kept = 1.0 / (1.0 - rate);
  for (auto& k : *keep) k = draw(rng) ? scale_kept : 0.0;
  return x.tape().record(
      x.shape(), {x.id()},
      [keep](Tape& t, std::size_t self) {
        auto in = t.value(t.input(self, 0));
        auto& out = t.mutable_value(self);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] * (*keep)[i];
      },
      [keep](Tape& t, std::size_t self) {
        const auto src = t.input(self, 0);
        if (!t.requires_grad(src)) return;
        auto g = t.grad(self);
        auto& gi = t.grad_buffer(src);
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * (*keep)[i];
      });
}

AttentionMask AttentionMask::causal(std::size_t length) {
  AttentionMask m;
  m.length = length;
  m.allowed.assign(length * length, 0);
  for (std::size_t i = 0; i < length; ++i)
    for (std::size_t j = 0; j <= i; ++j) m.allowed[i * length + j] = 1;
  return m;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 const AttentionMask& mask) {
  Tape& tape = common_tape(q, k);
  common_tape(q, v);
  if (q.rank() != 3 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw ShapeError("attention expects q, k, v of equal shape (B, T, d)");
  }
  const std::size_t batch = q.shape()[0], len = q.shape()[1], d = q.shape()[2];
  if (heads == 0 || d % heads != 0) throw ShapeError("attention: d not divisible by heads");
  if (mask.length != len) throw ShapeError("attention: mask length does not match sequence");
  for (std::size_t i = 0; i < len; ++i) {
    bool any = false;
    for (std::size_t j = 0; j < len; ++j) any = any || mask(i, j);
    if (!any) throw std::invalid_argument("attention: mask row with no allowed key");
  }
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  auto allowed = std::make_shared<std::vector<std::uint8_t>>(mask.allowed);
  auto probs = std::make_shared<std::vector<double>>();  // (B, H, T, T)
  auto at = [=](std::size_t b, std::size_t tpos, std::size_t h) { return (b * len + tpos) * d + h * dh; };
  return tape.record(
      q.shape(), {q.id(), k.id(), v.id()},
      [=](Tape& t, std::size_t self) {
        auto qv = t.value(t.input(self, 0));
        auto kv = t.value(t.input(self, 1));
        auto vv = t.value(t.input(self, 2));
        auto& out = t.mutable_value(self);
        std::fill(out.begin(), out.end(), 0.0);
        probs->assign(batch * heads * len * len, 0.0);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < len; ++i) {
              double* p = probs->data() + ((b * heads + h) * len + i) * len;
              const double* qi = qv.data() + at(b, i, h);
              double m = kNegInf;
              for (std::size_t j = 0; j < len; ++j) {
                if (!(*allowed)[i * len + j]) {
                  p[j] = kNegInf;
                  continue;
                }
                const double* kj = kv.data() + at(b, j, h);
                double s = 0.0;
                for (std::size_t e = 0; e < dh; ++e) s += qi[e] * kj[e];
                p[j] = s * inv_sqrt;
                m = std::max(m, p[j]);
              }
              double z = 0.0;
              for (std::size_t j = 0; j < len; ++j) z += (p[j] = std::exp(p[j] - m));
              double* oi = out.data() + at(b, i, h);
              for (std::size_t j = 0; j < len; ++j) {
                p[j] /= z;
                if (p[j] == 0.0) continue;
                const double* vj = vv.data() + at(b, j, h);
                for (std::size_t e = 0; e < dh; ++e) oi[e] += p[j] * vj[e];
              }
            }
      },
      [=](Tape& t, std::size_t self) {
        auto g = t.grad(self);
        const auto iq = t.input(self, 0), ik = t.input(self, 1), iv = t.input(self, 2);
        auto qv = t.value(iq);
        auto kv = t.value(ik);
        auto vv = t.value(iv);
        std::vector<double>* gq = t.requires_grad(iq) ? &t.grad_buffer(iq) : nullptr;
        std::vector<double>* gk = t.requires_grad(ik) ? &t.grad_buffer(ik) : nullptr;
        std::vector<double>* gv = t.requires_grad(iv) ? &t.grad_buffer(iv) : nullptr;
        std::vector<double> dp(len);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < len; ++i) {
              const double* p = probs->data() + ((b * heads + h) * len + i) * len;
              const double* gi = g.data() + at(b, i, h);
              double dot = 0.0;
              for (std::size_t j = 0; j < len; ++j) {
                if (p[j] == 0.0) {
                  dp[j] = 0.0;
                  continue;
                }
                const double* vj = vv.data() + at(b, j, h);
                double s = 0.0;
                for (std::size_t e = 0; e < dh; ++e) s += gi[e] * vj[e];
                dp[j] = s;
                dot += p[j] * s;
                if (gv) {
                  double* dvj = gv->data() + at(b, j, h);
                  for (std::size_t e = 0; e < dh; ++e) dvj[e] += p[j] * gi[e];
                }
              }
              const double* qi = qv.data() + at(b, i, h);
              for (std::size_t j = 0; j < len; ++j) {
                if (p[j] == 0.0) continue;
                const double ds = p[j] * (dp[j] - dot) * inv_sqrt;
                const double* kj = kv.data() + at(b, j, h);
                if (gq) {
                  double* dqi = gq->data() + at(b, i, h);
                  for (std::size_t e = 0; e < dh; ++e) dqi[e] += ds * kj[e];
                }
                if (gk) {
                  double* dkj = gk->data() + at(b, j, h);
                  for (std::size_t e = 0; e < dh; ++e) dkj[e] += ds * qi[e];
                }
              }
            }
      });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::uint32_t> targets,
                     std::span<const std::uint8_t> mask) {
  const std::size_t n = last_extent(logits, "cross_entropy");
  const std::size_t rows = logits.size() / n;
  if (targets.size() != rows || mask.size() != rows) {
    throw ShapeError("cross_entropy: targets and mask need one entry per row");
  }
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    if (targets[r] >= n) throw std::out_of_range("cross_entropy: target out of range");
    ++count;
  }
  if (count == 0) throw std::invalid_argument("cross_entropy: every position is masked");
  auto tgt = std::make_shared<std::vector<std::uint32_t>>(targets.begin(), targets.end());
  auto msk = std::make_shared<std::vector<std::uint8_t>>(mask.begin(), mask.end());
  const double inv = 1.0 / static_cast<double>(count);
  auto row_lse = [n](const double* row) {
    const double m = *std::max_element(row, row + n);
    double s = 0.0;
    for (std::size_t k = 0; k < n; ++k) s += std::exp(row[k] - m);
    return m + std::log(s);
  };
  return logits.tape().record(
      {}, {logits.id()},
      [=](Tape& t, std::size_t self) {
        auto in = t.value(t.input(self, 0));
        double total = 0.0;
        for (std::size_t r = 0; r < rows; ++r) {
          if (!(*msk)[r]) continue;
          const double* row = in.data() + r * n;
          total += row_lse(row) - row[(*tgt)[r]];
        }
        t.mutable_value(self)[0] = total * inv;
      },
      [=](Tape& t, std::size_t self) {
        const auto src = t.input(self, 0);
        if (!t.requires_grad(src)) return;
        auto in = t.value(src);
        const double g = t.grad(self)[0] * inv;
        auto& gi = t.grad_buffer(src);
        for (std::size_t r = 0; r < rows; ++r) {
          if (!(*msk)[r]) continue;
          const double* row = in.data() + r * n;
          const double lse = row_lse(row);
          for (std::size_t k = 0; k < n; ++k) gi[r * n + k] += g * std::exp(row[k] - lse);
          gi[r * n + (*tgt)[r]] -= g;
        }
      });
}

}  // namespace pclab::diff
