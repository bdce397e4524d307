#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "chansel/errors.hpp"
#include "chansel/rng.hpp"
#include "chansel/tensor.hpp"

namespace chansel {

// Handle to a node on a Graph's tape.
struct Var {
  std::uint32_t id = 0;
};

// Per-feature running statistics for batch normalization. Training mode
// normalizes by batch statistics and folds them into the running values;
// eval mode reads the running values and never mutates them.
template <typename Real>
struct BatchNormState {
  Tensor<Real> running_mean;
  Tensor<Real> running_var;
  Real momentum = Real(0.1);
  Real epsilon = Real(1e-5);

  explicit BatchNormState(std::size_t features = 0, Real momentum_ = Real(0.1),
                          Real epsilon_ = Real(1e-5))
      : running_mean(Tensor<Real>::zeros({features})),
        running_var(Tensor<Real>::ones({features})),
        momentum(momentum_),
        epsilon(epsilon_) {}

  std::size_t features() const { return running_mean.size(); }
};

namespace detail {

// C(m,n) += A(m,k) * B(k,n), row-major.
template <typename Real>
void gemm_acc(const Real* A, const Real* B, Real* C, std::size_t m,
              std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    Real* c = C + i * n;
    const Real* a = A + i * k;
    for (std::size_t t = 0; t < k; ++t) {
      const Real av = a[t];
      const Real* b = B + t * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// dA(m,k) += dC(m,n) * B(k,n)^T
template <typename Real>
void gemm_abt(const Real* dC, const Real* B, Real* dA, std::size_t m,
              std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const Real* dc = dC + i * n;
    Real* da = dA + i * k;
    for (std::size_t t = 0; t < k; ++t) {
      const Real* b = B + t * n;
      Real acc = 0;
      for (std::size_t j = 0; j < n; ++j) acc += dc[j] * b[j];
      da[t] += acc;
    }
  }
}

// dB(k,n) += A(m,k)^T * dC(m,n)
template <typename Real>
void gemm_atb(const Real* A, const Real* dC, Real* dB, std::size_t m,
              std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const Real* a = A + i * k;
    const Real* dc = dC + i * n;
    for (std::size_t t = 0; t < k; ++t) {
      const Real av = a[t];
      Real* db = dB + t * n;
      for (std::size_t j = 0; j < n; ++j) db[j] += av * dc[j];
    }
  }
}

}  // namespace detail

// Reverse-mode autograd tape. Ops append nodes in execution order, which is
// already topological; one backward pass walks the tape once in reverse.
// A Graph is a single-writer object: one forward+backward executes on one
// logical thread. Independent Graphs share nothing.
template <typename Real>
class Graph {
public:
  explicit Graph(bool check_finite = true) : check_finite_(check_finite) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = delete;
  Graph& operator=(Graph&&) = delete;

  std::size_t size() const noexcept { return nodes_.size(); }

  Var leaf(Tensor<Real> value, bool requires_grad = false) {
    check_values("leaf", value);
    nodes_.push_back(Node{std::move(value), {}, requires_grad, nullptr, "leaf"});
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  Var constant(Tensor<Real> value) { return leaf(std::move(value), false); }

  const Tensor<Real>& value(Var v) const { return node(v).value; }

  bool requires_grad(Var v) const { return node(v).requires_grad; }

  // Accumulated gradient of a node. Valid after backward().
  const Tensor<Real>& grad(Var v) const {
    const Node& n = node(v);
    if (n.grad.empty())
      throw WorkflowError("grad: node has no gradient (backward not run, or "
                          "node does not require grad)");
    return n.grad;
  }

  // ---------------------------------------------------------------- backward

  // Seeds d(loss)/d(loss) = 1 and walks the tape in reverse, accumulating
  // into every leaf that requires grad. One-shot: the tape is consumed.
  void backward(Var loss) {
    if (consumed_)
      throw WorkflowError("backward: tape already consumed");
    Node& ln = node(loss);
    if (ln.value.size() != 1)
      throw ShapeError("backward: loss must be scalar, got " +
                       shape_str(ln.value.shape()));
    if (!ln.requires_grad)
      throw WorkflowError("backward: loss does not depend on any "
                          "grad-requiring leaf");
    consumed_ = true;
    grad_buf(loss.id)[0] = Real(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.requires_grad && n.backward && !n.grad.empty()) n.backward();
    }
  }

  // ---------------------------------------------------------- elementwise ops

  Var add(Var a, Var b) {
    const Tensor<Real>&A = value(a), &B = value(b);
    require(A.same_shape(B), "add", shape_str(A.shape()) + " vs " +
                                        shape_str(B.shape()));
    Tensor<Real> out = A;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
    return record("add", std::move(out), {a, b}, [this, a, b](Node& o) {
      accumulate(a, o.grad.values());
      accumulate(b, o.grad.values());
    });
  }

  // x + y with y's shape equal to the trailing extents of x's shape;
  // y is repeated over the leading extents (bias add, positional add).
  Var add_broadcast(Var x, Var y) {
    const Tensor<Real>&X = value(x), &Y = value(y);
    require(Y.rank() < X.rank(), "add_broadcast", "y rank must be below x");
    const std::size_t off = X.rank() - Y.rank();
    for (std::size_t i = 0; i < Y.rank(); ++i)
      require(X.shape()[off + i] == Y.shape()[i], "add_broadcast",
              shape_str(X.shape()) + " vs " + shape_str(Y.shape()));
    const std::size_t inner = Y.size();
    const std::size_t outer = X.size() / std::max<std::size_t>(inner, 1);
    Tensor<Real> out = X;
    for (std::size_t r = 0; r < outer; ++r)
      for (std::size_t i = 0; i < inner; ++i) out[r * inner + i] += Y[i];
    return record("add_broadcast", std::move(out), {x, y},
                  [this, x, y, outer, inner](Node& o) {
                    accumulate(x, o.grad.values());
                    if (nodes_[y.id].requires_grad) {
                      Tensor<Real>& gy = grad_buf(y.id);
                      for (std::size_t r = 0; r < outer; ++r)
                        for (std::size_t i = 0; i < inner; ++i)
                          gy[i] += o.grad[r * inner + i];
                    }
                  });
  }

  // x(B,F,T) + b(F), bias constant along the trailing time axis.
  Var add_channel_bias(Var x, Var b) {
    const Tensor<Real>&X = value(x), &B = value(b);
    require(X.rank() == 3 && B.rank() == 1 && B.extent(0) == X.extent(1),
            "add_channel_bias",
            shape_str(X.shape()) + " vs " + shape_str(B.shape()));
    const std::size_t batch = X.extent(0), f = X.extent(1), t = X.extent(2);
    Tensor<Real> out = X;
    for (std::size_t i = 0; i < batch; ++i)
      for (std::size_t j = 0; j < f; ++j) {
        const Real bv = B[j];
        Real* row = out.data() + (i * f + j) * t;
        for (std::size_t s = 0; s < t; ++s) row[s] += bv;
      }
    return record("add_channel_bias", std::move(out), {x, b},
                  [this, x, b, batch, f, t](Node& o) {
                    accumulate(x, o.grad.values());
                    if (nodes_[b.id].requires_grad) {
                      Tensor<Real>& gb = grad_buf(b.id);
                      for (std::size_t i = 0; i < batch; ++i)
                        for (std::size_t j = 0; j < f; ++j) {
                          const Real* row = o.grad.data() + (i * f + j) * t;
                          Real acc = 0;
                          for (std::size_t s = 0; s < t; ++s) acc += row[s];
                          gb[j] += acc;
                        }
                    }
                  });
  }

  Var mul(Var a, Var b) {
    const Tensor<Real>&A = value(a), &B = value(b);
    require(A.same_shape(B), "mul", shape_str(A.shape()) + " vs " +
                                        shape_str(B.shape()));
    Tensor<Real> out = A;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
    return record("mul", std::move(out), {a, b}, [this, a, b](Node& o) {
      const Tensor<Real>&A = nodes_[a.id].value, &B = nodes_[b.id].value;
      if (nodes_[a.id].requires_grad) {
        Tensor<Real>& ga = grad_buf(a.id);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i] * B[i];
      }
      if (nodes_[b.id].requires_grad) {
        Tensor<Real>& gb = grad_buf(b.id);
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += o.grad[i] * A[i];
      }
    });
  }

  Var scale(Var x, Real c) {
    Tensor<Real> out = value(x);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c;
    return record("scale", std::move(out), {x}, [this, x, c](Node& o) {
      Tensor<Real>& gx = grad_buf(x.id);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += c * o.grad[i];
    });
  }

  Var sub(Var a, Var b) { return add(a, scale(b, Real(-1))); }

  // ------------------------------------------------------------- reductions

  Var sum(Var x) {
    Real acc = 0;
    const Tensor<Real>& X = value(x);
    for (std::size_t i = 0; i < X.size(); ++i) acc += X[i];
    return record("sum", Tensor<Real>::scalar(acc), {x}, [this, x](Node& o) {
      Tensor<Real>& gx = grad_buf(x.id);
      const Real g = o.grad[0];
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
  }

  Var mean(Var x) {
    const Tensor<Real>& X = value(x);
    require(X.size() > 0, "mean", "empty tensor");
    Real acc = 0;
    for (std::size_t i = 0; i < X.size(); ++i) acc += X[i];
    const Real inv = Real(1) / static_cast<Real>(X.size());
    return record("mean", Tensor<Real>::scalar(acc * inv), {x},
                  [this, x, inv](Node& o) {
                    Tensor<Real>& gx = grad_buf(x.id);
                    const Real g = o.grad[0] * inv;
                    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
                  });
  }

  // --------------------------------------------------------------- structure

  Var reshape(Var x, Shape new_shape) {
    Tensor<Real> out = value(x).reshaped(std::move(new_shape));
    return record("reshape", std::move(out), {x}, [this, x](Node& o) {
      accumulate(x, o.grad.values());
    });
  }

  Var transpose_last2(Var x) {
    const Tensor<Real>& X = value(x);
    require(X.rank() == 2 || X.rank() == 3, "transpose_last2",
            "rank 2 or 3 required, got " + shape_str(X.shape()));
    const std::size_t batch = X.rank() == 3 ? X.extent(0) : 1;
    const std::size_t r = X.extent(X.rank() - 2), c = X.extent(X.rank() - 1);
    Shape os = X.shape();
    std::swap(os[os.size() - 2], os[os.size() - 1]);
    Tensor<Real> out(os);
    for (std::size_t b = 0; b < batch; ++b) {
      const Real* src = X.data() + b * r * c;
      Real* dst = out.data() + b * r * c;
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) dst[j * r + i] = src[i * c + j];
    }
    return record("transpose_last2", std::move(out), {x},
                  [this, x, batch, r, c](Node& o) {
                    Tensor<Real>& gx = grad_buf(x.id);
                    for (std::size_t b = 0; b < batch; ++b) {
                      const Real* src = o.grad.data() + b * r * c;
                      Real* dst = gx.data() + b * r * c;
                      for (std::size_t i = 0; i < r; ++i)
                        for (std::size_t j = 0; j < c; ++j)
                          dst[i * c + j] += src[j * r + i];
                    }
                  });
  }

  // Block slice on the last two axes: rows [r0,r1) x cols [c0,c1).
  Var slice_block(Var x, std::size_t r0, std::size_t r1, std::size_t c0,
                  std::size_t c1) {
    const Tensor<Real>& X = value(x);
    require(X.rank() == 2 || X.rank() == 3, "slice_block",
            "rank 2 or 3 required");
    const std::size_t batch = X.rank() == 3 ? X.extent(0) : 1;
    const std::size_t r = X.extent(X.rank() - 2), c = X.extent(X.rank() - 1);
    require(r0 < r1 && r1 <= r && c0 < c1 && c1 <= c, "slice_block",
            "block out of range for " + shape_str(X.shape()));
    const std::size_t orows = r1 - r0, ocols = c1 - c0;
    Shape os = X.rank() == 3 ? Shape{batch, orows, ocols} : Shape{orows, ocols};
    Tensor<Real> out(os);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < orows; ++i) {
        const Real* src = X.data() + (b * r + r0 + i) * c + c0;
        Real* dst = out.data() + (b * orows + i) * ocols;
        std::copy(src, src + ocols, dst);
      }
    return record("slice_block", std::move(out), {x},
                  [this, x, batch, r, c, r0, c0](Node& o) {
                    Tensor<Real>& gx = grad_buf(x.id);
                    const std::size_t orows = o.grad.extent(o.grad.rank() - 2);
                    const std::size_t ocols = o.grad.extent(o.grad.rank() - 1);
                    for (std::size_t b = 0; b < batch; ++b)
                      for (std::size_t i = 0; i < orows; ++i) {
                        const Real* src = o.grad.data() + (b * orows + i) * ocols;
                        Real* dst = gx.data() + (b * r + r0 + i) * c + c0;
                        for (std::size_t j = 0; j < ocols; ++j) dst[j] += src[j];
                      }
                  });
  }

  // Broadcast learnable aggregation-token rows over the batch and prepend
  // them to the per-sample channel token rows.
  // cats(n,d) + x(B,C,d) -> (B, n+C, d)
  Var prepend_tokens(Var cats, Var x) {
    const Tensor<Real>&T = value(cats), &X = value(x);
    require(T.rank() == 2 && X.rank() == 3 && T.extent(1) == X.extent(2),
            "prepend_tokens",
            shape_str(T.shape()) + " vs " + shape_str(X.shape()));
    const std::size_t n = T.extent(0), d = T.extent(1);
    const std::size_t batch = X.extent(0), chans = X.extent(1);
    Tensor<Real> out({batch, n + chans, d});
    for (std::size_t b = 0; b < batch; ++b) {
      std::copy(T.data(), T.data() + n * d, out.data() + b * (n + chans) * d);
      std::copy(X.data() + b * chans * d, X.data() + (b + 1) * chans * d,
                out.data() + (b * (n + chans) + n) * d);
    }
    return record("prepend_tokens", std::move(out), {cats, x},
                  [this, cats, x, n, d, batch, chans](Node& o) {
                    if (nodes_[cats.id].requires_grad) {
                      Tensor<Real>& gt = grad_buf(cats.id);
                      for (std::size_t b = 0; b < batch; ++b) {
                        const Real* src = o.grad.data() + b * (n + chans) * d;
                        for (std::size_t i = 0; i < n * d; ++i) gt[i] += src[i];
                      }
                    }
                    if (nodes_[x.id].requires_grad) {
                      Tensor<Real>& gx = grad_buf(x.id);
                      for (std::size_t b = 0; b < batch; ++b) {
                        const Real* src =
                            o.grad.data() + (b * (n + chans) + n) * d;
                        Real* dst = gx.data() + b * chans * d;
                        for (std::size_t i = 0; i < chans * d; ++i)
                          dst[i] += src[i];
                      }
                    }
                  });
  }

  // Interleave per-head row blocks into pair-major order:
  // inputs[h](B,n,C) -> out(B, n*H, C) with out[b, i*H + h] = inputs[h][b, i].
  Var stack_pairs(const std::vector<Var>& heads) {
    require(!heads.empty(), "stack_pairs", "no inputs");
    const Tensor<Real>& first = value(heads[0]);
    require(first.rank() == 3, "stack_pairs", "rank 3 inputs required");
    const std::size_t batch = first.extent(0), n = first.extent(1),
                      c = first.extent(2), H = heads.size();
    for (Var h : heads)
      require(value(h).same_shape(first), "stack_pairs",
              "head shapes disagree");
    Tensor<Real> out({batch, n * H, c});
    for (std::size_t h = 0; h < H; ++h) {
      const Tensor<Real>& in = value(heads[h]);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < n; ++i)
          std::copy(in.data() + (b * n + i) * c, in.data() + (b * n + i + 1) * c,
                    out.data() + (b * n * H + i * H + h) * c);
    }
    std::vector<Var> ins = heads;
    return record_multi("stack_pairs", std::move(out), ins,
                        [this, ins, batch, n, c, H](Node& o) {
                          for (std::size_t h = 0; h < H; ++h) {
                            if (!nodes_[ins[h].id].requires_grad) continue;
                            Tensor<Real>& g = grad_buf(ins[h].id);
                            for (std::size_t b = 0; b < batch; ++b)
                              for (std::size_t i = 0; i < n; ++i) {
                                const Real* src =
                                    o.grad.data() +
                                    (b * n * H + i * H + h) * c;
                                Real* dst = g.data() + (b * n + i) * c;
                                for (std::size_t j = 0; j < c; ++j)
                                  dst[j] += src[j];
                              }
                          }
                        });
  }

  // ------------------------------------------------------------------ matmul

  // (m,k)@(k,n), (B,m,k)@(B,k,n), or (B,m,k)@(k,n) with the right-hand side
  // broadcast over the batch.
  Var matmul(Var a, Var b) {
    const Tensor<Real>&A = value(a), &B = value(b);
    require(A.rank() >= 2 && A.rank() <= 3 && B.rank() >= 2 && B.rank() <= 3,
            "matmul", "rank 2 or 3 operands required");
    const std::size_t batch =
        A.rank() == 3 ? A.extent(0) : (B.rank() == 3 ? B.extent(0) : 1);
    const bool a_batched = A.rank() == 3, b_batched = B.rank() == 3;
    require(!(B.rank() == 3 && A.rank() == 2), "matmul",
            "batched rhs with 2-d lhs unsupported");
    if (a_batched && b_batched)
      require(A.extent(0) == B.extent(0), "matmul", "batch extents disagree");
    const std::size_t m = A.extent(A.rank() - 2), k = A.extent(A.rank() - 1);
    const std::size_t kb = B.extent(B.rank() - 2), n = B.extent(B.rank() - 1);
    require(k == kb, "matmul", "inner extents disagree: " +
                                   shape_str(A.shape()) + " @ " +
                                   shape_str(B.shape()));
    Shape os = a_batched || b_batched ? Shape{batch, m, n} : Shape{m, n};
    Tensor<Real> out(os);
    for (std::size_t bi = 0; bi < batch; ++bi)
      detail::gemm_acc(A.data() + (a_batched ? bi * m * k : 0),
                       B.data() + (b_batched ? bi * k * n : 0),
                       out.data() + bi * m * n, m, k, n);
    return record(
        "matmul", std::move(out), {a, b},
        [this, a, b, batch, m, k, n, a_batched, b_batched](Node& o) {
          const Tensor<Real>&A = nodes_[a.id].value, &B = nodes_[b.id].value;
          if (nodes_[a.id].requires_grad) {
            Tensor<Real>& ga = grad_buf(a.id);
            for (std::size_t bi = 0; bi < batch; ++bi)
              detail::gemm_abt(o.grad.data() + bi * m * n,
                               B.data() + (b_batched ? bi * k * n : 0),
                               ga.data() + (a_batched ? bi * m * k : 0), m, k,
                               n);
          }
          if (nodes_[b.id].requires_grad) {
            Tensor<Real>& gb = grad_buf(b.id);
            for (std::size_t bi = 0; bi < batch; ++bi)
              detail::gemm_atb(A.data() + (a_batched ? bi * m * k : 0),
                               o.grad.data() + bi * m * n,
                               gb.data() + (b_batched ? bi * k * n : 0), m, k,
                               n);
          }
        });
  }

  // --------------------------------------------------------------- nonlinear

  // Softmax over the last axis, optionally with an additive {0, -inf} mask
  // broadcast over leading batch axes. Masked positions come out exactly 0.
  // A row whose admissible set is empty is an error, never a NaN.
  Var softmax_lastdim(Var x, const Tensor<Real>* mask = nullptr) {
    const Tensor<Real>& X = value(x);
    require(X.rank() >= 1, "softmax_lastdim", "rank >= 1 required");
    const std::size_t n = X.extent(X.rank() - 1);
    const std::size_t rows = X.size() / n;
    if (mask) {
      require(mask->rank() == 2 && mask->extent(0) * mask->extent(1) ==
                                       (X.rank() >= 2
                                            ? X.extent(X.rank() - 2) * n
                                            : n),
              "softmax_lastdim", "mask must cover the trailing two axes");
    }
    const std::size_t mask_rows = mask ? mask->extent(0) : 0;
    Tensor<Real> out(X.shape());
    constexpr Real neg_inf = -std::numeric_limits<Real>::infinity();
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* src = X.data() + r * n;
      const Real* mrow = mask ? mask->data() + (r % mask_rows) * n : nullptr;
      Real mx = neg_inf;
      for (std::size_t j = 0; j < n; ++j) {
        const Real z = mrow ? src[j] + mrow[j] : src[j];
        mx = std::max(mx, z);
      }
      if (mx == neg_inf)
        throw DegenerateRowError(r, "softmax_lastdim: row " +
                                        std::to_string(r) +
                                        " has every position masked");
      Real denom = 0;
      Real* dst = out.data() + r * n;
      for (std::size_t j = 0; j < n; ++j) {
        const Real z = mrow ? src[j] + mrow[j] : src[j];
        dst[j] = std::exp(z - mx);
        denom += dst[j];
      }
      const Real inv = Real(1) / denom;
      for (std::size_t j = 0; j < n; ++j) dst[j] *= inv;
    }
    return record("softmax_lastdim", std::move(out), {x},
                  [this, x, rows, n](Node& o) {
                    Tensor<Real>& gx = grad_buf(x.id);
                    for (std::size_t r = 0; r < rows; ++r) {
                      const Real* y = o.value.data() + r * n;
                      const Real* dy = o.grad.data() + r * n;
                      Real dot = 0;
                      for (std::size_t j = 0; j < n; ++j) dot += y[j] * dy[j];
                      Real* dst = gx.data() + r * n;
                      for (std::size_t j = 0; j < n; ++j)
                        dst[j] += y[j] * (dy[j] - dot);
                    }
                  });
  }

  // y = x / rowsum(x) over the last axis. Rows must have positive sums;
  // a zero or negative sum is the degenerate-row error.
  Var normalize_lastdim(Var x) {
    const Tensor<Real>& X = value(x);
    require(X.rank() >= 1, "normalize_lastdim", "rank >= 1 required");
    const std::size_t n = X.extent(X.rank() - 1);
    const std::size_t rows = X.size() / n;
    Tensor<Real> out(X.shape());
    std::vector<Real> inv_sums(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* src = X.data() + r * n;
      Real s = 0;
      for (std::size_t j = 0; j < n; ++j) s += src[j];
      if (!(s > Real(0)))
        throw DegenerateRowError(
            r, "normalize_lastdim: row " + std::to_string(r) +
                   " has non-positive sum " + std::to_string(double(s)));
      const Real inv = Real(1) / s;
      inv_sums[r] = inv;
      Real* dst = out.data() + r * n;
      for (std::size_t j = 0; j < n; ++j) dst[j] = src[j] * inv;
    }
    return record("normalize_lastdim", std::move(out), {x},
                  [this, x, rows, n, inv_sums = std::move(inv_sums)](Node& o) {
                    Tensor<Real>& gx = grad_buf(x.id);
                    for (std::size_t r = 0; r < rows; ++r) {
                      const Real* y = o.value.data() + r * n;
                      const Real* dy = o.grad.data() + r * n;
                      Real dot = 0;
                      for (std::size_t j = 0; j < n; ++j) dot += y[j] * dy[j];
                      Real* dst = gx.data() + r * n;
                      const Real inv = inv_sums[r];
                      for (std::size_t j = 0; j < n; ++j)
                        dst[j] += (dy[j] - dot) * inv;
                    }
                  });
  }

  // x + I on the trailing square axes (batched).
  Var add_identity(Var x) {
    const Tensor<Real>& X = value(x);
    require(X.rank() == 2 || X.rank() == 3, "add_identity",
            "rank 2 or 3 required");
    const std::size_t t = X.extent(X.rank() - 1);
    require(X.extent(X.rank() - 2) == t, "add_identity",
            "trailing axes must be square");
    const std::size_t batch = X.rank() == 3 ? X.extent(0) : 1;
    Tensor<Real> out = X;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < t; ++i) out[(b * t + i) * t + i] += Real(1);
    return record("add_identity", std::move(out), {x}, [this, x](Node& o) {
      accumulate(x, o.grad.values());
    });
  }

  Var gelu(Var x) {
    const Tensor<Real>& X = value(x);
    Tensor<Real> out(X.shape());
    for (std::size_t i = 0; i < X.size(); ++i) {
      const Real v = X[i];
      out[i] = Real(0.5) * v *
               (Real(1) + Real(std::erf(double(v) * 0.7071067811865475244)));
    }
    return record("gelu", std::move(out), {x}, [this, x](Node& o) {
      const Tensor<Real>& X = nodes_[x.id].value;
      Tensor<Real>& gx = grad_buf(x.id);
      for (std::size_t i = 0; i < gx.size(); ++i) {
        const double v = double(X[i]);
        const double cdf = 0.5 * (1.0 + std::erf(v * 0.7071067811865475244));
        const double pdf = std::exp(-0.5 * v * v) * 0.3989422804014326779;
        gx[i] += o.grad[i] * Real(cdf + v * pdf);
      }
    });
  }

  // Inverted dropout: scales kept activations by 1/keep at train time, so
  // eval is the identity (and is short-circuited to the input node).
  Var dropout(Var x, Real p, bool train, Rng& rng) {
    require(p >= Real(0) && p < Real(1), "dropout", "p must be in [0,1)");
    if (!train || p == Real(0)) return x;
    const Tensor<Real>& X = value(x);
    const Real keep = Real(1) - p;
    const Real inv_keep = Real(1) / keep;
    std::vector<unsigned char> mask(X.size());
    Tensor<Real> out(X.shape());
    for (std::size_t i = 0; i < X.size(); ++i) {
      mask[i] = rng.uniform() < double(keep) ? 1 : 0;
      out[i] = mask[i] ? X[i] * inv_keep : Real(0);
    }
    return record("dropout", std::move(out), {x},
                  [this, x, inv_keep, mask = std::move(mask)](Node& o) {
                    Tensor<Real>& gx = grad_buf(x.id);
                    for (std::size_t i = 0; i < gx.size(); ++i)
                      if (mask[i]) gx[i] += o.grad[i] * inv_keep;
                  });
  }

  // ------------------------------------------------------------- batch norm

  // x is (rows, F) or (B, T, F); statistics pool over all leading axes.
  // Train mode requires a leading batch extent of at least 2 and updates
  // state's running statistics with its momentum (population variance).
  Var batchnorm(Var x, Var gamma, Var beta, BatchNormState<Real>& state,
                bool train) {
    const Tensor<Real>& X = value(x);
    require(X.rank() == 2 || X.rank() == 3, "batchnorm", "rank 2 or 3 input");
    const std::size_t f = X.extent(X.rank() - 1);
    const std::size_t rows = X.size() / f;
    require(value(gamma).shape() == Shape{f} && value(beta).shape() == Shape{f},
            "batchnorm", "gamma/beta must have shape (" + std::to_string(f) +
                             ")");
    require(state.features() == f, "batchnorm",
            "state sized for " + std::to_string(state.features()) +
                " features, input has " + std::to_string(f));
    if (train && X.extent(0) < 2)
      throw ArgumentError("batchnorm: train mode needs batch >= 2, got " +
                          std::to_string(X.extent(0)));

    std::vector<Real> mean(f, Real(0)), inv_std(f, Real(0));
    if (train) {
      std::vector<Real> var(f, Real(0));
      for (std::size_t r = 0; r < rows; ++r) {
        const Real* row = X.data() + r * f;
        for (std::size_t j = 0; j < f; ++j) mean[j] += row[j];
      }
      const Real inv_rows = Real(1) / static_cast<Real>(rows);
      for (std::size_t j = 0; j < f; ++j) mean[j] *= inv_rows;
      for (std::size_t r = 0; r < rows; ++r) {
        const Real* row = X.data() + r * f;
        for (std::size_t j = 0; j < f; ++j) {
          const Real d = row[j] - mean[j];
          var[j] += d * d;
        }
      }
      for (std::size_t j = 0; j < f; ++j) var[j] *= inv_rows;
      for (std::size_t j = 0; j < f; ++j) {
        state.running_mean[j] = (Real(1) - state.momentum) *
                                    state.running_mean[j] +
                                state.momentum * mean[j];
        state.running_var[j] =
            (Real(1) - state.momentum) * state.running_var[j] +
            state.momentum * var[j];
        inv_std[j] = Real(1) / std::sqrt(var[j] + state.epsilon);
      }
    } else {
      for (std::size_t j = 0; j < f; ++j) {
        mean[j] = state.running_mean[j];
        inv_std[j] = Real(1) / std::sqrt(state.running_var[j] + state.epsilon);
      }
    }

    const Tensor<Real>&G = value(gamma), &Bt = value(beta);
    Tensor<Real> xhat(X.shape());
    Tensor<Real> out(X.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* row = X.data() + r * f;
      Real* xh = xhat.data() + r * f;
      Real* dst = out.data() + r * f;
      for (std::size_t j = 0; j < f; ++j) {
        xh[j] = (row[j] - mean[j]) * inv_std[j];
        dst[j] = G[j] * xh[j] + Bt[j];
      }
    }
    return record(
        "batchnorm", std::move(out), {x, gamma, beta},
        [this, x, gamma, beta, rows, f, train, xhat = std::move(xhat),
         inv_std = std::move(inv_std)](Node& o) {
          const Tensor<Real>& G = nodes_[gamma.id].value;
          if (nodes_[gamma.id].requires_grad) {
            Tensor<Real>& gg = grad_buf(gamma.id);
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t j = 0; j < f; ++j)
                gg[j] += o.grad[r * f + j] * xhat[r * f + j];
          }
          if (nodes_[beta.id].requires_grad) {
            Tensor<Real>& gb = grad_buf(beta.id);
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t j = 0; j < f; ++j) gb[j] += o.grad[r * f + j];
          }
          if (!nodes_[x.id].requires_grad) return;
          Tensor<Real>& gx = grad_buf(x.id);
          if (!train) {
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t j = 0; j < f; ++j)
                gx[r * f + j] += o.grad[r * f + j] * G[j] * inv_std[j];
            return;
          }
          std::vector<Real> sum_dy(f, Real(0)), sum_dy_xhat(f, Real(0));
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < f; ++j) {
              const Real dyg = o.grad[r * f + j] * G[j];
              sum_dy[j] += dyg;
              sum_dy_xhat[j] += dyg * xhat[r * f + j];
            }
          const Real inv_rows = Real(1) / static_cast<Real>(rows);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < f; ++j) {
              const Real dyg = o.grad[r * f + j] * G[j];
              gx[r * f + j] += inv_std[j] *
                               (dyg - sum_dy[j] * inv_rows -
                                xhat[r * f + j] * sum_dy_xhat[j] * inv_rows);
            }
        });
  }

  // ------------------------------------------------------------------- loss

  // Mean over the batch of -log softmax(logits)[label].
  Var cross_entropy(Var logits, const std::vector<int>& labels) {
    const Tensor<Real>& Z = value(logits);
    require(Z.rank() == 2, "cross_entropy", "logits must be (batch, classes)");
    const std::size_t batch = Z.extent(0), classes = Z.extent(1);
    require(labels.size() == batch, "cross_entropy",
            "label count does not match batch");
    for (int y : labels)
      if (y < 0 || static_cast<std::size_t>(y) >= classes)
        throw ArgumentError("cross_entropy: label " + std::to_string(y) +
                            " outside [0, " + std::to_string(classes) + ")");
    Tensor<Real> probs({batch, classes});
    Real loss = 0;
    for (std::size_t b = 0; b < batch; ++b) {
      const Real* row = Z.data() + b * classes;
      Real mx = row[0];
      for (std::size_t j = 1; j < classes; ++j) mx = std::max(mx, row[j]);
      Real denom = 0;
      Real* p = probs.data() + b * classes;
      for (std::size_t j = 0; j < classes; ++j) {
        p[j] = std::exp(row[j] - mx);
        denom += p[j];
      }
      const Real inv = Real(1) / denom;
      for (std::size_t j = 0; j < classes; ++j) p[j] *= inv;
      loss -= std::log(p[labels[b]]);
    }
    loss /= static_cast<Real>(batch);
    return record("cross_entropy", Tensor<Real>::scalar(loss), {logits},
                  [this, logits, labels, batch, classes,
                   probs = std::move(probs)](Node& o) {
                    Tensor<Real>& gz = grad_buf(logits.id);
                    const Real g = o.grad[0] / static_cast<Real>(batch);
                    for (std::size_t b = 0; b < batch; ++b) {
                      const Real* p = probs.data() + b * classes;
                      Real* dst = gz.data() + b * classes;
                      for (std::size_t j = 0; j < classes; ++j)
                        dst[j] += g * p[j];
                      dst[labels[b]] -= g;
                    }
                  });
  }

  // Mean squared error over rows selected by mask: pred/target are (B,C,d),
  // mask is (B,C) with 1 for rows that count. Masked-out rows contribute
  // exactly zero to value and gradient.
  Var mse_masked(Var pred, const Tensor<Real>& target,
                 const Tensor<Real>& mask) {
    const Tensor<Real>& P = value(pred);
    require(P.rank() == 3 && P.same_shape(target), "mse_masked",
            "pred/target must be equal (B,C,d) tensors");
    const std::size_t batch = P.extent(0), chans = P.extent(1),
                      d = P.extent(2);
    require(mask.shape() == Shape({batch, chans}), "mse_masked",
            "mask must be (B,C)");
    Real active = 0;
    for (std::size_t i = 0; i < mask.size(); ++i) active += mask[i];
    if (!(active > Real(0)))
      throw ArgumentError("mse_masked: mask selects no rows");
    const Real denom = Real(1) / (active * static_cast<Real>(d));
    Real loss = 0;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t c = 0; c < chans; ++c) {
        if (mask[b * chans + c] == Real(0)) continue;
        const Real* p = P.data() + (b * chans + c) * d;
        const Real* t = target.data() + (b * chans + c) * d;
        for (std::size_t j = 0; j < d; ++j) {
          const Real e = p[j] - t[j];
          loss += e * e;
        }
      }
    loss *= denom;
    return record("mse_masked", Tensor<Real>::scalar(loss), {pred},
                  [this, pred, target, mask, batch, chans, d, denom](Node& o) {
                    const Tensor<Real>& P = nodes_[pred.id].value;
                    Tensor<Real>& gp = grad_buf(pred.id);
                    const Real g = Real(2) * o.grad[0] * denom;
                    for (std::size_t b = 0; b < batch; ++b)
                      for (std::size_t c = 0; c < chans; ++c) {
                        if (mask[b * chans + c] == Real(0)) continue;
                        const Real* p = P.data() + (b * chans + c) * d;
                        const Real* t = target.data() + (b * chans + c) * d;
                        Real* dst = gp.data() + (b * chans + c) * d;
                        for (std::size_t j = 0; j < d; ++j)
                          dst[j] += g * (p[j] - t[j]);
                      }
                  });
  }

  // ---------------------------------------------------------- classifier ops

  // Valid correlation of every channel row with every kernel:
  // x(B,N,L), K(F,k) -> (B,F,N,L-k+1).
  Var temporal_conv(Var x, Var kernels) {
    const Tensor<Real>&X = value(x), &K = value(kernels);
    require(X.rank() == 3 && K.rank() == 2, "temporal_conv",
            "x must be (B,N,L), kernels (F,k)");
    const std::size_t batch = X.extent(0), chans = X.extent(1),
                      len = X.extent(2);
    const std::size_t filters = K.extent(0), k = K.extent(1);
    require(k <= len, "temporal_conv", "kernel longer than signal");
    const std::size_t lp = len - k + 1;
    Tensor<Real> out({batch, filters, chans, lp});
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t f = 0; f < filters; ++f)
        for (std::size_t n = 0; n < chans; ++n) {
          const Real* src = X.data() + (b * chans + n) * len;
          Real* dst = out.data() + ((b * filters + f) * chans + n) * lp;
          for (std::size_t j = 0; j < k; ++j) {
            const Real kv = K[f * k + j];
            const Real* s = src + j;
            for (std::size_t t = 0; t < lp; ++t) dst[t] += kv * s[t];
          }
        }
    return record(
        "temporal_conv", std::move(out), {x, kernels},
        [this, x, kernels, batch, chans, len, filters, k, lp](Node& o) {
          const Tensor<Real>&X = nodes_[x.id].value,
              &K = nodes_[kernels.id].value;
          if (nodes_[kernels.id].requires_grad) {
            Tensor<Real>& gk = grad_buf(kernels.id);
            for (std::size_t b = 0; b < batch; ++b)
              for (std::size_t f = 0; f < filters; ++f)
                for (std::size_t n = 0; n < chans; ++n) {
                  const Real* go =
                      o.grad.data() + ((b * filters + f) * chans + n) * lp;
                  const Real* src = X.data() + (b * chans + n) * len;
                  for (std::size_t j = 0; j < k; ++j) {
                    Real acc = 0;
                    const Real* s = src + j;
                    for (std::size_t t = 0; t < lp; ++t) acc += go[t] * s[t];
                    gk[f * k + j] += acc;
                  }
                }
          }
          if (nodes_[x.id].requires_grad) {
            Tensor<Real>& gx = grad_buf(x.id);
            for (std::size_t b = 0; b < batch; ++b)
              for (std::size_t f = 0; f < filters; ++f)
                for (std::size_t n = 0; n < chans; ++n) {
                  const Real* go =
                      o.grad.data() + ((b * filters + f) * chans + n) * lp;
                  Real* dst = gx.data() + (b * chans + n) * len;
                  for (std::size_t j = 0; j < k; ++j) {
                    const Real kv = K[f * k + j];
                    Real* d = dst + j;
                    for (std::size_t t = 0; t < lp; ++t) d[t] += kv * go[t];
                  }
                }
          }
        });
  }

  // Per-filter linear mix across channels:
  // y(B,F,N,T), S(F,N) -> out(B,F,T) with out[b,f] = sum_n S[f,n] * y[b,f,n].
  Var spatial_mix(Var y, Var weights) {
    const Tensor<Real>&Y = value(y), &W = value(weights);
    require(Y.rank() == 4 && W.rank() == 2 && W.extent(0) == Y.extent(1) &&
                W.extent(1) == Y.extent(2),
            "spatial_mix", shape_str(Y.shape()) + " vs " +
                               shape_str(W.shape()));
    const std::size_t batch = Y.extent(0), filters = Y.extent(1),
                      chans = Y.extent(2), t = Y.extent(3);
    Tensor<Real> out({batch, filters, t});
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t f = 0; f < filters; ++f) {
        Real* dst = out.data() + (b * filters + f) * t;
        for (std::size_t n = 0; n < chans; ++n) {
          const Real w = W[f * chans + n];
          const Real* src = Y.data() + ((b * filters + f) * chans + n) * t;
          for (std::size_t s = 0; s < t; ++s) dst[s] += w * src[s];
        }
      }
    return record(
        "spatial_mix", std::move(out), {y, weights},
        [this, y, weights, batch, filters, chans, t](Node& o) {
          const Tensor<Real>&Y = nodes_[y.id].value,
              &W = nodes_[weights.id].value;
          if (nodes_[weights.id].requires_grad) {
            Tensor<Real>& gw = grad_buf(weights.id);
            for (std::size_t b = 0; b < batch; ++b)
              for (std::size_t f = 0; f < filters; ++f) {
                const Real* go = o.grad.data() + (b * filters + f) * t;
                for (std::size_t n = 0; n < chans; ++n) {
                  const Real* src =
                      Y.data() + ((b * filters + f) * chans + n) * t;
                  Real acc = 0;
                  for (std::size_t s = 0; s < t; ++s) acc += go[s] * src[s];
                  gw[f * chans + n] += acc;
                }
              }
          }
          if (nodes_[y.id].requires_grad) {
            Tensor<Real>& gy = grad_buf(y.id);
            for (std::size_t b = 0; b < batch; ++b)
              for (std::size_t f = 0; f < filters; ++f) {
                const Real* go = o.grad.data() + (b * filters + f) * t;
                for (std::size_t n = 0; n < chans; ++n) {
                  const Real w = W[f * chans + n];
                  Real* dst = gy.data() + ((b * filters + f) * chans + n) * t;
                  for (std::size_t s = 0; s < t; ++s) dst[s] += w * go[s];
                }
              }
          }
        });
  }

  // Non-overlapping mean pooling over the last axis; the factor must divide.
  Var avgpool_lastdim(Var x, std::size_t factor) {
    const Tensor<Real>& X = value(x);
    require(X.rank() >= 1 && factor >= 1, "avgpool_lastdim", "bad arguments");
    const std::size_t t = X.extent(X.rank() - 1);
    require(t % factor == 0, "avgpool_lastdim",
            "pool factor " + std::to_string(factor) + " does not divide " +
                std::to_string(t));
    const std::size_t to = t / factor;
    const std::size_t rows = X.size() / t;
    Shape os = X.shape();
    os.back() = to;
    Tensor<Real> out(os);
    const Real inv = Real(1) / static_cast<Real>(factor);
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* src = X.data() + r * t;
      Real* dst = out.data() + r * to;
      for (std::size_t j = 0; j < to; ++j) {
        Real acc = 0;
        for (std::size_t s = 0; s < factor; ++s) acc += src[j * factor + s];
        dst[j] = acc * inv;
      }
    }
    return record("avgpool_lastdim", std::move(out), {x},
                  [this, x, rows, t, to, factor, inv](Node& o) {
                    Tensor<Real>& gx = grad_buf(x.id);
                    for (std::size_t r = 0; r < rows; ++r) {
                      const Real* go = o.grad.data() + r * to;
                      Real* dst = gx.data() + r * t;
                      for (std::size_t j = 0; j < to; ++j) {
                        const Real g = go[j] * inv;
                        for (std::size_t s = 0; s < factor; ++s)
                          dst[j * factor + s] += g;
                      }
                    }
                  });
  }

private:
  struct Node {
    Tensor<Real> value;
    Tensor<Real> grad;
    bool requires_grad;
    std::function<void(Node&)> backward;
    const char* op;
  };

  std::vector<Node> nodes_;
  bool check_finite_;
  bool consumed_ = false;

  const Node& node(Var v) const { return nodes_.at(v.id); }
  Node& node(Var v) { return nodes_.at(v.id); }

  static void require(bool cond, const char* op, const std::string& what) {
    if (!cond) throw ShapeError(std::string(op) + ": " + what);
  }

  void check_values(const char* op, const Tensor<Real>& t) const {
    if (check_finite_ && !t.all_finite())
      throw NumericError(std::string(op) + ": non-finite value produced");
  }

  Tensor<Real>& grad_buf(std::uint32_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor<Real>::zeros(n.value.shape());
    return n.grad;
  }

  void accumulate(Var v, const std::vector<Real>& g) {
    if (!nodes_[v.id].requires_grad) return;
    Tensor<Real>& buf = grad_buf(v.id);
    for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
  }

  Var record(const char* op, Tensor<Real> out, std::initializer_list<Var> ins,
             std::function<void(Node&)> bwd) {
    return record_multi(op, std::move(out), std::vector<Var>(ins),
                        std::move(bwd));
  }

  Var record_multi(const char* op, Tensor<Real> out,
                   const std::vector<Var>& ins,
                   std::function<void(Node&)> bwd) {
    check_values(op, out);
    bool needs = false;
    for (Var v : ins) needs = needs || nodes_[v.id].requires_grad;
    nodes_.push_back(Node{std::move(out), {}, needs,
                          needs ? std::move(bwd) : nullptr, op});
    Var v{static_cast<std::uint32_t>(nodes_.size() - 1)};
    if (needs) {
      // bind the closure to its own node
      Node& n = nodes_.back();
      auto fn = std::move(n.backward);
      n.backward = [this, id = v.id, fn = std::move(fn)](Node&) mutable {
        fn(nodes_[id]);
      };
    }
    return v;
  }
};

// Max relative error between the analytic gradient of f at x and a central
// finite difference, using max(1, |analytic| + |numeric|) in the denominator.
// f builds a scalar loss from a leaf Var on a caller-provided Graph.
template <typename Real, typename F>
Real gradient_check(F&& f, const Tensor<Real>& x, Real eps) {
  if (!(eps >= Real(1e-6) && eps <= Real(1e-3)))
    throw ArgumentError("gradient_check: eps must lie in [1e-6, 1e-3]");
  Tensor<Real> analytic;
  {
    Graph<Real> g;
    Var vx = g.leaf(x, true);
    Var loss = f(g, vx);
    g.backward(loss);
    analytic = g.grad(vx);
  }
  auto eval = [&](const Tensor<Real>& p) {
    Graph<Real> g;
    Var vx = g.leaf(p, false);
    Var loss = f(g, vx);
    return g.value(loss)[0];
  };
  Real worst = 0;
  Tensor<Real> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const Real orig = probe[i];
    probe[i] = orig + eps;
    const Real fp = eval(probe);
    probe[i] = orig - eps;
    const Real fm = eval(probe);
    probe[i] = orig;
    const Real numeric = (fp - fm) / (Real(2) * eps);
    const Real a = analytic[i];
    const Real err = std::abs(a - numeric) /
                     std::max(Real(1), std::abs(a) + std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace chansel
