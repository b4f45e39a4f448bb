#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "scalevec/kernels.hpp"
#include "scalevec/tensor.hpp"

// Reverse-mode autodiff. A Tape records one forward pass as a flat list of
// nodes in construction order, which is a topological order by construction;
// backward() walks it in exact reverse. Gradients of a value consumed k times
// accumulate as k ordered += contributions, so a run is bit-reproducible.
//
// Ops that make discrete choices (max pooling, cross-scale argmax, global
// magnitude pooling) append their winner indices to argmax_signature; the
// gradient checker uses it to detect decision flips under perturbation.

namespace scalevec {

template <class Real>
class Tape;

template <class Real>
struct Var {
  Tape<Real>* tape = nullptr;
  int id = -1;
  const Tensor<Real>& value() const { return tape->value(id); }
};

template <class Real>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  struct Node {
    Tensor<Real> value;
    BackwardFn backward;
  };

  bool check_values = true;  // scan every op output for NaN/Inf

  Var<Real> leaf(Tensor<Real> v) {
    nodes_.push_back(Node{std::move(v), nullptr});
    grads_.emplace_back();
    return {this, int(nodes_.size()) - 1};
  }

  Var<Real> push(Tensor<Real> v, BackwardFn fn, const char* what) {
    if (check_values) check_finite_fast(v, what);
    nodes_.push_back(Node{std::move(v), std::move(fn)});
    grads_.emplace_back();
    return {this, int(nodes_.size()) - 1};
  }

  const Tensor<Real>& value(int id) const { return nodes_[size_t(id)].value; }

  bool has_grad(int id) const { return !grads_[size_t(id)].empty(); }

  // Gradient buffer, zero-initialized on first touch.
  Tensor<Real>& grad_buf(int id) {
    auto& g = grads_[size_t(id)];
    if (g.empty()) g = Tensor<Real>(nodes_[size_t(id)].value.shape());
    return g;
  }

  // Gradient after backward(); zeros for nodes not on the path to the loss.
  Tensor<Real> grad_or_zero(int id) const {
    const auto& g = grads_[size_t(id)];
    if (g.empty()) return Tensor<Real>(nodes_[size_t(id)].value.shape());
    return g;
  }

  void backward(Var<Real> loss) {
    if (loss.tape != this) throw UsageError("backward: loss belongs to another tape");
    if (nodes_[size_t(loss.id)].value.numel() != 1)
      throw UsageError("backward: loss must be scalar, got " +
                       nodes_[size_t(loss.id)].value.shape_str());
    grad_buf(loss.id)[0] = Real(1);
    for (int id = loss.id; id >= 0; --id) {
      if (grads_[size_t(id)].empty()) continue;
      if (nodes_[size_t(id)].backward) nodes_[size_t(id)].backward(*this, id);
    }
  }

  std::vector<int32_t> argmax_signature;

  size_t size() const { return nodes_.size(); }

 private:
  static void check_finite_fast(const Tensor<Real>& t, const char* what) {
    // x*0 == 0 fails exactly for NaN and +-Inf; vectorizes without fast-math.
    Real bad = 0;
    const Real* p = t.data();
    const int64_t n = t.numel();
    for (int64_t i = 0; i < n; ++i) bad += p[i] * Real(0);
    if (!(bad == Real(0))) throw NumericError(std::string("non-finite value in ") + what);
  }

  std::vector<Node> nodes_;
  std::vector<Tensor<Real>> grads_;
};

// ---------------------------------------------------------------------------
// Tape operations
// ---------------------------------------------------------------------------

template <class Real>
Var<Real> conv2d(Var<Real> x, Var<Real> w, Var<Real> bias, int pad) {
  Tape<Real>& t = *x.tape;
  Tensor<Real> y = kernels::conv2d_forward(x.value(), w.value(), bias.id >= 0 ? &bias.value() : nullptr, pad);
  const int xid = x.id, wid = w.id, bid = bias.id;
  return t.push(std::move(y),
                [xid, wid, bid, pad](Tape<Real>& t, int self) {
                  const Tensor<Real>& g = t.grad_buf(self);
                  Tensor<Real>* db = bid >= 0 ? &t.grad_buf(bid) : nullptr;
                  kernels::conv2d_backward(t.value(xid), t.value(wid), pad, g,
                                           &t.grad_buf(xid), &t.grad_buf(wid), db);
                },
                "conv2d");
}

template <class Real>
Var<Real> bilinear_resize(Var<Real> x, int out_h, int out_w) {
  Tape<Real>& t = *x.tape;
  const int in_h = x.value().dim(2), in_w = x.value().dim(3);
  Tensor<Real> y = kernels::bilinear_resize_forward(x.value(), out_h, out_w);
  const int xid = x.id;
  return t.push(std::move(y),
                [xid, in_h, in_w](Tape<Real>& t, int self) {
                  kernels::bilinear_resize_backward(t.grad_buf(self), in_h, in_w,
                                                    &t.grad_buf(xid));
                },
                "bilinear_resize");
}

template <class Real>
Var<Real> relu(Var<Real> x) {
  Tape<Real>& t = *x.tape;
  Tensor<Real> y(x.value().shape());
  const Real* xp = x.value().data();
  Real* yp = y.data();
  for (int64_t i = 0; i < y.numel(); ++i) yp[i] = xp[i] > Real(0) ? xp[i] : Real(0);
  const int xid = x.id;
  return t.push(std::move(y),
                [xid](Tape<Real>& t, int self) {
                  const Tensor<Real>& g = t.grad_buf(self);
                  const Tensor<Real>& xv = t.value(xid);
                  Tensor<Real>& dx = t.grad_buf(xid);
                  for (int64_t i = 0; i < g.numel(); ++i)
                    if (xv[i] > Real(0)) dx[i] += g[i];
                },
                "relu");
}

struct MaxPoolOut;  // forward decl not needed; use per-instantiation structs below

template <class Real>
struct PoolResult {
  Var<Real> values;
  std::shared_ptr<IndexMap> argmax;
};

template <class Real>
PoolResult<Real> maxpool2x2(Var<Real> x) {
  Tape<Real>& t = *x.tape;
  Tensor<Real> out;
  auto idx = std::make_shared<IndexMap>();
  kernels::maxpool2x2_forward(x.value(), &out, idx.get());
  t.argmax_signature.insert(t.argmax_signature.end(), idx->data(), idx->data() + idx->numel());
  const int xid = x.id;
  Var<Real> v = t.push(std::move(out),
                       [xid, idx](Tape<Real>& t, int self) {
                         kernels::maxpool2x2_backward(t.grad_buf(self), *idx, &t.grad_buf(xid));
                       },
                       "maxpool2x2");
  return {v, idx};
}

// Per-pixel max over a stack of same-shaped tensors; first branch attaining
// the max wins (branch order = caller's order). Gradient flows to the winning
// branch only.
template <class Real>
PoolResult<Real> stack_max(const std::vector<Var<Real>>& branches) {
  if (branches.empty()) throw UsageError("stack_max: no branches");
  Tape<Real>& t = *branches[0].tape;
  const Tensor<Real>& first = branches[0].value();
  Tensor<Real> out = first;
  auto idx = std::make_shared<IndexMap>(first.shape());
  for (size_t s = 1; s < branches.size(); ++s) {
    const Tensor<Real>& bv = branches[s].value();
    if (!bv.same_shape(first)) throw ConfigError("stack_max: branch shape mismatch");
    Real* op = out.data();
    int32_t* ip = idx->data();
    const Real* bp = bv.data();
    for (int64_t i = 0; i < out.numel(); ++i)
      if (bp[i] > op[i]) { op[i] = bp[i]; ip[i] = int32_t(s); }
  }
  t.argmax_signature.insert(t.argmax_signature.end(), idx->data(), idx->data() + idx->numel());
  std::vector<int> pids(branches.size());
  for (size_t s = 0; s < branches.size(); ++s) pids[s] = branches[s].id;
  Var<Real> v = t.push(std::move(out),
                       [pids, idx](Tape<Real>& t, int self) {
                         const Tensor<Real>& g = t.grad_buf(self);
                         std::vector<Tensor<Real>*> dbs(pids.size());
                         for (size_t s = 0; s < pids.size(); ++s) dbs[s] = &t.grad_buf(pids[s]);
                         const int32_t* ip = idx->data();
                         for (int64_t i = 0; i < g.numel(); ++i) (*dbs[size_t(ip[i])])[i] += g[i];
                       },
                       "stack_max");
  return {v, idx};
}

// Elementwise multiply by a constant tensor (no gradient into the constant).
template <class Real>
Var<Real> mul_const(Var<Real> x, std::shared_ptr<const Tensor<Real>> c) {
  Tape<Real>& t = *x.tape;
  if (!x.value().same_shape(*c)) throw ConfigError("mul_const: shape mismatch");
  Tensor<Real> y(x.value().shape());
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = x.value()[i] * (*c)[i];
  const int xid = x.id;
  return t.push(std::move(y),
                [xid, c](Tape<Real>& t, int self) {
                  const Tensor<Real>& g = t.grad_buf(self);
                  Tensor<Real>& dx = t.grad_buf(xid);
                  for (int64_t i = 0; i < g.numel(); ++i) dx[i] += g[i] * (*c)[i];
                },
                "mul_const");
}

// alpha*a + beta*b with scalar coefficients.
template <class Real>
Var<Real> lincomb(Var<Real> a, Var<Real> b, Real alpha, Real beta) {
  Tape<Real>& t = *a.tape;
  if (!a.value().same_shape(b.value())) throw ConfigError("lincomb: shape mismatch");
  Tensor<Real> y(a.value().shape());
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = alpha * a.value()[i] + beta * b.value()[i];
  const int aid = a.id, bid = b.id;
  return t.push(std::move(y),
                [aid, bid, alpha, beta](Tape<Real>& t, int self) {
                  const Tensor<Real>& g = t.grad_buf(self);
                  Tensor<Real>& da = t.grad_buf(aid);
                  Tensor<Real>& db = t.grad_buf(bid);
                  for (int64_t i = 0; i < g.numel(); ++i) {
                    da[i] += alpha * g[i];
                    db[i] += beta * g[i];
                  }
                },
                "lincomb");
}

template <class Real>
Var<Real> add(Var<Real> a, Var<Real> b) {
  return lincomb(a, b, Real(1), Real(1));
}

template <class Real>
Var<Real> scale(Var<Real> a, Real alpha) {
  Tape<Real>& t = *a.tape;
  Tensor<Real> y(a.value().shape());
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = alpha * a.value()[i];
  const int aid = a.id;
  return t.push(std::move(y),
                [aid, alpha](Tape<Real>& t, int self) {
                  const Tensor<Real>& g = t.grad_buf(self);
                  Tensor<Real>& da = t.grad_buf(aid);
                  for (int64_t i = 0; i < g.numel(); ++i) da[i] += alpha * g[i];
                },
                "scale");
}

template <class Real>
Var<Real> mul(Var<Real> a, Var<Real> b) {
  Tape<Real>& t = *a.tape;
  if (!a.value().same_shape(b.value())) throw ConfigError("mul: shape mismatch");
  Tensor<Real> y(a.value().shape());
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = a.value()[i] * b.value()[i];
  const int aid = a.id, bid = b.id;
  return t.push(std::move(y),
                [aid, bid](Tape<Real>& t, int self) {
                  const Tensor<Real>& g = t.grad_buf(self);
                  Tensor<Real>& da = t.grad_buf(aid);
                  Tensor<Real>& db = t.grad_buf(bid);
                  const Tensor<Real>& av = t.value(aid);
                  const Tensor<Real>& bv = t.value(bid);
                  for (int64_t i = 0; i < g.numel(); ++i) {
                    da[i] += g[i] * bv[i];
                    db[i] += g[i] * av[i];
                  }
                },
                "mul");
}

template <class Real>
Var<Real> sum_all(Var<Real> a) {
  Tape<Real>& t = *a.tape;
  Real acc = 0;
  for (int64_t i = 0; i < a.value().numel(); ++i) acc += a.value()[i];
  Tensor<Real> y({1});
  y[0] = acc;
  const int aid = a.id;
  return t.push(std::move(y),
                [aid](Tape<Real>& t, int self) {
                  const Real g = t.grad_buf(self)[0];
                  Tensor<Real>& da = t.grad_buf(aid);
                  for (int64_t i = 0; i < da.numel(); ++i) da[i] += g;
                },
                "sum_all");
}

template <class Real>
Var<Real> reshape(Var<Real> x, std::vector<int> shape) {
  Tape<Real>& t = *x.tape;
  Tensor<Real> y = x.value().reshaped(shape);
  const int xid = x.id;
  return t.push(std::move(y),
                [xid](Tape<Real>& t, int self) {
                  const Tensor<Real>& g = t.grad_buf(self);
                  Tensor<Real>& dx = t.grad_buf(xid);
                  for (int64_t i = 0; i < g.numel(); ++i) dx[i] += g[i];
                },
                "reshape");
}

// Flatten B x C x H x W -> B x (C*H*W)
template <class Real>
Var<Real> flatten(Var<Real> x) {
  const auto& s = x.value().shape();
  int64_t n = 1;
  for (size_t i = 1; i < s.size(); ++i) n *= s[i];
  return reshape(x, {s[0], int(n)});
}

template <class Real>
Var<Real> linear(Var<Real> x, Var<Real> w, Var<Real> bias) {
  Tape<Real>& t = *x.tape;
  Tensor<Real> y = kernels::linear_forward(x.value(), w.value(), bias.id >= 0 ? &bias.value() : nullptr);
  const int xid = x.id, wid = w.id, bid = bias.id;
  return t.push(std::move(y),
                [xid, wid, bid](Tape<Real>& t, int self) {
                  const Tensor<Real>& g = t.grad_buf(self);
                  Tensor<Real>* db = bid >= 0 ? &t.grad_buf(bid) : nullptr;
                  kernels::linear_backward(t.value(xid), t.value(wid), g, &t.grad_buf(xid),
                                           &t.grad_buf(wid), db);
                },
                "linear");
}

// Linear layer over a constant (non-differentiated) input; gradients reach the
// weights and bias only.
template <class Real>
Var<Real> linear_const_input(Tape<Real>& t, std::shared_ptr<const Tensor<Real>> x,
                             Var<Real> w, Var<Real> bias) {
  Tensor<Real> y = kernels::linear_forward(*x, w.value(), bias.id >= 0 ? &bias.value() : nullptr);
  const int wid = w.id, bid = bias.id;
  return t.push(std::move(y),
                [x, wid, bid](Tape<Real>& t, int self) {
                  const Tensor<Real>& g = t.grad_buf(self);
                  Tensor<Real>* db = bid >= 0 ? &t.grad_buf(bid) : nullptr;
                  kernels::linear_backward(*x, t.value(wid), g, nullptr, &t.grad_buf(wid), db);
                },
                "linear_const_input");
}

// Mean cross-entropy over the batch, computed via max-shifted log-sum-exp.
template <class Real>
Var<Real> softmax_cross_entropy(Var<Real> logits, std::vector<int> labels) {
  Tape<Real>& t = *logits.tape;
  const Tensor<Real>& z = logits.value();
  if (z.ndim() != 2) throw ConfigError("softmax_cross_entropy: logits must be B x K");
  const int B = z.dim(0), K = z.dim(1);
  if (int(labels.size()) != B) throw UsageError("softmax_cross_entropy: labels size mismatch");
  for (int y : labels)
    if (y < 0 || y >= K) throw UsageError("softmax_cross_entropy: label out of range");

  auto probs = std::make_shared<Tensor<Real>>(std::vector<int>{B, K});
  double loss = 0;
  for (int b = 0; b < B; ++b) {
    Real zmax = z.at(b, 0);
    for (int k = 1; k < K; ++k) zmax = std::max(zmax, z.at(b, k));
    Real sum = 0;
    for (int k = 0; k < K; ++k) sum += std::exp(z.at(b, k) - zmax);
    const Real logsum = std::log(sum) + zmax;
    for (int k = 0; k < K; ++k) probs->at(b, k) = std::exp(z.at(b, k) - logsum);
    loss += double(logsum - z.at(b, labels[size_t(b)]));
  }
  Tensor<Real> out({1});
  out[0] = Real(loss / B);
  const int zid = logits.id;
  return t.push(std::move(out),
                [zid, probs, labels, B, K](Tape<Real>& t, int self) {
                  const Real g = t.grad_buf(self)[0];
                  Tensor<Real>& dz = t.grad_buf(zid);
                  for (int b = 0; b < B; ++b)
                    for (int k = 0; k < K; ++k) {
                      Real p = probs->at(b, k) - (k == labels[size_t(b)] ? Real(1) : Real(0));
                      dz.at(b, k) += g * p / Real(B);
                    }
                },
                "softmax_cross_entropy");
}

// Mean squared error against constant targets; pred is B or B x 1.
template <class Real>
Var<Real> mse_loss(Var<Real> pred, std::vector<Real> targets) {
  Tape<Real>& t = *pred.tape;
  const Tensor<Real>& p = pred.value();
  const int B = p.dim(0);
  if (p.numel() != B) throw ConfigError("mse_loss: prediction must be one value per sample");
  if (int(targets.size()) != B) throw UsageError("mse_loss: targets size mismatch");
  double acc = 0;
  for (int b = 0; b < B; ++b) {
    const double d = double(p[b]) - double(targets[size_t(b)]);
    acc += d * d;
  }
  Tensor<Real> out({1});
  out[0] = Real(acc / B);
  const int pid = pred.id;
  return t.push(std::move(out),
                [pid, targets, B](Tape<Real>& t, int self) {
                  const Real g = t.grad_buf(self)[0];
                  const Tensor<Real>& pv = t.value(pid);
                  Tensor<Real>& dp = t.grad_buf(pid);
                  for (int b = 0; b < B; ++b)
                    dp[b] += g * Real(2) * (pv[b] - targets[size_t(b)]) / Real(B);
                },
                "mse_loss");
}

// Gather by per-cell winner indices produced by a pooling decision. idx has
// the output shape; entries are flat positions within each input plane.
template <class Real>
Var<Real> gather_plane(Var<Real> x, std::shared_ptr<const IndexMap> idx) {
  Tape<Real>& t = *x.tape;
  const Tensor<Real>& xv = x.value();
  const int B = idx->dim(0), C = idx->dim(1), oh = idx->dim(2), ow = idx->dim(3);
  const int HW = xv.dim(2) * xv.dim(3);
  Tensor<Real> y({B, C, oh, ow});
  for (int bc = 0; bc < B * C; ++bc) {
    const Real* xp = xv.data() + size_t(bc) * HW;
    const int32_t* ip = idx->data() + size_t(bc) * oh * ow;
    Real* yp = y.data() + size_t(bc) * oh * ow;
    for (int p = 0; p < oh * ow; ++p) yp[p] = xp[ip[p]];
  }
  const int xid = x.id;
  return t.push(std::move(y),
                [xid, idx, HW](Tape<Real>& t, int self) {
                  const Tensor<Real>& g = t.grad_buf(self);
                  Tensor<Real>& dx = t.grad_buf(xid);
                  const int BC = idx->dim(0) * idx->dim(1);
                  const int P = idx->dim(2) * idx->dim(3);
                  for (int bc = 0; bc < BC; ++bc) {
                    const Real* gp = g.data() + size_t(bc) * P;
                    const int32_t* ip = idx->data() + size_t(bc) * P;
                    Real* xp = dx.data() + size_t(bc) * HW;
                    for (int p = 0; p < P; ++p) xp[ip[p]] += gp[p];
                  }
                },
                "gather_plane");
}

// Gather one spatial position per (batch, channel): x is B x C x H x W,
// idx is B x C of flat h*W+w positions; output is B x C.
template <class Real>
Var<Real> gather_spatial(Var<Real> x, std::shared_ptr<const IndexMap> idx) {
  Tape<Real>& t = *x.tape;
  const Tensor<Real>& xv = x.value();
  const int B = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
  Tensor<Real> y({B, C});
  for (int bc = 0; bc < B * C; ++bc) y[bc] = xv[int64_t(bc) * HW + (*idx)[bc]];
  const int xid = x.id;
  return t.push(std::move(y),
                [xid, idx, HW](Tape<Real>& t, int self) {
                  const Tensor<Real>& g = t.grad_buf(self);
                  Tensor<Real>& dx = t.grad_buf(xid);
                  for (int64_t bc = 0; bc < g.numel(); ++bc)
                    dx[bc * HW + (*idx)[bc]] += g[bc];
                },
                "gather_spatial");
}

// Elementwise magnitude sqrt(u^2 + v^2); subgradient 0 at the origin.
template <class Real>
Var<Real> magnitude(Var<Real> u, Var<Real> v) {
  Tape<Real>& t = *u.tape;
  if (!u.value().same_shape(v.value())) throw ConfigError("magnitude: shape mismatch");
  Tensor<Real> y(u.value().shape());
  for (int64_t i = 0; i < y.numel(); ++i)
    y[i] = std::sqrt(u.value()[i] * u.value()[i] + v.value()[i] * v.value()[i]);
  const int uid = u.id, vid = v.id;
  return t.push(std::move(y),
                [uid, vid](Tape<Real>& t, int self) {
                  const Tensor<Real>& g = t.grad_buf(self);
                  const Tensor<Real>& r = t.value(self);
                  const Tensor<Real>& uv = t.value(uid);
                  const Tensor<Real>& vv = t.value(vid);
                  Tensor<Real>& du = t.grad_buf(uid);
                  Tensor<Real>& dv = t.grad_buf(vid);
                  for (int64_t i = 0; i < g.numel(); ++i) {
                    if (r[i] > Real(0)) {
                      du[i] += g[i] * uv[i] / r[i];
                      dv[i] += g[i] * vv[i] / r[i];
                    }
                  }
                },
                "magnitude");
}

}  // namespace scalevec
