#pragma once

#include <algorithm>
#include <cblas.h>
#include <cmath>
#include <cstring>
#include <vector>

#include "scalevec/tensor.hpp"

// Plain forward/backward compute kernels on dense tensors. No tape here;
// autodiff wraps these. Convolutions and fully-connected layers go through
// im2col + BLAS GEMM; everything else is straightforward loops. All loops run
// in a fixed order so results are bit-reproducible for a given thread layout.

namespace scalevec::kernels {

inline void gemm(CBLAS_TRANSPOSE ta, CBLAS_TRANSPOSE tb, int m, int n, int k,
                 float alpha, const float* a, int lda, const float* b, int ldb,
                 float beta, float* c, int ldc) {
  cblas_sgemm(CblasRowMajor, ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}
inline void gemm(CBLAS_TRANSPOSE ta, CBLAS_TRANSPOSE tb, int m, int n, int k,
                 double alpha, const double* a, int lda, const double* b, int ldb,
                 double beta, double* c, int ldc) {
  cblas_dgemm(CblasRowMajor, ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

struct Conv2dShape {
  int batch, in_ch, in_h, in_w;
  int out_ch, ksize, pad;
  int out_h, out_w;
};

template <class Real>
Conv2dShape conv2d_shape(const Tensor<Real>& x, const Tensor<Real>& w, int pad) {
  if (x.ndim() != 4) throw ConfigError("conv2d: input must be B x C x H x W, got " + x.shape_str());
  if (w.ndim() != 4) throw ConfigError("conv2d: weights must be O x C x k x k, got " + w.shape_str());
  Conv2dShape s{};
  s.batch = x.dim(0); s.in_ch = x.dim(1); s.in_h = x.dim(2); s.in_w = x.dim(3);
  s.out_ch = w.dim(0); s.ksize = w.dim(2); s.pad = pad;
  if (w.dim(1) != s.in_ch)
    throw ConfigError("conv2d: channel mismatch, input " + x.shape_str() + " vs weights " + w.shape_str());
  if (w.dim(3) != s.ksize) throw ConfigError("conv2d: kernel must be square");
  if (s.ksize % 2 == 0) throw ConfigError("conv2d: kernel size must be odd");
  if (pad < 0) throw ConfigError("conv2d: negative padding");
  s.out_h = s.in_h + 2 * pad - s.ksize + 1;
  s.out_w = s.in_w + 2 * pad - s.ksize + 1;
  if (s.out_h < 1 || s.out_w < 1)
    throw ConfigError("conv2d: output extent < 1 for input " + x.shape_str());
  return s;
}

// col is (C*k*k) x (B*outH*outW), row-major. Column index = b*P + oy*outW + ox.
template <class Real>
void im2col(const Tensor<Real>& x, const Conv2dShape& s, std::vector<Real>& col) {
  const int P = s.out_h * s.out_w;
  const int64_t n_cols = int64_t(s.batch) * P;
  col.assign(size_t(int64_t(s.in_ch) * s.ksize * s.ksize * n_cols), Real(0));
  for (int c = 0; c < s.in_ch; ++c) {
    for (int ki = 0; ki < s.ksize; ++ki) {
      for (int kj = 0; kj < s.ksize; ++kj) {
        Real* row = col.data() + (size_t(c) * s.ksize * s.ksize + size_t(ki) * s.ksize + kj) * n_cols;
        for (int b = 0; b < s.batch; ++b) {
          const Real* xp = x.data() + (size_t(b) * s.in_ch + c) * s.in_h * s.in_w;
          for (int oy = 0; oy < s.out_h; ++oy) {
            const int iy = oy - s.pad + ki;
            Real* dst = row + size_t(b) * P + size_t(oy) * s.out_w;
            if (iy < 0 || iy >= s.in_h) continue;  // stays zero
            // valid ox range: 0 <= ox - pad + kj < in_w
            const int ox0 = std::max(0, s.pad - kj);
            const int ox1 = std::min(s.out_w, s.in_w + s.pad - kj);
            if (ox0 < ox1)
              std::memcpy(dst + ox0, xp + size_t(iy) * s.in_w + (ox0 - s.pad + kj),
                          size_t(ox1 - ox0) * sizeof(Real));
          }
        }
      }
    }
  }
}

// Cross-correlation (no kernel flip), zero padding, stride 1.
template <class Real>
Tensor<Real> conv2d_forward(const Tensor<Real>& x, const Tensor<Real>& w,
                            const Tensor<Real>* bias, int pad) {
  const Conv2dShape s = conv2d_shape(x, w, pad);
  if (bias && (bias->ndim() != 1 || bias->dim(0) != s.out_ch))
    throw ConfigError("conv2d: bias shape mismatch");
  const int P = s.out_h * s.out_w;
  const int64_t N = int64_t(s.batch) * P;
  const int K = s.in_ch * s.ksize * s.ksize;

  thread_local std::vector<Real> col, out_t;
  im2col(x, s, col);
  out_t.assign(size_t(int64_t(s.out_ch) * N), Real(0));
  gemm(CblasNoTrans, CblasNoTrans, s.out_ch, int(N), K, Real(1), w.data(), K,
       col.data(), int(N), Real(0), out_t.data(), int(N));

  Tensor<Real> y({s.batch, s.out_ch, s.out_h, s.out_w});
  for (int b = 0; b < s.batch; ++b) {
    for (int o = 0; o < s.out_ch; ++o) {
      const Real* src = out_t.data() + size_t(o) * N + size_t(b) * P;
      Real* dst = y.data() + (size_t(b) * s.out_ch + o) * P;
      if (bias) {
        const Real bo = (*bias)[o];
        for (int p = 0; p < P; ++p) dst[p] = src[p] + bo;
      } else {
        std::memcpy(dst, src, size_t(P) * sizeof(Real));
      }
    }
  }
  return y;
}

// dy is B x O x outH x outW. Computes whichever of dx, dw, db is non-null.
template <class Real>
void conv2d_backward(const Tensor<Real>& x, const Tensor<Real>& w, int pad,
                     const Tensor<Real>& dy, Tensor<Real>* dx, Tensor<Real>* dw,
                     Tensor<Real>* db) {
  const Conv2dShape s = conv2d_shape(x, w, pad);
  const int P = s.out_h * s.out_w;
  const int64_t N = int64_t(s.batch) * P;
  const int K = s.in_ch * s.ksize * s.ksize;

  thread_local std::vector<Real> dy_t;
  dy_t.resize(size_t(int64_t(s.out_ch) * N));
  for (int b = 0; b < s.batch; ++b)
    for (int o = 0; o < s.out_ch; ++o)
      std::memcpy(dy_t.data() + size_t(o) * N + size_t(b) * P,
                  dy.data() + (size_t(b) * s.out_ch + o) * P, size_t(P) * sizeof(Real));

  if (db) {
    for (int o = 0; o < s.out_ch; ++o) {
      Real acc = 0;
      const Real* row = dy_t.data() + size_t(o) * N;
      for (int64_t n = 0; n < N; ++n) acc += row[n];
      (*db)[o] += acc;
    }
  }

  if (dw) {
    thread_local std::vector<Real> col, dw_t;
    im2col(x, s, col);
    dw_t.assign(size_t(s.out_ch) * K, Real(0));
    gemm(CblasNoTrans, CblasTrans, s.out_ch, K, int(N), Real(1), dy_t.data(), int(N),
         col.data(), int(N), Real(0), dw_t.data(), K);
    for (size_t i = 0; i < dw_t.size(); ++i) (*dw)[int64_t(i)] += dw_t[i];
  }

  if (dx) {
    thread_local std::vector<Real> dcol;
    dcol.assign(size_t(int64_t(K) * N), Real(0));
    gemm(CblasTrans, CblasNoTrans, K, int(N), s.out_ch, Real(1), w.data(), K,
         dy_t.data(), int(N), Real(0), dcol.data(), int(N));
    // col2im accumulate, fixed iteration order
    for (int c = 0; c < s.in_ch; ++c) {
      for (int ki = 0; ki < s.ksize; ++ki) {
        for (int kj = 0; kj < s.ksize; ++kj) {
          const Real* row = dcol.data() + (size_t(c) * s.ksize * s.ksize + size_t(ki) * s.ksize + kj) * N;
          for (int b = 0; b < s.batch; ++b) {
            Real* xp = dx->data() + (size_t(b) * s.in_ch + c) * s.in_h * s.in_w;
            for (int oy = 0; oy < s.out_h; ++oy) {
              const int iy = oy - s.pad + ki;
              if (iy < 0 || iy >= s.in_h) continue;
              const Real* src = row + size_t(b) * P + size_t(oy) * s.out_w;
              const int ox0 = std::max(0, s.pad - kj);
              const int ox1 = std::min(s.out_w, s.in_w + s.pad - kj);
              Real* dst = xp + size_t(iy) * s.in_w + (ox0 - s.pad + kj);
              for (int ox = ox0; ox < ox1; ++ox) *dst++ += src[ox];
            }
          }
        }
      }
    }
  }
}

// Half-pixel-center sampling: source coordinate of output pixel i is
// (i + 0.5) * in / out - 0.5, clamped to [0, in-1]. Identity size is exact.
struct ResizeAxis {
  std::vector<int> i0, i1;
  std::vector<double> frac;  // weight of i1
};

inline ResizeAxis make_resize_axis(int in, int out) {
  ResizeAxis a;
  a.i0.resize(size_t(out));
  a.i1.resize(size_t(out));
  a.frac.resize(size_t(out));
  const double scale = double(in) / double(out);
  for (int i = 0; i < out; ++i) {
    double s = (i + 0.5) * scale - 0.5;
    if (s < 0) s = 0;
    if (s > in - 1) s = in - 1;
    int lo = int(std::floor(s));
    if (lo > in - 1) lo = in - 1;
    a.i0[size_t(i)] = lo;
    a.i1[size_t(i)] = std::min(lo + 1, in - 1);
    a.frac[size_t(i)] = s - lo;
  }
  return a;
}

template <class Real>
Tensor<Real> bilinear_resize_forward(const Tensor<Real>& x, int out_h, int out_w) {
  if (x.ndim() != 4) throw ConfigError("bilinear_resize: input must be B x C x H x W");
  if (out_h < 1 || out_w < 1) throw ConfigError("bilinear_resize: target extents must be >= 1");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const ResizeAxis ay = make_resize_axis(H, out_h);
  const ResizeAxis ax = make_resize_axis(W, out_w);
  Tensor<Real> y({B, C, out_h, out_w});
  for (int bc = 0; bc < B * C; ++bc) {
    const Real* xp = x.data() + size_t(bc) * H * W;
    Real* yp = y.data() + size_t(bc) * out_h * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const Real fy = Real(ay.frac[size_t(oy)]);
      const Real* r0 = xp + size_t(ay.i0[size_t(oy)]) * W;
      const Real* r1 = xp + size_t(ay.i1[size_t(oy)]) * W;
      Real* dst = yp + size_t(oy) * out_w;
      for (int ox = 0; ox < out_w; ++ox) {
        const Real fx = Real(ax.frac[size_t(ox)]);
        const int j0 = ax.i0[size_t(ox)], j1 = ax.i1[size_t(ox)];
        const Real top = (Real(1) - fx) * r0[j0] + fx * r0[j1];
        const Real bot = (Real(1) - fx) * r1[j0] + fx * r1[j1];
        dst[ox] = (Real(1) - fy) * top + fy * bot;
      }
    }
  }
  return y;
}

// Scatters the four bilinear weights; accumulates into dx.
template <class Real>
void bilinear_resize_backward(const Tensor<Real>& dy, int in_h, int in_w, Tensor<Real>* dx) {
  const int B = dy.dim(0), C = dy.dim(1), oh = dy.dim(2), ow = dy.dim(3);
  const ResizeAxis ay = make_resize_axis(in_h, oh);
  const ResizeAxis ax = make_resize_axis(in_w, ow);
  for (int bc = 0; bc < B * C; ++bc) {
    const Real* gp = dy.data() + size_t(bc) * oh * ow;
    Real* xp = dx->data() + size_t(bc) * in_h * in_w;
    for (int oy = 0; oy < oh; ++oy) {
      const Real fy = Real(ay.frac[size_t(oy)]);
      Real* r0 = xp + size_t(ay.i0[size_t(oy)]) * in_w;
      Real* r1 = xp + size_t(ay.i1[size_t(oy)]) * in_w;
      const Real* src = gp + size_t(oy) * ow;
      for (int ox = 0; ox < ow; ++ox) {
        const Real fx = Real(ax.frac[size_t(ox)]);
        const int j0 = ax.i0[size_t(ox)], j1 = ax.i1[size_t(ox)];
        const Real g = src[ox];
        r0[j0] += (Real(1) - fy) * (Real(1) - fx) * g;
        r0[j1] += (Real(1) - fy) * fx * g;
        r1[j0] += fy * (Real(1) - fx) * g;
        r1[j1] += fy * fx * g;
      }
    }
  }
}

// 2x2 max pooling, stride 2, odd edges padded conceptually with -inf.
// idx stores the flat winner position h*W+w within the input plane; ties go to
// the smallest flat index.
template <class Real>
void maxpool2x2_forward(const Tensor<Real>& x, Tensor<Real>* out, IndexMap* idx) {
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int oh = (H + 1) / 2, ow = (W + 1) / 2;
  *out = Tensor<Real>({B, C, oh, ow});
  *idx = IndexMap({B, C, oh, ow});
  for (int bc = 0; bc < B * C; ++bc) {
    const Real* xp = x.data() + size_t(bc) * H * W;
    Real* op = out->data() + size_t(bc) * oh * ow;
    int32_t* ip = idx->data() + size_t(bc) * oh * ow;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        Real best = 0;
        int32_t best_i = -1;
        for (int dy = 0; dy < 2; ++dy) {
          const int y = 2 * oy + dy;
          if (y >= H) break;
          for (int dx = 0; dx < 2; ++dx) {
            const int xw = 2 * ox + dx;
            if (xw >= W) break;
            const Real v = xp[size_t(y) * W + xw];
            if (best_i < 0 || v > best) { best = v; best_i = int32_t(y * W + xw); }
          }
        }
        op[size_t(oy) * ow + ox] = best;
        ip[size_t(oy) * ow + ox] = best_i;
      }
    }
  }
}

template <class Real>
void maxpool2x2_backward(const Tensor<Real>& dy, const IndexMap& idx, Tensor<Real>* dx) {
  const int B = dy.dim(0), C = dy.dim(1), oh = dy.dim(2), ow = dy.dim(3);
  const int HW = dx->dim(2) * dx->dim(3);
  for (int bc = 0; bc < B * C; ++bc) {
    const Real* gp = dy.data() + size_t(bc) * oh * ow;
    const int32_t* ip = idx.data() + size_t(bc) * oh * ow;
    Real* xp = dx->data() + size_t(bc) * HW;
    for (int p = 0; p < oh * ow; ++p) xp[ip[p]] += gp[p];
  }
}

// y = x * W^T + b, x: B x N, W: M x N, b: M (optional), y: B x M
template <class Real>
Tensor<Real> linear_forward(const Tensor<Real>& x, const Tensor<Real>& w,
                            const Tensor<Real>* bias) {
  if (x.ndim() != 2 || w.ndim() != 2) throw ConfigError("linear: x must be B x N, w must be M x N");
  const int B = x.dim(0), N = x.dim(1), M = w.dim(0);
  if (w.dim(1) != N) throw ConfigError("linear: feature dim mismatch");
  Tensor<Real> y({B, M});
  gemm(CblasNoTrans, CblasTrans, B, M, N, Real(1), x.data(), N, w.data(), N, Real(0),
       y.data(), M);
  if (bias)
    for (int b = 0; b < B; ++b)
      for (int m = 0; m < M; ++m) y.at(b, m) += (*bias)[m];
  return y;
}

template <class Real>
void linear_backward(const Tensor<Real>& x, const Tensor<Real>& w, const Tensor<Real>& dy,
                     Tensor<Real>* dx, Tensor<Real>* dw, Tensor<Real>* db) {
  const int B = x.dim(0), N = x.dim(1), M = w.dim(0);
  if (dx)
    gemm(CblasNoTrans, CblasNoTrans, B, N, M, Real(1), dy.data(), M, w.data(), N, Real(1),
         dx->data(), N);
  if (dw)
    gemm(CblasTrans, CblasNoTrans, M, N, B, Real(1), dy.data(), M, x.data(), N, Real(1),
         dw->data(), N);
  if (db)
    for (int b = 0; b < B; ++b)
      for (int m = 0; m < M; ++m) (*db)[m] += dy.at(b, m);
}

}  // namespace scalevec::kernels
