#include "facemetric/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace facemetric {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;
using MapVec = Eigen::Map<Eigen::VectorXd>;
using ConstMapVec = Eigen::Map<const Eigen::VectorXd>;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

Tape& tape_of(Value v, const char* op) {
  if (!v.valid()) fail(std::string(op) + ": empty value");
  return *v.tape;
}

template <class Range>
void require_same_tape(const Range& vs, const char* op) {
  const Tape* t = nullptr;
  for (Value v : vs) {
    if (!v.valid()) continue;
    if (t == nullptr) t = v.tape;
    if (v.tape != t) fail(std::string(op) + ": operands live on different tapes");
  }
}

void require_same_tape(std::initializer_list<Value> vs, const char* op) {
  require_same_tape<std::initializer_list<Value>>(vs, op);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape != b.shape) {
    fail(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  }
}

// One convolution/pooling axis. pad0 is the leading pad; same padding picks
// the total pad so out = ceil(in / stride), valid padding requires k <= in.
struct AxisGeom {
  int in = 0, k = 0, stride = 1, pad0 = 0, out = 0;
};

AxisGeom axis_geom(int in, int k, int stride, Padding pad, const char* op, const char* axis) {
  if (stride < 1) fail(std::string(op) + ": stride must be >= 1 on " + axis);
  if (k < 1) fail(std::string(op) + ": kernel extent must be >= 1 on " + axis);
  AxisGeom g;
  g.in = in;
  g.k = k;
  g.stride = stride;
  if (pad == Padding::Valid) {
    if (k > in) {
      fail(std::string(op) + ": kernel extent " + std::to_string(k) + " exceeds input extent " +
           std::to_string(in) + " on " + axis + " with valid padding");
    }
    g.out = (in - k) / stride + 1;
  } else {
    g.out = (in + stride - 1) / stride;
    const int total = std::max((g.out - 1) * stride + k - in, 0);
    g.pad0 = total / 2;
  }
  return g;
}

// cols is (C * kh * kw) x (Ho * Wo), row-major.
void im2col2d(const double* x, int C, int H, int W, const AxisGeom& gy, const AxisGeom& gx,
              double* cols) {
  const int Ho = gy.out, Wo = gx.out;
  const std::size_t n = static_cast<std::size_t>(Ho) * Wo;
  std::size_t r = 0;
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < gy.k; ++ky) {
      for (int kx = 0; kx < gx.k; ++kx, ++r) {
        double* dst = cols + r * n;
        for (int oy = 0; oy < Ho; ++oy) {
          const int y = oy * gy.stride - gy.pad0 + ky;
          double* row = dst + static_cast<std::size_t>(oy) * Wo;
          if (y < 0 || y >= H) {
            std::fill(row, row + Wo, 0.0);
            continue;
          }
          const double* src = x + (static_cast<std::size_t>(c) * H + y) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int xx = ox * gx.stride - gx.pad0 + kx;
            row[ox] = (xx >= 0 && xx < W) ? src[xx] : 0.0;
          }
        }
      }
    }
  }
}

void col2im2d_add(const double* cols, int C, int H, int W, const AxisGeom& gy, const AxisGeom& gx,
                  double* dx) {
  const int Ho = gy.out, Wo = gx.out;
  const std::size_t n = static_cast<std::size_t>(Ho) * Wo;
  std::size_t r = 0;
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < gy.k; ++ky) {
      for (int kx = 0; kx < gx.k; ++kx, ++r) {
        const double* src = cols + r * n;
        for (int oy = 0; oy < Ho; ++oy) {
          const int y = oy * gy.stride - gy.pad0 + ky;
          if (y < 0 || y >= H) continue;
          double* dst = dx + (static_cast<std::size_t>(c) * H + y) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int xx = ox * gx.stride - gx.pad0 + kx;
            if (xx >= 0 && xx < W) dst[xx] += src[static_cast<std::size_t>(oy) * Wo + ox];
          }
        }
      }
    }
  }
}

// cols is (C * kt * kh * kw) x (To * Ho * Wo), row-major.
void im2col3d(const double* x, int C, int T, int H, int W, const AxisGeom& gt, const AxisGeom& gy,
              const AxisGeom& gx, double* cols) {
  const int To = gt.out, Ho = gy.out, Wo = gx.out;
  const std::size_t n = static_cast<std::size_t>(To) * Ho * Wo;
  std::size_t r = 0;
  for (int c = 0; c < C; ++c) {
    for (int kt = 0; kt < gt.k; ++kt) {
      for (int ky = 0; ky < gy.k; ++ky) {
        for (int kx = 0; kx < gx.k; ++kx, ++r) {
          double* dst = cols + r * n;
          std::size_t o = 0;
          for (int ot = 0; ot < To; ++ot) {
            const int tt = ot * gt.stride - gt.pad0 + kt;
            for (int oy = 0; oy < Ho; ++oy) {
              const int y = oy * gy.stride - gy.pad0 + ky;
              if (tt < 0 || tt >= T || y < 0 || y >= H) {
                for (int ox = 0; ox < Wo; ++ox) dst[o++] = 0.0;
                continue;
              }
              const double* src = x + ((static_cast<std::size_t>(c) * T + tt) * H + y) * W;
              for (int ox = 0; ox < Wo; ++ox) {
                const int xx = ox * gx.stride - gx.pad0 + kx;
                dst[o++] = (xx >= 0 && xx < W) ? src[xx] : 0.0;
              }
            }
          }
        }
      }
    }
  }
}

void col2im3d_add(const double* cols, int C, int T, int H, int W, const AxisGeom& gt,
                  const AxisGeom& gy, const AxisGeom& gx, double* dx) {
  const int To = gt.out, Ho = gy.out, Wo = gx.out;
  const std::size_t n = static_cast<std::size_t>(To) * Ho * Wo;
  std::size_t r = 0;
  for (int c = 0; c < C; ++c) {
    for (int kt = 0; kt < gt.k; ++kt) {
      for (int ky = 0; ky < gy.k; ++ky) {
        for (int kx = 0; kx < gx.k; ++kx, ++r) {
          const double* src = cols + r * n;
          std::size_t o = 0;
          for (int ot = 0; ot < To; ++ot) {
            const int tt = ot * gt.stride - gt.pad0 + kt;
            for (int oy = 0; oy < Ho; ++oy) {
              const int y = oy * gy.stride - gy.pad0 + ky;
              if (tt < 0 || tt >= T || y < 0 || y >= H) {
                o += static_cast<std::size_t>(Wo);
                continue;
              }
              double* dst = dx + ((static_cast<std::size_t>(c) * T + tt) * H + y) * W;
              for (int ox = 0; ox < Wo; ++ox, ++o) {
                const int xx = ox * gx.stride - gx.pad0 + kx;
                if (xx >= 0 && xx < W) dst[xx] += src[o];
              }
            }
          }
        }
      }
    }
  }
}

double apply_activation(Activation a, double z) {
  switch (a) {
    case Activation::Linear: return z;
    case Activation::Relu: return z > 0.0 ? z : 0.0;
    case Activation::Tanh: return std::tanh(z);
    case Activation::Sigmoid: return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z))
                                              : std::exp(z) / (1.0 + std::exp(z));
  }
  return z;
}

// Derivative expressed through the activation output.
double activation_slope(Activation a, double y) {
  switch (a) {
    case Activation::Linear: return 1.0;
    case Activation::Relu: return y > 0.0 ? 1.0 : 0.0;
    case Activation::Tanh: return 1.0 - y * y;
    case Activation::Sigmoid: return y * (1.0 - y);
  }
  return 1.0;
}

Value unary_elementwise(Value x, Activation a, const char* op) {
  Tape& tp = tape_of(x, op);
  const Tensor& xin = x.tensor();
  Tensor out = xin;
  out.grad.clear();
  out.requires_grad = false;
  for (auto& v : out.data) v = apply_activation(a, v);
  const std::size_t xi = x.id;
  return tp.emit(std::move(out), {xi}, [xi, a](Tape& t, std::size_t self) {
    if (!t.needs_grad(xi)) return;
    const auto& adj = t.adjoint(self);
    const auto& y = t.tensor(self).data;
    auto& dx = t.adjoint(xi);
    for (std::size_t k = 0; k < adj.size(); ++k) dx[k] += adj[k] * activation_slope(a, y[k]);
  });
}

}  // namespace

const char* activation_name(Activation a) {
  switch (a) {
    case Activation::Linear: return "linear";
    case Activation::Relu: return "relu";
    case Activation::Tanh: return "tanh";
    case Activation::Sigmoid: return "sigmoid";
  }
  return "?";
}

Value conv2d(Value input, Value kernels, Value bias, std::array<int, 2> stride, Padding padding) {
  Tape& tp = tape_of(input, "conv2d");
  require_same_tape({input, kernels, bias}, "conv2d");
  const Tensor& x = input.tensor();
  const Tensor& k = kernels.tensor();
  if (x.rank() != 3) fail("conv2d: input must be [C,H,W], got " + shape_str(x.shape));
  if (k.rank() != 4) fail("conv2d: kernels must be [F,C,kh,kw], got " + shape_str(k.shape));
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int F = k.dim(0);
  if (k.dim(1) != C) {
    fail("conv2d: kernel channels " + std::to_string(k.dim(1)) + " do not match input channels " +
         std::to_string(C));
  }
  const bool has_bias = bias.valid();
  if (has_bias) {
    const Tensor& b = bias.tensor();
    if (b.rank() != 1 || b.dim(0) != F) {
      fail("conv2d: bias must be [" + std::to_string(F) + "], got " + shape_str(b.shape));
    }
  }
  const AxisGeom gy = axis_geom(H, k.dim(2), stride[0], padding, "conv2d", "height");
  const AxisGeom gx = axis_geom(W, k.dim(3), stride[1], padding, "conv2d", "width");
  const int CKK = C * gy.k * gx.k;
  const int OUT = gy.out * gx.out;

  RowMat cols(CKK, OUT);
  im2col2d(x.data.data(), C, H, W, gy, gx, cols.data());
  Tensor out = Tensor::zeros({F, gy.out, gx.out});
  MapMat om(out.data.data(), F, OUT);
  ConstMapMat km(k.data.data(), F, CKK);
  om.noalias() = km * cols;
  if (has_bias) {
    const Tensor& b = bias.tensor();
    for (int f = 0; f < F; ++f) om.row(f).array() += b.data[static_cast<std::size_t>(f)];
  }

  std::vector<std::size_t> parents{input.id, kernels.id};
  if (has_bias) parents.push_back(bias.id);
  const std::size_t xi = input.id, ki = kernels.id, bi = has_bias ? bias.id : 0;
  return tp.emit(std::move(out), parents,
                 [=](Tape& t, std::size_t self) {
                   const auto& adj = t.adjoint(self);
                   ConstMapMat dY(adj.data(), F, OUT);
                   if (has_bias && t.needs_grad(bi)) {
                     auto& db = t.adjoint(bi);
                     for (int f = 0; f < F; ++f) db[static_cast<std::size_t>(f)] += dY.row(f).sum();
                   }
                   if (t.needs_grad(ki)) {
                     RowMat cols2(CKK, OUT);
                     im2col2d(t.tensor(xi).data.data(), C, H, W, gy, gx, cols2.data());
                     MapMat dk(t.adjoint(ki).data(), F, CKK);
                     dk.noalias() += dY * cols2.transpose();
                   }
                   if (t.needs_grad(xi)) {
                     RowMat dcols(CKK, OUT);
                     ConstMapMat km2(t.tensor(ki).data.data(), F, CKK);
                     dcols.noalias() = km2.transpose() * dY;
                     col2im2d_add(dcols.data(), C, H, W, gy, gx, t.adjoint(xi).data());
                   }
                 });
}

Value conv3d(Value input, Value kernels, Value bias, std::array<int, 3> stride, Padding padding) {
  Tape& tp = tape_of(input, "conv3d");
  require_same_tape({input, kernels, bias}, "conv3d");
  const Tensor& x = input.tensor();
  const Tensor& k = kernels.tensor();
  if (x.rank() != 4) fail("conv3d: input must be [C,T,H,W], got " + shape_str(x.shape));
  if (k.rank() != 5) fail("conv3d: kernels must be [F,C,kt,kh,kw], got " + shape_str(k.shape));
  const int C = x.dim(0), T = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int F = k.dim(0);
  if (k.dim(1) != C) {
    fail("conv3d: kernel channels " + std::to_string(k.dim(1)) + " do not match input channels " +
         std::to_string(C));
  }
  const bool has_bias = bias.valid();
  if (has_bias) {
    const Tensor& b = bias.tensor();
    if (b.rank() != 1 || b.dim(0) != F) {
      fail("conv3d: bias must be [" + std::to_string(F) + "], got " + shape_str(b.shape));
    }
  }
  const AxisGeom gt = axis_geom(T, k.dim(2), stride[0], padding, "conv3d", "time");
  const AxisGeom gy = axis_geom(H, k.dim(3), stride[1], padding, "conv3d", "height");
  const AxisGeom gx = axis_geom(W, k.dim(4), stride[2], padding, "conv3d", "width");
  const int CK = C * gt.k * gy.k * gx.k;
  const int OUT = gt.out * gy.out * gx.out;

  RowMat cols(CK, OUT);
  im2col3d(x.data.data(), C, T, H, W, gt, gy, gx, cols.data());
  Tensor out = Tensor::zeros({F, gt.out, gy.out, gx.out});
  MapMat om(out.data.data(), F, OUT);
  ConstMapMat km(k.data.data(), F, CK);
  om.noalias() = km * cols;
  if (has_bias) {
    const Tensor& b = bias.tensor();
    for (int f = 0; f < F; ++f) om.row(f).array() += b.data[static_cast<std::size_t>(f)];
  }

  std::vector<std::size_t> parents{input.id, kernels.id};
  if (has_bias) parents.push_back(bias.id);
  const std::size_t xi = input.id, ki = kernels.id, bi = has_bias ? bias.id : 0;
  return tp.emit(std::move(out), parents,
                 [=](Tape& t, std::size_t self) {
                   const auto& adj = t.adjoint(self);
                   ConstMapMat dY(adj.data(), F, OUT);
                   if (has_bias && t.needs_grad(bi)) {
                     auto& db = t.adjoint(bi);
                     for (int f = 0; f < F; ++f) db[static_cast<std::size_t>(f)] += dY.row(f).sum();
                   }
                   if (t.needs_grad(ki)) {
                     RowMat cols2(CK, OUT);
                     im2col3d(t.tensor(xi).data.data(), C, T, H, W, gt, gy, gx, cols2.data());
                     MapMat dk(t.adjoint(ki).data(), F, CK);
                     dk.noalias() += dY * cols2.transpose();
                   }
                   if (t.needs_grad(xi)) {
                     RowMat dcols(CK, OUT);
                     ConstMapMat km2(t.tensor(ki).data.data(), F, CK);
                     dcols.noalias() = km2.transpose() * dY;
                     col2im3d_add(dcols.data(), C, T, H, W, gt, gy, gx, t.adjoint(xi).data());
                   }
                 });
}

namespace {

// Shared pooling core; dims lists the pooled axes' extents after the channel
// axis. Records the flat argmax per output cell (first index wins ties).
Value maxpool_impl(Value input, const std::vector<int>& win, const std::vector<int>& str,
                   const char* op) {
  Tape& tp = tape_of(input, op);
  const Tensor& x = input.tensor();
  const int naxes = static_cast<int>(win.size());
  if (x.rank() != naxes + 1) {
    fail(std::string(op) + ": input rank " + std::to_string(x.rank()) + " does not match window rank " +
         std::to_string(naxes + 1));
  }
  const int C = x.dim(0);
  std::vector<AxisGeom> g(static_cast<std::size_t>(naxes));
  std::vector<int> out_shape{C};
  for (int a = 0; a < naxes; ++a) {
    g[static_cast<std::size_t>(a)] =
        axis_geom(x.dim(a + 1), win[static_cast<std::size_t>(a)], str[static_cast<std::size_t>(a)],
                  Padding::Valid, op, "axis");
    out_shape.push_back(g[static_cast<std::size_t>(a)].out);
  }

  Tensor out = Tensor::zeros(out_shape);
  std::vector<int> argmax(out.data.size(), 0);

  // in-strides for the pooled axes
  std::vector<std::size_t> istr(static_cast<std::size_t>(naxes), 1);
  for (int a = naxes - 2; a >= 0; --a) {
    istr[static_cast<std::size_t>(a)] =
        istr[static_cast<std::size_t>(a + 1)] * static_cast<std::size_t>(x.dim(a + 2));
  }
  std::size_t plane = istr[0] * static_cast<std::size_t>(x.dim(1));

  std::size_t o = 0;
  std::vector<int> oc(static_cast<std::size_t>(naxes), 0);
  for (int c = 0; c < C; ++c) {
    std::fill(oc.begin(), oc.end(), 0);
    const double* base = x.data.data() + static_cast<std::size_t>(c) * plane;
    for (;;) {
      double best = 0.0;
      std::size_t best_idx = 0;
      bool first = true;
      std::vector<int> kc(static_cast<std::size_t>(naxes), 0);
      for (;;) {
        std::size_t idx = 0;
        for (int a = 0; a < naxes; ++a) {
          idx += static_cast<std::size_t>(oc[static_cast<std::size_t>(a)] *
                                          g[static_cast<std::size_t>(a)].stride +
                                          kc[static_cast<std::size_t>(a)]) *
                 istr[static_cast<std::size_t>(a)];
        }
        const double v = base[idx];
        if (first || v > best) {
          best = v;
          best_idx = idx;
          first = false;
        }
        int a = naxes - 1;
        for (; a >= 0; --a) {
          if (++kc[static_cast<std::size_t>(a)] < g[static_cast<std::size_t>(a)].k) break;
          kc[static_cast<std::size_t>(a)] = 0;
        }
        if (a < 0) break;
      }
      out.data[o] = best;
      argmax[o] = static_cast<int>(static_cast<std::size_t>(c) * plane + best_idx);
      ++o;
      int a = naxes - 1;
      for (; a >= 0; --a) {
        if (++oc[static_cast<std::size_t>(a)] < g[static_cast<std::size_t>(a)].out) break;
        oc[static_cast<std::size_t>(a)] = 0;
      }
      if (a < 0) break;
    }
  }

  const std::size_t xi = input.id;
  return tp.emit(std::move(out), {xi},
                 [xi, argmax = std::move(argmax)](Tape& t, std::size_t self) {
                   if (!t.needs_grad(xi)) return;
                   const auto& adj = t.adjoint(self);
                   auto& dx = t.adjoint(xi);
                   for (std::size_t i = 0; i < adj.size(); ++i) {
                     dx[static_cast<std::size_t>(argmax[i])] += adj[i];
                   }
                 });
}

}  // namespace

Value maxpool2d(Value input, std::array<int, 2> window, std::array<int, 2> stride) {
  return maxpool_impl(input, {window[0], window[1]}, {stride[0], stride[1]}, "maxpool2d");
}

Value maxpool3d(Value input, std::array<int, 3> window, std::array<int, 3> stride) {
  return maxpool_impl(input, {window[0], window[1], window[2]}, {stride[0], stride[1], stride[2]},
                      "maxpool3d");
}

Value dense(Value input, Value weights, Value bias, Activation act) {
  Tape& tp = tape_of(input, "dense");
  require_same_tape({input, weights, bias}, "dense");
  const Tensor& x = input.tensor();
  const Tensor& w = weights.tensor();
  const Tensor& b = bias.tensor();
  if (x.rank() != 1) fail("dense: input must be a vector, got " + shape_str(x.shape));
  if (w.rank() != 2) fail("dense: weights must be [m,n], got " + shape_str(w.shape));
  const int m = w.dim(0), n = w.dim(1);
  if (x.dim(0) != n) {
    fail("dense: weights " + shape_str(w.shape) + " incompatible with input " + shape_str(x.shape));
  }
  if (b.rank() != 1 || b.dim(0) != m) {
    fail("dense: bias must be [" + std::to_string(m) + "], got " + shape_str(b.shape));
  }

  Tensor out = Tensor::zeros({m});
  MapVec ov(out.data.data(), m);
  ConstMapMat wm(w.data.data(), m, n);
  ConstMapVec xv(x.data.data(), n);
  ConstMapVec bv(b.data.data(), m);
  ov.noalias() = wm * xv + bv;
  for (auto& v : out.data) v = apply_activation(act, v);

  const std::size_t xi = input.id, wi = weights.id, bi = bias.id;
  return tp.emit(std::move(out), {xi, wi, bi},
                 [=](Tape& t, std::size_t self) {
                   const auto& adj = t.adjoint(self);
                   const auto& y = t.tensor(self).data;
                   Eigen::VectorXd dz(m);
                   for (int i = 0; i < m; ++i) {
                     dz[i] = adj[static_cast<std::size_t>(i)] *
                             activation_slope(act, y[static_cast<std::size_t>(i)]);
                   }
                   if (t.needs_grad(bi)) {
                     MapVec db(t.adjoint(bi).data(), m);
                     db.noalias() += dz;
                   }
                   if (t.needs_grad(wi)) {
                     ConstMapVec xv2(t.tensor(xi).data.data(), n);
                     MapMat dw(t.adjoint(wi).data(), m, n);
                     dw.noalias() += dz * xv2.transpose();
                   }
                   if (t.needs_grad(xi)) {
                     ConstMapMat wm2(t.tensor(wi).data.data(), m, n);
                     MapVec dx(t.adjoint(xi).data(), n);
                     dx.noalias() += wm2.transpose() * dz;
                   }
                 });
}

Value relu(Value x) { return unary_elementwise(x, Activation::Relu, "relu"); }
Value sigmoid(Value x) { return unary_elementwise(x, Activation::Sigmoid, "sigmoid"); }
Value tanh(Value x) { return unary_elementwise(x, Activation::Tanh, "tanh"); }

Value add(Value a, Value b) {
  Tape& tp = tape_of(a, "add");
  require_same_tape({a, b}, "add");
  require_same_shape(a.tensor(), b.tensor(), "add");
  Tensor out = a.tensor();
  out.grad.clear();
  out.requires_grad = false;
  const auto& bd = b.tensor().data;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += bd[i];
  const std::size_t ai = a.id, bi = b.id;
  return tp.emit(std::move(out), {ai, bi}, [ai, bi](Tape& t, std::size_t self) {
    const auto& adj = t.adjoint(self);
    for (std::size_t pid : {ai, bi}) {
      if (!t.needs_grad(pid)) continue;
      auto& d = t.adjoint(pid);
      for (std::size_t i = 0; i < adj.size(); ++i) d[i] += adj[i];
    }
  });
}

Value mul(Value a, Value b) {
  Tape& tp = tape_of(a, "mul");
  require_same_tape({a, b}, "mul");
  require_same_shape(a.tensor(), b.tensor(), "mul");
  Tensor out = a.tensor();
  out.grad.clear();
  out.requires_grad = false;
  const auto& bd = b.tensor().data;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bd[i];
  const std::size_t ai = a.id, bi = b.id;
  return tp.emit(std::move(out), {ai, bi}, [ai, bi](Tape& t, std::size_t self) {
    const auto& adj = t.adjoint(self);
    const auto& av = t.tensor(ai).data;
    const auto& bv = t.tensor(bi).data;
    if (t.needs_grad(ai)) {
      auto& d = t.adjoint(ai);
      for (std::size_t i = 0; i < adj.size(); ++i) d[i] += adj[i] * bv[i];
    }
    if (t.needs_grad(bi)) {
      auto& d = t.adjoint(bi);
      for (std::size_t i = 0; i < adj.size(); ++i) d[i] += adj[i] * av[i];
    }
  });
}

Value affine(Value x, double scale, double shift) {
  Tape& tp = tape_of(x, "affine");
  Tensor out = x.tensor();
  out.grad.clear();
  out.requires_grad = false;
  for (auto& v : out.data) v = scale * v + shift;
  const std::size_t xi = x.id;
  return tp.emit(std::move(out), {xi}, [xi, scale](Tape& t, std::size_t self) {
    if (!t.needs_grad(xi)) return;
    const auto& adj = t.adjoint(self);
    auto& d = t.adjoint(xi);
    for (std::size_t i = 0; i < adj.size(); ++i) d[i] += scale * adj[i];
  });
}

Value concat_channels(const std::vector<Value>& xs) {
  if (xs.empty()) fail("concat_channels: empty input list");
  Tape& tp = tape_of(xs[0], "concat_channels");
  require_same_tape(xs, "concat_channels");
  const Tensor& first = xs[0].tensor();
  if (first.rank() < 1) fail("concat_channels: inputs must have a channel axis");
  std::vector<int> out_shape = first.shape;
  int total = 0;
  for (const Value& v : xs) {
    const Tensor& t = v.tensor();
    if (t.rank() != first.rank() ||
        !std::equal(t.shape.begin() + 1, t.shape.end(), first.shape.begin() + 1)) {
      fail("concat_channels: trailing dims differ, " + shape_str(t.shape) + " vs " +
           shape_str(first.shape));
    }
    total += t.dim(0);
  }
  out_shape[0] = total;
  Tensor out = Tensor::zeros(out_shape);
  std::size_t off = 0;
  std::vector<std::size_t> parents, offsets, sizes;
  for (const Value& v : xs) {
    const auto& d = v.tensor().data;
    std::copy(d.begin(), d.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
    parents.push_back(v.id);
    offsets.push_back(off);
    sizes.push_back(d.size());
    off += d.size();
  }
  return tp.emit(std::move(out), parents,
                 [parents, offsets, sizes](Tape& t, std::size_t self) {
                   const auto& adj = t.adjoint(self);
                   for (std::size_t j = 0; j < parents.size(); ++j) {
                     if (!t.needs_grad(parents[j])) continue;
                     auto& d = t.adjoint(parents[j]);
                     for (std::size_t i = 0; i < sizes[j]; ++i) d[i] += adj[offsets[j] + i];
                   }
                 });
}

Value slice_channels(Value x, int begin, int count) {
  Tape& tp = tape_of(x, "slice_channels");
  const Tensor& xin = x.tensor();
  if (xin.rank() < 1) fail("slice_channels: input must have a channel axis");
  const int C = xin.dim(0);
  if (begin < 0 || count < 1 || begin + count > C) {
    fail("slice_channels: range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
         ") out of bounds for " + std::to_string(C) + " channels");
  }
  std::vector<int> out_shape = xin.shape;
  out_shape[0] = count;
  const std::size_t rest = xin.data.size() / static_cast<std::size_t>(C);
  const std::size_t off = static_cast<std::size_t>(begin) * rest;
  const std::size_t len = static_cast<std::size_t>(count) * rest;
  Tensor out = Tensor::zeros(out_shape);
  std::copy(xin.data.begin() + static_cast<std::ptrdiff_t>(off),
            xin.data.begin() + static_cast<std::ptrdiff_t>(off + len), out.data.begin());
  const std::size_t xi = x.id;
  return tp.emit(std::move(out), {xi}, [xi, off, len](Tape& t, std::size_t self) {
    if (!t.needs_grad(xi)) return;
    const auto& adj = t.adjoint(self);
    auto& d = t.adjoint(xi);
    for (std::size_t i = 0; i < len; ++i) d[off + i] += adj[i];
  });
}

Value select_batch(Value stacked, int index) {
  Tape& tp = tape_of(stacked, "select_batch");
  const Tensor& xin = stacked.tensor();
  if (xin.rank() < 2) fail("select_batch: input must be stacked [N,...], got " + shape_str(xin.shape));
  const int N = xin.dim(0);
  if (index < 0 || index >= N) {
    fail("select_batch: index " + std::to_string(index) + " out of range for batch " + std::to_string(N));
  }
  std::vector<int> out_shape(xin.shape.begin() + 1, xin.shape.end());
  const std::size_t len = xin.data.size() / static_cast<std::size_t>(N);
  const std::size_t off = static_cast<std::size_t>(index) * len;
  Tensor out = Tensor::zeros(out_shape);
  std::copy(xin.data.begin() + static_cast<std::ptrdiff_t>(off),
            xin.data.begin() + static_cast<std::ptrdiff_t>(off + len), out.data.begin());
  const std::size_t xi = stacked.id;
  return tp.emit(std::move(out), {xi}, [xi, off, len](Tape& t, std::size_t self) {
    if (!t.needs_grad(xi)) return;
    const auto& adj = t.adjoint(self);
    auto& d = t.adjoint(xi);
    for (std::size_t i = 0; i < len; ++i) d[off + i] += adj[i];
  });
}

Value flatten(Value x) {
  Tape& tp = tape_of(x, "flatten");
  const Tensor& xin = x.tensor();
  Tensor out = Tensor::zeros({xin.numel()});
  out.data = xin.data;
  const std::size_t xi = x.id;
  return tp.emit(std::move(out), {xi}, [xi](Tape& t, std::size_t self) {
    if (!t.needs_grad(xi)) return;
    const auto& adj = t.adjoint(self);
    auto& d = t.adjoint(xi);
    for (std::size_t i = 0; i < adj.size(); ++i) d[i] += adj[i];
  });
}

Value sum(Value x) {
  Tape& tp = tape_of(x, "sum");
  double s = 0.0;
  for (double v : x.tensor().data) s += v;
  const std::size_t xi = x.id;
  return tp.emit(Tensor::scalar(s), {xi}, [xi](Tape& t, std::size_t self) {
    if (!t.needs_grad(xi)) return;
    const double a = t.adjoint(self)[0];
    auto& d = t.adjoint(xi);
    for (auto& v : d) v += a;
  });
}

Value mean_of(const std::vector<Value>& scalars) {
  if (scalars.empty()) fail("mean_of: empty list has no mean");
  Tape& tp = tape_of(scalars[0], "mean_of");
  require_same_tape(scalars, "mean_of");
  double s = 0.0;
  std::vector<std::size_t> parents;
  parents.reserve(scalars.size());
  for (const Value& v : scalars) {
    if (v.tensor().numel() != 1) fail("mean_of: all terms must be scalars");
    s += v.tensor().data[0];
    parents.push_back(v.id);
  }
  const double inv = 1.0 / static_cast<double>(scalars.size());
  return tp.emit(Tensor::scalar(s * inv), parents, [parents, inv](Tape& t, std::size_t self) {
    const double a = t.adjoint(self)[0] * inv;
    for (std::size_t pid : parents) {
      if (t.needs_grad(pid)) t.adjoint(pid)[0] += a;
    }
  });
}

double euclidean_distance(const std::vector<double>& u, const std::vector<double>& v) {
  if (u.size() != v.size()) fail("euclidean_distance: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double d = u[i] - v[i];
    s += d * d;
  }
  return std::sqrt(s);
}

Value euclidean_distance(Value u, Value v) {
  Tape& tp = tape_of(u, "euclidean_distance");
  require_same_tape({u, v}, "euclidean_distance");
  require_same_shape(u.tensor(), v.tensor(), "euclidean_distance");
  const double d = euclidean_distance(u.tensor().data, v.tensor().data);
  const std::size_t ui = u.id, vi = v.id;
  return tp.emit(Tensor::scalar(d), {ui, vi}, [ui, vi](Tape& t, std::size_t self) {
    const double dist = t.tensor(self).data[0];
    if (dist == 0.0) return;  // kink of the norm; subgradient 0
    const double a = t.adjoint(self)[0] / dist;
    const auto& uu = t.tensor(ui).data;
    const auto& vv = t.tensor(vi).data;
    if (t.needs_grad(ui)) {
      auto& d1 = t.adjoint(ui);
      for (std::size_t i = 0; i < uu.size(); ++i) d1[i] += a * (uu[i] - vv[i]);
    }
    if (t.needs_grad(vi)) {
      auto& d2 = t.adjoint(vi);
      for (std::size_t i = 0; i < uu.size(); ++i) d2[i] -= a * (uu[i] - vv[i]);
    }
  });
}

Value batchnorm(const std::vector<Value>& xs, Value gamma, Value beta, Tensor& running_mean,
                Tensor& running_var, double momentum, double eps, Mode mode) {
  if (xs.empty()) fail("batchnorm: empty batch");
  if (eps <= 0.0) fail("batchnorm: eps must be positive");
  Tape& tp = tape_of(xs[0], "batchnorm");
  require_same_tape(xs, "batchnorm");
  require_same_tape({xs[0], gamma, beta}, "batchnorm");
  const Tensor& first = xs[0].tensor();
  const int C = first.dim(0);
  for (const Value& v : xs) require_same_shape(v.tensor(), first, "batchnorm");
  if (gamma.tensor().shape != std::vector<int>{C} || beta.tensor().shape != std::vector<int>{C}) {
    fail("batchnorm: gamma/beta must be [" + std::to_string(C) + "]");
  }
  if (running_mean.shape != std::vector<int>{C} || running_var.shape != std::vector<int>{C}) {
    fail("batchnorm: running stats must be [" + std::to_string(C) + "]");
  }

  const int N = static_cast<int>(xs.size());
  const std::size_t rest = first.data.size() / static_cast<std::size_t>(C);
  const double m_count = static_cast<double>(N) * static_cast<double>(rest);

  std::vector<double> mean(static_cast<std::size_t>(C), 0.0);
  std::vector<double> var(static_cast<std::size_t>(C), 0.0);
  if (mode == Mode::Train) {
    for (const Value& v : xs) {
      const auto& d = v.tensor().data;
      for (int c = 0; c < C; ++c) {
        const double* p = d.data() + static_cast<std::size_t>(c) * rest;
        for (std::size_t j = 0; j < rest; ++j) mean[static_cast<std::size_t>(c)] += p[j];
      }
    }
    for (auto& m : mean) m /= m_count;
    for (const Value& v : xs) {
      const auto& d = v.tensor().data;
      for (int c = 0; c < C; ++c) {
        const double* p = d.data() + static_cast<std::size_t>(c) * rest;
        const double mc = mean[static_cast<std::size_t>(c)];
        for (std::size_t j = 0; j < rest; ++j) {
          var[static_cast<std::size_t>(c)] += (p[j] - mc) * (p[j] - mc);
        }
      }
    }
    for (auto& v : var) v /= m_count;
    for (int c = 0; c < C; ++c) {
      running_mean.data[static_cast<std::size_t>(c)] =
          momentum * running_mean.data[static_cast<std::size_t>(c)] +
          (1.0 - momentum) * mean[static_cast<std::size_t>(c)];
      running_var.data[static_cast<std::size_t>(c)] =
          momentum * running_var.data[static_cast<std::size_t>(c)] +
          (1.0 - momentum) * var[static_cast<std::size_t>(c)];
    }
  } else {
    mean = running_mean.data;
    var = running_var.data;
  }

  std::vector<double> invstd(static_cast<std::size_t>(C));
  for (int c = 0; c < C; ++c) {
    invstd[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(var[static_cast<std::size_t>(c)] + eps);
  }

  std::vector<int> out_shape{N};
  out_shape.insert(out_shape.end(), first.shape.begin(), first.shape.end());
  Tensor out = Tensor::zeros(out_shape);
  const auto& g = gamma.tensor().data;
  const auto& b = beta.tensor().data;
  for (int s = 0; s < N; ++s) {
    const auto& d = xs[static_cast<std::size_t>(s)].tensor().data;
    double* op = out.data.data() + static_cast<std::size_t>(s) * d.size();
    for (int c = 0; c < C; ++c) {
      const double* p = d.data() + static_cast<std::size_t>(c) * rest;
      double* q = op + static_cast<std::size_t>(c) * rest;
      const double mc = mean[static_cast<std::size_t>(c)];
      const double is = invstd[static_cast<std::size_t>(c)];
      const double gc = g[static_cast<std::size_t>(c)];
      const double bc = b[static_cast<std::size_t>(c)];
      for (std::size_t j = 0; j < rest; ++j) q[j] = gc * (p[j] - mc) * is + bc;
    }
  }

  std::vector<std::size_t> parents;
  std::vector<std::size_t> xid;
  for (const Value& v : xs) {
    parents.push_back(v.id);
    xid.push_back(v.id);
  }
  parents.push_back(gamma.id);
  parents.push_back(beta.id);
  const std::size_t gi = gamma.id, bi = beta.id;
  const bool train = mode == Mode::Train;
  return tp.emit(
      std::move(out), parents,
      [xid, gi, bi, C, rest, m_count, train, mean = std::move(mean),
       invstd = std::move(invstd)](Tape& t, std::size_t self) {
        const auto& adj = t.adjoint(self);
        const int N = static_cast<int>(xid.size());
        const auto& g = t.tensor(gi).data;
        const std::size_t sample = static_cast<std::size_t>(C) * rest;

        // per-channel sums over the whole batch
        std::vector<double> s1(static_cast<std::size_t>(C), 0.0);  // sum adj
        std::vector<double> s2(static_cast<std::size_t>(C), 0.0);  // sum adj * xhat
        for (int s = 0; s < N; ++s) {
          const auto& x = t.tensor(xid[static_cast<std::size_t>(s)]).data;
          const double* a = adj.data() + static_cast<std::size_t>(s) * sample;
          for (int c = 0; c < C; ++c) {
            const double mc = mean[static_cast<std::size_t>(c)];
            const double is = invstd[static_cast<std::size_t>(c)];
            const double* xp = x.data() + static_cast<std::size_t>(c) * rest;
            const double* ap = a + static_cast<std::size_t>(c) * rest;
            for (std::size_t j = 0; j < rest; ++j) {
              s1[static_cast<std::size_t>(c)] += ap[j];
              s2[static_cast<std::size_t>(c)] += ap[j] * (xp[j] - mc) * is;
            }
          }
        }
        if (t.needs_grad(bi)) {
          auto& db = t.adjoint(bi);
          for (int c = 0; c < C; ++c) db[static_cast<std::size_t>(c)] += s1[static_cast<std::size_t>(c)];
        }
        if (t.needs_grad(gi)) {
          auto& dg = t.adjoint(gi);
          for (int c = 0; c < C; ++c) dg[static_cast<std::size_t>(c)] += s2[static_cast<std::size_t>(c)];
        }
        for (int s = 0; s < N; ++s) {
          const std::size_t pid = xid[static_cast<std::size_t>(s)];
          if (!t.needs_grad(pid)) continue;
          const auto& x = t.tensor(pid).data;
          const double* a = adj.data() + static_cast<std::size_t>(s) * sample;
          auto& dx = t.adjoint(pid);
          for (int c = 0; c < C; ++c) {
            const double mc = mean[static_cast<std::size_t>(c)];
            const double is = invstd[static_cast<std::size_t>(c)];
            const double gc = g[static_cast<std::size_t>(c)];
            const double* xp = x.data() + static_cast<std::size_t>(c) * rest;
            const double* ap = a + static_cast<std::size_t>(c) * rest;
            double* dp = dx.data() + static_cast<std::size_t>(c) * rest;
            if (train) {
              const double k1 = s1[static_cast<std::size_t>(c)] / m_count;
              const double k2 = s2[static_cast<std::size_t>(c)] / m_count;
              for (std::size_t j = 0; j < rest; ++j) {
                const double xhat = (xp[j] - mc) * is;
                dp[j] += gc * is * (ap[j] - k1 - xhat * k2);
              }
            } else {
              for (std::size_t j = 0; j < rest; ++j) dp[j] += gc * is * ap[j];
            }
          }
        }
      });
}

double finite_diff_check_sampled(const std::function<Value(Tape&)>& f, Tensor& target, double eps,
                                 int max_coords, Rng& rng) {
  if (eps <= 0.0) fail("finite_diff_check: eps must be positive");
  if (!target.requires_grad) fail("finite_diff_check: target must require grad");

  target.zero_grad();
  {
    Tape tape;
    Value loss = f(tape);
    if (loss.tensor().numel() != 1) fail("finite_diff_check: f must return a scalar");
    tape.backward(loss);
  }
  const std::vector<double> analytic = target.grad;

  const int n = target.numel();
  std::vector<int> coords;
  if (max_coords >= n) {
    coords.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
  } else {
    coords = rng.sample_without_replacement(n, max_coords);
  }

  auto eval = [&]() {
    Tape tape;
    return f(tape).scalar();
  };

  double worst = 0.0;
  for (int k : coords) {
    const std::size_t i = static_cast<std::size_t>(k);
    const double saved = target.data[i];
    target.data[i] = saved + eps;
    const double lp = eval();
    target.data[i] = saved - eps;
    const double lm = eval();
    target.data[i] = saved;
    const double numeric = (lp - lm) / (2.0 * eps);
    const double a = analytic[i];
    const double rel = std::abs(a - numeric) / std::max(1.0, std::abs(a));
    worst = std::max(worst, rel);
  }
  return worst;
}

double finite_diff_check(const std::function<Value(Tape&)>& f, Tensor& target, double eps) {
  Rng rng(0);
  return finite_diff_check_sampled(f, target, eps, target.numel(), rng);
}

}  // namespace facemetric
