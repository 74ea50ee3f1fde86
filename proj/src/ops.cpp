#include "mvdiff/ops.hpp"

#include <Eigen/Core>
#include <cmath>

#include "mvdiff/errors.hpp"

namespace mvdiff::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using MapVec = Eigen::Map<Eigen::VectorXd>;
using CMapVec = Eigen::Map<const Eigen::VectorXd>;

CMapMat cmat(const Tensor& t, int64_t rows, int64_t cols) { return CMapMat(t.data(), rows, cols); }
MapMat mat(Tensor& t, int64_t rows, int64_t cols) { return MapMat(t.data(), rows, cols); }

void require_same_shape(const Var& a, const Var& b, const char* op) {
  MVD_REQUIRE(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                          " vs " + shape_str(b.shape()));
}

template <typename Fwd, typename Deriv>
Var unary(const Var& x, Fwd fwd, Deriv deriv) {
  Tensor out(x.shape());
  const double* xv = x.value().data();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = fwd(xv[i]);
  return make_op(std::move(out), {x}, [deriv](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    Tensor& g = p->grad_buffer();
    const double* xv = p->value.data();
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * deriv(xv[i]);
  });
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// [Ci, H, W] -> [Ci*k*k, Ho*Wo]
void im2col2d(const double* x, int64_t ci, int64_t h, int64_t w, int k, int stride, int pad, int64_t ho,
              int64_t wo, double* col) {
  for (int64_t c = 0; c < ci; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        double* row = col + ((c * k + ky) * k + kx) * ho * wo;
        for (int64_t oy = 0; oy < ho; ++oy) {
          const int64_t iy = oy * stride - pad + ky;
          for (int64_t ox = 0; ox < wo; ++ox) {
            const int64_t ix = ox * stride - pad + kx;
            row[oy * wo + ox] = (iy >= 0 && iy < h && ix >= 0 && ix < w) ? x[(c * h + iy) * w + ix] : 0.0;
          }
        }
      }
}

void col2im2d(const double* col, int64_t ci, int64_t h, int64_t w, int k, int stride, int pad, int64_t ho,
              int64_t wo, double* dx) {
  for (int64_t c = 0; c < ci; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const double* row = col + ((c * k + ky) * k + kx) * ho * wo;
        for (int64_t oy = 0; oy < ho; ++oy) {
          const int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (int64_t ox = 0; ox < wo; ++ox) {
            const int64_t ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dx[(c * h + iy) * w + ix] += row[oy * wo + ox];
          }
        }
      }
}

// [Ci, D, H, W] -> [Ci*27, D*H*W], unit padding.
void im2col3d(const double* x, int64_t ci, int64_t d, int64_t h, int64_t w, double* col) {
  const int64_t vol = d * h * w;
  for (int64_t c = 0; c < ci; ++c)
    for (int kz = 0; kz < 3; ++kz)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          double* row = col + (((c * 3 + kz) * 3 + ky) * 3 + kx) * vol;
          for (int64_t z = 0; z < d; ++z) {
            const int64_t iz = z + kz - 1;
            for (int64_t y = 0; y < h; ++y) {
              const int64_t iy = y + ky - 1;
              const bool zy_ok = iz >= 0 && iz < d && iy >= 0 && iy < h;
              for (int64_t xx = 0; xx < w; ++xx) {
                const int64_t ix = xx + kx - 1;
                row[(z * h + y) * w + xx] =
                    (zy_ok && ix >= 0 && ix < w) ? x[((c * d + iz) * h + iy) * w + ix] : 0.0;
              }
            }
          }
        }
}

void col2im3d(const double* col, int64_t ci, int64_t d, int64_t h, int64_t w, double* dx) {
  const int64_t vol = d * h * w;
  for (int64_t c = 0; c < ci; ++c)
    for (int kz = 0; kz < 3; ++kz)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          const double* row = col + (((c * 3 + kz) * 3 + ky) * 3 + kx) * vol;
          for (int64_t z = 0; z < d; ++z) {
            const int64_t iz = z + kz - 1;
            if (iz < 0 || iz >= d) continue;
            for (int64_t y = 0; y < h; ++y) {
              const int64_t iy = y + ky - 1;
              if (iy < 0 || iy >= h) continue;
              for (int64_t xx = 0; xx < w; ++xx) {
                const int64_t ix = xx + kx - 1;
                if (ix >= 0 && ix < w) dx[((c * d + iz) * h + iy) * w + ix] += row[(z * h + y) * w + xx];
              }
            }
          }
        }
}

int normalize_axis(int axis, int ndim) {
  if (axis < 0) axis += ndim;
  MVD_REQUIRE(axis >= 0 && axis < ndim, "axis out of range");
  return axis;
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  out.axpy(1.0, b.value());
  return make_op(std::move(out), {a, b}, [](Node& self) {
    for (auto& p : self.parents)
      if (p->requires_grad) p->grad_buffer().axpy(1.0, self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  out.axpy(-1.0, b.value());
  return make_op(std::move(out), {a, b}, [](Node& self) {
    if (self.parents[0]->requires_grad) self.parents[0]->grad_buffer().axpy(1.0, self.grad);
    if (self.parents[1]->requires_grad) self.parents[1]->grad_buffer().axpy(-1.0, self.grad);
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (pa->requires_grad) {
      Tensor& g = pa->grad_buffer();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      Tensor& g = pb->grad_buffer();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * pa->value[i];
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (auto& v : out.storage()) v *= s;
  return make_op(std::move(out), {a}, [s](Node& self) {
    if (self.parents[0]->requires_grad) self.parents[0]->grad_buffer().axpy(s, self.grad);
  });
}

Var mul_const(const Var& a, const Tensor& c) {
  MVD_REQUIRE(a.numel() == c.numel(), "mul_const: size mismatch");
  Tensor out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * c[i];
  return make_op(std::move(out), {a}, [c](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    Tensor& g = p->grad_buffer();
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * c[i];
  });
}

Var add_channel_bias(const Var& x, const Var& bias) {
  const int64_t b = x.dim(0), c = x.dim(1);
  MVD_REQUIRE(bias.numel() == c, "add_channel_bias: bias size must equal channel count");
  const int64_t inner = x.numel() / (b * c);
  Tensor out = x.value();
  for (int64_t i = 0; i < b; ++i)
    for (int64_t j = 0; j < c; ++j) {
      double* o = out.data() + (i * c + j) * inner;
      const double bv = bias.value()[j];
      for (int64_t k = 0; k < inner; ++k) o[k] += bv;
    }
  return make_op(std::move(out), {x, bias}, [b, c, inner](Node& self) {
    if (self.parents[0]->requires_grad) self.parents[0]->grad_buffer().axpy(1.0, self.grad);
    if (self.parents[1]->requires_grad) {
      Tensor& g = self.parents[1]->grad_buffer();
      for (int64_t i = 0; i < b; ++i)
        for (int64_t j = 0; j < c; ++j) {
          const double* go = self.grad.data() + (i * c + j) * inner;
          double s = 0.0;
          for (int64_t k = 0; k < inner; ++k) s += go[k];
          g[j] += s;
        }
    }
  });
}

Var add_batch_channel(const Var& x, const Var& v) {
  const int64_t b = x.dim(0), c = x.dim(1);
  MVD_REQUIRE(v.numel() == b * c, "add_batch_channel: expects [B, C] offsets");
  const int64_t inner = x.numel() / (b * c);
  Tensor out = x.value();
  for (int64_t i = 0; i < b * c; ++i) {
    double* o = out.data() + i * inner;
    const double bv = v.value()[i];
    for (int64_t k = 0; k < inner; ++k) o[k] += bv;
  }
  return make_op(std::move(out), {x, v}, [b, c, inner](Node& self) {
    if (self.parents[0]->requires_grad) self.parents[0]->grad_buffer().axpy(1.0, self.grad);
    if (self.parents[1]->requires_grad) {
      Tensor& g = self.parents[1]->grad_buffer();
      for (int64_t i = 0; i < b * c; ++i) {
        const double* go = self.grad.data() + i * inner;
        double s = 0.0;
        for (int64_t k = 0; k < inner; ++k) s += go[k];
        g[i] += s;
      }
    }
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  const int64_t out_f = weight.dim(0), in_f = weight.dim(1);
  MVD_REQUIRE(x.shape().back() == in_f, "linear: input features " + shape_str(x.shape()) +
                                            " do not match weight " + shape_str(weight.shape()));
  const int64_t rows = x.numel() / in_f;
  Shape out_shape = x.shape();
  out_shape.back() = out_f;
  Tensor out(out_shape);
  auto y = mat(out, rows, out_f);
  y.noalias() = cmat(x.value(), rows, in_f) * cmat(weight.value(), out_f, in_f).transpose();
  const bool has_bias = bias.defined();
  if (has_bias) y.rowwise() += CMapVec(bias.value().data(), out_f).transpose();
  std::vector<Var> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return make_op(std::move(out), inputs, [rows, in_f, out_f, has_bias](Node& self) {
    auto& px = self.parents[0];
    auto& pw = self.parents[1];
    auto gy = cmat(self.grad, rows, out_f);
    if (px->requires_grad) mat(px->grad_buffer(), rows, in_f).noalias() += gy * cmat(pw->value, out_f, in_f);
    if (pw->requires_grad)
      mat(pw->grad_buffer(), out_f, in_f).noalias() += gy.transpose() * cmat(px->value, rows, in_f);
    if (has_bias && self.parents[2]->requires_grad)
      MapVec(self.parents[2]->grad_buffer().data(), out_f) += gy.colwise().sum().transpose();
  });
}

Var matmul(const Var& a, const Var& b) {
  MVD_REQUIRE(a.shape().size() == 2 && b.shape().size() == 2 && a.dim(1) == b.dim(0), "matmul: bad shapes");
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  mat(out, m, n).noalias() = cmat(a.value(), m, k) * cmat(b.value(), k, n);
  return make_op(std::move(out), {a, b}, [m, k, n](Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    auto g = cmat(self.grad, m, n);
    if (pa->requires_grad) mat(pa->grad_buffer(), m, k).noalias() += g * cmat(pb->value, k, n).transpose();
    if (pb->requires_grad) mat(pb->grad_buffer(), k, n).noalias() += cmat(pa->value, m, k).transpose() * g;
  });
}

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad) {
  MVD_REQUIRE(x.shape().size() == 4 && weight.shape().size() == 4, "conv2d: expects 4-d input and kernel");
  const int64_t bsz = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int64_t co = weight.dim(0);
  const int k = static_cast<int>(weight.dim(2));
  MVD_REQUIRE(weight.dim(1) == ci, "conv2d: channel mismatch " + shape_str(x.shape()) + " vs " +
                                       shape_str(weight.shape()));
  const int64_t ho = (h + 2 * pad - k) / stride + 1, wo = (w + 2 * pad - k) / stride + 1;
  const int64_t kk = ci * k * k, hw = ho * wo;
  const bool direct = (k == 1 && stride == 1 && pad == 0);
  Tensor out({bsz, co, ho, wo});
  std::vector<double> col(direct ? 0 : kk * hw);
  auto wm = cmat(weight.value(), co, kk);
  for (int64_t b = 0; b < bsz; ++b) {
    const double* xb = x.value().data() + b * ci * h * w;
    const double* colp = xb;
    if (!direct) {
      im2col2d(xb, ci, h, w, k, stride, pad, ho, wo, col.data());
      colp = col.data();
    }
    MapMat(out.data() + b * co * hw, co, hw).noalias() = wm * CMapMat(colp, kk, hw);
  }
  const bool has_bias = bias.defined();
  if (has_bias) {
    for (int64_t b = 0; b < bsz; ++b)
      for (int64_t c = 0; c < co; ++c) {
        double* o = out.data() + (b * co + c) * hw;
        for (int64_t i = 0; i < hw; ++i) o[i] += bias.value()[c];
      }
  }
  std::vector<Var> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return make_op(std::move(out), inputs, [=](Node& self) {
    auto& px = self.parents[0];
    auto& pw = self.parents[1];
    std::vector<double> colb(direct ? 0 : kk * hw);
    std::vector<double> dcol(direct ? 0 : kk * hw);
    auto wm = cmat(pw->value, co, kk);
    for (int64_t b = 0; b < bsz; ++b) {
      auto gy = CMapMat(self.grad.data() + b * co * hw, co, hw);
      const double* xb = px->value.data() + b * ci * h * w;
      if (pw->requires_grad) {
        const double* colp = xb;
        if (!direct) {
          im2col2d(xb, ci, h, w, k, stride, pad, ho, wo, colb.data());
          colp = colb.data();
        }
        mat(pw->grad_buffer(), co, kk).noalias() += gy * CMapMat(colp, kk, hw).transpose();
      }
      if (px->requires_grad) {
        double* dxb = px->grad_buffer().data() + b * ci * h * w;
        if (direct) {
          MapMat(dxb, kk, hw).noalias() += wm.transpose() * gy;
        } else {
          MapMat(dcol.data(), kk, hw).noalias() = wm.transpose() * gy;
          col2im2d(dcol.data(), ci, h, w, k, stride, pad, ho, wo, dxb);
        }
      }
    }
    if (has_bias && self.parents[2]->requires_grad) {
      Tensor& gb = self.parents[2]->grad_buffer();
      for (int64_t b = 0; b < bsz; ++b)
        for (int64_t c = 0; c < co; ++c) {
          const double* g = self.grad.data() + (b * co + c) * hw;
          double s = 0.0;
          for (int64_t i = 0; i < hw; ++i) s += g[i];
          gb[c] += s;
        }
    }
  });
}

Var conv3d(const Var& x, const Var& weight, const Var& bias) {
  MVD_REQUIRE(x.shape().size() == 5 && weight.shape().size() == 5 && weight.dim(2) == 3,
              "conv3d: expects 5-d input and 3x3x3 kernel");
  const int64_t bsz = x.dim(0), ci = x.dim(1), d = x.dim(2), h = x.dim(3), w = x.dim(4);
  const int64_t co = weight.dim(0);
  MVD_REQUIRE(weight.dim(1) == ci, "conv3d: channel mismatch");
  const int64_t kk = ci * 27, vol = d * h * w;
  Tensor out({bsz, co, d, h, w});
  std::vector<double> col(kk * vol);
  auto wm = cmat(weight.value(), co, kk);
  for (int64_t b = 0; b < bsz; ++b) {
    im2col3d(x.value().data() + b * ci * vol, ci, d, h, w, col.data());
    MapMat(out.data() + b * co * vol, co, vol).noalias() = wm * CMapMat(col.data(), kk, vol);
  }
  const bool has_bias = bias.defined();
  if (has_bias)
    for (int64_t b = 0; b < bsz; ++b)
      for (int64_t c = 0; c < co; ++c) {
        double* o = out.data() + (b * co + c) * vol;
        for (int64_t i = 0; i < vol; ++i) o[i] += bias.value()[c];
      }
  std::vector<Var> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return make_op(std::move(out), inputs, [=](Node& self) {
    auto& px = self.parents[0];
    auto& pw = self.parents[1];
    std::vector<double> colb(kk * vol);
    auto wm = cmat(pw->value, co, kk);
    for (int64_t b = 0; b < bsz; ++b) {
      auto gy = CMapMat(self.grad.data() + b * co * vol, co, vol);
      if (pw->requires_grad) {
        im2col3d(px->value.data() + b * ci * vol, ci, d, h, w, colb.data());
        mat(pw->grad_buffer(), co, kk).noalias() += gy * CMapMat(colb.data(), kk, vol).transpose();
      }
      if (px->requires_grad) {
        MapMat(colb.data(), kk, vol).noalias() = wm.transpose() * gy;
        col2im3d(colb.data(), ci, d, h, w, px->grad_buffer().data() + b * ci * vol);
      }
    }
    if (has_bias && self.parents[2]->requires_grad) {
      Tensor& gb = self.parents[2]->grad_buffer();
      for (int64_t b = 0; b < bsz; ++b)
        for (int64_t c = 0; c < co; ++c) {
          const double* g = self.grad.data() + (b * co + c) * vol;
          double s = 0.0;
          for (int64_t i = 0; i < vol; ++i) s += g[i];
          gb[c] += s;
        }
    }
  });
}

Var upsample_nearest2x(const Var& x) {
  const int64_t bc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor out({x.dim(0), x.dim(1), 2 * h, 2 * w});
  for (int64_t p = 0; p < bc; ++p)
    for (int64_t y = 0; y < 2 * h; ++y)
      for (int64_t xx = 0; xx < 2 * w; ++xx)
        out[(p * 2 * h + y) * 2 * w + xx] = x.value()[(p * h + y / 2) * w + xx / 2];
  return make_op(std::move(out), {x}, [bc, h, w](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (int64_t p = 0; p < bc; ++p)
      for (int64_t y = 0; y < 2 * h; ++y)
        for (int64_t xx = 0; xx < 2 * w; ++xx)
          g[(p * h + y / 2) * w + xx / 2] += self.grad[(p * 2 * h + y) * 2 * w + xx];
  });
}

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps) {
  const int64_t b = x.dim(0), c = x.dim(1);
  MVD_REQUIRE(c % groups == 0, "group_norm: channels must divide into groups");
  const int64_t inner = x.numel() / (b * c);
  const int64_t cpg = c / groups, gsize = cpg * inner;
  std::vector<double> mu(b * groups), rstd(b * groups);
  Tensor out(x.shape());
  const double* xv = x.value().data();
  for (int64_t i = 0; i < b; ++i)
    for (int g = 0; g < groups; ++g) {
      const double* xs = xv + (i * c + g * cpg) * inner;
      double m = 0.0;
      for (int64_t k = 0; k < gsize; ++k) m += xs[k];
      m /= gsize;
      double v = 0.0;
      for (int64_t k = 0; k < gsize; ++k) v += (xs[k] - m) * (xs[k] - m);
      v /= gsize;
      const double r = 1.0 / std::sqrt(v + eps);
      mu[i * groups + g] = m;
      rstd[i * groups + g] = r;
      for (int64_t ch = 0; ch < cpg; ++ch) {
        const int64_t cc = g * cpg + ch;
        const double ga = gamma.value()[cc], be = beta.value()[cc];
        double* o = out.data() + (i * c + cc) * inner;
        const double* xc = xs + ch * inner;
        for (int64_t k = 0; k < inner; ++k) o[k] = (xc[k] - m) * r * ga + be;
      }
    }
  return make_op(std::move(out), {x, gamma, beta}, [=](Node& self) {
    auto& px = self.parents[0];
    auto& pg = self.parents[1];
    auto& pb = self.parents[2];
    const double* xv = px->value.data();
    const double* gy = self.grad.data();
    for (int64_t i = 0; i < b; ++i)
      for (int g = 0; g < groups; ++g) {
        const double m = mu[i * groups + g], r = rstd[i * groups + g];
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (int64_t ch = 0; ch < cpg; ++ch) {
          const int64_t cc = g * cpg + ch;
          const double ga = pg->value[cc];
          const int64_t base = (i * c + cc) * inner;
          double sg = 0.0, sgx = 0.0;
          for (int64_t k = 0; k < inner; ++k) {
            const double xhat = (xv[base + k] - m) * r;
            sg += gy[base + k];
            sgx += gy[base + k] * xhat;
          }
          if (pg->requires_grad) pg->grad_buffer()[cc] += sgx;
          if (pb->requires_grad) pb->grad_buffer()[cc] += sg;
          sum_dxhat += sg * ga;
          sum_dxhat_xhat += sgx * ga;
        }
        if (!px->requires_grad) continue;
        Tensor& gx = px->grad_buffer();
        const double mean_d = sum_dxhat / gsize, mean_dx = sum_dxhat_xhat / gsize;
        for (int64_t ch = 0; ch < cpg; ++ch) {
          const int64_t cc = g * cpg + ch;
          const double ga = pg->value[cc];
          const int64_t base = (i * c + cc) * inner;
          for (int64_t k = 0; k < inner; ++k) {
            const double xhat = (xv[base + k] - m) * r;
            gx[base + k] += r * (gy[base + k] * ga - mean_d - xhat * mean_dx);
          }
        }
      }
  });
}

Var silu(const Var& x) {
  return unary(
      x, [](double v) { return v * sigmoid(v); },
      [](double v) {
        const double s = sigmoid(v);
        return s + v * s * (1.0 - s);
      });
}

Var elu(const Var& x) {
  return unary(
      x, [](double v) { return v > 0 ? v : std::expm1(v); }, [](double v) { return v > 0 ? 1.0 : std::exp(v); });
}

Var relu(const Var& x) {
  return unary(
      x, [](double v) { return v > 0 ? v : 0.0; }, [](double v) { return v > 0 ? 1.0 : 0.0; });
}

Var softplus(const Var& x) {
  return unary(
      x, [](double v) { return v > 30 ? v : std::log1p(std::exp(v)); }, [](double v) { return sigmoid(v); });
}

Var concat(const std::vector<Var>& parts, int axis) {
  MVD_REQUIRE(!parts.empty(), "concat: no inputs");
  const Shape& s0 = parts[0].shape();
  axis = normalize_axis(axis, static_cast<int>(s0.size()));
  int64_t outer = 1, inner = 1, total = 0;
  for (int i = 0; i < axis; ++i) outer *= s0[i];
  for (size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  std::vector<int64_t> sizes;
  for (const auto& p : parts) {
    MVD_REQUIRE(p.shape().size() == s0.size(), "concat: rank mismatch");
    for (size_t i = 0; i < s0.size(); ++i)
      MVD_REQUIRE(static_cast<int>(i) == axis || p.shape()[i] == s0[i], "concat: shape mismatch");
    sizes.push_back(p.shape()[axis]);
    total += p.shape()[axis];
  }
  Shape out_shape = s0;
  out_shape[axis] = total;
  Tensor out(out_shape);
  int64_t off = 0;
  for (size_t j = 0; j < parts.size(); ++j) {
    const int64_t chunk = sizes[j] * inner;
    for (int64_t o = 0; o < outer; ++o)
      std::copy_n(parts[j].value().data() + o * chunk, chunk, out.data() + o * total * inner + off * inner);
    off += sizes[j];
  }
  return make_op(std::move(out), parts, [sizes, outer, inner, total](Node& self) {
    int64_t off = 0;
    for (size_t j = 0; j < sizes.size(); ++j) {
      const int64_t chunk = sizes[j] * inner;
      auto& p = self.parents[j];
      if (p->requires_grad) {
        Tensor& g = p->grad_buffer();
        for (int64_t o = 0; o < outer; ++o) {
          const double* src = self.grad.data() + o * total * inner + off * inner;
          double* dst = g.data() + o * chunk;
          for (int64_t k = 0; k < chunk; ++k) dst[k] += src[k];
        }
      }
      off += sizes[j];
    }
  });
}

Var slice(const Var& x, int axis, int64_t begin, int64_t end) {
  const Shape& s = x.shape();
  axis = normalize_axis(axis, static_cast<int>(s.size()));
  MVD_REQUIRE(0 <= begin && begin <= end && end <= s[axis], "slice: range out of bounds");
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  Shape out_shape = s;
  out_shape[axis] = end - begin;
  const int64_t full = s[axis] * inner, chunk = (end - begin) * inner;
  Tensor out(out_shape);
  for (int64_t o = 0; o < outer; ++o)
    std::copy_n(x.value().data() + o * full + begin * inner, chunk, out.data() + o * chunk);
  return make_op(std::move(out), {x}, [=](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (int64_t o = 0; o < outer; ++o) {
      double* dst = g.data() + o * full + begin * inner;
      const double* src = self.grad.data() + o * chunk;
      for (int64_t k = 0; k < chunk; ++k) dst[k] += src[k];
    }
  });
}

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return make_op(std::move(out), {x}, [](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
  });
}

Var transpose12(const Var& x) {
  MVD_REQUIRE(x.shape().size() == 3, "transpose12: expects [B, A, C]");
  const int64_t b = x.dim(0), a = x.dim(1), c = x.dim(2);
  Tensor out({b, c, a});
  for (int64_t i = 0; i < b; ++i)
    MapMat(out.data() + i * a * c, c, a) = CMapMat(x.value().data() + i * a * c, a, c).transpose();
  return make_op(std::move(out), {x}, [b, a, c](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (int64_t i = 0; i < b; ++i)
      MapMat(g.data() + i * a * c, a, c) += CMapMat(self.grad.data() + i * a * c, c, a).transpose();
  });
}

Var attention(const Var& q, const Var& k, const Var& v) {
  MVD_REQUIRE(q.shape().size() == 2 && k.shape().size() == 2 && v.shape().size() == 2, "attention: rank-2 inputs");
  const int64_t lq = q.dim(0), d = q.dim(1), lk = k.dim(0), dv = v.dim(1);
  MVD_REQUIRE(k.dim(1) == d && v.dim(0) == lk && lk > 0, "attention: shape mismatch");
  const double sc = 1.0 / std::sqrt(static_cast<double>(d));
  auto probs = std::make_shared<RowMat>(lq, lk);
  RowMat& p = *probs;
  p.noalias() = cmat(q.value(), lq, d) * cmat(k.value(), lk, d).transpose();
  p *= sc;
  for (int64_t i = 0; i < lq; ++i) {
    const double m = p.row(i).maxCoeff();
    p.row(i) = (p.row(i).array() - m).exp();
    p.row(i) /= p.row(i).sum();
  }
  Tensor out({lq, dv});
  mat(out, lq, dv).noalias() = p * cmat(v.value(), lk, dv);
  return make_op(std::move(out), {q, k, v}, [=](Node& self) {
    auto& pq = self.parents[0];
    auto& pk = self.parents[1];
    auto& pv = self.parents[2];
    const RowMat& p = *probs;
    auto go = cmat(self.grad, lq, dv);
    if (pv->requires_grad) mat(pv->grad_buffer(), lk, dv).noalias() += p.transpose() * go;
    if (!pq->requires_grad && !pk->requires_grad) return;
    RowMat ds = go * cmat(pv->value, lk, dv).transpose();
    const Eigen::VectorXd rows = (ds.array() * p.array()).rowwise().sum();
    ds = p.array() * (ds.colwise() - rows).array();
    ds *= sc;
    if (pq->requires_grad) mat(pq->grad_buffer(), lq, d).noalias() += ds * cmat(pk->value, lk, d);
    if (pk->requires_grad) mat(pk->grad_buffer(), lk, d).noalias() += ds.transpose() * cmat(pq->value, lq, d);
  });
}

Var embedding(const Var& table, const std::vector<int>& ids) {
  const int64_t vocab = table.dim(0), d = table.dim(1);
  Tensor out({static_cast<int64_t>(ids.size()), d});
  for (size_t i = 0; i < ids.size(); ++i) {
    MVD_REQUIRE(ids[i] >= 0 && ids[i] < vocab, "embedding: token id out of range");
    std::copy_n(table.value().data() + ids[i] * d, d, out.data() + i * d);
  }
  return make_op(std::move(out), {table}, [ids, d](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (size_t i = 0; i < ids.size(); ++i)
      for (int64_t j = 0; j < d; ++j) g[ids[i] * d + j] += self.grad[i * d + j];
  });
}

Var gather(const Var& src, const GatherPlan& plan) {
  MVD_REQUIRE(src.shape().size() == 2, "gather: expects [R, C] source");
  MVD_REQUIRE(static_cast<int64_t>(plan.index.size()) == plan.rows * plan.taps &&
                  plan.weight.size() == plan.index.size(),
              "gather: malformed plan");
  const int64_t c = src.dim(1);
  Tensor out({plan.rows, c});
  const double* s = src.value().data();
  for (int64_t r = 0; r < plan.rows; ++r) {
    double* o = out.data() + r * c;
    for (int t = 0; t < plan.taps; ++t) {
      const double wgt = plan.weight[r * plan.taps + t];
      if (wgt == 0.0) continue;
      const double* row = s + plan.index[r * plan.taps + t] * c;
      for (int64_t j = 0; j < c; ++j) o[j] += wgt * row[j];
    }
  }
  auto shared_plan = std::make_shared<GatherPlan>(plan);
  return make_op(std::move(out), {src}, [shared_plan, c](Node& self) {
    const GatherPlan& pl = *shared_plan;
    Tensor& g = self.parents[0]->grad_buffer();
    for (int64_t r = 0; r < pl.rows; ++r) {
      const double* go = self.grad.data() + r * c;
      for (int t = 0; t < pl.taps; ++t) {
        const double wgt = pl.weight[r * pl.taps + t];
        if (wgt == 0.0) continue;
        double* row = g.data() + pl.index[r * pl.taps + t] * c;
        for (int64_t j = 0; j < c; ++j) row[j] += wgt * go[j];
      }
    }
  });
}

Var sum(const Var& x) {
  Tensor out({1}, x.value().sum());
  return make_op(std::move(out), {x}, [](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    const double s = self.grad[0];
    for (auto& v : g.storage()) v += s;
  });
}

Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Var dot_const(const Var& x, const Tensor& w) {
  MVD_REQUIRE(x.numel() == w.numel(), "dot_const: size mismatch");
  double s = 0.0;
  for (int64_t i = 0; i < w.numel(); ++i) s += x.value()[i] * w[i];
  return make_op(Tensor({1}, s), {x}, [w](Node& self) {
    self.parents[0]->grad_buffer().axpy(self.grad[0], w);
  });
}

}  // namespace mvdiff::ad
