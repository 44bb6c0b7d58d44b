// Neural-net building blocks with explicit forward/backward passes.
//
// Layout conventions used throughout:
//   * activations are feature-major matrices F x B (columns = samples),
//   * conv feature maps flatten as (channel, y, x) -> c*H*W + y*W + x,
//   * im2col columns are indexed b*P + p with P output positions per sample.
#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "crab/common.hpp"
#include "crab/rng.hpp"

namespace crab::nn {

template <typename T>
struct Param {
  std::string name;
  Matrix<T> value;
  Matrix<T> grad;
  bool trainable = true;
};

// Owns every parameter and stat buffer of a model; layers keep raw pointers.
// Registration order is construction order, which fixes the init draw order,
// the optimizer slot order and the checkpoint layout.
template <typename T>
class ParamStore {
 public:
  Param<T>* add(const std::string& name, Eigen::Index rows, Eigen::Index cols,
                bool trainable = true) {
    auto p = std::make_unique<Param<T>>();
    p->name = name;
    p->value = Matrix<T>::Zero(rows, cols);
    p->grad = Matrix<T>::Zero(rows, cols);
    p->trainable = trainable;
    params_.push_back(std::move(p));
    return params_.back().get();
  }

  std::size_t size() const { return params_.size(); }
  Param<T>& operator[](std::size_t i) { return *params_[i]; }
  const Param<T>& operator[](std::size_t i) const { return *params_[i]; }

  Param<T>* find(const std::string& name) {
    for (auto& p : params_)
      if (p->name == name) return p.get();
    return nullptr;
  }

  void zero_grad() {
    for (auto& p : params_) p->grad.setZero();
  }

  std::size_t scalar_count(bool trainable_only) const {
    std::size_t n = 0;
    for (const auto& p : params_)
      if (!trainable_only || p->trainable) n += p->value.size();
    return n;
  }

 private:
  std::vector<std::unique_ptr<Param<T>>> params_;
};

// Uniform(-bound, bound) with bound = scale / sqrt(fan_in). Draws happen in
// double so every scalar instantiation of a model starts from the same values.
template <typename T>
void init_uniform(Param<T>* p, double fan_in, SeededRng& rng, double scale = 1.0) {
  const double bound = scale / std::sqrt(fan_in);
  for (Eigen::Index j = 0; j < p->value.cols(); ++j)
    for (Eigen::Index i = 0; i < p->value.rows(); ++i)
      p->value(i, j) = static_cast<T>((2.0 * rng.uniform() - 1.0) * bound);
}

// ---------------------------------------------------------------------------
// Activations

template <typename T>
Matrix<T> relu_forward(const Matrix<T>& x) {
  return x.cwiseMax(T(0));
}
template <typename T>
Matrix<T> relu_backward(const Matrix<T>& dy, const Matrix<T>& y) {
  return (y.array() > T(0)).template cast<T>() * dy.array();
}

template <typename T>
Matrix<T> lrelu_forward(const Matrix<T>& x, T alpha) {
  return x.array().max(x.array() * alpha);
}
template <typename T>
Matrix<T> lrelu_backward(const Matrix<T>& dy, const Matrix<T>& y, T alpha) {
  return dy.array() * (y.array() > T(0)).select(
      Eigen::ArrayXX<T>::Constant(y.rows(), y.cols(), T(1)),
      Eigen::ArrayXX<T>::Constant(y.rows(), y.cols(), alpha));
}

template <typename T>
Matrix<T> sigmoid_forward(const Matrix<T>& x) {
  return x.unaryExpr([](T v) {
    return v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                     : std::exp(v) / (T(1) + std::exp(v));
  });
}
template <typename T>
Matrix<T> sigmoid_backward(const Matrix<T>& dy, const Matrix<T>& y) {
  return dy.array() * y.array() * (T(1) - y.array());
}

template <typename T>
Matrix<T> softplus_forward(const Matrix<T>& x) {
  return x.unaryExpr([](T v) {
    return std::log1p(std::exp(-std::abs(v))) + std::max(v, T(0));
  });
}
template <typename T>
Matrix<T> softplus_backward(const Matrix<T>& dy, const Matrix<T>& x) {
  return dy.array() * sigmoid_forward<T>(x).array();
}

// ---------------------------------------------------------------------------
// Linear

template <typename T>
struct Linear {
  struct Cache {
    Matrix<T> x;
  };

  Param<T>* W = nullptr;  // out x in
  Param<T>* b = nullptr;  // out x 1
  int in = 0, out = 0;

  void build(ParamStore<T>& store, const std::string& name, int in_dim,
             int out_dim, SeededRng& rng, double init_scale = 1.0) {
    in = in_dim;
    out = out_dim;
    W = store.add(name + ".W", out, in);
    b = store.add(name + ".b", out, 1);
    init_uniform(W, in, rng, init_scale);
  }

  Matrix<T> forward(const Matrix<T>& x, Cache* cache) const {
    require<ShapeError>(x.rows() == in, "Linear: input dim mismatch");
    if (cache) cache->x = x;
    Matrix<T> y = W->value * x;
    y.colwise() += b->value.col(0);
    return y;
  }

  Matrix<T> backward(const Matrix<T>& dy, const Cache& cache) {
    W->grad.noalias() += dy * cache.x.transpose();
    b->grad.col(0) += dy.rowwise().sum();
    return W->value.transpose() * dy;
  }
};

// ---------------------------------------------------------------------------
// Conv2d (stride/pad, square kernel)

struct ConvSpec {
  int in_ch = 0, out_ch = 0, k = 0, stride = 1, pad = 0;
  int in_h = 0, in_w = 0;
  int out_h() const { return (in_h + 2 * pad - k) / stride + 1; }
  int out_w() const { return (in_w + 2 * pad - k) / stride + 1; }
  int in_features() const { return in_ch * in_h * in_w; }
  int out_features() const { return out_ch * out_h() * out_w(); }
  int col_rows() const { return in_ch * k * k; }
  int positions() const { return out_h() * out_w(); }
};

// Gathers conv receptive fields: X (Cin*H*W) x B  ->  (Cin*k*k) x (P*B).
template <typename T>
Matrix<T> im2col(const Matrix<T>& x, const ConvSpec& s) {
  const int P = s.positions(), B = static_cast<int>(x.cols());
  const int OH = s.out_h(), OW = s.out_w();
  Matrix<T> cols = Matrix<T>::Zero(s.col_rows(), static_cast<Eigen::Index>(P) * B);
  for (int b = 0; b < B; ++b) {
    for (int oy = 0; oy < OH; ++oy) {
      for (int ox = 0; ox < OW; ++ox) {
        const int p = oy * OW + ox;
        const Eigen::Index col = static_cast<Eigen::Index>(b) * P + p;
        for (int c = 0; c < s.in_ch; ++c) {
          for (int ky = 0; ky < s.k; ++ky) {
            const int iy = oy * s.stride - s.pad + ky;
            if (iy < 0 || iy >= s.in_h) continue;
            for (int kx = 0; kx < s.k; ++kx) {
              const int ix = ox * s.stride - s.pad + kx;
              if (ix < 0 || ix >= s.in_w) continue;
              cols((c * s.k + ky) * s.k + kx, col) =
                  x(static_cast<Eigen::Index>(c) * s.in_h * s.in_w + iy * s.in_w + ix, b);
            }
          }
        }
      }
    }
  }
  return cols;
}

// Scatter-add inverse of im2col.
template <typename T>
Matrix<T> col2im(const Matrix<T>& cols, const ConvSpec& s, int batch) {
  const int P = s.positions();
  const int OH = s.out_h(), OW = s.out_w();
  Matrix<T> x = Matrix<T>::Zero(s.in_features(), batch);
  for (int b = 0; b < batch; ++b) {
    for (int oy = 0; oy < OH; ++oy) {
      for (int ox = 0; ox < OW; ++ox) {
        const int p = oy * OW + ox;
        const Eigen::Index col = static_cast<Eigen::Index>(b) * P + p;
        for (int c = 0; c < s.in_ch; ++c) {
          for (int ky = 0; ky < s.k; ++ky) {
            const int iy = oy * s.stride - s.pad + ky;
            if (iy < 0 || iy >= s.in_h) continue;
            for (int kx = 0; kx < s.k; ++kx) {
              const int ix = ox * s.stride - s.pad + kx;
              if (ix < 0 || ix >= s.in_w) continue;
              x(static_cast<Eigen::Index>(c) * s.in_h * s.in_w + iy * s.in_w + ix, b) +=
                  cols((c * s.k + ky) * s.k + kx, col);
            }
          }
        }
      }
    }
  }
  return x;
}

// Cout x (P*B)  ->  (Cout*P) x B
template <typename T>
Matrix<T> channels_to_features(const Matrix<T>& y0, int channels, int P, int B) {
  Matrix<T> y(static_cast<Eigen::Index>(channels) * P, B);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < channels; ++c)
      for (int p = 0; p < P; ++p)
        y(static_cast<Eigen::Index>(c) * P + p, b) = y0(c, static_cast<Eigen::Index>(b) * P + p);
  return y;
}

// (Cout*P) x B  ->  Cout x (P*B)
template <typename T>
Matrix<T> features_to_channels(const Matrix<T>& y, int channels, int P, int B) {
  Matrix<T> y0(channels, static_cast<Eigen::Index>(P) * B);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < channels; ++c)
      for (int p = 0; p < P; ++p)
        y0(c, static_cast<Eigen::Index>(b) * P + p) = y(static_cast<Eigen::Index>(c) * P + p, b);
  return y0;
}

template <typename T>
struct Conv2d {
  struct Cache {
    Matrix<T> cols;
  };

  Param<T>* W = nullptr;  // out_ch x (in_ch*k*k)
  Param<T>* b = nullptr;  // out_ch x 1
  ConvSpec spec;

  void build(ParamStore<T>& store, const std::string& name, const ConvSpec& s,
             SeededRng& rng) {
    spec = s;
    W = store.add(name + ".W", s.out_ch, s.col_rows());
    b = store.add(name + ".b", s.out_ch, 1);
    init_uniform(W, s.col_rows(), rng);
  }

  Matrix<T> forward(const Matrix<T>& x, Cache* cache) const {
    require<ShapeError>(x.rows() == spec.in_features(), "Conv2d: input shape mismatch");
    const int B = static_cast<int>(x.cols());
    Matrix<T> cols = im2col(x, spec);
    Matrix<T> y0 = W->value * cols;
    y0.colwise() += b->value.col(0);
    if (cache) cache->cols = std::move(cols);
    return channels_to_features(y0, spec.out_ch, spec.positions(), B);
  }

  Matrix<T> backward(const Matrix<T>& dy, const Cache& cache) {
    const int B = static_cast<int>(dy.cols());
    Matrix<T> dy0 = features_to_channels(dy, spec.out_ch, spec.positions(), B);
    W->grad.noalias() += dy0 * cache.cols.transpose();
    b->grad.col(0) += dy0.rowwise().sum();
    Matrix<T> dcols = W->value.transpose() * dy0;
    return col2im(dcols, spec, B);
  }
};

// ---------------------------------------------------------------------------
// ConvTranspose2d. Implemented as the adjoint of a conv whose geometry maps
// our output back to our input; `virt` below is that virtual conv.

template <typename T>
struct ConvTranspose2d {
  struct Cache {
    Matrix<T> x0;  // Cin x (P*B)
  };

  Param<T>* W = nullptr;  // in_ch x (out_ch*k*k)
  Param<T>* b = nullptr;  // out_ch x 1
  int in_ch = 0, out_ch = 0, in_h = 0, in_w = 0;
  ConvSpec virt;

  void build(ParamStore<T>& store, const std::string& name, int in_channels,
             int out_channels, int k, int stride, int pad, int input_h,
             int input_w, SeededRng& rng) {
    in_ch = in_channels;
    out_ch = out_channels;
    in_h = input_h;
    in_w = input_w;
    virt.in_ch = out_channels;
    virt.out_ch = in_channels;
    virt.k = k;
    virt.stride = stride;
    virt.pad = pad;
    virt.in_h = (input_h - 1) * stride - 2 * pad + k;
    virt.in_w = (input_w - 1) * stride - 2 * pad + k;
    require<ShapeError>(virt.out_h() == input_h && virt.out_w() == input_w,
                        "ConvTranspose2d: inconsistent geometry");
    W = store.add(name + ".W", in_channels, out_channels * k * k);
    b = store.add(name + ".b", out_channels, 1);
    init_uniform(W, static_cast<double>(in_channels) * k * k, rng);
  }

  int out_h() const { return virt.in_h; }
  int out_w() const { return virt.in_w; }
  int out_features() const { return out_ch * out_h() * out_w(); }

  Matrix<T> forward(const Matrix<T>& x, Cache* cache) const {
    require<ShapeError>(x.rows() == static_cast<Eigen::Index>(in_ch) * in_h * in_w,
                        "ConvTranspose2d: input shape mismatch");
    const int B = static_cast<int>(x.cols());
    const int P = in_h * in_w;
    Matrix<T> x0 = features_to_channels(x, in_ch, P, B);
    Matrix<T> cols = W->value.transpose() * x0;
    Matrix<T> y = col2im(cols, virt, B);
    for (int c = 0; c < out_ch; ++c)
      y.middleRows(static_cast<Eigen::Index>(c) * out_h() * out_w(), out_h() * out_w())
          .array() += b->value(c, 0);
    if (cache) cache->x0 = std::move(x0);
    return y;
  }

  Matrix<T> backward(const Matrix<T>& dy, const Cache& cache) {
    const int B = static_cast<int>(dy.cols());
    const int P = in_h * in_w;
    for (int c = 0; c < out_ch; ++c)
      b->grad(c, 0) += dy.middleRows(static_cast<Eigen::Index>(c) * out_h() * out_w(),
                                     out_h() * out_w()).sum();
    Matrix<T> dcols = im2col(dy, virt);
    W->grad.noalias() += cache.x0 * dcols.transpose();
    Matrix<T> dx0 = W->value * dcols;
    return channels_to_features(dx0, in_ch, P, B);
  }
};

// ---------------------------------------------------------------------------
// BatchNorm over channels; features per channel = P (spatial positions).

template <typename T>
struct BatchNorm {
  struct Cache {
    Matrix<T> xhat;
    Vector<T> invstd;
  };

  Param<T>* gamma = nullptr;
  Param<T>* beta = nullptr;
  Param<T>* run_mean = nullptr;
  Param<T>* run_var = nullptr;
  int C = 0, P = 0;
  T momentum = T(0.1);
  T eps = T(1e-5);

  void build(ParamStore<T>& store, const std::string& name, int channels,
             int positions) {
    C = channels;
    P = positions;
    gamma = store.add(name + ".gamma", C, 1);
    beta = store.add(name + ".beta", C, 1);
    run_mean = store.add(name + ".run_mean", C, 1, /*trainable=*/false);
    run_var = store.add(name + ".run_var", C, 1, /*trainable=*/false);
    gamma->value.setOnes();
    run_var->value.setOnes();
  }

  Matrix<T> forward(const Matrix<T>& x, bool training, Cache* cache,
                    bool update_running = true) {
    require<ShapeError>(x.rows() == static_cast<Eigen::Index>(C) * P,
                        "BatchNorm: input shape mismatch");
    const int B = static_cast<int>(x.cols());
    const T n = static_cast<T>(P) * B;
    Matrix<T> y(x.rows(), B);
    Matrix<T> xhat(x.rows(), B);
    Vector<T> invstd(C);
    for (int c = 0; c < C; ++c) {
      auto xc = x.middleRows(static_cast<Eigen::Index>(c) * P, P);
      T mean, var;
      if (training) {
        mean = xc.sum() / n;
        var = (xc.array() - mean).square().sum() / n;
        if (update_running) {
          run_mean->value(c, 0) = (T(1) - momentum) * run_mean->value(c, 0) + momentum * mean;
          const T unbiased = n > 1 ? var * n / (n - 1) : var;
          run_var->value(c, 0) = (T(1) - momentum) * run_var->value(c, 0) + momentum * unbiased;
        }
      } else {
        mean = run_mean->value(c, 0);
        var = run_var->value(c, 0);
      }
      invstd[c] = T(1) / std::sqrt(var + eps);
      xhat.middleRows(static_cast<Eigen::Index>(c) * P, P) = (xc.array() - mean) * invstd[c];
      y.middleRows(static_cast<Eigen::Index>(c) * P, P) =
          xhat.middleRows(static_cast<Eigen::Index>(c) * P, P).array() * gamma->value(c, 0) +
          beta->value(c, 0);
    }
    if (cache) {
      cache->xhat = std::move(xhat);
      cache->invstd = std::move(invstd);
    }
    return y;
  }

  // Training-mode backward (batch statistics participate in the gradient).
  Matrix<T> backward(const Matrix<T>& dy, const Cache& cache) {
    const int B = static_cast<int>(dy.cols());
    const T n = static_cast<T>(P) * B;
    Matrix<T> dx(dy.rows(), B);
    for (int c = 0; c < C; ++c) {
      auto dyc = dy.middleRows(static_cast<Eigen::Index>(c) * P, P);
      auto xhatc = cache.xhat.middleRows(static_cast<Eigen::Index>(c) * P, P);
      const T sum_dy = dyc.sum();
      const T sum_dy_xhat = (dyc.array() * xhatc.array()).sum();
      gamma->grad(c, 0) += sum_dy_xhat;
      beta->grad(c, 0) += sum_dy;
      dx.middleRows(static_cast<Eigen::Index>(c) * P, P) =
          (gamma->value(c, 0) * cache.invstd[c] / n) *
          (n * dyc.array() - sum_dy - xhatc.array() * sum_dy_xhat);
    }
    return dx;
  }
};

}  // namespace crab::nn
