#pragma once

// Layer forward/backward contracts, SGD and the finite-difference oracle.

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "metasr/errors.hpp"
#include "metasr/params.hpp"
#include "metasr/rng.hpp"

namespace metasr {

enum class LayerKind { kFrameStack, kAffine, kTanh, kRecurrentBidi };

inline const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::kFrameStack: return "frame_stack";
    case LayerKind::kAffine: return "affine";
    case LayerKind::kTanh: return "tanh";
    case LayerKind::kRecurrentBidi: return "recurrent_bidi";
  }
  return "?";
}

inline LayerKind layer_kind_from_string(const std::string& s) {
  if (s == "frame_stack") return LayerKind::kFrameStack;
  if (s == "affine") return LayerKind::kAffine;
  if (s == "tanh") return LayerKind::kTanh;
  if (s == "recurrent_bidi") return LayerKind::kRecurrentBidi;
  throw ConfigError("unknown layer kind '" + s + "'");
}

/// One encoder layer. `name` prefixes the layer's parameter names and `aux`
/// holds the stacking stride for frame_stack.
struct LayerSpec {
  LayerKind kind = LayerKind::kAffine;
  std::string name;
  int input_dim = 0;
  int output_dim = 0;
  int aux = 0;

  int stride() const { return aux; }

  /// Checks the kind-specific dimension relations.
  void validate() const {
    auto fail = [&](const std::string& why) {
      throw DimensionError("layer '" + name + "' (" + to_string(kind) + "): " + why);
    };
    if (input_dim <= 0 || output_dim <= 0) fail("dimensions must be positive");
    switch (kind) {
      case LayerKind::kFrameStack:
        if (aux <= 0) fail("stride must be positive");
        if (output_dim != input_dim * aux)
          fail("output_dim " + std::to_string(output_dim) + " != input_dim * stride " +
               std::to_string(input_dim * aux));
        break;
      case LayerKind::kTanh:
        if (output_dim != input_dim) fail("tanh must preserve width");
        break;
      case LayerKind::kRecurrentBidi:
        if (output_dim % 2 != 0) fail("output_dim must be even (two directions)");
        break;
      case LayerKind::kAffine:
        break;
    }
  }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

inline LayerSpec frame_stack_layer(std::string name, int input_dim, int stride) {
  return {LayerKind::kFrameStack, std::move(name), input_dim, input_dim * stride, stride};
}
inline LayerSpec affine_layer(std::string name, int input_dim, int output_dim) {
  return {LayerKind::kAffine, std::move(name), input_dim, output_dim, 0};
}
inline LayerSpec tanh_layer(std::string name, int dim) {
  return {LayerKind::kTanh, std::move(name), dim, dim, 0};
}
/// Each direction carries output_dim / 2 units; outputs are [forward, backward].
inline LayerSpec recurrent_bidi_layer(std::string name, int input_dim, int output_dim) {
  return {LayerKind::kRecurrentBidi, std::move(name), input_dim, output_dim, 0};
}

struct ParamShape {
  std::string name;
  int rows = 0;
  int cols = 0;
  int fan_in = 0;
};

/// Parameter names and shapes a layer requires.
inline std::vector<ParamShape> layer_param_shapes(const LayerSpec& spec) {
  const std::string& p = spec.name;
  switch (spec.kind) {
    case LayerKind::kAffine:
      return {{p + ".W", spec.input_dim, spec.output_dim, spec.input_dim},
              {p + ".b", 1, spec.output_dim, spec.input_dim}};
    case LayerKind::kRecurrentBidi: {
      const int h = spec.output_dim / 2;
      const int fan = spec.input_dim + h;
      std::vector<ParamShape> out;
      for (const char* dir : {".bwd", ".fwd"}) {
        out.push_back({p + dir + ".Wh", h, h, fan});
        out.push_back({p + dir + ".Wx", spec.input_dim, h, fan});
        out.push_back({p + dir + ".b", 1, h, fan});
      }
      return out;
    }
    default:
      return {};
  }
}

/// Uniform init in [-r, r] with r = 1/sqrt(fan_in).
inline NamedParams init_layer_params(const LayerSpec& spec, Rng& rng) {
  NamedParams out;
  for (const auto& shape : layer_param_shapes(spec)) {
    const double r = 1.0 / std::sqrt(static_cast<double>(shape.fan_in));
    std::uniform_real_distribution<double> dist(-r, r);
    Matrix m(shape.rows, shape.cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
    out.set(shape.name, std::move(m));
  }
  return out;
}

/// Activations kept by forward_layer for the matching backward_layer call.
struct ForwardCache {
  LayerKind kind = LayerKind::kAffine;
  std::string layer;
  Matrix input;
  Matrix output;
};

namespace detail {

inline const Matrix& require_param(const LayerSpec& spec, const NamedParams& params,
                                   const ParamShape& shape) {
  if (!params.contains(shape.name))
    throw DimensionError("layer '" + spec.name + "': missing parameter '" + shape.name + "'");
  const Matrix& m = params.at(shape.name);
  if (m.rows() != shape.rows || m.cols() != shape.cols)
    throw DimensionError("layer '" + spec.name + "': parameter '" + shape.name + "' is " +
                         shape_str(m) + ", expected " + std::to_string(shape.rows) + "x" +
                         std::to_string(shape.cols));
  return m;
}

// h_t = tanh(x_t Wx + h_prev Wh + b), scanning forward or in reverse.
inline Matrix recurrent_scan(const Matrix& x, const Matrix& wx, const Matrix& wh,
                             const Matrix& b, bool reverse) {
  const Eigen::Index steps = x.rows();
  const Eigen::Index h = wh.rows();
  Matrix pre = x * wx;
  pre.rowwise() += b.row(0);
  Matrix out(steps, h);
  RowVector prev = RowVector::Zero(h);
  for (Eigen::Index i = 0; i < steps; ++i) {
    const Eigen::Index t = reverse ? steps - 1 - i : i;
    RowVector a = pre.row(t) + prev * wh;
    prev = a.array().tanh().matrix();
    out.row(t) = prev;
  }
  return out;
}

struct ScanGrads {
  Matrix grad_x;
  Matrix grad_wx;
  Matrix grad_wh;
  Matrix grad_b;
};

inline ScanGrads recurrent_scan_backward(const Matrix& x, const Matrix& hidden, const Matrix& wx,
                                         const Matrix& wh, const Matrix& grad_hidden,
                                         bool reverse) {
  const Eigen::Index steps = x.rows();
  const Eigen::Index h = wh.rows();
  ScanGrads g{Matrix::Zero(steps, x.cols()), Matrix::Zero(wx.rows(), h), Matrix::Zero(h, h),
              Matrix::Zero(1, h)};
  Matrix grad_pre(steps, h);
  RowVector carry = RowVector::Zero(h);
  for (Eigen::Index i = steps - 1; i >= 0; --i) {
    const Eigen::Index t = reverse ? steps - 1 - i : i;
    RowVector dh = grad_hidden.row(t) + carry;
    RowVector da = dh.array() * (1.0 - hidden.row(t).array().square());
    grad_pre.row(t) = da;
    if (i > 0) {
      const Eigen::Index prev_t = reverse ? t + 1 : t - 1;
      g.grad_wh.noalias() += hidden.row(prev_t).transpose() * da;
    }
    carry = da * wh.transpose();
  }
  g.grad_wx.noalias() = x.transpose() * grad_pre;
  g.grad_b = grad_pre.colwise().sum();
  g.grad_x.noalias() = grad_pre * wx.transpose();
  return g;
}

}  // namespace detail

/// Output rows for a layer given `rows` input rows.
inline Eigen::Index layer_output_rows(const LayerSpec& spec, Eigen::Index rows) {
  if (spec.kind == LayerKind::kFrameStack) return (rows + spec.aux - 1) / spec.aux;
  return rows;
}

inline std::pair<Matrix, ForwardCache> forward_layer(const LayerSpec& spec,
                                                     const NamedParams& params,
                                                     const Matrix& input) {
  spec.validate();
  if (input.cols() != spec.input_dim)
    throw DimensionError("layer '" + spec.name + "' (" + to_string(spec.kind) + "): input is " +
                         shape_str(input) + ", expected " + std::to_string(spec.input_dim) +
                         " columns");
  Matrix out;
  switch (spec.kind) {
    case LayerKind::kFrameStack: {
      const Eigen::Index s = spec.aux;
      const Eigen::Index f = spec.input_dim;
      out = Matrix::Zero(layer_output_rows(spec, input.rows()), spec.output_dim);
      for (Eigen::Index t = 0; t < input.rows(); ++t) out.block(t / s, (t % s) * f, 1, f) = input.row(t);
      break;
    }
    case LayerKind::kAffine: {
      const auto shapes = layer_param_shapes(spec);
      const Matrix& w = detail::require_param(spec, params, shapes[0]);
      const Matrix& b = detail::require_param(spec, params, shapes[1]);
      out.noalias() = input * w;
      out.rowwise() += b.row(0);
      break;
    }
    case LayerKind::kTanh:
      out = input.array().tanh().matrix();
      break;
    case LayerKind::kRecurrentBidi: {
      const auto shapes = layer_param_shapes(spec);
      const Matrix& bwd_wh = detail::require_param(spec, params, shapes[0]);
      const Matrix& bwd_wx = detail::require_param(spec, params, shapes[1]);
      const Matrix& bwd_b = detail::require_param(spec, params, shapes[2]);
      const Matrix& fwd_wh = detail::require_param(spec, params, shapes[3]);
      const Matrix& fwd_wx = detail::require_param(spec, params, shapes[4]);
      const Matrix& fwd_b = detail::require_param(spec, params, shapes[5]);
      const Eigen::Index h = spec.output_dim / 2;
      out.resize(input.rows(), spec.output_dim);
      out.leftCols(h) = detail::recurrent_scan(input, fwd_wx, fwd_wh, fwd_b, false);
      out.rightCols(h) = detail::recurrent_scan(input, bwd_wx, bwd_wh, bwd_b, true);
      break;
    }
  }
  ForwardCache cache{spec.kind, spec.name, input, out};
  return {std::move(out), std::move(cache)};
}

inline std::pair<Matrix, NamedParams> backward_layer(const LayerSpec& spec,
                                                     const NamedParams& params,
                                                     const ForwardCache& cache,
                                                     const Matrix& grad_out) {
  if (cache.kind != spec.kind || cache.layer != spec.name || cache.input.cols() != spec.input_dim ||
      cache.output.cols() != spec.output_dim)
    throw CacheError("layer '" + spec.name + "': cache was produced by layer '" + cache.layer +
                     "' (" + to_string(cache.kind) + ")");
  if (grad_out.rows() != cache.output.rows() || grad_out.cols() != cache.output.cols())
    throw CacheError("layer '" + spec.name + "': grad_out is " + shape_str(grad_out) +
                     " but cached output is " + shape_str(cache.output));
  const Matrix& x = cache.input;
  NamedParams grads;
  Matrix grad_in;
  switch (spec.kind) {
    case LayerKind::kFrameStack: {
      const Eigen::Index s = spec.aux;
      const Eigen::Index f = spec.input_dim;
      grad_in.resize(x.rows(), f);
      for (Eigen::Index t = 0; t < x.rows(); ++t) grad_in.row(t) = grad_out.block(t / s, (t % s) * f, 1, f);
      break;
    }
    case LayerKind::kAffine: {
      const auto shapes = layer_param_shapes(spec);
      const Matrix& w = detail::require_param(spec, params, shapes[0]);
      detail::require_param(spec, params, shapes[1]);
      grads.set(shapes[0].name, x.transpose() * grad_out);
      grads.set(shapes[1].name, grad_out.colwise().sum());
      grad_in.noalias() = grad_out * w.transpose();
      break;
    }
    case LayerKind::kTanh:
      grad_in = (grad_out.array() * (1.0 - cache.output.array().square())).matrix();
      break;
    case LayerKind::kRecurrentBidi: {
      const auto shapes = layer_param_shapes(spec);
      const Matrix& bwd_wh = detail::require_param(spec, params, shapes[0]);
      const Matrix& bwd_wx = detail::require_param(spec, params, shapes[1]);
      detail::require_param(spec, params, shapes[2]);
      const Matrix& fwd_wh = detail::require_param(spec, params, shapes[3]);
      const Matrix& fwd_wx = detail::require_param(spec, params, shapes[4]);
      detail::require_param(spec, params, shapes[5]);
      const Eigen::Index h = spec.output_dim / 2;
      const Matrix fwd_hidden = cache.output.leftCols(h);
      const Matrix bwd_hidden = cache.output.rightCols(h);
      auto gf = detail::recurrent_scan_backward(x, fwd_hidden, fwd_wx, fwd_wh, grad_out.leftCols(h), false);
      auto gb = detail::recurrent_scan_backward(x, bwd_hidden, bwd_wx, bwd_wh, grad_out.rightCols(h), true);
      grads.set(shapes[0].name, std::move(gb.grad_wh));
      grads.set(shapes[1].name, std::move(gb.grad_wx));
      grads.set(shapes[2].name, std::move(gb.grad_b));
      grads.set(shapes[3].name, std::move(gf.grad_wh));
      grads.set(shapes[4].name, std::move(gf.grad_wx));
      grads.set(shapes[5].name, std::move(gf.grad_b));
      grad_in = gf.grad_x + gb.grad_x;
      break;
    }
  }
  return {std::move(grad_in), std::move(grads)};
}

/// Central-difference gradient of `loss_fn` at `params`, one entry at a time.
template <typename LossFn>
NamedParams finite_diff_grad(LossFn&& loss_fn, const NamedParams& params, double step) {
  NamedParams probe = params;
  NamedParams grad = params.zeros_like();
  for (const auto& [name, m] : params) {
    Matrix& g = grad.at(name);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      double& entry = probe.at(name).data()[i];
      const double saved = entry;
      entry = saved + step;
      const double up = loss_fn(static_cast<const NamedParams&>(probe));
      entry = saved - step;
      const double down = loss_fn(static_cast<const NamedParams&>(probe));
      entry = saved;
      if (!std::isfinite(up) || !std::isfinite(down))
        throw NumericError("finite_diff_grad: non-finite loss while perturbing '" + name +
                           "' entry " + std::to_string(i));
      g.data()[i] = (up - down) / (2.0 * step);
    }
  }
  return grad;
}

/// params - lr * grads, as a new collection.
inline NamedParams sgd_step(const NamedParams& params, const NamedParams& grads, double lr) {
  params.require_same_layout(grads, "sgd_step");
  NamedParams out = params;
  out.axpy(-lr, grads);
  return out;
}

}  // namespace metasr
