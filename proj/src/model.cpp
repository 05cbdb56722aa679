#include "gdstab/model.hpp"

#include "gdstab/errors.hpp"

#include <boost/math/constants/constants.hpp>

#include <cmath>
#include <limits>
#include <string>

namespace gdstab {

std::string to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::gelu: return "gelu";
    case Activation::tanh: return "tanh";
    case Activation::sigmoid: return "sigmoid";
  }
  return "?";
}

std::string to_string(LossKind k) {
  return k == LossKind::mse ? "mse" : "softmax_cross_entropy";
}

Activation parse_activation(std::string_view name) {
  if (name == "identity" || name == "linear") return Activation::identity;
  if (name == "relu") return Activation::relu;
  if (name == "gelu") return Activation::gelu;
  if (name == "tanh") return Activation::tanh;
  if (name == "sigmoid") return Activation::sigmoid;
  throw InvalidArgument("unknown activation '" + std::string(name) + "'");
}

LossKind parse_loss_kind(std::string_view name) {
  if (name == "mse") return LossKind::mse;
  if (name == "softmax_cross_entropy" || name == "ce" || name == "cross_entropy")
    return LossKind::softmax_cross_entropy;
  throw InvalidArgument("unknown loss '" + std::string(name) + "'");
}

int Architecture::param_count() const {
  int count = 0;
  for (int i = 0; i + 1 < static_cast<int>(layer_dims.size()); ++i) {
    count += layer_dims[i + 1] * layer_dims[i];
    if (use_bias) count += layer_dims[i + 1];
  }
  return count;
}

int Architecture::weight_offset(int layer) const {
  int offset = 0;
  for (int i = 1; i < layer; ++i) offset += layer_dims[i] * layer_dims[i - 1];
  return offset;
}

int Architecture::bias_offset(int layer) const {
  int offset = weight_offset(depth() + 1);
  for (int i = 1; i < layer; ++i) offset += layer_dims[i];
  return offset;
}

void Architecture::validate() const {
  if (layer_dims.size() < 2)
    throw InvalidArgument("architecture needs at least two layer widths");
  for (int d : layer_dims)
    if (d < 1) throw InvalidArgument("layer widths must be >= 1");
  if (loss_kind == LossKind::softmax_cross_entropy && output_dim() < 2)
    throw InvalidArgument("softmax cross-entropy needs an output width >= 2");
}

void Problem::validate() const {
  arch.validate();
  if (data.X.rows() != arch.input_dim())
    throw DimensionError("X has " + std::to_string(data.X.rows()) + " rows, architecture expects " +
                         std::to_string(arch.input_dim()));
  if (data.Y.rows() != arch.output_dim())
    throw DimensionError("Y has " + std::to_string(data.Y.rows()) + " rows, architecture expects " +
                         std::to_string(arch.output_dim()));
  if (data.X.cols() != data.Y.cols())
    throw DimensionError("X and Y have different sample counts");
  if (data.X.cols() < 1) throw DimensionError("empty data batch");
}

Problem two_neuron_problem(double x, double y) {
  Problem p;
  p.arch = Architecture::linear({1, 1, 1});
  p.data.X = Matrix::Constant(1, 1, x);
  p.data.Y = Matrix::Constant(1, 1, y);
  p.loss.half = true;
  return p;
}

Layers unflatten(const Architecture& arch, const ParamVector& theta) {
  if (theta.size() != arch.param_count())
    throw DimensionError("parameter vector has length " + std::to_string(theta.size()) +
                         ", expected " + std::to_string(arch.param_count()));
  Layers layers;
  const int h = arch.depth();
  Eigen::Index at = 0;
  for (int i = 0; i < h; ++i) {
    const int rows = arch.layer_dims[i + 1];
    const int cols = arch.layer_dims[i];
    Matrix w(rows, cols);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) w(r, c) = theta[at++];
    layers.weights.push_back(std::move(w));
  }
  if (arch.use_bias) {
    for (int i = 0; i < h; ++i) {
      const int rows = arch.layer_dims[i + 1];
      layers.biases.push_back(theta.segment(at, rows));
      at += rows;
    }
  }
  return layers;
}

ParamVector flatten(const Architecture& arch, const Layers& layers) {
  const int h = arch.depth();
  if (static_cast<int>(layers.weights.size()) != h ||
      (arch.use_bias && static_cast<int>(layers.biases.size()) != h))
    throw DimensionError("layer count does not match architecture");
  ParamVector theta(arch.param_count());
  Eigen::Index at = 0;
  for (int i = 0; i < h; ++i) {
    const Matrix& w = layers.weights[i];
    if (w.rows() != arch.layer_dims[i + 1] || w.cols() != arch.layer_dims[i])
      throw DimensionError("weight matrix " + std::to_string(i + 1) + " has the wrong shape");
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) theta[at++] = w(r, c);
  }
  if (arch.use_bias) {
    for (int i = 0; i < h; ++i) {
      if (layers.biases[i].size() != arch.layer_dims[i + 1])
        throw DimensionError("bias " + std::to_string(i + 1) + " has the wrong length");
      theta.segment(at, layers.biases[i].size()) = layers.biases[i];
      at += layers.biases[i].size();
    }
  }
  return theta;
}

double activate(Activation a, double z) {
  switch (a) {
    case Activation::identity: return z;
    case Activation::relu: return z > 0.0 ? z : 0.0;
    case Activation::gelu: return 0.5 * z * std::erfc(-z * boost::math::constants::one_div_root_two<double>());
    case Activation::tanh: return std::tanh(z);
    case Activation::sigmoid: return 1.0 / (1.0 + std::exp(-z));
  }
  return z;
}

double activate_derivative(Activation a, double z) {
  switch (a) {
    case Activation::identity: return 1.0;
    case Activation::relu: return z > 0.0 ? 1.0 : 0.0;
    case Activation::gelu: {
      const double cdf = 0.5 * std::erfc(-z * boost::math::constants::one_div_root_two<double>());
      const double pdf = std::exp(-0.5 * z * z) * boost::math::constants::one_div_root_two_pi<double>();
      return cdf + z * pdf;
    }
    case Activation::tanh: {
      const double t = std::tanh(z);
      return 1.0 - t * t;
    }
    case Activation::sigmoid: {
      const double s = 1.0 / (1.0 + std::exp(-z));
      return s * (1.0 - s);
    }
  }
  return 1.0;
}

namespace {

void require_linear(const Architecture& arch, const char* op) {
  if (!arch.is_linear())
    throw UnsupportedError(std::string(op) + " requires identity activation without biases");
}

double mse_scale(const Problem& p) {
  double s = p.loss.half ? 0.5 : 1.0;
  if (p.loss.mean) s /= static_cast<double>(p.data.n());
  return s;
}

bool uses_linear_closed_form(const Problem& p) {
  return p.arch.is_linear() && p.arch.loss_kind == LossKind::mse;
}

// prefix[i] = W_i ... W_1 (prefix[0] = I), suffix[i] = W_h ... W_{i+1}
// (suffix[h] = I), both for 0 <= i <= h.
struct Chain {
  std::vector<Matrix> prefix;
  std::vector<Matrix> suffix;
};

Chain chain_products(const Architecture& arch, const Layers& layers) {
  const int h = arch.depth();
  Chain c;
  c.prefix.resize(h + 1);
  c.suffix.resize(h + 1);
  c.prefix[0] = Matrix::Identity(arch.input_dim(), arch.input_dim());
  for (int i = 1; i <= h; ++i) c.prefix[i] = layers.weights[i - 1] * c.prefix[i - 1];
  c.suffix[h] = Matrix::Identity(arch.output_dim(), arch.output_dim());
  for (int i = h - 1; i >= 0; --i) c.suffix[i] = c.suffix[i + 1] * layers.weights[i];
  return c;
}

// Loss and derivative with respect to the network output.
double output_loss(const Problem& p, const Matrix& out, Matrix* d_out) {
  const Matrix& Y = p.data.Y;
  if (p.arch.loss_kind == LossKind::mse) {
    const double s = mse_scale(p);
    Matrix residual = out - Y;
    if (d_out) *d_out = 2.0 * s * residual;
    return s * residual.squaredNorm();
  }
  const double n = static_cast<double>(p.data.n());
  double total = 0.0;
  if (d_out) d_out->resize(out.rows(), out.cols());
  for (Eigen::Index j = 0; j < out.cols(); ++j) {
    const double m = out.col(j).maxCoeff();
    const Vector shifted = (out.col(j).array() - m).matrix();
    const double lse = std::log(shifted.array().exp().sum());
    const Vector log_p = (shifted.array() - lse).matrix();
    total -= Y.col(j).dot(log_p);
    if (d_out) d_out->col(j) = (log_p.array().exp() * Y.col(j).sum() - Y.col(j).array()).matrix() / n;
  }
  return total / n;
}

LossGradient linear_loss_and_gradient(const Problem& p, const ParamVector& theta) {
  const Architecture& arch = p.arch;
  const Layers layers = unflatten(arch, theta);
  const Chain c = chain_products(arch, layers);
  const int h = arch.depth();
  const double s = mse_scale(p);
  const Matrix residual = c.prefix[h] * p.data.X - p.data.Y;
  const Matrix g = 2.0 * s * residual * p.data.X.transpose();
  LossGradient out;
  out.loss = s * residual.squaredNorm();
  out.gradient.resize(arch.param_count());
  Eigen::Index at = 0;
  for (int i = 1; i <= h; ++i) {
    const Matrix gw = c.suffix[i].transpose() * g * c.prefix[i - 1].transpose();
    for (Eigen::Index r = 0; r < gw.rows(); ++r)
      for (Eigen::Index col = 0; col < gw.cols(); ++col) out.gradient[at++] = gw(r, col);
  }
  return out;
}

LossGradient backprop_loss_and_gradient(const Problem& p, const ParamVector& theta) {
  const Architecture& arch = p.arch;
  const Layers layers = unflatten(arch, theta);
  const int h = arch.depth();
  const Activation act = arch.activation;

  std::vector<Matrix> pre(h);      // Z_i
  std::vector<Matrix> post(h + 1); // A_i, post[0] = X
  post[0] = p.data.X;
  for (int i = 0; i < h; ++i) {
    pre[i] = layers.weights[i] * post[i];
    if (arch.use_bias) pre[i].colwise() += layers.biases[i];
    post[i + 1] = pre[i].unaryExpr([act](double z) { return activate(act, z); });
  }

  Matrix delta;
  LossGradient out;
  out.loss = output_loss(p, post[h], &delta);
  out.gradient.resize(arch.param_count());

  for (int i = h - 1; i >= 0; --i) {
    if (act != Activation::identity)
      delta.array() *= pre[i].unaryExpr([act](double z) { return activate_derivative(act, z); }).array();
    const Matrix gw = delta * post[i].transpose();
    Eigen::Index at = arch.weight_offset(i + 1);
    for (Eigen::Index r = 0; r < gw.rows(); ++r)
      for (Eigen::Index c = 0; c < gw.cols(); ++c) out.gradient[at++] = gw(r, c);
    if (arch.use_bias) out.gradient.segment(arch.bias_offset(i + 1), gw.rows()) = delta.rowwise().sum();
    if (i > 0) delta = layers.weights[i].transpose() * delta;
  }
  return out;
}

}  // namespace

Matrix product_map(const Architecture& arch, const ParamVector& theta) {
  require_linear(arch, "product_map");
  const Layers layers = unflatten(arch, theta);
  // Left to right: W_h * W_{h-1} * ... * W_1.
  Matrix m = layers.weights.back();
  for (int i = arch.depth() - 2; i >= 0; --i) m = m * layers.weights[i];
  return m;
}

Matrix forward(const Architecture& arch, const ParamVector& theta, const Matrix& X) {
  if (X.rows() != arch.input_dim())
    throw DimensionError("input has " + std::to_string(X.rows()) + " rows, architecture expects " +
                         std::to_string(arch.input_dim()));
  const Layers layers = unflatten(arch, theta);
  const Activation act = arch.activation;
  Matrix a = X;
  for (int i = 0; i < arch.depth(); ++i) {
    Matrix z = layers.weights[i] * a;
    if (arch.use_bias) z.colwise() += layers.biases[i];
    a = z.unaryExpr([act](double v) { return activate(act, v); });
  }
  return a;
}

double loss(const Problem& problem, const ParamVector& theta) {
  return output_loss(problem, forward(problem.arch, theta, problem.data.X), nullptr);
}

LossGradient loss_and_gradient(const Problem& problem, const ParamVector& theta) {
  if (uses_linear_closed_form(problem)) return linear_loss_and_gradient(problem, theta);
  return backprop_loss_and_gradient(problem, theta);
}

ParamVector gradient(const Problem& problem, const ParamVector& theta) {
  return loss_and_gradient(problem, theta).gradient;
}

HessianTerms linear_hessian_terms(const Problem& problem, const ParamVector& theta) {
  const Architecture& arch = problem.arch;
  require_linear(arch, "linear_hessian_terms");
  if (arch.loss_kind != LossKind::mse)
    throw UnsupportedError("analytic Hessian terms require the MSE loss");
  const Layers layers = unflatten(arch, theta);
  const Chain c = chain_products(arch, layers);
  const int h = arch.depth();
  const int dims = arch.param_count();
  const double s = mse_scale(problem);
  const Matrix& X = problem.data.X;
  const Matrix cov = X * X.transpose();
  // Gradient of l at mu(theta).
  const Matrix g = 2.0 * s * (c.prefix[h] * X - problem.data.Y) * X.transpose();

  HessianTerms terms{Matrix::Zero(dims, dims), Matrix::Zero(dims, dims)};
  const auto& d = arch.layer_dims;

  // W_{>i} = suffix[i], W_{<i} = prefix[i-1].
  for (int i = 1; i <= h; ++i) {
    const int oi = arch.weight_offset(i);
    const Matrix& left_i = c.suffix[i];
    const Matrix& right_i = c.prefix[i - 1];
    for (int j = i; j <= h; ++j) {
      const int oj = arch.weight_offset(j);
      const Matrix& left_j = c.suffix[j];
      const Matrix& right_j = c.prefix[j - 1];
      // Curvature block: 2s (W_{>i}^T W_{>j}) kron (W_{<i} C W_{<j}^T).
      const Matrix outer = left_i.transpose() * left_j;           // d_i x d_j
      const Matrix inner = right_i * cov * right_j.transpose();   // d_{i-1} x d_{j-1}
      for (int a = 0; a < d[i]; ++a)
        for (int b = 0; b < d[i - 1]; ++b)
          for (int cc = 0; cc < d[j]; ++cc)
            for (int dd = 0; dd < d[j - 1]; ++dd)
              terms.curvature(oi + a * d[i - 1] + b, oj + cc * d[j - 1] + dd) =
                  2.0 * s * outer(a, cc) * inner(b, dd);
      if (j == i) continue;
      // Residual block for i < j: entry ((a,b),(c,e)) = (W_{>j}^T G W_{<i}^T)(c,b) * M(e,a),
      // M = W_{j-1} ... W_{i+1}.
      Matrix middle = Matrix::Identity(d[i], d[i]);
      for (int k = i + 1; k <= j - 1; ++k) middle = layers.weights[k - 1] * middle;
      const Matrix contracted = left_j.transpose() * g * right_i.transpose();  // d_j x d_{i-1}
      for (int a = 0; a < d[i]; ++a)
        for (int b = 0; b < d[i - 1]; ++b)
          for (int cc = 0; cc < d[j]; ++cc)
            for (int e = 0; e < d[j - 1]; ++e)
              terms.residual(oi + a * d[i - 1] + b, oj + cc * d[j - 1] + e) =
                  contracted(cc, b) * middle(e, a);
    }
  }
  // Fill the lower blocks by symmetry.
  for (int r = 0; r < dims; ++r)
    for (int col = 0; col < r; ++col) {
      terms.curvature(r, col) = terms.curvature(col, r);
      terms.residual(r, col) = terms.residual(col, r);
    }
  return terms;
}

Matrix finite_difference_hessian(const Problem& problem, const ParamVector& theta,
                                 const HessianOptions& opts) {
  const int dims = problem.arch.param_count();
  if (dims > opts.max_params)
    throw SizeLimitError("dense Hessian of " + std::to_string(dims) + " parameters exceeds cap " +
                         std::to_string(opts.max_params));
  Matrix H(dims, dims);
  ParamVector probe = theta;
  for (int i = 0; i < dims; ++i) {
    const double step = 1e-5 * (1.0 + std::abs(theta[i]));
    probe[i] = theta[i] + step;
    const ParamVector plus = gradient(problem, probe);
    probe[i] = theta[i] - step;
    const ParamVector minus = gradient(problem, probe);
    probe[i] = theta[i];
    H.col(i) = (plus - minus) / (2.0 * step);
  }
  return 0.5 * (H + H.transpose());
}

Matrix hessian(const Problem& problem, const ParamVector& theta, const HessianOptions& opts) {
  const int dims = problem.arch.param_count();
  if (dims > opts.max_params)
    throw SizeLimitError("dense Hessian of " + std::to_string(dims) + " parameters exceeds cap " +
                         std::to_string(opts.max_params));
  if (uses_linear_closed_form(problem)) {
    HessianTerms t = linear_hessian_terms(problem, theta);
    Matrix H = t.curvature + t.residual;
    return 0.5 * (H + H.transpose());
  }
  return finite_difference_hessian(problem, theta, opts);
}

ParamVector gd_step(const Problem& problem, const ParamVector& theta, double eta) {
  return theta - eta * gradient(problem, theta);
}

}  // namespace gdstab
