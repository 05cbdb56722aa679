#pragma once

// Fully connected networks viewed as maps from a flat parameter vector to a
// scalar loss: architecture description, parameter layout, forward pass,
// loss and exact first/second derivatives.

#include <Eigen/Dense>

#include <string>
#include <string_view>
#include <vector>

namespace gdstab {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// A point in parameter space. Layout is layer-major: W_1 (row-major
// d_1 x d_0), W_2, ..., W_h, followed by b_1, ..., b_h when biases are used.
using ParamVector = Eigen::VectorXd;

enum class Activation { identity, relu, gelu, tanh, sigmoid };
enum class LossKind { mse, softmax_cross_entropy };

std::string to_string(Activation a);
std::string to_string(LossKind k);
Activation parse_activation(std::string_view name);
LossKind parse_loss_kind(std::string_view name);

struct Architecture {
  std::vector<int> layer_dims;  // d_0, d_1, ..., d_h
  Activation activation = Activation::identity;
  bool use_bias = false;
  LossKind loss_kind = LossKind::mse;

  static Architecture linear(std::vector<int> dims) {
    return Architecture{std::move(dims), Activation::identity, false, LossKind::mse};
  }

  // Number of weight matrices h.
  int depth() const { return static_cast<int>(layer_dims.size()) - 1; }
  int input_dim() const { return layer_dims.front(); }
  int output_dim() const { return layer_dims.back(); }
  int param_count() const;
  // Offset of W_i (1-based layer index) inside a ParamVector.
  int weight_offset(int layer) const;
  int bias_offset(int layer) const;
  // Identity activation without biases: the loss factors through the
  // matrix product W_h ... W_1.
  bool is_linear() const { return activation == Activation::identity && !use_bias; }

  void validate() const;
};

struct DataBatch {
  Matrix X;  // d_0 x n
  Matrix Y;  // d_h x n

  Eigen::Index n() const { return X.cols(); }
};

// MSE scaling. The default is the plain sum of squared residuals; `half`
// multiplies by 1/2 and `mean` divides by the number of samples.
// Cross-entropy is always averaged over the batch and ignores both flags.
struct LossOptions {
  bool half = false;
  bool mean = false;
};

struct Problem {
  Architecture arch;
  DataBatch data;
  LossOptions loss;

  void validate() const;
};

// The two-neuron network x -> t2 * t1 * x on data {x -> y} with the 1/2
// convention, L(t1, t2) = (y - t1 t2 x)^2 / 2.
Problem two_neuron_problem(double x = 1.0, double y = 1.0);

struct Layers {
  std::vector<Matrix> weights;  // weights[i] = W_{i+1}, d_{i+1} x d_i
  std::vector<Vector> biases;   // empty when the architecture has none
};

Layers unflatten(const Architecture& arch, const ParamVector& theta);
ParamVector flatten(const Architecture& arch, const Layers& layers);

double activate(Activation a, double z);
double activate_derivative(Activation a, double z);

// W_h ... W_1. Only defined for linear architectures.
Matrix product_map(const Architecture& arch, const ParamVector& theta);

// Network output on the columns of X; the activation is applied after every
// layer, including the last one.
Matrix forward(const Architecture& arch, const ParamVector& theta, const Matrix& X);

double loss(const Problem& problem, const ParamVector& theta);
ParamVector gradient(const Problem& problem, const ParamVector& theta);

struct LossGradient {
  double loss = 0.0;
  ParamVector gradient;
};
LossGradient loss_and_gradient(const Problem& problem, const ParamVector& theta);

struct HessianOptions {
  int max_params = 2000;
};

// Dense Hessian, explicitly symmetrized. Linear MSE problems are assembled
// analytically; everything else uses central differences of the gradient.
Matrix hessian(const Problem& problem, const ParamVector& theta, const HessianOptions& opts = {});

// The two terms of the Hessian of l(mu(theta)) for a linear MSE problem:
// Dmu^T D^2 l Dmu (`curvature`) and Dl D^2 mu (`residual`). Their sum is the
// Hessian; the residual term vanishes wherever the gradient of l does.
struct HessianTerms {
  Matrix curvature;
  Matrix residual;
};
HessianTerms linear_hessian_terms(const Problem& problem, const ParamVector& theta);

Matrix finite_difference_hessian(const Problem& problem, const ParamVector& theta,
                                 const HessianOptions& opts = {});

// One step of theta -> theta - eta * grad L(theta).
ParamVector gd_step(const Problem& problem, const ParamVector& theta, double eta);

}  // namespace gdstab
