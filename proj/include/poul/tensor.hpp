#pragma once

// Minimal dense kernel: row-major matrices, feed-forward nets with manual
// backprop, SGD/Adam and finite-difference gradient checks. 64-bit reals only.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "poul/random.hpp"

namespace poul {

class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static DenseMatrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  bool operator==(const DenseMatrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// y = A x
std::vector<double> matvec(const DenseMatrix& a, std::span<const double> x);
// y = A^T x
std::vector<double> matvec_transposed(const DenseMatrix& a, std::span<const double> x);

double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> a);

// Largest singular value by power iteration on A^T A.
double spectral_norm(const DenseMatrix& a, int max_iterations = 50, double tolerance = 1e-9);

// Throws TrainingError naming `what` if any entry is NaN/Inf.
void require_finite(std::span<const double> values, const std::string& what);

enum class Activation { relu, identity };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& name);

struct DenseLayer {
  DenseMatrix weight;  // out x in
  std::vector<double> bias;
  Activation activation = Activation::identity;
  // Non-affine layer normalization of the pre-activation. Optional; breaks the
  // product-of-norms Lipschitz bound.
  bool layer_norm = false;

  std::size_t input_dim() const { return weight.cols(); }
  std::size_t output_dim() const { return weight.rows(); }

  bool operator==(const DenseLayer&) const = default;
};

struct MlpTape {
  // inputs[k] is the input of layer k; inputs.back() is the network output.
  std::vector<std::vector<double>> inputs;
  // Pre-activation (post-normalization when enabled) of each layer.
  std::vector<std::vector<double>> pre;
  // Per-layer inverse standard deviation, only meaningful with layer_norm.
  std::vector<double> inv_std;

  const std::vector<double>& output() const { return inputs.back(); }
};

struct MlpGradients {
  std::vector<DenseMatrix> weight;
  std::vector<std::vector<double>> bias;

  void zero();
};

// One named learnable tensor plus its gradient, as seen by the optimizer.
struct ParamSlot {
  std::string name;
  std::span<double> value;
  std::span<const double> grad;
};

class Mlp {
 public:
  Mlp() = default;
  explicit Mlp(std::vector<DenseLayer> layers);

  // He-style uniform fan-in init: W ~ U(-sqrt(6/fan_in), sqrt(6/fan_in)), b = 0.
  // `dims` = {input, hidden..., output}.
  static Mlp make(std::span<const std::size_t> dims, Activation hidden, Activation output, Rng& rng,
                  bool hidden_layer_norm = false);

  std::size_t input_dim() const;
  std::size_t output_dim() const;
  std::size_t parameter_count() const;

  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::vector<DenseLayer>& mutable_layers() { return layers_; }

  std::vector<double> forward(std::span<const double> x) const;
  const std::vector<double>& forward(std::span<const double> x, MlpTape& tape) const;

  // Accumulates d(upstream . output)/d(params) into `grads`, returns d/dx.
  std::vector<double> backward(const MlpTape& tape, std::span<const double> upstream,
                               MlpGradients& grads) const;

  MlpGradients make_gradients() const;
  void append_slots(const std::string& prefix, const MlpGradients& grads, std::vector<ParamSlot>& out);

  double squared_norm() const;
  bool has_layer_norm() const;

  bool operator==(const Mlp&) const = default;

 private:
  std::vector<DenseLayer> layers_;
};

enum class OptimizerKind { sgd, adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config) : config_(config) {}

  // Moments are keyed by slot position; the slot list must keep the same
  // layout across calls.
  void step(std::span<const ParamSlot> slots);

  std::uint64_t step_count() const { return steps_; }
  const OptimizerConfig& config() const { return config_; }
  void set_learning_rate(double lr) { config_.learning_rate = lr; }

 private:
  OptimizerConfig config_;
  std::uint64_t steps_ = 0;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
};

// Loss on the network output. Writes dLoss/dOutput into `grad` (resized).
using OutputLoss = std::function<double(std::span<const double> output, std::vector<double>& grad)>;

OutputLoss squared_loss(std::vector<double> target);

struct GradCheckReport {
  std::size_t checked = 0;
  double max_relative_error = 0.0;
  std::string worst_parameter;
  bool passed = true;
};

// Compares analytic parameter and input gradients against central differences.
GradCheckReport grad_check(const Mlp& net, const OutputLoss& loss, std::span<const double> x,
                           double tolerance, double step = 1e-5);

}  // namespace poul
