#include "poul/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "poul/errors.hpp"

namespace poul {

namespace {

constexpr double kLayerNormEps = 1e-5;

std::string dims_str(std::size_t a, std::size_t b) {
  return std::to_string(a) + " vs " + std::to_string(b);
}

}  // namespace

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw ShapeError("DenseMatrix data length " + std::to_string(data_.size()) + " != " +
                     std::to_string(rows_) + "x" + std::to_string(cols_));
  }
}

DenseMatrix DenseMatrix::identity(std::size_t n) {
  DenseMatrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

std::vector<double> matvec(const DenseMatrix& a, std::span<const double> x) {
  if (x.size() != a.cols()) throw ShapeError("matvec: " + dims_str(x.size(), a.cols()));
  std::vector<double> y(a.rows(), 0.0);
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const auto row = a.row(r);
    double acc = 0.0;
    for (std::size_t c = 0; c < row.size(); ++c) acc += row[c] * x[c];
    y[r] = acc;
  }
  return y;
}

std::vector<double> matvec_transposed(const DenseMatrix& a, std::span<const double> x) {
  if (x.size() != a.rows()) throw ShapeError("matvec_transposed: " + dims_str(x.size(), a.rows()));
  std::vector<double> y(a.cols(), 0.0);
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const auto row = a.row(r);
    const double xr = x[r];
    for (std::size_t c = 0; c < row.size(); ++c) y[c] += row[c] * xr;
  }
  return y;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot: " + dims_str(a.size(), b.size()));
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double l2_norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double spectral_norm(const DenseMatrix& a, int max_iterations, double tolerance) {
  if (a.size() == 0) return 0.0;
  // Fixed, dense start vector; deterministic and not orthogonal to any
  // singular direction for generic matrices.
  std::vector<double> v(a.cols());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 1.0 + 0.1 * static_cast<double>(i % 7);
  double norm = l2_norm(v);
  for (auto& e : v) e /= norm;

  double sigma = 0.0;
  for (int it = 0; it < max_iterations; ++it) {
    const auto av = matvec(a, v);
    auto w = matvec_transposed(a, av);
    const double wn = l2_norm(w);
    if (wn == 0.0) return 0.0;
    const double next = std::sqrt(wn);
    for (std::size_t i = 0; i < w.size(); ++i) v[i] = w[i] / wn;
    const bool converged = it > 0 && std::abs(next - sigma) <= tolerance * std::max(1.0, next);
    sigma = next;
    if (converged) break;
  }
  return sigma;
}

void require_finite(std::span<const double> values, const std::string& what) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw TrainingError("non-finite value in " + what + " at index " + std::to_string(i));
    }
  }
}

std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "identity"; }

Activation activation_from_string(const std::string& name) {
  if (name == "relu") return Activation::relu;
  if (name == "identity") return Activation::identity;
  throw ValidationError("unknown activation '" + name + "'");
}

void MlpGradients::zero() {
  for (auto& w : weight) std::fill(w.values().begin(), w.values().end(), 0.0);
  for (auto& b : bias) std::fill(b.begin(), b.end(), 0.0);
}

Mlp::Mlp(std::vector<DenseLayer> layers) : layers_(std::move(layers)) {
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    const auto& layer = layers_[k];
    if (layer.bias.size() != layer.output_dim()) {
      throw ShapeError("layer " + std::to_string(k) + " bias " +
                       dims_str(layer.bias.size(), layer.output_dim()));
    }
    if (k > 0 && layers_[k - 1].output_dim() != layer.input_dim()) {
      throw ShapeError("layer " + std::to_string(k) + " input " +
                       dims_str(layer.input_dim(), layers_[k - 1].output_dim()));
    }
  }
}

Mlp Mlp::make(std::span<const std::size_t> dims, Activation hidden, Activation output, Rng& rng,
              bool hidden_layer_norm) {
  if (dims.size() < 2) throw ShapeError("Mlp::make needs at least input and output dims");
  std::vector<DenseLayer> layers;
  for (std::size_t k = 0; k + 1 < dims.size(); ++k) {
    const std::size_t fan_in = dims[k];
    const std::size_t fan_out = dims[k + 1];
    const bool last = k + 2 == dims.size();
    DenseLayer layer;
    layer.weight = DenseMatrix(fan_out, fan_in);
    const double limit = fan_in > 0 ? std::sqrt(6.0 / static_cast<double>(fan_in)) : 0.0;
    for (auto& w : layer.weight.values()) w = rng.uniform(-limit, limit);
    layer.bias.assign(fan_out, 0.0);
    layer.activation = last ? output : hidden;
    layer.layer_norm = !last && hidden_layer_norm;
    layers.push_back(std::move(layer));
  }
  return Mlp(std::move(layers));
}

std::size_t Mlp::input_dim() const { return layers_.empty() ? 0 : layers_.front().input_dim(); }
std::size_t Mlp::output_dim() const { return layers_.empty() ? 0 : layers_.back().output_dim(); }

std::size_t Mlp::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
  return n;
}

std::vector<double> Mlp::forward(std::span<const double> x) const {
  MlpTape tape;
  return forward(x, tape);
}

const std::vector<double>& Mlp::forward(std::span<const double> x, MlpTape& tape) const {
  if (x.size() != input_dim() && !layers_.empty()) {
    throw ShapeError("Mlp input " + dims_str(x.size(), input_dim()));
  }
  tape.inputs.resize(layers_.size() + 1);
  tape.pre.resize(layers_.size());
  tape.inv_std.assign(layers_.size(), 1.0);
  tape.inputs[0].assign(x.begin(), x.end());
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    const auto& layer = layers_[k];
    auto& pre = tape.pre[k];
    pre = matvec(layer.weight, tape.inputs[k]);
    for (std::size_t i = 0; i < pre.size(); ++i) pre[i] += layer.bias[i];
    if (layer.layer_norm && !pre.empty()) {
      double mean = 0.0;
      for (double v : pre) mean += v;
      mean /= static_cast<double>(pre.size());
      double var = 0.0;
      for (double v : pre) var += (v - mean) * (v - mean);
      var /= static_cast<double>(pre.size());
      const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
      for (auto& v : pre) v = (v - mean) * inv;
      tape.inv_std[k] = inv;
    }
    auto& out = tape.inputs[k + 1];
    out = pre;
    if (layer.activation == Activation::relu) {
      for (auto& v : out) v = v > 0.0 ? v : 0.0;
    }
  }
  require_finite(tape.inputs.back(), "mlp output");
  return tape.inputs.back();
}

std::vector<double> Mlp::backward(const MlpTape& tape, std::span<const double> upstream,
                                  MlpGradients& grads) const {
  if (upstream.size() != output_dim()) throw ShapeError("Mlp upstream " + dims_str(upstream.size(), output_dim()));
  if (tape.inputs.size() != layers_.size() + 1) throw ShapeError("Mlp tape does not match network");
  if (grads.weight.size() != layers_.size()) throw ShapeError("Mlp gradient buffers do not match network");
  std::vector<double> delta(upstream.begin(), upstream.end());
  if (layers_.empty()) return delta;
  for (std::size_t kk = layers_.size(); kk-- > 0;) {
    const auto& layer = layers_[kk];
    const auto& pre = tape.pre[kk];
    if (layer.activation == Activation::relu) {
      for (std::size_t i = 0; i < delta.size(); ++i) {
        if (!(pre[i] > 0.0)) delta[i] = 0.0;
      }
    }
    if (layer.layer_norm && !pre.empty()) {
      // pre holds normalized values n; du = inv * (dn - mean(dn) - n * mean(dn * n)).
      const double count = static_cast<double>(pre.size());
      double mean_d = 0.0, mean_dn = 0.0;
      for (std::size_t i = 0; i < pre.size(); ++i) {
        mean_d += delta[i];
        mean_dn += delta[i] * pre[i];
      }
      mean_d /= count;
      mean_dn /= count;
      for (std::size_t i = 0; i < pre.size(); ++i) {
        delta[i] = tape.inv_std[kk] * (delta[i] - mean_d - pre[i] * mean_dn);
      }
    }
    const auto& input = tape.inputs[kk];
    auto& gw = grads.weight[kk];
    auto& gb = grads.bias[kk];
    for (std::size_t r = 0; r < layer.output_dim(); ++r) {
      const double d = delta[r];
      gb[r] += d;
      if (d == 0.0) continue;
      auto grow = gw.row(r);
      for (std::size_t c = 0; c < input.size(); ++c) grow[c] += d * input[c];
    }
    delta = matvec_transposed(layer.weight, delta);
  }
  return delta;
}

MlpGradients Mlp::make_gradients() const {
  MlpGradients g;
  for (const auto& l : layers_) {
    g.weight.emplace_back(l.weight.rows(), l.weight.cols());
    g.bias.emplace_back(l.bias.size(), 0.0);
  }
  return g;
}

void Mlp::append_slots(const std::string& prefix, const MlpGradients& grads, std::vector<ParamSlot>& out) {
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    const std::string base = prefix + ".layer" + std::to_string(k);
    out.push_back({base + ".weight", layers_[k].weight.values(), grads.weight[k].values()});
    out.push_back({base + ".bias", layers_[k].bias, grads.bias[k]});
  }
}

double Mlp::squared_norm() const {
  double acc = 0.0;
  for (const auto& l : layers_) {
    for (double w : l.weight.values()) acc += w * w;
    for (double b : l.bias) acc += b * b;
  }
  return acc;
}

bool Mlp::has_layer_norm() const {
  return std::any_of(layers_.begin(), layers_.end(), [](const DenseLayer& l) { return l.layer_norm; });
}

void Optimizer::step(std::span<const ParamSlot> slots) {
  for (const auto& slot : slots) {
    if (slot.value.size() != slot.grad.size()) {
      throw ShapeError("optimizer slot " + slot.name + ": " + dims_str(slot.value.size(), slot.grad.size()));
    }
    for (double g : slot.grad) {
      if (!std::isfinite(g)) throw TrainingError("non-finite gradient for parameter " + slot.name);
    }
  }
  ++steps_;
  const double lr = config_.learning_rate;
  if (config_.kind == OptimizerKind::sgd) {
    for (const auto& slot : slots) {
      for (std::size_t i = 0; i < slot.value.size(); ++i) slot.value[i] -= lr * slot.grad[i];
    }
    return;
  }
  if (first_.size() != slots.size()) {
    if (!first_.empty()) throw ShapeError("optimizer slot layout changed between steps");
    for (const auto& slot : slots) {
      first_.emplace_back(slot.value.size(), 0.0);
      second_.emplace_back(slot.value.size(), 0.0);
    }
  }
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double correction1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double correction2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  for (std::size_t s = 0; s < slots.size(); ++s) {
    const auto& slot = slots[s];
    auto& m = first_[s];
    auto& v = second_[s];
    if (m.size() != slot.value.size()) throw ShapeError("optimizer moments do not match slot " + slot.name);
    for (std::size_t i = 0; i < slot.value.size(); ++i) {
      const double g = slot.grad[i];
      m[i] = b1 * m[i] + (1.0 - b1) * g;
      v[i] = b2 * v[i] + (1.0 - b2) * g * g;
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      slot.value[i] -= lr * m_hat / (std::sqrt(v_hat) + config_.epsilon);
    }
  }
}

OutputLoss squared_loss(std::vector<double> target) {
  return [target = std::move(target)](std::span<const double> out, std::vector<double>& grad) {
    if (out.size() != target.size()) throw ShapeError("squared_loss: " + dims_str(out.size(), target.size()));
    grad.assign(out.size(), 0.0);
    double loss = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double r = out[i] - target[i];
      loss += r * r;
      grad[i] = 2.0 * r;
    }
    return loss;
  };
}

GradCheckReport grad_check(const Mlp& net, const OutputLoss& loss, std::span<const double> x,
                           double tolerance, double step) {
  if (!(tolerance > 0.0)) throw std::invalid_argument("grad_check tolerance must be positive");
  GradCheckReport report;
  if (net.parameter_count() == 0) return report;

  MlpTape tape;
  std::vector<double> upstream;
  loss(net.forward(x, tape), upstream);
  auto grads = net.make_gradients();
  const auto input_grad = net.backward(tape, upstream, grads);

  auto record = [&](double analytic, double numeric, const std::string& name) {
    const double scale = std::max(std::abs(analytic), std::abs(numeric));
    const double err = scale > 1e-7 ? std::abs(analytic - numeric) / scale : std::abs(analytic - numeric);
    ++report.checked;
    if (err > report.max_relative_error) {
      report.max_relative_error = err;
      report.worst_parameter = name;
    }
  };

  std::vector<double> scratch;
  auto eval = [&](const Mlp& m, std::span<const double> input) { return loss(m.forward(input), scratch); };

  Mlp probe = net;
  auto& layers = probe.mutable_layers();
  for (std::size_t k = 0; k < layers.size(); ++k) {
    auto check_tensor = [&](std::span<double> values, std::span<const double> analytic, const std::string& name) {
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double saved = values[i];
        values[i] = saved + step;
        const double up = eval(probe, x);
        values[i] = saved - step;
        const double down = eval(probe, x);
        values[i] = saved;
        record(analytic[i], (up - down) / (2.0 * step), name + "[" + std::to_string(i) + "]");
      }
    };
    const std::string base = "layer" + std::to_string(k);
    check_tensor(layers[k].weight.values(), grads.weight[k].values(), base + ".weight");
    check_tensor(layers[k].bias, grads.bias[k], base + ".bias");
  }
  std::vector<double> xp(x.begin(), x.end());
  for (std::size_t i = 0; i < xp.size(); ++i) {
    const double saved = xp[i];
    xp[i] = saved + step;
    const double up = eval(net, xp);
    xp[i] = saved - step;
    const double down = eval(net, xp);
    xp[i] = saved;
    record(input_grad[i], (up - down) / (2.0 * step), "input[" + std::to_string(i) + "]");
  }
  report.passed = report.max_relative_error < tolerance;
  return report;
}

}  // namespace poul
