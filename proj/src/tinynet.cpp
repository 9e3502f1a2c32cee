#include "avatar/tinynet.hpp"

#include <cmath>
#include <stdexcept>

namespace avatar {

std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "none"; }

Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "none") return Activation::none;
  throw std::invalid_argument("unknown activation '" + s + "'");
}

DenseNet DenseNet::make(int input_width, std::span<const int> hidden, int output_width,
                        std::mt19937_64& rng, bool zero_final) {
  if (input_width <= 0 || output_width <= 0) {
    throw std::invalid_argument("DenseNet widths must be positive");
  }
  DenseNet net;
  int fan_in = input_width;
  auto add_layer = [&](int out, Activation act, bool zero) {
    DenseLayer layer;
    layer.weight = Eigen::MatrixXd::Zero(out, fan_in);
    layer.bias = Eigen::VectorXd::Zero(out);
    layer.activation = act;
    if (!zero) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (Eigen::Index c = 0; c < layer.weight.cols(); ++c)
        for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) layer.weight(r, c) = dist(rng);
    }
    net.layers.push_back(std::move(layer));
    fan_in = out;
  };
  for (int h : hidden) {
    if (h <= 0) throw std::invalid_argument("DenseNet hidden width must be positive");
    add_layer(h, Activation::relu, false);
  }
  add_layer(output_width, Activation::none, zero_final);
  return net;
}

int DenseNet::input_width() const {
  return layers.empty() ? 0 : static_cast<int>(layers.front().weight.cols());
}

int DenseNet::output_width() const {
  return layers.empty() ? 0 : static_cast<int>(layers.back().weight.rows());
}

std::size_t DenseNet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.weight.size() + l.bias.size();
  return n;
}

std::vector<double> DenseNet::flatten() const {
  std::vector<double> out;
  out.reserve(parameter_count());
  for (const auto& l : layers) {
    out.insert(out.end(), l.weight.data(), l.weight.data() + l.weight.size());
    out.insert(out.end(), l.bias.data(), l.bias.data() + l.bias.size());
  }
  return out;
}

void DenseNet::assign(std::span<const double> params) {
  if (params.size() != parameter_count()) {
    throw std::invalid_argument("DenseNet::assign: parameter count mismatch");
  }
  std::size_t at = 0;
  for (auto& l : layers) {
    std::copy_n(params.data() + at, l.weight.size(), l.weight.data());
    at += l.weight.size();
    std::copy_n(params.data() + at, l.bias.size(), l.bias.data());
    at += l.bias.size();
  }
}

NetGrad::NetGrad(const DenseNet& net) {
  for (const auto& l : net.layers) {
    weight.push_back(Eigen::MatrixXd::Zero(l.weight.rows(), l.weight.cols()));
    bias.push_back(Eigen::VectorXd::Zero(l.bias.size()));
  }
}

void NetGrad::set_zero() {
  for (auto& w : weight) w.setZero();
  for (auto& b : bias) b.setZero();
}

NetGrad& NetGrad::operator+=(const NetGrad& other) {
  if (other.weight.size() != weight.size()) {
    throw std::invalid_argument("NetGrad: layer count mismatch");
  }
  for (std::size_t i = 0; i < weight.size(); ++i) {
    weight[i] += other.weight[i];
    bias[i] += other.bias[i];
  }
  return *this;
}

std::vector<double> NetGrad::flatten() const {
  std::vector<double> out;
  for (std::size_t i = 0; i < weight.size(); ++i) {
    out.insert(out.end(), weight[i].data(), weight[i].data() + weight[i].size());
    out.insert(out.end(), bias[i].data(), bias[i].data() + bias[i].size());
  }
  return out;
}

Eigen::MatrixXd forward(const DenseNet& net, const Eigen::MatrixXd& input, NetTape* tape) {
  if (net.layers.empty()) throw std::invalid_argument("forward: empty network");
  if (input.rows() != net.input_width()) {
    throw std::invalid_argument("forward: input width " + std::to_string(input.rows()) +
                                " does not match network input width " +
                                std::to_string(net.input_width()));
  }
  if (tape) {
    tape->inputs.clear();
    tape->pre_activations.clear();
  }
  Eigen::MatrixXd x = input;
  for (const auto& l : net.layers) {
    Eigen::MatrixXd z = l.weight * x;
    z.colwise() += l.bias;
    if (tape) {
      tape->inputs.push_back(std::move(x));
      tape->pre_activations.push_back(z);
    }
    if (l.activation == Activation::relu) z = z.cwiseMax(0.0);
    x = std::move(z);
  }
  return x;
}

Eigen::MatrixXd backward(const DenseNet& net, const NetTape& tape,
                         const Eigen::MatrixXd& d_output, NetGrad& grad) {
  if (tape.inputs.size() != net.layers.size()) {
    throw std::invalid_argument("backward: tape does not match network");
  }
  if (grad.weight.size() != net.layers.size()) grad = NetGrad(net);
  if (d_output.rows() != net.output_width() || d_output.cols() != tape.batch()) {
    throw std::invalid_argument("backward: upstream gradient shape mismatch");
  }
  Eigen::MatrixXd g = d_output;
  for (std::size_t i = net.layers.size(); i-- > 0;) {
    const auto& l = net.layers[i];
    if (l.activation == Activation::relu) {
      g = g.cwiseProduct((tape.pre_activations[i].array() > 0.0).cast<double>().matrix());
    }
    grad.weight[i].noalias() += g * tape.inputs[i].transpose();
    grad.bias[i] += g.rowwise().sum();
    g = l.weight.transpose() * g;
  }
  return g;
}

void adam_step(AdamState& state, std::span<double> params, std::span<const double> grads,
               double lr) {
  if (params.size() != grads.size()) throw std::invalid_argument("adam_step: shape mismatch");
  if (state.first_moment.size() != params.size()) {
    if (state.step != 0 || !state.first_moment.empty()) {
      throw std::invalid_argument("adam_step: optimizer state does not match parameters");
    }
    state.first_moment.assign(params.size(), 0.0);
    state.second_moment.assign(params.size(), 0.0);
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    double& m = state.first_moment[i];
    double& v = state.second_moment[i];
    m = state.beta1 * m + (1.0 - state.beta1) * grads[i];
    v = state.beta2 * v + (1.0 - state.beta2) * grads[i] * grads[i];
    const double m_hat = m / c1;
    const double v_hat = v / c2;
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + state.epsilon);
  }
}

void adam_step(AdamState& state, DenseNet& net, const NetGrad& grad, double lr) {
  std::vector<double> p = net.flatten();
  const std::vector<double> g = grad.flatten();
  adam_step(state, p, g, lr);
  net.assign(p);
}

}  // namespace avatar
