// Small dense feed-forward networks with analytic backward and Adam.
//
// Batches are column-major: an input of width `in` for B samples is an
// in x B matrix, one sample per column.
#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace avatar {

enum class Activation { relu, none };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

struct DenseLayer {
  Eigen::MatrixXd weight;  // out x in
  Eigen::VectorXd bias;    // out
  Activation activation = Activation::none;
};

class DenseNet {
 public:
  DenseNet() = default;

  /// Hidden layers use ReLU, the output layer is linear. Weights are drawn from
  /// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases start at zero. With
  /// zero_final the output layer starts at exactly zero.
  static DenseNet make(int input_width, std::span<const int> hidden, int output_width,
                       std::mt19937_64& rng, bool zero_final = false);

  int input_width() const;
  int output_width() const;
  std::size_t parameter_count() const;
  bool empty() const { return layers.empty(); }

  std::vector<double> flatten() const;
  void assign(std::span<const double> params);

  std::vector<DenseLayer> layers;
};

/// Per-layer inputs and pre-activations recorded by forward.
struct NetTape {
  std::vector<Eigen::MatrixXd> inputs;
  std::vector<Eigen::MatrixXd> pre_activations;
  Eigen::Index batch() const { return inputs.empty() ? 0 : inputs.front().cols(); }
};

struct NetGrad {
  NetGrad() = default;
  explicit NetGrad(const DenseNet& net);

  std::vector<Eigen::MatrixXd> weight;
  std::vector<Eigen::VectorXd> bias;

  void set_zero();
  NetGrad& operator+=(const NetGrad& other);
  std::vector<double> flatten() const;
};

Eigen::MatrixXd forward(const DenseNet& net, const Eigen::MatrixXd& input,
                        NetTape* tape = nullptr);

/// Accumulates dL/dparams into `grad` and returns dL/dinput.
Eigen::MatrixXd backward(const DenseNet& net, const NetTape& tape,
                         const Eigen::MatrixXd& d_output, NetGrad& grad);

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::int64_t step = 0;
  std::vector<double> first_moment;
  std::vector<double> second_moment;

  AdamState() = default;
  explicit AdamState(std::size_t size) : first_moment(size, 0.0), second_moment(size, 0.0) {}
};

/// Bias-corrected Adam update, in place.
void adam_step(AdamState& state, std::span<double> params, std::span<const double> grads,
               double lr);

/// Adam step for a whole network.
void adam_step(AdamState& state, DenseNet& net, const NetGrad& grad, double lr);

}  // namespace avatar
