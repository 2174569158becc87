#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "fqc/sim.hpp"

namespace fqc::nn {

using Tensor = Eigen::MatrixXd;
using TensorList = std::vector<Tensor>;

enum class Activation { Tanh, Identity };

// Dense network. tensors = {W0, b0, W1, b1, ...}; W_l is (sizes[l+1] x sizes[l]),
// b_l is (sizes[l+1] x 1). Hidden layers use `hidden`, the output is linear.
struct MlpParams {
  std::vector<int> sizes;
  Activation hidden = Activation::Tanh;
  TensorList tensors;

  int num_layers() const { return static_cast<int>(sizes.size()) - 1; }
  int input_size() const { return sizes.front(); }
  int output_size() const { return sizes.back(); }
  Tensor& weight(int layer) { return tensors[2 * layer]; }
  const Tensor& weight(int layer) const { return tensors[2 * layer]; }
  Tensor& bias(int layer) { return tensors[2 * layer + 1]; }
  const Tensor& bias(int layer) const { return tensors[2 * layer + 1]; }
  std::string arch() const;
};

MlpParams zero_mlp(std::vector<int> sizes, Activation hidden = Activation::Tanh);
// Glorot-uniform weights, zero biases.
MlpParams init_mlp(std::vector<int> sizes, Rng& rng, Activation hidden = Activation::Tanh);

struct MlpCache {
  // activations[0] is the input batch, activations[l+1] the output of layer l.
  std::vector<Eigen::MatrixXd> activations;
};

// Column-batched forward pass: inputs is (input_size x batch).
Eigen::MatrixXd mlp_forward(const MlpParams& params, const Eigen::MatrixXd& inputs,
                            MlpCache* cache = nullptr);
Eigen::VectorXd mlp_forward(const MlpParams& params, const Eigen::VectorXd& input);

struct MlpGradient {
  TensorList params;      // same layout as MlpParams::tensors, summed over the batch
  Eigen::MatrixXd input;  // d/d inputs, one column per sample
};

MlpGradient mlp_gradient(const MlpParams& params, const MlpCache& cache,
                         const Eigen::MatrixXd& output_grad);

// Two stacked LSTM layers followed by a dense softmax layer.
// Gate blocks are stacked [input; forget; output; candidate] and act on [x; h_prev].
struct LstmParams {
  int input = 18;
  int hidden1 = 96;
  int hidden2 = 64;
  int classes = 5;
  int window = 0;  // required sequence length, 0 = unchecked
  TensorList tensors;  // {W1, b1, W2, b2, Wd, bd}

  Tensor& w1() { return tensors[0]; }
  Tensor& b1() { return tensors[1]; }
  Tensor& w2() { return tensors[2]; }
  Tensor& b2() { return tensors[3]; }
  Tensor& wd() { return tensors[4]; }
  Tensor& bd() { return tensors[5]; }
  const Tensor& w1() const { return tensors[0]; }
  const Tensor& b1() const { return tensors[1]; }
  const Tensor& w2() const { return tensors[2]; }
  const Tensor& b2() const { return tensors[3]; }
  const Tensor& wd() const { return tensors[4]; }
  const Tensor& bd() const { return tensors[5]; }
  std::string arch() const;
};

LstmParams zero_lstm(int input, int hidden1, int hidden2, int classes, int window = 0);
// Uniform +-sqrt(1/hidden) for recurrent layers with forget bias 1, Glorot for the dense layer.
LstmParams init_lstm(int input, int hidden1, int hidden2, int classes, Rng& rng, int window = 0);

struct LstmLayerCache {
  std::vector<Eigen::MatrixXd> gates;  // post-nonlinearity, (4H x B) per step
  std::vector<Eigen::MatrixXd> cell;   // c_t, (H x B)
  std::vector<Eigen::MatrixXd> hidden; // h_t, (H x B)
};

struct LstmCache {
  std::vector<Eigen::MatrixXd> inputs;
  LstmLayerCache layer1;
  LstmLayerCache layer2;
  Eigen::MatrixXd logits;
  Eigen::MatrixXd probs;
};

// sequence[t] is (input x batch). Returns class probabilities (classes x batch).
Eigen::MatrixXd lstm_forward(const LstmParams& params, const std::vector<Eigen::MatrixXd>& sequence,
                             LstmCache* cache = nullptr);
// Single window of states, oldest first.
Eigen::VectorXd lstm_forward(const LstmParams& params, const std::vector<StateVec>& window);

struct LstmGradient {
  TensorList params;                   // summed over the batch
  std::vector<Eigen::MatrixXd> inputs; // d loss / d sequence[t]
  double loss = 0.0;                   // summed cross-entropy
};

// Backpropagation through the full window for softmax cross-entropy against
// one-hot `labels` (classes x batch).
LstmGradient lstm_gradient(const LstmParams& params, const LstmCache& cache,
                           const Eigen::MatrixXd& labels);

struct LossAndGrad {
  double loss = 0.0;
  double grad = 0.0;
};

LossAndGrad huber_loss(double pred, double target, double delta = 1.0);

struct SoftmaxCe {
  double loss = 0.0;
  Eigen::VectorXd grad;  // d loss / d logits
};

Eigen::VectorXd softmax(const Eigen::VectorXd& logits);
// Column-wise max-subtracted softmax.
Eigen::MatrixXd softmax_columns(const Eigen::MatrixXd& logits);
SoftmaxCe softmax_cross_entropy(const Eigen::VectorXd& logits, const Eigen::VectorXd& label);

enum class OptimizerMode { Sgd, SgdMomentum, Adam };

struct OptimizerState {
  OptimizerMode mode = OptimizerMode::Sgd;
  double learning_rate = 1e-4;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::int64_t steps = 0;
  TensorList first;   // momentum velocity or Adam m
  TensorList second;  // Adam v

  OptimizerState() = default;
  OptimizerState(OptimizerMode m, double lr) : mode(m), learning_rate(lr) {}

  // Applies one update in place. Moment buffers are allocated on first use
  // and must keep matching the parameter shapes afterwards.
  void step(TensorList& params, const TensorList& grads);
};

OptimizerMode parse_optimizer_mode(const std::string& name);
std::string to_string(OptimizerMode mode);

// Little-endian weight file: "FQNN", u32 version, u32-prefixed arch string,
// u32 tensor count, (u32 rows, u32 cols) per tensor, then raw f64 data.
constexpr std::uint32_t kWeightFormatVersion = 1;

struct WeightFile {
  std::string arch;
  TensorList tensors;
};

void write_weight_file(const std::filesystem::path& path, const WeightFile& file);
WeightFile read_weight_file(const std::filesystem::path& path);

void save_weights(const MlpParams& params, const std::filesystem::path& path);
void save_weights(const LstmParams& params, const std::filesystem::path& path);
MlpParams load_mlp(const std::filesystem::path& path);
LstmParams load_lstm(const std::filesystem::path& path);
// Loads into an existing architecture, rejecting any shape disagreement.
void load_weights(const std::filesystem::path& path, MlpParams& into);
void load_weights(const std::filesystem::path& path, LstmParams& into);

// Elementwise helpers used by the training loops.
TensorList zeros_like(const TensorList& tensors);
void accumulate(TensorList& into, const TensorList& add, double scale = 1.0);
void scale(TensorList& tensors, double factor);
double squared_norm(const TensorList& tensors);

}  // namespace fqc::nn
