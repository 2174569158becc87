#include "fqc/nn.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace fqc::nn {

static_assert(std::endian::native == std::endian::little, "weight files assume a little-endian host");

namespace {

Eigen::MatrixXd sigmoid(const Eigen::MatrixXd& x) {
  return (1.0 + (-x.array()).exp()).inverse().matrix();
}

void glorot(Tensor& w, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (Eigen::Index j = 0; j < w.cols(); ++j)
    for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = dist(rng);
}

std::string join_sizes(const std::vector<int>& sizes) {
  std::string s;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    if (i) s += '-';
    s += std::to_string(sizes[i]);
  }
  return s;
}

std::vector<int> split_sizes(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, '-')) out.push_back(std::stoi(item));
  return out;
}

std::string shape_str(Eigen::Index rows, Eigen::Index cols) {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

void check_shapes(const TensorList& expected, const TensorList& found, const std::string& what) {
  if (expected.size() != found.size())
    throw std::runtime_error(what + ": expected " + std::to_string(expected.size()) +
                             " tensors, found " + std::to_string(found.size()));
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (expected[i].rows() != found[i].rows() || expected[i].cols() != found[i].cols())
      throw std::runtime_error(what + ": tensor " + std::to_string(i) + " expected shape " +
                               shape_str(expected[i].rows(), expected[i].cols()) + ", found " +
                               shape_str(found[i].rows(), found[i].cols()));
  }
}

struct LayerForward {
  Eigen::MatrixXd gates, cell, hidden;
};

// One LSTM step for a batch. w acts on [x; h_prev].
LayerForward lstm_cell(const Tensor& w, const Tensor& b, const Eigen::MatrixXd& x,
                       const Eigen::MatrixXd& h_prev, const Eigen::MatrixXd& c_prev) {
  const Eigen::Index h = h_prev.rows();
  const Eigen::Index in = x.rows();
  Eigen::MatrixXd z = w.leftCols(in) * x + w.rightCols(h) * h_prev;
  z.colwise() += b.col(0);
  LayerForward out;
  out.gates.resize(4 * h, x.cols());
  out.gates.topRows(3 * h) = sigmoid(z.topRows(3 * h));
  out.gates.bottomRows(h) = z.bottomRows(h).array().tanh().matrix();
  const auto i = out.gates.topRows(h).array();
  const auto f = out.gates.middleRows(h, h).array();
  const auto o = out.gates.middleRows(2 * h, h).array();
  const auto g = out.gates.bottomRows(h).array();
  out.cell = (f * c_prev.array() + i * g).matrix();
  out.hidden = (o * out.cell.array().tanh()).matrix();
  return out;
}

void run_layer(const Tensor& w, const Tensor& b, const std::vector<Eigen::MatrixXd>& xs, int hidden,
               LstmLayerCache& cache) {
  const Eigen::Index batch = xs.front().cols();
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(hidden, batch);
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(hidden, batch);
  cache.gates.clear();
  cache.cell.clear();
  cache.hidden.clear();
  cache.gates.reserve(xs.size());
  cache.cell.reserve(xs.size());
  cache.hidden.reserve(xs.size());
  for (const auto& x : xs) {
    LayerForward step = lstm_cell(w, b, x, h, c);
    h = step.hidden;
    c = step.cell;
    cache.gates.push_back(std::move(step.gates));
    cache.cell.push_back(std::move(step.cell));
    cache.hidden.push_back(std::move(step.hidden));
  }
}

// Backward through one layer. dh_out[t] is the loss gradient flowing into h_t
// from above. Returns gradients w.r.t. the layer inputs.
std::vector<Eigen::MatrixXd> backprop_layer(const Tensor& w, const std::vector<Eigen::MatrixXd>& xs,
                                            const LstmLayerCache& cache,
                                            const std::vector<Eigen::MatrixXd>& dh_out, Tensor& dw,
                                            Tensor& db) {
  const std::size_t steps = xs.size();
  const Eigen::Index h = cache.hidden.front().rows();
  const Eigen::Index in = xs.front().rows();
  const Eigen::Index batch = xs.front().cols();
  std::vector<Eigen::MatrixXd> dx(steps);
  Eigen::MatrixXd dh_next = Eigen::MatrixXd::Zero(h, batch);
  Eigen::MatrixXd dc_next = Eigen::MatrixXd::Zero(h, batch);
  Eigen::MatrixXd dz(4 * h, batch);
  for (std::size_t k = steps; k-- > 0;) {
    const Eigen::MatrixXd& gates = cache.gates[k];
    const auto i = gates.topRows(h).array();
    const auto f = gates.middleRows(h, h).array();
    const auto o = gates.middleRows(2 * h, h).array();
    const auto g = gates.bottomRows(h).array();
    const Eigen::ArrayXXd tanh_c = cache.cell[k].array().tanh();
    const Eigen::ArrayXXd c_prev =
        k ? Eigen::ArrayXXd(cache.cell[k - 1].array()) : Eigen::ArrayXXd::Zero(h, batch);

    const Eigen::ArrayXXd dh = dh_out[k].array() + dh_next.array();
    const Eigen::ArrayXXd dc = dc_next.array() + dh * o * (1.0 - tanh_c.square());
    dz.topRows(h) = (dc * g * i * (1.0 - i)).matrix();
    dz.middleRows(h, h) = (dc * c_prev * f * (1.0 - f)).matrix();
    dz.middleRows(2 * h, h) = (dh * tanh_c * o * (1.0 - o)).matrix();
    dz.bottomRows(h) = (dc * i * (1.0 - g.square())).matrix();
    dc_next = (dc * f).matrix();

    dw.leftCols(in).noalias() += dz * xs[k].transpose();
    if (k) dw.rightCols(h).noalias() += dz * cache.hidden[k - 1].transpose();
    db.col(0) += dz.rowwise().sum();
    dx[k].noalias() = w.leftCols(in).transpose() * dz;
    dh_next.noalias() = w.rightCols(h).transpose() * dz;
  }
  return dx;
}

void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }

std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 4)) throw std::runtime_error("weight file truncated");
  return v;
}

}  // namespace

std::string MlpParams::arch() const {
  return std::string("mlp:") + (hidden == Activation::Tanh ? "tanh" : "identity") + ":" +
         join_sizes(sizes);
}

MlpParams zero_mlp(std::vector<int> sizes, Activation hidden) {
  if (sizes.size() < 2) throw std::invalid_argument("mlp needs at least input and output sizes");
  MlpParams p;
  p.sizes = std::move(sizes);
  p.hidden = hidden;
  for (int l = 0; l < p.num_layers(); ++l) {
    p.tensors.push_back(Tensor::Zero(p.sizes[l + 1], p.sizes[l]));
    p.tensors.push_back(Tensor::Zero(p.sizes[l + 1], 1));
  }
  return p;
}

MlpParams init_mlp(std::vector<int> sizes, Rng& rng, Activation hidden) {
  MlpParams p = zero_mlp(std::move(sizes), hidden);
  for (int l = 0; l < p.num_layers(); ++l) glorot(p.weight(l), rng);
  return p;
}

Eigen::MatrixXd mlp_forward(const MlpParams& params, const Eigen::MatrixXd& inputs, MlpCache* cache) {
  if (inputs.rows() != params.input_size())
    throw std::invalid_argument("mlp_forward: expected input size " +
                                std::to_string(params.input_size()) + ", got " +
                                std::to_string(inputs.rows()));
  if (cache) {
    cache->activations.clear();
    cache->activations.push_back(inputs);
  }
  Eigen::MatrixXd a = inputs;
  const int layers = params.num_layers();
  for (int l = 0; l < layers; ++l) {
    Eigen::MatrixXd z = params.weight(l) * a;
    z.colwise() += params.bias(l).col(0);
    if (l + 1 < layers && params.hidden == Activation::Tanh) z = z.array().tanh().matrix();
    a = std::move(z);
    if (cache) cache->activations.push_back(a);
  }
  return a;
}

Eigen::VectorXd mlp_forward(const MlpParams& params, const Eigen::VectorXd& input) {
  return mlp_forward(params, Eigen::MatrixXd(input)).col(0);
}

MlpGradient mlp_gradient(const MlpParams& params, const MlpCache& cache,
                         const Eigen::MatrixXd& output_grad) {
  const int layers = params.num_layers();
  if (static_cast<int>(cache.activations.size()) != layers + 1)
    throw std::logic_error("mlp_gradient: forward cache missing");
  MlpGradient g;
  g.params = zeros_like(params.tensors);
  Eigen::MatrixXd delta = output_grad;
  for (int l = layers - 1; l >= 0; --l) {
    const Eigen::MatrixXd& a_in = cache.activations[l];
    g.params[2 * l].noalias() = delta * a_in.transpose();
    g.params[2 * l + 1] = delta.rowwise().sum();
    Eigen::MatrixXd back = params.weight(l).transpose() * delta;
    if (l > 0 && params.hidden == Activation::Tanh)
      back = (back.array() * (1.0 - a_in.array().square())).matrix();
    delta = std::move(back);
  }
  g.input = std::move(delta);
  return g;
}

std::string LstmParams::arch() const {
  return "lstm:" + join_sizes({input, hidden1, hidden2, classes}) + ":w" + std::to_string(window);
}

LstmParams zero_lstm(int input, int hidden1, int hidden2, int classes, int window) {
  if (input < 1 || hidden1 < 1 || hidden2 < 1 || classes < 2)
    throw std::invalid_argument("lstm: invalid layer sizes");
  LstmParams p;
  p.input = input;
  p.hidden1 = hidden1;
  p.hidden2 = hidden2;
  p.classes = classes;
  p.window = window;
  p.tensors = {Tensor::Zero(4 * hidden1, input + hidden1), Tensor::Zero(4 * hidden1, 1),
               Tensor::Zero(4 * hidden2, hidden1 + hidden2), Tensor::Zero(4 * hidden2, 1),
               Tensor::Zero(classes, hidden2),               Tensor::Zero(classes, 1)};
  return p;
}

LstmParams init_lstm(int input, int hidden1, int hidden2, int classes, Rng& rng, int window) {
  LstmParams p = zero_lstm(input, hidden1, hidden2, classes, window);
  auto fill = [&rng](Tensor& w, int hidden) {
    const double limit = std::sqrt(1.0 / hidden);
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (Eigen::Index j = 0; j < w.cols(); ++j)
      for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = dist(rng);
  };
  fill(p.w1(), hidden1);
  fill(p.w2(), hidden2);
  p.b1().middleRows(hidden1, hidden1).setOnes();
  p.b2().middleRows(hidden2, hidden2).setOnes();
  glorot(p.wd(), rng);
  return p;
}

Eigen::MatrixXd lstm_forward(const LstmParams& params, const std::vector<Eigen::MatrixXd>& sequence,
                             LstmCache* cache) {
  if (sequence.empty()) throw std::invalid_argument("lstm_forward: empty sequence");
  if (params.window > 0 && static_cast<int>(sequence.size()) != params.window)
    throw std::invalid_argument("lstm_forward: window length " + std::to_string(sequence.size()) +
                                " does not match configured " + std::to_string(params.window));
  for (const auto& x : sequence)
    if (x.rows() != params.input || x.cols() != sequence.front().cols())
      throw std::invalid_argument("lstm_forward: inconsistent input shape");

  LstmCache local;
  LstmCache& c = cache ? *cache : local;
  c.inputs = sequence;
  run_layer(params.w1(), params.b1(), c.inputs, params.hidden1, c.layer1);
  run_layer(params.w2(), params.b2(), c.layer1.hidden, params.hidden2, c.layer2);
  c.logits = params.wd() * c.layer2.hidden.back();
  c.logits.colwise() += params.bd().col(0);
  c.probs = softmax_columns(c.logits);
  return c.probs;
}

Eigen::VectorXd lstm_forward(const LstmParams& params, const std::vector<StateVec>& window) {
  std::vector<Eigen::MatrixXd> seq;
  seq.reserve(window.size());
  for (const auto& s : window) seq.emplace_back(Eigen::MatrixXd(s));
  return lstm_forward(params, seq).col(0);
}

LstmGradient lstm_gradient(const LstmParams& params, const LstmCache& cache,
                           const Eigen::MatrixXd& labels) {
  if (cache.inputs.empty()) throw std::logic_error("lstm_gradient: forward cache missing");
  if (labels.rows() != params.classes || labels.cols() != cache.probs.cols())
    throw std::invalid_argument("lstm_gradient: label shape mismatch");
  const std::size_t steps = cache.inputs.size();
  const Eigen::Index batch = labels.cols();

  LstmGradient g;
  g.params = zeros_like(params.tensors);
  g.loss = -(labels.array() * cache.probs.array().max(1e-300).log()).sum();

  const Eigen::MatrixXd dlogits = cache.probs - labels;
  const Eigen::MatrixXd& h2_last = cache.layer2.hidden.back();
  g.params[4].noalias() = dlogits * h2_last.transpose();
  g.params[5] = dlogits.rowwise().sum();

  std::vector<Eigen::MatrixXd> dh2(steps, Eigen::MatrixXd::Zero(params.hidden2, batch));
  dh2.back() = params.wd().transpose() * dlogits;
  std::vector<Eigen::MatrixXd> dh1 =
      backprop_layer(params.w2(), cache.layer1.hidden, cache.layer2, dh2, g.params[2], g.params[3]);
  g.inputs = backprop_layer(params.w1(), cache.inputs, cache.layer1, dh1, g.params[0], g.params[1]);
  return g;
}

LossAndGrad huber_loss(double pred, double target, double delta) {
  if (!(delta > 0.0)) throw std::invalid_argument("huber_loss: delta must be > 0");
  const double e = pred - target;
  if (std::abs(e) <= delta) return {0.5 * e * e, e};
  return {delta * (std::abs(e) - 0.5 * delta), e > 0.0 ? delta : -delta};
}

Eigen::VectorXd softmax(const Eigen::VectorXd& logits) {
  return softmax_columns(Eigen::MatrixXd(logits)).col(0);
}

Eigen::MatrixXd softmax_columns(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd out = logits;
  for (Eigen::Index j = 0; j < out.cols(); ++j) {
    auto col = out.col(j);
    col.array() -= col.maxCoeff();
    col = col.array().exp().matrix();
    col /= col.sum();
  }
  return out;
}

SoftmaxCe softmax_cross_entropy(const Eigen::VectorXd& logits, const Eigen::VectorXd& label) {
  if (logits.size() < 2) throw std::invalid_argument("softmax_cross_entropy: need >= 2 classes");
  if (label.size() != logits.size())
    throw std::invalid_argument("softmax_cross_entropy: label size mismatch");
  const double m = logits.maxCoeff();
  const double lse = m + std::log((logits.array() - m).exp().sum());
  SoftmaxCe out;
  out.loss = (label.array() * (lse - logits.array())).sum();
  out.grad = (logits.array() - lse).exp().matrix() * label.sum() - label;
  return out;
}

void OptimizerState::step(TensorList& params, const TensorList& grads) {
  if (params.size() != grads.size())
    throw std::invalid_argument("optimizer: parameter/gradient count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i].rows() != grads[i].rows() || params[i].cols() != grads[i].cols())
      throw std::invalid_argument("optimizer: gradient shape mismatch at tensor " + std::to_string(i));
  ++steps;
  switch (mode) {
    case OptimizerMode::Sgd:
      for (std::size_t i = 0; i < params.size(); ++i) params[i] -= learning_rate * grads[i];
      return;
    case OptimizerMode::SgdMomentum:
      if (first.empty()) first = zeros_like(params);
      for (std::size_t i = 0; i < params.size(); ++i) {
        first[i] = momentum * first[i] + grads[i];
        params[i] -= learning_rate * first[i];
      }
      return;
    case OptimizerMode::Adam: {
      if (first.empty()) first = zeros_like(params);
      if (second.empty()) second = zeros_like(params);
      const double c1 = 1.0 - std::pow(beta1, static_cast<double>(steps));
      const double c2 = 1.0 - std::pow(beta2, static_cast<double>(steps));
      for (std::size_t i = 0; i < params.size(); ++i) {
        first[i] = beta1 * first[i] + (1.0 - beta1) * grads[i];
        second[i] = beta2 * second[i] + (1.0 - beta2) * grads[i].cwiseAbs2();
        params[i].array() -= learning_rate * (first[i].array() / c1) /
                             ((second[i].array() / c2).sqrt() + epsilon);
      }
      return;
    }
  }
}

OptimizerMode parse_optimizer_mode(const std::string& name) {
  if (name == "sgd") return OptimizerMode::Sgd;
  if (name == "sgd_momentum" || name == "momentum") return OptimizerMode::SgdMomentum;
  if (name == "adam") return OptimizerMode::Adam;
  throw std::invalid_argument("unknown optimizer '" + name + "' (expected sgd, sgd_momentum, adam)");
}

std::string to_string(OptimizerMode mode) {
  switch (mode) {
    case OptimizerMode::Sgd:
      return "sgd";
    case OptimizerMode::SgdMomentum:
      return "sgd_momentum";
    case OptimizerMode::Adam:
      return "adam";
  }
  return "?";
}

void write_weight_file(const std::filesystem::path& path, const WeightFile& file) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os.write("FQNN", 4);
  write_u32(os, kWeightFormatVersion);
  write_u32(os, static_cast<std::uint32_t>(file.arch.size()));
  os.write(file.arch.data(), static_cast<std::streamsize>(file.arch.size()));
  write_u32(os, static_cast<std::uint32_t>(file.tensors.size()));
  for (const auto& t : file.tensors) {
    write_u32(os, static_cast<std::uint32_t>(t.rows()));
    write_u32(os, static_cast<std::uint32_t>(t.cols()));
  }
  // Eigen storage is column-major; data is written in that order.
  for (const auto& t : file.tensors)
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

WeightFile read_weight_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "FQNN", 4) != 0)
    throw std::runtime_error(path.string() + ": bad magic header (not an FQNN weight file)");
  const std::uint32_t version = read_u32(is);
  if (version != kWeightFormatVersion)
    throw std::runtime_error(path.string() + ": unsupported format version " +
                             std::to_string(version) + " (expected " +
                             std::to_string(kWeightFormatVersion) + ")");
  WeightFile file;
  const std::uint32_t arch_len = read_u32(is);
  if (arch_len > 4096) throw std::runtime_error(path.string() + ": corrupt architecture string");
  file.arch.resize(arch_len);
  if (!is.read(file.arch.data(), arch_len)) throw std::runtime_error("weight file truncated");
  const std::uint32_t count = read_u32(is);
  if (count > 1024) throw std::runtime_error(path.string() + ": corrupt tensor count");
  std::vector<std::pair<std::uint32_t, std::uint32_t>> shapes(count);
  for (auto& [r, c] : shapes) {
    r = read_u32(is);
    c = read_u32(is);
    if (static_cast<std::uint64_t>(r) * c > (1ull << 28))
      throw std::runtime_error(path.string() + ": corrupt tensor shape");
  }
  for (const auto& [r, c] : shapes) {
    Tensor t(r, c);
    if (!is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double))))
      throw std::runtime_error(path.string() + ": weight data truncated");
    file.tensors.push_back(std::move(t));
  }
  return file;
}

void save_weights(const MlpParams& params, const std::filesystem::path& path) {
  write_weight_file(path, {params.arch(), params.tensors});
}

void save_weights(const LstmParams& params, const std::filesystem::path& path) {
  write_weight_file(path, {params.arch(), params.tensors});
}

MlpParams load_mlp(const std::filesystem::path& path) {
  WeightFile file = read_weight_file(path);
  const std::string& a = file.arch;
  const auto first = a.find(':');
  const auto second = a.find(':', first + 1);
  if (a.rfind("mlp:", 0) != 0 || second == std::string::npos)
    throw std::runtime_error(path.string() + ": expected an mlp architecture, found '" + a + "'");
  const std::string act = a.substr(first + 1, second - first - 1);
  MlpParams p = zero_mlp(split_sizes(a.substr(second + 1)),
                         act == "identity" ? Activation::Identity : Activation::Tanh);
  check_shapes(p.tensors, file.tensors, path.string());
  p.tensors = std::move(file.tensors);
  return p;
}

LstmParams load_lstm(const std::filesystem::path& path) {
  WeightFile file = read_weight_file(path);
  const std::string& a = file.arch;
  const auto wpos = a.find(":w");
  if (a.rfind("lstm:", 0) != 0 || wpos == std::string::npos)
    throw std::runtime_error(path.string() + ": expected an lstm architecture, found '" + a + "'");
  const std::vector<int> sizes = split_sizes(a.substr(5, wpos - 5));
  if (sizes.size() != 4) throw std::runtime_error(path.string() + ": malformed lstm architecture");
  LstmParams p = zero_lstm(sizes[0], sizes[1], sizes[2], sizes[3], std::stoi(a.substr(wpos + 2)));
  check_shapes(p.tensors, file.tensors, path.string());
  p.tensors = std::move(file.tensors);
  return p;
}

void load_weights(const std::filesystem::path& path, MlpParams& into) {
  WeightFile file = read_weight_file(path);
  check_shapes(into.tensors, file.tensors, path.string());
  if (file.arch != into.arch())
    throw std::runtime_error(path.string() + ": architecture mismatch, expected '" + into.arch() +
                             "', found '" + file.arch + "'");
  into.tensors = std::move(file.tensors);
}

void load_weights(const std::filesystem::path& path, LstmParams& into) {
  WeightFile file = read_weight_file(path);
  check_shapes(into.tensors, file.tensors, path.string());
  if (file.arch != into.arch())
    throw std::runtime_error(path.string() + ": architecture mismatch, expected '" + into.arch() +
                             "', found '" + file.arch + "'");
  into.tensors = std::move(file.tensors);
}

TensorList zeros_like(const TensorList& tensors) {
  TensorList out;
  out.reserve(tensors.size());
  for (const auto& t : tensors) out.push_back(Tensor::Zero(t.rows(), t.cols()));
  return out;
}

void accumulate(TensorList& into, const TensorList& add, double scale) {
  for (std::size_t i = 0; i < into.size(); ++i) into[i] += scale * add[i];
}

void scale(TensorList& tensors, double factor) {
  for (auto& t : tensors) t *= factor;
}

double squared_norm(const TensorList& tensors) {
  double s = 0.0;
  for (const auto& t : tensors) s += t.squaredNorm();
  return s;
}

}  // namespace fqc::nn
