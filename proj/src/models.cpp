#include "mixunlearn/models.hpp"

#include "mixunlearn/checkpoint.hpp"
#include "mixunlearn/errors.hpp"
#include "mixunlearn/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mixunlearn {

// ---------------------------------------------------------------------------
// Architecture

Architecture Architecture::mlp(std::size_t input_dim, std::vector<std::size_t> hidden, std::size_t classes) {
  Architecture a;
  a.kind = ArchKind::mlp;
  a.input_shape = {input_dim};
  a.dense = std::move(hidden);
  a.classes = classes;
  a.validate();
  return a;
}

Architecture Architecture::cnn(Shape input_shape, std::size_t classes) {
  Architecture a;
  a.kind = ArchKind::cnn;
  a.input_shape = std::move(input_shape);
  a.conv_channels = {16, 32};
  a.dense = {256, 128};
  a.classes = classes;
  a.validate();
  return a;
}

void Architecture::validate() const {
  if (classes < 2) throw InputError("architecture: need at least 2 classes");
  if (dense.empty()) throw InputError("architecture: at least one hidden dense layer required");
  for (auto w : dense)
    if (w == 0) throw InputError("architecture: zero-width dense layer");
  if (kind == ArchKind::mlp) {
    if (input_shape.size() != 1 || input_shape[0] == 0)
      throw InputError("architecture: MLP input must be a non-empty vector, got " + shape_str(input_shape));
    return;
  }
  if (input_shape.size() != 3) throw InputError("architecture: CNN input must be {C, H, W}, got " + shape_str(input_shape));
  if (conv_channels.empty() || kernel == 0 || pool == 0) throw InputError("architecture: CNN needs conv layers");
  std::size_t h = input_shape[1], w = input_shape[2];
  for (std::size_t k = 0; k < conv_channels.size(); ++k) {
    if (h < kernel || w < kernel) throw InputError("architecture: input " + shape_str(input_shape) + " too small for conv stack");
    h = (h - kernel + 1) / pool;
    w = (w - kernel + 1) / pool;
    if (h == 0 || w == 0) throw InputError("architecture: input " + shape_str(input_shape) + " too small for pooling");
  }
}

nlohmann::json Architecture::to_json() const {
  return {{"kind", kind == ArchKind::mlp ? "mlp" : "cnn"},
          {"input_shape", input_shape},
          {"dense", dense},
          {"conv_channels", conv_channels},
          {"kernel", kernel},
          {"pool", pool},
          {"classes", classes}};
}

Architecture Architecture::from_json(const nlohmann::json& j) {
  try {
    Architecture a;
    const auto kind = j.at("kind").get<std::string>();
    if (kind != "mlp" && kind != "cnn") throw ParseError("architecture: unknown kind '" + kind + "'");
    a.kind = kind == "mlp" ? ArchKind::mlp : ArchKind::cnn;
    a.input_shape = j.at("input_shape").get<Shape>();
    a.dense = j.at("dense").get<std::vector<std::size_t>>();
    a.conv_channels = j.at("conv_channels").get<std::vector<std::size_t>>();
    a.kernel = j.at("kernel").get<std::size_t>();
    a.pool = j.at("pool").get<std::size_t>();
    a.classes = j.at("classes").get<std::size_t>();
    a.validate();
    return a;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("architecture descriptor: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Classifier

namespace {

Tensor he_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = (2.0 * uniform01(rng) - 1.0) * bound;
  return Tensor(std::move(shape), std::move(v), true);
}

std::size_t flattened_width(const Architecture& a) {
  std::size_t h = a.input_shape[1], w = a.input_shape[2];
  for (std::size_t k = 0; k < a.conv_channels.size(); ++k) {
    h = (h - a.kernel + 1) / a.pool;
    w = (w - a.kernel + 1) / a.pool;
  }
  return a.conv_channels.back() * h * w;
}

} // namespace

Classifier::Classifier(Architecture arch, std::uint64_t seed, InitOptions init) : arch_(std::move(arch)) {
  arch_.validate();
  Rng rng(seed);
  std::size_t width = 0;
  if (arch_.kind == ArchKind::cnn) {
    std::size_t in_ch = arch_.input_shape[0];
    for (std::size_t out_ch : arch_.conv_channels) {
      const std::size_t fan_in = in_ch * arch_.kernel * arch_.kernel;
      params_.push_back(he_uniform({out_ch, in_ch, arch_.kernel, arch_.kernel}, fan_in, rng));
      params_.push_back(Tensor::zeros({out_ch}, true));
      in_ch = out_ch;
    }
    width = flattened_width(arch_);
  } else {
    width = arch_.input_shape[0];
  }
  for (std::size_t out : arch_.dense) {
    params_.push_back(he_uniform({width, out}, width, rng));
    params_.push_back(Tensor::zeros({out}, true));
    width = out;
  }
  if (init.zero_final_layer) {
    params_.push_back(Tensor::zeros({width, arch_.classes}, true));
  } else {
    params_.push_back(he_uniform({width, arch_.classes}, width, rng));
  }
  params_.push_back(Tensor::zeros({arch_.classes}, true));
}

Classifier::Classifier(Architecture arch, std::vector<Tensor> params)
    : arch_(std::move(arch)), params_(std::move(params)) {}

Classifier Classifier::clone() const {
  std::vector<Tensor> copy;
  copy.reserve(params_.size());
  for (const auto& p : params_) copy.push_back(p.clone(p.requires_grad()));
  return Classifier(arch_, std::move(copy));
}

void Classifier::check_input(const Tensor& x) const {
  const Shape& s = x.shape();
  if (s.size() != arch_.input_shape.size() + 1 || !std::equal(arch_.input_shape.begin(), arch_.input_shape.end(), s.begin() + 1)) {
    Shape expected{0};
    expected.insert(expected.end(), arch_.input_shape.begin(), arch_.input_shape.end());
    throw DimensionError("classifier: input " + shape_str(s) + " does not match expected [N" +
                         shape_str(arch_.input_shape).replace(0, 1, ", "));
  }
}

Tensor Classifier::features(const Tensor& x) const {
  check_input(x);
  std::size_t p = 0;
  Tensor h = x;
  if (arch_.kind == ArchKind::cnn) {
    for (std::size_t k = 0; k < arch_.conv_channels.size(); ++k, p += 2)
      h = max_pool2d(relu(conv2d(h, params_[p], params_[p + 1], Padding::valid)), arch_.pool);
    h = reshape(h, {h.dim(0), h.numel() / h.dim(0)});
  }
  for (std::size_t k = 0; k < arch_.dense.size(); ++k, p += 2)
    h = relu(add_bias(matmul(h, params_[p]), params_[p + 1]));
  return h;
}

Tensor Classifier::head(const Tensor& features) const {
  const std::size_t p = params_.size() - 2;
  return add_bias(matmul(features, params_[p]), params_[p + 1]);
}

std::size_t Classifier::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.numel();
  return n;
}

std::uint64_t Classifier::parameter_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : params_) h = hash_values(p.values(), h);
  return h;
}

void Classifier::set_trainable(bool on) {
  for (auto& p : params_) p.set_requires_grad(on);
}

void Classifier::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void Classifier::save(const std::filesystem::path& path) const {
  Checkpoint ckpt;
  ckpt.meta = {{"kind", "classifier"}, {"architecture", arch_.to_json()}};
  for (const auto& p : params_) ckpt.tensors.push_back(p.detach());
  save_checkpoint(path, ckpt);
}

Classifier Classifier::load(const std::filesystem::path& path) {
  Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.meta.value("kind", "") != "classifier") throw ParseError(path.string() + ": not a classifier checkpoint");
  Architecture arch = Architecture::from_json(ckpt.meta.at("architecture"));
  Classifier reference(arch, 0);
  if (reference.params_.size() != ckpt.tensors.size()) throw ParseError(path.string() + ": parameter count mismatch");
  for (std::size_t k = 0; k < ckpt.tensors.size(); ++k) {
    if (reference.params_[k].shape() != ckpt.tensors[k].shape())
      throw ParseError(path.string() + ": parameter " + std::to_string(k) + " has shape " +
                       shape_str(ckpt.tensors[k].shape()) + ", expected " + shape_str(reference.params_[k].shape()));
    ckpt.tensors[k].set_requires_grad(true);
  }
  return Classifier(std::move(arch), std::move(ckpt.tensors));
}

// ---------------------------------------------------------------------------
// Training

void sgd_step(std::span<Tensor> params, double lr) {
  for (auto& p : params) {
    if (!p.has_grad()) continue;
    auto v = p.mutable_values();
    const auto g = p.grad();
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] -= lr * g[i];
      if (!std::isfinite(v[i])) throw NumericError("sgd_step: parameter became non-finite");
    }
    p.zero_grad();
  }
}

double clip_grad_norm(std::span<Tensor> params, double max_norm) {
  if (!(max_norm > 0.0)) throw InputError("clip_grad_norm: max_norm must be > 0");
  double sq = 0.0;
  for (const auto& p : params)
    if (p.has_grad())
      for (double g : p.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& p : params)
      if (p.has_grad()) p.scale_grad(s);
  }
  return norm;
}

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("train: learning rate must be > 0");
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train: batch size must be >= 1");
  if (augment) throw ConfigError("train: data augmentation is not supported");
}

void fit(Classifier& model, const Dataset& data, const TrainConfig& cfg, TrainHistory* history) {
  cfg.validate();
  if (data.empty()) throw InputError("train: dataset is empty");
  data.validate();
  if (data.num_classes > model.num_classes())
    throw InputError("train: dataset has " + std::to_string(data.num_classes) + " classes, model " +
                     std::to_string(model.num_classes()));
  Rng rng(derive_seed(cfg.seed, 0x7368756666)); // "shuff"
  const std::size_t n = data.size();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = permutation(n, rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      const Tensor loss = cross_entropy(model.logits(data.batch(idx)), data.batch_labels(idx));
      if (!std::isfinite(loss.item()))
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) + ", batch starting " + std::to_string(start));
      loss_sum += loss.item() * static_cast<double>(end - start);
      loss.backward();
      sgd_step(model.parameters(), cfg.lr);
    }
    if (history) history->epoch_loss.push_back(loss_sum / static_cast<double>(n));
  }
}

Classifier train_classifier(const Dataset& data, const Architecture& arch, const TrainConfig& cfg, TrainHistory* history) {
  cfg.validate();
  if (data.empty()) throw InputError("train: dataset is empty");
  Classifier model(arch, derive_seed(cfg.seed, 0x696e6974)); // "init"
  fit(model, data, cfg, history);
  return model;
}

namespace {

template <typename Fn>
Tensor batched(const Dataset& data, std::size_t batch_size, std::size_t width, Fn fn) {
  NoGradGuard no_grad;
  std::vector<double> out;
  out.reserve(data.size() * width);
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const Tensor y = fn(data.batch(idx));
    out.insert(out.end(), y.values().begin(), y.values().end());
  }
  return Tensor({data.size(), width}, std::move(out));
}

} // namespace

Tensor predict(const Classifier& model, const Dataset& data, std::size_t batch_size) {
  return batched(data, batch_size, model.num_classes(), [&](const Tensor& x) { return model.forward(x); });
}

Tensor extract_features(const Classifier& model, const Dataset& data, std::size_t batch_size) {
  return batched(data, batch_size, model.feature_width(), [&](const Tensor& x) { return model.features(x); });
}

} // namespace mixunlearn
