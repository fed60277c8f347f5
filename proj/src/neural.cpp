#include "csmud/neural.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "binio.hpp"
#include "csmud/hash.hpp"
#include "csmud/kernels.hpp"
#include "csmud/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "model container assumes a little-endian host");

namespace csmud::neural {

namespace {

constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.9;  // running = m * running + (1-m) * batch

constexpr char kModelMagic[8] = {'C', 'S', 'M', 'U', 'D', 'N', 'E', 'T'};
constexpr std::uint8_t kModelVersion = 1;

}  // namespace

std::string arch_name(Arch a) { return a == Arch::brnn ? "brnn" : "dnn"; }

Arch arch_from_name(const std::string& name) {
  if (name == "brnn") return Arch::brnn;
  if (name == "dnn") return Arch::dnn;
  throw ConfigError("unknown architecture tag: " + name);
}

std::string head_name(Head h) {
  return h == Head::softmax ? "softmax" : "sigmoid";
}

Head head_from_name(const std::string& name) {
  if (name == "softmax") return Head::softmax;
  if (name == "sigmoid") return Head::sigmoid;
  throw ConfigError("unknown head tag: " + name);
}

void NetworkShape::validate() const {
  if (users < 1 || block_size < 1 || measurement_len < 1)
    throw ConfigError("network shape dimensions must be positive");
  if (relu_layers < 1) throw ConfigError("need at least one relu layer");
  if (residual_blocks < 0) throw ConfigError("negative residual block count");
}

void to_json(nlohmann::json& j, const NetworkShape& s) {
  j = nlohmann::json{{"arch", arch_name(s.arch)},
                     {"head", head_name(s.head)},
                     {"users", s.users},
                     {"block_size", s.block_size},
                     {"measurement_len", s.measurement_len},
                     {"relu_layers", s.relu_layers},
                     {"residual_blocks", s.residual_blocks}};
}

void from_json(const nlohmann::json& j, NetworkShape& s) {
  s.arch = arch_from_name(j.at("arch").get<std::string>());
  s.head = head_from_name(j.at("head").get<std::string>());
  j.at("users").get_to(s.users);
  j.at("block_size").get_to(s.block_size);
  j.at("measurement_len").get_to(s.measurement_len);
  j.at("relu_layers").get_to(s.relu_layers);
  j.at("residual_blocks").get_to(s.residual_blocks);
}

NetworkShape shape_for(const SystemConfig& config, Arch arch, Head head) {
  NetworkShape s;
  s.arch = arch;
  s.head = head;
  s.users = config.K;
  s.block_size = config.L;
  s.measurement_len = config.measurement_len();
  s.validate();
  return s;
}

std::uint64_t default_init_seed(const SystemConfig& config) {
  return derive_seed(config.seed, 100);
}

std::vector<double> featurize(const Eigen::VectorXcd& y) {
  const Eigen::Index m = y.size();
  std::vector<double> out(static_cast<std::size_t>(2 * m));
  for (Eigen::Index i = 0; i < m; ++i) {
    out[static_cast<std::size_t>(i)] = y[i].real();
    out[static_cast<std::size_t>(m + i)] = y[i].imag();
  }
  return out;
}

std::vector<int> top_users(const double* scores, int users, int n) {
  if (n < 0 || n > users) throw std::invalid_argument("top count out of range");
  std::vector<int> order(static_cast<std::size_t>(users));
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + n, order.end(),
                    [&](int a, int b) {
                      return scores[a] != scores[b] ? scores[a] > scores[b]
                                                    : a < b;
                    });
  std::vector<int> top(order.begin(), order.begin() + n);
  std::sort(top.begin(), top.end());
  return top;
}

LabeledSet featurize_dataset(const sysmodel::Dataset& dataset) {
  LabeledSet set;
  set.count = static_cast<int>(dataset.samples.size());
  set.input_width = 2 * dataset.config.measurement_len();
  set.users = dataset.config.K;
  set.X.resize(static_cast<std::size_t>(set.count) * set.input_width);
  set.active.resize(dataset.samples.size());
  for (int i = 0; i < set.count; ++i) {
    const auto row = featurize(dataset.samples[i].y);
    std::copy(row.begin(), row.end(),
              set.X.begin() + static_cast<std::size_t>(i) * set.input_width);
    set.active[i] = dataset.samples[i].active_set;
  }
  return set;
}

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

template <typename Scalar>
Network<Scalar>::Network(const NetworkShape& shape, std::uint64_t init_seed)
    : shape_(shape) {
  shape_.validate();
  build_pipeline();
  init_params(init_seed);
}

template <typename Scalar>
void Network<Scalar>::build_pipeline() {
  const int hidden = shape_.hidden_width();
  const int proj = shape_.proj_width();
  const int L = shape_.block_size;

  auto add_dense = [&](int in, int out) {
    dense_.push_back(DenseParams{in, out, {}, {}, {}, {}, {}, {}});
    pipeline_.push_back(
        Step{Op::dense, static_cast<int>(dense_.size()) - 1, in, out,
             {}, {}, {}, {}, {}});
  };
  auto add_bn = [&](int width) {
    bn_.push_back(BatchNormParams{width, {}, {}, {}, {}, {}, {}, {}, {}, {},
                                  {}, {}});
    pipeline_.push_back(
        Step{Op::batch_norm, static_cast<int>(bn_.size()) - 1, width, width,
             {}, {}, {}, {}, {}});
  };
  auto add_plain = [&](Op op, int in, int out) {
    pipeline_.push_back(Step{op, -1, in, out, {}, {}, {}, {}, {}});
  };

  int width = shape_.input_width();
  for (int r = 0; r < shape_.relu_layers; ++r) {
    add_dense(width, hidden);
    add_bn(hidden);
    add_plain(Op::relu, hidden, hidden);
    width = hidden;
  }
  add_dense(width, proj);
  for (int b = 0; b < shape_.residual_blocks; ++b) {
    add_plain(Op::residual_begin, proj, proj);
    add_dense(proj, proj);
    add_bn(proj);
    add_plain(Op::residual_add, proj, proj);
    if (shape_.arch == Arch::brnn)
      add_plain(Op::block_activation, proj, proj);
    else
      add_plain(Op::relu, proj, proj);
  }
  if (shape_.arch == Arch::brnn) {
    add_plain(Op::block_max_pool, proj, proj / L);
  } else {
    add_dense(proj, shape_.users);
  }
}

template <typename Scalar>
void Network<Scalar>::init_params(std::uint64_t init_seed) {
  // Dense layer i draws from derive_seed(init_seed, i), so architectures
  // that share a prefix of shapes share those initial weights.
  for (std::size_t i = 0; i < dense_.size(); ++i) {
    DenseParams& d = dense_[i];
    const std::size_t n = static_cast<std::size_t>(d.in) * d.out;
    d.W.resize(n);
    d.b.assign(static_cast<std::size_t>(d.out), Scalar(0));
    d.dW.assign(n, Scalar(0));
    d.db.assign(static_cast<std::size_t>(d.out), Scalar(0));
    d.vW.assign(n, Scalar(0));
    d.vb.assign(static_cast<std::size_t>(d.out), Scalar(0));
    Rng rng(derive_seed(init_seed, static_cast<std::uint64_t>(i)));
    const double stddev = std::sqrt(2.0 / d.in);
    for (std::size_t j = 0; j < n; ++j)
      d.W[j] = static_cast<Scalar>(rng.normal(stddev));
  }
  for (BatchNormParams& b : bn_) {
    const std::size_t w = static_cast<std::size_t>(b.width);
    b.gamma.assign(w, Scalar(1));
    b.beta.assign(w, Scalar(0));
    b.dgamma.assign(w, Scalar(0));
    b.dbeta.assign(w, Scalar(0));
    b.vgamma.assign(w, Scalar(0));
    b.vbeta.assign(w, Scalar(0));
    b.running_mean.assign(w, Scalar(0));
    b.running_var.assign(w, Scalar(1));
  }
}

template <typename Scalar>
void Network<Scalar>::forward_train(const std::vector<Scalar>& X, int batch,
                                    bool update_running,
                                    std::vector<Scalar>& scores) {
  if (batch < 2)
    throw std::invalid_argument("training forward needs batch >= 2");
  if (X.size() != static_cast<std::size_t>(batch) * shape_.input_width())
    throw std::invalid_argument("batch buffer size mismatch");
  last_batch_ = batch;

  std::vector<Scalar> cur = X, next;
  std::vector<Step*> begun;
  for (Step& step : pipeline_) {
    const std::size_t out_n = static_cast<std::size_t>(batch) * step.out_width;
    switch (step.op) {
      case Op::dense: {
        DenseParams& d = dense_[step.param];
        step.in_cache = cur;
        next.resize(out_n);
        kernels::dense_forward(batch, d.in, d.out, cur.data(), d.W.data(),
                               d.b.data(), next.data());
        cur.swap(next);
        break;
      }
      case Op::batch_norm: {
        BatchNormParams& b = bn_[step.param];
        b.x_hat.resize(out_n);
        b.batch_mean.resize(static_cast<std::size_t>(b.width));
        b.batch_var.resize(static_cast<std::size_t>(b.width));
        next.resize(out_n);
        if (update_running) {
          kernels::batch_norm_forward_train(
              batch, b.width, cur.data(), b.gamma.data(), b.beta.data(),
              Scalar(kBnEps), Scalar(kBnMomentum), b.running_mean.data(),
              b.running_var.data(), next.data(), b.x_hat.data(),
              b.batch_mean.data(), b.batch_var.data());
        } else {
          std::vector<Scalar> rm = b.running_mean, rv = b.running_var;
          kernels::batch_norm_forward_train(
              batch, b.width, cur.data(), b.gamma.data(), b.beta.data(),
              Scalar(kBnEps), Scalar(kBnMomentum), rm.data(), rv.data(),
              next.data(), b.x_hat.data(), b.batch_mean.data(),
              b.batch_var.data());
        }
        cur.swap(next);
        break;
      }
      case Op::relu: {
        step.in_cache = cur;
        next.resize(out_n);
        kernels::relu_forward(static_cast<std::int64_t>(out_n), cur.data(),
                              next.data());
        cur.swap(next);
        break;
      }
      case Op::block_activation: {
        step.mask.resize(static_cast<std::size_t>(batch) *
                         (step.in_width / shape_.block_size));
        next.resize(out_n);
        kernels::block_activation_forward(batch, step.in_width,
                                          shape_.block_size, cur.data(),
                                          next.data(), step.mask.data());
        cur.swap(next);
        break;
      }
      case Op::block_max_pool: {
        step.argmax.resize(static_cast<std::size_t>(batch) * step.out_width);
        next.resize(out_n);
        kernels::block_max_pool_forward(batch, step.in_width,
                                        shape_.block_size, cur.data(),
                                        next.data(), step.argmax.data());
        cur.swap(next);
        break;
      }
      case Op::residual_begin: {
        step.skip = cur;
        begun.push_back(&step);
        break;
      }
      case Op::residual_add: {
        Step* begin = begun.back();
        begun.pop_back();
        for (std::size_t i = 0; i < cur.size(); ++i) cur[i] += begin->skip[i];
        break;
      }
    }
  }
  scores = std::move(cur);
}

template <typename Scalar>
void Network<Scalar>::forward_infer(const std::vector<Scalar>& X, int batch,
                                    std::vector<Scalar>& scores) const {
  if (batch < 1) throw std::invalid_argument("batch must be >= 1");
  if (X.size() != static_cast<std::size_t>(batch) * shape_.input_width())
    throw std::invalid_argument("batch buffer size mismatch");

  std::vector<Scalar> cur = X, next;
  std::vector<std::vector<Scalar>> skips;
  std::vector<std::uint8_t> mask;
  std::vector<std::int32_t> argmax;
  for (const Step& step : pipeline_) {
    const std::size_t out_n = static_cast<std::size_t>(batch) * step.out_width;
    switch (step.op) {
      case Op::dense: {
        const DenseParams& d = dense_[step.param];
        next.resize(out_n);
        kernels::dense_forward(batch, d.in, d.out, cur.data(), d.W.data(),
                               d.b.data(), next.data());
        cur.swap(next);
        break;
      }
      case Op::batch_norm: {
        const BatchNormParams& b = bn_[step.param];
        next.resize(out_n);
        kernels::batch_norm_forward_infer(batch, b.width, cur.data(),
                                          b.gamma.data(), b.beta.data(),
                                          Scalar(kBnEps),
                                          b.running_mean.data(),
                                          b.running_var.data(), next.data());
        cur.swap(next);
        break;
      }
      case Op::relu: {
        next.resize(out_n);
        kernels::relu_forward(static_cast<std::int64_t>(out_n), cur.data(),
                              next.data());
        cur.swap(next);
        break;
      }
      case Op::block_activation: {
        mask.resize(static_cast<std::size_t>(batch) *
                    (step.in_width / shape_.block_size));
        next.resize(out_n);
        kernels::block_activation_forward(batch, step.in_width,
                                          shape_.block_size, cur.data(),
                                          next.data(), mask.data());
        cur.swap(next);
        break;
      }
      case Op::block_max_pool: {
        argmax.resize(static_cast<std::size_t>(batch) * step.out_width);
        next.resize(out_n);
        kernels::block_max_pool_forward(batch, step.in_width,
                                        shape_.block_size, cur.data(),
                                        next.data(), argmax.data());
        cur.swap(next);
        break;
      }
      case Op::residual_begin: {
        skips.push_back(cur);
        break;
      }
      case Op::residual_add: {
        const auto& skip = skips.back();
        for (std::size_t i = 0; i < cur.size(); ++i) cur[i] += skip[i];
        skips.pop_back();
        break;
      }
    }
  }
  scores = std::move(cur);
}

template <typename Scalar>
double Network<Scalar>::head_loss_and_grad(
    const std::vector<Scalar>& scores, int batch,
    const std::vector<std::vector<std::int32_t>>& active,
    std::vector<Scalar>* dscores) const {
  const int K = shape_.users;
  if (static_cast<int>(active.size()) != batch)
    throw std::invalid_argument("label count does not match batch");
  if (dscores) dscores->assign(static_cast<std::size_t>(batch) * K, Scalar(0));

  double total = 0.0;
  std::vector<double> target(static_cast<std::size_t>(K));
  for (int b = 0; b < batch; ++b) {
    const Scalar* s = scores.data() + static_cast<std::size_t>(b) * K;
    std::fill(target.begin(), target.end(), 0.0);
    for (std::int32_t k : active[b]) {
      if (k < 0 || k >= K) throw std::invalid_argument("label out of range");
      target[static_cast<std::size_t>(k)] = 1.0;
    }

    if (shape_.head == Head::softmax) {
      const std::size_t n_active = active[b].size();
      if (n_active == 0)
        throw std::invalid_argument("softmax head needs a nonempty active set");
      // Uniform target over the active users.
      double max_s = static_cast<double>(s[0]);
      for (int k = 1; k < K; ++k)
        max_s = std::max(max_s, static_cast<double>(s[k]));
      double sum_exp = 0.0;
      for (int k = 0; k < K; ++k)
        sum_exp += std::exp(static_cast<double>(s[k]) - max_s);
      const double lse = max_s + std::log(sum_exp);
      double target_score = 0.0;
      for (std::int32_t k : active[b]) target_score += static_cast<double>(s[k]);
      total += lse - target_score / static_cast<double>(n_active);
      if (dscores) {
        Scalar* d = dscores->data() + static_cast<std::size_t>(b) * K;
        for (int k = 0; k < K; ++k) {
          const double p = std::exp(static_cast<double>(s[k]) - lse);
          const double t = target[static_cast<std::size_t>(k)] /
                           static_cast<double>(n_active);
          d[k] = static_cast<Scalar>((p - t) / batch);
        }
      }
    } else {
      // Independent per-user logistic loss, summed over users.
      Scalar* d =
          dscores ? dscores->data() + static_cast<std::size_t>(b) * K : nullptr;
      for (int k = 0; k < K; ++k) {
        const double sk = static_cast<double>(s[k]);
        const double t = target[static_cast<std::size_t>(k)];
        total += std::max(sk, 0.0) - sk * t + std::log1p(std::exp(-std::abs(sk)));
        if (d) {
          const double sig = 1.0 / (1.0 + std::exp(-sk));
          d[k] = static_cast<Scalar>((sig - t) / batch);
        }
      }
    }
  }
  return total / batch;
}

template <typename Scalar>
double Network<Scalar>::loss_and_backward(
    const std::vector<Scalar>& X, int batch,
    const std::vector<std::vector<std::int32_t>>& active) {
  std::vector<Scalar> scores;
  forward_train(X, batch, /*update_running=*/true, scores);

  std::vector<Scalar> dcur;
  const double loss_value = head_loss_and_grad(scores, batch, active, &dcur);

  std::vector<Scalar> dnext;
  std::vector<Step*> pending;  // residual adds awaiting their begin
  for (auto it = pipeline_.rbegin(); it != pipeline_.rend(); ++it) {
    Step& step = *it;
    const std::size_t in_n = static_cast<std::size_t>(batch) * step.in_width;
    switch (step.op) {
      case Op::dense: {
        DenseParams& d = dense_[step.param];
        kernels::dense_backward_params(batch, d.in, d.out,
                                       step.in_cache.data(), dcur.data(),
                                       d.dW.data(), d.db.data());
        dnext.resize(in_n);
        kernels::dense_backward_input(batch, d.in, d.out, dcur.data(),
                                      d.W.data(), dnext.data());
        dcur.swap(dnext);
        break;
      }
      case Op::batch_norm: {
        BatchNormParams& b = bn_[step.param];
        dnext.resize(in_n);
        kernels::batch_norm_backward(batch, b.width, b.x_hat.data(),
                                     b.gamma.data(), b.batch_var.data(),
                                     Scalar(kBnEps), dcur.data(), dnext.data(),
                                     b.dgamma.data(), b.dbeta.data());
        dcur.swap(dnext);
        break;
      }
      case Op::relu: {
        dnext.resize(in_n);
        kernels::relu_backward(static_cast<std::int64_t>(in_n),
                               step.in_cache.data(), dcur.data(),
                               dnext.data());
        dcur.swap(dnext);
        break;
      }
      case Op::block_activation: {
        dnext.resize(in_n);
        kernels::block_activation_backward(batch, step.in_width,
                                           shape_.block_size, step.mask.data(),
                                           dcur.data(), dnext.data());
        dcur.swap(dnext);
        break;
      }
      case Op::block_max_pool: {
        dnext.resize(in_n);
        kernels::block_max_pool_backward(batch, step.in_width,
                                         shape_.block_size, step.argmax.data(),
                                         dcur.data(), dnext.data());
        dcur.swap(dnext);
        break;
      }
      case Op::residual_add: {
        step.skip_grad = dcur;  // branch gradient passes to the begin marker
        pending.push_back(&step);
        break;
      }
      case Op::residual_begin: {
        Step* add = pending.back();
        pending.pop_back();
        for (std::size_t i = 0; i < dcur.size(); ++i)
          dcur[i] += add->skip_grad[i];
        break;
      }
    }
  }
  return loss_value;
}

template <typename Scalar>
double Network<Scalar>::loss(
    const std::vector<Scalar>& X, int batch,
    const std::vector<std::vector<std::int32_t>>& active) {
  std::vector<Scalar> scores;
  forward_train(X, batch, /*update_running=*/false, scores);
  return head_loss_and_grad(scores, batch, active, nullptr);
}

template <typename Scalar>
std::uint64_t Network<Scalar>::activation_fingerprint() const {
  std::uint64_t h = fnv1a64(nullptr, 0);
  for (const Step& step : pipeline_) {
    switch (step.op) {
      case Op::relu: {
        const std::size_t n =
            static_cast<std::size_t>(last_batch_) * step.in_width;
        for (std::size_t i = 0; i < n && i < step.in_cache.size(); ++i) {
          const std::uint8_t bit = step.in_cache[i] > Scalar(0) ? 1 : 0;
          h = fnv1a64(&bit, 1, h);
        }
        break;
      }
      case Op::block_activation:
        h = fnv1a64(step.mask.data(), step.mask.size(), h);
        break;
      case Op::block_max_pool:
        h = fnv1a64(step.argmax.data(),
                    step.argmax.size() * sizeof(std::int32_t), h);
        break;
      default:
        break;
    }
  }
  return h;
}

template <typename Scalar>
void Network<Scalar>::sgd_step(double learning_rate, double momentum) {
  const Scalar lr = static_cast<Scalar>(learning_rate);
  const Scalar m = static_cast<Scalar>(momentum);
  auto update = [&](std::vector<Scalar>& theta, std::vector<Scalar>& v,
                    const std::vector<Scalar>& g) {
    for (std::size_t i = 0; i < theta.size(); ++i) {
      v[i] = m * v[i] - lr * g[i];
      theta[i] += v[i];
    }
  };
  for (DenseParams& d : dense_) {
    update(d.W, d.vW, d.dW);
    update(d.b, d.vb, d.db);
  }
  for (BatchNormParams& b : bn_) {
    update(b.gamma, b.vgamma, b.dgamma);
    update(b.beta, b.vbeta, b.dbeta);
  }
  ++trained_batches_;
}

template <typename Scalar>
std::vector<Scalar> Network<Scalar>::infer(const std::vector<Scalar>& X,
                                           int batch) const {
  std::vector<Scalar> scores;
  forward_infer(X, batch, scores);
  const int K = shape_.users;
  std::vector<Scalar> out(scores.size());
  for (int b = 0; b < batch; ++b) {
    const Scalar* s = scores.data() + static_cast<std::size_t>(b) * K;
    Scalar* o = out.data() + static_cast<std::size_t>(b) * K;
    if (shape_.head == Head::softmax) {
      double max_s = static_cast<double>(s[0]);
      for (int k = 1; k < K; ++k)
        max_s = std::max(max_s, static_cast<double>(s[k]));
      double sum_exp = 0.0;
      for (int k = 0; k < K; ++k)
        sum_exp += std::exp(static_cast<double>(s[k]) - max_s);
      for (int k = 0; k < K; ++k)
        o[k] = static_cast<Scalar>(
            std::exp(static_cast<double>(s[k]) - max_s) / sum_exp);
    } else {
      for (int k = 0; k < K; ++k)
        o[k] = static_cast<Scalar>(
            1.0 / (1.0 + std::exp(-static_cast<double>(s[k]))));
    }
  }
  return out;
}

// Flattening order is pipeline declaration order; per layer: dense W then
// bias, batch norm gamma then beta (running stats only in export_state).

template <typename Scalar>
std::vector<Scalar> Network<Scalar>::trainable_params() const {
  std::vector<Scalar> flat;
  flat.reserve(trainable_size());
  for (const Step& step : pipeline_) {
    if (step.op == Op::dense) {
      const DenseParams& d = dense_[step.param];
      flat.insert(flat.end(), d.W.begin(), d.W.end());
      flat.insert(flat.end(), d.b.begin(), d.b.end());
    } else if (step.op == Op::batch_norm) {
      const BatchNormParams& b = bn_[step.param];
      flat.insert(flat.end(), b.gamma.begin(), b.gamma.end());
      flat.insert(flat.end(), b.beta.begin(), b.beta.end());
    }
  }
  return flat;
}

template <typename Scalar>
void Network<Scalar>::set_trainable_params(const std::vector<Scalar>& flat) {
  if (flat.size() != trainable_size())
    throw std::invalid_argument("trainable parameter count mismatch");
  std::size_t pos = 0;
  auto take = [&](std::vector<Scalar>& dst) {
    std::copy(flat.begin() + pos, flat.begin() + pos + dst.size(),
              dst.begin());
    pos += dst.size();
  };
  for (const Step& step : pipeline_) {
    if (step.op == Op::dense) {
      take(dense_[step.param].W);
      take(dense_[step.param].b);
    } else if (step.op == Op::batch_norm) {
      take(bn_[step.param].gamma);
      take(bn_[step.param].beta);
    }
  }
}

template <typename Scalar>
std::vector<Scalar> Network<Scalar>::gradients() const {
  std::vector<Scalar> flat;
  flat.reserve(trainable_size());
  for (const Step& step : pipeline_) {
    if (step.op == Op::dense) {
      const DenseParams& d = dense_[step.param];
      flat.insert(flat.end(), d.dW.begin(), d.dW.end());
      flat.insert(flat.end(), d.db.begin(), d.db.end());
    } else if (step.op == Op::batch_norm) {
      const BatchNormParams& b = bn_[step.param];
      flat.insert(flat.end(), b.dgamma.begin(), b.dgamma.end());
      flat.insert(flat.end(), b.dbeta.begin(), b.dbeta.end());
    }
  }
  return flat;
}

template <typename Scalar>
std::size_t Network<Scalar>::trainable_size() const {
  std::size_t n = 0;
  for (const DenseParams& d : dense_) n += d.W.size() + d.b.size();
  for (const BatchNormParams& b : bn_) n += b.gamma.size() + b.beta.size();
  return n;
}

template <typename Scalar>
std::size_t Network<Scalar>::state_size(bool with_momentum) const {
  std::size_t running = 0;
  for (const BatchNormParams& b : bn_)
    running += b.running_mean.size() + b.running_var.size();
  const std::size_t base = trainable_size() + running;
  return with_momentum ? base + trainable_size() : base;
}

template <typename Scalar>
std::vector<Scalar> Network<Scalar>::export_state(bool with_momentum) const {
  std::vector<Scalar> flat;
  flat.reserve(state_size(with_momentum));
  for (const Step& step : pipeline_) {
    if (step.op == Op::dense) {
      const DenseParams& d = dense_[step.param];
      flat.insert(flat.end(), d.W.begin(), d.W.end());
      flat.insert(flat.end(), d.b.begin(), d.b.end());
    } else if (step.op == Op::batch_norm) {
      const BatchNormParams& b = bn_[step.param];
      flat.insert(flat.end(), b.gamma.begin(), b.gamma.end());
      flat.insert(flat.end(), b.beta.begin(), b.beta.end());
      flat.insert(flat.end(), b.running_mean.begin(), b.running_mean.end());
      flat.insert(flat.end(), b.running_var.begin(), b.running_var.end());
    }
  }
  if (with_momentum) {
    for (const Step& step : pipeline_) {
      if (step.op == Op::dense) {
        const DenseParams& d = dense_[step.param];
        flat.insert(flat.end(), d.vW.begin(), d.vW.end());
        flat.insert(flat.end(), d.vb.begin(), d.vb.end());
      } else if (step.op == Op::batch_norm) {
        const BatchNormParams& b = bn_[step.param];
        flat.insert(flat.end(), b.vgamma.begin(), b.vgamma.end());
        flat.insert(flat.end(), b.vbeta.begin(), b.vbeta.end());
      }
    }
  }
  return flat;
}

template <typename Scalar>
void Network<Scalar>::import_state(const std::vector<Scalar>& flat,
                                   bool with_momentum) {
  if (flat.size() != state_size(with_momentum))
    throw std::invalid_argument("state size mismatch");
  std::size_t pos = 0;
  auto take = [&](std::vector<Scalar>& dst) {
    std::copy(flat.begin() + pos, flat.begin() + pos + dst.size(),
              dst.begin());
    pos += dst.size();
  };
  for (const Step& step : pipeline_) {
    if (step.op == Op::dense) {
      take(dense_[step.param].W);
      take(dense_[step.param].b);
    } else if (step.op == Op::batch_norm) {
      BatchNormParams& b = bn_[step.param];
      take(b.gamma);
      take(b.beta);
      take(b.running_mean);
      take(b.running_var);
    }
  }
  if (with_momentum) {
    for (const Step& step : pipeline_) {
      if (step.op == Op::dense) {
        take(dense_[step.param].vW);
        take(dense_[step.param].vb);
      } else if (step.op == Op::batch_norm) {
        take(bn_[step.param].vgamma);
        take(bn_[step.param].vbeta);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"learning_rate", c.learning_rate},
                     {"momentum", c.momentum},
                     {"eval_every", c.eval_every},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  j.at("epochs").get_to(c.epochs);
  j.at("batch_size").get_to(c.batch_size);
  j.at("learning_rate").get_to(c.learning_rate);
  j.at("momentum").get_to(c.momentum);
  j.at("eval_every").get_to(c.eval_every);
  j.at("seed").get_to(c.seed);
}

template <typename Scalar>
EvalMetrics evaluate(const Network<Scalar>& net, const LabeledSet& data,
                     int batch_size) {
  if (data.count < 1) throw std::invalid_argument("empty evaluation set");
  if (data.input_width != net.shape().input_width())
    throw std::invalid_argument("evaluation set width mismatch");
  const int K = net.shape().users;

  double hit_sum = 0.0;
  long exact = 0;
  std::vector<Scalar> batch_buf;
  std::vector<double> row(static_cast<std::size_t>(K));
  for (int start = 0; start < data.count; start += batch_size) {
    const int b = std::min(batch_size, data.count - start);
    batch_buf.resize(static_cast<std::size_t>(b) * data.input_width);
    for (std::size_t i = 0; i < batch_buf.size(); ++i)
      batch_buf[i] = static_cast<Scalar>(
          data.X[static_cast<std::size_t>(start) * data.input_width + i]);
    const std::vector<Scalar> probs = net.infer(batch_buf, b);
    for (int r = 0; r < b; ++r) {
      const auto& truth = data.active[static_cast<std::size_t>(start) + r];
      for (int k = 0; k < K; ++k)
        row[static_cast<std::size_t>(k)] = static_cast<double>(
            probs[static_cast<std::size_t>(r) * K + k]);
      const auto guess =
          top_users(row.data(), K, static_cast<int>(truth.size()));
      std::size_t overlap = 0;
      for (std::size_t i = 0, j = 0; i < guess.size() && j < truth.size();) {
        if (guess[i] == truth[j]) {
          ++overlap, ++i, ++j;
        } else if (guess[i] < truth[j]) {
          ++i;
        } else {
          ++j;
        }
      }
      if (!truth.empty())
        hit_sum += static_cast<double>(overlap) / truth.size();
      else
        hit_sum += 1.0;
      if (overlap == truth.size() && guess.size() == truth.size()) ++exact;
    }
  }
  EvalMetrics m;
  m.user_hit_ratio = hit_sum / data.count;
  m.exact_set_rate = static_cast<double>(exact) / data.count;
  return m;
}

template <typename Scalar>
TrainingTrace train(Network<Scalar>& net, const LabeledSet& train_set,
                    const LabeledSet& val_set, const TrainConfig& cfg,
                    const std::atomic<bool>* interrupt) {
  // epochs == 0 is a valid no-op: the caller gets the initialized network
  // back untouched together with an empty trace.
  if (cfg.epochs < 0 || cfg.batch_size < 2 || cfg.eval_every < 1)
    throw ConfigError("invalid training configuration");
  if (train_set.count < 1) throw ConfigError("empty training set");
  if (train_set.input_width != net.shape().input_width())
    throw ConfigError("training set width does not match network input");

  const int B = cfg.batch_size;
  const int width = train_set.input_width;
  const long batches_per_epoch = std::max(1, train_set.count / B);

  TrainingTrace trace;
  std::vector<int> order(static_cast<std::size_t>(train_set.count));
  std::iota(order.begin(), order.end(), 0);
  std::vector<Scalar> batch_buf(static_cast<std::size_t>(B) * width);
  std::vector<std::vector<std::int32_t>> batch_active(
      static_cast<std::size_t>(B));

  double window_sum = 0.0;
  long window_n = 0;
  double best_exact = -1.0;
  std::vector<Scalar> best_state;
  long batch_counter = 0;

  auto checkpoint = [&]() {
    const EvalMetrics m = evaluate(net, val_set, B);
    Checkpoint c;
    c.batch = batch_counter;
    c.train_loss = window_n > 0 ? window_sum / window_n : 0.0;
    c.val_user_hit = m.user_hit_ratio;
    c.val_exact_set = m.exact_set_rate;
    trace.checkpoints.push_back(c);
    window_sum = 0.0;
    window_n = 0;
    if (m.exact_set_rate > best_exact) {
      best_exact = m.exact_set_rate;
      trace.best_index = static_cast<int>(trace.checkpoints.size()) - 1;
      best_state = net.export_state(false);
    }
  };

  for (int epoch = 0; epoch < cfg.epochs && !trace.interrupted; ++epoch) {
    Rng shuffle_rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
    for (int i = train_set.count - 1; i > 0; --i) {
      const int j = static_cast<int>(
          shuffle_rng.below(static_cast<std::uint64_t>(i) + 1));
      std::swap(order[static_cast<std::size_t>(i)],
                order[static_cast<std::size_t>(j)]);
    }

    for (long bi = 0; bi < batches_per_epoch; ++bi) {
      if (interrupt && interrupt->load()) {
        trace.interrupted = true;
        break;
      }
      for (int r = 0; r < B; ++r) {
        const int idx = order[static_cast<std::size_t>(
            (bi * B + r) % train_set.count)];
        const double* src =
            train_set.X.data() + static_cast<std::size_t>(idx) * width;
        Scalar* dst = batch_buf.data() + static_cast<std::size_t>(r) * width;
        for (int c = 0; c < width; ++c) dst[c] = static_cast<Scalar>(src[c]);
        batch_active[static_cast<std::size_t>(r)] =
            train_set.active[static_cast<std::size_t>(idx)];
      }
      const double loss = net.loss_and_backward(batch_buf, B, batch_active);
      net.sgd_step(cfg.learning_rate, cfg.momentum);
      ++batch_counter;
      window_sum += loss;
      ++window_n;
      if (batch_counter % cfg.eval_every == 0) checkpoint();
    }
  }

  if (window_n > 0) checkpoint();
  trace.total_batches = batch_counter;
  if (!trace.interrupted && trace.best_index >= 0) {
    net.import_state(best_state, false);
    trace.restored_best = true;
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Model container
// ---------------------------------------------------------------------------

namespace {

ModelInfo parse_model_header(const nlohmann::json& header,
                             const std::string& path) {
  ModelInfo info;
  try {
    info.shape = header.at("shape").get<NetworkShape>();
    info.scalar = header.at("scalar").get<std::string>();
    info.trained_batches = header.at("trained_batches").get<long>();
    info.has_optimizer_state = header.at("optimizer_state").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError("malformed model header in " + path + ": " +
                         e.what());
  }
  if (info.scalar != "f32" && info.scalar != "f64")
    throw IntegrityError("unknown scalar tag in model: " + info.scalar);
  return info;
}

}  // namespace

ModelInfo peek_model(const std::string& path) {
  if (!std::filesystem::exists(path))
    throw MissingArtifactError("model file not found: " + path);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open model file: " + path);
  const auto header =
      binio::read_container_header(in, kModelMagic, kModelVersion, path);
  return parse_model_header(header, path);
}

template <typename Scalar>
void save_model(const Network<Scalar>& net, const std::string& path,
                bool with_optimizer_state) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write model file: " + path);

  nlohmann::json header;
  header["shape"] = net.shape();
  header["scalar"] = scalar_tag<Scalar>();
  header["trained_batches"] = net.trained_batches();
  header["optimizer_state"] = with_optimizer_state;
  binio::write_container_header(out, kModelMagic, kModelVersion, header);

  const std::vector<Scalar> state = net.export_state(with_optimizer_state);
  out.write(reinterpret_cast<const char*>(state.data()),
            static_cast<std::streamsize>(state.size() * sizeof(Scalar)));
  if (!out) throw std::runtime_error("I/O failure writing model: " + path);
}

template <typename Scalar>
Network<Scalar> load_model(const std::string& path) {
  if (!std::filesystem::exists(path))
    throw MissingArtifactError("model file not found: " + path);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open model file: " + path);

  const auto header =
      binio::read_container_header(in, kModelMagic, kModelVersion, path);
  const ModelInfo info = parse_model_header(header, path);
  if (info.scalar != scalar_tag<Scalar>())
    throw IntegrityError("model stores " + info.scalar + ", requested " +
                         scalar_tag<Scalar>());

  Network<Scalar> net(info.shape, 0);
  std::vector<Scalar> state(net.state_size(info.has_optimizer_state));
  binio::read_exact(in, reinterpret_cast<char*>(state.data()),
                    static_cast<std::streamsize>(state.size() * sizeof(Scalar)),
                    "model payload");
  if (in.peek() != EOF)
    throw IntegrityError("trailing bytes after model payload: " + path);
  net.import_state(state, info.has_optimizer_state);
  net.set_trained_batches(info.trained_batches);
  return net;
}

template class Network<float>;
template class Network<double>;

template EvalMetrics evaluate<float>(const Network<float>&, const LabeledSet&,
                                     int);
template EvalMetrics evaluate<double>(const Network<double>&,
                                      const LabeledSet&, int);
template TrainingTrace train<float>(Network<float>&, const LabeledSet&,
                                    const LabeledSet&, const TrainConfig&,
                                    const std::atomic<bool>*);
template TrainingTrace train<double>(Network<double>&, const LabeledSet&,
                                     const LabeledSet&, const TrainConfig&,
                                     const std::atomic<bool>*);
template void save_model<float>(const Network<float>&, const std::string&,
                                bool);
template void save_model<double>(const Network<double>&, const std::string&,
                                 bool);
template Network<float> load_model<float>(const std::string&);
template Network<double> load_model<double>(const std::string&);

}  // namespace csmud::neural
