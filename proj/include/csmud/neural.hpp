#pragma once

#include <atomic>
#include <cstdint>
#include <json.hpp>
#include <string>
#include <vector>

#include "csmud/config.hpp"
#include "csmud/sysmodel.hpp"

namespace csmud::neural {

enum class Arch { brnn, dnn };
enum class Head { softmax, sigmoid };

std::string arch_name(Arch a);
Arch arch_from_name(const std::string& name);
std::string head_name(Head h);
Head head_from_name(const std::string& name);

// Topology family shared by both networks:
//
//   input 2M
//   relu_layers x [dense -> batch norm -> relu]  (widths 2M -> 2KL -> 2KL)
//   dense 2KL -> KL
//   residual_blocks x [skip save -> dense KL -> KL -> batch norm
//                      -> skip add -> nonlinearity]
//   brnn: block activation (L), then block max pool KL -> K
//   dnn:  relu, then dense KL -> K
//   head: softmax (shared activity budget) or per-user sigmoid
//
// The block activation passes a whole L-block unchanged iff its maximum
// entry is positive, else zeros it; the max pool reduces each block to its
// maximum. Both networks draw dense layer i's weights from the same derived
// seed, so layers with matching shapes start identical across the two.
struct NetworkShape {
  Arch arch = Arch::brnn;
  Head head = Head::softmax;
  int users = 0;            // K
  int block_size = 0;       // L
  int measurement_len = 0;  // M complex entries; real input width is 2M
  int relu_layers = 2;
  int residual_blocks = 3;

  int input_width() const { return 2 * measurement_len; }
  int hidden_width() const { return 2 * users * block_size; }
  int proj_width() const { return users * block_size; }

  void validate() const;
  bool operator==(const NetworkShape&) const = default;
};

void to_json(nlohmann::json& j, const NetworkShape& s);
void from_json(const nlohmann::json& j, NetworkShape& s);

NetworkShape shape_for(const SystemConfig& config, Arch arch,
                       Head head = Head::softmax);

// Init stream shared by every front end, so both architectures (and
// reruns) start a given preset from the same weights.
std::uint64_t default_init_seed(const SystemConfig& config);

// Real featurization of a complex measurement: [Re(y); Im(y)].
std::vector<double> featurize(const Eigen::VectorXcd& y);

// Indices of the n highest scores, ties to the lower index, sorted ascending.
std::vector<int> top_users(const double* scores, int users, int n);

// Featurized samples ready for batching. Inputs stay double; networks
// convert rows to their scalar type when a batch is assembled.
struct LabeledSet {
  int count = 0;
  int input_width = 0;
  int users = 0;
  std::vector<double> X;  // count x input_width, row-major
  std::vector<std::vector<std::int32_t>> active;  // sorted user indices
};

LabeledSet featurize_dataset(const sysmodel::Dataset& dataset);

// Dense + batch norm network with hand-written forward/backward over the
// batched kernels. Scalar is float for training speed, double for the
// finite-difference gradient oracle.
template <typename Scalar>
class Network {
 public:
  Network(const NetworkShape& shape, std::uint64_t init_seed);

  const NetworkShape& shape() const { return shape_; }
  long trained_batches() const { return trained_batches_; }
  void set_trained_batches(long n) { trained_batches_ = n; }

  // Training-mode forward (updates batch-norm running stats), head loss,
  // and a full backward pass. Gradients are means over the batch. Batch
  // must be >= 2 so batch statistics exist.
  double loss_and_backward(const std::vector<Scalar>& X, int batch,
                           const std::vector<std::vector<std::int32_t>>& active);

  // Training-mode loss without touching gradients or running statistics;
  // the objective the finite-difference oracle probes.
  double loss(const std::vector<Scalar>& X, int batch,
              const std::vector<std::vector<std::int32_t>>& active);

  // Hash of every nonlinearity decision (relu signs, block masks, pool
  // argmaxes) from the most recent forward. The gradient check skips
  // coordinates whose perturbation flips a decision.
  std::uint64_t activation_fingerprint() const;

  void sgd_step(double learning_rate, double momentum);

  // Inference-mode head outputs, batch x users (softmax probabilities or
  // per-user sigmoids). Uses running statistics; any batch >= 1 works and
  // results are independent of how samples are grouped into batches.
  std::vector<Scalar> infer(const std::vector<Scalar>& X, int batch) const;

  // Trainable parameters (weights, biases, batch-norm scale/shift) as one
  // flat vector in declaration order, and the matching gradient view.
  std::vector<Scalar> trainable_params() const;
  void set_trainable_params(const std::vector<Scalar>& flat);
  std::vector<Scalar> gradients() const;

  // Full state: trainable params + running statistics, optionally the
  // momentum buffers. Used by snapshots and the model container.
  std::vector<Scalar> export_state(bool with_momentum) const;
  void import_state(const std::vector<Scalar>& flat, bool with_momentum);
  std::size_t state_size(bool with_momentum) const;
  std::size_t trainable_size() const;

 private:
  struct DenseParams {
    int in = 0, out = 0;
    std::vector<Scalar> W, b, dW, db, vW, vb;
  };
  struct BatchNormParams {
    int width = 0;
    std::vector<Scalar> gamma, beta, dgamma, dbeta, vgamma, vbeta;
    std::vector<Scalar> running_mean, running_var;
    std::vector<Scalar> x_hat, batch_mean, batch_var;  // training caches
  };
  enum class Op {
    dense,
    batch_norm,
    relu,
    block_activation,
    block_max_pool,
    residual_begin,
    residual_add,
  };
  struct Step {
    Op op;
    int param = -1;  // index into dense_ / bn_
    int in_width = 0, out_width = 0;
    std::vector<Scalar> in_cache;           // forward input (dense, relu)
    std::vector<std::uint8_t> mask;         // block activation
    std::vector<std::int32_t> argmax;       // block max pool
    std::vector<Scalar> skip;               // residual begin: saved input
    std::vector<Scalar> skip_grad;          // residual add: branch gradient
  };

  void build_pipeline();
  void init_params(std::uint64_t init_seed);
  // Training-mode walk: caches everything backward needs; running stats
  // update only when asked (the loss probe leaves them untouched).
  void forward_train(const std::vector<Scalar>& X, int batch,
                     bool update_running, std::vector<Scalar>& scores);
  // Inference-mode walk: running statistics, no caches.
  void forward_infer(const std::vector<Scalar>& X, int batch,
                     std::vector<Scalar>& scores) const;
  double head_loss_and_grad(const std::vector<Scalar>& scores, int batch,
                            const std::vector<std::vector<std::int32_t>>& active,
                            std::vector<Scalar>* dscores) const;

  NetworkShape shape_;
  std::vector<Step> pipeline_;
  std::vector<DenseParams> dense_;
  std::vector<BatchNormParams> bn_;
  long trained_batches_ = 0;
  int last_batch_ = 0;  // batch of the most recent training forward
};

struct TrainConfig {
  int epochs = 5;
  int batch_size = 250;
  double learning_rate = 0.01;
  double momentum = 0.9;
  int eval_every = 100;    // batches between validation checkpoints
  std::uint64_t seed = 1;  // shuffle stream
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct Checkpoint {
  long batch = 0;
  double train_loss = 0.0;  // windowed mean since the previous checkpoint
  double val_user_hit = 0.0;
  double val_exact_set = 0.0;
};

struct TrainingTrace {
  std::vector<Checkpoint> checkpoints;
  int best_index = -1;  // checkpoint with the highest val exact-set rate
  long total_batches = 0;
  bool interrupted = false;
  bool restored_best = false;
};

struct EvalMetrics {
  double user_hit_ratio = 0.0;
  double exact_set_rate = 0.0;
};

template <typename Scalar>
EvalMetrics evaluate(const Network<Scalar>& net, const LabeledSet& data,
                     int batch_size);

// SGD with classical momentum over seeded Fisher-Yates shuffles. Batches
// that would underfill (dataset smaller than one batch) wrap around; the
// per-epoch remainder is dropped. On normal completion the parameters of
// the best validation checkpoint are restored; an interrupt keeps the
// latest parameters so callers can persist a resumable state.
template <typename Scalar>
TrainingTrace train(Network<Scalar>& net, const LabeledSet& train_set,
                    const LabeledSet& val_set, const TrainConfig& cfg,
                    const std::atomic<bool>* interrupt = nullptr);

struct ModelInfo {
  NetworkShape shape;
  std::string scalar;  // "f32" or "f64"
  long trained_batches = 0;
  bool has_optimizer_state = false;
};

template <typename Scalar>
constexpr const char* scalar_tag() = delete;
template <>
constexpr const char* scalar_tag<float>() {
  return "f32";
}
template <>
constexpr const char* scalar_tag<double>() {
  return "f64";
}

ModelInfo peek_model(const std::string& path);

template <typename Scalar>
void save_model(const Network<Scalar>& net, const std::string& path,
                bool with_optimizer_state = true);

// Throws IntegrityError when the stored scalar type differs; peek first.
template <typename Scalar>
Network<Scalar> load_model(const std::string& path);

}  // namespace csmud::neural
