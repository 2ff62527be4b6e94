#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "shield/base_model.hpp"
#include "shield/rng.hpp"
#include "shield/tensor.hpp"
#include "shield/text.hpp"

namespace shield {

enum class NoiseMode { Fresh, InputSeeded, Zero };
enum class ShieldVariant { Full, SeOnly, MeOnly };

struct ShieldConfig {
  size_t num_heads = 5;       // K
  size_t num_candidates = 3;  // T candidate subnetworks per head
  double gamma = 0.5;         // diversity loss weight
  double tau_train = 0.1;
  double tau_infer = 0.1;
  size_t hidden = 64;         // width of every candidate hidden layer
  NoiseMode noise = NoiseMode::Fresh;
  ShieldVariant variant = ShieldVariant::Full;
  uint64_t seed = 1;
};

// One fully connected candidate: feature_dim -> hidden^depth -> classes.
struct Candidate {
  size_t hidden_layers = 1;
  std::vector<Tensor> weights;
  std::vector<Tensor> biases;
};

struct HeadBank {
  std::vector<std::vector<Candidate>> heads;  // [K][T]
  Tensor beta;                                // [K, T] selection logits
};

struct EnsembleGate {
  Tensor w;  // [(K*M + Q), K]
  Tensor b;  // [K]
};

// The patch: frozen base reference plus the expert heads and gate that
// replace the base's final layer. Training keeps beta relaxed; after
// discretize() each head commits to its argmax candidate.
struct ShieldModel {
  const BaseModel* base = nullptr;
  ShieldConfig config;
  HeadBank bank;
  EnsembleGate gate;
  bool discretized = false;
  std::vector<size_t> active;  // per-head candidate chosen at discretization

  // Parameters updated by the main training step: all candidate tensors
  // plus the gate (beta is trained separately).
  std::vector<Tensor*> step_parameters();
  size_t patch_param_count() const;  // shape walk, includes beta
  uint64_t patch_param_hash() const;
};

ShieldModel patch(const BaseModel& base, const ShieldConfig& config);
ShieldModel patch(const BaseModel& base, ShieldConfig config, uint64_t seed);

// Elementwise -log(-log(u)) with u clamped into [1e-12, 1-1e-12].
Tensor sample_gumbel_tensor(const std::vector<size_t>& shape, Rng& rng);

// All head logits for one example's features. Training mode mixes each
// head's candidates by softmax(beta_j)/T; inference mode runs only the
// selected candidate, without the 1/T factor.
Tensor head_forward(const ShieldModel& model, const std::vector<double>& features,
                    bool training);

// w = W^T (flatten(head_logits) ++ features) + b
std::vector<double> gate_weights(const ShieldModel& model, const Tensor& head_logits,
                                 const std::vector<double>& features);

// alpha = softmax((w + g) / tau)
std::vector<double> sample_alpha(const std::vector<double>& w, double tau,
                                 const std::vector<double>& g);

// yhat = (1/K) sum_j alpha_j * w_j * head_logits_j
std::vector<double> aggregate(const std::vector<double>& alpha,
                              const std::vector<double>& w, const Tensor& head_logits);

struct ShieldForward {
  Tensor logits;               // [M]
  std::vector<double> alpha;
  std::vector<double> gate_w;
  size_t top_head = 0;         // argmax alpha
};

// Full pipeline on one example. Phase follows model.discretized (relaxed
// + tau_train vs selected + tau_infer); noise follows config.noise, with
// fresh draws taken from rng.
ShieldForward forward_shield(const ShieldModel& model, const std::vector<size_t>& ids,
                             Rng& rng);

std::vector<size_t> predict_shield(const ShieldModel& model, const Dataset& data,
                                   Rng& rng);

// Mean NLL of the relaxed training-phase forward over the batch, with
// fresh gumbel draws from rng.
double loss_se(const ShieldModel& model, const Dataset& data,
               const std::vector<size_t>& indices, Rng& rng);

// Gradient-diversity loss over per-head, per-example NLLs taken as if
// each head were the sole predictor; gradients w.r.t. the example's
// embedding rows. Sum over examples and unordered head pairs of
// cos(g_n, g_m) - |g_n - g_m|^2.
double loss_experts(const ShieldModel& model, const Dataset& data,
                    const std::vector<size_t>& indices);

double loss_me(const ShieldModel& model, const Dataset& data,
               const std::vector<size_t>& indices, double gamma, Rng& rng);

// Central finite differences of loss_fn over every beta entry. loss_fn
// reads model.bank.beta; entries are perturbed in place and restored.
Tensor grad_beta_with(ShieldModel& model, const std::function<double()>& loss_fn,
                      double step);

// d(loss_me)/d(beta) on a validation batch by central differences with
// the gumbel draws and batch held fixed across all evaluations.
Tensor grad_beta(const ShieldModel& model, const Dataset& validation,
                 const std::vector<size_t>& indices, double gamma, Rng& rng,
                 double step = 1e-3);

struct TrainShieldOptions {
  size_t max_epochs = 30;
  size_t batch_size = 32;
  double lr = 0.005;
  double clip_norm = 10.0;
  size_t patience = 3;
  size_t beta_batches = 8;  // validation mini-batches per beta step
  double fd_step = 1e-3;
};

// Alternating optimization: per epoch, fit candidates+gate on the train
// split (beta frozen), then fit beta on validation batches (candidates
// and gate frozen). Early-stops on validation loss, restores the best
// epoch, and discretizes beta on completion.
TrainHistory train_shield(ShieldModel& model, const Dataset& train,
                          const Dataset& validation, const TrainShieldOptions& options,
                          Rng& rng);

void discretize(ShieldModel& model);

struct ParamAccounting {
  size_t base_count = 0;
  size_t patch_walk = 0;     // summed tensor sizes
  size_t patch_formula = 0;  // closed-form from dimensions
  double ratio = 0.0;        // patch/base
};

ParamAccounting count_params(const ShieldModel& model);

// Fresh (untrained) variant model patched from the same base: SeOnly
// forces one fixed two-hidden-layer candidate per head and gamma=0;
// MeOnly keeps the architecture search but replaces alpha with the
// uniform vector at both train and inference time.
ShieldModel ablation_variant(const ShieldModel& model, ShieldVariant which);

}  // namespace shield
