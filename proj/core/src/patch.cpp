#include "shield/patch.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "shield/errors.hpp"
#include "shield/optim.hpp"
#include "shield/tape.hpp"

namespace shield {

namespace {

// Candidate depth pattern cycles 1, 2, 3 hidden layers; the single-expert
// ablation pins every head to one two-hidden-layer candidate.
size_t candidate_depth(const ShieldConfig& config, size_t t) {
  return config.variant == ShieldVariant::SeOnly ? 2 : t % 3 + 1;
}

size_t candidate_param_count(size_t q, size_t m, size_t h, size_t depth) {
  return (q * h + h) + (depth - 1) * (h * h + h) + (h * m + m);
}

void check_patched(const ShieldModel& model) {
  if (model.base == nullptr) throw ConfigError("shield: model has no base");
}

std::vector<double> softmax_plain(const double* x, size_t n) {
  double mx = x[0];
  for (size_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  std::vector<double> out(n);
  double total = 0.0;
  for (size_t i = 0; i < n; ++i) {
    out[i] = std::exp(x[i] - mx);
    total += out[i];
  }
  for (size_t i = 0; i < n; ++i) out[i] /= total;
  return out;
}

// softmax(beta_j) over head j's candidates.
std::vector<double> beta_mix(const ShieldModel& model, size_t j) {
  const size_t T = model.config.num_candidates;
  return softmax_plain(model.bank.beta.values.data() + j * T, T);
}

double stable_nll(const double* logits, size_t n, size_t gold) {
  double mx = logits[0];
  for (size_t i = 1; i < n; ++i) mx = std::max(mx, logits[i]);
  double lse = 0.0;
  for (size_t i = 0; i < n; ++i) lse += std::exp(logits[i] - mx);
  return mx + std::log(lse) - logits[gold];
}

// x: [in], W: [in, out] row-major. Accumulation order matches the taped
// matmul so plain and taped paths agree bitwise.
void linear_into(const std::vector<double>& x, const Tensor& w, const Tensor& b,
                 std::vector<double>& out) {
  const size_t in = w.shape[0], n = w.shape[1];
  out.assign(b.values.begin(), b.values.end());
  for (size_t k = 0; k < in; ++k) {
    const double xv = x[k];
    if (xv == 0.0) continue;
    const double* wrow = w.values.data() + k * n;
    for (size_t c = 0; c < n; ++c) out[c] += xv * wrow[c];
  }
}

std::vector<double> candidate_forward(const Candidate& cand,
                                      const std::vector<double>& features) {
  std::vector<double> h = features, next;
  for (size_t l = 0; l < cand.weights.size(); ++l) {
    linear_into(h, cand.weights[l], cand.biases[l], next);
    if (l + 1 < cand.weights.size())
      for (double& v : next) v = std::max(0.0, v);
    h.swap(next);
  }
  return h;
}

uint64_t ids_hash(const std::vector<size_t>& ids) {
  uint64_t h = 14695981039346656037ull;
  for (size_t id : ids) {
    const uint64_t v = id;
    h = fnv1a64(&v, sizeof(v), h);
  }
  return h;
}

std::vector<double> draw_gumbels(size_t k, Rng& rng) {
  std::vector<double> g(k);
  for (size_t j = 0; j < k; ++j) g[j] = sample_gumbel(rng);
  return g;
}

size_t argmax_index(const double* x, size_t n) {
  size_t best = 0;
  for (size_t i = 1; i < n; ++i)
    if (x[i] > x[best]) best = i;
  return best;
}

// One example, gumbels already decided. Training mode keeps the relaxed
// candidate mixture and tau_train; inference runs the committed candidates
// under tau_infer.
ShieldForward forward_with_noise(const ShieldModel& model,
                                 const std::vector<double>& features,
                                 const std::vector<double>& gumbels, bool training) {
  const size_t K = model.config.num_heads;
  ShieldForward out;
  Tensor head_logits = head_forward(model, features, training);
  out.gate_w = gate_weights(model, head_logits, features);
  if (model.config.variant == ShieldVariant::MeOnly) {
    out.alpha.assign(K, 1.0 / static_cast<double>(K));
  } else {
    const double tau = training ? model.config.tau_train : model.config.tau_infer;
    out.alpha = sample_alpha(out.gate_w, tau, gumbels);
  }
  std::vector<double> y = aggregate(out.alpha, out.gate_w, head_logits);
  const size_t m = y.size();
  out.logits = Tensor({m}, std::move(y));
  out.top_head = argmax_index(out.alpha.data(), K);
  return out;
}

std::vector<double> noise_for(const ShieldModel& model, const std::vector<size_t>& ids,
                              bool training, Rng& rng) {
  const size_t K = model.config.num_heads;
  if (model.config.variant == ShieldVariant::MeOnly) return std::vector<double>(K, 0.0);
  if (training) return draw_gumbels(K, rng);
  switch (model.config.noise) {
    case NoiseMode::Fresh:
      return draw_gumbels(K, rng);
    case NoiseMode::InputSeeded: {
      Rng local(ids_hash(ids) ^ model.config.seed);
      return draw_gumbels(K, local);
    }
    case NoiseMode::Zero:
      break;
  }
  return std::vector<double>(K, 0.0);
}

Var taped_candidate(Tape& tape, const std::vector<Var>& weights,
                    const std::vector<Var>& biases, Var x) {
  Var h = x;
  for (size_t l = 0; l < weights.size(); ++l) {
    h = tape.add_rowvec(tape.matmul(h, weights[l]), biases[l]);
    if (l + 1 < weights.size()) h = tape.relu(h);
  }
  return h;
}

struct BoundCandidates {
  std::vector<std::vector<std::vector<Var>>> weights;  // [K][T][layers]
  std::vector<std::vector<std::vector<Var>>> biases;
};

BoundCandidates bind_candidates(Tape& tape, const ShieldModel& model, bool trainable) {
  const size_t K = model.config.num_heads, T = model.config.num_candidates;
  BoundCandidates out;
  out.weights.resize(K);
  out.biases.resize(K);
  for (size_t j = 0; j < K; ++j) {
    out.weights[j].resize(T);
    out.biases[j].resize(T);
    for (size_t t = 0; t < T; ++t) {
      const Candidate& cand = model.bank.heads[j][t];
      for (size_t l = 0; l < cand.weights.size(); ++l) {
        out.weights[j][t].push_back(tape.leaf(cand.weights[l], trainable));
        out.biases[j][t].push_back(tape.leaf(cand.biases[l], trainable));
      }
    }
  }
  return out;
}

// Everything beta-independent about a validation batch, captured once so
// the finite-difference loop over beta entries only recombines. Candidate
// outputs and the Gram matrix of their input-embedding Jacobians suffice:
// d(output)/d(embedding) does not depend on beta, and both the mixed head
// logits and the per-head loss gradients are linear recombinations of the
// per-candidate pieces.
struct ExpertPrecompute {
  size_t K = 0, T = 0, M = 0;
  std::vector<size_t> golds;
  std::vector<std::vector<double>> features;  // [B][Q]
  std::vector<Tensor> cand_out;               // [B] of [K*T, M]
  std::vector<std::vector<double>> gram;      // [B] of [K*T*M]^2, row-major
};

ExpertPrecompute build_expert_precompute(const ShieldModel& model, const Dataset& data,
                                         const std::vector<size_t>& indices,
                                         bool with_jacobians) {
  const BaseModel& base = *model.base;
  const size_t K = model.config.num_heads, T = model.config.num_candidates;
  const size_t M = base.num_classes;
  ExpertPrecompute pre;
  pre.K = K;
  pre.T = T;
  pre.M = M;

  Tape tape;
  BoundEncoder enc = bind_encoder_constants(tape, base);
  BoundCandidates cands = bind_candidates(tape, model, false);

  for (size_t idx : indices) {
    const Example& ex = data.examples[idx];
    pre.golds.push_back(ex.label);
    Tensor gathered = gather_embedding_rows(base, ex.ids);
    const size_t rows = gathered.shape[0];
    Var eg = tape.leaf(std::move(gathered), true);
    std::vector<size_t> row_ids(rows);
    for (size_t i = 0; i < rows; ++i) row_ids[i] = i;
    Var feats = encode_from_rows(tape, base, enc, eg, row_ids);
    pre.features.push_back(tape.value(feats).values);

    Tensor outs({K * T, M});
    std::vector<Var> cols;
    cols.reserve(K * T * M);
    for (size_t j = 0; j < K; ++j)
      for (size_t t = 0; t < T; ++t) {
        Var o = taped_candidate(tape, cands.weights[j][t], cands.biases[j][t], feats);
        const Tensor& ov = tape.value(o);
        std::copy_n(ov.values.data(), M, outs.values.data() + (j * T + t) * M);
        if (with_jacobians)
          for (size_t m = 0; m < M; ++m) cols.push_back(tape.col(o, m));
      }
    pre.cand_out.push_back(std::move(outs));

    if (!with_jacobians) continue;
    const size_t n = K * T * M;
    const size_t len = rows * base.embed_dim;
    std::vector<std::vector<double>> jac(n);
    for (size_t a = 0; a < n; ++a) {
      tape.backward(cols[a]);
      jac[a] = tape.grad(eg).values;
    }
    std::vector<double> gram(n * n, 0.0);
    for (size_t a = 0; a < n; ++a)
      for (size_t b = a; b < n; ++b) {
        double dot = 0.0;
        const double* pa = jac[a].data();
        const double* pb = jac[b].data();
        for (size_t i = 0; i < len; ++i) dot += pa[i] * pb[i];
        gram[a * n + b] = dot;
        gram[b * n + a] = dot;
      }
    pre.gram.push_back(std::move(gram));
  }
  return pre;
}

// Mixed head logits for one precomputed example at the given beta.
// h[j][m] = sum_t softmax(beta_j)_t / T * cand_out[j*T+t][m]
std::vector<double> mixed_heads(const ExpertPrecompute& pre, size_t i,
                                const Tensor& beta) {
  const size_t K = pre.K, T = pre.T, M = pre.M;
  const double inv_t = 1.0 / static_cast<double>(T);
  std::vector<double> h(K * M, 0.0);
  const Tensor& outs = pre.cand_out[i];
  for (size_t j = 0; j < K; ++j) {
    std::vector<double> s = softmax_plain(beta.values.data() + j * T, T);
    for (size_t t = 0; t < T; ++t) {
      const double wgt = s[t] * inv_t;
      const double* row = outs.values.data() + (j * T + t) * M;
      for (size_t m = 0; m < M; ++m) h[j * M + m] += wgt * row[m];
    }
  }
  return h;
}

double se_from_precompute(const ShieldModel& model, const ExpertPrecompute& pre,
                          const std::vector<std::vector<double>>& gumbels,
                          const Tensor& beta) {
  const size_t K = pre.K, M = pre.M;
  double total = 0.0;
  for (size_t i = 0; i < pre.golds.size(); ++i) {
    std::vector<double> h = mixed_heads(pre, i, beta);
    Tensor head_logits({K, M}, std::move(h));
    std::vector<double> w = gate_weights(model, head_logits, pre.features[i]);
    std::vector<double> alpha;
    if (model.config.variant == ShieldVariant::MeOnly)
      alpha.assign(K, 1.0 / static_cast<double>(K));
    else
      alpha = sample_alpha(w, model.config.tau_train, gumbels[i]);
    std::vector<double> y = aggregate(alpha, w, head_logits);
    total += stable_nll(y.data(), M, pre.golds[i]);
  }
  return total / static_cast<double>(pre.golds.size());
}

// Pair terms from the Gram matrix. The gradient of head j's standalone
// loss w.r.t. the input embeddings is sum_{t,m} c_{j,t,m} * jac_{j,t,m}
// with c_{j,t,m} = softmax(beta_j)_t / T * (p_m - [m == gold]), so every
// dot product and norm reduces to c' G c over candidate blocks.
double experts_from_precompute(const ExpertPrecompute& pre, const Tensor& beta) {
  const size_t K = pre.K, T = pre.T, M = pre.M;
  const size_t n = K * T * M;
  const double inv_t = 1.0 / static_cast<double>(T);
  double total = 0.0;
  for (size_t i = 0; i < pre.golds.size(); ++i) {
    std::vector<double> h = mixed_heads(pre, i, beta);
    std::vector<double> coeff(n, 0.0);
    for (size_t j = 0; j < K; ++j) {
      std::vector<double> p = softmax_plain(h.data() + j * M, M);
      p[pre.golds[i]] -= 1.0;
      std::vector<double> s = softmax_plain(beta.values.data() + j * T, T);
      for (size_t t = 0; t < T; ++t)
        for (size_t m = 0; m < M; ++m)
          coeff[(j * T + t) * M + m] = s[t] * inv_t * p[m];
    }
    const std::vector<double>& gram = pre.gram[i];
    const size_t bs = T * M;
    auto block_dot = [&](size_t ja, size_t jb) {
      double acc = 0.0;
      for (size_t a = 0; a < bs; ++a) {
        const double ca = coeff[ja * bs + a];
        if (ca == 0.0) continue;
        const double* grow = gram.data() + (ja * bs + a) * n + jb * bs;
        for (size_t b = 0; b < bs; ++b) acc += ca * grow[b] * coeff[jb * bs + b];
      }
      return acc;
    };
    std::vector<double> norm2(K);
    for (size_t j = 0; j < K; ++j) norm2[j] = std::max(0.0, block_dot(j, j));
    for (size_t a = 0; a < K; ++a)
      for (size_t b = a + 1; b < K; ++b) {
        const double dot = block_dot(a, b);
        const double denom = std::sqrt(norm2[a]) * std::sqrt(norm2[b]);
        const double cos = denom > 0.0 ? dot / denom : 0.0;
        total += cos - (norm2[a] + norm2[b] - 2.0 * dot);
      }
  }
  return total;
}

}  // namespace

std::vector<Tensor*> ShieldModel::step_parameters() {
  std::vector<Tensor*> out;
  for (auto& head : bank.heads)
    for (Candidate& cand : head)
      for (size_t l = 0; l < cand.weights.size(); ++l) {
        out.push_back(&cand.weights[l]);
        out.push_back(&cand.biases[l]);
      }
  out.push_back(&gate.w);
  out.push_back(&gate.b);
  return out;
}

size_t ShieldModel::patch_param_count() const {
  size_t n = 0;
  for (const auto& head : bank.heads)
    for (const Candidate& cand : head) {
      for (const Tensor& t : cand.weights) n += t.size();
      for (const Tensor& t : cand.biases) n += t.size();
    }
  n += gate.w.size() + gate.b.size() + bank.beta.size();
  return n;
}

uint64_t ShieldModel::patch_param_hash() const {
  uint64_t h = 14695981039346656037ull;
  auto mix = [&h](const Tensor& t) {
    h = fnv1a64(t.values.data(), t.values.size() * sizeof(double), h);
  };
  for (const auto& head : bank.heads)
    for (const Candidate& cand : head) {
      for (const Tensor& t : cand.weights) mix(t);
      for (const Tensor& t : cand.biases) mix(t);
    }
  mix(gate.w);
  mix(gate.b);
  mix(bank.beta);
  return h;
}

ShieldModel patch(const BaseModel& base, const ShieldConfig& config) {
  if (!base.frozen) throw ConfigError("patch: base model must be frozen first");
  if (config.num_heads == 0) throw ConfigError("patch: num_heads must be positive");
  if (config.num_candidates == 0)
    throw ConfigError("patch: num_candidates must be positive");
  if (config.hidden == 0) throw ConfigError("patch: hidden width must be positive");
  if (config.tau_train <= 0.0 || config.tau_infer <= 0.0)
    throw ConfigError("patch: tau must be positive");
  if (config.variant == ShieldVariant::SeOnly && config.num_candidates != 1)
    throw ConfigError("patch: single-expert variant requires num_candidates == 1");

  const size_t K = config.num_heads, T = config.num_candidates;
  const size_t Q = base.feature_dim, M = base.num_classes, H = config.hidden;

  ShieldModel model;
  model.base = &base;
  model.config = config;
  Rng rng(config.seed);

  model.bank.heads.resize(K);
  for (size_t j = 0; j < K; ++j) {
    model.bank.heads[j].resize(T);
    for (size_t t = 0; t < T; ++t) {
      Candidate& cand = model.bank.heads[j][t];
      cand.hidden_layers = candidate_depth(config, t);
      size_t in = Q;
      for (size_t l = 0; l < cand.hidden_layers; ++l) {
        cand.weights.push_back(Tensor::uniform_init({in, H}, in, rng));
        cand.biases.push_back(Tensor::uniform_init({H}, in, rng));
        in = H;
      }
      cand.weights.push_back(Tensor::uniform_init({in, M}, in, rng));
      cand.biases.push_back(Tensor::uniform_init({M}, in, rng));
    }
  }
  const size_t gate_in = K * M + Q;
  model.gate.w = Tensor::uniform_init({gate_in, K}, gate_in, rng);
  model.gate.b = Tensor::uniform_init({K}, gate_in, rng);
  model.bank.beta = Tensor({K, T});
  return model;
}

ShieldModel patch(const BaseModel& base, ShieldConfig config, uint64_t seed) {
  config.seed = seed;
  return patch(base, config);
}

Tensor sample_gumbel_tensor(const std::vector<size_t>& shape, Rng& rng) {
  Tensor out(shape);
  for (double& v : out.values) v = sample_gumbel(rng);
  return out;
}

Tensor head_forward(const ShieldModel& model, const std::vector<double>& features,
                    bool training) {
  check_patched(model);
  const size_t K = model.config.num_heads, T = model.config.num_candidates;
  const size_t M = model.base->num_classes;
  if (features.size() != model.base->feature_dim)
    throw ConfigError("shield: feature vector has size " +
                      std::to_string(features.size()) + ", expected " +
                      std::to_string(model.base->feature_dim));
  Tensor out({K, M});
  if (training) {
    const double inv_t = 1.0 / static_cast<double>(T);
    for (size_t j = 0; j < K; ++j) {
      std::vector<double> s = beta_mix(model, j);
      for (size_t t = 0; t < T; ++t) {
        const double wgt = s[t] * inv_t;
        std::vector<double> o = candidate_forward(model.bank.heads[j][t], features);
        for (size_t m = 0; m < M; ++m) out.at(j, m) += wgt * o[m];
      }
    }
    return out;
  }
  if (!model.discretized)
    throw ConfigError("shield: inference forward requires a discretized model");
  for (size_t j = 0; j < K; ++j) {
    std::vector<double> o =
        candidate_forward(model.bank.heads[j][model.active[j]], features);
    for (size_t m = 0; m < M; ++m) out.at(j, m) = o[m];
  }
  return out;
}

std::vector<double> gate_weights(const ShieldModel& model, const Tensor& head_logits,
                                 const std::vector<double>& features) {
  check_patched(model);
  const size_t in = model.gate.w.shape[0];
  if (head_logits.size() + features.size() != in)
    throw ConfigError("shield: gate input has size " +
                      std::to_string(head_logits.size() + features.size()) +
                      ", expected " + std::to_string(in));
  std::vector<double> gin;
  gin.reserve(in);
  gin.insert(gin.end(), head_logits.values.begin(), head_logits.values.end());
  gin.insert(gin.end(), features.begin(), features.end());
  std::vector<double> w;
  linear_into(gin, model.gate.w, model.gate.b, w);
  return w;
}

std::vector<double> sample_alpha(const std::vector<double>& w, double tau,
                                 const std::vector<double>& g) {
  if (tau <= 0.0) throw ConfigError("shield: tau must be positive");
  if (w.size() != g.size())
    throw ConfigError("shield: gate and noise sizes differ");
  std::vector<double> z(w.size());
  for (size_t j = 0; j < w.size(); ++j) z[j] = (w[j] + g[j]) / tau;
  return softmax_plain(z.data(), z.size());
}

std::vector<double> aggregate(const std::vector<double>& alpha,
                              const std::vector<double>& w, const Tensor& head_logits) {
  const size_t K = head_logits.shape[0], M = head_logits.shape[1];
  if (alpha.size() != K || w.size() != K)
    throw ConfigError("shield: aggregate sizes differ");
  std::vector<double> y(M, 0.0);
  for (size_t j = 0; j < K; ++j) {
    const double scale = alpha[j] * w[j];
    const double* row = head_logits.values.data() + j * M;
    for (size_t m = 0; m < M; ++m) y[m] += scale * row[m];
  }
  const double inv_k = 1.0 / static_cast<double>(K);
  for (double& v : y) v *= inv_k;
  return y;
}

ShieldForward forward_shield(const ShieldModel& model, const std::vector<size_t>& ids,
                             Rng& rng) {
  check_patched(model);
  const bool training = !model.discretized;
  std::vector<double> features = base_features(*model.base, ids);
  std::vector<double> g = noise_for(model, ids, training, rng);
  return forward_with_noise(model, features, g, training);
}

std::vector<size_t> predict_shield(const ShieldModel& model, const Dataset& data,
                                   Rng& rng) {
  std::vector<size_t> out;
  out.reserve(data.size());
  for (const Example& ex : data.examples) {
    ShieldForward f = forward_shield(model, ex.ids, rng);
    out.push_back(argmax_index(f.logits.values.data(), f.logits.size()));
  }
  return out;
}

double loss_se(const ShieldModel& model, const Dataset& data,
               const std::vector<size_t>& indices, Rng& rng) {
  check_patched(model);
  if (indices.empty()) throw ConfigError("shield: loss over empty batch");
  const size_t M = model.base->num_classes;
  double total = 0.0;
  for (size_t idx : indices) {
    const Example& ex = data.examples[idx];
    std::vector<double> features = base_features(*model.base, ex.ids);
    std::vector<double> g = noise_for(model, ex.ids, true, rng);
    ShieldForward f = forward_with_noise(model, features, g, true);
    total += stable_nll(f.logits.values.data(), M, ex.label);
  }
  return total / static_cast<double>(indices.size());
}

double loss_experts(const ShieldModel& model, const Dataset& data,
                    const std::vector<size_t>& indices) {
  check_patched(model);
  if (indices.empty()) throw ConfigError("shield: loss over empty batch");
  const BaseModel& base = *model.base;
  const size_t K = model.config.num_heads, T = model.config.num_candidates;
  const double inv_t = 1.0 / static_cast<double>(T);

  Tape tape;
  BoundEncoder enc = bind_encoder_constants(tape, base);
  BoundCandidates cands = bind_candidates(tape, model, false);

  double total = 0.0;
  for (size_t idx : indices) {
    const Example& ex = data.examples[idx];
    Tensor gathered = gather_embedding_rows(base, ex.ids);
    const size_t rows = gathered.shape[0];
    Var eg = tape.leaf(std::move(gathered), true);
    std::vector<size_t> row_ids(rows);
    for (size_t i = 0; i < rows; ++i) row_ids[i] = i;
    Var feats = encode_from_rows(tape, base, enc, eg, row_ids);

    std::vector<std::vector<double>> grads(K);
    for (size_t j = 0; j < K; ++j) {
      std::vector<double> s = beta_mix(model, j);
      Var mixed{};
      for (size_t t = 0; t < T; ++t) {
        Var o = taped_candidate(tape, cands.weights[j][t], cands.biases[j][t], feats);
        Var scaled = tape.scale(o, s[t] * inv_t);
        mixed = t == 0 ? scaled : tape.add(mixed, scaled);
      }
      Var head_loss = tape.nll(mixed, {ex.label});
      tape.backward(head_loss);
      grads[j] = tape.grad(eg).values;
    }

    for (size_t a = 0; a < K; ++a)
      for (size_t b = a + 1; b < K; ++b) {
        double dot = 0.0, na = 0.0, nb = 0.0, sq = 0.0;
        for (size_t i = 0; i < grads[a].size(); ++i) {
          const double x = grads[a][i], y = grads[b][i];
          dot += x * y;
          na += x * x;
          nb += y * y;
          sq += (x - y) * (x - y);
        }
        const double denom = std::sqrt(na) * std::sqrt(nb);
        const double cos = denom > 0.0 ? dot / denom : 0.0;
        total += cos - sq;
      }
  }
  return total;
}

double loss_me(const ShieldModel& model, const Dataset& data,
               const std::vector<size_t>& indices, double gamma, Rng& rng) {
  double total = loss_se(model, data, indices, rng);
  if (gamma != 0.0) total += gamma * loss_experts(model, data, indices);
  return total;
}

Tensor grad_beta_with(ShieldModel& model, const std::function<double()>& loss_fn,
                      double step) {
  check_patched(model);
  if (step <= 0.0) throw ConfigError("shield: beta fd step must be positive");
  Tensor& beta = model.bank.beta;
  Tensor grad(beta.shape);
  for (size_t i = 0; i < beta.size(); ++i) {
    const double orig = beta.values[i];
    beta.values[i] = orig + step;
    const double up = loss_fn();
    beta.values[i] = orig - step;
    const double down = loss_fn();
    beta.values[i] = orig;
    grad.values[i] = (up - down) / (2.0 * step);
    if (!std::isfinite(grad.values[i]))
      throw NumericError("shield: non-finite beta gradient at entry " +
                         std::to_string(i));
  }
  return grad;
}

Tensor grad_beta(const ShieldModel& model, const Dataset& validation,
                 const std::vector<size_t>& indices, double gamma, Rng& rng,
                 double step) {
  check_patched(model);
  if (indices.empty()) throw ConfigError("shield: beta gradient over empty batch");
  if (step <= 0.0) throw ConfigError("shield: beta fd step must be positive");

  // Gumbel draws are taken once and shared by every finite-difference
  // evaluation: common random numbers keep the quotient from measuring
  // noise. Draw order matches loss_se (per example, then per head).
  std::vector<std::vector<double>> gumbels;
  gumbels.reserve(indices.size());
  const size_t K = model.config.num_heads;
  for (size_t i = 0; i < indices.size(); ++i) {
    if (model.config.variant == ShieldVariant::MeOnly)
      gumbels.emplace_back(K, 0.0);
    else
      gumbels.push_back(draw_gumbels(K, rng));
  }

  ExpertPrecompute pre =
      build_expert_precompute(model, validation, indices, gamma != 0.0);

  Tensor beta = model.bank.beta;
  auto eval = [&](const Tensor& b) {
    double total = se_from_precompute(model, pre, gumbels, b);
    if (gamma != 0.0) total += gamma * experts_from_precompute(pre, b);
    return total;
  };

  Tensor grad(beta.shape);
  for (size_t i = 0; i < beta.size(); ++i) {
    const double orig = beta.values[i];
    beta.values[i] = orig + step;
    const double up = eval(beta);
    beta.values[i] = orig - step;
    const double down = eval(beta);
    beta.values[i] = orig;
    grad.values[i] = (up - down) / (2.0 * step);
    if (!std::isfinite(grad.values[i]))
      throw NumericError("shield: non-finite beta gradient at entry " +
                         std::to_string(i));
  }
  return grad;
}

namespace {

// Whole-batch training loss on a tape, gradients for candidates + gate.
// Features enter as constants (the base stays frozen), beta as fixed
// mixture scalars, gumbels as constants.
double step_a_loss(ShieldModel& model, const Dataset& data,
                   const std::vector<size_t>& batch, Rng& rng,
                   std::vector<Tensor>& grads) {
  const BaseModel& base = *model.base;
  const size_t K = model.config.num_heads, T = model.config.num_candidates;
  const size_t Q = base.feature_dim, M = base.num_classes;
  const size_t B = batch.size();
  const double inv_t = 1.0 / static_cast<double>(T);

  Tape tape;
  BoundCandidates cands = bind_candidates(tape, model, true);
  Var gate_w = tape.leaf(model.gate.w, true);
  Var gate_b = tape.leaf(model.gate.b, true);
  std::vector<Var> pvars;
  for (size_t j = 0; j < K; ++j)
    for (size_t t = 0; t < T; ++t)
      for (size_t l = 0; l < cands.weights[j][t].size(); ++l) {
        pvars.push_back(cands.weights[j][t][l]);
        pvars.push_back(cands.biases[j][t][l]);
      }
  pvars.push_back(gate_w);
  pvars.push_back(gate_b);

  Tensor feat_vals({B, Q});
  std::vector<size_t> labels;
  labels.reserve(B);
  Tensor gumbel_vals({B, K});
  for (size_t i = 0; i < B; ++i) {
    const Example& ex = data.examples[batch[i]];
    std::vector<double> f = base_features(base, ex.ids);
    std::copy_n(f.data(), Q, feat_vals.values.data() + i * Q);
    labels.push_back(ex.label);
    if (model.config.variant != ShieldVariant::MeOnly)
      for (size_t j = 0; j < K; ++j) gumbel_vals.at(i, j) = sample_gumbel(rng);
  }
  Var feats = tape.constant(std::move(feat_vals));

  std::vector<Var> heads(K);
  for (size_t j = 0; j < K; ++j) {
    std::vector<double> s = beta_mix(model, j);
    Var mixed{};
    for (size_t t = 0; t < T; ++t) {
      Var o = taped_candidate(tape, cands.weights[j][t], cands.biases[j][t], feats);
      Var scaled = tape.scale(o, s[t] * inv_t);
      mixed = t == 0 ? scaled : tape.add(mixed, scaled);
    }
    heads[j] = mixed;
  }
  std::vector<Var> gate_in_parts = heads;
  gate_in_parts.push_back(feats);
  Var gin = tape.hconcat(gate_in_parts);
  Var w = tape.add_rowvec(tape.matmul(gin, gate_w), gate_b);

  Var aw{};
  if (model.config.variant == ShieldVariant::MeOnly) {
    aw = tape.scale(w, 1.0 / static_cast<double>(K));
  } else {
    Var noisy = tape.add(w, tape.constant(std::move(gumbel_vals)));
    Var alpha = tape.softmax(tape.scale(noisy, 1.0 / model.config.tau_train));
    aw = tape.mul(alpha, w);
  }

  Var agg{};
  for (size_t j = 0; j < K; ++j) {
    Var part = tape.rows_scale(heads[j], tape.col(aw, j));
    agg = j == 0 ? part : tape.add(agg, part);
  }
  Var y = tape.scale(agg, 1.0 / static_cast<double>(K));
  Var loss = tape.nll(y, labels);
  grads = tape.gradient(loss, pvars);
  return tape.value(loss).values[0];
}

}  // namespace

TrainHistory train_shield(ShieldModel& model, const Dataset& train,
                          const Dataset& validation, const TrainShieldOptions& options,
                          Rng& rng) {
  check_patched(model);
  if (model.discretized) throw ConfigError("shield: model already discretized");
  if (train.size() == 0 || validation.size() == 0)
    throw ConfigError("shield: empty dataset");
  if (options.batch_size == 0) throw ConfigError("shield: batch_size must be positive");

  TrainHistory history;
  if (options.max_epochs == 0) {
    discretize(model);
    return history;
  }

  std::vector<Tensor*> params = model.step_parameters();
  AdamConfig adam_cfg;
  adam_cfg.lr = options.lr;
  AdamState adam(params, adam_cfg);
  std::vector<Tensor*> beta_param = {&model.bank.beta};
  AdamState beta_adam(beta_param, adam_cfg);

  // Validation loss is stochastic; scoring every epoch with the same
  // derived seed makes epochs comparable for early stopping.
  const uint64_t eval_seed = splitmix64(model.config.seed ^ 0xe7a1c0de5eedull);

  std::vector<size_t> order(train.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<size_t> val_order(validation.size());
  for (size_t i = 0; i < val_order.size(); ++i) val_order[i] = i;
  std::vector<size_t> val_all = val_order;

  double best_val = std::numeric_limits<double>::infinity();
  std::vector<std::vector<double>> best_params;
  std::vector<double> best_beta;
  size_t stall = 0;

  for (size_t epoch = 0; epoch < options.max_epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    size_t batches = 0;
    for (size_t start = 0; start < order.size(); start += options.batch_size) {
      const size_t end = std::min(order.size(), start + options.batch_size);
      std::vector<size_t> batch(order.begin() + static_cast<long>(start),
                                order.begin() + static_cast<long>(end));
      std::vector<Tensor> grads;
      const double loss = step_a_loss(model, train, batch, rng, grads);
      if (!std::isfinite(loss))
        throw NumericError("shield: non-finite loss at epoch " + std::to_string(epoch) +
                           ", batch " + std::to_string(batches));
      clip_global_norm(grads, options.clip_norm);
      adam.step(params, grads);
      epoch_loss += loss;
      ++batches;
    }

    if (model.config.variant != ShieldVariant::SeOnly) {
      rng.shuffle(val_order);
      size_t done = 0;
      for (size_t start = 0; start < val_order.size() && done < options.beta_batches;
           start += options.batch_size, ++done) {
        const size_t end = std::min(val_order.size(), start + options.batch_size);
        std::vector<size_t> batch(val_order.begin() + static_cast<long>(start),
                                  val_order.begin() + static_cast<long>(end));
        Tensor g = grad_beta(model, validation, batch, model.config.gamma, rng,
                             options.fd_step);
        std::vector<Tensor> gv;
        gv.push_back(std::move(g));
        clip_global_norm(gv, options.clip_norm);
        beta_adam.step(beta_param, gv);
      }
    }

    EpochStats stats;
    stats.train_loss = epoch_loss / static_cast<double>(batches);
    Rng eval_rng(eval_seed);
    stats.val_loss = loss_se(model, validation, val_all, eval_rng);
    history.epochs.push_back(stats);

    if (stats.val_loss < best_val - 1e-9) {
      best_val = stats.val_loss;
      history.best_epoch = epoch;
      best_params.clear();
      for (Tensor* p : params) best_params.push_back(p->values);
      best_beta = model.bank.beta.values;
      stall = 0;
    } else {
      ++stall;
      if (stall >= options.patience) break;
    }
  }

  if (!best_params.empty()) {
    for (size_t i = 0; i < params.size(); ++i) params[i]->values = best_params[i];
    model.bank.beta.values = best_beta;
  }
  discretize(model);
  return history;
}

void discretize(ShieldModel& model) {
  check_patched(model);
  if (model.discretized) throw ConfigError("shield: model already discretized");
  const size_t K = model.config.num_heads, T = model.config.num_candidates;
  model.active.assign(K, 0);
  for (size_t j = 0; j < K; ++j) {
    const double* row = model.bank.beta.values.data() + j * T;
    model.active[j] = argmax_index(row, T);
  }
  model.discretized = true;
}

ParamAccounting count_params(const ShieldModel& model) {
  check_patched(model);
  const ShieldConfig& c = model.config;
  const size_t Q = model.base->feature_dim, M = model.base->num_classes;
  ParamAccounting out;
  out.base_count = model.base->param_count();
  out.patch_walk = model.patch_param_count();
  size_t per_head = 0;
  for (size_t t = 0; t < c.num_candidates; ++t)
    per_head += candidate_param_count(Q, M, c.hidden, candidate_depth(c, t));
  out.patch_formula = c.num_heads * per_head + (c.num_heads * M + Q) * c.num_heads +
                      c.num_heads + c.num_heads * c.num_candidates;
  out.ratio = static_cast<double>(out.patch_walk) / static_cast<double>(out.base_count);
  return out;
}

ShieldModel ablation_variant(const ShieldModel& model, ShieldVariant which) {
  check_patched(model);
  ShieldConfig config = model.config;
  config.variant = which;
  if (which == ShieldVariant::SeOnly) {
    config.num_candidates = 1;
    config.gamma = 0.0;
  }
  return patch(*model.base, config);
}

}  // namespace shield
