#include "shield/base_model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "shield/errors.hpp"
#include "shield/optim.hpp"
#include "shield/rng.hpp"

namespace shield {

namespace {

constexpr size_t kConvKernels[] = {2, 3, 4};
constexpr size_t kMinConvLen = 4;

void check_ids(const BaseModel& model, const std::vector<size_t>& ids) {
  if (ids.empty()) throw ConfigError("base model: empty token sequence");
  for (size_t id : ids)
    if (id >= model.vocab.size())
      throw ConfigError("base model: token id " + std::to_string(id) +
                        " out of range (vocab " + std::to_string(model.vocab.size()) + ")");
}

std::vector<size_t> conv_padded(const std::vector<size_t>& ids) {
  std::vector<size_t> out = ids;
  while (out.size() < kMinConvLen) out.push_back(Vocabulary::kPad);
  return out;
}

// Bound base parameters on a tape, as trainable leaves or constants.
struct BoundBase {
  Var embedding;
  BoundEncoder enc;
  Var head_w, head_b;
  std::vector<Var> trainable;  // aligned with BaseModel::parameters()
};

BoundBase bind_base(Tape& tape, const BaseModel& model, bool trainable) {
  BoundBase b;
  b.embedding = tape.leaf(model.embedding, trainable);
  b.trainable.push_back(b.embedding);
  if (model.encoder == EncoderKind::MeanPool) {
    b.enc.enc_w = tape.leaf(model.enc_w, trainable);
    b.enc.enc_b = tape.leaf(model.enc_b, trainable);
    b.trainable.push_back(b.enc.enc_w);
    b.trainable.push_back(b.enc.enc_b);
  } else {
    for (size_t k = 0; k < model.conv_w.size(); ++k) {
      b.enc.conv_w.push_back(tape.leaf(model.conv_w[k], trainable));
      b.enc.conv_b.push_back(tape.leaf(model.conv_b[k], trainable));
      b.trainable.push_back(b.enc.conv_w.back());
      b.trainable.push_back(b.enc.conv_b.back());
    }
  }
  b.head_w = tape.leaf(model.head_w, trainable);
  b.head_b = tape.leaf(model.head_b, trainable);
  b.trainable.push_back(b.head_w);
  b.trainable.push_back(b.head_b);
  return b;
}

Var encode_example(Tape& tape, const BaseModel& model, const BoundBase& b,
                   const std::vector<size_t>& ids) {
  if (model.encoder == EncoderKind::MeanPool)
    return encode_from_rows(tape, model, b.enc, b.embedding, ids);
  return encode_from_rows(tape, model, b.enc, b.embedding, conv_padded(ids));
}

}  // namespace

BoundEncoder bind_encoder_constants(Tape& tape, const BaseModel& model) {
  BoundEncoder enc;
  if (model.encoder == EncoderKind::MeanPool) {
    enc.enc_w = tape.constant(model.enc_w);
    enc.enc_b = tape.constant(model.enc_b);
  } else {
    for (size_t k = 0; k < model.conv_w.size(); ++k) {
      enc.conv_w.push_back(tape.constant(model.conv_w[k]));
      enc.conv_b.push_back(tape.constant(model.conv_b[k]));
    }
  }
  return enc;
}

std::vector<size_t> encoder_row_ids(const BaseModel& model,
                                    const std::vector<size_t>& ids) {
  return model.encoder == EncoderKind::Conv ? conv_padded(ids) : ids;
}

// rows: a [*, D] var indexed by position; row_ids[i] selects its row i.
Var encode_from_rows(Tape& tape, const BaseModel& model, const BoundEncoder& b,
                     Var rows, const std::vector<size_t>& row_ids) {
  if (model.encoder == EncoderKind::MeanPool) {
    Var gathered = tape.gather_rows(rows, row_ids);
    Var pooled = tape.reshape(tape.mean_rows(gathered), {1, model.embed_dim});
    return tape.relu(tape.add_rowvec(tape.matmul(pooled, b.enc_w), b.enc_b));
  }
  std::vector<Var> per_kernel;
  for (size_t ki = 0; ki < 3; ++ki) {
    const size_t k = kConvKernels[ki];
    const size_t windows = row_ids.size() - k + 1;
    std::vector<size_t> widx;
    widx.reserve(windows * k);
    for (size_t w = 0; w < windows; ++w)
      for (size_t j = 0; j < k; ++j) widx.push_back(row_ids[w + j]);
    Var gathered = tape.gather_rows(rows, widx);
    Var stacked = tape.reshape(gathered, {windows, k * model.embed_dim});
    Var act = tape.relu(
        tape.add_rowvec(tape.matmul(stacked, b.conv_w[ki]), b.conv_b[ki]));
    per_kernel.push_back(tape.reshape(tape.max_rows(act), {1, model.conv_filters}));
  }
  return tape.hconcat(per_kernel);
}

Tensor gather_embedding_rows(const BaseModel& model, const std::vector<size_t>& ids) {
  check_ids(model, ids);
  const std::vector<size_t> rows = encoder_row_ids(model, ids);
  const size_t D = model.embed_dim;
  Tensor out({rows.size(), D});
  for (size_t i = 0; i < rows.size(); ++i)
    std::copy_n(model.embedding.values.data() + rows[i] * D, D,
                out.values.data() + i * D);
  return out;
}

std::vector<Tensor*> BaseModel::parameters() {
  std::vector<Tensor*> out = {&embedding};
  if (encoder == EncoderKind::MeanPool) {
    out.push_back(&enc_w);
    out.push_back(&enc_b);
  } else {
    for (size_t k = 0; k < conv_w.size(); ++k) {
      out.push_back(&conv_w[k]);
      out.push_back(&conv_b[k]);
    }
  }
  out.push_back(&head_w);
  out.push_back(&head_b);
  return out;
}

std::vector<const Tensor*> BaseModel::parameters() const {
  auto mutable_params = const_cast<BaseModel*>(this)->parameters();
  return {mutable_params.begin(), mutable_params.end()};
}

size_t BaseModel::param_count() const {
  size_t n = 0;
  for (const Tensor* t : parameters()) n += t->size();
  return n;
}

uint64_t BaseModel::param_hash() const {
  uint64_t h = 14695981039346656037ull;
  for (const Tensor* t : parameters())
    h = fnv1a64(t->values.data(), t->values.size() * sizeof(double), h);
  return h;
}

BaseModel init_base_model(const Vocabulary& vocab, size_t num_classes,
                          EncoderKind encoder, size_t embed_dim, size_t feature_dim,
                          uint64_t seed) {
  if (num_classes < 2) throw ConfigError("base model: num_classes must be >= 2");
  BaseModel m;
  m.vocab = vocab;
  m.encoder = encoder;
  m.embed_dim = embed_dim;
  m.num_classes = num_classes;
  Rng rng(seed);
  m.embedding = Tensor::uniform_init({vocab.size(), embed_dim}, embed_dim, rng);
  if (encoder == EncoderKind::MeanPool) {
    m.feature_dim = feature_dim;
    m.enc_w = Tensor::uniform_init({embed_dim, feature_dim}, embed_dim, rng);
    m.enc_b = Tensor::uniform_init({feature_dim}, embed_dim, rng);
  } else {
    if (feature_dim % 3 != 0)
      throw ConfigError("base model: conv feature_dim must be divisible by 3");
    m.conv_filters = feature_dim / 3;
    m.feature_dim = feature_dim;
    for (size_t k : kConvKernels) {
      m.conv_w.push_back(Tensor::uniform_init({k * embed_dim, m.conv_filters},
                                              k * embed_dim, rng));
      m.conv_b.push_back(Tensor::uniform_init({m.conv_filters}, k * embed_dim, rng));
    }
  }
  m.head_w = Tensor::uniform_init({m.feature_dim, num_classes}, m.feature_dim, rng);
  m.head_b = Tensor::uniform_init({num_classes}, m.feature_dim, rng);
  return m;
}

std::vector<double> base_features(const BaseModel& model, const std::vector<size_t>& ids) {
  check_ids(model, ids);
  const size_t D = model.embed_dim;
  if (model.encoder == EncoderKind::MeanPool) {
    std::vector<double> pooled(D, 0.0);
    for (size_t id : ids) {
      const double* row = model.embedding.values.data() + id * D;
      for (size_t d = 0; d < D; ++d) pooled[d] += row[d];
    }
    const double inv = 1.0 / static_cast<double>(ids.size());
    for (double& v : pooled) v *= inv;
    const size_t Q = model.feature_dim;
    std::vector<double> feat(model.enc_b.values);
    for (size_t d = 0; d < D; ++d) {
      const double x = pooled[d];
      if (x == 0.0) continue;
      const double* wrow = model.enc_w.values.data() + d * Q;
      for (size_t q = 0; q < Q; ++q) feat[q] += x * wrow[q];
    }
    for (double& v : feat) v = v > 0.0 ? v : 0.0;
    return feat;
  }
  const std::vector<size_t> padded = conv_padded(ids);
  std::vector<double> feat;
  feat.reserve(model.feature_dim);
  for (size_t ki = 0; ki < 3; ++ki) {
    const size_t k = kConvKernels[ki];
    const size_t F = model.conv_filters;
    const size_t windows = padded.size() - k + 1;
    std::vector<double> best(F, -std::numeric_limits<double>::infinity());
    std::vector<double> act(F);
    for (size_t w = 0; w < windows; ++w) {
      act = model.conv_b[ki].values;
      for (size_t j = 0; j < k; ++j) {
        const double* row = model.embedding.values.data() + padded[w + j] * D;
        const double* wmat = model.conv_w[ki].values.data() + j * D * F;
        for (size_t d = 0; d < D; ++d) {
          const double x = row[d];
          if (x == 0.0) continue;
          const double* wrow = wmat + d * F;
          for (size_t f = 0; f < F; ++f) act[f] += x * wrow[f];
        }
      }
      for (size_t f = 0; f < F; ++f) {
        const double a = act[f] > 0.0 ? act[f] : 0.0;
        best[f] = std::max(best[f], a);
      }
    }
    feat.insert(feat.end(), best.begin(), best.end());
  }
  return feat;
}

BaseForward forward_base(const BaseModel& model, const std::vector<size_t>& ids) {
  BaseForward out;
  std::vector<double> feat = base_features(model, ids);
  out.features = Tensor({model.feature_dim}, feat);
  const size_t Q = model.feature_dim, M = model.num_classes;
  std::vector<double> logits(model.head_b.values);
  for (size_t q = 0; q < Q; ++q) {
    const double x = feat[q];
    if (x == 0.0) continue;
    const double* wrow = model.head_w.values.data() + q * M;
    for (size_t m = 0; m < M; ++m) logits[m] += x * wrow[m];
  }
  out.logits = Tensor({M}, std::move(logits));
  return out;
}

Var taped_features(Tape& tape, const BaseModel& model,
                   const std::vector<const std::vector<size_t>*>& batch_ids,
                   bool train_embeddings) {
  BoundBase b = bind_base(tape, model, train_embeddings);
  std::vector<Var> rows;
  rows.reserve(batch_ids.size());
  for (const std::vector<size_t>* ids : batch_ids) {
    check_ids(model, *ids);
    rows.push_back(encode_example(tape, model, b, *ids));
  }
  return tape.vconcat(rows);
}

namespace {

double batch_loss_and_grads(std::vector<BaseModel*>& models,
                            const Dataset& data, const std::vector<size_t>& batch,
                            std::vector<Tensor>& grads_out) {
  Tape tape;
  std::vector<const std::vector<size_t>*> batch_ids;
  std::vector<size_t> labels;
  for (size_t idx : batch) {
    batch_ids.push_back(&data.examples[idx].ids);
    labels.push_back(data.examples[idx].label);
  }
  std::vector<Var> all_params;
  Var total{};
  for (size_t mi = 0; mi < models.size(); ++mi) {
    BaseModel& model = *models[mi];
    BoundBase b = bind_base(tape, model, true);
    std::vector<Var> rows;
    for (const std::vector<size_t>* ids : batch_ids) {
      check_ids(model, *ids);
      rows.push_back(encode_example(tape, model, b, *ids));
    }
    Var features = tape.vconcat(rows);
    Var logits = tape.add_rowvec(tape.matmul(features, b.head_w), b.head_b);
    Var loss = tape.nll(logits, labels);
    total = mi == 0 ? loss : tape.add(total, loss);
    all_params.insert(all_params.end(), b.trainable.begin(), b.trainable.end());
  }
  Var avg = tape.scale(total, 1.0 / static_cast<double>(models.size()));
  grads_out = tape.gradient(avg, all_params);
  return tape.value(avg).values[0];
}

TrainHistory train_models_joint(std::vector<BaseModel*> models, const Dataset& train,
                                const Dataset& validation, const TrainBaseOptions& options) {
  for (BaseModel* m : models)
    if (m->frozen) throw ConfigError("train: model already frozen");
  if (train.size() == 0 || validation.size() == 0)
    throw ConfigError("train: empty dataset");

  TrainHistory history;
  if (options.max_epochs == 0) {
    for (BaseModel* m : models) m->frozen = true;
    return history;
  }

  std::vector<Tensor*> params;
  for (BaseModel* m : models) {
    auto p = m->parameters();
    params.insert(params.end(), p.begin(), p.end());
  }
  AdamConfig adam_cfg;
  adam_cfg.lr = options.lr;
  AdamState adam(params, adam_cfg);

  Rng rng(options.seed);
  std::vector<size_t> order(train.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  auto val_loss_now = [&]() {
    double total = 0.0;
    for (BaseModel* m : models) total += dataset_nll(*m, validation);
    return total / static_cast<double>(models.size());
  };

  double best_val = std::numeric_limits<double>::infinity();
  std::vector<std::vector<double>> best_params;
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
      const double loss = batch_loss_and_grads(models, train, batch, grads);
      if (!std::isfinite(loss))
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) +
                           ", batch " + std::to_string(batches));
      clip_global_norm(grads, options.clip_norm);
      adam.step(params, grads);
      epoch_loss += loss;
      ++batches;
    }
    EpochStats stats;
    stats.train_loss = epoch_loss / static_cast<double>(batches);
    stats.val_loss = val_loss_now();
    history.epochs.push_back(stats);

    if (stats.val_loss < best_val - 1e-9) {
      best_val = stats.val_loss;
      history.best_epoch = epoch;
      best_params.clear();
      for (Tensor* p : params) best_params.push_back(p->values);
      stall = 0;
    } else {
      ++stall;
      if (stall >= options.patience) break;
    }
  }

  if (!best_params.empty())
    for (size_t i = 0; i < params.size(); ++i) params[i]->values = best_params[i];
  for (BaseModel* m : models) m->frozen = true;
  return history;
}

}  // namespace

TrainHistory train_base(BaseModel& model, const Dataset& train, const Dataset& validation,
                        const TrainBaseOptions& options) {
  return train_models_joint({&model}, train, validation, options);
}

double dataset_nll(const BaseModel& model, const Dataset& data) {
  if (data.size() == 0) throw ConfigError("dataset_nll: empty dataset");
  double total = 0.0;
  for (const Example& ex : data.examples) {
    BaseForward fwd = forward_base(model, ex.ids);
    const std::vector<double>& z = fwd.logits.values;
    double mx = z[0];
    for (double v : z) mx = std::max(mx, v);
    double denom = 0.0;
    for (double v : z) denom += std::exp(v - mx);
    total -= z[ex.label] - mx - std::log(denom);
  }
  return total / static_cast<double>(data.size());
}

std::vector<size_t> predict_base(const BaseModel& model, const Dataset& data) {
  std::vector<size_t> out;
  out.reserve(data.size());
  for (const Example& ex : data.examples) {
    BaseForward fwd = forward_base(model, ex.ids);
    size_t arg = 0;
    for (size_t m = 1; m < fwd.logits.size(); ++m)
      if (fwd.logits.values[m] > fwd.logits.values[arg]) arg = m;
    out.push_back(arg);
  }
  return out;
}

Tensor EnsembleBaseline::average_logits(const std::vector<size_t>& ids) const {
  if (members.empty()) throw ConfigError("ensemble: no members");
  Tensor avg({members[0].num_classes});
  for (const BaseModel& m : members) {
    BaseForward fwd = forward_base(m, ids);
    for (size_t i = 0; i < avg.size(); ++i) avg.values[i] += fwd.logits.values[i];
  }
  const double inv = 1.0 / static_cast<double>(members.size());
  for (double& v : avg.values) v *= inv;
  return avg;
}

size_t EnsembleBaseline::param_count() const {
  size_t n = 0;
  for (const BaseModel& m : members) n += m.param_count();
  return n;
}

EnsembleBaseline train_ensemble_baseline(size_t count, const Vocabulary& vocab,
                                         size_t num_classes, EncoderKind encoder,
                                         size_t embed_dim, size_t feature_dim,
                                         const Dataset& train, const Dataset& validation,
                                         const TrainBaseOptions& options) {
  if (count < 1) throw ConfigError("ensemble: count must be >= 1");
  EnsembleBaseline ensemble;
  std::vector<BaseModel*> handles;
  ensemble.members.reserve(count);
  for (size_t k = 0; k < count; ++k)
    ensemble.members.push_back(init_base_model(vocab, num_classes, encoder, embed_dim,
                                               feature_dim, splitmix64(options.seed + k)));
  for (BaseModel& m : ensemble.members) handles.push_back(&m);
  train_models_joint(handles, train, validation, options);
  return ensemble;
}

}  // namespace shield
