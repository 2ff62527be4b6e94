#pragma once

#include <cstdint>
#include <vector>

#include "shield/tape.hpp"
#include "shield/tensor.hpp"
#include "shield/text.hpp"

namespace shield {

enum class EncoderKind { MeanPool, Conv };

// Embedding + small encoder + linear head. Once trained it is frozen:
// the patching stage replaces the head's role but never touches these
// parameters.
struct BaseModel {
  Vocabulary vocab;
  EncoderKind encoder = EncoderKind::MeanPool;
  size_t embed_dim = 256;
  size_t feature_dim = 64;   // Q; conv encoder: filters * kernel count
  size_t num_classes = 2;
  size_t conv_filters = 32;  // per kernel width (2, 3, 4)

  Tensor embedding;             // [V, D]
  Tensor enc_w, enc_b;          // mean-pool encoder: [D, Q], [Q]
  std::vector<Tensor> conv_w;   // conv encoder: [k*D, F] for k = 2,3,4
  std::vector<Tensor> conv_b;   // [F] each
  Tensor head_w, head_b;        // [Q, M], [M]
  bool frozen = false;

  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;
  size_t param_count() const;
  uint64_t param_hash() const;
};

struct EpochStats {
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
  size_t best_epoch = 0;
};

BaseModel init_base_model(const Vocabulary& vocab, size_t num_classes,
                          EncoderKind encoder, size_t embed_dim, size_t feature_dim,
                          uint64_t seed);

// Plain (untaped) encoder output, the hot path for attacks and inference.
std::vector<double> base_features(const BaseModel& model, const std::vector<size_t>& ids);

struct BaseForward {
  Tensor features;  // [Q]
  Tensor logits;    // [M]
};

BaseForward forward_base(const BaseModel& model, const std::vector<size_t>& ids);

// Taped features for a batch, one row per example. When train_embeddings
// is false the whole encoder enters the tape as constants (gradients
// stop at the features).
Var taped_features(Tape& tape, const BaseModel& model,
                   const std::vector<const std::vector<size_t>*>& batch_ids,
                   bool train_embeddings);

// Encoder parameters bound once on a tape as constants, for callers that
// push many examples through the same tape.
struct BoundEncoder {
  Var enc_w, enc_b;
  std::vector<Var> conv_w, conv_b;
};

BoundEncoder bind_encoder_constants(Tape& tape, const BaseModel& model);

// Token ids as the encoder consumes them (conv pads short sequences).
std::vector<size_t> encoder_row_ids(const BaseModel& model,
                                    const std::vector<size_t>& ids);

// [1, Q] features where `rows` is a var of embedding rows and row_ids[i]
// selects the row for position i. Passing a gathered [L, D] leaf with
// identity row_ids yields d(features)/d(embedding rows).
Var encode_from_rows(Tape& tape, const BaseModel& model, const BoundEncoder& enc,
                     Var rows, const std::vector<size_t>& row_ids);

// Plain gather of the embedding rows the encoder would consume: [L', D].
Tensor gather_embedding_rows(const BaseModel& model, const std::vector<size_t>& ids);

struct TrainBaseOptions {
  size_t max_epochs = 30;
  size_t batch_size = 32;
  double lr = 0.005;
  double clip_norm = 10.0;
  size_t patience = 3;
  uint64_t seed = 1;
};

// NLL minimization with Adam, per-epoch validation, early stopping, and
// restoration of the best-validation parameters. Freezes the model on
// completion.
TrainHistory train_base(BaseModel& model, const Dataset& train, const Dataset& validation,
                        const TrainBaseOptions& options);

double dataset_nll(const BaseModel& model, const Dataset& data);
std::vector<size_t> predict_base(const BaseModel& model, const Dataset& data);

// Classical deep ensemble trained on the average of member NLLs;
// prediction averages member logits.
struct EnsembleBaseline {
  std::vector<BaseModel> members;
  Tensor average_logits(const std::vector<size_t>& ids) const;
  size_t param_count() const;
};

EnsembleBaseline train_ensemble_baseline(size_t count, const Vocabulary& vocab,
                                         size_t num_classes, EncoderKind encoder,
                                         size_t embed_dim, size_t feature_dim,
                                         const Dataset& train, const Dataset& validation,
                                         const TrainBaseOptions& options);

}  // namespace shield
