#pragma once

#include <cstdint>

#include "shield/text.hpp"

namespace shield {

// Desk-scale labeled corpus. Each class owns a disjoint set of signal
// tokens; a sentence's label is decided by which class's signals it
// carries. Non-signal slots are filled from a shared filler pool whose
// members lean toward one class (filler_affinity controls how strongly),
// which gives signal tokens plausible same-direction neighbors in the
// learned embedding space.
struct SyntheticCorpusSpec {
  size_t vocab_size = 600;  // includes the two reserved ids
  size_t num_classes = 2;
  size_t signal_tokens_per_class = 12;
  size_t min_len = 6;
  size_t max_len = 12;
  double noise_prob = 0.05;  // per-position chance of a uniform random token
  double filler_affinity = 0.7;
  size_t train_size = 2000;
  size_t val_size = 500;
  size_t test_size = 500;
  uint64_t seed = 1;
};

struct SyntheticCorpus {
  Vocabulary vocab;
  Dataset train;
  Dataset validation;
  Dataset test;
};

SyntheticCorpus generate_synthetic(const SyntheticCorpusSpec& spec);

// First id of class c's signal range; signals occupy
// [signal_base(spec,0), signal_base(spec,num_classes)).
size_t signal_base(const SyntheticCorpusSpec& spec, size_t c);

// Label by counting each class's signal tokens; ties go to the lowest
// class. This is the Bayes-optimal rule at noise 0.
size_t keyword_oracle_label(const SyntheticCorpusSpec& spec,
                            const std::vector<size_t>& ids);

}  // namespace shield
