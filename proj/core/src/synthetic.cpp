#include "shield/synthetic.hpp"

#include <algorithm>

#include "shield/errors.hpp"
#include "shield/rng.hpp"

namespace shield {

namespace {

void validate(const SyntheticCorpusSpec& spec) {
  if (spec.num_classes < 2) throw ConfigError("synthetic: num_classes must be >= 2");
  if (spec.signal_tokens_per_class == 0)
    throw ConfigError("synthetic: signal_tokens_per_class must be >= 1");
  if (spec.min_len == 0 || spec.min_len > spec.max_len)
    throw ConfigError("synthetic: bad length range");
  if (spec.noise_prob < 0.0 || spec.noise_prob > 1.0)
    throw ConfigError("synthetic: noise_prob outside [0,1]");
  if (spec.filler_affinity < 0.0 || spec.filler_affinity > 1.0)
    throw ConfigError("synthetic: filler_affinity outside [0,1]");
  if (spec.train_size == 0 || spec.val_size == 0 || spec.test_size == 0)
    throw ConfigError("synthetic: split sizes must be positive");
  const size_t signals = spec.num_classes * spec.signal_tokens_per_class;
  // Each class needs at least two fillers leaning its way.
  if (2 + signals + 2 * spec.num_classes > spec.vocab_size)
    throw ConfigError("synthetic: vocabulary too small for " + std::to_string(signals) +
                      " signal tokens plus fillers");
}

std::string signal_token(size_t c, size_t i) {
  return "sig" + std::to_string(c) + "x" + std::to_string(i);
}

Dataset make_split(const SyntheticCorpusSpec& spec, size_t count,
                   const std::string& split, Rng& rng) {
  const size_t filler_base = signal_base(spec, spec.num_classes);
  const size_t filler_count = spec.vocab_size - filler_base;
  Dataset data;
  data.num_classes = spec.num_classes;
  data.split = split;
  for (size_t c = 0; c < spec.num_classes; ++c)
    data.label_names.push_back("c" + std::to_string(c / 10) + std::to_string(c % 10));
  data.examples.reserve(count);
  for (size_t n = 0; n < count; ++n) {
    const size_t label = n % spec.num_classes;  // balanced splits
    const size_t len =
        spec.min_len + rng.uniform_index(spec.max_len - spec.min_len + 1);
    const size_t n_sig = std::max<size_t>(1, len / 4);

    std::vector<size_t> positions(len);
    for (size_t i = 0; i < len; ++i) positions[i] = i;
    rng.shuffle(positions);

    std::vector<size_t> ids(len);
    for (size_t i = 0; i < len; ++i) {
      const bool is_signal_slot =
          std::find(positions.begin(), positions.begin() + static_cast<long>(n_sig),
                    i) != positions.begin() + static_cast<long>(n_sig);
      if (is_signal_slot) {
        ids[i] = signal_base(spec, label) +
                 rng.uniform_index(spec.signal_tokens_per_class);
      } else if (rng.uniform() < spec.filler_affinity) {
        // filler whose affinity class ((id - filler_base) % M) equals label
        const size_t per_class =
            (filler_count + spec.num_classes - 1) / spec.num_classes;
        size_t pick = filler_base + label + spec.num_classes * rng.uniform_index(per_class);
        while (pick >= spec.vocab_size) pick -= spec.num_classes;
        ids[i] = pick;
      } else {
        ids[i] = filler_base + rng.uniform_index(filler_count);
      }
    }
    for (size_t i = 0; i < len; ++i)
      if (rng.uniform() < spec.noise_prob)
        ids[i] = 2 + rng.uniform_index(spec.vocab_size - 2);

    Example ex;
    ex.ids = std::move(ids);
    ex.label = label;
    data.examples.push_back(std::move(ex));
  }
  return data;
}

}  // namespace

size_t signal_base(const SyntheticCorpusSpec& spec, size_t c) {
  return 2 + c * spec.signal_tokens_per_class;
}

size_t keyword_oracle_label(const SyntheticCorpusSpec& spec,
                            const std::vector<size_t>& ids) {
  size_t best_class = 0, best_count = 0;
  for (size_t c = 0; c < spec.num_classes; ++c) {
    const size_t lo = signal_base(spec, c), hi = signal_base(spec, c + 1);
    size_t count = 0;
    for (size_t id : ids)
      if (id >= lo && id < hi) ++count;
    if (count > best_count) {
      best_count = count;
      best_class = c;
    }
  }
  return best_class;
}

SyntheticCorpus generate_synthetic(const SyntheticCorpusSpec& spec) {
  validate(spec);
  SyntheticCorpus corpus;
  for (size_t c = 0; c < spec.num_classes; ++c)
    for (size_t i = 0; i < spec.signal_tokens_per_class; ++i)
      corpus.vocab.add(signal_token(c, i));
  const size_t filler_base = signal_base(spec, spec.num_classes);
  for (size_t id = filler_base; id < spec.vocab_size; ++id)
    corpus.vocab.add("wrd" + std::to_string(id - filler_base));

  Rng rng(spec.seed);
  corpus.train = make_split(spec, spec.train_size, "train", rng);
  corpus.validation = make_split(spec, spec.val_size, "validation", rng);
  corpus.test = make_split(spec, spec.test_size, "test", rng);

  // Surface forms mirror the ids so attack engines can edit tokens.
  for (Dataset* d : {&corpus.train, &corpus.validation, &corpus.test})
    for (Example& ex : d->examples) {
      ex.tokens.reserve(ex.ids.size());
      for (size_t id : ex.ids) ex.tokens.push_back(corpus.vocab.token(id));
    }
  return corpus;
}

}  // namespace shield
