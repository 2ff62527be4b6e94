#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "shield/base_model.hpp"
#include "shield/patch.hpp"
#include "shield/rng.hpp"
#include "shield/tensor.hpp"
#include "shield/text.hpp"

namespace shield {

// Query-metered access to a classifier. The attacker only ever sees the
// probability vector; every classify call costs exactly one query and
// calls beyond the budget are refused. Engines reserve queries so the
// final verification can never be starved by the search.
class VictimHandle {
public:
  using ClassifyFn =
      std::function<std::vector<double>(const std::vector<std::string>&)>;

  VictimHandle(ClassifyFn classify, size_t budget);

  std::vector<double> classify(const std::vector<std::string>& tokens);

  size_t queries_used() const { return used_; }
  size_t budget() const { return budget_; }
  size_t remaining() const { return budget_ - used_; }
  // Queries still available to the search, after the reservation.
  size_t search_remaining() const {
    const size_t held = used_ + reserved_;
    return held >= budget_ ? 0 : budget_ - held;
  }
  void reserve(size_t n) { reserved_ = n; }
  void release() { reserved_ = 0; }

private:
  ClassifyFn classify_;
  size_t budget_;
  size_t used_ = 0;
  size_t reserved_ = 0;
};

// Classify callbacks over the models in this repo. Tokens are mapped
// through the base vocabulary (OOV -> unk) with the standard truncation.
VictimHandle::ClassifyFn victim_from_base(const BaseModel& model);
VictimHandle::ClassifyFn victim_from_ensemble(const EnsembleBaseline& ensemble);
// The shield victim owns one RNG stream for fresh-noise draws.
VictimHandle::ClassifyFn victim_from_shield(const ShieldModel& model, uint64_t seed);

enum class AttackEngine { GreedyChar, GreedyWord, GeneticWord };

std::string engine_name(AttackEngine engine);
AttackEngine engine_from_name(const std::string& name);

struct AttackConfig {
  AttackEngine engine = AttackEngine::GreedyWord;
  size_t budget = 2000;  // queries per example, final verification included
  // word engines
  size_t word_k = 8;
  double min_similarity = 0.5;
  double max_perturb_fraction = 0.3;
  // char engine
  size_t min_token_length = 3;
  // genetic engine
  size_t population = 20;
  size_t elitism = 2;
  double mutation_rate = 0.3;
  // success judged by 5-query majority instead of a single fresh pass
  bool majority_verification = false;
  uint64_t seed = 1;
};

void validate_attack_config(const AttackConfig& config);

struct AttackResult {
  std::vector<std::string> original;
  std::vector<std::string> perturbed;
  bool success = false;
  size_t queries = 0;
  // clean score first, then the score after each accepted step
  // (greedy) or the best fitness per generation (genetic)
  std::vector<double> trace;
  std::string error;  // set when the session aborted; result is then a no-op
};

// 1 - P(gold). One query.
double attack_score(VictimHandle& victim, const std::vector<std::string>& tokens,
                    size_t gold);

// Leave-one-out ranking: each position is masked by the unknown token in
// turn and positions are ordered by descending score increase, leftmost
// first on ties. Consumes len+1 queries; on exhaustion returns the order
// of the prefix scored so far.
std::vector<size_t> importance_ranking(VictimHandle& victim,
                                       const std::vector<std::string>& tokens,
                                       size_t gold);

// Top-k vocabulary neighbors of a token by cosine similarity over an
// embedding snapshot, excluding the token itself and the reserved ids,
// filtered by min_sim. Ties broken by lower id.
std::vector<size_t> word_candidates(const Tensor& embedding, size_t token_id,
                                    size_t k, double min_sim);

// All word_candidates lists precomputed once; safe to share across
// attack workers.
class CandidateCache {
public:
  CandidateCache(const Tensor& embedding, size_t k, double min_sim);
  const std::vector<size_t>& get(size_t token_id) const;

private:
  std::vector<std::vector<size_t>> lists_;
};

// Single-edit variants of one token: adjacent swaps, keyboard-neighbor
// and look-alike-digit substitutions, deletions, and one deterministic
// letter insertion per position. Tokens shorter than min_len yield none.
std::vector<std::string> char_transforms(const std::string& token,
                                         size_t min_len = 3);

// Attacker-side surrogate data shared by the word engines.
struct AttackContext {
  const Vocabulary* vocab = nullptr;
  std::shared_ptr<const CandidateCache> candidates;
};

AttackResult greedy_attack(VictimHandle& victim, const std::vector<std::string>& tokens,
                           size_t gold, const AttackConfig& config,
                           const AttackContext& ctx);

AttackResult genetic_attack(VictimHandle& victim, const std::vector<std::string>& tokens,
                            size_t gold, const AttackConfig& config,
                            const AttackContext& ctx, Rng& rng);

// Dispatch on config.engine.
AttackResult attack_example(VictimHandle& victim, const std::vector<std::string>& tokens,
                            size_t gold, const AttackConfig& config,
                            const AttackContext& ctx, Rng& rng);

// One session per example over worker threads. Each example gets its own
// victim from the factory and an RNG stream derived from (config.seed,
// example index); results are slot-stable regardless of worker count.
// Per-example failures are recorded in AttackResult::error, not thrown.
using VictimFactory = std::function<VictimHandle(size_t example_index)>;

std::vector<AttackResult> run_attack(const VictimFactory& factory, const Dataset& data,
                                     const AttackConfig& config,
                                     const AttackContext& ctx, size_t workers);

}  // namespace shield
