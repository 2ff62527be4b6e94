#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "shield/attack.hpp"
#include "shield/base_model.hpp"
#include "shield/patch.hpp"
#include "shield/synthetic.hpp"
#include "shield/text.hpp"

namespace shield {

// Everything one experiment needs, resolved from defaults, an optional
// JSON config file, and command-line overrides (in that order).
struct ExperimentConfig {
  // Data: when csv_prefix is set, <prefix>-train.csv / <prefix>-val.csv /
  // <prefix>-test.csv are loaded; otherwise the synthetic generator runs.
  std::string csv_prefix;
  std::string text_column = "text";
  std::string label_column = "label";
  SyntheticCorpusSpec synth;

  EncoderKind encoder = EncoderKind::MeanPool;
  size_t embed_dim = 256;
  size_t feature_dim = 64;
  TrainBaseOptions base_train;

  ShieldConfig shield;
  TrainShieldOptions shield_train;

  size_t ensemble_members = 0;  // > 0 adds the deep-ensemble victim

  std::vector<AttackConfig> attacks;  // one entry per engine to run
  std::vector<double> budget_percents = {25.0, 50.0, 75.0, 100.0};
  size_t attack_examples = 0;  // cap on attacked test examples; 0 = all

  std::vector<uint64_t> seeds = {1, 2, 3, 4, 5};
  std::string out_dir = ".";
  size_t workers = 1;
  bool select_best = false;  // also report the best single seed
  bool tau_grid = false;     // patch: search tau over {1.0, 0.1, 0.01, 0.001}
};

// Strict JSON parsing: unknown keys are rejected so config hashes mean
// something. Defaults fill every omitted field.
ExperimentConfig experiment_from_json_text(const std::string& text);
ExperimentConfig load_experiment(const std::string& path);
// Canonical serialization of the fully resolved config (sorted keys);
// the config hash is the FNV-1a digest of this text.
std::string experiment_to_json_text(const ExperimentConfig& config);
uint64_t experiment_hash(const ExperimentConfig& config);

void validate_experiment(const ExperimentConfig& config);

struct LoadedData {
  Vocabulary vocab;
  Dataset train;
  Dataset validation;
  Dataset test;
  size_t num_classes = 0;
};

LoadedData load_data(const ExperimentConfig& config);

// Fraction of all examples that are BOTH predicted correctly on the
// clean input AND not flipped by the attack. Examples the model already
// gets wrong clean can never count, whatever the attacker does.
double accuracy_under_attack(const std::vector<size_t>& clean_predictions,
                             const std::vector<AttackResult>& results,
                             const std::vector<size_t>& gold);

// Subcommand entry points. Each writes its artifacts (checkpoints, CSV
// tables, JSONL attack logs, a JSON report) under config.out_dir and
// returns the report serialized as JSON text. All file writes happen on
// the calling thread; only attack sessions fan out to workers.
std::string cmd_gen_data(const ExperimentConfig& config);
std::string cmd_train_base(const ExperimentConfig& config);
std::string cmd_patch(const ExperimentConfig& config);
std::string cmd_attack(const ExperimentConfig& config);
std::string cmd_budget_curve(const ExperimentConfig& config);
std::string cmd_ablate(const ExperimentConfig& config);
std::string cmd_report(const ExperimentConfig& config);

}  // namespace shield
