#pragma once

#include <cstddef>
#include <string>
#include <unordered_map>
#include <vector>

namespace shield {

// Token inventory with two reserved ids. Unseen tokens map to kUnk.
class Vocabulary {
public:
  static constexpr size_t kPad = 0;
  static constexpr size_t kUnk = 1;

  Vocabulary();

  // Registers the token if new; returns its id either way.
  size_t add(const std::string& token);
  // kUnk for tokens never registered.
  size_t id(const std::string& token) const;
  const std::string& token(size_t id) const;
  size_t size() const { return id_to_token_.size(); }
  const std::vector<std::string>& tokens() const { return id_to_token_; }

private:
  std::unordered_map<std::string, size_t> token_to_id_;
  std::vector<std::string> id_to_token_;
};

// Lowercase, whitespace-split, outer punctuation stripped per token.
// Tokens that are all punctuation vanish.
std::vector<std::string> tokenize(const std::string& text);

// One id per distinct token in first-occurrence order across the corpus.
Vocabulary build_vocab(const std::vector<std::string>& texts);

struct Example {
  std::vector<std::string> tokens;  // surface forms, attack engines edit these
  std::vector<size_t> ids;          // filled by numberize()
  size_t label = 0;
};

// Inputs longer than this are truncated when numberized.
inline constexpr size_t kMaxSequenceLength = 64;

struct Dataset {
  std::vector<Example> examples;
  size_t num_classes = 0;
  std::vector<std::string> label_names;  // label id -> original label string
  std::string split;

  size_t size() const { return examples.size(); }
  // Maps every example's tokens to ids (OOV -> kUnk), truncating to
  // kMaxSequenceLength.
  void numberize(const Vocabulary& vocab);
  std::vector<size_t> labels() const;
};

// Comma-delimited with standard quoting, header row required. Labels are
// assigned ids by sorted label-string order. Examples keep file order.
Dataset load_csv(const std::string& path, const std::string& text_column,
                 const std::string& label_column);

// Inverse of load_csv for round-tripping: one row per example, tokens
// joined by single spaces.
void save_csv(const Dataset& data, const std::string& path,
              const std::string& text_column, const std::string& label_column);

}  // namespace shield
