#include "shield/attack.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <set>
#include <thread>
#include <utility>

#include "shield/errors.hpp"

namespace shield {

namespace {

std::vector<double> softmax_vec(const Tensor& logits) {
  const size_t n = logits.values.size();
  if (n == 0) throw ShapeError("softmax: empty logits");
  double mx = logits.values[0];
  for (double v : logits.values) mx = std::max(mx, v);
  std::vector<double> p(n);
  double z = 0.0;
  for (size_t i = 0; i < n; ++i) {
    p[i] = std::exp(logits.values[i] - mx);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

size_t argmax_of(const std::vector<double>& p) {
  size_t best = 0;
  for (size_t i = 1; i < p.size(); ++i)
    if (p[i] > p[best]) best = i;
  return best;
}

std::vector<size_t> tokens_to_ids(const Vocabulary& vocab,
                                  const std::vector<std::string>& tokens) {
  const size_t n = std::min(tokens.size(), kMaxSequenceLength);
  std::vector<size_t> ids(n);
  for (size_t i = 0; i < n; ++i) ids[i] = vocab.id(tokens[i]);
  return ids;
}

void check_gold(const std::vector<double>& probs, size_t gold) {
  if (gold >= probs.size())
    throw ConfigError("attack: gold label " + std::to_string(gold) +
                      " out of range for " + std::to_string(probs.size()) +
                      " classes");
}

size_t perturb_cap(size_t len, double fraction) {
  const size_t cap = static_cast<size_t>(std::ceil(fraction * static_cast<double>(len)));
  return std::max<size_t>(1, cap);
}

// Masking queries shared by the public ranking op and the engines; the
// baseline query is assumed already spent by the caller.
std::vector<size_t> ranked_by_masking(VictimHandle& victim,
                                      const std::vector<std::string>& tokens,
                                      size_t gold) {
  std::vector<std::pair<double, size_t>> scored;
  std::vector<std::string> tmp = tokens;
  for (size_t i = 0; i < tokens.size(); ++i) {
    tmp[i] = "<unk>";
    double s;
    try {
      s = attack_score(victim, tmp, gold);
    } catch (const BudgetExhausted&) {
      break;
    }
    tmp[i] = tokens[i];
    scored.emplace_back(s, i);
  }
  std::stable_sort(scored.begin(), scored.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<size_t> order(scored.size());
  for (size_t i = 0; i < scored.size(); ++i) order[i] = scored[i].second;
  return order;
}

// Keyboard neighbors for substitutions; rows follow a standard layout.
const char* adjacent_letters(char c) {
  switch (c) {
    case 'a': return "qwsz";
    case 'b': return "vghn";
    case 'c': return "xdfv";
    case 'd': return "serfcx";
    case 'e': return "wsdr";
    case 'f': return "drtgvc";
    case 'g': return "ftyhbv";
    case 'h': return "gyujnb";
    case 'i': return "ujko";
    case 'j': return "huikmn";
    case 'k': return "jiolm";
    case 'l': return "kop";
    case 'm': return "njk";
    case 'n': return "bhjm";
    case 'o': return "iklp";
    case 'p': return "ol";
    case 'q': return "wa";
    case 'r': return "edft";
    case 's': return "awedxz";
    case 't': return "rfgy";
    case 'u': return "yhji";
    case 'v': return "cfgb";
    case 'w': return "qase";
    case 'x': return "zsdc";
    case 'y': return "tghu";
    case 'z': return "asx";
    default: return "";
  }
}

char digit_lookalike(char c) {
  switch (c) {
    case 'o': return '0';
    case 'l': return '1';
    case 'e': return '3';
    case 'a': return '4';
    case 'i': return '1';
    case 's': return '5';
    default: return 0;
  }
}

// Deterministic stand-in for "a random lowercase letter": hashed from the
// token and the insertion point so variant sets are reproducible.
char insertion_letter(const std::string& token, size_t pos) {
  const uint64_t h = splitmix64(fnv1a64(token.data(), token.size()) ^
                                (0x9e3779b97f4a7c15ull * (pos + 1)));
  return static_cast<char>('a' + h % 26);
}

void finish_with_verification(VictimHandle& victim, AttackResult& res,
                              const std::vector<std::string>& original,
                              std::vector<std::string> current, size_t gold,
                              const AttackConfig& config) {
  victim.release();
  if (current == original) {
    // Nothing was perturbed; the clean query already answered gold.
    res.perturbed = std::move(current);
    res.success = false;
    res.queries = victim.queries_used();
    return;
  }
  const size_t votes = config.majority_verification ? 5 : 1;
  size_t flips = 0;
  for (size_t v = 0; v < votes; ++v) {
    std::vector<double> p = victim.classify(current);
    if (argmax_of(p) != gold) ++flips;
  }
  res.success = flips * 2 > votes;
  res.perturbed = std::move(current);
  res.queries = victim.queries_used();
}

struct Indiv {
  std::vector<std::string> tokens;
  double fitness = 0.0;
};

const Indiv& select_parent(const std::vector<Indiv>& pop, Rng& rng) {
  double total = 0.0;
  for (const Indiv& ind : pop) total += ind.fitness;
  if (total <= 0.0) return pop[rng.uniform_index(pop.size())];
  const double r = rng.uniform() * total;
  double acc = 0.0;
  for (const Indiv& ind : pop) {
    acc += ind.fitness;
    if (r < acc) return ind;
  }
  return pop.back();
}

}  // namespace

VictimHandle::VictimHandle(ClassifyFn classify, size_t budget)
    : classify_(std::move(classify)), budget_(budget) {
  if (!classify_) throw ConfigError("victim: classify callback is empty");
  if (budget_ == 0) throw ConfigError("victim: budget must be at least 1");
}

std::vector<double> VictimHandle::classify(const std::vector<std::string>& tokens) {
  if (used_ >= budget_) throw BudgetExhausted("victim: query budget exhausted");
  if (used_ + reserved_ >= budget_)
    throw BudgetExhausted("victim: remaining queries are reserved for verification");
  std::vector<double> p = classify_(tokens);
  ++used_;
  return p;
}

VictimHandle::ClassifyFn victim_from_base(const BaseModel& model) {
  const BaseModel* m = &model;
  return [m](const std::vector<std::string>& tokens) {
    return softmax_vec(forward_base(*m, tokens_to_ids(m->vocab, tokens)).logits);
  };
}

VictimHandle::ClassifyFn victim_from_ensemble(const EnsembleBaseline& ensemble) {
  const EnsembleBaseline* e = &ensemble;
  if (ensemble.members.empty())
    throw ConfigError("victim: ensemble has no members");
  const Vocabulary* vocab = &ensemble.members.front().vocab;
  return [e, vocab](const std::vector<std::string>& tokens) {
    return softmax_vec(e->average_logits(tokens_to_ids(*vocab, tokens)));
  };
}

VictimHandle::ClassifyFn victim_from_shield(const ShieldModel& model, uint64_t seed) {
  const ShieldModel* m = &model;
  auto rng = std::make_shared<Rng>(seed);
  return [m, rng](const std::vector<std::string>& tokens) {
    ShieldForward f = forward_shield(*m, tokens_to_ids(m->base->vocab, tokens), *rng);
    return softmax_vec(f.logits);
  };
}

std::string engine_name(AttackEngine engine) {
  switch (engine) {
    case AttackEngine::GreedyChar: return "greedy-char";
    case AttackEngine::GreedyWord: return "greedy-word";
    case AttackEngine::GeneticWord: return "genetic-word";
  }
  throw ConfigError("attack: unknown engine value");
}

AttackEngine engine_from_name(const std::string& name) {
  if (name == "greedy-char") return AttackEngine::GreedyChar;
  if (name == "greedy-word") return AttackEngine::GreedyWord;
  if (name == "genetic-word") return AttackEngine::GeneticWord;
  throw ConfigError("attack: unknown engine '" + name +
                    "' (expected greedy-char, greedy-word, or genetic-word)");
}

void validate_attack_config(const AttackConfig& config) {
  if (config.budget < 1)
    throw ConfigError("attack: budget must be at least 1");
  if (!(config.max_perturb_fraction > 0.0) || config.max_perturb_fraction > 1.0)
    throw ConfigError("attack: max_perturb_fraction must be in (0, 1]");
  if (!(config.min_similarity >= -1.0) || !(config.min_similarity <= 1.0))
    throw ConfigError("attack: min_similarity must be in [-1, 1]");
  if (config.population < 1)
    throw ConfigError("attack: population must be at least 1");
  if (config.elitism > config.population)
    throw ConfigError("attack: elitism cannot exceed the population");
  if (!(config.mutation_rate >= 0.0) || !(config.mutation_rate <= 1.0))
    throw ConfigError("attack: mutation_rate must be in [0, 1]");
}

double attack_score(VictimHandle& victim, const std::vector<std::string>& tokens,
                    size_t gold) {
  std::vector<double> p = victim.classify(tokens);
  check_gold(p, gold);
  return 1.0 - p[gold];
}

std::vector<size_t> importance_ranking(VictimHandle& victim,
                                       const std::vector<std::string>& tokens,
                                       size_t gold) {
  try {
    attack_score(victim, tokens, gold);  // baseline query
  } catch (const BudgetExhausted&) {
    return {};
  }
  return ranked_by_masking(victim, tokens, gold);
}

std::vector<size_t> word_candidates(const Tensor& embedding, size_t token_id,
                                    size_t k, double min_sim) {
  if (embedding.shape.size() != 2)
    throw ShapeError("word_candidates: embedding must be 2-d");
  const size_t v = embedding.shape[0];
  const size_t d = embedding.shape[1];
  if (token_id >= v)
    throw ConfigError("word_candidates: token id out of range");
  if (k == 0) return {};
  std::vector<double> norms(v, 0.0);
  for (size_t i = 0; i < v; ++i) {
    double acc = 0.0;
    const double* row = embedding.values.data() + i * d;
    for (size_t c = 0; c < d; ++c) acc += row[c] * row[c];
    norms[i] = std::sqrt(acc);
  }
  if (norms[token_id] == 0.0) return {};
  std::vector<std::pair<double, size_t>> sims;
  const double* q = embedding.values.data() + token_id * d;
  for (size_t j = 0; j < v; ++j) {
    if (j == token_id || j == Vocabulary::kPad || j == Vocabulary::kUnk) continue;
    if (norms[j] == 0.0) continue;
    const double* row = embedding.values.data() + j * d;
    double dot = 0.0;
    for (size_t c = 0; c < d; ++c) dot += q[c] * row[c];
    const double cos = dot / (norms[token_id] * norms[j]);
    if (cos >= min_sim) sims.emplace_back(cos, j);
  }
  std::sort(sims.begin(), sims.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  if (sims.size() > k) sims.resize(k);
  std::vector<size_t> out(sims.size());
  for (size_t i = 0; i < sims.size(); ++i) out[i] = sims[i].second;
  return out;
}

CandidateCache::CandidateCache(const Tensor& embedding, size_t k, double min_sim) {
  if (embedding.shape.size() != 2)
    throw ShapeError("candidate cache: embedding must be 2-d");
  const size_t v = embedding.shape[0];
  lists_.reserve(v);
  for (size_t id = 0; id < v; ++id)
    lists_.push_back(word_candidates(embedding, id, k, min_sim));
}

const std::vector<size_t>& CandidateCache::get(size_t token_id) const {
  static const std::vector<size_t> kEmpty;
  if (token_id >= lists_.size()) return kEmpty;
  return lists_[token_id];
}

std::vector<std::string> char_transforms(const std::string& token, size_t min_len) {
  std::vector<std::string> out;
  if (token.size() < min_len) return out;
  std::set<std::string> seen;
  seen.insert(token);
  auto emit = [&](std::string v) {
    if (seen.insert(v).second) out.push_back(std::move(v));
  };
  // adjacent swaps
  for (size_t i = 0; i + 1 < token.size(); ++i) {
    std::string v = token;
    std::swap(v[i], v[i + 1]);
    emit(std::move(v));
  }
  // keyboard-neighbor and look-alike-digit substitutions
  for (size_t i = 0; i < token.size(); ++i) {
    for (const char* a = adjacent_letters(token[i]); *a; ++a) {
      std::string v = token;
      v[i] = *a;
      emit(std::move(v));
    }
    if (const char d = digit_lookalike(token[i])) {
      std::string v = token;
      v[i] = d;
      emit(std::move(v));
    }
  }
  // single deletions
  for (size_t i = 0; i < token.size(); ++i) {
    std::string v = token;
    v.erase(i, 1);
    emit(std::move(v));
  }
  // one deterministic letter inserted at each gap
  for (size_t i = 0; i <= token.size(); ++i) {
    std::string v = token;
    v.insert(v.begin() + static_cast<std::ptrdiff_t>(i), insertion_letter(token, i));
    emit(std::move(v));
  }
  return out;
}

AttackResult greedy_attack(VictimHandle& victim, const std::vector<std::string>& tokens,
                           size_t gold, const AttackConfig& config,
                           const AttackContext& ctx) {
  validate_attack_config(config);
  if (config.engine == AttackEngine::GeneticWord)
    throw ConfigError("greedy_attack: config selects the genetic engine");
  const bool word = config.engine == AttackEngine::GreedyWord;
  if (word && (ctx.vocab == nullptr || !ctx.candidates))
    throw ConfigError("greedy_attack: word engine needs a vocabulary and candidate cache");

  AttackResult res;
  res.original = tokens;
  res.perturbed = tokens;

  std::vector<double> probs = victim.classify(tokens);
  check_gold(probs, gold);
  double cur = 1.0 - probs[gold];
  res.trace.push_back(cur);
  if (argmax_of(probs) != gold) {
    res.success = true;
    res.queries = victim.queries_used();
    return res;
  }
  victim.reserve(config.majority_verification ? 5 : 1);

  const std::vector<size_t> order = ranked_by_masking(victim, tokens, gold);
  std::vector<std::string> current = tokens;
  const size_t cap =
      word ? perturb_cap(tokens.size(), config.max_perturb_fraction) : tokens.size();
  size_t changed = 0;
  bool exhausted = victim.search_remaining() == 0;
  bool flipped = false;
  for (size_t r = 0; r < order.size() && !exhausted && !flipped && changed < cap; ++r) {
    const size_t pos = order[r];
    std::vector<std::string> cands;
    if (word) {
      for (size_t cid : ctx.candidates->get(ctx.vocab->id(current[pos])))
        cands.push_back(ctx.vocab->token(cid));
    } else {
      cands = char_transforms(current[pos], config.min_token_length);
    }
    double best = cur;
    std::string best_tok;
    for (const std::string& cand : cands) {
      if (victim.search_remaining() == 0) {
        exhausted = true;
        break;
      }
      std::vector<std::string> tmp = current;
      tmp[pos] = cand;
      std::vector<double> p = victim.classify(tmp);
      const double s = 1.0 - p[gold];
      if (argmax_of(p) != gold) {
        current = std::move(tmp);
        cur = s;
        res.trace.push_back(cur);
        ++changed;
        flipped = true;
        break;
      }
      if (s > best) {
        best = s;
        best_tok = cand;
      }
    }
    if (!flipped && best > cur) {
      current[pos] = best_tok;
      cur = best;
      res.trace.push_back(cur);
      ++changed;
    }
  }
  finish_with_verification(victim, res, tokens, std::move(current), gold, config);
  return res;
}

AttackResult genetic_attack(VictimHandle& victim, const std::vector<std::string>& tokens,
                            size_t gold, const AttackConfig& config,
                            const AttackContext& ctx, Rng& rng) {
  validate_attack_config(config);
  if (config.engine != AttackEngine::GeneticWord)
    throw ConfigError("genetic_attack: config selects a greedy engine");
  if (ctx.vocab == nullptr || !ctx.candidates)
    throw ConfigError("genetic_attack: word engine needs a vocabulary and candidate cache");

  AttackResult res;
  res.original = tokens;
  res.perturbed = tokens;

  std::vector<double> probs = victim.classify(tokens);
  check_gold(probs, gold);
  const double clean = 1.0 - probs[gold];
  res.trace.push_back(clean);
  if (argmax_of(probs) != gold) {
    res.success = true;
    res.queries = victim.queries_used();
    return res;
  }
  victim.reserve(config.majority_verification ? 5 : 1);

  std::vector<size_t> subst;
  for (size_t pos = 0; pos < tokens.size(); ++pos)
    if (!ctx.candidates->get(ctx.vocab->id(tokens[pos])).empty()) subst.push_back(pos);
  if (subst.empty()) {
    finish_with_verification(victim, res, tokens, tokens, gold, config);
    return res;
  }
  const size_t cap = perturb_cap(tokens.size(), config.max_perturb_fraction);

  std::vector<std::string> best_tokens = tokens;
  double best_fit = clean;
  bool exhausted = false;

  // Substitutions always draw from the candidates of the original word at
  // a position, so a perturbed position can also be re-rolled or reverted.
  auto mutate_one = [&](std::vector<std::string>& t) {
    const size_t pos = subst[rng.uniform_index(subst.size())];
    const std::vector<size_t>& c = ctx.candidates->get(ctx.vocab->id(tokens[pos]));
    t[pos] = ctx.vocab->token(c[rng.uniform_index(c.size())]);
  };
  auto evaluate = [&](std::vector<std::string> t, std::vector<Indiv>& into) {
    if (victim.search_remaining() == 0) {
      exhausted = true;
      return;
    }
    std::vector<double> p = victim.classify(t);
    const double f = 1.0 - p[gold];
    if (f > best_fit) {
      best_fit = f;
      best_tokens = t;
    }
    into.push_back({std::move(t), f});
  };

  std::vector<Indiv> pop;
  for (size_t i = 0; i < config.population && !exhausted; ++i) {
    std::vector<std::string> t = tokens;
    mutate_one(t);
    evaluate(std::move(t), pop);
  }
  if (pop.empty()) {
    finish_with_verification(victim, res, tokens, std::move(best_tokens), gold, config);
    return res;
  }
  auto gen_best = [&]() {
    double b = pop.front().fitness;
    for (const Indiv& ind : pop) b = std::max(b, ind.fitness);
    return b;
  };
  res.trace.push_back(gen_best());

  while (!exhausted && victim.search_remaining() > 0 &&
         config.population > config.elitism) {
    std::stable_sort(pop.begin(), pop.end(),
                     [](const Indiv& a, const Indiv& b) { return a.fitness > b.fitness; });
    std::vector<Indiv> next(pop.begin(),
                            pop.begin() + static_cast<std::ptrdiff_t>(std::min(
                                              config.elitism, pop.size())));
    while (next.size() < config.population && !exhausted) {
      const Indiv& pa = select_parent(pop, rng);
      const Indiv& pb = select_parent(pop, rng);
      std::vector<std::string> child(tokens.size());
      for (size_t pos = 0; pos < tokens.size(); ++pos)
        child[pos] = rng.uniform() < 0.5 ? pa.tokens[pos] : pb.tokens[pos];
      if (rng.uniform() < config.mutation_rate) mutate_one(child);
      // crossover can stack both parents' edits; revert random positions
      // back to the original until within the perturbation cap
      std::vector<size_t> diff;
      for (size_t pos = 0; pos < tokens.size(); ++pos)
        if (child[pos] != tokens[pos]) diff.push_back(pos);
      while (diff.size() > cap) {
        const size_t pick = rng.uniform_index(diff.size());
        child[diff[pick]] = tokens[diff[pick]];
        diff.erase(diff.begin() + static_cast<std::ptrdiff_t>(pick));
      }
      evaluate(std::move(child), next);
    }
    if (next.size() <= config.elitism) break;  // no child got evaluated
    pop = std::move(next);
    res.trace.push_back(gen_best());
  }
  finish_with_verification(victim, res, tokens, std::move(best_tokens), gold, config);
  return res;
}

AttackResult attack_example(VictimHandle& victim, const std::vector<std::string>& tokens,
                            size_t gold, const AttackConfig& config,
                            const AttackContext& ctx, Rng& rng) {
  if (config.engine == AttackEngine::GeneticWord)
    return genetic_attack(victim, tokens, gold, config, ctx, rng);
  return greedy_attack(victim, tokens, gold, config, ctx);
}

std::vector<AttackResult> run_attack(const VictimFactory& factory, const Dataset& data,
                                     const AttackConfig& config,
                                     const AttackContext& ctx, size_t workers) {
  validate_attack_config(config);
  if (!factory) throw ConfigError("run_attack: victim factory is empty");
  const size_t n = data.size();
  std::vector<AttackResult> results(n);
  if (n == 0) return results;
  std::atomic<size_t> cursor{0};
  auto body = [&]() {
    for (;;) {
      const size_t i = cursor.fetch_add(1);
      if (i >= n) break;
      const Example& ex = data.examples[i];
      Rng rng(splitmix64(config.seed + 0x9e3779b97f4a7c15ull * (i + 1)));
      try {
        VictimHandle victim = factory(i);
        results[i] = attack_example(victim, ex.tokens, ex.label, config, ctx, rng);
      } catch (const std::exception& e) {
        results[i] = AttackResult{};
        results[i].original = ex.tokens;
        results[i].perturbed = ex.tokens;
        results[i].error = e.what();
      }
    }
  };
  const size_t team = std::max<size_t>(1, workers);
  if (team == 1) {
    body();
    return results;
  }
  std::vector<std::thread> threads;
  threads.reserve(team - 1);
  for (size_t t = 0; t + 1 < team; ++t) threads.emplace_back(body);
  body();
  for (std::thread& th : threads) th.join();
  return results;
}

}  // namespace shield
