// Microbenchmarks over the hot paths: reverse-mode gradients, victim
// forward passes, candidate precomputation, and whole attack sessions.
// Models are initialized but untrained; the arithmetic cost is identical.

#include <benchmark/benchmark.h>

#include <string>
#include <vector>

#include "shield/attack.hpp"
#include "shield/base_model.hpp"
#include "shield/patch.hpp"
#include "shield/rng.hpp"
#include "shield/tape.hpp"
#include "shield/tensor.hpp"
#include "shield/text.hpp"

using namespace shield;

namespace {

// Desk-scale world shared by all benchmarks, built once.
struct World {
  Vocabulary vocab;
  BaseModel base;
  ShieldModel shield;
  std::vector<size_t> ids;
  std::vector<std::string> tokens;
  size_t gold = 0;
  AttackContext ctx;

  World() {
    for (size_t i = 0; i < 298; ++i) vocab.add("w" + std::to_string(i));
    base = init_base_model(vocab, 2, EncoderKind::MeanPool, 64, 32, 1);
    base.frozen = true;
    ShieldConfig sc;
    sc.hidden = 32;
    shield = patch(base, sc);
    discretize(shield);
    for (size_t i = 0; i < 12; ++i) {
      ids.push_back(2 + i * 7 % (vocab.size() - 2));
      tokens.push_back(vocab.token(ids.back()));
    }
    std::vector<double> p = victim_from_base(base)(tokens);
    for (size_t m = 1; m < p.size(); ++m)
      if (p[m] > p[gold]) gold = m;
    ctx.vocab = &vocab;
    ctx.candidates = std::make_shared<CandidateCache>(base.embedding, 8, 0.5);
  }
};

const World& world() {
  static World w;
  return w;
}

Tensor random_tensor(std::vector<size_t> shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values) v = rng.uniform(-1.0, 1.0);
  return t;
}

void BM_TapeForwardBackward(benchmark::State& state) {
  Rng rng(3);
  const Tensor input = random_tensor({32, 64}, rng);
  const Tensor w1 = random_tensor({64, 64}, rng);
  const Tensor b1 = random_tensor({64}, rng);
  const Tensor w2 = random_tensor({64, 2}, rng);
  const Tensor b2 = random_tensor({2}, rng);
  std::vector<size_t> labels(32);
  for (size_t i = 0; i < labels.size(); ++i) labels[i] = i % 2;
  for (auto _ : state) {
    Tape tape;
    Var x = tape.constant(input);
    Var vw1 = tape.leaf(w1, true);
    Var vb1 = tape.leaf(b1, true);
    Var vw2 = tape.leaf(w2, true);
    Var vb2 = tape.leaf(b2, true);
    Var h = tape.relu(tape.add_rowvec(tape.matmul(x, vw1), vb1));
    Var logits = tape.add_rowvec(tape.matmul(h, vw2), vb2);
    Var loss = tape.nll(logits, labels);
    benchmark::DoNotOptimize(tape.gradient(loss, {vw1, vb1, vw2, vb2}));
  }
}
BENCHMARK(BM_TapeForwardBackward);

void BM_BaseForward(benchmark::State& state) {
  const World& w = world();
  for (auto _ : state) benchmark::DoNotOptimize(forward_base(w.base, w.ids));
}
BENCHMARK(BM_BaseForward);

void BM_ShieldForward(benchmark::State& state) {
  const World& w = world();
  Rng rng(17);
  for (auto _ : state) benchmark::DoNotOptimize(forward_shield(w.shield, w.ids, rng));
}
BENCHMARK(BM_ShieldForward);

void BM_CandidateCacheBuild(benchmark::State& state) {
  const World& w = world();
  for (auto _ : state)
    benchmark::DoNotOptimize(CandidateCache(w.base.embedding, 8, 0.5));
}
BENCHMARK(BM_CandidateCacheBuild);

void BM_GreedyWordSession(benchmark::State& state) {
  const World& w = world();
  AttackConfig cfg;
  cfg.engine = AttackEngine::GreedyWord;
  cfg.budget = 300;
  for (auto _ : state) {
    VictimHandle victim(victim_from_base(w.base), cfg.budget);
    benchmark::DoNotOptimize(greedy_attack(victim, w.tokens, w.gold, cfg, w.ctx));
  }
}
BENCHMARK(BM_GreedyWordSession);

void BM_GreedyCharSession(benchmark::State& state) {
  const World& w = world();
  AttackConfig cfg;
  cfg.engine = AttackEngine::GreedyChar;
  cfg.budget = 300;
  for (auto _ : state) {
    VictimHandle victim(victim_from_base(w.base), cfg.budget);
    benchmark::DoNotOptimize(greedy_attack(victim, w.tokens, w.gold, cfg, w.ctx));
  }
}
BENCHMARK(BM_GreedyCharSession);

}  // namespace

BENCHMARK_MAIN();
