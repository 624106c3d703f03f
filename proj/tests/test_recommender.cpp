#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>

#include "diger/gradcheck.hpp"
#include "diger/optimizer.hpp"
#include "diger/recommender.hpp"
#include "doctest.h"

using namespace diger;

namespace {

SemanticId sid_of(std::vector<int> codes, int conflict = 0) {
  SemanticId s;
  s.codes = std::move(codes);
  s.conflict = conflict;
  return s;
}

RecConfig toy_cfg(int k, int m, int cap = 4) {
  RecConfig cfg;
  cfg.enc_layers = 1;
  cfg.dec_layers = 1;
  cfg.hidden = 32;
  cfg.heads = 4;
  cfg.max_history = 4;
  cfg.k = k;
  cfg.m = m;
  cfg.conflict_cap = cap;
  return cfg;
}

void zero_output_heads(SeqRecModel& model) {
  for (auto& [name, p] : model.params())
    if (name.rfind("out_", 0) == 0) std::fill(p.values().begin(), p.values().end(), 0.0);
}

double nll_of(const SeqRecModel& model, const SidSequence& input, const SemanticId& target) {
  Tape t(false);
  return model.forward_nll(t, input, target, nullptr).value();
}

}  // namespace

TEST_CASE("vocab layout and build_input token arithmetic") {
  VocabLayout layout{5, 3, 4};
  CHECK(layout.total() == 19);
  CHECK(layout.token(1, 1) == 1);
  CHECK(layout.token(2, 1) == 6);
  CHECK(layout.token(3, 5) == 15);
  CHECK(layout.conflict_token(0) == 15 + 0);
  CHECK_THROWS_AS(layout.token(1, 6), std::invalid_argument);
  CHECK_THROWS_AS(layout.token(4, 1), std::invalid_argument);
  CHECK_THROWS_AS(layout.conflict_token(4), std::invalid_argument);

  std::vector<SemanticId> history = {sid_of({1, 1, 1}, 0), sid_of({2, 3, 4}, 1)};
  SidSequence seq = build_input(history, layout, 8);
  CHECK(seq.tokens.size() == 8);  // 2 items x (m + 1)
  CHECK(seq.boundaries == std::vector<int>{0, 4});
  CHECK(seq.tokens[0] == layout.offset(1) + 1);
  CHECK(seq.tokens[1] == layout.offset(2) + 1);
  CHECK(seq.tokens[2] == layout.offset(3) + 1);
  CHECK(seq.tokens[3] == layout.conflict_offset() + 0);

  // truncation keeps the most recent items
  std::vector<SemanticId> longer;
  for (int i = 1; i <= 6; ++i) longer.push_back(sid_of({i % 5 + 1, 1, 1}, 0));
  SidSequence trunc = build_input(longer, layout, 2);
  CHECK(trunc.tokens.size() == 8);
  CHECK(trunc.tokens[0] == layout.token(1, 6 % 5 + 1 == 2 ? 1 : 1));  // item 5 of 6
  CHECK(trunc.tokens[0] == layout.token(1, longer[4].codes[0]));

  CHECK_THROWS_AS(build_input({sid_of({9, 1, 1}, 0)}, layout, 8), std::invalid_argument);
  CHECK_THROWS_AS(build_input({}, layout, 8), std::invalid_argument);
}

TEST_CASE("config validation") {
  RecConfig bad = toy_cfg(4, 2);
  bad.hidden = 30;  // not divisible by 4 heads
  CHECK_THROWS_AS(SeqRecModel(bad, 1), std::invalid_argument);
  RecConfig bad2 = toy_cfg(4, 2);
  bad2.beam_width = 0;
  CHECK_THROWS_AS(SeqRecModel(bad2, 1), std::invalid_argument);
}

TEST_CASE("uniform logits give the sum of slice-size log NLL") {
  RecConfig cfg = toy_cfg(6, 3, 5);
  SeqRecModel model(cfg, 2);
  zero_output_heads(model);
  SidSequence input = build_input({sid_of({1, 2, 3}, 0)}, model.layout(), cfg.max_history);
  const double nll = nll_of(model, input, sid_of({4, 5, 6}, 2));
  const double want = 3.0 * std::log(6.0) + std::log(5.0);
  CHECK(nll == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("pinning target logits drives the NLL to zero") {
  RecConfig cfg = toy_cfg(4, 2, 3);
  SeqRecModel model(cfg, 3);
  zero_output_heads(model);
  const SemanticId target = sid_of({2, 3}, 1);
  for (auto& [name, p] : model.params()) {
    if (name == "out_b0") p.values()[1] = 50.0;  // code 2 -> local index 1
    if (name == "out_b1") p.values()[2] = 50.0;
    if (name == "out_b2") p.values()[1] = 50.0;
  }
  SidSequence input = build_input({sid_of({1, 1}, 0)}, model.layout(), cfg.max_history);
  CHECK(nll_of(model, input, target) < 1e-10);
}

TEST_CASE("per-position predicted distributions sum to one over their slices") {
  RecConfig cfg = toy_cfg(5, 2, 3);
  SeqRecModel model(cfg, 4);
  SidSequence input = build_input({sid_of({2, 4}, 0), sid_of({5, 1}, 1)}, model.layout(), cfg.max_history);
  Tape t(false);
  Tensor enc = model.encode_input(t, input, nullptr);
  std::vector<int> dec_tokens = {model.layout().bos(), model.layout().token(1, 3), model.layout().token(2, 2)};
  std::vector<Tensor> logits = model.decode_positions(t, enc, dec_tokens, nullptr);
  CHECK(logits.size() == 3);
  CHECK(logits[0].numel() == 5);
  CHECK(logits[2].numel() == 3);  // conflict slice
  for (const Tensor& lg : logits) {
    Tensor p = softmax(t, lg);
    double acc = 0.0;
    for (double x : p.values()) acc += x;
    CHECK(std::abs(acc - 1.0) <= 1e-9);
  }
}

TEST_CASE("forward_nll is deterministic across runs") {
  RecConfig cfg = toy_cfg(4, 3, 4);
  SeqRecModel model(cfg, 5);
  SidSequence input = build_input({sid_of({1, 2, 3}, 0), sid_of({4, 3, 2}, 1)}, model.layout(), cfg.max_history);
  const SemanticId target = sid_of({2, 2, 2}, 0);
  const double a = nll_of(model, input, target);
  const double b = nll_of(model, input, target);
  CHECK(a == b);
  CHECK_THROWS_AS(nll_of(model, input, sid_of({9, 2, 2}, 0)), std::invalid_argument);
}

TEST_CASE("full-width beam reproduces exhaustive scoring on a 9-SID toy") {
  RecConfig cfg = toy_cfg(3, 2, 2);
  cfg.beam_width = 9;
  SeqRecModel model(cfg, 6);
  // catalog: one item per (c1, c2), conflict 0
  std::vector<SemanticId> det;
  for (int a = 1; a <= 3; ++a)
    for (int b = 1; b <= 3; ++b) det.push_back(sid_of({a, b}, 0));
  SidIndex index = resolve_conflicts(det, cfg.conflict_cap);

  SidSequence input = build_input({sid_of({1, 2}, 0), sid_of({3, 1}, 0)}, model.layout(), cfg.max_history);
  RankedCandidates beam = model.generate(input, 9, &index);
  CHECK(beam.size() == 9);

  struct Scored {
    SemanticId sid;
    double nll;
  };
  std::vector<Scored> oracle;
  for (const auto& s : det) oracle.push_back({s, nll_of(model, input, s)});
  std::stable_sort(oracle.begin(), oracle.end(), [](const Scored& x, const Scored& y) {
    if (x.nll != y.nll) return x.nll < y.nll;
    if (x.sid.codes != y.sid.codes) return x.sid.codes < y.sid.codes;
    return x.sid.conflict < y.sid.conflict;
  });
  for (std::size_t i = 0; i < 9; ++i) {
    CHECK(beam[i].sid == oracle[i].sid);
    CHECK(beam[i].logp == -oracle[i].nll);  // same computation path, exact
  }
  // log-probabilities are non-increasing
  for (std::size_t i = 1; i < beam.size(); ++i) CHECK(beam[i - 1].logp >= beam[i].logp);
}

TEST_CASE("one-hot logits produce the single argmax path") {
  RecConfig cfg = toy_cfg(4, 2, 3);
  SeqRecModel model(cfg, 7);
  zero_output_heads(model);
  for (auto& [name, p] : model.params()) {
    if (name == "out_b0") p.values()[2] = 60.0;  // code 3
    if (name == "out_b1") p.values()[0] = 60.0;  // code 1
    if (name == "out_b2") p.values()[1] = 60.0;  // conflict 1
  }
  SidSequence input = build_input({sid_of({1, 1}, 0)}, model.layout(), cfg.max_history);
  RankedCandidates out = model.generate(input, 1, nullptr);
  REQUIRE(out.size() == 1);
  CHECK(out[0].sid == sid_of({3, 1}, 1));
  CHECK(out[0].logp > -1e-10);
}

TEST_CASE("constrained decoding never emits an unassigned SID") {
  RecConfig cfg = toy_cfg(4, 2, 3);
  cfg.beam_width = 16;
  SeqRecModel model(cfg, 8);
  std::vector<SemanticId> det = {sid_of({1, 2}, 0), sid_of({3, 4}, 0), sid_of({1, 4}, 0)};
  SidIndex index = resolve_conflicts(det, cfg.conflict_cap);
  SidSequence input = build_input({sid_of({1, 2}, 0)}, model.layout(), cfg.max_history);
  RankedCandidates out = model.generate(input, 16, &index);
  CHECK(out.size() == 3);
  for (const auto& c : out) CHECK(index.sid_to_item(c.sid) >= 0);
}

TEST_CASE("sid_to_item round-trips, rebuild included") {
  std::vector<SemanticId> det = {sid_of({1, 2}, 0), sid_of({1, 2}, 0), sid_of({3, 3}, 0)};
  SidIndex index = resolve_conflicts(det, 4);
  for (int v = 0; v < 3; ++v) CHECK(index.sid_to_item(index.item_to_sid[static_cast<std::size_t>(v)]) == v);
  CHECK(index.sid_to_item(sid_of({2, 2}, 0)) == -1);

  // tokenizer drift: codes change, index rebuilt, round-trip still holds
  det[0].codes = {4, 4};
  SidIndex rebuilt = resolve_conflicts(det, 4);
  for (int v = 0; v < 3; ++v) CHECK(rebuilt.sid_to_item(rebuilt.item_to_sid[static_cast<std::size_t>(v)]) == v);
  CHECK(rebuilt.item_to_sid[1].conflict == 0);  // group of one again
}

TEST_CASE("coupled soft path gradients reach the codebook, checked by finite differences") {
  TokenizerConfig tk;
  tk.input_dim = 4;
  tk.d = 4;
  tk.k = 4;
  tk.m = 2;
  tk.tau = 2.0;
  RqTokenizer tok(tk, 9);
  for (auto& [name, p] : tok.params()) {
    if (name == "enc_w0") {
      std::fill(p.values().begin(), p.values().end(), 0.0);
      for (int i = 0; i < 4; ++i) p.values()[static_cast<std::size_t>(i) * 4 + i] = 1.0;
    } else if (name == "enc_b0") {
      std::fill(p.values().begin(), p.values().end(), 0.0);
    }
  }

  RecConfig cfg = toy_cfg(4, 2, 3);
  SeqRecModel model(cfg, 10);
  NoiseContext off;
  RngStream rng(0);
  const std::vector<double> content = {0.4, -0.2, 0.1, 0.3};
  const std::vector<double> history_content = {-0.5, 0.3, 0.2, -0.1};

  // Level 1 sits on a separated ladder so its straight-through surrogate is
  // numerically exact; level 2 keeps moderate gaps so its softmax Jacobians
  // are live. With soft-value coupling the NLL forward equals the surrogate
  // the training backward follows, so finite differences apply directly.
  Tensor cb1 = tok.codebook(1);
  {
    RngStream jitter(55);
    uint64_t c = 0;
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j)
        cb1.values()[static_cast<std::size_t>(i) * 4 + j] = 6.0 * (i + 1) + 0.4 * (2.0 * jitter.uniform(c++) - 1.0);
  }
  const auto loss_fn = [&](Tape& t) {
    Tensor r_hist = tok.encode(t, Tensor::from({4}, history_content));
    Quantization q_hist = tok.quantize(t, r_hist, off, rng);
    Tensor r_tgt = tok.encode(t, Tensor::from({4}, content));
    Quantization q_tgt = tok.quantize(t, r_tgt, off, rng);
    Coupling coupling;
    coupling.input_items = {&q_hist};
    coupling.target = &q_tgt;
    coupling.soft_value = true;
    SemanticId hist_sid = q_hist.sid;
    SemanticId tgt_sid = q_tgt.sid;
    SidSequence input = build_input({hist_sid}, model.layout(), cfg.max_history);
    return model.forward_nll(t, input, tgt_sid, &coupling);
  };

  for (int level = 1; level <= 2; ++level) {
    Tensor cb = tok.codebook(level);
    for (auto& [name, p] : tok.params()) p.zero_grad();
    for (auto& [name, p] : model.params()) p.zero_grad();
    Tape t;
    Tensor loss = loss_fn(t);
    t.backward(loss);
    const std::vector<double> analytic = cb.grad();
    double max_abs = 0.0;
    for (double g : analytic) max_abs = std::max(max_abs, std::abs(g));
    CHECK(max_abs > 1e-10);  // the coupled path genuinely reaches the codebook

    const std::vector<double> backup = cb.values();
    double worst = 0.0;
    for (std::size_t i = 0; i < backup.size(); ++i) {
      const double h = 1e-5;
      cb.values()[i] = backup[i] + h;
      Tape fa(false);
      const double up = loss_fn(fa).value();
      cb.values()[i] = backup[i] - h;
      Tape fb(false);
      const double dn = loss_fn(fb).value();
      cb.values()[i] = backup[i];
      const double central = (up - dn) / (2 * h);
      worst = std::max(worst, std::abs(analytic[i] - central) / (std::abs(analytic[i]) + std::abs(central) + 1e-12));
    }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("model memorizes a deterministic 8-item toy under budget") {
  const int n_items = 8;
  RecConfig cfg = toy_cfg(8, 2, 2);
  cfg.max_history = 6;
  SeqRecModel model(cfg, 11);

  std::vector<SemanticId> item_sids;
  for (int i = 0; i < n_items; ++i) item_sids.push_back(sid_of({i + 1, (i * 3) % 8 + 1}, 0));
  const auto next_item = [](int i) { return (i * 5 + 3) % 8; };

  struct Pair {
    std::vector<SemanticId> prefix;
    SemanticId target;
  };
  std::vector<Pair> pairs;
  for (int u = 0; u < 50; ++u) {
    int cur = u % n_items;
    std::vector<int> seqi = {cur};
    for (int t = 1; t < 6; ++t) {
      cur = next_item(cur);
      seqi.push_back(cur);
    }
    for (std::size_t t = 1; t < seqi.size(); ++t) {
      Pair p;
      for (std::size_t q = 0; q < t; ++q) p.prefix.push_back(item_sids[static_cast<std::size_t>(seqi[q])]);
      p.target = item_sids[static_cast<std::size_t>(seqi[t])];
      pairs.push_back(std::move(p));
    }
  }

  AdamW opt(3e-3, 0.0);
  std::vector<Tensor> ps;
  for (auto& [n, p] : model.params()) ps.push_back(p);
  opt.attach(ps);

  double per_token = 1e9;
  const int budget_epochs = 60;
  for (int epoch = 0; epoch < budget_epochs && per_token >= 0.1; ++epoch) {
    double total = 0.0;
    int in_batch = 0;
    opt.zero_grad();
    for (const auto& pair : pairs) {
      Tape t;
      SidSequence input = build_input(pair.prefix, model.layout(), cfg.max_history);
      Tensor loss = model.forward_nll(t, input, pair.target, nullptr);
      t.backward(loss);
      total += loss.value();
      if (++in_batch == 32) {
        opt.step();
        opt.zero_grad();
        in_batch = 0;
      }
    }
    if (in_batch) {
      opt.step();
      opt.zero_grad();
    }
    per_token = total / (static_cast<double>(pairs.size()) * (cfg.m + 1));
  }
  CHECK(per_token < 0.1);
}
