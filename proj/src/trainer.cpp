#include "diger/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "diger/optimizer.hpp"
#include "json.hpp"

namespace diger {

using ordered_json = nlohmann::ordered_json;

uint64_t fnv1a(const std::string& bytes) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

// --- config ------------------------------------------------------------------

TrainConfig TrainConfig::from_kv(KvConfig& kv) {
  TrainConfig cfg;
  cfg.variant = parse_variant(kv.get_string("variant", "diger-frqud"));
  cfg.seed = static_cast<uint64_t>(kv.get_i64("seed", 1));
  cfg.epochs = kv.get_int("epochs", 15);
  cfg.patience = kv.get_int("patience", 10);
  cfg.batch_size = kv.get_int("batch_size", 32);
  cfg.rec_lr = kv.get_double("rec_lr", 1e-3);
  cfg.tok_lr = kv.get_double("tok_lr", 1e-4);
  cfg.weight_decay = kv.get_double("weight_decay", 0.05);

  cfg.tokenizer.input_dim = kv.get_int("input_dim", 16);
  cfg.tokenizer.k = kv.get_int("k", 32);
  cfg.tokenizer.m = kv.get_int("m", 3);
  cfg.tokenizer.d = kv.get_int("d", 16);
  cfg.tokenizer.tau = kv.get_double("tau", 2.0);
  cfg.tokenizer.similarity = parse_similarity(kv.get_string("similarity", "neg-sq-euclidean"));
  cfg.tokenizer.encoder_widths = kv.get_int_list("encoder_widths", {32});
  cfg.tokenizer.commit_coef = kv.get_double("commit", 0.25);

  cfg.recommender.enc_layers = kv.get_int("enc_layers", 2);
  cfg.recommender.dec_layers = kv.get_int("dec_layers", 2);
  cfg.recommender.hidden = kv.get_int("hidden", 64);
  cfg.recommender.heads = kv.get_int("heads", 4);
  cfg.recommender.max_history = kv.get_int("max_history", 8);
  cfg.recommender.beam_width = kv.get_int("beam_width", 20);
  cfg.recommender.constrained = kv.get_bool("constrained", true);
  cfg.recommender.soft_targets = kv.get_bool("soft_targets", false);
  cfg.recommender.k = cfg.tokenizer.k;
  cfg.recommender.m = cfg.tokenizer.m;
  cfg.recommender.conflict_cap = kv.get_int("conflict_cap", 64);

  cfg.lambda = kv.get_double("lambda", 1.4);
  cfg.ratio_r = kv.get_double("ratio_r", 1.5);
  cfg.beta = kv.get_double("beta", 0.25);
  cfg.loss_ema_decay = kv.get_double("loss_ema_decay", 0.9);
  cfg.noise_per_epoch = kv.get_string("noise_freshness", "per-step") == "per-epoch";

  cfg.pretrain_epochs = kv.get_int("pretrain_epochs", 30);
  cfg.pretrain_lr = kv.get_double("pretrain_lr", 3e-3);

  cfg.data_path = kv.get_string("data", "");
  cfg.content_path = kv.get_string("content", "");
  cfg.min_interactions = kv.get_int("min_interactions", 5);
  cfg.synth.clusters = kv.get_int("synth_clusters", 8);
  cfg.synth.items = kv.get_int("synth_items", 200);
  cfg.synth.users = kv.get_int("synth_users", 500);
  cfg.synth.len_lo = kv.get_int("synth_len_lo", 5);
  cfg.synth.len_hi = kv.get_int("synth_len_hi", 10);
  cfg.synth.d_in = cfg.tokenizer.input_dim;
  cfg.synth.content_scale = kv.get_double("synth_content_scale", 6.0);
  cfg.synth.content_noise = kv.get_double("synth_content_noise", 0.1);
  cfg.synth.transition_peak = kv.get_double("synth_transition_peak", 0.75);
  cfg.synth.zipf_exponent = kv.get_double("synth_zipf", 1.2);

  cfg.k_list = kv.get_int_list("k_list", {5, 10});
  cfg.out_dir = kv.get_string("out", "");

  const auto leftovers = kv.unconsumed();
  if (!leftovers.empty()) {
    std::string msg = "config: unknown keys:";
    for (const auto& k : leftovers) msg += " " + k;
    throw std::runtime_error(msg);
  }
  if (cfg.epochs < 1 || cfg.patience < 1) throw std::runtime_error("config: epochs and patience must be >= 1");
  if (!(cfg.rec_lr > 0.0) || !(cfg.tok_lr > 0.0)) throw std::runtime_error("config: learning rates must be positive");
  cfg.tokenizer.validate();
  cfg.recommender.validate();
  return cfg;
}

std::string TrainConfig::to_json() const {
  ordered_json j;
  j["variant"] = variant_name(variant);
  j["seed"] = seed;
  j["epochs"] = epochs;
  j["patience"] = patience;
  j["batch_size"] = batch_size;
  j["rec_lr"] = rec_lr;
  j["tok_lr"] = tok_lr;
  j["weight_decay"] = weight_decay;
  j["input_dim"] = tokenizer.input_dim;
  j["k"] = tokenizer.k;
  j["m"] = tokenizer.m;
  j["d"] = tokenizer.d;
  j["tau"] = tokenizer.tau;
  j["similarity"] = similarity_name(tokenizer.similarity);
  j["encoder_widths"] = tokenizer.encoder_widths;
  j["commit"] = tokenizer.commit_coef;
  j["enc_layers"] = recommender.enc_layers;
  j["dec_layers"] = recommender.dec_layers;
  j["hidden"] = recommender.hidden;
  j["heads"] = recommender.heads;
  j["max_history"] = recommender.max_history;
  j["beam_width"] = recommender.beam_width;
  j["constrained"] = recommender.constrained;
  j["soft_targets"] = recommender.soft_targets;
  j["conflict_cap"] = recommender.conflict_cap;
  j["lambda"] = lambda;
  j["ratio_r"] = ratio_r;
  j["beta"] = beta;
  j["loss_ema_decay"] = loss_ema_decay;
  j["noise_freshness"] = noise_per_epoch ? "per-epoch" : "per-step";
  j["pretrain_epochs"] = pretrain_epochs;
  j["pretrain_lr"] = pretrain_lr;
  j["data"] = data_path;
  j["content"] = content_path;
  j["min_interactions"] = min_interactions;
  j["synth_clusters"] = synth.clusters;
  j["synth_items"] = synth.items;
  j["synth_users"] = synth.users;
  j["synth_len_lo"] = synth.len_lo;
  j["synth_len_hi"] = synth.len_hi;
  j["synth_content_scale"] = synth.content_scale;
  j["synth_content_noise"] = synth.content_noise;
  j["synth_transition_peak"] = synth.transition_peak;
  j["synth_zipf"] = synth.zipf_exponent;
  j["k_list"] = k_list;
  return j.dump();
}

// --- dataset -----------------------------------------------------------------

Workbench load_dataset(const TrainConfig& cfg) {
  Workbench bench;
  if (cfg.data_path.empty()) {
    auto [log, content] = synth_generate(cfg.synth, cfg.seed);
    InteractionLog filtered = filter_min_interactions(log, cfg.min_interactions);
    // content rows follow the pre-filter ids; realign through the names
    std::map<std::string, int> row_of;
    for (int v = 0; v < log.num_items(); ++v) row_of[log.item_names[static_cast<std::size_t>(v)]] = v;
    ContentTable aligned;
    aligned.dim = content.dim;
    for (const auto& name : filtered.item_names)
      aligned.rows.push_back(content.rows[static_cast<std::size_t>(row_of.at(name))]);
    bench.log = std::move(filtered);
    bench.content = std::move(aligned);
  } else {
    InteractionLog log = load_interactions(cfg.data_path);
    bench.log = filter_min_interactions(log, cfg.min_interactions);
    if (cfg.content_path.empty()) throw std::runtime_error("config: `content` is required alongside `data`");
    if (cfg.content_path.size() > 4 && cfg.content_path.substr(cfg.content_path.size() - 4) == ".bin")
      bench.content = load_content_binary(cfg.content_path, bench.log);
    else
      bench.content = load_content_csv(cfg.content_path, bench.log);
  }
  if (bench.content.dim != cfg.tokenizer.input_dim)
    throw std::runtime_error("config: input_dim " + std::to_string(cfg.tokenizer.input_dim) +
                             " does not match content width " + std::to_string(bench.content.dim));
  bench.split = leave_one_out_split(bench.log);

  std::ostringstream digest;
  for (std::size_t u = 0; u < bench.split.train_items.size(); ++u) {
    for (int v : bench.split.train_items[u]) digest << v << ',';
    digest << '|' << bench.split.val_target[u] << '|' << bench.split.test_target[u] << ';';
  }
  bench.split_digest = fnv1a(digest.str());
  return bench;
}

// --- pretraining ---------------------------------------------------------------

namespace {

AssignmentSnapshot catalog_snapshot(const RqTokenizer& tok, const ContentTable& content, int epoch) {
  AssignmentSnapshot snap;
  snap.epoch = epoch;
  for (const auto& row : content.rows) snap.deterministic.push_back(tok.assign_deterministic(row));
  snap.sampled = snap.deterministic;
  return snap;
}

std::vector<Tensor> param_tensors(std::vector<std::pair<std::string, Tensor>> named) {
  std::vector<Tensor> out;
  for (auto& [n, p] : named) out.push_back(p);
  return out;
}

std::vector<std::vector<double>> snapshot_values(const std::vector<Tensor>& ps) {
  std::vector<std::vector<double>> out;
  for (const auto& p : ps) out.push_back(p.values());
  return out;
}

void restore_values(const std::vector<Tensor>& ps, const std::vector<std::vector<double>>& vals) {
  for (std::size_t i = 0; i < ps.size(); ++i) ps[i].values() = vals[i];
}

}  // namespace

PretrainOutput run_pretrain(const TrainConfig& cfg, const Workbench& bench) {
  PretrainOutput out;
  out.tokenizer = RqTokenizer(cfg.tokenizer, cfg.seed);
  out.report = out.tokenizer.pretrain(bench.content.rows, cfg.pretrain_epochs, cfg.pretrain_lr, cfg.seed);
  out.baseline = catalog_snapshot(out.tokenizer, bench.content, 0);
  out.index = resolve_conflicts(out.baseline.deterministic, cfg.recommender.conflict_cap);
  return out;
}

// --- epoch report --------------------------------------------------------------

std::string EpochRow::to_jsonl() const {
  ordered_json j;
  j["epoch"] = epoch;
  j["variant"] = variant;
  for (const auto& [k, v] : recall) j["recall@" + std::to_string(k)] = v;
  for (const auto& [k, v] : ndcg) j["ndcg@" + std::to_string(k)] = v;
  j["coverage-per-level"] = coverage_per_level;
  j["coverage-mean"] = coverage_mean;
  j["coverage-std"] = coverage_std;
  j["eff-codes-per-level"] = eff_codes_per_level;
  j["incr-drift"] = incr_drift;
  j["cum-drift"] = cum_drift;
  j["agreement"] = agreement;
  j["sigma"] = sigma;
  j["hot-count-per-level"] = hot_count_per_level;
  j["L_gen"] = l_gen;
  j["L_vq"] = l_vq;
  j["L_recon"] = l_recon;
  return j.dump();
}

// --- evaluation ----------------------------------------------------------------

std::map<std::string, double> run_eval(const SeqRecModel& model, const SidIndex& index, const Workbench& bench,
                                       bool test_split, const std::vector<int>& k_list, int beam_width) {
  std::map<std::string, double> acc;
  for (int k : k_list) {
    acc["recall@" + std::to_string(k)] = 0.0;
    acc["ndcg@" + std::to_string(k)] = 0.0;
  }
  const int users = static_cast<int>(bench.split.train_items.size());
  for (int u = 0; u < users; ++u) {
    std::vector<int> history = bench.split.train_items[static_cast<std::size_t>(u)];
    int target = bench.split.val_target[static_cast<std::size_t>(u)];
    if (test_split) {
      history.push_back(target);
      target = bench.split.test_target[static_cast<std::size_t>(u)];
    }
    std::vector<SemanticId> sids;
    for (int v : history) sids.push_back(index.item_to_sid[static_cast<std::size_t>(v)]);
    const SidSequence input = build_input(sids, model.layout(), model.config().max_history);
    const RankedCandidates ranked = model.generate(input, beam_width, model.config().constrained ? &index : nullptr);
    std::vector<int> items;
    for (const auto& c : ranked) {
      const int item = index.sid_to_item(c.sid);
      if (item >= 0) items.push_back(item);
    }
    for (int k : k_list) {
      acc["recall@" + std::to_string(k)] += recall_at_k(items, target, k);
      acc["ndcg@" + std::to_string(k)] += ndcg_at_k(items, target, k);
    }
  }
  for (auto& [k, v] : acc) v /= static_cast<double>(users);
  return acc;
}

// --- training ------------------------------------------------------------------

TrainResult run_train(const TrainConfig& cfg, const Workbench& bench, const PretrainOutput& pre) {
  const int n_items = bench.log.num_items();
  const int m = cfg.tokenizer.m;
  const bool joint = cfg.variant != Variant::TwoStage;
  const bool ste = cfg.variant == Variant::Ste;
  const bool uses_sdud = cfg.variant == Variant::DigerSdud || cfg.variant == Variant::DigerBoth;
  const bool uses_frq = cfg.variant == Variant::DigerFrqUd || cfg.variant == Variant::DigerBoth;

  TrainResult result;
  result.tokenizer = pre.tokenizer.clone();  // pretrained state stays pristine for sibling runs
  RqTokenizer& tok = result.tokenizer;
  result.model = SeqRecModel(cfg.recommender, cfg.seed);
  SeqRecModel& model = result.model;

  SdudState sdud;
  sdud.lambda = cfg.lambda;
  sdud.loss_ema_decay = cfg.loss_ema_decay;
  // Uniform-prediction NLL seeds the loss EMA so epoch 1 has a noise scale.
  double uniform_nll = std::log(static_cast<double>(cfg.recommender.conflict_cap));
  for (int j = 0; j < m; ++j) uniform_nll += std::log(static_cast<double>(cfg.tokenizer.k));
  sdud.prime(uniform_nll);
  FrqState frq(m, cfg.tokenizer.k, cfg.beta, cfg.ratio_r);

  AdamW opt_rec(cfg.rec_lr, cfg.weight_decay);
  opt_rec.attach(param_tensors(model.params()));
  AdamW opt_tok(cfg.tok_lr, cfg.weight_decay);
  opt_tok.attach(param_tensors(tok.params()));

  SidIndex index = pre.index;
  AssignmentSnapshot prev_catalog = pre.baseline;

  struct PairRef {
    int user;
    int t;
  };
  std::vector<PairRef> pairs;
  for (int u = 0; u < static_cast<int>(bench.split.train_items.size()); ++u)
    for (int t = 1; t < static_cast<int>(bench.split.train_items[static_cast<std::size_t>(u)].size()); ++t)
      pairs.push_back({u, t});

  std::ostringstream report;
  report << "{\"config\":" << cfg.to_json() << "}\n";

  const std::vector<Tensor> tok_params = param_tensors(tok.params());
  const std::vector<Tensor> model_params = param_tensors(model.params());
  std::vector<std::vector<double>> best_tok, best_model;
  int epochs_since_best = 0;
  uint64_t global_step = 0;

  for (int epoch = 1; epoch <= cfg.epochs && !result.diverged; ++epoch) {
    const NoiseContext noise = decay_policy(cfg.variant, &sdud, &frq);
    const double epoch_sigma = uses_sdud ? sdud.sigma : 0.0;

    std::vector<PairRef> order = pairs;
    shuffle_stream(order, RngStream(cfg.seed, {0x6f72646572ull, static_cast<uint64_t>(epoch)}));

    std::vector<SemanticId> last_sampled(static_cast<std::size_t>(n_items));
    std::vector<SemanticId> last_detref(static_cast<std::size_t>(n_items));
    std::vector<uint8_t> touched(static_cast<std::size_t>(n_items), 0);
    std::vector<std::vector<double>> freq_counts(static_cast<std::size_t>(m),
                                                 std::vector<double>(static_cast<std::size_t>(cfg.tokenizer.k), 0.0));
    double freq_total = 0.0;
    double gen_sum = 0.0, vq_sum = 0.0, recon_sum = 0.0;
    std::size_t vq_count = 0;
    int in_batch = 0;
    opt_rec.zero_grad();
    opt_tok.zero_grad();

    for (const PairRef& pr : order) {
      ++global_step;
      const auto& items = bench.split.train_items[static_cast<std::size_t>(pr.user)];
      const int target_item = items[static_cast<std::size_t>(pr.t)];
      const int keep = std::min(pr.t, cfg.recommender.max_history);
      std::vector<int> history(items.begin() + (pr.t - keep), items.begin() + pr.t);

      Tape tape;
      Tensor loss;
      if (joint) {
        std::vector<Quantization> quants;
        quants.reserve(history.size() + 1);
        std::vector<SemanticId> input_sids;
        Coupling coupling;
        coupling.ste_identity = ste;
        Tensor vq_terms;

        const auto quantize_item = [&](int item) {
          const uint64_t step_key = cfg.noise_per_epoch ? 0 : global_step;
          RngStream rng(cfg.seed, {0x6e6f697365ull, static_cast<uint64_t>(epoch), step_key, static_cast<uint64_t>(item)});
          Tensor content = Tensor::from({cfg.tokenizer.input_dim}, bench.content.rows[static_cast<std::size_t>(item)]);
          Tensor r = tok.encode(tape, content);
          quants.push_back(tok.quantize(tape, r, noise, rng, /*soft_update=*/!ste));
          Quantization& q = quants.back();
          VqLosses vl = tok.vq_losses(tape, r, q);
          Tensor term = add(tape, vl.recon, vl.vq);
          vq_terms = vq_terms.defined() ? add(tape, vq_terms, term) : term;
          vq_sum += vl.vq.value();
          recon_sum += vl.recon.value();
          ++vq_count;
          // agreement bookkeeping: sampled codes vs the zero-noise assignment
          // at the same parameter state (a separate noise-free pass; deeper
          // levels of the sampled path depend on the sampled earlier codes)
          touched[static_cast<std::size_t>(item)] = 1;
          last_sampled[static_cast<std::size_t>(item)] = q.sid;
          for (int j = 0; j < m; ++j)
            freq_counts[static_cast<std::size_t>(j)][static_cast<std::size_t>(q.sid.codes[static_cast<std::size_t>(j)] - 1)] += 1.0;
          Tape off(false);
          NoiseContext no_noise;
          RngStream unused(0);
          last_detref[static_cast<std::size_t>(item)] =
              tok.quantize(off, Tensor::from({cfg.tokenizer.d}, r.values()), no_noise, unused).sid;
          return &quants.back();
        };

        for (int v : history) {
          const Quantization* q = quantize_item(v);
          coupling.input_items.push_back(q);
          SemanticId sid = q->sid;
          sid.conflict = index.item_to_sid[static_cast<std::size_t>(v)].conflict;
          input_sids.push_back(std::move(sid));
        }
        freq_total += static_cast<double>(history.size() + 1);
        const Quantization* qt = quantize_item(target_item);
        coupling.target = qt;
        SemanticId target_sid = qt->sid;
        target_sid.conflict = index.item_to_sid[static_cast<std::size_t>(target_item)].conflict;

        const SidSequence input = build_input(input_sids, model.layout(), cfg.recommender.max_history);
        Tensor l_gen = model.forward_nll(tape, input, target_sid, &coupling);
        gen_sum += l_gen.value();
        loss = add(tape, l_gen, vq_terms);
      } else {
        std::vector<SemanticId> input_sids;
        for (int v : history) input_sids.push_back(index.item_to_sid[static_cast<std::size_t>(v)]);
        const SidSequence input = build_input(input_sids, model.layout(), cfg.recommender.max_history);
        Tensor l_gen = model.forward_nll(tape, input, index.item_to_sid[static_cast<std::size_t>(target_item)], nullptr);
        gen_sum += l_gen.value();
        loss = l_gen;
      }

      if (!std::isfinite(loss.value())) {
        result.diverged = true;
        break;
      }
      tape.backward(loss);
      if (++in_batch == cfg.batch_size) {
        opt_rec.step();
        opt_rec.zero_grad();
        if (joint) {
          opt_tok.step();
          opt_tok.zero_grad();
        }
        in_batch = 0;
      }
    }
    if (result.diverged) break;
    if (in_batch > 0) {
      opt_rec.step();
      opt_rec.zero_grad();
      if (joint) {
        opt_tok.step();
        opt_tok.zero_grad();
      }
    }
    if (!tok.all_finite() || !model.all_finite()) {
      result.diverged = true;
      break;
    }

    // epoch-end bookkeeping: catalog rebuild, diagnostics, decay updates
    AssignmentSnapshot catalog = catalog_snapshot(tok, bench.content, epoch);
    index = resolve_conflicts(catalog.deterministic, cfg.recommender.conflict_cap);

    AssignmentSnapshot agreement_snap;
    agreement_snap.epoch = epoch;
    for (int v = 0; v < n_items; ++v) {
      if (touched[static_cast<std::size_t>(v)]) {
        agreement_snap.deterministic.push_back(last_detref[static_cast<std::size_t>(v)]);
        agreement_snap.sampled.push_back(last_sampled[static_cast<std::size_t>(v)]);
      } else {
        agreement_snap.deterministic.push_back(catalog.deterministic[static_cast<std::size_t>(v)]);
        agreement_snap.sampled.push_back(catalog.deterministic[static_cast<std::size_t>(v)]);
      }
    }
    catalog.sampled = agreement_snap.sampled;

    EpochRow row;
    row.epoch = epoch;
    row.variant = variant_name(cfg.variant);
    const CoverageStats cov = coverage_stats(catalog, m, cfg.tokenizer.k);
    row.coverage_per_level = cov.per_level;
    row.coverage_mean = cov.mean;
    row.coverage_std = cov.stddev;
    for (int j = 1; j <= m; ++j) row.eff_codes_per_level.push_back(effective_codes(usage_distribution(catalog, j, cfg.tokenizer.k)));
    row.incr_drift = incremental_drift(prev_catalog, catalog);
    row.cum_drift = cumulative_drift(pre.baseline, catalog);
    row.agreement = train_inference_agreement(agreement_snap);
    row.sigma = epoch_sigma;
    const double n_examples = static_cast<double>(pairs.size());
    row.l_gen = gen_sum / n_examples;
    row.l_vq = vq_count ? vq_sum / static_cast<double>(vq_count) : 0.0;
    row.l_recon = vq_count ? recon_sum / static_cast<double>(vq_count) : 0.0;

    if (uses_frq && freq_total > 0.0) {
      std::vector<std::vector<double>> raw = freq_counts;
      for (auto& level : raw)
        for (double& x : level) x /= freq_total;
      frq_update(frq, raw);
    }
    for (int j = 0; j < m; ++j) row.hot_count_per_level.push_back(uses_frq ? frq.hot_count(j) : 0);
    if (uses_sdud) sdud_step(sdud, row.l_gen);

    const auto val = run_eval(model, index, bench, /*test_split=*/false, cfg.k_list, cfg.recommender.beam_width);
    for (int k : cfg.k_list) {
      row.recall[k] = val.at("recall@" + std::to_string(k));
      row.ndcg[k] = val.at("ndcg@" + std::to_string(k));
    }

    result.rows.push_back(row);
    report << row.to_jsonl() << "\n";
    prev_catalog = catalog;

    const double val_ndcg10 = row.ndcg.count(10) ? row.ndcg.at(10) : row.ndcg.rbegin()->second;
    if (val_ndcg10 > result.best_val_ndcg) {
      result.best_val_ndcg = val_ndcg10;
      result.best_epoch = epoch;
      best_tok = snapshot_values(tok_params);
      best_model = snapshot_values(model_params);
      result.index = index;
      result.best_snapshot = catalog;
      result.sdud = sdud;
      result.frq = frq;
      result.opt_rec = {opt_rec.steps(), opt_rec.first_moments(), opt_rec.second_moments()};
      result.opt_tok = {opt_tok.steps(), opt_tok.first_moments(), opt_tok.second_moments()};
      epochs_since_best = 0;
    } else if (++epochs_since_best >= cfg.patience) {
      break;
    }
  }

  if (result.best_epoch < 0) {
    // No completed epoch (divergence before the first evaluation): keep the
    // pretrained state as the last good checkpoint.
    result.index = pre.index;
    result.best_snapshot = pre.baseline;
    result.sdud = sdud;
    result.frq = frq;
    result.opt_rec = {opt_rec.steps(), opt_rec.first_moments(), opt_rec.second_moments()};
    result.opt_tok = {opt_tok.steps(), opt_tok.first_moments(), opt_tok.second_moments()};
  } else {
    restore_values(tok_params, best_tok);
    restore_values(model_params, best_model);
  }
  result.report_text = report.str();

  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    std::ofstream rep(cfg.out_dir + "/report.jsonl", std::ios::binary);
    rep << result.report_text;
    std::ofstream heat(cfg.out_dir + "/usage_heatmap.csv", std::ios::binary);
    heat << usage_heatmap_csv(result.best_snapshot, m, cfg.tokenizer.k);
  }
  return result;
}

// --- matrix --------------------------------------------------------------------

std::vector<MatrixRow> run_matrix(const TrainConfig& base, const std::vector<Variant>& variants,
                                  const std::vector<uint64_t>& seeds, const std::string& out_dir) {
  if (variants.size() < 2) throw std::invalid_argument("run_matrix: need at least 2 variants");
  std::vector<MatrixRow> rows;
  for (uint64_t seed : seeds) {
    TrainConfig seeded = base;
    seeded.seed = seed;
    Workbench bench;
    PretrainOutput pre;
    bool seed_ok = true;
    std::string seed_err;
    try {
      bench = load_dataset(seeded);
      pre = run_pretrain(seeded, bench);
    } catch (const std::exception& e) {
      seed_ok = false;
      seed_err = e.what();
    }
    for (Variant variant : variants) {
      MatrixRow row;
      row.variant = variant_name(variant);
      row.seed = seed;
      row.split_digest = bench.split_digest;
      if (!seed_ok) {
        row.status = seed_err;
        rows.push_back(std::move(row));
        continue;
      }
      try {
        TrainConfig cfg = seeded;
        cfg.variant = variant;
        if (!out_dir.empty()) cfg.out_dir = out_dir + "/" + row.variant + "-s" + std::to_string(seed);
        TrainResult res = run_train(cfg, bench, pre);
        if (res.best_epoch < 0) throw std::runtime_error("training diverged before the first evaluation");
        row.status = res.diverged ? "diverged" : "ok";
        row.best_epoch = res.best_epoch;
        row.test_metrics = run_eval(res.model, res.index, bench, /*test_split=*/true, cfg.k_list,
                                    cfg.recommender.beam_width);
        const EpochRow& best = res.rows[static_cast<std::size_t>(res.best_epoch - 1)];
        row.coverage_mean = best.coverage_mean;
        row.coverage_std = best.coverage_std;
        row.eff_codes = best.eff_codes_per_level;
        row.cum_drift_final = res.rows.back().cum_drift;
        double agree = 0.0;
        for (const auto& r : res.rows) agree += r.agreement;
        row.agreement_mean = agree / static_cast<double>(res.rows.size());
        row.rows = res.rows;
      } catch (const std::exception& e) {
        row.status = e.what();
      }
      rows.push_back(std::move(row));
    }
  }
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream csv(out_dir + "/matrix.csv", std::ios::binary);
    csv << matrix_csv(rows, base.tokenizer.m);
  }
  return rows;
}

std::string matrix_csv(const std::vector<MatrixRow>& rows, int levels) {
  std::ostringstream os;
  os << "variant,seed,status,split_digest,best_epoch,recall@5,recall@10,ndcg@5,ndcg@10,coverage_mean,coverage_std";
  for (int l = 1; l <= levels; ++l) os << ",eff_codes_l" << l;
  os << ",agreement_mean,cum_drift_final\n";
  const auto metric = [](const MatrixRow& r, const std::string& key) {
    auto it = r.test_metrics.find(key);
    return it == r.test_metrics.end() ? 0.0 : it->second;
  };
  for (const auto& r : rows) {
    std::string status = r.status;
    for (auto& c : status)
      if (c == ',' || c == '\n') c = ';';
    os << r.variant << ',' << r.seed << ',' << status << ',' << r.split_digest << ',' << r.best_epoch << ','
       << metric(r, "recall@5") << ',' << metric(r, "recall@10") << ',' << metric(r, "ndcg@5") << ','
       << metric(r, "ndcg@10") << ',' << r.coverage_mean << ',' << r.coverage_std;
    for (int l = 0; l < levels; ++l)
      os << ',' << (l < static_cast<int>(r.eff_codes.size()) ? r.eff_codes[static_cast<std::size_t>(l)] : 0.0);
    os << ',' << r.agreement_mean << ',' << r.cum_drift_final << '\n';
  }
  return os.str();
}

// --- checkpoints ----------------------------------------------------------------

namespace {

ordered_json tensor_to_json(const Tensor& t) {
  ordered_json j;
  j["shape"] = t.shape();
  j["values"] = t.values();
  return j;
}

void tensor_from_json(const ordered_json& j, const Tensor& t) {
  const std::vector<int> shape = j.at("shape").get<std::vector<int>>();
  if (shape != t.shape()) throw std::runtime_error("checkpoint: tensor shape mismatch");
  t.values() = j.at("values").get<std::vector<double>>();
}

ordered_json params_to_json(std::vector<std::pair<std::string, Tensor>> named) {
  ordered_json j;
  for (auto& [name, p] : named) j[name] = tensor_to_json(p);
  return j;
}

void params_from_json(const ordered_json& j, std::vector<std::pair<std::string, Tensor>> named) {
  for (auto& [name, p] : named) tensor_from_json(j.at(name), p);
}

ordered_json index_to_json(const SidIndex& index) {
  ordered_json sids = ordered_json::array();
  for (const auto& sid : index.item_to_sid) {
    ordered_json row = ordered_json::array();
    for (int c : sid.codes) row.push_back(c);
    row.push_back(sid.conflict);
    sids.push_back(row);
  }
  ordered_json j;
  j["conflict_cap"] = index.conflict_cap;
  j["sids"] = sids;
  return j;
}

SidIndex index_from_json(const ordered_json& j) {
  SidIndex index;
  index.conflict_cap = j.at("conflict_cap").get<int>();
  for (const auto& row : j.at("sids")) {
    SemanticId sid;
    for (std::size_t i = 0; i + 1 < row.size(); ++i) sid.codes.push_back(row[i].get<int>());
    sid.conflict = row.back().get<int>();
    index.item_to_sid.push_back(sid);
  }
  for (std::size_t v = 0; v < index.item_to_sid.size(); ++v)
    index.to_item[SidIndex::key(index.item_to_sid[v])] = static_cast<int>(v);
  return index;
}

ordered_json snapshot_to_json(const AssignmentSnapshot& snap) {
  ordered_json j;
  j["epoch"] = snap.epoch;
  ordered_json det = ordered_json::array(), samp = ordered_json::array();
  for (const auto& sid : snap.deterministic) det.push_back(sid.codes);
  for (const auto& sid : snap.sampled) samp.push_back(sid.codes);
  j["deterministic"] = det;
  j["sampled"] = samp;
  return j;
}

AssignmentSnapshot snapshot_from_json(const ordered_json& j) {
  AssignmentSnapshot snap;
  snap.epoch = j.at("epoch").get<int>();
  for (const auto& codes : j.at("deterministic")) {
    SemanticId sid;
    sid.codes = codes.get<std::vector<int>>();
    snap.deterministic.push_back(sid);
  }
  for (const auto& codes : j.at("sampled")) {
    SemanticId sid;
    sid.codes = codes.get<std::vector<int>>();
    snap.sampled.push_back(sid);
  }
  return snap;
}

TrainConfig config_from_json_text(const std::string& text) {
  const ordered_json j = ordered_json::parse(text);
  KvConfig kv;
  for (const auto& [key, value] : j.items()) {
    if (value.is_string()) {
      kv.set(key, value.get<std::string>());
    } else if (value.is_boolean()) {
      kv.set(key, value.get<bool>() ? "true" : "false");
    } else if (value.is_array()) {
      std::string list;
      for (const auto& x : value) list += (list.empty() ? "" : ",") + x.dump();
      kv.set(key, list);
    } else {
      kv.set(key, value.dump());
    }
  }
  return TrainConfig::from_kv(kv);
}

}  // namespace

void save_tokenizer_checkpoint(const std::string& path, const TrainConfig& cfg, RqTokenizer& tok,
                               const SidIndex& index, const AssignmentSnapshot& baseline) {
  ordered_json j;
  j["format"] = "diger-tokenizer-v1";
  j["config"] = ordered_json::parse(cfg.to_json());
  j["params"] = params_to_json(tok.params());
  j["index"] = index_to_json(index);
  j["baseline"] = snapshot_to_json(baseline);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + path);
  out << j.dump();
}

PretrainOutput load_tokenizer_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  ordered_json j;
  in >> j;
  if (j.at("format").get<std::string>() != "diger-tokenizer-v1")
    throw std::runtime_error("checkpoint: unexpected format in " + path);
  const TrainConfig cfg = config_from_json_text(j.at("config").dump());
  PretrainOutput out;
  out.tokenizer = RqTokenizer(cfg.tokenizer, cfg.seed);
  params_from_json(j.at("params"), out.tokenizer.params());
  out.index = index_from_json(j.at("index"));
  out.baseline = snapshot_from_json(j.at("baseline"));
  return out;
}

namespace {

ordered_json optimizer_to_json(const OptimizerState& st) {
  ordered_json j;
  j["steps"] = st.steps;
  j["m"] = st.m;
  j["v"] = st.v;
  return j;
}

OptimizerState optimizer_from_json(const ordered_json& j) {
  OptimizerState st;
  st.steps = j.at("steps").get<long long>();
  st.m = j.at("m").get<std::vector<std::vector<double>>>();
  st.v = j.at("v").get<std::vector<std::vector<double>>>();
  return st;
}

ordered_json decay_to_json(const SdudState& sdud, const FrqState& frq) {
  ordered_json j;
  j["sdud"] = {{"sigma", sdud.sigma},
               {"lambda", sdud.lambda},
               {"loss_ema", sdud.loss_ema},
               {"loss_ema_decay", sdud.loss_ema_decay},
               {"ema_primed", sdud.ema_primed}};
  j["frq"] = {{"levels", frq.levels}, {"k", frq.k}, {"beta", frq.beta}, {"ratio", frq.ratio}, {"freq", frq.freq}};
  return j;
}

void decay_from_json(const ordered_json& j, SdudState& sdud, FrqState& frq) {
  const auto& s = j.at("sdud");
  sdud.sigma = s.at("sigma").get<double>();
  sdud.lambda = s.at("lambda").get<double>();
  sdud.loss_ema = s.at("loss_ema").get<double>();
  sdud.loss_ema_decay = s.at("loss_ema_decay").get<double>();
  sdud.ema_primed = s.at("ema_primed").get<bool>();
  const auto& f = j.at("frq");
  if (f.at("levels").get<int>() > 0) {
    frq = FrqState(f.at("levels").get<int>(), f.at("k").get<int>(), f.at("beta").get<double>(),
                   f.at("ratio").get<double>());
    frq.freq = f.at("freq").get<std::vector<std::vector<double>>>();
    frq_partition(frq);
  }
}

}  // namespace

void save_checkpoint(const std::string& path, const TrainConfig& cfg, TrainResult& result) {
  ordered_json j;
  j["format"] = "diger-checkpoint-v1";
  j["config"] = ordered_json::parse(cfg.to_json());
  j["tokenizer"] = params_to_json(result.tokenizer.params());
  j["recommender"] = params_to_json(result.model.params());
  j["index"] = index_to_json(result.index);
  j["decay"] = decay_to_json(result.sdud, result.frq);
  j["optim"] = {{"recommender", optimizer_to_json(result.opt_rec)}, {"tokenizer", optimizer_to_json(result.opt_tok)}};
  j["epoch"] = result.best_epoch;
  j["best_val_ndcg10"] = result.best_val_ndcg;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + path);
  out << j.dump();
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  ordered_json j;
  in >> j;
  if (j.at("format").get<std::string>() != "diger-checkpoint-v1")
    throw std::runtime_error("checkpoint: unexpected format in " + path);
  LoadedCheckpoint out;
  out.config = config_from_json_text(j.at("config").dump());
  out.tokenizer = RqTokenizer(out.config.tokenizer, out.config.seed);
  params_from_json(j.at("tokenizer"), out.tokenizer.params());
  out.model = SeqRecModel(out.config.recommender, out.config.seed);
  params_from_json(j.at("recommender"), out.model.params());
  out.index = index_from_json(j.at("index"));
  decay_from_json(j.at("decay"), out.sdud, out.frq);
  out.opt_rec = optimizer_from_json(j.at("optim").at("recommender"));
  out.opt_tok = optimizer_from_json(j.at("optim").at("tokenizer"));
  out.epoch = j.at("epoch").get<int>();
  out.best_val_ndcg = j.at("best_val_ndcg10").get<double>();
  return out;
}

std::string usage_heatmap_csv(const AssignmentSnapshot& snap, int levels, int k) {
  std::ostringstream os;
  os << "level,code-index,probability\n";
  for (int level = 1; level <= levels; ++level) {
    const std::vector<double> q = usage_distribution(snap, level, k);
    for (int c = 0; c < k; ++c) os << level << ',' << (c + 1) << ',' << q[static_cast<std::size_t>(c)] << '\n';
  }
  return os.str();
}

}  // namespace diger
