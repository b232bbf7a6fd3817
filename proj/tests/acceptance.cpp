// End-to-end acceptance run. Prints one "AC<n> PASS|FAIL" line per criterion,
// followed by indented detail lines, and exits nonzero if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "cascade_guard/attacks.hpp"
#include "cascade_guard/dataset.hpp"
#include "cascade_guard/detector.hpp"
#include "cascade_guard/recovery.hpp"
#include "cascade_guard/selfaware.hpp"
#include "cascade_guard/serialize.hpp"
#include "cascade_guard/statistics.hpp"
#include "oracles.hpp"

using namespace cguard;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

constexpr std::size_t kPerClass = 300;
constexpr std::size_t kTrainAttacks = 1000;
constexpr std::size_t kEvolved = 30;
const std::vector<std::uint64_t> kSeeds{1, 2, 3, 4, 5};

double seconds_since(Clock::time_point t) {
  return std::chrono::duration<double>(Clock::now() - t).count();
}

int failures = 0;

void verdict(int id, bool pass, const std::string& summary) {
  std::printf("AC%d %s %s\n", id, pass ? "PASS" : "FAIL", summary.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

void detail(const char* fmt, auto... args) {
  std::printf("    ");
  std::printf(fmt, args...);
  std::printf("\n");
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::vector<Tensor> successful_images(const std::vector<AdversarialRecord>& recs, std::size_t limit) {
  std::vector<Tensor> out;
  for (const auto& r : recs)
    if (r.success && out.size() < limit) out.push_back(r.image);
  return out;
}

struct SeedRun {
  std::uint64_t seed = 0;
  Dataset train, val, test;
  Network net;
  std::vector<AdversarialRecord> train_attacks, test_attacks, evolved;
  std::vector<Tensor> adv_train, adv_test, ea_success;
  CascadeModel model;
  DetectorEvaluation eval;
  double pipeline_seconds = 0.0;  // victim, attacks, cascade and held-out evaluation
  double ea_seconds = 0.0;
};

SeedRun run_seed(std::uint64_t seed, std::size_t threads) {
  SeedRun r;
  r.seed = seed;
  const auto start = Clock::now();
  const Dataset data = synth_dataset(seed, kPerClass);
  r.train = data.subset(Split::train);
  r.val = data.subset(Split::val);
  r.test = data.subset(Split::test);
  TrainHyper hyper;
  hyper.seed = seed;
  r.net = train_victim(data, NetworkSpec::default_victim(), hyper);

  AttackConfig cfg;
  cfg.seed = seed;
  // A few spare sources so that kTrainAttacks successes remain after misses.
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < r.train.size() && ids.size() < kTrainAttacks * 21 / 20; ++i) ids.push_back(i);
  r.train_attacks = run_attacks(r.net, r.train.images, r.train.labels, ids, cfg, threads);
  r.adv_train = successful_images(r.train_attacks, kTrainAttacks);

  std::vector<std::size_t> test_ids(r.test.size());
  for (std::size_t i = 0; i < test_ids.size(); ++i) test_ids[i] = i;
  cfg.seed = derive_seed(seed, 1000);
  r.test_attacks = run_attacks(r.net, r.test.images, r.test.labels, test_ids, cfg, threads);
  r.adv_test = successful_images(r.test_attacks, r.test_attacks.size());

  CascadeConfig cc;
  cc.seed = seed;
  cc.threads = threads;
  r.model = train_cascade(r.net, r.train.images, r.adv_train, cc);
  r.model.network_fingerprint = network_fingerprint(r.net);
  r.eval = evaluate_detector(r.model, r.net, r.test.images, r.adv_test, threads);
  r.pipeline_seconds = seconds_since(start);

  const auto ea_start = Clock::now();
  AttackConfig ea;
  ea.kind = AttackKind::evolutionary;
  ea.seed = derive_seed(seed, 2000);
  r.evolved = run_evolutionary(r.net, kEvolved, ea, threads);
  r.ea_success = successful_images(r.evolved, r.evolved.size());
  r.ea_seconds = seconds_since(ea_start);

  detail("seed %llu: victim test acc %.4f, train adversarials %zu/%zu, test adversarials %zu/%zu, "
         "stages %zu, %.1f s + EA %.1f s",
         static_cast<unsigned long long>(seed), r.net.training.test_accuracy, r.adv_train.size(),
         r.train_attacks.size(), r.adv_test.size(), r.test_attacks.size(), r.model.stages.size(),
         r.pipeline_seconds, r.ea_seconds);
  return r;
}

void ac1() {
  const auto t = Clock::now();
  const auto check = oracle::finite_difference_check(20, 20240601);
  const double secs = seconds_since(t);
  verdict(1, check.max_relative_error < 1e-6 && secs < 30.0,
          fmt("max relative error %.3e over %zu gradient components on 20 networks (< 1e-6), %.2f s (< 30 s)",
              check.max_relative_error, check.components, secs));
  detail("draws replaced because a perturbation crossed a ReLU or pooling kink: %zu", check.resampled);
}

void ac2(const SeedRun& run, std::size_t threads) {
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < run.test.size() && ids.size() < 500; ++i) ids.push_back(i);
  AttackConfig cfg;
  cfg.seed = derive_seed(run.seed, 3000);
  const auto t = Clock::now();
  const auto recs = run_attacks(run.net, run.test.images, run.test.labels, ids, cfg, threads);
  const double secs = seconds_since(t);
  std::size_t ok = 0;
  double iters = 0.0;
  for (const auto& r : recs) {
    ok += r.success && r.confidence >= 0.9 && r.linf <= 0.2;
    iters += static_cast<double>(r.iterations);
  }
  const double rate = static_cast<double>(ok) / static_cast<double>(recs.size());
  verdict(2, rate >= 0.95 && secs < 300.0,
          fmt("%zu/%zu gradient-box attacks reach confidence >= 0.9 with |r|_inf <= 0.2 (%.1f%%, need 95%%), %.1f s (< 300 s)",
              ok, recs.size(), 100.0 * rate, secs));
  detail("mean iterations %.1f", iters / static_cast<double>(recs.size()));
}

void ac3(const SeedRun& run) {
  double worst_orth = 0.0, worst_mean = 0.0, worst_std = 0.0, worst_center = 0.0;
  std::size_t floored = 0;
  const std::size_t n_layers = run.net.spec.conv_layer_count();
  for (std::size_t m = 0; m < n_layers; ++m) {
    std::vector<Tensor> outs;
    for (std::size_t i = 0; i < 500; ++i) outs.push_back(layer_outputs(run.net, run.train.images[i])[m]);
    const auto bank = fit_pca_bank(m, outs);
    const std::size_t K = bank.channels();
    for (std::size_t i = 0; i < K; ++i)
      for (std::size_t j = 0; j < K; ++j) {
        double dot = 0.0;
        for (std::size_t k = 0; k < K; ++k) dot += bank.projection(k, i) * bank.projection(k, j);
        worst_orth = std::max(worst_orth, std::abs(dot - (i == j ? 1.0 : 0.0)));
      }
    std::vector<double> sum(K, 0.0), sq(K, 0.0);
    double n = 0.0;
    for (const auto& o : outs)
      for (std::size_t p = 0; p < o.size(); p += K) {
        const auto z = project_normalized(bank, o.data().subspan(p, K));
        for (std::size_t d = 0; d < K; ++d) sum[d] += z[d], sq[d] += z[d] * z[d];
        n += 1.0;
      }
    for (std::size_t d = 0; d < K; ++d) {
      if (bank.stds[d] <= bank.epsilon) {
        ++floored;
        continue;
      }
      const double mean = sum[d] / n;
      worst_mean = std::max(worst_mean, std::abs(mean));
      worst_std = std::max(worst_std, std::abs(std::sqrt(sq[d] / n - mean * mean) - 1.0));
    }
    Tensor centered(outs[0].shape());
    for (std::size_t p = 0; p < centered.size(); ++p) centered[p] = bank.mean[p % K];
    for (double v : pca_statistic(centered, bank)) worst_center = std::max(worst_center, std::abs(v));
  }
  verdict(3, worst_orth < 1e-8 && worst_mean < 1e-10 && worst_std < 1e-8 && worst_center == 0.0,
          fmt("|W^T W - I|max %.2e (< 1e-8), |mean| %.2e (< 1e-10), |std - 1| %.2e (< 1e-8), "
              "mean-image statistic %.2e (= 0)",
              worst_orth, worst_mean, worst_std, worst_center));
  detail("victim seed %llu, both conv layers, 500 training images; floored dims skipped: %zu",
         static_cast<unsigned long long>(run.seed), floored);
}

void ac4() {
  std::mt19937_64 rng(404);
  std::size_t channels = 0, mismatches = 0;
  while (channels < 1000) {
    const std::size_t h = 1 + rng() % 9, w = 1 + rng() % 9, k = 1 + rng() % 8;
    Tensor t(h, w, k);
    const bool quantized = rng() % 2;
    std::uniform_real_distribution<double> u(0.0, 3.0);
    for (double& v : t.data()) v = quantized ? static_cast<double>(rng() % 4) : u(rng);
    const auto ex = extremal_stats(t);
    const auto pc = percentile_stats(t);
    for (std::size_t c = 0; c < k; ++c, ++channels) {
      std::vector<double> v;
      for (std::size_t i = c; i < t.size(); i += k) v.push_back(t[i]);
      std::vector<double> sorted = v;
      std::sort(sorted.begin(), sorted.end());
      mismatches += ex[c] != sorted.front();
      mismatches += ex[k + c] != sorted.back();
      for (std::size_t q = 0; q < 3; ++q)
        mismatches += pc[q * k + c] != oracle::percentile(v, 25.0 * static_cast<double>(q + 1));
    }
  }
  verdict(4, mismatches == 0,
          fmt("%zu mismatches against the sort-based oracle over %zu random channels", mismatches, channels));
}

void ac5(const std::vector<SeedRun>& runs) {
  bool pass = true;
  std::string summary;
  for (std::size_t s = 0; s < 3 && s < runs.size(); ++s) {
    const auto& r = runs[s];
    // Event counting with the cascade itself.
    std::size_t fp = 0, tp = 0;
    for (const auto& img : r.test.images) fp += cascade_predict(r.model, r.net, img).adversarial;
    for (const auto& img : r.adv_test) tp += cascade_predict(r.model, r.net, img).adversarial;
    const double n = static_cast<double>(r.test.size()), p = static_cast<double>(r.adv_test.size());
    const double F = fp / n, T = tp / p;
    std::vector<StageRates> per_stage;
    for (const auto& c : r.eval.stages) per_stage.push_back(c.rates());
    const auto prod = compose_rates(per_stage);
    const double tol_f = 3.0 * std::sqrt(std::max(F * (1 - F), 1.0 / n) / n);
    const double tol_t = 3.0 * std::sqrt(std::max(T * (1 - T), 1.0 / p) / p);
    const bool ok = std::abs(F - prod.fpr) <= tol_f && std::abs(T - prod.tpr) <= tol_t;
    pass = pass && ok;
    std::vector<StageRates> trained;
    for (const auto& st : r.model.stages) trained.push_back(st.training_rates);
    const auto tprod = compose_rates(trained);
    detail("seed %llu: product of training-time stage rates FPR %.4f TPR %.4f",
           static_cast<unsigned long long>(r.seed), tprod.fpr, tprod.tpr);
    summary += fmt("%sseed %llu F %.4f vs prod %.4f, T %.4f vs prod %.4f", s ? "; " : "",
                   static_cast<unsigned long long>(r.seed), F, prod.fpr, T, prod.tpr);
    for (std::size_t k = 0; k < r.eval.stages.size(); ++k) {
      const auto& c = r.eval.stages[k];
      detail("seed %llu stage %zu: normals %zu in, %zu passed on; adversarials %zu in, %zu passed on",
             static_cast<unsigned long long>(r.seed), k, c.normals_in, c.normals_passed,
             c.adversarials_in, c.adversarials_passed);
    }
  }
  verdict(5, pass, summary + " (3 sigma)");
}

void ac6(const std::vector<SeedRun>& runs) {
  double sum = 0.0, secs = 0.0;
  std::string per;
  for (const auto& r : runs) {
    sum += r.eval.roc.auc;
    secs += r.pipeline_seconds;
    per += fmt(" %.4f", r.eval.roc.auc);
  }
  const double mean = sum / static_cast<double>(runs.size());
  verdict(6, mean >= 0.85 && secs < 600.0,
          fmt("mean held-out AUC %.4f over %zu seeds (>= 0.85), %.1f s total (< 600 s)", mean, runs.size(), secs));
  detail("per-seed AUC:%s", per.c_str());
  for (const auto& r : runs)
    detail("seed %llu: accuracy at calibrated thresholds %.4f, best %.4f, overall FPR %.4f TPR %.4f",
           static_cast<unsigned long long>(r.seed), r.eval.accuracy, r.eval.best_accuracy,
           r.eval.overall.fpr, r.eval.overall.tpr);
}

void ac7(const std::vector<SeedRun>& runs, std::size_t threads) {
  bool pass = true;
  double worst = 1.0;
  std::string per;
  for (const auto& r : runs) {
    if (r.ea_success.empty()) {
      pass = false;
      per += " n/a";
      continue;
    }
    const auto ev = evaluate_detector(r.model, r.net, r.test.images, r.ea_success, threads);
    worst = std::min(worst, ev.roc.auc);
    pass = pass && ev.roc.auc >= 0.90;
    per += fmt(" %.4f (%zu/%zu evolved, flagged %.3f)", ev.roc.auc, r.ea_success.size(), r.evolved.size(),
               ev.overall.tpr);
  }
  verdict(7, pass, fmt("lowest per-seed AUC against evolutionary images %.4f (>= 0.90 on every seed)", worst));
  detail("per seed:%s", per.c_str());
}

void ac8(const std::vector<SeedRun>& runs) {
  bool pass = true;
  std::string per;
  for (const auto& r : runs) {
    std::vector<PredictionRecord> normals, adv;
    std::vector<double> pooled;
    for (const auto& img : r.test.images) {
      normals.push_back(predict(r.net, img));
      pooled.insert(pooled.end(), normals.back().raw.begin(), normals.back().raw.end());
    }
    for (const auto& img : r.adv_test) adv.push_back(predict(r.net, img));
    std::sort(pooled.begin(), pooled.end());
    const std::vector<double> t{percentile_sorted(pooled, 90.0)};
    const double n = prediction_census(normals, t).raw_mean[0];
    const double a = prediction_census(adv, t).raw_mean[0];
    pass = pass && a < n;
    per += fmt("%sseed %llu t %.3f normal %.3f adversarial %.3f", per.empty() ? "" : "; ",
               static_cast<unsigned long long>(r.seed), t[0], n, a);
  }
  verdict(8, pass, "adversarial mean count above the normals' 90th-percentile raw score is below the normal mean on every seed");
  detail("%s", per.c_str());
}

void ac9(const std::vector<SeedRun>& runs, std::size_t threads) {
  bool pass = true;
  std::string per;
  double pooled_hits = 0.0, pooled_n = 0.0;
  for (const auto& r : runs) {
    std::vector<AdversarialRecord> ok;
    for (const auto& a : r.test_attacks)
      if (a.success) ok.push_back(a);
    const auto k3 = recovery_eval(r.net, ok, 3, threads);
    const auto k1 = recovery_eval(r.net, ok, 1, threads);
    pass = pass && k3.post_accuracy >= 0.5 && k1.post_accuracy <= 0.05;
    pooled_hits += k3.post_accuracy * static_cast<double>(k3.n);
    pooled_n += static_cast<double>(k3.n);
    per += fmt("%sseed %llu k=3 %.3f k=1 %.3f (n %zu)", per.empty() ? "" : "; ",
               static_cast<unsigned long long>(r.seed), k3.post_accuracy, k1.post_accuracy, k3.n);
  }
  verdict(9, pass, "3x3 average filter restores >= 50% of original labels and k=1 stays <= 5% on every seed");
  detail("%s", per.c_str());
  detail("pooled over seeds: k=3 restores %.3f of %.0f", pooled_hits / pooled_n, pooled_n);
  for (const auto& r : runs) {
    std::vector<AdversarialRecord> clean;
    for (std::size_t i = 0; i < r.test.size(); ++i) {
      AdversarialRecord c;
      c.image = r.test.images[i];
      c.original_label = r.test.labels[i];
      clean.push_back(c);
    }
    const auto rep = recovery_eval(r.net, clean, 3, threads);
    detail("seed %llu clean accuracy %.4f -> %.4f after the 3x3 filter",
           static_cast<unsigned long long>(r.seed), rep.pre_accuracy, rep.post_accuracy);
  }
}

void ac10() {
  std::mt19937_64 rng(1010);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng() % 60;
    std::vector<double> s(n);
    std::vector<int> l(n);
    const std::size_t levels = 2 + rng() % 10;
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng() % levels) / 3.0;
      l[i] = static_cast<int>(rng() % 2);
    }
    l[0] = 1;
    l[1] = 0;
    mismatches += roc_auc(s, l).auc != oracle::pair_auc(s, l);
  }
  verdict(10, mismatches == 0,
          fmt("%zu mismatches against exhaustive pair counting on 100 tied score sets", mismatches));
}

void ac11(const std::vector<SeedRun>& runs) {
  std::mt19937_64 rng(1111);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::size_t mismatches = 0;
  for (int i = 0; i < 1000; ++i) {
    const double p = u(rng), err = u(rng), eq = 20.0 * u(rng), ea = 20.0 * u(rng);
    const bool predict = p * err + (1.0 - p) * eq < ea;
    mismatches += (abstain_decide(p, err, eq, ea) == Action::predict) != predict;
  }

  bool sweep_ok = true;
  std::string per;
  for (const auto& r : runs) {
    std::vector<MixtureExample> items;
    std::vector<AdversarialRecord> adv;
    for (const auto& a : r.test_attacks)
      if (a.success) adv.push_back(a);
    const std::size_t count = std::min(adv.size(), r.test.size());
    for (std::size_t i = 0; i < count; ++i) {
      items.push_back({detector_score(r.model, r.net, adv[i].image), predict(r.net, adv[i].image).label,
                       adv[i].original_label, true});
      items.push_back({detector_score(r.model, r.net, r.test.images[i]),
                       predict(r.net, r.test.images[i]).label, r.test.labels[i], false});
    }
    std::mt19937_64 shuffle_rng(r.seed);
    std::shuffle(items.begin(), items.end(), shuffle_rng);
    const std::size_t half = items.size() / 2;
    std::vector<double> scores;
    std::vector<int> labels;
    for (std::size_t i = 0; i < half; ++i) {
      scores.push_back(items[i].score);
      labels.push_back(items[i].adversarial ? 1 : 0);
    }
    const auto cal = calibrate_omega(scores, labels);
    const std::vector<MixtureExample> held(items.begin() + static_cast<std::ptrdiff_t>(half), items.end());
    const auto errors = ErrorTable::from_validation(r.net, r.val.images, r.val.labels);
    const std::vector<double> tiny{1e-6};
    const auto low = selfaware_sweep(held, cal, errors, 10.0, tiny);
    const auto mid = selfaware_sweep(held, cal, errors, 10.0, linspace(2.0, 8.0, 61));
    double best_keep = 0.0, at = 0.0, adv_abst = 0.0;
    for (const auto& p : mid)
      if (p.normal_retained > best_keep) best_keep = p.normal_retained, at = p.e_a, adv_abst = p.adversarial_abstained;
    const bool ok = low[0].adversarial_abstained == 1.0 && best_keep >= 0.5;
    sweep_ok = sweep_ok && ok;
    per += fmt("%sseed %llu: small e_a abstains on %.3f of adversarials; keeps %.3f of normals at e_a %.1f "
               "(abstaining on %.3f of adversarials)",
               per.empty() ? "" : "; ", static_cast<unsigned long long>(r.seed),
               low[0].adversarial_abstained, best_keep, at, adv_abst);
  }
  verdict(11, mismatches == 0 && sweep_ok,
          fmt("%zu decision mismatches on 1000 random cases; sweep criteria %s on every seed", mismatches,
              sweep_ok ? "met" : "not met"));
  detail("%s", per.c_str());
}

void ac12(const SeedRun& run) {
  const fs::path dir = fs::temp_directory_path() / fmt("cguard_acceptance_%llu",
                                                       static_cast<unsigned long long>(std::random_device{}()));
  fs::create_directories(dir);
  bool pass = true;
  std::string notes;

  save_network(dir / "net.json", run.net);
  const Network net2 = load_network(dir / "net.json");
  save_network(dir / "net2.json", net2);
  const bool net_ok = net2 == run.net && read_text_file(dir / "net.json") == read_text_file(dir / "net2.json");

  save_cascade(dir / "det.json", run.model);
  const CascadeModel model2 = load_cascade(dir / "det.json");
  save_cascade(dir / "det2.json", model2);
  const bool det_ok = model2 == run.model && read_text_file(dir / "det.json") == read_text_file(dir / "det2.json");

  save_adversarial_batch(dir / "adv", run.test_attacks, R"({"source": "acceptance"})");
  const auto recs2 = load_adversarial_batch(dir / "adv");
  save_adversarial_batch(dir / "adv2", recs2, R"({"source": "acceptance"})");
  bool batch_ok = recs2.size() == run.test_attacks.size() &&
                  read_text_file(dir / "adv" / "manifest.json") == read_text_file(dir / "adv2" / "manifest.json");
  for (std::size_t i = 0; batch_ok && i < recs2.size(); ++i) batch_ok = recs2[i].image == run.test_attacks[i].image;

  // 1000 probe images: held-out normals first, then adversarials.
  std::vector<Tensor> probes;
  for (const auto& img : run.test.images)
    if (probes.size() < 1000) probes.push_back(img);
  for (const auto& img : run.adv_test)
    if (probes.size() < 1000) probes.push_back(img);
  for (const auto& img : run.ea_success)
    if (probes.size() < 1000) probes.push_back(img);
  const std::string doc = read_text_file(dir / "det.json");
  std::size_t lib_mismatch = 0, ref_mismatch = 0;
  for (const auto& img : probes) {
    const auto a = cascade_predict(run.model, run.net, img);
    const auto b = cascade_predict(model2, net2, img);
    lib_mismatch += a.adversarial != b.adversarial || a.exit_stage != b.exit_stage || a.decisions != b.decisions;
    const auto ref = oracle::reference_cascade(doc, oracle::reference_statistics(doc, layer_outputs(net2, img)));
    ref_mismatch += ref.adversarial != b.adversarial || ref.exit_stage != b.exit_stage;
  }
  pass = net_ok && det_ok && batch_ok && lib_mismatch == 0 && ref_mismatch == 0 && probes.size() == 1000;
  verdict(12, pass,
          fmt("network %s, detector %s, adversarial batch %s; reloaded detector differs on %zu of %zu images, "
              "artifact-only reference differs on %zu",
              net_ok ? "bit-exact" : "DIFFERS", det_ok ? "bit-exact" : "DIFFERS", batch_ok ? "bit-exact" : "DIFFERS",
              lib_mismatch, probes.size(), ref_mismatch));
  fs::remove_all(dir);
}

}  // namespace

int main() {
  const std::size_t threads = std::max(1u, std::thread::hardware_concurrency());
  std::printf("acceptance: %zu seeds, %zu images per class, %zu training attacks per seed, %zu threads\n",
              kSeeds.size(), kPerClass, kTrainAttacks, threads);
  const auto start = Clock::now();

  ac1();
  ac4();
  ac10();

  std::vector<SeedRun> runs;
  for (auto s : kSeeds) runs.push_back(run_seed(s, threads));

  ac2(runs.front(), threads);
  ac3(runs.front());
  ac5(runs);
  ac6(runs);
  ac7(runs, threads);
  ac8(runs);
  ac9(runs, threads);
  ac11(runs);
  ac12(runs.front());

  std::printf("acceptance: %d of 12 criteria failed, %.1f s\n", failures, seconds_since(start));
  return failures == 0 ? 0 : 1;
}
