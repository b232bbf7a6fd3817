#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cascade_guard/attacks.hpp"
#include "cascade_guard/dataset.hpp"
#include "cascade_guard/detector.hpp"
#include "cascade_guard/error.hpp"
#include "cascade_guard/recovery.hpp"
#include "cascade_guard/selfaware.hpp"
#include "cascade_guard/serialize.hpp"
#include "cascade_guard/statistics.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace cguard;

namespace {

struct Common {
  std::uint64_t seed = 1;
  std::size_t threads = 1;
  std::string config;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--seed", c.seed, "Random seed")->capture_default_str();
  cmd->add_option("--threads", c.threads, "Worker threads for attacks and feature extraction")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  cmd->add_option("--config", c.config, "File of key=value lines supplying any flag");
}

void require_dir(const std::string& path, const char* what) {
  if (!fs::is_directory(path)) throw ArgumentError(std::string(what) + " directory not found: " + path);
}

void require_file(const std::string& path, const char* what) {
  if (!fs::is_regular_file(path)) throw ArgumentError(std::string(what) + " file not found: " + path);
}

// Splits "lo:hi:count" into evenly spaced values.
std::vector<double> parse_range(const std::string& text) {
  std::vector<std::string> parts;
  std::stringstream ss(text);
  for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
  try {
    if (parts.size() == 3) return linspace(std::stod(parts[0]), std::stod(parts[1]), std::stoul(parts[2]));
    if (parts.size() == 1) return {std::stod(parts[0])};
  } catch (const std::exception&) {
  }
  throw ArgumentError("range must be lo:hi:count, got '" + text + "'");
}

std::vector<Tensor> images_of(const std::vector<AdversarialRecord>& records, bool successful_only) {
  std::vector<Tensor> out;
  for (const auto& r : records)
    if (!successful_only || r.success) out.push_back(r.image);
  return out;
}

std::vector<AdversarialRecord> successful(const std::vector<AdversarialRecord>& records) {
  std::vector<AdversarialRecord> out;
  for (const auto& r : records)
    if (r.success) out.push_back(r);
  return out;
}

Dataset load_split(const std::string& dir, const std::string& split) {
  require_dir(dir, "dataset");
  return load_dataset_dir(dir).subset(parse_split(split));
}

void check_fingerprint(const CascadeModel& model, const Network& net) {
  if (!model.network_fingerprint.empty() && model.network_fingerprint != network_fingerprint(net))
    throw ArgumentError("detector was trained against a different network");
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  Common common;
  std::string out;
  std::size_t per_class = 300;
};

void run_synth(const SynthArgs& a) {
  const Dataset d = synth_dataset(a.common.seed, a.per_class);
  save_dataset_dir(a.out, d);
  std::cout << "wrote " << d.size() << " images to " << a.out << "\n";
}

struct TrainArgs {
  Common common;
  std::string data, spec, out;
  TrainHyper hyper;
};

void run_train(TrainArgs a) {
  require_dir(a.data, "dataset");
  NetworkSpec spec = NetworkSpec::default_victim();
  if (!a.spec.empty()) {
    require_file(a.spec, "spec");
    spec = spec_from_json(read_text_file(a.spec));
  }
  const Dataset d = load_dataset_dir(a.data);
  a.hyper.seed = a.common.seed;
  const Network net = train_victim(d, spec, a.hyper);
  save_network(a.out, net);
  std::printf("train_accuracy %.4f\ntest_accuracy %.4f\n", net.training.train_accuracy,
              net.training.test_accuracy);
}

struct AttackArgs {
  Common common;
  std::string net, data, out, split = "test", kind = "gradient-box", policy = "random-other";
  std::size_t n = 100;
  std::size_t offset = 0;
  AttackConfig cfg;
};

void run_attack(AttackArgs a) {
  require_file(a.net, "network");
  const Network net = load_network(a.net);
  a.cfg.kind = parse_attack_kind(a.kind);
  a.cfg.target_policy = parse_target_policy(a.policy);
  a.cfg.seed = a.common.seed;
  a.cfg.validate();

  std::vector<AdversarialRecord> records;
  json prov{{"command", "attack"}, {"kind", a.kind}, {"seed", a.common.seed}, {"n", a.n},
            {"network", network_fingerprint(net)}, {"c", a.cfg.c}, {"step", a.cfg.step},
            {"max_iterations", a.cfg.max_iterations}, {"max_linf", a.cfg.max_linf},
            {"confidence_goal", a.cfg.confidence_goal}, {"target_policy", a.policy}};
  if (a.cfg.kind == AttackKind::evolutionary) {
    records = run_evolutionary(net, a.n, a.cfg, a.common.threads);
  } else {
    const Dataset d = load_split(a.data, a.split);
    // The first n correctly classified images from `offset` on.
    std::vector<std::size_t> ids;
    for (std::size_t i = a.offset; i < d.size() && ids.size() < a.n; ++i)
      if (predict(net, d.images[i]).label == d.labels[i]) ids.push_back(i);
    records = run_attacks(net, d.images, d.labels, ids, a.cfg, a.common.threads);
    prov["data"] = a.data;
    prov["split"] = a.split;
    prov["offset"] = a.offset;
  }
  save_adversarial_batch(a.out, records, prov.dump());
  const auto ok = std::count_if(records.begin(), records.end(), [](const auto& r) { return r.success; });
  std::printf("attacks %zu\nsuccessful %zu\n", records.size(), static_cast<std::size_t>(ok));
}

struct FitArgs {
  Common common;
  std::string net, normals, adversarials, out, split = "train";
  CascadeConfig cfg;
};

void run_fit(FitArgs a) {
  require_file(a.net, "network");
  require_dir(a.adversarials, "adversarial batch");
  const Network net = load_network(a.net);
  const Dataset normals = load_split(a.normals, a.split);
  const auto adv = images_of(load_adversarial_batch(a.adversarials), true);
  if (adv.empty()) throw ArgumentError("adversarial batch holds no successful attacks");
  a.cfg.seed = a.common.seed;
  a.cfg.threads = a.common.threads;
  CascadeModel model = train_cascade(net, normals.images, adv, a.cfg);
  model.network_fingerprint = network_fingerprint(net);
  save_cascade(a.out, model);
  std::printf("stages %zu\n", model.stages.size());
  for (std::size_t k = 0; k < model.stages.size(); ++k) {
    const auto& s = model.stages[k];
    std::printf("stage %zu tau %.6f train_fpr %.4f train_tpr %.4f\n", k, s.threshold,
                s.training_rates.fpr, s.training_rates.tpr);
  }
}

struct EvalArgs {
  Common common;
  std::string detector, net, normals, adversarials, out_csv, split = "test";
};

void run_evaluate(const EvalArgs& a) {
  require_file(a.detector, "detector");
  require_file(a.net, "network");
  require_dir(a.adversarials, "adversarial batch");
  const Network net = load_network(a.net);
  const CascadeModel model = load_cascade(a.detector);
  check_fingerprint(model, net);
  const Dataset normals = load_split(a.normals, a.split);
  const auto adv = images_of(load_adversarial_batch(a.adversarials), true);
  if (adv.empty()) throw ArgumentError("adversarial batch holds no successful attacks");
  const auto ev = evaluate_detector(model, net, normals.images, adv, a.common.threads);
  if (!a.out_csv.empty()) write_roc_csv(a.out_csv, ev);
  std::printf("auc %.6f\naccuracy %.6f\nbest_accuracy %.6f\n", ev.roc.auc, ev.accuracy, ev.best_accuracy);
  std::printf("fpr %.6f\ntpr %.6f\ncomposed_fpr %.6f\ncomposed_tpr %.6f\n", ev.overall.fpr,
              ev.overall.tpr, ev.composed.fpr, ev.composed.tpr);
  for (std::size_t k = 0; k < ev.stages.size(); ++k) {
    const auto r = ev.stages[k].rates();
    std::printf("stage %zu normals %zu/%zu adversarials %zu/%zu fpr %.4f tpr %.4f\n", k,
                ev.stages[k].normals_passed, ev.stages[k].normals_in, ev.stages[k].adversarials_passed,
                ev.stages[k].adversarials_in, r.fpr, r.tpr);
  }
}

struct CensusArgs {
  Common common;
  std::string net, data, adversarials, out_csv, split = "test";
  std::size_t points = 41;
  double percentile = 90.0;
};

void run_census(const CensusArgs& a) {
  require_file(a.net, "network");
  require_dir(a.adversarials, "adversarial batch");
  const Network net = load_network(a.net);
  const Dataset normals = load_split(a.data, a.split);
  const auto adv = images_of(load_adversarial_batch(a.adversarials), true);
  if (adv.empty()) throw ArgumentError("adversarial batch holds no successful attacks");

  std::vector<PredictionRecord> pn, pa;
  for (const auto& x : normals.images) pn.push_back(predict(net, x));
  for (const auto& x : adv) pa.push_back(predict(net, x));
  std::vector<double> pooled;
  for (const auto& p : pn) pooled.insert(pooled.end(), p.raw.begin(), p.raw.end());
  std::sort(pooled.begin(), pooled.end());
  const double at = percentile_sorted(pooled, a.percentile);

  auto thresholds = linspace(pooled.front(), pooled.back(), a.points);
  const auto cn = prediction_census(pn, thresholds);
  const auto ca = prediction_census(pa, thresholds);
  const auto sthr = linspace(0.0, 1.0, a.points);
  const auto sn = prediction_census(pn, sthr);
  const auto sa = prediction_census(pa, sthr);
  if (!a.out_csv.empty()) {
    std::ofstream out(a.out_csv);
    if (!out) throw FormatError("cannot write " + a.out_csv);
    out.precision(17);
    out << "scale,threshold,normal_mean,adversarial_mean\n";
    for (std::size_t i = 0; i < thresholds.size(); ++i)
      out << "raw," << thresholds[i] << ',' << cn.raw_mean[i] << ',' << ca.raw_mean[i] << '\n';
    for (std::size_t i = 0; i < sthr.size(); ++i)
      out << "softmax," << sthr[i] << ',' << sn.softmax_mean[i] << ',' << sa.softmax_mean[i] << '\n';
  }
  const std::vector<double> one{at};
  const auto n1 = prediction_census(pn, one), a1 = prediction_census(pa, one);
  std::printf("threshold %.6f (normal raw percentile %.1f)\nnormal_mean %.6f\nadversarial_mean %.6f\n", at,
              a.percentile, n1.raw_mean[0], a1.raw_mean[0]);
}

struct SpectralArgs {
  Common common;
  std::string net, data, adversarials, out_csv, split = "test";
  std::size_t max_images = 1000;
};

void run_spectral(const SpectralArgs& a) {
  require_file(a.net, "network");
  require_dir(a.adversarials, "adversarial batch");
  const Network net = load_network(a.net);
  const Dataset normals = load_split(a.data, a.split);
  const auto adv = images_of(load_adversarial_batch(a.adversarials), true);
  if (adv.empty()) throw ArgumentError("adversarial batch holds no successful attacks");
  std::vector<std::vector<double>> fn, fa;
  for (std::size_t i = 0; i < normals.size() && i < a.max_images; ++i)
    fn.push_back(penultimate_features(net, normals.images[i]));
  for (std::size_t i = 0; i < adv.size() && i < a.max_images; ++i)
    fa.push_back(penultimate_features(net, adv[i]));
  const auto rows = spectral_report(fn, fa);
  write_spectral_csv(a.out_csv, rows);
  std::printf("directions %zu\n", rows.size());
}

struct RecoverArgs {
  Common common;
  std::string detector, net, adversarials, out_csv;
  std::size_t k = 3;
};

void run_recover(const RecoverArgs& a) {
  require_file(a.net, "network");
  require_dir(a.adversarials, "adversarial batch");
  const Network net = load_network(a.net);
  auto records = successful(load_adversarial_batch(a.adversarials));
  if (!a.detector.empty()) {
    require_file(a.detector, "detector");
    const CascadeModel model = load_cascade(a.detector);
    check_fingerprint(model, net);
    std::vector<AdversarialRecord> flagged;
    for (auto& r : records)
      if (cascade_predict(model, net, r.image).adversarial) flagged.push_back(std::move(r));
    records = std::move(flagged);
  }
  std::vector<RecoveryReport> rows;
  for (std::size_t k : {std::size_t{1}, a.k}) {
    rows.push_back(recovery_eval(net, records, k, a.common.threads));
    const auto& r = rows.back();
    std::printf("k %zu n %zu pre_acc %.4f post_acc %.4f\n", r.k, r.n, r.pre_accuracy, r.post_accuracy);
    if (a.k == 1) break;
  }
  if (!a.out_csv.empty()) write_recovery_csv(a.out_csv, rows);
}

struct SelfAwareArgs {
  Common common;
  std::string detector, net, mixture, data, out_csv, ea_range = "2:8:13";
  double e_q = 10.0;
  bool random_guess = false;
};

void run_selfaware(const SelfAwareArgs& a) {
  require_file(a.detector, "detector");
  require_file(a.net, "network");
  require_dir(a.mixture, "mixture batch");
  const Network net = load_network(a.net);
  const CascadeModel model = load_cascade(a.detector);
  check_fingerprint(model, net);
  const auto adv = successful(load_adversarial_batch(a.mixture));
  if (adv.empty()) throw ArgumentError("mixture batch holds no successful attacks");
  const Dataset test = load_split(a.data, "test");
  const Dataset val = load_split(a.data, "val");

  // Equal numbers of normals and adversarials, shuffled, split in half:
  // the first half calibrates P(normal | score), the second half is swept.
  std::vector<MixtureExample> items;
  const std::size_t count = std::min(adv.size(), test.size());
  for (std::size_t i = 0; i < count; ++i) {
    const auto& r = adv[i];
    items.push_back({detector_score(model, net, r.image), predict(net, r.image).label, r.original_label, true});
    items.push_back({detector_score(model, net, test.images[i]), predict(net, test.images[i]).label,
                     test.labels[i], false});
  }
  std::mt19937_64 rng(a.common.seed);
  std::shuffle(items.begin(), items.end(), rng);
  const std::size_t half = items.size() / 2;
  std::vector<double> scores;
  std::vector<int> labels;
  for (std::size_t i = 0; i < half; ++i) {
    scores.push_back(items[i].score);
    labels.push_back(items[i].adversarial ? 1 : 0);
  }
  const auto cal = calibrate_omega(scores, labels);
  const std::vector<MixtureExample> held(items.begin() + static_cast<std::ptrdiff_t>(half), items.end());
  const ErrorTable errors = a.random_guess ? ErrorTable::random_guess(net.spec.classes)
                                           : ErrorTable::from_validation(net, val.images, val.labels);
  const auto points = selfaware_sweep(held, cal, errors, a.e_q, parse_range(a.ea_range));
  write_sweep_csv(a.out_csv, points);
  std::printf("calibration intercept %.6f slope %.6f\n", cal.intercept, cal.slope);
  for (const auto& p : points)
    std::printf("e_a %.3f abstain %.4f retained_acc %.4f loss %.4f\n", p.e_a, p.abstain_fraction,
                p.retained_accuracy, p.expected_loss);
}

// Reads key=value lines; blank lines and lines starting with '#' are skipped.
std::vector<std::pair<std::string, std::string>> read_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ArgumentError("config file not found: " + path);
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ArgumentError(path + ":" + std::to_string(no) + ": expected key=value");
    std::string key = trim(line.substr(0, eq));
    if (key.rfind("--", 0) == 0) key = key.substr(2);
    out.emplace_back(key, trim(line.substr(eq + 1)));
  }
  return out;
}

// Finds --config in argv (either "--config path" or "--config=path").
std::string config_path(const std::vector<std::string>& args) {
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) return args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) return args[i].substr(9);
  }
  return {};
}

int fail(int code, const std::string& message) {
  std::cerr << "ERROR " << code << ": " << message << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial example generation and cascade detection on a small CNN"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth-data", "Generate the synthetic shape dataset");
  add_common(c_synth, synth.common);
  c_synth->add_option("--out", synth.out, "Output dataset directory")->required();
  c_synth->add_option("--per-class", synth.per_class, "Images per class")->capture_default_str();

  TrainArgs train;
  auto* c_train = app.add_subcommand("train-victim", "Train the victim network");
  add_common(c_train, train.common);
  c_train->add_option("--data", train.data, "Dataset directory")->required();
  c_train->add_option("--spec", train.spec, "Network spec JSON (default: built-in victim)");
  c_train->add_option("--out", train.out, "Output network JSON")->required();
  c_train->add_option("--epochs", train.hyper.epochs)->capture_default_str();
  c_train->add_option("--lr", train.hyper.learning_rate)->capture_default_str();
  c_train->add_option("--batch", train.hyper.batch_size)->capture_default_str();

  AttackArgs attack;
  auto* c_attack = app.add_subcommand("attack", "Generate adversarial examples");
  add_common(c_attack, attack.common);
  c_attack->add_option("--net", attack.net, "Network JSON")->required();
  c_attack->add_option("--data", attack.data, "Dataset directory (gradient attacks)");
  c_attack->add_option("--kind", attack.kind, "gradient-box | gradient-sign | evolutionary")
      ->capture_default_str();
  c_attack->add_option("--n", attack.n, "Number of attacks")->capture_default_str();
  c_attack->add_option("--out", attack.out, "Output batch directory")->required();
  c_attack->add_option("--split", attack.split, "Source split")->capture_default_str();
  c_attack->add_option("--offset", attack.offset, "First source index")->capture_default_str();
  c_attack->add_option("--target-policy", attack.policy, "fixed | least-likely | random-other")
      ->capture_default_str();
  c_attack->add_option("--target", attack.cfg.fixed_target, "Target label for the fixed policy");
  c_attack->add_option("--c", attack.cfg.c, "L1 weight")->capture_default_str();
  c_attack->add_option("--step", attack.cfg.step, "Step size (epsilon for gradient-sign)")
      ->capture_default_str();
  c_attack->add_option("--max-iterations", attack.cfg.max_iterations)->capture_default_str();
  c_attack->add_option("--max-linf", attack.cfg.max_linf)->capture_default_str();
  c_attack->add_option("--confidence", attack.cfg.confidence_goal)->capture_default_str();
  c_attack->add_flag("--bisect-c", attack.cfg.bisect_c, "Bisect c for the smallest successful L1");
  c_attack->add_option("--population", attack.cfg.ga.population)->capture_default_str();
  c_attack->add_option("--mutation-rate", attack.cfg.ga.mutation_rate)->capture_default_str();
  c_attack->add_option("--mutation-stddev", attack.cfg.ga.mutation_stddev)->capture_default_str();
  c_attack->add_option("--generations", attack.cfg.ga.generations)->capture_default_str();

  FitArgs fit;
  auto* c_fit = app.add_subcommand("fit-detector", "Train the cascade detector");
  add_common(c_fit, fit.common);
  c_fit->add_option("--net", fit.net, "Network JSON")->required();
  c_fit->add_option("--normals", fit.normals, "Dataset directory of normal images")->required();
  c_fit->add_option("--normal-split", fit.split, "Split used as the normal pool")->capture_default_str();
  c_fit->add_option("--adversarials", fit.adversarials, "Adversarial batch directory")->required();
  c_fit->add_option("--target-tpr", fit.cfg.target_tpr)->capture_default_str();
  c_fit->add_option("--c", fit.cfg.c, "SVM regularization")->capture_default_str();
  c_fit->add_option("--svm-iterations", fit.cfg.svm_iterations)->capture_default_str();
  c_fit->add_option("--z-clip", fit.cfg.z_clip)->capture_default_str();
  c_fit->add_option("--bank-images", fit.cfg.bank_images)->capture_default_str();
  c_fit->add_option("--max-stages", fit.cfg.max_stages)->capture_default_str();
  c_fit->add_option("--out", fit.out, "Output detector JSON")->required();

  EvalArgs eval;
  auto* c_eval = app.add_subcommand("evaluate", "ROC, AUC and per-stage rates of a detector");
  add_common(c_eval, eval.common);
  c_eval->add_option("--detector", eval.detector)->required();
  c_eval->add_option("--net", eval.net)->required();
  c_eval->add_option("--normals", eval.normals)->required();
  c_eval->add_option("--normal-split", eval.split)->capture_default_str();
  c_eval->add_option("--adversarials", eval.adversarials)->required();
  c_eval->add_option("--out-csv", eval.out_csv);

  CensusArgs census;
  auto* c_census = app.add_subcommand("census", "Counts of classes above score thresholds");
  add_common(c_census, census.common);
  c_census->add_option("--net", census.net)->required();
  c_census->add_option("--data", census.data)->required();
  c_census->add_option("--split", census.split)->capture_default_str();
  c_census->add_option("--adversarials", census.adversarials)->required();
  c_census->add_option("--points", census.points)->capture_default_str();
  c_census->add_option("--percentile", census.percentile)->capture_default_str();
  c_census->add_option("--out-csv", census.out_csv);

  SpectralArgs spectral;
  auto* c_spec = app.add_subcommand("spectral", "Eigenvector extremal values and stds, normal vs adversarial");
  add_common(c_spec, spectral.common);
  c_spec->add_option("--net", spectral.net)->required();
  c_spec->add_option("--data", spectral.data)->required();
  c_spec->add_option("--split", spectral.split)->capture_default_str();
  c_spec->add_option("--adversarials", spectral.adversarials)->required();
  c_spec->add_option("--max-images", spectral.max_images)->capture_default_str();
  c_spec->add_option("--out-csv", spectral.out_csv)->required();

  RecoverArgs recover;
  auto* c_rec = app.add_subcommand("recover", "Average-filter recovery report");
  add_common(c_rec, recover.common);
  c_rec->add_option("--detector", recover.detector, "Only filter images this detector flags");
  c_rec->add_option("--net", recover.net)->required();
  c_rec->add_option("--adversarials", recover.adversarials)->required();
  c_rec->add_option("--k", recover.k, "Odd filter size")->capture_default_str();
  c_rec->add_option("--out-csv", recover.out_csv);

  SelfAwareArgs self;
  auto* c_self = app.add_subcommand("selfaware", "Predict/abstain sweep over the abstain cost");
  add_common(c_self, self.common);
  c_self->add_option("--detector", self.detector)->required();
  c_self->add_option("--net", self.net)->required();
  c_self->add_option("--mixture", self.mixture, "Adversarial batch mixed with as many test normals")
      ->required();
  c_self->add_option("--data", self.data, "Dataset directory (test normals, val error table)")->required();
  c_self->add_option("--eq", self.e_q)->capture_default_str();
  c_self->add_option("--ea-range", self.ea_range, "lo:hi:count")->capture_default_str();
  c_self->add_flag("--random-guess-error", self.random_guess, "Use (C-1)/C as P(error | normal)");
  c_self->add_option("--out-csv", self.out_csv)->required();

  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    const std::string cfg = config_path(args);
    if (!cfg.empty() && !args.empty()) {
      // Config entries go right after the subcommand so later command-line
      // values win under the take-last policy. Keys the command lacks are
      // ignored, so one file can serve a whole pipeline.
      CLI::App* sub = nullptr;
      for (auto* s : app.get_subcommands({}))
        if (s->get_name() == args[0]) sub = s;
      std::vector<std::string> injected;
      if (sub)
        for (const auto& [key, value] : read_config(cfg)) {
          if (key == "config") continue;
          const auto* opt = sub->get_option_no_throw("--" + key);
          if (!opt) continue;
          if (opt->get_type_size() == 0) {
            if (value == "true" || value == "1") injected.push_back("--" + key);
          } else {
            injected.push_back("--" + key + "=" + value);
          }
        }
      args.insert(args.begin() + 1, injected.begin(), injected.end());
    }
  } catch (const std::exception& e) {
    return fail(1, e.what());
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(1, e.what());
  }

  try {
    if (c_synth->parsed()) run_synth(synth);
    else if (c_train->parsed()) run_train(train);
    else if (c_attack->parsed()) run_attack(attack);
    else if (c_fit->parsed()) run_fit(fit);
    else if (c_eval->parsed()) run_evaluate(eval);
    else if (c_census->parsed()) run_census(census);
    else if (c_spec->parsed()) run_spectral(spectral);
    else if (c_rec->parsed()) run_recover(recover);
    else if (c_self->parsed()) run_selfaware(self);
  } catch (const std::invalid_argument& e) {
    return fail(1, e.what());
  } catch (const FormatError& e) {
    return fail(1, e.what());
  } catch (const std::exception& e) {
    return fail(2, e.what());
  }
  return 0;
}
