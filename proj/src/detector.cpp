#include "cascade_guard/detector.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "cascade_guard/attacks.hpp"
#include "cascade_guard/error.hpp"
#include "cascade_guard/parallel.hpp"

namespace cguard {

double LinearSvm::standardized(std::size_t j, double x) const {
  return std::clamp((x - feature_means[j]) / feature_stds[j], -z_clip, z_clip);
}

double LinearSvm::decision(std::span<const double> features) const {
  if (features.size() != weights.size())
    throw ShapeError("SVM expects " + std::to_string(weights.size()) + " features, got " +
                     std::to_string(features.size()));
  double s = bias;
  for (std::size_t j = 0; j < weights.size(); ++j) s += weights[j] * standardized(j, features[j]);
  return s;
}

void LinearSvm::validate() const {
  if (weights.empty()) throw ShapeError("SVM has no features");
  if (feature_means.size() != weights.size() || feature_stds.size() != weights.size())
    throw ShapeError("SVM standardization vectors do not match its dimension");
  if (!std::isfinite(bias)) throw NumericError("SVM bias is not finite");
  for (double w : weights)
    if (!std::isfinite(w)) throw NumericError("SVM weights are not finite");
  for (double s : feature_stds)
    if (!(s > 0.0) || !std::isfinite(s)) throw NumericError("SVM feature stds must be positive");
  if (!(c > 0.0)) throw ArgumentError("SVM regularization C must be positive");
  if (!(z_clip > 0.0)) throw ArgumentError("SVM clip level must be positive");
}

namespace {

struct SvmProblem {
  std::vector<std::vector<double>> z;  // standardized rows
  std::vector<double> y;               // +1 adversarial, -1 normal
  std::size_t positives = 0;
};

double sign_label(int label) {
  if (label == 1) return 1.0;
  if (label == 0 || label == -1) return -1.0;
  throw ArgumentError("SVM labels must be 1 (adversarial) or 0/-1 (normal), got " +
                      std::to_string(label));
}

// Bias minimizing sum hinge(y_i (u_i + b)). Each breakpoint raises the slope by
// one starting from -positives, so the minimum sits between breakpoints
// number `positives` and `positives + 1`; the midpoint is returned.
double optimal_bias(const std::vector<double>& u, const std::vector<double>& y, std::size_t positives,
                    std::vector<double>& scratch) {
  scratch.resize(u.size());
  for (std::size_t i = 0; i < u.size(); ++i) scratch[i] = y[i] - u[i];
  std::sort(scratch.begin(), scratch.end());
  return 0.5 * (scratch[positives - 1] + scratch[positives]);
}

double objective(const std::vector<double>& w, double b, const SvmProblem& p, double c) {
  double reg = 0.0;
  for (double x : w) reg += x * x;
  double hinge = 0.0;
  for (std::size_t i = 0; i < p.z.size(); ++i) {
    double u = b;
    for (std::size_t j = 0; j < w.size(); ++j) u += w[j] * p.z[i][j];
    hinge += std::max(0.0, 1.0 - p.y[i] * u);
  }
  return 0.5 * reg + c * hinge;
}

}  // namespace

LinearSvm train_svm(const std::vector<std::vector<double>>& features, const std::vector<int>& labels,
                    const SvmOptions& options) {
  if (features.size() != labels.size())
    throw ArgumentError("SVM got " + std::to_string(features.size()) + " rows and " +
                        std::to_string(labels.size()) + " labels");
  if (!(options.c > 0.0)) throw ArgumentError("SVM regularization C must be positive");
  if (!(options.z_clip > 0.0)) throw ArgumentError("SVM clip level must be positive");
  if (features.empty()) throw ArgumentError("SVM needs training data");
  const std::size_t n = features.size();
  const std::size_t d = features.front().size();
  if (d == 0) throw ShapeError("SVM features must be nonempty");

  SvmProblem p;
  p.y.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (features[i].size() != d) throw ShapeError("SVM feature rows must share a length");
    for (double v : features[i])
      if (!std::isfinite(v)) throw NumericError("SVM feature row " + std::to_string(i) + " is not finite");
    p.y[i] = sign_label(labels[i]);
    if (p.y[i] > 0) ++p.positives;
  }
  if (p.positives == 0 || p.positives == n)
    throw ArgumentError("SVM training needs both adversarial and normal examples");

  LinearSvm svm;
  svm.c = options.c;
  svm.seed = options.seed;
  svm.z_clip = options.z_clip;
  svm.feature_means.assign(d, 0.0);
  svm.feature_stds.assign(d, 0.0);
  for (const auto& row : features)
    for (std::size_t j = 0; j < d; ++j) svm.feature_means[j] += row[j];
  for (double& m : svm.feature_means) m /= static_cast<double>(n);
  for (const auto& row : features)
    for (std::size_t j = 0; j < d; ++j) {
      const double dv = row[j] - svm.feature_means[j];
      svm.feature_stds[j] += dv * dv;
    }
  for (double& s : svm.feature_stds) {
    s = std::sqrt(s / static_cast<double>(n));
    if (!(s > 1e-12)) s = 1.0;  // constant feature: leave it centered at zero
  }
  p.z.assign(n, std::vector<double>(d));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j)
      p.z[i][j] = svm.standardized(j, features[i][j]);

  // Strong convexity modulus is 1, so steps 1/t give the usual O(log t / t) rate.
  std::vector<double> w(d, 0.0), grad(d), u(n), scratch;
  std::vector<double> best_w = w;
  double best_b = 0.0;
  double best_obj = std::numeric_limits<double>::infinity();
  const std::size_t iterations = std::max<std::size_t>(options.iterations, 1);
  for (std::size_t t = 1; t <= iterations; ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += w[j] * p.z[i][j];
      u[i] = s;
    }
    const double b = optimal_bias(u, p.y, p.positives, scratch);
    double reg = 0.0;
    for (double x : w) reg += x * x;
    double hinge = 0.0;
    grad = w;
    for (std::size_t i = 0; i < n; ++i) {
      const double m = 1.0 - p.y[i] * (u[i] + b);
      if (m > 0.0) {
        hinge += m;
        for (std::size_t j = 0; j < d; ++j) grad[j] -= options.c * p.y[i] * p.z[i][j];
      }
    }
    const double obj = 0.5 * reg + options.c * hinge;
    if (obj < best_obj) {
      best_obj = obj;
      best_w = w;
      best_b = b;
    }
    const double eta = 1.0 / static_cast<double>(t);
    for (std::size_t j = 0; j < d; ++j) w[j] -= eta * grad[j];
  }
  svm.weights = std::move(best_w);
  svm.bias = best_b;
  svm.validate();
  return svm;
}

double svm_objective(const LinearSvm& svm, const std::vector<std::vector<double>>& features,
                     const std::vector<int>& labels) {
  SvmProblem p;
  for (std::size_t i = 0; i < features.size(); ++i) {
    std::vector<double> z(svm.dimension());
    for (std::size_t j = 0; j < z.size(); ++j) z[j] = svm.standardized(j, features[i][j]);
    p.z.push_back(std::move(z));
    p.y.push_back(sign_label(labels[i]));
  }
  return objective(svm.weights, svm.bias, p, svm.c);
}

double calibrate_threshold(std::span<const double> scores, std::span<const int> labels,
                           double target_tpr) {
  if (scores.size() != labels.size()) throw ArgumentError("scores and labels differ in length");
  if (!(target_tpr > 0.0 && target_tpr <= 1.0))
    throw ArgumentError("target TPR must lie in (0, 1]");
  std::vector<double> pos;
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (labels[i] == 1) pos.push_back(scores[i]);
  if (pos.empty()) throw ArgumentError("threshold calibration needs adversarial examples");
  std::sort(pos.begin(), pos.end());
  const std::size_t n = pos.size();
  // Fewest flagged positives m with m / n >= target; tau is the m-th largest score.
  std::size_t m = 1;
  while (m < n && static_cast<double>(m) / static_cast<double>(n) < target_tpr) ++m;
  if (static_cast<double>(m) / static_cast<double>(n) < target_tpr)
    throw NumericError("target TPR is unreachable");
  return pos[n - m];
}

void CascadeModel::validate() const {
  if (stages.empty()) throw ShapeError("cascade has no stages");
  if (stages.size() > banks.size())
    throw ShapeError("cascade has more stages than PCA banks");
  for (std::size_t m = 0; m < banks.size(); ++m) {
    banks[m].validate();
    if (banks[m].layer != m) throw ShapeError("PCA banks must be ordered by layer");
  }
  std::size_t dim = 0;
  for (std::size_t k = 0; k < stages.size(); ++k) {
    if (stages[k].layer != k) throw ShapeError("cascade stages must be ordered by layer");
    dim += 6 * banks[k].channels();
    stages[k].svm.validate();
    if (stages[k].svm.dimension() != dim)
      throw ShapeError("stage " + std::to_string(k) + " expects " + std::to_string(dim) +
                       " features, SVM has " + std::to_string(stages[k].svm.dimension()));
    if (!std::isfinite(stages[k].threshold)) throw NumericError("stage threshold is not finite");
  }
  if (!(target_tpr > 0.0 && target_tpr <= 1.0)) throw ArgumentError("target TPR must lie in (0, 1]");
}

ImageFeatures image_features(const Network& net, const Tensor& image,
                             const std::vector<PcaBank>& banks) {
  const auto outputs = layer_outputs(net, image);
  if (banks.size() > outputs.size())
    throw ShapeError("more PCA banks than conv layers in the network");
  ImageFeatures f(banks.size());
  for (std::size_t m = 0; m < banks.size(); ++m)
    f[m] = layer_feature_vector(outputs[m], banks[m]).concatenated();
  return f;
}

std::vector<ImageFeatures> batch_features(const Network& net, const std::vector<Tensor>& images,
                                          const std::vector<PcaBank>& banks, std::size_t threads) {
  std::vector<ImageFeatures> out(images.size());
  parallel_for(images.size(), threads,
               [&](std::size_t i) { out[i] = image_features(net, images[i], banks); });
  return out;
}

std::vector<double> stage_input(const ImageFeatures& f, std::size_t stage) {
  if (stage >= f.size()) throw ShapeError("features stop before stage " + std::to_string(stage));
  std::vector<double> v;
  for (std::size_t m = 0; m <= stage; ++m) v.insert(v.end(), f[m].begin(), f[m].end());
  return v;
}

std::vector<PcaBank> fit_banks(const Network& net, const std::vector<Tensor>& normals,
                               std::size_t max_images, std::uint64_t seed, std::size_t threads) {
  if (normals.empty()) throw ArgumentError("PCA banks need normal images");
  std::vector<std::size_t> idx(normals.size());
  std::iota(idx.begin(), idx.end(), 0);
  if (max_images > 0 && max_images < idx.size()) {
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(max_images);
    std::sort(idx.begin(), idx.end());
  }
  std::vector<std::vector<Tensor>> outs(idx.size());
  parallel_for(idx.size(), threads, [&](std::size_t i) { outs[i] = layer_outputs(net, normals[idx[i]]); });
  const std::size_t layers = net.spec.conv_layer_count();
  std::vector<PcaBank> banks;
  for (std::size_t m = 0; m < layers; ++m) {
    std::vector<Tensor> layer;
    layer.reserve(outs.size());
    for (auto& o : outs) layer.push_back(std::move(o[m]));
    banks.push_back(fit_pca_bank(m, layer));
  }
  return banks;
}

CascadeModel train_cascade(const std::vector<ImageFeatures>& normal_pool,
                           const std::vector<ImageFeatures>& adversarials,
                           std::vector<PcaBank> banks, const CascadeConfig& config) {
  if (adversarials.empty()) throw ArgumentError("cascade training needs adversarial examples");
  if (normal_pool.size() < adversarials.size())
    throw ArgumentError("normal pool (" + std::to_string(normal_pool.size()) +
                        ") must be at least as large as the adversarial set (" +
                        std::to_string(adversarials.size()) + ")");
  if (banks.empty()) throw ArgumentError("cascade training needs PCA banks");

  CascadeModel model;
  model.target_tpr = config.target_tpr;
  model.seed = config.seed;
  model.normal_count = normal_pool.size();
  model.adversarial_count = adversarials.size();
  const std::size_t layers =
      config.max_stages == 0 ? banks.size() : std::min(config.max_stages, banks.size());
  model.banks = std::move(banks);

  std::vector<std::size_t> pool(normal_pool.size());
  std::iota(pool.begin(), pool.end(), 0);
  std::vector<std::size_t> positives(adversarials.size());
  std::iota(positives.begin(), positives.end(), 0);
  std::mt19937_64 rng(config.seed);

  for (std::size_t k = 0; k < layers && !pool.empty() && !positives.empty(); ++k) {
    std::vector<std::size_t> drawn = pool;
    std::shuffle(drawn.begin(), drawn.end(), rng);
    drawn.resize(std::min(positives.size(), pool.size()));

    std::vector<std::vector<double>> x;
    std::vector<int> y;
    for (std::size_t i : drawn) {
      x.push_back(stage_input(normal_pool[i], k));
      y.push_back(0);
    }
    for (std::size_t i : positives) {
      x.push_back(stage_input(adversarials[i], k));
      y.push_back(1);
    }
    CascadeStage stage;
    stage.layer = k;
    stage.svm = train_svm(x, y, {config.c, config.svm_iterations, derive_seed(config.seed, k), config.z_clip});

    std::vector<double> pos_scores;
    for (std::size_t i : positives) pos_scores.push_back(stage.svm.decision(stage_input(adversarials[i], k)));
    const std::vector<int> ones(pos_scores.size(), 1);
    stage.threshold = calibrate_threshold(pos_scores, ones, config.target_tpr);

    std::vector<std::size_t> kept_pos;
    for (std::size_t j = 0; j < positives.size(); ++j)
      if (pos_scores[j] >= stage.threshold) kept_pos.push_back(positives[j]);
    std::vector<std::size_t> kept_pool;
    for (std::size_t i : pool)
      if (stage.svm.decision(stage_input(normal_pool[i], k)) >= stage.threshold) kept_pool.push_back(i);

    stage.training_rates.tpr = static_cast<double>(kept_pos.size()) / static_cast<double>(positives.size());
    stage.training_rates.fpr = static_cast<double>(kept_pool.size()) / static_cast<double>(pool.size());
    positives = std::move(kept_pos);
    pool = std::move(kept_pool);
    model.stages.push_back(std::move(stage));
  }
  model.validate();
  return model;
}

CascadeModel train_cascade(const Network& net, const std::vector<Tensor>& normal_pool,
                           const std::vector<Tensor>& adversarials, const CascadeConfig& config) {
  auto banks = fit_banks(net, normal_pool, config.bank_images, config.seed, config.threads);
  const auto nf = batch_features(net, normal_pool, banks, config.threads);
  const auto af = batch_features(net, adversarials, banks, config.threads);
  return train_cascade(nf, af, std::move(banks), config);
}

CascadeDecision cascade_predict(const CascadeModel& model, const ImageFeatures& features) {
  CascadeDecision out;
  std::vector<double> input;
  for (std::size_t k = 0; k < model.stages.size(); ++k) {
    if (k >= features.size()) throw ShapeError("features stop before stage " + std::to_string(k));
    input.insert(input.end(), features[k].begin(), features[k].end());
    const double d = model.stages[k].svm.decision(input);
    out.decisions.push_back(d);
    if (d < model.stages[k].threshold) {
      out.exit_stage = k;
      return out;
    }
  }
  out.adversarial = true;
  out.exit_stage = model.stages.size();
  return out;
}

CascadeDecision cascade_predict(const CascadeModel& model, const Network& net, const Tensor& image) {
  return cascade_predict(model, image_features(net, image, model.banks));
}

double detector_score(const CascadeModel& model, const CascadeDecision& decision) {
  const std::size_t k = decision.decisions.size() - 1;
  const double margin = decision.decisions[k] - model.stages[k].threshold;
  return decision.adversarial ? margin + 1.0 : margin;
}

double detector_score(const CascadeModel& model, const Network& net, const Tensor& image) {
  return detector_score(model, cascade_predict(model, net, image));
}

RocCurve roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ArgumentError("scores and labels differ in length");
  std::uint64_t pos = 0, neg = 0;
  for (int l : labels) (l == 1 ? pos : neg)++;
  if (pos == 0 || neg == 0) throw ArgumentError("ROC needs both positive and negative examples");
  for (double s : scores)
    if (std::isnan(s)) throw NumericError("ROC scores contain NaN");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  RocCurve roc;
  roc.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  std::uint64_t tp = 0, fp = 0;
  // Twice the area times pos*neg, kept integral so the result is exact.
  std::uint64_t area2 = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double t = scores[order[i]];
    std::uint64_t dtp = 0, dfp = 0;
    for (; i < order.size() && scores[order[i]] == t; ++i) (labels[order[i]] == 1 ? dtp : dfp)++;
    area2 += dfp * (2 * tp + dtp);
    tp += dtp;
    fp += dfp;
    roc.points.push_back({t, static_cast<double>(fp) / static_cast<double>(neg),
                          static_cast<double>(tp) / static_cast<double>(pos)});
  }
  roc.auc = static_cast<double>(area2) / static_cast<double>(2 * pos * neg);
  return roc;
}

StageRates compose_rates(std::span<const StageRates> stages) {
  StageRates r;
  for (const auto& s : stages) {
    if (!(s.fpr >= 0.0 && s.fpr <= 1.0 && s.tpr >= 0.0 && s.tpr <= 1.0))
      throw ArgumentError("stage rates must lie in [0, 1]");
    r.fpr *= s.fpr;
    r.tpr *= s.tpr;
  }
  return r;
}

StageRates StageCount::rates() const {
  auto ratio = [](std::size_t a, std::size_t b) {
    return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b);
  };
  return {ratio(normals_passed, normals_in), ratio(adversarials_passed, adversarials_in)};
}

DetectorEvaluation evaluate_detector(const CascadeModel& model,
                                     const std::vector<ImageFeatures>& normals,
                                     const std::vector<ImageFeatures>& adversarials) {
  DetectorEvaluation ev;
  ev.stages.assign(model.stages.size(), {});
  std::size_t correct = 0, flagged_normals = 0, flagged_adv = 0;
  auto run = [&](const std::vector<ImageFeatures>& set, int label) {
    for (const auto& f : set) {
      const auto d = cascade_predict(model, f);
      for (std::size_t k = 0; k < d.decisions.size(); ++k) {
        auto& c = ev.stages[k];
        const bool passed = d.decisions[k] >= model.stages[k].threshold;
        if (label == 1) {
          ++c.adversarials_in;
          c.adversarials_passed += passed;
        } else {
          ++c.normals_in;
          c.normals_passed += passed;
        }
      }
      if (d.adversarial == (label == 1)) ++correct;
      if (d.adversarial) (label == 1 ? flagged_adv : flagged_normals)++;
      ev.scores.push_back(detector_score(model, d));
      ev.labels.push_back(label);
    }
  };
  run(normals, 0);
  run(adversarials, 1);
  ev.roc = roc_auc(ev.scores, ev.labels);
  ev.accuracy = static_cast<double>(correct) / static_cast<double>(ev.scores.size());
  ev.overall = {static_cast<double>(flagged_normals) / static_cast<double>(normals.size()),
                static_cast<double>(flagged_adv) / static_cast<double>(adversarials.size())};
  std::vector<StageRates> rates;
  for (const auto& c : ev.stages) rates.push_back(c.rates());
  ev.composed = compose_rates(rates);
  const double p = static_cast<double>(adversarials.size());
  const double n = static_cast<double>(normals.size());
  for (const auto& pt : ev.roc.points) {
    const double acc = (pt.tpr * p + (1.0 - pt.fpr) * n) / (p + n);
    if (acc > ev.best_accuracy) {
      ev.best_accuracy = acc;
      ev.best_threshold = pt.threshold;
    }
  }
  return ev;
}

DetectorEvaluation evaluate_detector(const CascadeModel& model, const Network& net,
                                     const std::vector<Tensor>& normals,
                                     const std::vector<Tensor>& adversarials, std::size_t threads) {
  return evaluate_detector(model, batch_features(net, normals, model.banks, threads),
                           batch_features(net, adversarials, model.banks, threads));
}

void write_roc_csv(const std::filesystem::path& path, const DetectorEvaluation& eval) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out.precision(17);
  out << "threshold,fpr,tpr\n";
  for (const auto& p : eval.roc.points) out << p.threshold << ',' << p.fpr << ',' << p.tpr << '\n';
  out << "# auc=" << eval.roc.auc << ",accuracy=" << eval.accuracy
      << ",best_accuracy=" << eval.best_accuracy << ",best_threshold=" << eval.best_threshold << '\n';
}

}  // namespace cguard
