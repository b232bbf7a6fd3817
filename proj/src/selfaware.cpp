#include "cascade_guard/selfaware.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include "cascade_guard/error.hpp"

namespace cguard {

namespace {

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// log(1 + exp(x)) without overflow.
double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

constexpr double kRidge = 1e-6;

struct Fit {
  std::span<const double> z;
  std::vector<double> t;  // 1 for normal

  // Penalized negative log-likelihood.
  double loss(double a, double b) const {
    double l = 0.5 * kRidge * (a * a + b * b);
    for (std::size_t i = 0; i < z.size(); ++i) {
      const double eta = a + b * z[i];
      l += softplus(eta) - t[i] * eta;
    }
    return l;
  }

  // Damped Newton over (a, b), or over a alone when fix_slope.
  void solve(double& a, double& b, bool fix_slope) const {
    for (int it = 0; it < 500; ++it) {
      double ga = kRidge * a, gb = kRidge * b, haa = kRidge, hab = 0.0, hbb = kRidge;
      for (std::size_t i = 0; i < z.size(); ++i) {
        const double p = sigmoid(a + b * z[i]);
        const double r = p - t[i];
        const double w = p * (1.0 - p);
        ga += r;
        gb += r * z[i];
        haa += w;
        hab += w * z[i];
        hbb += w * z[i] * z[i];
      }
      double da, db;
      if (fix_slope) {
        da = -ga / haa;
        db = 0.0;
      } else {
        const double det = haa * hbb - hab * hab;
        da = -(hbb * ga - hab * gb) / det;
        db = -(haa * gb - hab * ga) / det;
      }
      const double base = loss(a, b);
      double step = 1.0;
      while (step > 1e-12 && !(loss(a + step * da, b + step * db) <= base)) step *= 0.5;
      a += step * da;
      b += step * db;
      if (std::abs(step * da) + std::abs(step * db) < 1e-12) break;
    }
  }
};

}  // namespace

double OmegaCalibration::probability_normal(double score) const {
  return sigmoid(intercept + slope * score);
}

OmegaCalibration calibrate_omega(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ArgumentError("scores and labels differ in length");
  std::size_t normals = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw ArgumentError("calibration labels must be 0 (normal) or 1 (adversarial)");
    normals += l == 0;
  }
  if (normals == 0 || normals == labels.size())
    throw ArgumentError("calibration needs both normal and adversarial scores");
  for (double s : scores)
    if (!std::isfinite(s)) throw NumericError("calibration scores must be finite");

  // Fit on standardized scores for conditioning, then map back.
  const double n = static_cast<double>(scores.size());
  double mean = 0.0;
  for (double s : scores) mean += s;
  mean /= n;
  double var = 0.0;
  for (double s : scores) var += (s - mean) * (s - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> z(scores.size());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = sd > 0 ? (scores[i] - mean) / sd : 0.0;

  Fit fit{z, std::vector<double>(labels.size())};
  for (std::size_t i = 0; i < labels.size(); ++i) fit.t[i] = labels[i] == 0 ? 1.0 : 0.0;
  double a = 0.0, b = 0.0;
  fit.solve(a, b, sd == 0.0);
  if (b > 0.0) {
    b = 0.0;
    fit.solve(a, b, true);
  }
  OmegaCalibration cal;
  cal.slope = sd > 0 ? b / sd : 0.0;
  cal.intercept = a - cal.slope * mean;
  return cal;
}

double omega_log_likelihood(const OmegaCalibration& cal, std::span<const double> scores,
                            std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ArgumentError("scores and labels differ in length");
  double ll = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double eta = cal.intercept + cal.slope * scores[i];
    ll += (labels[i] == 0 ? eta : 0.0) - softplus(eta);
  }
  return ll;
}

Action abstain_decide(double p_normal, double p_err, double e_q, double e_a) {
  if (!(p_normal >= 0.0 && p_normal <= 1.0) || !(p_err >= 0.0 && p_err <= 1.0))
    throw ArgumentError("probabilities must lie in [0, 1]");
  if (!(e_q > 0.0) || !(e_a > 0.0)) throw ArgumentError("costs must be positive");
  return p_normal * p_err + (1.0 - p_normal) * e_q < e_a ? Action::predict : Action::abstain;
}

double ErrorTable::rate(int predicted) const {
  if (predicted >= 0 && static_cast<std::size_t>(predicted) < per_class.size()) return per_class[predicted];
  return global;
}

ErrorTable ErrorTable::from_validation(const Network& net, const std::vector<Tensor>& images,
                                       const std::vector<int>& labels, std::size_t min_count) {
  if (images.size() != labels.size()) throw ArgumentError("images and labels differ in length");
  if (images.empty()) throw ArgumentError("error table needs validation images");
  const std::size_t classes = net.spec.classes;
  std::vector<std::size_t> count(classes, 0), wrong(classes, 0);
  std::size_t total_wrong = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const int p = predict(net, images[i]).label;
    ++count[p];
    if (p != labels[i]) {
      ++wrong[p];
      ++total_wrong;
    }
  }
  ErrorTable t;
  t.global = static_cast<double>(total_wrong) / static_cast<double>(images.size());
  t.per_class.assign(classes, t.global);
  for (std::size_t c = 0; c < classes; ++c)
    if (count[c] >= min_count && count[c] > 0)
      t.per_class[c] = static_cast<double>(wrong[c]) / static_cast<double>(count[c]);
  return t;
}

ErrorTable ErrorTable::random_guess(std::size_t classes) {
  if (classes == 0) throw ArgumentError("class count must be positive");
  ErrorTable t;
  t.global = static_cast<double>(classes - 1) / static_cast<double>(classes);
  t.per_class.assign(classes, t.global);
  return t;
}

std::vector<SweepPoint> selfaware_sweep(const std::vector<MixtureExample>& mixture,
                                        const OmegaCalibration& cal, const ErrorTable& errors,
                                        double e_q, std::span<const double> e_a_values) {
  if (mixture.empty()) throw ArgumentError("self-aware sweep needs a nonempty mixture");
  std::size_t normals = 0;
  for (const auto& m : mixture) normals += !m.adversarial;
  const std::size_t adversarials = mixture.size() - normals;
  auto ratio = [](std::size_t a, std::size_t b) {
    return b == 0 ? std::numeric_limits<double>::quiet_NaN()
                  : static_cast<double>(a) / static_cast<double>(b);
  };

  std::vector<SweepPoint> out;
  for (double e_a : e_a_values) {
    std::size_t abstained = 0, retained_correct = 0, normal_kept = 0, adv_abstained = 0;
    double loss = 0.0;
    for (const auto& m : mixture) {
      const Action act =
          abstain_decide(cal.probability_normal(m.score), errors.rate(m.predicted), e_q, e_a);
      if (act == Action::abstain) {
        ++abstained;
        adv_abstained += m.adversarial;
        loss += e_a;
        continue;
      }
      const bool correct = m.truth >= 0 && m.predicted == m.truth;
      retained_correct += correct;
      normal_kept += !m.adversarial;
      loss += m.adversarial ? e_q : (correct ? 0.0 : 1.0);
    }
    SweepPoint p;
    p.e_a = e_a;
    p.abstain_fraction = ratio(abstained, mixture.size());
    p.retained_accuracy = ratio(retained_correct, mixture.size() - abstained);
    p.expected_loss = loss / static_cast<double>(mixture.size());
    p.normal_retained = ratio(normal_kept, normals);
    p.adversarial_abstained = ratio(adv_abstained, adversarials);
    out.push_back(p);
  }
  return out;
}

std::vector<double> linspace(double lo, double hi, std::size_t count) {
  if (count == 0) return {};
  if (count == 1) return {lo};
  std::vector<double> v(count);
  for (std::size_t i = 0; i < count; ++i)
    v[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(count - 1);
  return v;
}

void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepPoint>& points) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out.precision(17);
  out << "e_a,abstain_fraction,retained_accuracy,expected_loss,normal_retained,adversarial_abstained\n";
  for (const auto& p : points)
    out << p.e_a << ',' << p.abstain_fraction << ',' << p.retained_accuracy << ',' << p.expected_loss
        << ',' << p.normal_retained << ',' << p.adversarial_abstained << '\n';
}

}  // namespace cguard
