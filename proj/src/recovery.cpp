#include "cascade_guard/recovery.hpp"

#include <algorithm>
#include <fstream>

#include "cascade_guard/error.hpp"
#include "cascade_guard/parallel.hpp"

namespace cguard {

Tensor average_filter(const Tensor& image, std::size_t k, FilterBorder border) {
  if (k == 0 || k % 2 == 0) throw ArgumentError("filter size must be odd and positive, got " + std::to_string(k));
  if (image.empty()) throw ShapeError("cannot filter an empty image");
  const std::size_t h = image.height(), w = image.width(), ch = image.channels();
  if (k > std::min(h, w))
    throw ShapeError("filter size " + std::to_string(k) + " exceeds image dims");
  // Dividing (rather than multiplying by 1/k^2) keeps means of [0,1] data inside [0,1].
  const auto area = static_cast<double>(k * k);

  if (border == FilterBorder::valid) {
    Tensor out(h - k + 1, w - k + 1, ch);
    for (std::size_t y = 0; y < out.height(); ++y)
      for (std::size_t x = 0; x < out.width(); ++x)
        for (std::size_t c = 0; c < ch; ++c) {
          double s = 0.0;
          for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < k; ++j) s += image(y + i, x + j, c);
          out(y, x, c) = s / area;
        }
    return out;
  }

  const auto r = static_cast<std::ptrdiff_t>(k / 2);
  auto clamp = [](std::ptrdiff_t v, std::size_t n) {
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(v, 0, static_cast<std::ptrdiff_t>(n) - 1));
  };
  Tensor out(h, w, ch);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < ch; ++c) {
        double s = 0.0;
        for (std::ptrdiff_t i = -r; i <= r; ++i)
          for (std::ptrdiff_t j = -r; j <= r; ++j)
            s += image(clamp(static_cast<std::ptrdiff_t>(y) + i, h), clamp(static_cast<std::ptrdiff_t>(x) + j, w), c);
        out(y, x, c) = s / area;
      }
  return out;
}

RecoveryReport recovery_eval(const Network& net, const std::vector<AdversarialRecord>& records,
                             std::size_t k, std::size_t threads) {
  std::vector<const AdversarialRecord*> usable;
  for (const auto& r : records)
    if (r.original_label >= 0) usable.push_back(&r);

  RecoveryReport rep;
  rep.k = k;
  rep.n = usable.size();
  rep.kind = usable.empty() ? "none" : to_string(usable.front()->kind);
  for (const auto* r : usable)
    if (r->kind != usable.front()->kind) rep.kind = "mixed";
  if (usable.empty()) return rep;

  std::vector<char> pre(usable.size()), post(usable.size());
  parallel_for(usable.size(), threads, [&](std::size_t i) {
    const auto& r = *usable[i];
    pre[i] = predict(net, r.image).label == r.original_label;
    post[i] = predict(net, average_filter(r.image, k)).label == r.original_label;
  });
  const double n = static_cast<double>(usable.size());
  rep.pre_accuracy = static_cast<double>(std::count(pre.begin(), pre.end(), 1)) / n;
  rep.post_accuracy = static_cast<double>(std::count(post.begin(), post.end(), 1)) / n;
  return rep;
}

void write_recovery_csv(const std::filesystem::path& path, const std::vector<RecoveryReport>& rows) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out.precision(17);
  out << "kind,k,n,pre_acc,post_acc\n";
  for (const auto& r : rows)
    out << r.kind << ',' << r.k << ',' << r.n << ',' << r.pre_accuracy << ',' << r.post_accuracy << '\n';
}

}  // namespace cguard
