#include "cascade_guard/dataset.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>
#include <random>

#include "json.hpp"

#include "cascade_guard/error.hpp"

namespace cguard {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::vector<unsigned char> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

void put_be32(std::vector<unsigned char>& out, std::uint32_t v) {
  out.push_back(static_cast<unsigned char>(v >> 24));
  out.push_back(static_cast<unsigned char>(v >> 16));
  out.push_back(static_cast<unsigned char>(v >> 8));
  out.push_back(static_cast<unsigned char>(v));
}

void write_bytes(const fs::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to " + path.string());
}

struct IdxHeader {
  std::uint8_t type = 0;
  std::vector<std::uint32_t> dims;
  std::size_t payload_offset = 0;
};

IdxHeader parse_header(const std::vector<unsigned char>& bytes, const fs::path& path) {
  if (bytes.size() < 4) throw FormatError(path.string() + ": truncated IDX header");
  if (bytes[0] != 0 || bytes[1] != 0) throw FormatError(path.string() + ": bad IDX magic");
  IdxHeader h;
  h.type = bytes[2];
  const std::size_t ndims = bytes[3];
  if (bytes.size() < 4 + 4 * ndims) throw FormatError(path.string() + ": truncated IDX header");
  for (std::size_t d = 0; d < ndims; ++d) h.dims.push_back(read_be32(bytes, 4 + 4 * d));
  h.payload_offset = 4 + 4 * ndims;
  return h;
}

// splitmix64 finalizer, used to derive independent per-sample seeds.
std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

struct Vec2 {
  double x, y;
};

double segment_distance(Vec2 p, Vec2 a, Vec2 b) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double qx = a.x + t * dx - p.x, qy = a.y + t * dy - p.y;
  return std::sqrt(qx * qx + qy * qy);
}

// Coverage in [0,1] of a stroke of the given half-width at distance d, antialiased over one pixel.
double stroke(double d, double half_width) { return std::clamp(half_width + 0.5 - d, 0.0, 1.0); }

Tensor render_shape(int label, std::mt19937_64& rng, double noise_sigma) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
  const Vec2 c{uni(10.0, 18.0), uni(10.0, 18.0)};
  const double len = uni(5.5, 9.5);
  const double half_w = uni(0.8, 1.6);
  const double angle = uni(-0.15, 0.15);
  const double fg = uni(0.4, 0.6);
  const double bg = uni(0.0, 0.1);
  const double ca = std::cos(angle), sa = std::sin(angle);
  auto rot = [&](double dx, double dy) { return Vec2{c.x + ca * dx - sa * dy, c.y + sa * dx + ca * dy}; };
  auto seg = [&](double x0, double y0, double x1, double y1) {
    return std::array<Vec2, 2>{rot(x0, y0), rot(x1, y1)};
  };

  std::vector<std::array<Vec2, 2>> segs;
  const double diag = len / std::numbers::sqrt2;
  switch (label) {
    case 0: segs = {seg(-len, 0, len, 0)}; break;                    // horizontal bar
    case 1: segs = {seg(0, -len, 0, len)}; break;                    // vertical bar
    case 2: segs = {seg(-diag, -diag, diag, diag)}; break;           // falling diagonal
    case 3: segs = {seg(-diag, diag, diag, -diag)}; break;           // rising diagonal
    case 6: segs = {seg(-len, 0, len, 0), seg(0, -len, 0, len)}; break;  // plus
    case 7:
      segs = {seg(-diag, -diag, diag, diag), seg(-diag, diag, diag, -diag)};  // x
      break;
    case 8: {  // square outline
      const double s = len * 0.8;
      segs = {seg(-s, -s, s, -s), seg(s, -s, s, s), seg(s, s, -s, s), seg(-s, s, -s, -s)};
      break;
    }
    case 9: {  // two parallel bars
      const double off = len * 0.45;
      segs = {seg(-len, -off, len, -off), seg(-len, off, len, off)};
      break;
    }
    default: break;
  }

  std::normal_distribution<double> noise(0.0, noise_sigma);
  Tensor img(28, 28, 1);
  const double radius = len * 0.75;
  for (std::size_t y = 0; y < 28; ++y) {
    for (std::size_t x = 0; x < 28; ++x) {
      const Vec2 p{static_cast<double>(x), static_cast<double>(y)};
      double cover = 0.0;
      if (label == 4) {  // filled disk
        const double d = std::hypot(p.x - c.x, p.y - c.y);
        cover = std::clamp(radius + 0.5 - d, 0.0, 1.0);
      } else if (label == 5) {  // ring
        const double d = std::hypot(p.x - c.x, p.y - c.y);
        cover = stroke(std::abs(d - radius), half_w);
      } else {
        for (const auto& s : segs) cover = std::max(cover, stroke(segment_distance(p, s[0], s[1]), half_w));
      }
      double v = bg + (fg - bg) * cover + noise(rng);
      v = std::clamp(v, 0.0, 1.0);
      img(y, x, 0) = std::round(v * 255.0) / 255.0;
    }
  }
  return img;
}

}  // namespace

std::string to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw ArgumentError("unknown split '" + name + "' (expected train, val or test)");
}

Shape3 Dataset::image_shape() const { return images.empty() ? Shape3{} : images.front().shape(); }

Dataset Dataset::subset(Split split) const {
  Dataset out;
  out.classes = classes;
  out.provenance = provenance;
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (splits[i] == split) {
      out.images.push_back(images[i]);
      out.labels.push_back(labels[i]);
      out.splits.push_back(split);
    }
  }
  return out;
}

void Dataset::validate() const {
  if (labels.size() != images.size() || splits.size() != images.size()) {
    throw FormatError("dataset: images, labels and split tags differ in length");
  }
  const Shape3 shape = image_shape();
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].shape() != shape) throw FormatError("dataset: image dims are not uniform");
    for (double v : images[i].data()) {
      if (!(v >= 0.0 && v <= 1.0)) {
        throw FormatError("dataset: image " + std::to_string(i) + " has a pixel outside [0,1]");
      }
    }
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw FormatError("dataset: label " + std::to_string(labels[i]) + " out of range");
    }
  }
}

std::vector<Tensor> read_idx_images(const fs::path& path) {
  const auto bytes = read_bytes(path);
  const IdxHeader h = parse_header(bytes, path);
  if ((h.type != 0x08 && h.type != 0x0E) || (h.dims.size() != 3 && h.dims.size() != 4)) {
    throw FormatError(path.string() + ": bad IDX magic for an image file");
  }
  const std::size_t n = h.dims[0], rows = h.dims[1], cols = h.dims[2];
  const std::size_t chans = h.dims.size() == 4 ? h.dims[3] : 1;
  if (n > 0 && (rows == 0 || cols == 0 || chans == 0)) {
    throw FormatError(path.string() + ": zero image dimension");
  }
  const std::size_t per = rows * cols * chans;
  const std::size_t elem = h.type == 0x08 ? 1 : 8;
  if (bytes.size() < h.payload_offset + n * per * elem) {
    throw FormatError(path.string() + ": truncated IDX payload");
  }
  std::vector<Tensor> images;
  images.reserve(n);
  const unsigned char* p = bytes.data() + h.payload_offset;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> px(per);
    for (std::size_t k = 0; k < per; ++k) {
      if (elem == 1) {
        px[k] = static_cast<double>(*p++) / 255.0;
      } else {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) bits = (bits << 8) | *p++;
        px[k] = std::bit_cast<double>(bits);
        if (!(px[k] >= 0.0 && px[k] <= 1.0)) {
          throw FormatError(path.string() + ": pixel outside [0,1] in image " + std::to_string(i));
        }
      }
    }
    images.emplace_back(rows, cols, chans, std::move(px));
  }
  return images;
}

std::vector<int> read_idx_labels(const fs::path& path) {
  const auto bytes = read_bytes(path);
  const IdxHeader h = parse_header(bytes, path);
  if (h.type != 0x08 || h.dims.size() != 1) {
    throw FormatError(path.string() + ": bad IDX magic for a label file");
  }
  const std::size_t n = h.dims[0];
  if (bytes.size() < h.payload_offset + n) throw FormatError(path.string() + ": truncated IDX payload");
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = bytes[h.payload_offset + i];
  return labels;
}

Dataset load_idx(const fs::path& images, const fs::path& labels, Split split) {
  Dataset d;
  d.images = read_idx_images(images);
  d.labels = read_idx_labels(labels);
  if (d.images.size() != d.labels.size()) {
    throw FormatError("IDX count mismatch: " + std::to_string(d.images.size()) + " images vs " +
                      std::to_string(d.labels.size()) + " labels");
  }
  d.splits.assign(d.images.size(), split);
  int max_label = -1;
  for (int l : d.labels) max_label = std::max(max_label, l);
  d.classes = static_cast<std::size_t>(max_label + 1);
  d.provenance = json{{"source", "idx"}, {"images", images.filename().string()},
                      {"labels", labels.filename().string()}}.dump();
  d.validate();
  return d;
}

void write_idx_images(const fs::path& path, const std::vector<Tensor>& images, IdxPixelType type) {
  std::vector<unsigned char> out;
  const Shape3 shape = images.empty() ? Shape3{0, 0, 1} : images.front().shape();
  const bool multi_channel = shape.channels != 1;
  out.push_back(0);
  out.push_back(0);
  out.push_back(type == IdxPixelType::ubyte ? 0x08 : 0x0E);
  out.push_back(multi_channel ? 4 : 3);
  put_be32(out, static_cast<std::uint32_t>(images.size()));
  put_be32(out, static_cast<std::uint32_t>(shape.height));
  put_be32(out, static_cast<std::uint32_t>(shape.width));
  if (multi_channel) put_be32(out, static_cast<std::uint32_t>(shape.channels));
  for (const auto& img : images) {
    if (img.shape() != shape) throw ShapeError("write_idx_images: image dims are not uniform");
    for (double v : img.data()) {
      if (!(v >= 0.0 && v <= 1.0)) throw ArgumentError("write_idx_images: pixel outside [0,1]");
      if (type == IdxPixelType::ubyte) {
        const double scaled = v * 255.0;
        const double r = std::round(scaled);
        if (r / 255.0 != v) {
          throw ArgumentError("write_idx_images: pixel is not a multiple of 1/255; use float64");
        }
        out.push_back(static_cast<unsigned char>(r));
      } else {
        const auto bits = std::bit_cast<std::uint64_t>(v);
        for (int b = 7; b >= 0; --b) out.push_back(static_cast<unsigned char>(bits >> (8 * b)));
      }
    }
  }
  write_bytes(path, out);
}

void write_idx_labels(const fs::path& path, const std::vector<int>& labels) {
  std::vector<unsigned char> out{0, 0, 0x08, 1};
  put_be32(out, static_cast<std::uint32_t>(labels.size()));
  for (int l : labels) {
    if (l < 0 || l > 255) throw ArgumentError("write_idx_labels: label out of byte range");
    out.push_back(static_cast<unsigned char>(l));
  }
  write_bytes(path, out);
}

const char* synth_class_name(int label) {
  static constexpr std::array<const char*, kSynthClasses> names = {
      "hbar", "vbar", "diag_down", "diag_up", "disk", "ring", "plus", "cross", "square", "equals"};
  return label >= 0 && label < kSynthClasses ? names[static_cast<std::size_t>(label)] : "?";
}

Dataset synth_dataset(std::uint64_t seed, std::size_t per_class, const SynthOptions& opts) {
  if (opts.train_fraction < 0 || opts.val_fraction < 0 || opts.train_fraction + opts.val_fraction > 1.0) {
    throw ArgumentError("synth_dataset: split fractions must be non-negative and sum to at most 1");
  }
  Dataset d;
  d.classes = kSynthClasses;
  const auto n_train = static_cast<std::size_t>(std::llround(opts.train_fraction * static_cast<double>(per_class)));
  const auto n_val = static_cast<std::size_t>(std::llround(opts.val_fraction * static_cast<double>(per_class)));
  for (std::size_t i = 0; i < per_class; ++i) {
    const Split split = i < n_train ? Split::train : (i < n_train + n_val ? Split::val : Split::test);
    for (int c = 0; c < kSynthClasses; ++c) {
      std::mt19937_64 rng(mix(mix(seed) ^ (static_cast<std::uint64_t>(c) << 40) ^ i));
      d.images.push_back(render_shape(c, rng, opts.noise_sigma));
      d.labels.push_back(c);
      d.splits.push_back(split);
    }
  }
  d.provenance = json{{"source", "synth"},
                      {"seed", seed},
                      {"per_class", per_class},
                      {"noise_sigma", opts.noise_sigma},
                      {"train_fraction", opts.train_fraction},
                      {"val_fraction", opts.val_fraction}}
                     .dump();
  return d;
}

void save_dataset_dir(const fs::path& dir, const Dataset& data) {
  data.validate();
  fs::create_directories(dir);
  json counts = json::object();
  for (Split s : {Split::train, Split::val, Split::test}) {
    const Dataset part = data.subset(s);
    bool bytes_ok = true;
    for (const auto& img : part.images) {
      for (double v : img.data()) {
        if (std::round(v * 255.0) / 255.0 != v) {
          bytes_ok = false;
          break;
        }
      }
      if (!bytes_ok) break;
    }
    write_idx_images(dir / (to_string(s) + "-images.idx"), part.images,
                     bytes_ok ? IdxPixelType::ubyte : IdxPixelType::float64);
    write_idx_labels(dir / (to_string(s) + "-labels.idx"), part.labels);
    counts[to_string(s)] = part.size();
  }
  json manifest{{"version", "cascade-guard/1"},
                {"kind", "dataset"},
                {"classes", data.classes},
                {"counts", counts},
                {"provenance", json::parse(data.provenance.empty() ? "{}" : data.provenance)}};
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw FormatError("cannot write dataset manifest in " + dir.string());
  out << manifest.dump(2) << "\n";
}

Dataset load_dataset_dir(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw FormatError("dataset directory " + dir.string() + " has no manifest.json");
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(manifest_path.string() + ": " + e.what());
  }
  if (manifest.value("version", "") != "cascade-guard/1" || manifest.value("kind", "") != "dataset") {
    throw FormatError(manifest_path.string() + ": unsupported version or kind");
  }
  Dataset d;
  d.classes = manifest.at("classes").get<std::size_t>();
  d.provenance = manifest.at("provenance").dump();
  for (Split s : {Split::train, Split::val, Split::test}) {
    const fs::path ip = dir / (to_string(s) + "-images.idx");
    const fs::path lp = dir / (to_string(s) + "-labels.idx");
    if (!fs::exists(ip)) continue;
    auto imgs = read_idx_images(ip);
    auto labs = read_idx_labels(lp);
    if (imgs.size() != labs.size()) throw FormatError("IDX count mismatch in split " + to_string(s));
    for (std::size_t i = 0; i < imgs.size(); ++i) {
      d.images.push_back(std::move(imgs[i]));
      d.labels.push_back(labs[i]);
      d.splits.push_back(s);
    }
  }
  d.validate();
  return d;
}

}  // namespace cguard
