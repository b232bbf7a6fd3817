#include "cascade_guard/serialize.hpp"

#include <array>
#include <bit>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "cascade_guard/error.hpp"
#include "json.hpp"

namespace cguard {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

json parse_document(const std::string& text, const char* kind) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string(kind) + " document is not valid JSON: " + e.what());
  }
  if (!doc.is_object()) throw FormatError(std::string(kind) + " document must be a JSON object");
  const auto version = doc.value("version", std::string{});
  if (version != kFormatVersion)
    throw FormatError(std::string(kind) + " document has unsupported version '" + version + "'");
  if (doc.value("kind", std::string{}) != kind)
    throw FormatError(std::string("expected a ") + kind + " document");
  return doc;
}

// Runs `fn` and converts nlohmann schema errors (missing keys, wrong types)
// into FormatError.
template <class Fn>
auto with_schema(const char* kind, Fn&& fn) {
  try {
    return fn();
  } catch (const json::exception& e) {
    throw FormatError(std::string(kind) + " document violates its schema: " + e.what());
  } catch (const ArgumentError& e) {
    throw FormatError(std::string(kind) + " document violates its schema: " + e.what());
  }
}

json doubles(std::span<const double> v) { return encode_doubles(v); }

std::vector<double> doubles(const json& j, std::size_t expected, const char* what) {
  auto v = decode_doubles(j.get<std::string>());
  if (v.size() != expected)
    throw FormatError(std::string(what) + " holds " + std::to_string(v.size()) + " values, expected " +
                      std::to_string(expected));
  return v;
}

json spec_json(const NetworkSpec& spec) {
  json layers = json::array();
  for (const auto& l : spec.layers) {
    if (const auto* c = std::get_if<ConvSpec>(&l))
      layers.push_back({{"type", "conv"}, {"filters", c->filters}, {"kernel", c->kernel},
                        {"stride", c->stride}, {"padding", c->padding}});
    else if (std::holds_alternative<ReluSpec>(l))
      layers.push_back({{"type", "relu"}});
    else if (const auto* p = std::get_if<MaxPoolSpec>(&l))
      layers.push_back({{"type", "maxpool"}, {"window", p->window}, {"stride", p->stride}});
    else if (const auto* d = std::get_if<DenseSpec>(&l))
      layers.push_back({{"type", "dense"}, {"outputs", d->outputs}});
    else
      layers.push_back({{"type", "softmax"}});
  }
  return {{"input", {spec.input.height, spec.input.width, spec.input.channels}},
          {"classes", spec.classes},
          {"layers", layers}};
}

NetworkSpec spec_from(const json& j) {
  NetworkSpec spec;
  const auto& in = j.at("input");
  if (!in.is_array() || in.size() != 3) throw FormatError("network input must be [height, width, channels]");
  spec.input = {in[0].get<std::size_t>(), in[1].get<std::size_t>(), in[2].get<std::size_t>()};
  spec.classes = j.at("classes").get<std::size_t>();
  for (const auto& l : j.at("layers")) {
    const auto type = l.at("type").get<std::string>();
    if (type == "conv")
      spec.layers.push_back(ConvSpec{l.at("filters").get<std::size_t>(), l.at("kernel").get<std::size_t>(),
                                     l.value("stride", std::size_t{1}), l.value("padding", std::size_t{0})});
    else if (type == "relu")
      spec.layers.push_back(ReluSpec{});
    else if (type == "maxpool")
      spec.layers.push_back(MaxPoolSpec{l.at("window").get<std::size_t>(), l.at("stride").get<std::size_t>()});
    else if (type == "dense")
      spec.layers.push_back(DenseSpec{l.at("outputs").get<std::size_t>()});
    else if (type == "softmax")
      spec.layers.push_back(SoftmaxSpec{});
    else
      throw FormatError("unknown layer type '" + type + "'");
  }
  try {
    spec.validate();
  } catch (const ShapeError& e) {
    throw FormatError(std::string("invalid network spec: ") + e.what());
  }
  return spec;
}

json record_json(const AdversarialRecord& r) {
  return {{"source_id", r.source_id ? json(*r.source_id) : json(nullptr)},
          {"original_label", r.original_label},
          {"target_label", r.target_label},
          {"kind", to_string(r.kind)},
          {"confidence", r.confidence},
          {"l1", r.l1},
          {"linf", r.linf},
          {"iterations", r.iterations},
          {"success", r.success}};
}

}  // namespace

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  for (std::size_t i = 0; i < bytes.size(); i += 3) {
    const std::uint32_t b0 = bytes[i];
    const std::uint32_t b1 = i + 1 < bytes.size() ? bytes[i + 1] : 0;
    const std::uint32_t b2 = i + 2 < bytes.size() ? bytes[i + 2] : 0;
    const std::uint32_t v = (b0 << 16) | (b1 << 8) | b2;
    out.push_back(kAlphabet[(v >> 18) & 63]);
    out.push_back(kAlphabet[(v >> 12) & 63]);
    out.push_back(i + 1 < bytes.size() ? kAlphabet[(v >> 6) & 63] : '=');
    out.push_back(i + 2 < bytes.size() ? kAlphabet[v & 63] : '=');
  }
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  if (text.size() % 4 != 0) throw FormatError("base64 length is not a multiple of 4");
  std::array<int, 256> lookup;
  lookup.fill(-1);
  for (int i = 0; i < 64; ++i) lookup[static_cast<unsigned char>(kAlphabet[i])] = i;
  std::vector<std::uint8_t> out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    const bool last = i + 4 == text.size();
    int pad = 0;
    std::uint32_t v = 0;
    for (std::size_t j = 0; j < 4; ++j) {
      const char ch = text[i + j];
      int d;
      if (ch == '=' && last && j >= 2) {
        d = 0;
        ++pad;
      } else {
        if (pad > 0) throw FormatError("base64 padding in the middle of a group");
        d = lookup[static_cast<unsigned char>(ch)];
        if (d < 0) throw FormatError("invalid base64 character");
      }
      v = (v << 6) | static_cast<std::uint32_t>(d);
    }
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    if (pad < 2) out.push_back(static_cast<std::uint8_t>(v >> 8));
    if (pad < 1) out.push_back(static_cast<std::uint8_t>(v));
  }
  return out;
}

std::string encode_doubles(std::span<const double> values) {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(values.size() * 8);
  for (double v : values) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int b = 0; b < 8; ++b) bytes.push_back(static_cast<std::uint8_t>(bits >> (8 * b)));
  }
  return base64_encode(bytes);
}

std::vector<double> decode_doubles(const std::string& text) {
  const auto bytes = base64_decode(text);
  if (bytes.size() % 8 != 0) throw FormatError("float64 payload length is not a multiple of 8");
  std::vector<double> out(bytes.size() / 8);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint64_t bits = 0;
    for (int b = 7; b >= 0; --b) bits = (bits << 8) | bytes[i * 8 + b];
    out[i] = std::bit_cast<double>(bits);
  }
  return out;
}

std::string spec_to_json(const NetworkSpec& spec) {
  json doc = spec_json(spec);
  doc["version"] = kFormatVersion;
  doc["kind"] = "network-spec";
  return doc.dump(2) + "\n";
}

NetworkSpec spec_from_json(const std::string& text) {
  const json doc = parse_document(text, "network-spec");
  return with_schema("network-spec", [&] { return spec_from(doc); });
}

std::string network_to_json(const Network& net) {
  json params = json::array();
  for (const auto& p : net.params) {
    if (const auto* bank = std::get_if<ConvFilterBank>(&p))
      params.push_back({{"weights", doubles(bank->weights)}, {"biases", doubles(bank->biases)}});
    else if (const auto* d = std::get_if<DenseParams>(&p))
      params.push_back({{"weights", doubles(d->weights.data)}, {"biases", doubles(d->bias)}});
    else
      params.push_back(nullptr);
  }
  const auto& t = net.training;
  json doc{{"version", kFormatVersion},
           {"kind", "network"},
           {"spec", spec_json(net.spec)},
           {"params", params},
           {"training",
            {{"seed", t.seed},
             {"epochs", t.epochs},
             {"learning_rate", t.learning_rate},
             {"batch_size", t.batch_size},
             {"train_accuracy", t.train_accuracy},
             {"test_accuracy", t.test_accuracy}}}};
  return doc.dump(2) + "\n";
}

Network network_from_json(const std::string& text) {
  const json doc = parse_document(text, "network");
  return with_schema("network", [&] {
    Network net = Network::zeros(spec_from(doc.at("spec")));
    const auto& params = doc.at("params");
    if (!params.is_array() || params.size() != net.params.size())
      throw FormatError("network params must list one entry per layer");
    for (std::size_t i = 0; i < net.params.size(); ++i) {
      if (auto* bank = std::get_if<ConvFilterBank>(&net.params[i])) {
        bank->weights = doubles(params[i].at("weights"), bank->weights.size(), "conv weights");
        bank->biases = doubles(params[i].at("biases"), bank->biases.size(), "conv biases");
      } else if (auto* d = std::get_if<DenseParams>(&net.params[i])) {
        d->weights.data = doubles(params[i].at("weights"), d->weights.data.size(), "dense weights");
        d->bias = doubles(params[i].at("biases"), d->bias.size(), "dense biases");
      } else if (!params[i].is_null()) {
        throw FormatError("layer " + std::to_string(i) + " has no parameters but the document lists some");
      }
    }
    const auto& t = doc.at("training");
    net.training.seed = t.at("seed").get<std::uint64_t>();
    net.training.epochs = t.at("epochs").get<std::size_t>();
    net.training.learning_rate = t.at("learning_rate").get<double>();
    net.training.batch_size = t.at("batch_size").get<std::size_t>();
    net.training.train_accuracy = t.at("train_accuracy").get<double>();
    net.training.test_accuracy = t.at("test_accuracy").get<double>();
    try {
      net.validate();
    } catch (const std::exception& e) {
      throw FormatError(std::string("invalid network parameters: ") + e.what());
    }
    return net;
  });
}

void save_network(const fs::path& path, const Network& net) { write_text_file(path, network_to_json(net)); }

Network load_network(const fs::path& path) { return network_from_json(read_text_file(path)); }

std::string network_fingerprint(const Network& net) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : network_to_json(net)) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string cascade_to_json(const CascadeModel& model) {
  json stages = json::array();
  for (const auto& s : model.stages)
    stages.push_back({{"layer", s.layer},
                      {"w", doubles(s.svm.weights)},
                      {"b", s.svm.bias},
                      {"c", s.svm.c},
                      {"seed", s.svm.seed},
                      {"tau", s.threshold},
                      {"feature_means", doubles(s.svm.feature_means)},
                      {"feature_stds", doubles(s.svm.feature_stds)},
                      {"z_clip", s.svm.z_clip},
                      {"training_fpr", s.training_rates.fpr},
                      {"training_tpr", s.training_rates.tpr}});
  json banks = json::array();
  for (const auto& b : model.banks)
    banks.push_back({{"layer", b.layer},
                     {"e", doubles(b.mean)},
                     {"W", doubles(b.projection.data)},
                     {"s", doubles(b.stds)},
                     {"epsilon", b.epsilon}});
  json doc{{"version", kFormatVersion},
           {"kind", "detector"},
           {"target_tpr", model.target_tpr},
           {"seed", model.seed},
           {"network_fingerprint", model.network_fingerprint},
           {"normal_count", model.normal_count},
           {"adversarial_count", model.adversarial_count},
           {"stages", stages},
           {"pca_banks", banks}};
  return doc.dump(2) + "\n";
}

CascadeModel cascade_from_json(const std::string& text) {
  const json doc = parse_document(text, "detector");
  return with_schema("detector", [&] {
    CascadeModel m;
    m.target_tpr = doc.at("target_tpr").get<double>();
    m.seed = doc.at("seed").get<std::uint64_t>();
    m.network_fingerprint = doc.at("network_fingerprint").get<std::string>();
    m.normal_count = doc.at("normal_count").get<std::size_t>();
    m.adversarial_count = doc.at("adversarial_count").get<std::size_t>();
    for (const auto& b : doc.at("pca_banks")) {
      PcaBank bank;
      bank.layer = b.at("layer").get<std::size_t>();
      bank.mean = decode_doubles(b.at("e").get<std::string>());
      const std::size_t k = bank.mean.size();
      bank.projection = Matrix(k, k, doubles(b.at("W"), k * k, "PCA projection"));
      bank.stds = doubles(b.at("s"), k, "PCA stds");
      bank.epsilon = b.at("epsilon").get<double>();
      m.banks.push_back(std::move(bank));
    }
    for (const auto& s : doc.at("stages")) {
      CascadeStage st;
      st.layer = s.at("layer").get<std::size_t>();
      st.svm.weights = decode_doubles(s.at("w").get<std::string>());
      const std::size_t d = st.svm.weights.size();
      st.svm.bias = s.at("b").get<double>();
      st.svm.c = s.at("c").get<double>();
      st.svm.seed = s.at("seed").get<std::uint64_t>();
      st.svm.feature_means = doubles(s.at("feature_means"), d, "feature means");
      st.svm.feature_stds = doubles(s.at("feature_stds"), d, "feature stds");
      st.svm.z_clip = s.at("z_clip").get<double>();
      st.threshold = s.at("tau").get<double>();
      st.training_rates = {s.at("training_fpr").get<double>(), s.at("training_tpr").get<double>()};
      m.stages.push_back(std::move(st));
    }
    try {
      m.validate();
    } catch (const std::exception& e) {
      throw FormatError(std::string("invalid detector: ") + e.what());
    }
    return m;
  });
}

void save_cascade(const fs::path& path, const CascadeModel& model) {
  write_text_file(path, cascade_to_json(model));
}

CascadeModel load_cascade(const fs::path& path) { return cascade_from_json(read_text_file(path)); }

void save_adversarial_batch(const fs::path& dir, const std::vector<AdversarialRecord>& records,
                            const std::string& provenance) {
  fs::create_directories(dir);
  std::vector<Tensor> images;
  json list = json::array();
  for (const auto& r : records) {
    images.push_back(r.image);
    list.push_back(record_json(r));
  }
  json prov;
  try {
    prov = json::parse(provenance.empty() ? "{}" : provenance);
  } catch (const json::exception& e) {
    throw ArgumentError(std::string("batch provenance is not JSON: ") + e.what());
  }
  write_idx_images(dir / "images.idx", images, IdxPixelType::float64);
  json doc{{"version", kFormatVersion},
           {"kind", "adversarial-batch"},
           {"count", records.size()},
           {"images", "images.idx"},
           {"records", list},
           {"provenance", prov}};
  write_text_file(dir / "manifest.json", doc.dump(2) + "\n");
}

std::vector<AdversarialRecord> load_adversarial_batch(const fs::path& dir) {
  const json doc = parse_document(read_text_file(dir / "manifest.json"), "adversarial-batch");
  return with_schema("adversarial-batch", [&] {
    const auto images = read_idx_images(dir / doc.at("images").get<std::string>());
    const auto& list = doc.at("records");
    if (!list.is_array() || list.size() != images.size() || doc.at("count").get<std::size_t>() != images.size())
      throw FormatError("adversarial batch manifest and image file disagree on the record count");
    std::vector<AdversarialRecord> out;
    for (std::size_t i = 0; i < images.size(); ++i) {
      const auto& j = list[i];
      AdversarialRecord r;
      r.image = images[i];
      if (!j.at("source_id").is_null()) r.source_id = j.at("source_id").get<std::size_t>();
      r.original_label = j.at("original_label").get<int>();
      r.target_label = j.at("target_label").get<int>();
      r.kind = parse_attack_kind(j.at("kind").get<std::string>());
      r.confidence = j.at("confidence").get<double>();
      r.l1 = j.at("l1").get<double>();
      r.linf = j.at("linf").get<double>();
      r.iterations = j.at("iterations").get<std::size_t>();
      r.success = j.at("success").get<bool>();
      out.push_back(std::move(r));
    }
    return out;
  });
}

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path.string());
    out << text;
    if (!out) throw FormatError("short write to " + path.string());
  }
  fs::rename(tmp, path);
}

}  // namespace cguard
