#include "tocom/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <map>
#include <numbers>
#include <random>

namespace tocom {

std::string to_string(Split s) {
  switch (s) {
    case Split::pretrain:
      return "pretrain";
    case Split::downstream_train:
      return "downstream-train";
    case Split::downstream_val:
      return "downstream-val";
    case Split::downstream_test:
      return "downstream-test";
  }
  return "pretrain";
}

std::vector<std::size_t> Dataset::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < splits.size(); ++i)
    if (splits[i] == s) out.push_back(i);
  return out;
}

Tensor<float> Dataset::gather(std::span<const std::size_t> index) const {
  const std::size_t n = image_numel();
  Tensor<float> out = Tensor<float>::matrix(index.size(), n);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= size()) throw ShapeError("dataset index out of range");
    std::copy(images.data() + index[i] * n, images.data() + (index[i] + 1) * n, out.data() + i * n);
  }
  return out;
}

std::vector<int> Dataset::gather_labels(std::span<const std::size_t> index) const {
  std::vector<int> out;
  out.reserve(index.size());
  for (std::size_t i : index) out.push_back(labels.at(i));
  return out;
}

void Dataset::validate() const {
  if (images.rank() != 2 || images.rows() != labels.size() || images.cols() != image_numel())
    throw ValidationError("dataset: image tensor does not match sample count");
  if (splits.size() != labels.size()) throw ValidationError("dataset: split tags do not match sample count");
  for (int l : labels)
    if (l < 0 || std::size_t(l) >= classes) throw ValidationError("dataset: label out of range");
  if (!images.all_finite()) throw ValidationError("dataset: non-finite pixel");
}

Dataset synth_dataset(const SynthOptions& opts) {
  if (opts.classes < 2) throw ValidationError("synth_dataset: classes must be >= 2");
  if (opts.image_size < 1) throw ValidationError("synth_dataset: image_size must be >= 1");
  const std::size_t s = opts.image_size;
  const std::size_t window = std::clamp<std::size_t>(opts.window, 1, s);
  std::mt19937_64 rng(opts.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  struct Prototype {
    double theta, freq;
    double color[3];
    double tint[3];
  };
  std::vector<Prototype> protos(opts.classes);
  for (std::size_t c = 0; c < opts.classes; ++c) {
    auto& p = protos[c];
    p.theta = std::numbers::pi * (double(c) + 0.6 * unit(rng)) / double(opts.classes);
    p.freq = 0.08 + 0.14 * unit(rng);
    for (double& x : p.color) x = 0.4 + 0.6 * unit(rng);
    for (double& x : p.tint) x = 0.3 * (2 * unit(rng) - 1);
  }

  Dataset ds;
  ds.kind = "synthetic";
  ds.classes = opts.classes;
  ds.channels = 3;
  ds.image_size = s;
  ds.seed = opts.seed;
  ds.labels.resize(opts.samples);
  for (std::size_t i = 0; i < opts.samples; ++i) ds.labels[i] = static_cast<int>(i % opts.classes);
  std::shuffle(ds.labels.begin(), ds.labels.end(), rng);
  ds.splits.assign(opts.samples, Split::pretrain);
  ds.images = Tensor<float>::matrix(opts.samples, ds.image_numel());

  for (std::size_t i = 0; i < opts.samples; ++i) {
    const auto& p = protos[ds.labels[i]];
    const std::size_t ox = static_cast<std::size_t>(unit(rng) * double(s - window + 1));
    const std::size_t oy = static_cast<std::size_t>(unit(rng) * double(s - window + 1));
    const double phase = 2 * std::numbers::pi * unit(rng);
    const double amp = 0.8 + 0.4 * unit(rng);
    // distractor texture with a random orientation, outside the window
    const double dtheta = std::numbers::pi * unit(rng);
    const double dfreq = 0.08 + 0.14 * unit(rng);
    const double dphase = 2 * std::numbers::pi * unit(rng);
    float* img = ds.images.data() + i * ds.image_numel();
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x) {
        const bool inside = x >= ox && x < ox + window && y >= oy && y < oy + window;
        double base;
        const double* color = p.color;
        const double* tint = p.tint;
        static const double kGray[3] = {0.6, 0.6, 0.6};
        static const double kNoTint[3] = {0.0, 0.0, 0.0};
        if (inside) {
          base = amp * std::sin(2 * std::numbers::pi * p.freq * (x * std::cos(p.theta) + y * std::sin(p.theta)) + phase);
        } else {
          base = 0.35 * std::sin(2 * std::numbers::pi * dfreq * (x * std::cos(dtheta) + y * std::sin(dtheta)) + dphase);
          color = kGray;
          tint = kNoTint;
        }
        for (std::size_t c = 0; c < 3; ++c)
          img[(c * s + y) * s + x] = static_cast<float>(base * color[c] + tint[c] + opts.noise * gauss(rng));
      }
  }
  ds.id = "synth:seed=" + std::to_string(opts.seed) + ",classes=" + std::to_string(opts.classes) +
          ",samples=" + std::to_string(opts.samples) + ",size=" + std::to_string(s) +
          ",window=" + std::to_string(window);
  return ds;
}

void assign_downstream_splits(Dataset& ds, double train_fraction, double val_fraction) {
  if (train_fraction <= 0 || val_fraction < 0 || train_fraction + val_fraction >= 1)
    throw ValidationError("split fractions must leave a non-empty test split");
  const std::size_t n = ds.size();
  const std::size_t n_train = static_cast<std::size_t>(std::floor(n * train_fraction));
  const std::size_t n_val = static_cast<std::size_t>(std::floor(n * val_fraction));
  for (std::size_t i = 0; i < n; ++i)
    ds.splits[i] = i < n_train ? Split::downstream_train
                               : (i < n_train + n_val ? Split::downstream_val : Split::downstream_test);
}

Dataset load_cifar_binary(const std::string& path, bool cifar100) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::size_t label_bytes = cifar100 ? 2 : 1;
  const std::size_t pixels = 3 * 32 * 32;
  const std::size_t record = label_bytes + pixels;
  if (bytes.empty()) throw FormatError("truncated CIFAR file '" + path + "' (empty)");
  if (bytes.size() % record != 0)
    throw FormatError("bad length: " + std::to_string(bytes.size()) + " bytes is not a multiple of the " +
                      std::to_string(record) + "-byte record");
  const std::size_t count = bytes.size() / record;
  Dataset ds;
  ds.kind = "cifar_binary";
  ds.id = std::string(cifar100 ? "cifar100:" : "cifar10:") + path;
  ds.classes = cifar100 ? 100 : 10;
  ds.channels = 3;
  ds.image_size = 32;
  ds.images = Tensor<float>::matrix(count, pixels);
  ds.labels.resize(count);
  ds.splits.assign(count, Split::pretrain);
  for (std::size_t i = 0; i < count; ++i) {
    const unsigned char* rec = bytes.data() + i * record;
    const int label = rec[label_bytes - 1];
    if (std::size_t(label) >= ds.classes) throw FormatError("CIFAR label out of range in record " + std::to_string(i));
    ds.labels[i] = label;
    float* img = ds.images.data() + i * pixels;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t j = 0; j < 1024; ++j)
        img[c * 1024 + j] = (rec[label_bytes + c * 1024 + j] / 255.0f - kCifarMean[c]) / kCifarStd[c];
  }
  return ds;
}

namespace {

std::map<std::string, std::string> parse_options(const std::string& text, std::string* positional) {
  std::map<std::string, std::string> kv;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find(',', start);
    if (end == std::string::npos) end = text.size();
    const std::string item = text.substr(start, end - start);
    if (!item.empty()) {
      const auto eq = item.find('=');
      if (eq == std::string::npos) {
        if (!positional || !positional->empty()) throw ValidationError("dataset descriptor: unexpected '" + item + "'");
        *positional = item;
      } else {
        kv[item.substr(0, eq)] = item.substr(eq + 1);
      }
    }
    start = end + 1;
  }
  return kv;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const auto x = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ValidationError("dataset descriptor: '" + key + "' expects an integer, got '" + v + "'");
  }
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ValidationError("dataset descriptor: '" + key + "' expects a number, got '" + v + "'");
  }
}

}  // namespace

Dataset open_dataset(const std::string& descriptor) {
  const auto colon = descriptor.find(':');
  if (colon == std::string::npos)
    throw ValidationError("dataset descriptor '" + descriptor + "' must look like synth:... or cifar10:PATH");
  const std::string kind = descriptor.substr(0, colon);
  const std::string rest = descriptor.substr(colon + 1);
  Dataset ds;
  std::map<std::string, std::string> kv;
  if (kind == "synth") {
    kv = parse_options(rest, nullptr);
    SynthOptions o;
    for (const auto& [k, v] : kv) {
      if (k == "seed") o.seed = to_u64(k, v);
      else if (k == "classes") o.classes = to_u64(k, v);
      else if (k == "samples") o.samples = to_u64(k, v);
      else if (k == "size") o.image_size = to_u64(k, v);
      else if (k == "window") o.window = to_u64(k, v);
      else if (k == "noise") o.noise = to_double(k, v);
      else if (k != "split" && k != "train" && k != "val") throw ValidationError("dataset descriptor: unknown key '" + k + "'");
    }
    ds = synth_dataset(o);
  } else if (kind == "cifar10" || kind == "cifar100") {
    std::string path;
    kv = parse_options(rest, &path);
    for (const auto& [k, v] : kv)
      if (k != "split" && k != "train" && k != "val")
        throw ValidationError("dataset descriptor: unknown key '" + k + "'");
    if (path.empty()) throw ValidationError("dataset descriptor: missing CIFAR path");
    ds = load_cifar_binary(path, kind == "cifar100");
  } else {
    throw ValidationError("unknown dataset kind '" + kind + "'");
  }
  const std::string split = kv.count("split") ? kv.at("split") : "pretrain";
  if (split == "downstream")
    assign_downstream_splits(ds, kv.count("train") ? to_double("train", kv.at("train")) : 0.7,
                             kv.count("val") ? to_double("val", kv.at("val")) : 0.1);
  else if (split != "pretrain")
    throw ValidationError("dataset descriptor: split must be pretrain or downstream");
  ds.id = descriptor;
  ds.validate();
  return ds;
}

}  // namespace tocom
