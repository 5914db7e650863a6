#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tocom/tensor.hpp"

namespace tocom {

enum class Split : std::uint8_t { pretrain, downstream_train, downstream_val, downstream_test };

std::string to_string(Split s);

struct Dataset {
  std::string kind;  // "synthetic" or "cifar_binary"
  std::string id;    // descriptor the dataset was opened from
  std::size_t classes = 0;
  std::size_t channels = 3;
  std::size_t image_size = 32;
  std::uint64_t seed = 0;
  Tensor<float> images;  // count x (channels * image_size^2), channel-planar
  std::vector<int> labels;
  std::vector<Split> splits;

  std::size_t size() const { return labels.size(); }
  std::size_t image_numel() const { return channels * image_size * image_size; }
  std::vector<std::size_t> indices(Split s) const;
  // Rows of images for the given sample indices.
  Tensor<float> gather(std::span<const std::size_t> index) const;
  std::vector<int> gather_labels(std::span<const std::size_t> index) const;
  void validate() const;
};

struct SynthOptions {
  std::uint64_t seed = 1;
  std::size_t classes = 10;
  std::size_t samples = 2000;
  std::size_t image_size = 32;
  // Side of the square region (in pixels) that carries the class signal; the
  // rest of the image is seeded noise and distractor texture.
  std::size_t window = 16;
  double noise = 0.5;
};

// Class-conditional oriented gratings over seeded noise. Labels are balanced
// within one and the sample order is shuffled deterministically. Every sample
// is tagged pretrain.
Dataset synth_dataset(const SynthOptions& opts);

// Retags samples in order: the first train_fraction become downstream_train,
// the next val_fraction downstream_val, the rest downstream_test.
void assign_downstream_splits(Dataset& ds, double train_fraction = 0.7, double val_fraction = 0.1);

// CIFAR binary records: 1 label byte + 3072 pixel bytes (CIFAR-10) or 2 label
// bytes (coarse, fine) + 3072 (CIFAR-100; the fine label is used). Pixels are
// scaled to [0,1] then normalized with fixed per-channel mean/std.
Dataset load_cifar_binary(const std::string& path, bool cifar100 = false);

inline constexpr float kCifarMean[3] = {0.4914f, 0.4822f, 0.4465f};
inline constexpr float kCifarStd[3] = {0.2470f, 0.2435f, 0.2616f};

// Opens a dataset from a descriptor:
//   synth:seed=1,classes=10,samples=2000,size=32,window=16,noise=0.5,split=pretrain|downstream
//   cifar10:/path/file.bin[,split=...]    cifar100:/path/file.bin[,split=...]
// With split=downstream, train= and val= set the split fractions (0.7, 0.1).
Dataset open_dataset(const std::string& descriptor);

}  // namespace tocom
