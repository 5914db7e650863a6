#pragma once

#include <random>

#include "tocom/tensor.hpp"
#include "tocom/vit.hpp"

namespace testing {

template <class T>
tocom::Tensor<T> random_tensor(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double sigma = 1.0) {
  std::normal_distribution<double> d(0.0, sigma);
  tocom::Tensor<T> t = tocom::Tensor<T>::matrix(rows, cols);
  for (auto& x : t.values()) x = static_cast<T>(d(rng));
  return t;
}

inline tocom::ModelConfig tiny_config(std::size_t layers = 2, std::size_t dim = 16, std::size_t image = 8,
                                      std::size_t patch = 2) {
  tocom::ModelConfig c;
  c.layers = layers;
  c.dim = dim;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.image_size = image;
  c.patch_size = patch;
  c.num_classes = 4;
  return c;
}

// Every tensor redrawn from N(0, sigma); layer-norm gains near 1.
template <class T>
tocom::WeightSet<T> spread_weights(const tocom::ModelConfig& cfg, std::mt19937_64& rng, double sigma = 0.3) {
  std::normal_distribution<double> d(0.0, sigma);
  tocom::WeightSet<T> w;
  for (const auto& [name, shape] : tocom::required_weights(cfg)) {
    tocom::Tensor<T> t(shape, T(0));
    const bool gain = name.size() > 2 && name.compare(name.size() - 2, 2, ".g") == 0;
    for (auto& x : t.values()) x = static_cast<T>(gain ? 1.0 + 0.1 * d(rng) : d(rng));
    w.set(name, std::move(t));
  }
  return w;
}

template <class T>
tocom::Tensor<T> random_images(const tocom::ModelConfig& cfg, std::size_t n, std::mt19937_64& rng) {
  return random_tensor<T>(n, cfg.image_numel(), rng);
}

}  // namespace testing
