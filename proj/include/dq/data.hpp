#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dq/rng.hpp"

// Deterministic data sources: seeded Gaussian batches, a linearly separable
// synthetic classification set, and a CIFAR-10 binary-format reader.

namespace dq {

struct GaussianBatch {
  std::uint64_t seed = 0;
  std::vector<double> samples;
};

inline GaussianBatch gaussian_samples(std::uint64_t seed, std::size_t n) {
  if (n == 0) throw std::invalid_argument("gaussian_samples: n must be positive");
  return {seed, gaussian_vector(seed, n)};
}

struct LabeledDataset {
  int dim = 0;       // features per sample (flattened)
  int classes = 0;
  std::vector<double> features;  // n x dim, row-major
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  const double* sample(std::size_t i) const { return &features[i * dim]; }
};

// Gaussian blobs at +-R along coordinate axes (class j uses axis j mod dim,
// negative direction once the axes are exhausted). The noise norm is clamped
// so every sample stays within distance 1.2 of its mean while the means are
// 3.2 apart from the origin: the set is linearly separable with margin >= 1.
// Labels are assigned round-robin, so class counts balance within one.
inline LabeledDataset synthetic_classification(std::uint64_t seed, std::size_t n,
                                               int classes, int dim) {
  if (classes < 2) throw std::invalid_argument("synthetic_classification: need >= 2 classes");
  if (classes > 2 * dim)
    throw std::invalid_argument("synthetic_classification: need classes <= 2*dim");
  const double radius = 3.2;
  const double max_noise = 1.2;
  LabeledDataset ds;
  ds.dim = dim;
  ds.classes = classes;
  ds.features.resize(n * static_cast<std::size_t>(dim));
  ds.labels.resize(n);
  NormalGen gen(seed);
  std::vector<double> noise(dim);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % classes);
    ds.labels[i] = label;
    double norm2 = 0.0;
    for (int j = 0; j < dim; ++j) {
      noise[j] = 0.3 * gen.next();
      norm2 += noise[j] * noise[j];
    }
    const double norm = std::sqrt(norm2);
    const double scale = norm > max_noise ? max_noise / norm : 1.0;
    double* row = &ds.features[i * dim];
    for (int j = 0; j < dim; ++j) row[j] = scale * noise[j];
    const int axis = label % dim;
    row[axis] += (label < dim ? radius : -radius);
  }
  return ds;
}

// CIFAR-10 binary layout: records of 3073 bytes, one label byte followed by
// 3072 pixel bytes (3x32x32, channel-major). Pixels are scaled to [0, 1].
inline LabeledDataset read_cifar10_binary(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_cifar10_binary: cannot open " + path);
  std::vector<char> bytes((std::istreambuf_iterator<char>(f)),
                          std::istreambuf_iterator<char>());
  constexpr std::size_t record = 3073;
  if (bytes.empty() || bytes.size() % record != 0)
    throw std::runtime_error("read_cifar10_binary: truncated file (size " +
                             std::to_string(bytes.size()) + " is not a multiple of 3073)");
  const std::size_t n = bytes.size() / record;
  LabeledDataset ds;
  ds.dim = 3072;
  ds.classes = 10;
  ds.features.resize(n * 3072);
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char label = static_cast<unsigned char>(bytes[i * record]);
    if (label > 9)
      throw std::runtime_error("read_cifar10_binary: record " + std::to_string(i) +
                               " has label byte " + std::to_string(label));
    ds.labels[i] = label;
    for (std::size_t j = 0; j < 3072; ++j)
      ds.features[i * 3072 + j] =
          static_cast<unsigned char>(bytes[i * record + 1 + j]) / 255.0;
  }
  return ds;
}

}  // namespace dq
