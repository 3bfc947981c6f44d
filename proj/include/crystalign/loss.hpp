#pragma once

// Large-margin cosine (CosFace-style) contrastive loss, anchored on crystals:
//
//   L = -1/N sum_i log( e^{s(cos(c_i,t_i) - m)} /
//                       ( e^{s(cos(c_i,t_i) - m)} + sum_{j != i} e^{s cos(c_i,t_j)} ) )
//
// With m = 0 this is the usual softmax cross-entropy over scaled similarities.

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "crystalign/error.hpp"
#include "crystalign/tensor.hpp"

namespace crystalign {

struct LossConfig {
  double scale = 3.0;
  double margin = 0.5;

  void validate() const {
    if (!(scale > 0.0)) throw Error(Errc::InvalidConfig, "loss scale must be > 0");
    if (!(margin >= 0.0 && margin <= 1.0)) throw Error(Errc::InvalidConfig, "loss margin must lie in [0,1]");
  }
};

inline constexpr double kUnitRowTolerance = 1e-3;

template <class T>
void require_unit_rows(const tensor::Tensor<T>& x, const char* what) {
  const std::size_t r = x.rows(), c = x.cols();
  for (std::size_t i = 0; i < r; ++i) {
    double sq = 0.0;
    for (std::size_t k = 0; k < c; ++k) sq += static_cast<double>(x.at(i, k)) * static_cast<double>(x.at(i, k));
    if (std::fabs(std::sqrt(sq) - 1.0) > kUnitRowTolerance) {
      throw Error(Errc::NonUnitRows, std::string(what) + " row " + std::to_string(i) + " has norm " +
                                         std::to_string(std::sqrt(sq)));
    }
  }
}

/// crystals and texts: [N, D] with unit-norm rows, row i of each forming a pair.
template <class T>
tensor::Tensor<T> cosface_loss(const tensor::Tensor<T>& crystals, const tensor::Tensor<T>& texts,
                               const LossConfig& cfg) {
  using namespace tensor;
  cfg.validate();
  if (crystals.rank() != 2 || crystals.shape() != texts.shape() || crystals.shape()[0] == 0) {
    shape_error("cosface_loss", crystals.shape(), texts.shape());
  }
  require_unit_rows(crystals, "crystal embedding");
  require_unit_rows(texts, "text embedding");
  const std::size_t n = crystals.shape()[0];
  // rows are unit norm, so the affinity matrix of dot products is the cosine matrix
  const Tensor<T> logits = scale(matmul(crystals, texts, Transpose::B), static_cast<T>(cfg.scale));
  std::vector<T> margin(n * n, T(0));
  for (std::size_t i = 0; i < n; ++i) margin[i * n + i] = static_cast<T>(cfg.scale * cfg.margin);
  const Tensor<T> shifted = sub(logits, Tensor<T>({n, n}, std::move(margin)));
  std::vector<std::uint32_t> targets(n);
  std::iota(targets.begin(), targets.end(), 0u);
  return cross_entropy(shifted, targets);
}

}  // namespace crystalign
