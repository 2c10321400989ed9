// Copyright 2026 The kbvq-moe Authors
// SPDX-License-Identifier: Apache-2.0

// Input-driven redundancy elimination.
//
// Expert weights W^(i) (oc x ic) are mapped into the input-coherence space
// Ŵ^(i) = W^(i) U_X, where U_X U_Xᵀ equals the calibration covariance, so
// Frobenius error there is output MSE. The mapped weights are stacked along
// the output dimension, the top-k right singular subspace B_k of the stack
// is kept as the shared factor and mapped back through U_X^{-1}:
//
//   U_share      = B_kᵀ U_X^{-1}              (k x ic, stored once per group)
//   V_private[i] = (A_k Σ_k) rows of expert i  (oc x k, one per expert)
//   W_share^(i)  = V_private[i] U_share
//
// The quantizable remainder W^(i) - W_share^(i) carries exactly the tail
// energy Σ_{j>k} σ_j² of the stacked spectrum when measured in that space.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "kbvq/error.hpp"
#include "kbvq/matrix.hpp"
#include "kbvq/numerics.hpp"

namespace kbvq {

struct KltBasis {
  Matrix U_X;
  Matrix U_X_inv;
  std::vector<double> eigenvalues;  // descending, from the covariance
  double eps_used = 0.0;

  std::size_t dim() const noexcept { return U_X.rows(); }
};

struct ExpertGroup {
  std::vector<Matrix> experts;
  std::string role_label;

  std::size_t size() const noexcept { return experts.size(); }
  std::size_t out_dim() const { return experts.empty() ? 0 : experts.front().rows(); }
  std::size_t in_dim() const { return experts.empty() ? 0 : experts.front().cols(); }

  void validate() const {
    require(!experts.empty(), ErrorKind::kShape, "expert group '" + role_label + "' is empty");
    for (const auto& w : experts) {
      require(w.same_shape(experts.front()), ErrorKind::kShape,
              "expert group '" + role_label + "' mixes shapes " + shape_str(experts.front()) +
                  " and " + shape_str(w));
      require(all_finite(w), ErrorKind::kContract, "expert weights contain non-finite values");
    }
  }
};

struct SharedDecomposition {
  Matrix U_share;                  // k x ic
  std::vector<Matrix> V_private;   // n matrices, oc x k, singular values absorbed
  std::vector<double> spectrum;    // σ_j² of the stacked matrix, descending
  std::size_t k = 0;
};

struct SplitWeights {
  std::vector<Matrix> shared;
  std::vector<Matrix> specific;
};

inline KltBasis klt_basis_from_covariance(const Matrix& cov, double eps_rel = 1e-8) {
  require(eps_rel >= 0.0, ErrorKind::kConfig, "eps_rel must be non-negative");
  SymEig eig = sym_eig(cov);
  const double lmax = eig.eigenvalues.empty() ? 0.0 : std::max(eig.eigenvalues.front(), 0.0);
  const double eps = eps_rel * lmax;
  BasisPair pair = reg_inverse_sqrt_pair(eig, eps);
  return KltBasis{std::move(pair.basis), std::move(pair.inverse), std::move(eig.eigenvalues), eps};
}

/// Input-coherence basis U_X = U_KLT Λ^{1/2} from calibration activations (B x ic).
inline KltBasis build_klt_basis(const Matrix& x, double eps_rel = 1e-8) {
  return klt_basis_from_covariance(covariance(x), eps_rel);
}

/// Plain-SVD arm: U_X = I, so extraction ignores input statistics.
inline KltBasis identity_basis(std::size_t ic) {
  return KltBasis{Matrix::identity(ic), Matrix::identity(ic), std::vector<double>(ic, 1.0), 0.0};
}

/// Row block i of the result is W^(i) U_X.
inline Matrix project_and_stack(const ExpertGroup& group, const KltBasis& basis) {
  group.validate();
  require(group.in_dim() == basis.dim(), ErrorKind::kShape,
          "group input dim " + std::to_string(group.in_dim()) + " != basis dim " +
              std::to_string(basis.dim()));
  std::vector<Matrix> mapped;
  mapped.reserve(group.size());
  for (const auto& w : group.experts) mapped.push_back(matmul(w, basis.U_X));
  return vstack(mapped);
}

/// Truncated SVD of the stacked matrix, partitioned back into per-expert factors.
inline SharedDecomposition extract_shared(const Matrix& stacked, const KltBasis& basis,
                                          std::size_t expert_count, std::size_t k) {
  require(expert_count >= 1 && stacked.rows() % expert_count == 0, ErrorKind::kShape,
          "stacked rows " + std::to_string(stacked.rows()) + " not divisible by expert count " +
              std::to_string(expert_count));
  require(stacked.cols() == basis.dim(), ErrorKind::kShape, "stacked/basis dimension mismatch");
  const std::size_t max_rank = std::min(stacked.rows(), stacked.cols());
  require(k >= 1 && k <= max_rank, ErrorKind::kRank,
          "rank " + std::to_string(k) + " outside [1, " + std::to_string(max_rank) + "]");

  const Svd s = svd(stacked);
  const std::size_t oc = stacked.rows() / expert_count;

  SharedDecomposition out;
  out.k = k;
  out.spectrum.resize(s.sigma.size());
  for (std::size_t j = 0; j < s.sigma.size(); ++j) out.spectrum[j] = s.sigma[j] * s.sigma[j];

  out.U_share = matmul(row_block(s.Vt, 0, k), basis.U_X_inv);

  const std::vector<double> sigma_k(s.sigma.begin(), s.sigma.begin() + static_cast<std::ptrdiff_t>(k));
  const Matrix left_scaled = scale_cols(col_block(s.U, 0, k), sigma_k);
  out.V_private.reserve(expert_count);
  for (std::size_t i = 0; i < expert_count; ++i)
    out.V_private.push_back(row_block(left_scaled, i * oc, oc));
  return out;
}

inline SplitWeights split_experts(const ExpertGroup& group, const SharedDecomposition& decomp) {
  require(decomp.V_private.size() == group.size(), ErrorKind::kShape,
          "decomposition expert count does not match group");
  SplitWeights out;
  out.shared.reserve(group.size());
  out.specific.reserve(group.size());
  for (std::size_t i = 0; i < group.size(); ++i) {
    Matrix shared = matmul(decomp.V_private[i], decomp.U_share);
    out.specific.push_back(group.experts[i] - shared);
    out.shared.push_back(std::move(shared));
  }
  return out;
}

/// Fraction of stacked energy captured by the leading k directions.
inline double redundancy_ratio(std::span<const double> spectrum, std::size_t k) {
  require(k <= spectrum.size(), ErrorKind::kRank, "rank exceeds spectrum length");
  double head = 0.0, total = 0.0;
  for (std::size_t j = 0; j < spectrum.size(); ++j) {
    require(spectrum[j] >= 0.0, ErrorKind::kContract, "spectrum has a negative entry");
    total += spectrum[j];
    if (j < k) head += spectrum[j];
  }
  require(total > 0.0, ErrorKind::kDegenerate, "redundancy ratio undefined for an all-zero spectrum");
  return head / total;
}

/// Tr(E C Eᵀ): expected squared output error of weight error E under inputs with second moment C.
inline double weighted_output_mse(const Matrix& e, const Matrix& c) {
  require(c.rows() == c.cols() && c.cols() == e.cols(), ErrorKind::kShape,
          "weighted_output_mse shapes " + shape_str(e) + " and " + shape_str(c));
  double total = 0.0;
  std::vector<double> ce(c.rows());
  for (std::size_t i = 0; i < e.rows(); ++i) {
    auto er = e.row(i);
    for (std::size_t a = 0; a < c.rows(); ++a) {
      auto cr = c.row(a);
      double s = 0.0;
      for (std::size_t b = 0; b < c.cols(); ++b) s += cr[b] * er[b];
      ce[a] = s;
    }
    for (std::size_t a = 0; a < c.rows(); ++a) total += er[a] * ce[a];
  }
  return total;
}

/// Σ_i ‖E_i U_X‖_F²: residual energy in the input-coherence space.
inline double klt_energy(std::span<const Matrix> parts, const KltBasis& basis) {
  double total = 0.0;
  for (const auto& p : parts) total += frobenius_sq(matmul(p, basis.U_X));
  return total;
}

/// Shared rank for a fractional budget: floor(ratio * ic). Zero means the
/// budget cannot pay for a single direction and nothing is extracted.
inline std::size_t rank_for_ratio(std::size_t ic, double ratio) {
  require(ratio >= 0.0 && ratio <= 1.0, ErrorKind::kConfig, "k_ratio must lie in [0, 1]");
  return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(ic) + 1e-9));
}

}  // namespace kbvq
