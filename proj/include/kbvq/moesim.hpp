// Copyright 2026 The kbvq-moe Authors
// SPDX-License-Identifier: Apache-2.0

// Synthetic MoE layer used to exercise the compression pipeline end to end:
// softmax top-k routing, always-on shared experts, and experts that are
// either single linear maps or gated MLPs (gate/up/down with SiLU).

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kbvq/bcos.hpp"
#include "kbvq/error.hpp"
#include "kbvq/idre.hpp"
#include "kbvq/matrix.hpp"
#include "kbvq/rng.hpp"

namespace kbvq {

enum class ExpertKind { kLinear, kGatedMlp };

inline const char* to_string(ExpertKind k) { return k == ExpertKind::kLinear ? "linear" : "mlp"; }

inline ExpertKind parse_expert_kind(const std::string& s) {
  if (s == "linear") return ExpertKind::kLinear;
  if (s == "mlp") return ExpertKind::kGatedMlp;
  fail(ErrorKind::kConfig, "unknown expert kind '" + s + "'");
}

/// Role groups hold all m + n experts, shared experts first. Linear layers
/// have one role ("w"); gated MLPs have "gate", "up" and "down".
struct MoeLayerSpec {
  std::size_t m = 0;
  std::size_t n = 1;
  std::size_t top_k = 1;
  Matrix gate_weights;  // n x d_model
  ExpertKind kind = ExpertKind::kLinear;
  std::vector<ExpertGroup> roles;
  bool renormalize = false;
  std::uint64_t seed = 42;

  std::size_t expert_count() const noexcept { return m + n; }
  std::size_t d_model() const { return roles.front().in_dim(); }
  std::size_t out_dim() const { return roles.back().out_dim(); }

  void validate() const {
    require(n >= 1 && top_k >= 1 && top_k <= n, ErrorKind::kConfig,
            "top_k must lie in [1, n]; got top_k=" + std::to_string(top_k) + ", n=" + std::to_string(n));
    require(gate_weights.rows() == n, ErrorKind::kShape, "gate weights must have one row per routing expert");
    const std::size_t want_roles = kind == ExpertKind::kLinear ? 1 : 3;
    require(roles.size() == want_roles, ErrorKind::kShape, "wrong number of expert roles for layer kind");
    for (const auto& g : roles) {
      g.validate();
      require(g.size() == m + n, ErrorKind::kShape, "role '" + g.role_label + "' has wrong expert count");
    }
    require(gate_weights.cols() == d_model(), ErrorKind::kShape, "gate weights width != d_model");
    if (kind == ExpertKind::kGatedMlp) {
      require(roles[0].out_dim() == roles[1].out_dim() && roles[0].in_dim() == roles[1].in_dim(), ErrorKind::kShape,
              "gate and up projections differ in shape");
      require(roles[2].in_dim() == roles[0].out_dim(), ErrorKind::kShape,
              "down projection input != intermediate width");
    }
  }
};

/// Per-role, per-expert output corrections. Empty means uncorrected.
using LayerCorrections = std::vector<std::vector<BiasCorrection>>;

struct GateDecision {
  std::vector<double> scores;         // softmax over routing experts
  std::vector<std::size_t> selected;  // top_k indices, best first
};

inline GateDecision gate(const MoeLayerSpec& layer, std::span<const double> x) {
  require(x.size() == layer.gate_weights.cols(), ErrorKind::kShape, "token width != gate width");
  require(layer.top_k >= 1 && layer.top_k <= layer.n, ErrorKind::kConfig, "top_k must lie in [1, n]");
  const std::size_t n = layer.gate_weights.rows();
  GateDecision out;
  out.scores.resize(n);
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t e = 0; e < n; ++e) {
    auto g = layer.gate_weights.row(e);
    double s = 0.0;
    for (std::size_t t = 0; t < x.size(); ++t) s += g[t] * x[t];
    out.scores[e] = s;
    mx = std::max(mx, s);
  }
  double z = 0.0;
  for (double& s : out.scores) {
    s = std::exp(s - mx);
    z += s;
  }
  for (double& s : out.scores) s /= z;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return out.scores[a] > out.scores[b]; });
  out.selected.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(layer.top_k));
  return out;
}

inline double silu(double v) { return v / (1.0 + std::exp(-v)); }

namespace detail {
inline const BiasCorrection* correction_for(const LayerCorrections& c, std::size_t role, std::size_t expert) {
  if (c.empty()) return nullptr;
  require(role < c.size() && expert < c[role].size(), ErrorKind::kShape, "corrections do not cover the layer");
  return &c[role][expert];
}
}  // namespace detail

/// Inputs seen by every role of one expert: X for gate/up/w, the
/// intermediate activation for down.
inline std::vector<Matrix> expert_role_inputs(const MoeLayerSpec& layer, std::size_t expert, const Matrix& x,
                                              const LayerCorrections& corr = {}) {
  if (layer.kind == ExpertKind::kLinear) return {x};
  Matrix g = matmul_nt(x, layer.roles[0].experts[expert]);
  Matrix u = matmul_nt(x, layer.roles[1].experts[expert]);
  if (auto* c = detail::correction_for(corr, 0, expert)) apply_correction_inplace(g, *c);
  if (auto* c = detail::correction_for(corr, 1, expert)) apply_correction_inplace(u, *c);
  Matrix h(g.rows(), g.cols());
  for (std::size_t i = 0; i < h.size(); ++i) h.data()[i] = silu(g.data()[i]) * u.data()[i];
  return {x, x, std::move(h)};
}

/// Output of one expert for all rows of X (B x out_dim).
inline Matrix expert_output(const MoeLayerSpec& layer, std::size_t expert, const Matrix& x,
                            const LayerCorrections& corr = {}) {
  const std::size_t last = layer.roles.size() - 1;
  std::vector<Matrix> inputs = expert_role_inputs(layer, expert, x, corr);
  Matrix y = matmul_nt(inputs[last], layer.roles[last].experts[expert]);
  if (auto* c = detail::correction_for(corr, last, expert)) apply_correction_inplace(y, *c);
  return y;
}

/// y = Σ_shared E_i(x) + Σ_{j in top-k} g_j(x) E_j(x). Shared experts carry weight 1.
inline Matrix forward(const MoeLayerSpec& layer, const Matrix& x, const LayerCorrections& corr = {}) {
  layer.validate();
  require(x.cols() == layer.d_model(), ErrorKind::kShape,
          "input width " + std::to_string(x.cols()) + " != d_model " + std::to_string(layer.d_model()));
  const std::size_t bsz = x.rows();
  const std::size_t oc = layer.out_dim();
  std::vector<Matrix> outs;
  outs.reserve(layer.expert_count());
  for (std::size_t e = 0; e < layer.expert_count(); ++e) outs.push_back(expert_output(layer, e, x, corr));

  Matrix y(bsz, oc);
  for (std::size_t t = 0; t < bsz; ++t) {
    auto yr = y.row(t);
    for (std::size_t e = 0; e < layer.m; ++e) {
      auto o = outs[e].row(t);
      for (std::size_t j = 0; j < oc; ++j) yr[j] += o[j];
    }
    const GateDecision g = gate(layer, x.row(t));
    double norm = 1.0;
    if (layer.renormalize) {
      norm = 0.0;
      for (std::size_t sel : g.selected) norm += g.scores[sel];
    }
    for (std::size_t sel : g.selected) {
      const double w = g.scores[sel] / norm;
      auto o = outs[layer.m + sel].row(t);
      for (std::size_t j = 0; j < oc; ++j) yr[j] += w * o[j];
    }
  }
  return y;
}

/// Rows of X routed to expert `expert` (shared experts see every row).
inline Matrix routed_rows(const MoeLayerSpec& layer, std::size_t expert, const Matrix& x) {
  if (expert < layer.m) return x;
  std::vector<double> data;
  std::size_t rows = 0;
  for (std::size_t t = 0; t < x.rows(); ++t) {
    const GateDecision g = gate(layer, x.row(t));
    if (std::find(g.selected.begin(), g.selected.end(), expert - layer.m) == g.selected.end()) continue;
    data.insert(data.end(), x.row(t).begin(), x.row(t).end());
    ++rows;
  }
  return Matrix(rows, x.cols(), std::move(data));
}

struct SynthConfig {
  std::size_t d_model = 128;
  std::size_t oc = 64;
  std::size_t n = 8;
  std::size_t m = 0;
  std::size_t top_k = 2;
  std::size_t shared_rank = 4;
  double shared_decay = 1.5;      // singular values of the common part ∝ j^-decay
  double noise_scale = 0.2;       // ‖N^(i)‖_F / ‖S‖_F
  double activation_decay = 1.5;  // input covariance eigenvalues ∝ j^-decay
  double input_mean = 0.5;        // ‖μ‖ relative to the total input standard deviation
  bool align_shared = false;      // common row space = leading input directions
  ExpertKind kind = ExpertKind::kLinear;
  std::size_t intermediate = 64;  // gated-MLP hidden width
  bool renormalize = false;
  std::size_t calib_rows = 512;
  std::size_t eval_rows = 512;
  std::uint64_t seed = 42;

  void validate() const {
    require(d_model >= 1 && oc >= 1 && n >= 1, ErrorKind::kConfig, "layer dimensions must be positive");
    require(top_k >= 1 && top_k <= n, ErrorKind::kConfig, "top_k must lie in [1, n]");
    require(noise_scale >= 0.0, ErrorKind::kConfig, "noise_scale must be non-negative");
    require(calib_rows >= 2 && eval_rows >= 1, ErrorKind::kConfig, "need >= 2 calibration rows");
    const std::size_t limit = kind == ExpertKind::kLinear ? std::min(oc, d_model)
                                                          : std::min({oc, d_model, intermediate});
    require(shared_rank <= limit, ErrorKind::kConfig, "shared_rank exceeds the expert dimensions");
  }
};

struct SynthLayer {
  MoeLayerSpec layer;
  Matrix calib;
  Matrix eval;
  Matrix input_rotation;  // columns: input principal directions, descending energy
};

namespace detail {

inline Matrix gaussian(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m(r, c);
  for (double& v : m.data()) v = rng.normal();
  return m;
}

// Orthonormal columns by modified Gram-Schmidt on a Gaussian draw.
inline Matrix random_orthonormal(std::size_t rows, std::size_t cols, Rng& rng) {
  Matrix q = gaussian(rows, cols, rng);
  for (std::size_t j = 0; j < cols; ++j) {
    for (int pass = 0; pass < 2; ++pass)
      for (std::size_t c = 0; c < j; ++c) {
        double d = 0.0;
        for (std::size_t i = 0; i < rows; ++i) d += q(i, c) * q(i, j);
        for (std::size_t i = 0; i < rows; ++i) q(i, j) -= d * q(i, c);
      }
    double nrm = 0.0;
    for (std::size_t i = 0; i < rows; ++i) nrm += q(i, j) * q(i, j);
    nrm = std::sqrt(nrm);
    for (std::size_t i = 0; i < rows; ++i) q(i, j) /= nrm;
  }
  return q;
}

inline ExpertGroup synth_role(const SynthConfig& cfg, std::size_t out, std::size_t in, const Matrix& rotation,
                              std::uint64_t stream, const std::string& label) {
  Rng rng(mix_seed(cfg.seed, stream));
  const double ref_norm = std::sqrt(static_cast<double>(out));
  Matrix common(out, in);
  if (cfg.shared_rank > 0) {
    const Matrix left = random_orthonormal(out, cfg.shared_rank, rng);
    const Matrix right = cfg.align_shared && rotation.rows() == in
                             ? col_block(rotation, 0, cfg.shared_rank)
                             : random_orthonormal(in, cfg.shared_rank, rng);
    std::vector<double> sv(cfg.shared_rank);
    for (std::size_t j = 0; j < sv.size(); ++j) sv[j] = std::pow(static_cast<double>(j + 1), -cfg.shared_decay);
    common = matmul_nt(scale_cols(left, sv), right);
    common = (ref_norm / frobenius(common)) * common;
  }
  ExpertGroup g;
  g.role_label = label;
  for (std::size_t e = 0; e < cfg.m + cfg.n; ++e) {
    Rng nrng(mix_seed(cfg.seed, stream * 1000 + 1 + e));
    Matrix noise = gaussian(out, in, nrng);
    const double nn = frobenius(noise);
    if (nn > 0.0) noise = (cfg.noise_scale * ref_norm / nn) * noise;
    g.experts.push_back(common + noise);
  }
  return g;
}

inline Matrix synth_tokens(const SynthConfig& cfg, std::size_t rows, const Matrix& rotation,
                           std::span<const double> root_eig, std::span<const double> mean, std::uint64_t stream) {
  Rng rng(mix_seed(cfg.seed, stream));
  const Matrix z = scale_cols(gaussian(rows, cfg.d_model, rng), root_eig);
  Matrix x = matmul_nt(z, rotation);
  for (std::size_t t = 0; t < rows; ++t) {
    auto r = x.row(t);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += mean[j];
  }
  return x;
}

}  // namespace detail

/// Redundant synthetic layer: every expert of a role is S + N^(i) with S of
/// rank shared_rank and power-law singular values; tokens have power-law
/// covariance in a random orientation plus a constant mean offset.
inline SynthLayer synth_layer(const SynthConfig& cfg) {
  cfg.validate();
  const std::size_t dm = cfg.d_model;
  Rng rot_rng(mix_seed(cfg.seed, 3));
  SynthLayer out;
  out.input_rotation = detail::random_orthonormal(dm, dm, rot_rng);

  std::vector<double> root_eig(dm);
  double total_var = 0.0;
  for (std::size_t j = 0; j < dm; ++j) {
    const double lam = std::pow(static_cast<double>(j + 1), -cfg.activation_decay);
    root_eig[j] = std::sqrt(lam);
    total_var += lam;
  }
  Rng mean_rng(mix_seed(cfg.seed, 7));
  std::vector<double> mean(dm);
  double mn = 0.0;
  for (double& v : mean) {
    v = mean_rng.normal();
    mn += v * v;
  }
  mn = std::sqrt(mn);
  for (double& v : mean) v *= cfg.input_mean * std::sqrt(total_var) / mn;

  MoeLayerSpec& layer = out.layer;
  layer.m = cfg.m;
  layer.n = cfg.n;
  layer.top_k = cfg.top_k;
  layer.kind = cfg.kind;
  layer.renormalize = cfg.renormalize;
  layer.seed = cfg.seed;
  Rng gate_rng(mix_seed(cfg.seed, 6));
  layer.gate_weights = (1.0 / std::sqrt(static_cast<double>(dm)) * 4.0) * detail::gaussian(cfg.n, dm, gate_rng);
  if (cfg.kind == ExpertKind::kLinear) {
    layer.roles.push_back(detail::synth_role(cfg, cfg.oc, dm, out.input_rotation, 1, "w"));
  } else {
    layer.roles.push_back(detail::synth_role(cfg, cfg.intermediate, dm, out.input_rotation, 1, "gate"));
    layer.roles.push_back(detail::synth_role(cfg, cfg.intermediate, dm, out.input_rotation, 2, "up"));
    layer.roles.push_back(detail::synth_role(cfg, cfg.oc, cfg.intermediate, Matrix{}, 8, "down"));
  }
  out.calib = detail::synth_tokens(cfg, cfg.calib_rows, out.input_rotation, root_eig, mean, 4);
  out.eval = detail::synth_tokens(cfg, cfg.eval_rows, out.input_rotation, root_eig, mean, 5);
  layer.validate();
  return out;
}

/// Mean over expert pairs of the mean per-token cosine between their outputs.
inline double mean_pairwise_cosine(std::span<const Matrix> outputs) {
  require(outputs.size() >= 2, ErrorKind::kContract, "cosine similarity needs at least two experts");
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < outputs.size(); ++a)
    for (std::size_t b = a + 1; b < outputs.size(); ++b) {
      require(outputs[a].same_shape(outputs[b]), ErrorKind::kShape, "expert outputs differ in shape");
      double acc = 0.0;
      for (std::size_t t = 0; t < outputs[a].rows(); ++t) {
        auto ra = outputs[a].row(t);
        auto rb = outputs[b].row(t);
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (std::size_t j = 0; j < ra.size(); ++j) {
          dot += ra[j] * rb[j];
          na += ra[j] * ra[j];
          nb += rb[j] * rb[j];
        }
        if (na > 0.0 && nb > 0.0) acc += dot / std::sqrt(na * nb);
      }
      total += acc / static_cast<double>(outputs[a].rows());
      ++pairs;
    }
  return total / static_cast<double>(pairs);
}

/// Sentinel for the variance ratio of a channel whose reference variance is zero.
inline constexpr double kUndefinedVarianceRatio = -1.0;

struct DriftReport {
  std::vector<double> mean_shift;  // |μ_q - μ_fp| per channel
  std::vector<double> var_ratio;   // σ_q² / σ_fp², or kUndefinedVarianceRatio
  double output_mse = 0.0;
  std::optional<double> cosine_full;      // expert outputs W^(i) x
  std::optional<double> cosine_specific;  // expert outputs of the specific parts

  double mean_shift_median() const { return median(mean_shift); }
  double var_ratio_median() const {
    std::vector<double> v;
    for (double r : var_ratio)
      if (r != kUndefinedVarianceRatio) v.push_back(r);
    return v.empty() ? kUndefinedVarianceRatio : median(v);
  }

  static double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t h = v.size() / 2;
    return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
  }
};

struct ExpertOutputs {
  std::vector<Matrix> full;
  std::vector<Matrix> specific;
};

inline DriftReport drift_report(const Matrix& fp_out, const Matrix& q_out,
                                const std::optional<ExpertOutputs>& experts = std::nullopt) {
  require(fp_out.same_shape(q_out), ErrorKind::kShape,
          "drift inputs differ: " + shape_str(fp_out) + " vs " + shape_str(q_out));
  require(fp_out.rows() >= 1, ErrorKind::kDegenerate, "drift report needs at least one row");
  const std::size_t oc = fp_out.cols();
  const double inv = 1.0 / static_cast<double>(fp_out.rows());
  DriftReport r;
  std::vector<double> mf(oc, 0.0), mq(oc, 0.0), vf(oc, 0.0), vq(oc, 0.0);
  double sq = 0.0;
  for (std::size_t t = 0; t < fp_out.rows(); ++t) {
    auto a = fp_out.row(t);
    auto b = q_out.row(t);
    for (std::size_t j = 0; j < oc; ++j) {
      mf[j] += a[j];
      mq[j] += b[j];
      sq += (a[j] - b[j]) * (a[j] - b[j]);
    }
  }
  for (std::size_t j = 0; j < oc; ++j) {
    mf[j] *= inv;
    mq[j] *= inv;
  }
  for (std::size_t t = 0; t < fp_out.rows(); ++t) {
    auto a = fp_out.row(t);
    auto b = q_out.row(t);
    for (std::size_t j = 0; j < oc; ++j) {
      vf[j] += (a[j] - mf[j]) * (a[j] - mf[j]);
      vq[j] += (b[j] - mq[j]) * (b[j] - mq[j]);
    }
  }
  r.output_mse = sq / static_cast<double>(fp_out.size());
  r.mean_shift.resize(oc);
  r.var_ratio.resize(oc);
  for (std::size_t j = 0; j < oc; ++j) {
    r.mean_shift[j] = std::abs(mq[j] - mf[j]);
    r.var_ratio[j] = vf[j] > 0.0 ? vq[j] / vf[j] : kUndefinedVarianceRatio;
  }
  if (experts) {
    if (experts->full.size() >= 2) r.cosine_full = mean_pairwise_cosine(experts->full);
    if (experts->specific.size() >= 2) r.cosine_specific = mean_pairwise_cosine(experts->specific);
  }
  return r;
}

}  // namespace kbvq
