// Copyright 2026 The kbvq-moe Authors
// SPDX-License-Identifier: Apache-2.0

// End-to-end compression of expert groups:
//
//   W^(i) = V_private[i] U_share  +  VQ(W^(i) - V_private[i] U_share)  then  y -> (1 + s) ⊙ y + b
//
// with stage toggles for ablations, plus evaluation of a bundle against the
// full-precision layer.

#pragma once

#include <algorithm>
#include <atomic>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "kbvq/bcos.hpp"
#include "kbvq/bundle.hpp"
#include "kbvq/error.hpp"
#include "kbvq/idre.hpp"
#include "kbvq/matrix.hpp"
#include "kbvq/moesim.hpp"
#include "kbvq/report.hpp"
#include "kbvq/rng.hpp"
#include "kbvq/vq.hpp"

namespace kbvq {

struct PipelineConfig {
  double k_ratio = 1.0 / 128.0;
  VqConfig vq;
  BcosMethod bcos_method = BcosMethod::kVarianceMatch;
  double eps_rel = 1e-8;
  std::uint64_t seed = 42;
  bool idre_on = true;
  bool bcos_on = true;
  bool klt_on = true;
  bool bcos_routed_only = false;  // fit corrections on gate-routed tokens only
  std::size_t threads = 1;

  void validate() const {
    require(k_ratio >= 0.0, ErrorKind::kConfig, "k_ratio must be non-negative");
    require(k_ratio <= 1.0, ErrorKind::kConfig, "k_ratio > 1 asks for more shared directions than inputs");
    require(eps_rel >= 0.0, ErrorKind::kConfig, "eps_rel must be non-negative");
    require(threads >= 1, ErrorKind::kConfig, "threads must be >= 1");
    vq.validate();
  }

  std::uint32_t flags() const {
    std::uint32_t f = 0;
    if (idre_on) f |= flags::kIdre;
    if (bcos_on) f |= flags::kBcos;
    if (klt_on) f |= flags::kKlt;
    if (bcos_method == BcosMethod::kMmseRegression) f |= flags::kMmse;
    return f;
  }

  /// FNV-1a over every field that changes the output (threads excluded).
  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    auto mix = [&](std::uint64_t v) {
      for (int i = 0; i < 8; ++i) {
        h ^= (v >> (8 * i)) & 0xffu;
        h *= 0x100000001b3ull;
      }
    };
    mix(std::bit_cast<std::uint64_t>(k_ratio));
    mix(vq.d);
    mix(vq.bits);
    mix(vq.iters);
    mix(std::bit_cast<std::uint64_t>(eps_rel));
    mix(seed);
    mix(flags());
    mix(bcos_routed_only);
    return h;
  }

  BundleManifest manifest() const {
    BundleManifest m;
    m.flags = flags();
    m.seed = seed;
    m.config_hash = hash();
    m.d = static_cast<std::uint32_t>(vq.d);
    m.bits = vq.bits;
    m.iters = static_cast<std::uint32_t>(vq.iters);
    m.k_ratio = k_ratio;
    return m;
  }
};

/// VQ settings for one expert of one group; the seed is derived from the
/// run seed so every expert trains its own codebook reproducibly.
inline VqConfig expert_vq_config(const PipelineConfig& cfg, std::size_t group_index, std::size_t expert) {
  VqConfig v = cfg.vq;
  v.seed = mix_seed(cfg.seed, (static_cast<std::uint64_t>(group_index) << 32) | expert);
  return v;
}

/// Runs fn(0..count-1) on up to `threads` workers. Each index writes only its
/// own slot, so results do not depend on the schedule.
inline void parallel_for(std::size_t count, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::min(threads, count);
  if (threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

/// Everything computed for one expert group, kept for inspection.
struct GroupArtifacts {
  KltBasis basis;
  std::vector<double> spectrum;  // empty when IDRE is off
  SplitWeights split;
  std::vector<Matrix> w_hat;     // shared + reconstructed specific, before correction
  std::vector<std::vector<double>> inertia_traces;
  GroupPayload payload;
};

/// One group through the pipeline. `cov_input` drives the input-coherence
/// basis; `stat_inputs[i]` are the calibration rows fed to expert i when
/// fitting its output correction.
inline GroupArtifacts run_group(const PipelineConfig& cfg, const ExpertGroup& group, const Matrix& cov_input,
                                const std::vector<Matrix>& stat_inputs, std::size_t group_index = 0) {
  cfg.validate();
  group.validate();
  const std::size_t n = group.size();
  const std::size_t oc = group.out_dim();
  const std::size_t ic = group.in_dim();
  require(cov_input.cols() == ic, ErrorKind::kShape,
          "calibration width " + std::to_string(cov_input.cols()) + " != expert input dim " + std::to_string(ic));
  require(!cfg.bcos_on || stat_inputs.size() == n, ErrorKind::kShape, "need calibration inputs for every expert");

  GroupArtifacts art;
  GroupPayload& g = art.payload;
  g.role = group.role_label;
  g.oc = oc;
  g.ic = ic;
  g.weights_fingerprint = weights_fingerprint(group.experts);

  std::size_t k = 0;
  if (cfg.idre_on) {
    art.basis = cfg.klt_on ? build_klt_basis(cov_input, cfg.eps_rel) : identity_basis(ic);
    k = std::min(rank_for_ratio(ic, cfg.k_ratio), std::min(n * oc, ic));
    const Matrix stacked = project_and_stack(group, art.basis);
    if (k > 0) {
      SharedDecomposition dec = extract_shared(stacked, art.basis, n, k);
      art.split = split_experts(group, dec);
      art.spectrum = std::move(dec.spectrum);
      g.U_share = std::move(dec.U_share);
      for (auto& v : dec.V_private) g.experts.push_back(ExpertPayload{std::move(v), {}, std::nullopt});
    } else {
      art.spectrum = svd(stacked).sigma;
      for (double& s : art.spectrum) s *= s;
    }
    double total = 0.0;
    for (double s : art.spectrum) total += s;
    g.rho_k = total > 0.0 ? redundancy_ratio(art.spectrum, k) : 0.0;
  }
  g.k = k;
  if (k == 0) {
    g.U_share = Matrix(0, 0);
    g.experts.assign(n, ExpertPayload{Matrix(oc, 0), {}, std::nullopt});
    art.split.shared.assign(n, Matrix(oc, ic));
    art.split.specific = group.experts;
  }

  art.w_hat.resize(n);
  art.inertia_traces.resize(n);
  parallel_for(n, cfg.threads, [&](std::size_t i) {
    VqResult q = quantize_matrix_traced(art.split.specific[i], expert_vq_config(cfg, group_index, i));
    art.w_hat[i] = art.split.shared[i] + reconstruct(q.tensor);
    art.inertia_traces[i] = std::move(q.inertia_trace);
    g.experts[i].specific = std::move(q.tensor);
    if (cfg.bcos_on) {
      const auto [sy, sh] = collect_paired_stats(group.experts[i], art.w_hat[i], stat_inputs[i]);
      g.experts[i].correction = fit_correction(cfg.bcos_method, sy, sh);
    }
  });
  return art;
}

/// Single-group entry point: every expert is calibrated on the same rows.
inline QuantizedBundle run_pipeline(const PipelineConfig& cfg, const ExpertGroup& group, const Matrix& x_calib) {
  QuantizedBundle b;
  b.manifest = cfg.manifest();
  const std::vector<Matrix> inputs(group.size(), x_calib);
  b.groups.push_back(run_group(cfg, group, x_calib, inputs).payload);
  return b;
}

namespace detail {

// Calibration rows an expert sees for its correction fit: all rows, or the
// gate-routed subset when that leaves at least two.
inline Matrix correction_rows(const PipelineConfig& cfg, const MoeLayerSpec& layer, std::size_t expert,
                              const Matrix& x) {
  if (!cfg.bcos_routed_only) return x;
  Matrix r = routed_rows(layer, expert, x);
  return r.rows() >= 2 ? r : x;
}

}  // namespace detail

/// Compresses every role group of a layer. Gate/up/linear groups are
/// calibrated on the layer input; the down group on the full-precision
/// intermediate activations of each expert, pooled for its basis.
inline QuantizedBundle quantize_layer(const PipelineConfig& cfg, const MoeLayerSpec& layer, const Matrix& x_calib) {
  cfg.validate();
  layer.validate();
  require(x_calib.cols() == layer.d_model(), ErrorKind::kShape, "calibration width != d_model");
  const std::size_t experts = layer.expert_count();
  // inputs[e][role]
  std::vector<std::vector<Matrix>> inputs(experts);
  for (std::size_t e = 0; e < experts; ++e)
    inputs[e] = expert_role_inputs(layer, e, detail::correction_rows(cfg, layer, e, x_calib));

  QuantizedBundle b;
  b.manifest = cfg.manifest();
  for (std::size_t r = 0; r < layer.roles.size(); ++r) {
    std::vector<Matrix> stat(experts);
    for (std::size_t e = 0; e < experts; ++e) stat[e] = inputs[e][r];
    Matrix cov_input = x_calib;
    if (r + 1 == layer.roles.size() && layer.kind == ExpertKind::kGatedMlp) {
      std::vector<Matrix> pooled;
      pooled.reserve(experts);
      for (std::size_t e = 0; e < experts; ++e) pooled.push_back(expert_role_inputs(layer, e, x_calib)[r]);
      cov_input = vstack(pooled);
    }
    b.groups.push_back(run_group(cfg, layer.roles[r], cov_input, stat, r).payload);
  }
  return b;
}

/// Same bundle with output correction removed, as if BCOS had been off.
inline QuantizedBundle without_correction(QuantizedBundle b, const PipelineConfig& cfg) {
  PipelineConfig off = cfg;
  off.bcos_on = false;
  b.manifest = off.manifest();
  for (auto& g : b.groups)
    for (auto& e : g.experts) e.correction.reset();
  return b;
}

struct QuantizedLayer {
  MoeLayerSpec layer;  // reconstructed weights, full-precision routing
  LayerCorrections corrections;
};

/// Checks that `b` was produced from exactly these weights.
inline void check_bundle_matches(const QuantizedBundle& b, const MoeLayerSpec& layer) {
  require(b.groups.size() == layer.roles.size(), ErrorKind::kIntegrity,
          "bundle has " + std::to_string(b.groups.size()) + " groups, layer has " +
              std::to_string(layer.roles.size()) + " roles");
  for (std::size_t r = 0; r < layer.roles.size(); ++r) {
    const auto& g = b.groups[r];
    const auto& role = layer.roles[r];
    require(g.role == role.role_label && g.experts.size() == role.size() && g.oc == role.out_dim() &&
                g.ic == role.in_dim(),
            ErrorKind::kIntegrity, "bundle group '" + g.role + "' does not match layer role '" + role.role_label + "'");
    require(g.weights_fingerprint == weights_fingerprint(role.experts), ErrorKind::kIntegrity,
            "bundle group '" + g.role + "' was built from different weights");
  }
}

inline QuantizedLayer dequantize_layer(const QuantizedBundle& b, const MoeLayerSpec& layer) {
  check_bundle_matches(b, layer);
  QuantizedLayer q{layer, {}};
  for (std::size_t r = 0; r < layer.roles.size(); ++r)
    for (std::size_t e = 0; e < layer.roles[r].size(); ++e)
      q.layer.roles[r].experts[e] = reconstruct_expert(b.groups[r], e);
  if (b.manifest.bcos_on()) {
    q.corrections.resize(b.groups.size());
    for (std::size_t r = 0; r < b.groups.size(); ++r)
      for (const auto& e : b.groups[r].experts) {
        require(e.correction.has_value(), ErrorKind::kIntegrity, "bundle flags BCOS but lacks a correction");
        q.corrections[r].push_back(*e.correction);
      }
  }
  return q;
}

struct EvalResult {
  DriftReport drift;
  CompressionReport measured;
  CompressionReport predicted;
  double rho_k = 0.0;  // mean over groups

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j = report_json(measured, drift, rho_k);
    j["predicted"] = compression_json(predicted);
    j["cosine_full"] = drift.cosine_full ? nlohmann::ordered_json(*drift.cosine_full) : nlohmann::ordered_json();
    j["cosine_specific"] =
        drift.cosine_specific ? nlohmann::ordered_json(*drift.cosine_specific) : nlohmann::ordered_json();
    return j;
  }
};

inline double mean_rho(const QuantizedBundle& b) {
  if (b.groups.empty()) return 0.0;
  double s = 0.0;
  for (const auto& g : b.groups) s += g.rho_k;
  return s / static_cast<double>(b.groups.size());
}

/// Output MSE of the layer rebuilt from `b` against the full-precision layer,
/// both routed by the full-precision gate.
inline double layer_output_mse(const QuantizedBundle& b, const MoeLayerSpec& layer, const Matrix& x,
                               const Matrix& fp_out) {
  const QuantizedLayer q = dequantize_layer(b, layer);
  const Matrix q_out = forward(q.layer, x, q.corrections);
  return drift_report(fp_out, q_out).output_mse;
}

inline EvalResult evaluate(const QuantizedBundle& b, const MoeLayerSpec& layer, const Matrix& x_eval) {
  layer.validate();
  const QuantizedLayer q = dequantize_layer(b, layer);
  const Matrix fp_out = forward(layer, x_eval);
  const Matrix q_out = forward(q.layer, x_eval, q.corrections);

  // Per-expert outputs of the first role, full weights vs specific parts.
  ExpertOutputs eo;
  const auto& g0 = b.groups.front();
  const Matrix& x0 = x_eval;
  if (layer.roles.front().size() >= 2) {
    for (std::size_t e = 0; e < layer.roles.front().size(); ++e) {
      const Matrix& w = layer.roles.front().experts[e];
      eo.full.push_back(matmul_nt(x0, w));
      Matrix spec = w;
      if (g0.k > 0) spec = w - matmul(g0.experts[e].V_private, g0.U_share);
      eo.specific.push_back(matmul_nt(x0, spec));
    }
  }
  EvalResult r;
  r.drift = drift_report(fp_out, q_out, eo);
  r.measured = measure_actual(b);
  r.predicted = predicted_for_bundle(b);
  r.rho_k = mean_rho(b);
  return r;
}

/// Four-arm ablation (none / IDRE / BCOS / both), optionally with the IDRE
/// arms repeated on the identity basis. BCOS never alters indices, so each
/// IDRE setting costs one quantization run.
struct AblationArm {
  std::string name;
  bool idre = false;
  bool bcos = false;
  bool klt = true;
  double output_mse = 0.0;
  CompressionReport measured;
};

inline std::vector<AblationArm> run_ablation(const PipelineConfig& base, const MoeLayerSpec& layer,
                                             const Matrix& x_calib, const Matrix& x_eval, bool with_klt_arms) {
  const Matrix fp_out = forward(layer, x_eval);
  std::vector<AblationArm> arms;
  auto add_pair = [&](const std::string& tag, bool idre, bool klt) {
    PipelineConfig cfg = base;
    cfg.idre_on = idre;
    cfg.klt_on = klt;
    cfg.bcos_on = true;
    const QuantizedBundle with = quantize_layer(cfg, layer, x_calib);
    const QuantizedBundle without = without_correction(with, cfg);
    AblationArm a{tag.empty() ? "none" : tag, idre, false, klt, layer_output_mse(without, layer, x_eval, fp_out),
                  measure_actual(without)};
    AblationArm c{tag.empty() ? "bcos" : tag + "+bcos", idre, true, klt,
                  layer_output_mse(with, layer, x_eval, fp_out), measure_actual(with)};
    arms.push_back(std::move(a));
    arms.push_back(std::move(c));
  };
  add_pair("", false, true);
  add_pair("idre", true, true);
  if (with_klt_arms) add_pair("idre-noklt", true, false);
  return arms;
}

inline const AblationArm& find_arm(const std::vector<AblationArm>& arms, const std::string& name) {
  for (const auto& a : arms)
    if (a.name == name) return a;
  fail(ErrorKind::kContract, "no ablation arm named '" + name + "'");
}

struct RankSweepPoint {
  double k_ratio = 0.0;
  std::size_t k = 0;
  double rho_k = 0.0;
  double output_mse = 0.0;
  CompressionReport measured;
};

inline std::vector<RankSweepPoint> sweep_rank(const PipelineConfig& base, const MoeLayerSpec& layer,
                                              const Matrix& x_calib, const Matrix& x_eval,
                                              const std::vector<double>& ratios) {
  const Matrix fp_out = forward(layer, x_eval);
  std::vector<RankSweepPoint> out;
  for (double ratio : ratios) {
    PipelineConfig cfg = base;
    cfg.k_ratio = ratio;
    const QuantizedBundle b = quantize_layer(cfg, layer, x_calib);
    RankSweepPoint p;
    p.k_ratio = ratio;
    p.k = b.groups.front().k;
    p.rho_k = mean_rho(b);
    p.output_mse = layer_output_mse(b, layer, x_eval, fp_out);
    p.measured = measure_actual(b);
    out.push_back(p);
  }
  return out;
}

}  // namespace kbvq
