// Copyright 2026 The kbvq-moe Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance run: one PASS/FAIL line per criterion, with the measured value,
// the threshold and the wall time. Exits non-zero if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "kbvq/kbvq.hpp"

namespace {

using namespace kbvq;

struct Outcome {
  bool pass = false;
  std::string detail;
};

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m(r, c);
  for (double& v : m.data()) v = rng.normal();
  return m;
}

double relative_gap(double a, double b) {
  const double scale = std::max({std::abs(a), std::abs(b), 1e-300});
  return std::abs(a - b) / scale;
}

double median(std::vector<double> v) { return DriftReport::median(std::move(v)); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// 1. Output error under input covariance C equals the Frobenius norm in the coherence space.
Outcome weighted_mse_identity() {
  Rng rng(1);
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t ic = 1 + rng.below(32);
    const std::size_t oc = 1 + rng.below(32);
    const Matrix g = random_matrix(ic, ic + 2, rng);
    const Matrix c = (1.0 / static_cast<double>(ic)) * matmul_nt(g, g);
    const Matrix e = random_matrix(oc, ic, rng);
    const KltBasis b = klt_basis_from_covariance(c);
    worst = std::max(worst, relative_gap(weighted_output_mse(e, c), frobenius_sq(matmul(e, b.U_X))));
  }
  return {worst <= 1e-8, fmt("max relative gap %.3g over 100 pairs (limit 1e-8)", worst)};
}

// 2. Residual energy after rank-k extraction equals the spectral tail.
Outcome tail_energy_identity() {
  double worst = 0.0, worst_full = 0.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(mix_seed(2, seed));
    ExpertGroup g;
    g.role_label = "w";
    for (int i = 0; i < 4; ++i) g.experts.push_back(random_matrix(6, 8, rng));
    Matrix x = random_matrix(64, 8, rng);
    for (std::size_t r = 0; r < x.rows(); ++r)
      for (std::size_t c = 0; c < 8; ++c) x(r, c) *= std::pow(c + 1.0, -1.5);
    const KltBasis b = build_klt_basis(x);
    const Matrix stacked = project_and_stack(g, b);
    for (std::size_t k = 1; k <= 8; ++k) {
      const SharedDecomposition d = extract_shared(stacked, b, 4, k);
      double tail = 0.0;
      for (std::size_t j = k; j < d.spectrum.size(); ++j) tail += d.spectrum[j];
      const double energy = klt_energy(split_experts(g, d).specific, b);
      // At k = ic the tail is exactly zero; compare against the spectrum scale instead.
      if (k == 8)
        worst_full = std::max(worst_full, energy / d.spectrum.front());
      else
        worst = std::max(worst, relative_gap(energy, tail));
    }
  }
  return {worst <= 1e-6 && worst_full <= 1e-12,
          fmt("max relative gap %.3g for k<ic (limit 1e-6), residual/top %.3g at k=ic; 50 groups", worst,
              worst_full)};
}

// 3. The extracted subspace captures the top-k spectrum and beats random frames.
Outcome ky_fan() {
  Rng rng(3);
  double worst_gap = 0.0;
  std::size_t losses = 0, frames = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng grng(mix_seed(30, seed));
    ExpertGroup g;
    g.role_label = "w";
    for (int i = 0; i < 4; ++i) g.experts.push_back(random_matrix(6, 8, grng));
    const KltBasis b = build_klt_basis(random_matrix(40, 8, grng));
    const Matrix stacked = project_and_stack(g, b);
    for (std::size_t k : {1u, 2u, 4u, 6u}) {
      const SharedDecomposition d = extract_shared(stacked, b, 4, k);
      const Matrix frame = transpose(matmul(d.U_share, b.U_X));
      const double best = frobenius_sq(matmul(stacked, frame));
      double top = 0.0;
      for (std::size_t j = 0; j < k; ++j) top += d.spectrum[j];
      worst_gap = std::max(worst_gap, relative_gap(best, top));
      for (int f = 0; f < 1000; ++f, ++frames)
        losses += frobenius_sq(matmul(stacked, detail::random_orthonormal(8, k, rng))) > best * (1 + 1e-12);
    }
  }
  return {worst_gap <= 1e-8 && losses == 0,
          fmt("energy vs top-k sum max gap %.3g (limit 1e-8); %zu of %zu random frames beat it", worst_gap, losses,
              frames)};
}

// 4. Regression fit is grid-optimal; variance match restores the moments.
Outcome output_correction() {
  Rng rng(4);
  const std::size_t rows = 200, oc = 8;
  Matrix y = random_matrix(rows, oc, rng), yh(rows, oc);
  for (std::size_t j = 0; j < oc; ++j) {
    const double scale = 0.6 + 0.8 * rng.uniform(), shift = rng.normal();
    for (std::size_t r = 0; r < rows; ++r) yh(r, j) = scale * y(r, j) + shift + 0.4 * rng.normal();
  }
  const auto [sy, sh] = paired_stats_from_outputs(y, yh);
  const BiasCorrection reg = fit_mmse_regression(sy, sh);
  std::size_t beaten = 0;
  for (std::size_t j = 0; j < oc; ++j) {
    auto mse = [&](double a, double b) {
      double s = 0.0;
      for (std::size_t r = 0; r < rows; ++r) s += (y(r, j) - (a * yh(r, j) + b)) * (y(r, j) - (a * yh(r, j) + b));
      return s / static_cast<double>(rows);
    };
    const double a0 = 1.0 + reg.s[j], b0 = reg.b[j], best = mse(a0, b0);
    for (int ia = -50; ia <= 50; ++ia)
      for (int ib = -50; ib <= 50; ++ib) beaten += mse(a0 + 0.01 * ia, b0 + 0.01 * ib) < best - 1e-12;
  }
  const Matrix vm = apply_correction(yh, fit_variance_match(sy, sh));
  const auto [sy2, sv] = paired_stats_from_outputs(y, vm);
  double mean_gap = 0.0, std_gap = 0.0;
  for (std::size_t j = 0; j < oc; ++j) {
    mean_gap = std::max(mean_gap, std::abs(sv.mean[j] - sy.mean[j]));
    std_gap = std::max(std_gap, relative_gap(sv.std[j], sy.std[j]));
  }
  return {beaten == 0 && mean_gap <= 1e-12 && std_gap <= 1e-9,
          fmt("%zu of %zu grid points beat the fit; mean gap %.3g, std relative gap %.3g (limit 1e-9)", beaten,
              oc * 101 * 101, mean_gap, std_gap)};
}

// 5. Storage formula at 5632x2048, 64 experts, 2 bits, d=4, rank 1/128.
Outcome storage_formula() {
  BitBudget bb;
  bb.m = 5632;
  bb.l = 2048;
  bb.n = 64;
  const CompressionReport r = effective_bits(bb);
  const double gib = std::round(r.total_gib() * 100.0) / 100.0;
  const double ratio = std::round(r.compression_ratio() * 100.0) / 100.0;
  const bool exact = r.total_bits() == 1516634112.0;
  return {exact && r.effective_bits_from_rounded_ratio() == 2.08 && gib == 0.18 && ratio == 0.87,
          fmt("total %.0f bits, %.2f GiB, ratio %.0f%%, %.2f bits/weight from the ratio (%.4f exact)",
              r.total_bits(), gib, ratio * 100, r.effective_bits_from_rounded_ratio(), r.effective_bits())};
}

// 6. Full method against plain VQ and the single-component arms.
Outcome end_to_end() {
  int wins = 0, ordered = 0;
  for (std::uint64_t t = 0; t < 100; ++t) {
    SynthConfig sc;
    sc.seed = 1000 + t;
    const SynthLayer s = synth_layer(sc);
    PipelineConfig cfg;
    cfg.seed = sc.seed;
    const auto arms = run_ablation(cfg, s.layer, s.calib, s.eval, false);
    const double none = find_arm(arms, "none").output_mse, idre = find_arm(arms, "idre").output_mse;
    const double bcos = find_arm(arms, "bcos").output_mse, full = find_arm(arms, "idre+bcos").output_mse;
    wins += full < none;
    ordered += full <= std::min(idre, bcos) && std::max(idre, bcos) <= none;
  }
  return {wins >= 95 && ordered >= 90,
          fmt("full < plain VQ in %d/100 (need 95); four-arm ordering in %d/100 (need 90)", wins, ordered)};
}

// 7. Coherence basis vs plain SVD, judged by held-out output error.
Outcome klt_ablation() {
  int wins = 0;
  for (std::uint64_t t = 0; t < 100; ++t) {
    SynthConfig sc;
    sc.seed = 2000 + t;
    const SynthLayer s = synth_layer(sc);
    const ExpertGroup& g = s.layer.roles[0];
    const Matrix c_eval = covariance(s.eval);
    const std::size_t k = rank_for_ratio(g.in_dim(), 1.0 / 64);
    auto residual = [&](const KltBasis& b) {
      const SplitWeights sw = split_experts(g, extract_shared(project_and_stack(g, b), b, g.size(), k));
      double total = 0.0;
      for (const auto& sp : sw.specific) total += weighted_output_mse(sp, c_eval);
      return total;
    };
    wins += residual(build_klt_basis(s.calib)) <= residual(identity_basis(g.in_dim()));
  }
  return {wins >= 90, fmt("coherence basis <= plain SVD in %d/100 seeds (need 90), k=2, held-out covariance", wins)};
}

// 8. Diminishing returns of the shared rank.
Outcome rank_sweep() {
  std::vector<double> m256, m128, m64;
  for (std::uint64_t t = 0; t < 20; ++t) {
    SynthConfig sc;
    sc.seed = 3000 + t;
    const SynthLayer s = synth_layer(sc);
    PipelineConfig cfg;
    cfg.seed = sc.seed;
    const auto pts = sweep_rank(cfg, s.layer, s.calib, s.eval, {1.0 / 256, 1.0 / 128, 1.0 / 64});
    m256.push_back(pts[0].output_mse);
    m128.push_back(pts[1].output_mse);
    m64.push_back(pts[2].output_mse);
  }
  const double a = median(m256), b = median(m128), c = median(m64);
  const double first = a - b, second = b - c;
  const bool pass = first > 0.0 && first > 5.0 * second;
  return {pass, fmt("median MSE %.4g -> %.4g -> %.4g; drops %.4g and %.4g, ratio %.2f (need > 5)", a, b, c, first,
                    second, second != 0.0 ? first / second : INFINITY)};
}

// 9. Stored indices, Lloyd traces and exact cover.
Outcome vq_correctness() {
  std::size_t wrong = 0, checked = 0, rises = 0, inexact = 0;
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    Rng rng(mix_seed(9, seed));
    const Matrix w = random_matrix(33, 64 + seed, rng);  // odd sizes exercise padding
    VqConfig cfg;
    cfg.seed = seed;
    cfg.iters = 50;
    const VqResult res = quantize_matrix_traced(w, cfg);
    for (std::size_t i = 1; i < res.inertia_trace.size(); ++i)
      rises += res.inertia_trace[i] > res.inertia_trace[i - 1] * (1 + 1e-12);
    const SubvectorSet v = partition_subvectors(w, cfg.d);
    const Codebook& cb = res.tensor.codebook;
    for (std::size_t i = 0; i < v.count(); ++i, ++checked) {
      const std::size_t len = v.valid_len(i);
      std::uint32_t best = 0;
      double best_d = INFINITY;
      for (std::uint32_t c = 0; c < cb.size(); ++c) {
        double dd = 0.0;
        for (std::size_t t = 0; t < len; ++t) {
          const double diff = v.data[i * cfg.d + t] - cb.words[c * cfg.d + t];
          dd += diff * diff;
        }
        if (dd < best_d) {
          best_d = dd;
          best = c;
        }
      }
      wrong += res.tensor.indices[i] != best;
    }
  }
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    // At most 16 distinct sub-vectors against K = 2^(1*4) = 16 codewords.
    Rng rng(mix_seed(90, seed));
    std::vector<double> patterns(16 * 4);
    for (double& p : patterns) p = rng.normal();
    Matrix w(16, 32);
    for (std::size_t r = 0; r < 16; ++r)
      for (std::size_t blk = 0; blk < 8; ++blk) {
        const std::size_t p = rng.below(16);
        for (std::size_t t = 0; t < 4; ++t) w(r, blk * 4 + t) = patterns[p * 4 + t];
      }
    VqConfig cfg;
    cfg.bits = 1;
    cfg.seed = seed;
    inexact += !(reconstruct(quantize_matrix(w, cfg)) == w);
  }
  return {wrong == 0 && rises == 0 && inexact == 0,
          fmt("%zu/%zu indices differ from brute force; %zu inertia rises; %zu/8 inexact covers", wrong, checked,
              rises, inexact)};
}

// 10. Thread-count independence, file round trip, measured vs predicted size.
Outcome determinism_and_format() {
  const SynthLayer s = synth_layer(SynthConfig{});
  PipelineConfig cfg;
  const auto one = serialize_bundle(quantize_layer(cfg, s.layer, s.calib));
  cfg.threads = 8;
  const QuantizedBundle b8 = quantize_layer(cfg, s.layer, s.calib);
  const auto eight = serialize_bundle(b8);
  const auto path = std::filesystem::temp_directory_path() / "kbvq_acceptance.kbvq";
  save_bundle(b8, path);
  const QuantizedBundle loaded = load_bundle(path);
  const bool round_trip = loaded == round_to_storage(b8) && serialize_bundle(loaded) == read_file_bytes(path);
  std::filesystem::remove(path);
  const double measured = measure_actual(eight).effective_bits();
  const double predicted = predicted_for_bundle(b8).effective_bits();
  const double gap = std::abs(measured / predicted - 1.0);
  return {one == eight && round_trip && gap <= 0.02,
          fmt("threads 1 vs 8 %s (%zu bytes); round trip %s; measured %.4f vs predicted %.4f bits (gap %.2f%%, limit 2%%)",
              one == eight ? "identical" : "DIFFER", one.size(), round_trip ? "bit-exact" : "MISMATCH", measured,
              predicted, 100 * gap)};
}

struct Criterion {
  int id;
  const char* name;
  double limit_s;
  std::function<Outcome()> run;
};

}  // namespace

int main() {
  const std::vector<Criterion> criteria = {
      {1, "weighted MSE identity", 1.0, weighted_mse_identity},
      {2, "tail energy identity", 1.0, tail_energy_identity},
      {3, "top-k subspace optimality", 5.0, ky_fan},
      {4, "output correction fits", 5.0, output_correction},
      {5, "storage formula example", 1e-3, storage_formula},
      {6, "end-to-end superiority", 120.0, end_to_end},
      {7, "coherence basis ablation", 60.0, klt_ablation},
      {8, "rank sweep shape", 120.0, rank_sweep},
      {9, "vector quantizer correctness", 10.0, vq_correctness},
      {10, "determinism and format", 30.0, determinism_and_format},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs < c.limit_s;
    const bool pass = o.pass && in_time;
    failed += !pass;
    std::printf("criterion %2d %-30s %s  %s  [%.3f s, limit %g s%s]\n", c.id, c.name, pass ? "PASS" : "FAIL",
                o.detail.c_str(), secs, c.limit_s, in_time ? "" : ", TOO SLOW");
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
