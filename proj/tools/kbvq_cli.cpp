// Copyright 2026 The kbvq-moe Authors
// SPDX-License-Identifier: Apache-2.0

// kbvq: quantize, evaluate and analyse MoE expert groups.
//
//   kbvq quantize   --out layer.kbvq [input] [pipeline]
//   kbvq eval       --bundle layer.kbvq [input]
//   kbvq sweep-rank --ratios 1/256,1/128,1/64 --trials 20 [input] [pipeline]
//   kbvq ablate     --trials 10 [input] [pipeline]
//   kbvq report     --m 5632 --l 2048 --n 64 | --bundle layer.kbvq
//
// Input is a synthetic layer by default; --weights/--calib/--eval-input read
// tensor manifests instead. Exit codes: 0 ok, 2 config, 3 integrity, 4 IO.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "kbvq/kbvq.hpp"

namespace {

using kbvq::ErrorKind;
using json = nlohmann::ordered_json;

double parse_fraction(const std::string& s) {
  try {
    const auto slash = s.find('/');
    std::size_t used = 0;
    if (slash == std::string::npos) {
      const double v = std::stod(s, &used);
      kbvq::require(used == s.size(), ErrorKind::kConfig, "bad number '" + s + "'");
      return v;
    }
    const double num = std::stod(s.substr(0, slash), &used);
    kbvq::require(used == slash, ErrorKind::kConfig, "bad fraction '" + s + "'");
    const std::string den_s = s.substr(slash + 1);
    const double den = std::stod(den_s, &used);
    kbvq::require(used == den_s.size() && den != 0.0, ErrorKind::kConfig, "bad fraction '" + s + "'");
    return num / den;
  } catch (const std::logic_error&) {
    kbvq::fail(ErrorKind::kConfig, "bad number '" + s + "'");
  }
}

std::vector<double> parse_fraction_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_fraction(item));
  kbvq::require(!out.empty(), ErrorKind::kConfig, "empty ratio list");
  return out;
}

struct Options {
  // pipeline
  std::string k_ratio = "1/128";
  std::size_t d = 4;
  unsigned bits = 2;
  std::size_t iters = 100;
  std::string bcos_method = "variance_match";
  double eps_rel = 1e-8;
  std::uint64_t seed = 42;
  bool idre = true;
  bool bcos = true;
  bool klt = true;
  bool bcos_routed_only = false;
  std::size_t threads = 1;
  // input
  kbvq::SynthConfig synth;
  std::string expert_kind = "linear";
  std::string weights, calib, eval_input;
  std::size_t file_shared_experts = 0;
  std::size_t file_top_k = 2;
  // output
  std::string format = "json";

  kbvq::PipelineConfig pipeline() const {
    kbvq::PipelineConfig c;
    c.k_ratio = parse_fraction(k_ratio);
    c.vq.d = d;
    c.vq.bits = bits;
    c.vq.iters = iters;
    c.bcos_method = kbvq::parse_bcos_method(bcos_method);
    c.eps_rel = eps_rel;
    c.seed = seed;
    c.idre_on = idre;
    c.bcos_on = bcos;
    c.klt_on = klt;
    c.bcos_routed_only = bcos_routed_only;
    c.threads = threads;
    c.validate();
    return c;
  }
};

void add_pipeline_options(CLI::App& cmd, Options& o) {
  cmd.add_option("--k-ratio", o.k_ratio, "shared rank as a fraction of the input dim (e.g. 1/128)")
      ->capture_default_str();
  cmd.add_option("--d", o.d, "sub-vector length")->capture_default_str();
  cmd.add_option("--bits", o.bits, "bits per weight")->capture_default_str();
  cmd.add_option("--iters", o.iters, "max Lloyd iterations")->capture_default_str();
  cmd.add_option("--bcos-method", o.bcos_method, "variance_match | mmse_regression")->capture_default_str();
  cmd.add_option("--eps-rel", o.eps_rel, "relative eigenvalue floor for the basis inverse")->capture_default_str();
  cmd.add_option("--seed", o.seed, "run seed (also seeds the synthetic layer)")->capture_default_str();
  cmd.add_flag("--idre,!--no-idre", o.idre, "shared-subspace extraction");
  cmd.add_flag("--bcos,!--no-bcos", o.bcos, "output scale/bias correction");
  cmd.add_flag("--klt,!--no-klt", o.klt, "input-coherence basis (off: plain SVD)");
  cmd.add_flag("--bcos-routed-only", o.bcos_routed_only, "fit corrections on gate-routed tokens only");
  cmd.add_option("--threads", o.threads, "worker threads (output does not depend on it)")->capture_default_str();
}

void add_input_options(CLI::App& cmd, Options& o) {
  auto& s = o.synth;
  cmd.add_option("--d-model", s.d_model)->capture_default_str()->group("Synthetic layer");
  cmd.add_option("--oc", s.oc)->capture_default_str()->group("Synthetic layer");
  cmd.add_option("--n", s.n, "routing experts")->capture_default_str()->group("Synthetic layer");
  cmd.add_option("--m", s.m, "shared experts")->capture_default_str()->group("Synthetic layer");
  cmd.add_option("--top-k", s.top_k)->capture_default_str()->group("Synthetic layer");
  cmd.add_option("--shared-rank", s.shared_rank)->capture_default_str()->group("Synthetic layer");
  cmd.add_option("--shared-decay", s.shared_decay)->capture_default_str()->group("Synthetic layer");
  cmd.add_option("--noise-scale", s.noise_scale)->capture_default_str()->group("Synthetic layer");
  cmd.add_option("--activation-decay", s.activation_decay)->capture_default_str()->group("Synthetic layer");
  cmd.add_option("--input-mean", s.input_mean)->capture_default_str()->group("Synthetic layer");
  cmd.add_flag("--align-shared", s.align_shared)->group("Synthetic layer");
  cmd.add_option("--expert-kind", o.expert_kind, "linear | mlp")->capture_default_str()->group("Synthetic layer");
  cmd.add_option("--intermediate", s.intermediate)->capture_default_str()->group("Synthetic layer");
  cmd.add_flag("--renormalize", s.renormalize)->group("Synthetic layer");
  cmd.add_option("--calib-rows", s.calib_rows)->capture_default_str()->group("Synthetic layer");
  cmd.add_option("--eval-rows", s.eval_rows)->capture_default_str()->group("Synthetic layer");

  cmd.add_option("--weights", o.weights, "tensor manifest with 'router' and '<role>.<i>' experts")->group("File input");
  cmd.add_option("--calib", o.calib, "tensor manifest with calibration rows 'x'")->group("File input");
  cmd.add_option("--eval-input", o.eval_input, "tensor manifest with evaluation rows 'x'")->group("File input");
  cmd.add_option("--shared-experts", o.file_shared_experts, "leading experts that are always active")
      ->capture_default_str()
      ->group("File input");
  cmd.add_option("--file-top-k", o.file_top_k)->capture_default_str()->group("File input");
}

void add_format_option(CLI::App& cmd, Options& o) {
  cmd.add_option("--format", o.format, "json | kv")->check(CLI::IsMember({"json", "kv"}))->capture_default_str();
}

struct LoadedInput {
  kbvq::MoeLayerSpec layer;
  kbvq::Matrix calib;
  kbvq::Matrix eval;
};

kbvq::ExpertGroup collect_role(const kbvq::TensorFile& tf, const std::string& role) {
  kbvq::ExpertGroup g;
  g.role_label = role;
  for (std::size_t i = 0; tf.contains(role + "." + std::to_string(i)); ++i)
    g.experts.push_back(tf.at(role + "." + std::to_string(i)));
  return g;
}

// Rounds to f32 so a synthetic layer and its exported tensor files are the
// same weights, bit for bit.
void round_to_f32(kbvq::Matrix& m) {
  for (double& v : m.data()) v = static_cast<float>(v);
}

LoadedInput load_input(const Options& o, std::uint64_t seed) {
  if (o.weights.empty()) {
    kbvq::require(o.calib.empty() && o.eval_input.empty(), ErrorKind::kConfig,
                  "--calib/--eval-input need --weights");
    kbvq::SynthConfig s = o.synth;
    s.kind = kbvq::parse_expert_kind(o.expert_kind);
    s.seed = seed;
    kbvq::SynthLayer l = kbvq::synth_layer(s);
    round_to_f32(l.layer.gate_weights);
    for (auto& g : l.layer.roles)
      for (auto& w : g.experts) round_to_f32(w);
    round_to_f32(l.calib);
    round_to_f32(l.eval);
    return {std::move(l.layer), std::move(l.calib), std::move(l.eval)};
  }
  kbvq::require(!o.calib.empty(), ErrorKind::kConfig, "--weights needs --calib");
  const kbvq::TensorFile w = kbvq::load_tensor_file(o.weights);
  LoadedInput in;
  auto& layer = in.layer;
  layer.gate_weights = w.at("router");
  layer.n = layer.gate_weights.rows();
  layer.m = o.file_shared_experts;
  layer.top_k = o.file_top_k;
  layer.seed = seed;
  if (w.contains("w.0")) {
    layer.kind = kbvq::ExpertKind::kLinear;
    layer.roles.push_back(collect_role(w, "w"));
  } else {
    layer.kind = kbvq::ExpertKind::kGatedMlp;
    for (const char* r : {"gate", "up", "down"}) layer.roles.push_back(collect_role(w, r));
  }
  layer.validate();
  in.calib = kbvq::load_tensor_file(o.calib).at("x");
  in.eval = o.eval_input.empty() ? in.calib : kbvq::load_tensor_file(o.eval_input).at("x");
  return in;
}

void emit(const json& j, const Options& o) {
  if (o.format == "kv")
    std::cout << kbvq::report_kv(j);
  else
    std::cout << j.dump(2) << '\n';
}

double median(std::vector<double> v) { return kbvq::DriftReport::median(std::move(v)); }

int run_quantize(const Options& o, const std::string& out_path, const std::string& export_dir) {
  const kbvq::PipelineConfig cfg = o.pipeline();
  const LoadedInput in = load_input(o, cfg.seed);
  if (!export_dir.empty()) {
    const std::filesystem::path dir(export_dir);
    std::filesystem::create_directories(dir);
    kbvq::TensorFile w;
    w.add("router", in.layer.gate_weights);
    for (const auto& g : in.layer.roles)
      for (std::size_t i = 0; i < g.size(); ++i) w.add(g.role_label + "." + std::to_string(i), g.experts[i]);
    kbvq::save_tensor_file(w, dir / "weights.json");
    kbvq::save_tensor_file(kbvq::TensorFile({{"x", in.calib}}), dir / "calib.json");
    kbvq::save_tensor_file(kbvq::TensorFile({{"x", in.eval}}), dir / "eval.json");
  }
  const kbvq::QuantizedBundle b = kbvq::quantize_layer(cfg, in.layer, in.calib);
  kbvq::save_bundle(b, out_path);
  json j = kbvq::report_json(kbvq::measure_actual(b), std::nullopt, kbvq::mean_rho(b));
  j["predicted"] = kbvq::compression_json(kbvq::predicted_for_bundle(b));
  j["bundle"] = out_path;
  emit(j, o);
  return 0;
}

int run_eval(const Options& o, const std::string& bundle_path) {
  const kbvq::QuantizedBundle b = kbvq::load_bundle(bundle_path);
  const LoadedInput in = load_input(o, b.manifest.seed);
  emit(kbvq::evaluate(b, in.layer, in.eval).to_json(), o);
  return 0;
}

int run_sweep(const Options& o, const std::string& ratios_s, std::size_t trials) {
  const kbvq::PipelineConfig base = o.pipeline();
  const std::vector<double> ratios = parse_fraction_list(ratios_s);
  kbvq::require(trials >= 1, ErrorKind::kConfig, "--trials must be >= 1");
  std::vector<std::vector<kbvq::RankSweepPoint>> runs;
  for (std::size_t t = 0; t < trials; ++t) {
    kbvq::PipelineConfig cfg = base;
    cfg.seed = base.seed + t;
    const LoadedInput in = load_input(o, cfg.seed);
    runs.push_back(kbvq::sweep_rank(cfg, in.layer, in.calib, in.eval, ratios));
  }
  json j;
  j["trials"] = trials;
  j["points"] = json::array();
  for (std::size_t r = 0; r < ratios.size(); ++r) {
    std::vector<double> mse, rho;
    for (const auto& run : runs) {
      mse.push_back(run[r].output_mse);
      rho.push_back(run[r].rho_k);
    }
    const auto& first = runs.front()[r];
    j["points"].push_back({{"k_ratio", ratios[r]},
                           {"k", first.k},
                           {"rho_k_median", median(rho)},
                           {"output_mse_median", median(mse)},
                           {"effective_bits", first.measured.effective_bits()}});
  }
  if (o.format == "kv") {
    for (const auto& p : j["points"])
      std::cout << "k_ratio=" << p["k_ratio"] << " k=" << p["k"] << " rho_k_median=" << p["rho_k_median"]
                << " output_mse_median=" << p["output_mse_median"] << " effective_bits=" << p["effective_bits"]
                << '\n';
  } else {
    std::cout << j.dump(2) << '\n';
  }
  return 0;
}

int run_ablate(const Options& o, std::size_t trials, bool klt_arms) {
  const kbvq::PipelineConfig base = o.pipeline();
  kbvq::require(trials >= 1, ErrorKind::kConfig, "--trials must be >= 1");
  std::vector<std::vector<kbvq::AblationArm>> runs;
  for (std::size_t t = 0; t < trials; ++t) {
    kbvq::PipelineConfig cfg = base;
    cfg.seed = base.seed + t;
    const LoadedInput in = load_input(o, cfg.seed);
    runs.push_back(kbvq::run_ablation(cfg, in.layer, in.calib, in.eval, klt_arms));
  }
  json j;
  j["trials"] = trials;
  j["arms"] = json::array();
  for (std::size_t a = 0; a < runs.front().size(); ++a) {
    std::vector<double> mse;
    std::size_t best = 0;
    for (const auto& run : runs) {
      mse.push_back(run[a].output_mse);
      const auto min_it = std::min_element(run.begin(), run.end(), [](const auto& x, const auto& y) {
        return x.output_mse < y.output_mse;
      });
      best += static_cast<std::size_t>(min_it - run.begin()) == a;
    }
    const auto& arm = runs.front()[a];
    j["arms"].push_back({{"arm", arm.name},
                         {"idre", arm.idre},
                         {"bcos", arm.bcos},
                         {"klt", arm.klt},
                         {"output_mse_median", median(mse)},
                         {"best_in_trials", best},
                         {"effective_bits", arm.measured.effective_bits()}});
  }
  if (o.format == "kv") {
    for (const auto& a : j["arms"])
      std::cout << "arm=" << a["arm"].get<std::string>() << " output_mse_median=" << a["output_mse_median"]
                << " best_in_trials=" << a["best_in_trials"] << " effective_bits=" << a["effective_bits"] << '\n';
  } else {
    std::cout << j.dump(2) << '\n';
  }
  return 0;
}

struct ReportArgs {
  std::string bundle;
  std::uint64_t m = 5632, l = 2048, n = 64, b = 2, v = 4;
  std::string k_ratio = "1/128";
  bool bcos = true;
};

int run_report(const Options& o, const ReportArgs& r) {
  if (!r.bundle.empty()) {
    const auto bytes = kbvq::read_file_bytes(r.bundle);
    const kbvq::QuantizedBundle b = kbvq::parse_bundle(bytes);
    json j = kbvq::report_json(kbvq::measure_actual(bytes), std::nullopt, kbvq::mean_rho(b));
    j["predicted"] = kbvq::compression_json(kbvq::predicted_for_bundle(b));
    emit(j, o);
    return 0;
  }
  kbvq::BitBudget bb;
  bb.m = r.m;
  bb.l = r.l;
  bb.n = r.n;
  bb.b = r.b;
  bb.v = r.v;
  bb.include_bcos = r.bcos;
  if (const auto slash = r.k_ratio.find('/'); slash != std::string::npos) {
    parse_fraction(r.k_ratio);
    bb.k_num = std::stoull(r.k_ratio.substr(0, slash));
    bb.k_den = std::stoull(r.k_ratio.substr(slash + 1));
  } else {
    // Decimal ratios are carried on a 2^-20 grid.
    bb.k_den = std::uint64_t{1} << 20;
    bb.k_num = static_cast<std::uint64_t>(std::llround(parse_fraction(r.k_ratio) * static_cast<double>(bb.k_den)));
  }
  const kbvq::CompressionReport c = kbvq::effective_bits(bb);
  json j = kbvq::report_json(c, std::nullopt, std::nullopt);
  j["total_gib"] = c.total_gib();
  j["effective_bits_from_rounded_ratio"] = c.effective_bits_from_rounded_ratio();
  emit(j, o);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"KLT-guided shared-subspace extraction, vector quantization and output correction for MoE experts"};
  app.require_subcommand(1);
  Options o;

  auto* quant = app.add_subcommand("quantize", "compress a layer into a bundle");
  std::string out_path, export_dir;
  quant->add_option("--out", out_path, "bundle path")->required();
  quant->add_option("--export-inputs", export_dir, "also write the layer and inputs as tensor manifests here");
  add_pipeline_options(*quant, o);
  add_input_options(*quant, o);
  add_format_option(*quant, o);

  auto* eval = app.add_subcommand("eval", "compare a bundle against its full-precision layer");
  std::string bundle_path;
  eval->add_option("--bundle", bundle_path)->required();
  add_input_options(*eval, o);
  add_format_option(*eval, o);

  auto* sweep = app.add_subcommand("sweep-rank", "output error across shared-rank ratios");
  std::string ratios = "1/256,1/128,1/64";
  std::size_t trials = 1;
  sweep->add_option("--ratios", ratios, "comma-separated rank ratios")->capture_default_str();
  sweep->add_option("--trials", trials, "consecutive seeds; medians are reported")->capture_default_str();
  add_pipeline_options(*sweep, o);
  add_input_options(*sweep, o);
  add_format_option(*sweep, o);

  auto* ablate = app.add_subcommand("ablate", "none / IDRE / BCOS / both, with and without the KLT basis");
  bool klt_arms = true;
  ablate->add_option("--trials", trials, "consecutive seeds; medians are reported")->capture_default_str();
  ablate->add_flag("--klt-arms,!--no-klt-arms", klt_arms, "include the identity-basis arms");
  add_pipeline_options(*ablate, o);
  add_input_options(*ablate, o);
  add_format_option(*ablate, o);

  auto* report = app.add_subcommand("report", "storage accounting from dimensions or from a bundle");
  ReportArgs ra;
  report->add_option("--bundle", ra.bundle, "measure this bundle instead");
  report->add_option("--m", ra.m, "expert input dim")->capture_default_str();
  report->add_option("--l", ra.l, "expert output dim")->capture_default_str();
  report->add_option("--n", ra.n, "expert count")->capture_default_str();
  report->add_option("--bits", ra.b, "bits per weight")->capture_default_str();
  report->add_option("--d", ra.v, "sub-vector length")->capture_default_str();
  report->add_option("--k-ratio", ra.k_ratio)->capture_default_str();
  report->add_flag("--bcos,!--no-bcos", ra.bcos, "count scale/bias storage");
  add_format_option(*report, o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*quant) return run_quantize(o, out_path, export_dir);
    if (*eval) return run_eval(o, bundle_path);
    if (*sweep) return run_sweep(o, ratios, trials);
    if (*ablate) return run_ablate(o, trials, klt_arms);
    if (*report) return run_report(o, ra);
  } catch (const kbvq::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kbvq::exit_code_for(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
