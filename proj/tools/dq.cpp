// dq: experiment runner for the differentiable-quantization library.
//
// Subcommands: gauss-mse, surface, gradnorm, memcalc, train, rerun.
// Every run writes its outputs plus a manifest.json into --out; `dq rerun
// --manifest <path>` replays the recorded config and reproduces the outputs
// byte for byte. Exit codes: 0 success, 2 configuration error, 3 numerical
// divergence.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dq/experiments.hpp"
#include "dq/io.hpp"
#include "dq/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitDiverged = 3;

// "512", "512KiB", "2MiB" -> bits. Bare numbers are KiB.
double parse_size_bits(const std::string& s) {
  double factor = dq::kKiB;
  std::string num = s;
  if (s.size() > 3 && s.compare(s.size() - 3, 3, "KiB") == 0) {
    num = s.substr(0, s.size() - 3);
  } else if (s.size() > 3 && s.compare(s.size() - 3, 3, "MiB") == 0) {
    num = s.substr(0, s.size() - 3);
    factor = dq::kMiB;
  }
  std::size_t pos = 0;
  const double v = std::stod(num, &pos);
  if (pos != num.size() || v <= 0.0)
    throw std::invalid_argument("bad size '" + s + "' (use e.g. 512, 512KiB, 2MiB)");
  return v * factor;
}

void ensure_outdir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create output directory " + dir + ": " + ec.message());
}

std::vector<std::string> mse_trace_header() {
  return {"step", "mse", "theta0", "theta1", "b", "d", "q_min", "q_max"};
}

void write_mse_trace(dq::CsvFile& csv, const std::vector<dq::MseStep>& trace) {
  for (const auto& r : trace)
    csv.write_row({std::to_string(r.step), dq::fmt_double(r.mse), dq::fmt_double(r.theta[0]),
                   dq::fmt_double(r.theta[1]), std::to_string(r.eff.b), dq::fmt_double(r.eff.d),
                   dq::fmt_double(r.eff.q_min), dq::fmt_double(r.eff.q_max)});
}

void save_run_manifest(const std::string& outdir, const std::string& subcommand,
                       std::uint64_t seed, const json& cfg,
                       const std::vector<std::string>& outputs) {
  dq::RunManifest m;
  m.subcommand = subcommand;
  m.seed = seed;
  m.config = cfg;
  m.outputs = outputs;
  dq::save_manifest(outdir, m);
}

int run_gauss_mse(const json& cfg, const std::string& outdir) {
  dq::GaussMseConfig c;
  c.param = dq::param_from_name(cfg.at("param").get<std::string>());
  c.use_adam = cfg.value("optimizer", "adam") == std::string("adam");
  c.lr = cfg.value("lr", 0.01);
  c.momentum = cfg.value("momentum", 0.9);
  c.steps = cfg.value("steps", 500L);
  c.seed = cfg.value("seed", std::uint64_t{1});
  c.samples = cfg.value("samples", std::size_t{10000});
  if (c.steps <= 0 || c.samples == 0) throw std::invalid_argument("steps and samples must be positive");

  const dq::GaussMseResult res = dq::run_gauss_mse(c);
  ensure_outdir(outdir);
  dq::CsvFile csv(outdir + "/gauss_mse.csv", mse_trace_header());
  write_mse_trace(csv, res.trace);
  save_run_manifest(outdir, "gauss-mse", c.seed, cfg, {"gauss_mse.csv"});
  if (res.diverged) {
    std::cerr << "gauss-mse: MSE became non-finite\n";
    return kExitDiverged;
  }
  std::cout << "gauss-mse " << dq::param_name(c.param) << ": final MSE "
            << dq::fmt_double(res.trace.back().mse) << " after " << c.steps << " steps\n";
  return kExitOk;
}

// Latent-grid defaults covering the interesting region around the N(0,1)
// optimum for each parametrization.
void surface_defaults(dq::Param p, double& t1_lo, double& t1_hi, int& t1_steps, double& t2_lo,
                      double& t2_hi, int& t2_steps) {
  t1_steps = 25;
  t2_steps = 40;
  switch (p) {
    case dq::Param::U1: t1_lo = 2; t1_hi = 8; t1_steps = 13; t2_lo = 0.05; t2_hi = 2.0; break;
    case dq::Param::U2: t1_lo = 2; t1_hi = 8; t1_steps = 13; t2_lo = 0.1; t2_hi = 6.0; break;
    case dq::Param::U3: t1_lo = 0.05; t1_hi = 2.0; t2_lo = 0.1; t2_hi = 6.0; break;
    case dq::Param::P1: t1_lo = 2; t1_hi = 8; t1_steps = 13; t2_lo = 0.25; t2_hi = 8.0; break;
    case dq::Param::P2: t1_lo = 2; t1_hi = 8; t1_steps = 13; t2_lo = 0x1.0p-8; t2_hi = 1.0; break;
    case dq::Param::P3: t1_lo = 0x1.0p-8; t1_hi = 1.0; t1_steps = 30; t2_lo = 0.25; t2_hi = 8.0; break;
  }
}

int run_surface(const json& cfg, const std::string& outdir) {
  dq::SurfaceConfig c;
  c.param = dq::param_from_name(cfg.at("param").get<std::string>());
  surface_defaults(c.param, c.t1_lo, c.t1_hi, c.t1_steps, c.t2_lo, c.t2_hi, c.t2_steps);
  c.t1_lo = cfg.value("t1_min", c.t1_lo);
  c.t1_hi = cfg.value("t1_max", c.t1_hi);
  c.t1_steps = cfg.value("t1_steps", c.t1_steps);
  c.t2_lo = cfg.value("t2_min", c.t2_lo);
  c.t2_hi = cfg.value("t2_max", c.t2_hi);
  c.t2_steps = cfg.value("t2_steps", c.t2_steps);
  c.seed = cfg.value("seed", std::uint64_t{1});
  c.samples = cfg.value("samples", std::size_t{10000});
  c.descent_steps = cfg.value("descent_steps", 200L);
  c.lr = cfg.value("lr", 0.01);

  const dq::SurfaceResult res = dq::run_surface(c);
  ensure_outdir(outdir);
  dq::CsvFile grid(outdir + "/surface.csv", {"theta0", "theta1", "mse"});
  for (const auto& p : res.grid)
    grid.write_row({dq::fmt_double(p.t1), dq::fmt_double(p.t2), dq::fmt_double(p.mse)});
  dq::CsvFile path(outdir + "/descent.csv", mse_trace_header());
  write_mse_trace(path, res.path);
  save_run_manifest(outdir, "surface", c.seed, cfg, {"surface.csv", "descent.csv"});
  std::cout << "surface " << dq::param_name(c.param) << ": " << res.grid.size()
            << " grid nodes, descent ends at MSE " << dq::fmt_double(res.path.back().mse) << "\n";
  return kExitOk;
}

int run_gradnorm(const json& cfg, const std::string& outdir) {
  const std::string fam_name = cfg.value("family", "uniform");
  dq::Family fam;
  if (fam_name == "uniform")
    fam = dq::Family::Uniform;
  else if (fam_name == "pow2")
    fam = dq::Family::Pow2;
  else
    throw std::invalid_argument("unknown family '" + fam_name + "' (uniform|pow2)");
  const int b_lo = cfg.value("b_min", 2);
  const int b_hi = cfg.value("b_max", 8);
  if (b_lo < 2 || b_hi < b_lo) throw std::invalid_argument("need 2 <= b-min <= b-max");

  const auto rows = dq::run_gradnorm(fam, b_lo, b_hi, dq::gradnorm_grid());
  ensure_outdir(outdir);
  dq::CsvFile csv(outdir + "/gradnorm.csv", {"param", "b", "max_norm"});
  for (const auto& r : rows)
    csv.write_row({dq::param_name(r.param), std::to_string(r.b), dq::fmt_double(r.max_norm)});
  json full = cfg;
  full["x_grid"] = "linspace(-130, 130, 64001) plus sentinels at +-1e300";
  full["latents"] = "U1 d=1, U2 q_max=1, U3 (d,q_max)=(1,1), P1 q_max=1, P2 q_min=2^-6, "
                    "P3 (q_min,q_max)=(2^-6,1)";
  save_run_manifest(outdir, "gradnorm", 0, full, {"gradnorm.csv"});
  std::cout << "gradnorm " << fam_name << ": " << rows.size() << " rows\n";
  return kExitOk;
}

std::string resolve_data_path(const std::string& path) {
  if (fs::exists(path)) return path;
  if (!fs::path(path).is_absolute()) {
    if (const char* dd = std::getenv("DATA_DIR")) {
      const std::string joined = (fs::path(dd) / path).string();
      if (fs::exists(joined)) return joined;
    }
  }
  throw std::runtime_error("cannot find '" + path + "' (also tried $DATA_DIR)");
}

int run_memcalc(const json& cfg, const std::string& outdir) {
  dq::StaticNet net = dq::load_netspec(cfg.at("spec").get<std::string>());
  for (auto& l : net.layers) {
    if (cfg.contains("bits_w")) l.b_w = cfg.at("bits_w").get<double>();
    if (cfg.contains("bits_x")) l.b_x = cfg.at("bits_x").get<double>();
  }
  const dq::MemoryReport r = dq::network_memory(net);

  json out;
  out["name"] = net.name;
  out["s_w_bits"] = r.s_w_bits;
  out["s_w_kib"] = r.s_w_bits / dq::kKiB;
  out["s_x_sum_bits"] = r.s_x_total_bits;
  out["s_x_sum_kib"] = r.s_x_total_bits / dq::kKiB;
  out["s_x_max_bits"] = r.s_x_max_bits;
  out["s_x_max_kib"] = r.s_x_max_bits / dq::kKiB;
  out["s_x_max_layer"] = net.layers[r.argmax_layer].name;
  out["c_mul"] = r.c_mul;
  out["c_add"] = r.c_add;
  json layers = json::array();
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const auto& l = net.layers[i];
    const auto& c = r.per_layer[i];
    layers.push_back({{"name", l.name},
                      {"b_w", l.b_w},
                      {"b_x", l.b_x},
                      {"c_mul", c.c_mul},
                      {"c_add", c.c_add},
                      {"s_w_bits", c.s_w_bits},
                      {"s_x_bits", c.s_x_bits}});
  }
  out["layers"] = layers;
  ensure_outdir(outdir);
  dq::write_json_file(outdir + "/memory.json", out);
  save_run_manifest(outdir, "memcalc", 0, cfg, {"memory.json"});
  std::cout << "memcalc " << net.name << ": S_w " << dq::fmt_double(r.s_w_bits / dq::kKiB)
            << " KiB, sum S_x " << dq::fmt_double(r.s_x_total_bits / dq::kKiB)
            << " KiB, max S_x " << dq::fmt_double(r.s_x_max_bits / dq::kKiB) << " KiB\n";
  return kExitOk;
}

dq::LabeledDataset slice_dataset(const dq::LabeledDataset& ds, std::size_t lo, std::size_t hi) {
  dq::LabeledDataset out;
  out.dim = ds.dim;
  out.classes = ds.classes;
  out.features.assign(ds.features.begin() + lo * ds.dim, ds.features.begin() + hi * ds.dim);
  out.labels.assign(ds.labels.begin() + lo, ds.labels.begin() + hi);
  return out;
}

const char* kind_name(dq::Layer::Kind k) {
  switch (k) {
    case dq::Layer::Kind::Dense: return "dense";
    case dq::Layer::Kind::Conv2d: return "conv2d";
    case dq::Layer::Kind::Relu: return "relu";
    case dq::Layer::Kind::GlobalAvgPool: return "gap";
  }
  return "?";
}

int run_train(const json& cfg, const std::string& outdir) {
  const dq::Param wparam = dq::param_from_name(cfg.at("param").get<std::string>());
  const dq::Param xparam =
      dq::param_from_name(cfg.value("act_param", std::string(dq::param_name(wparam))));

  const bool has_bw = cfg.contains("budget_w_bits");
  const bool has_bs = cfg.contains("budget_act_sum_bits");
  const bool has_bm = cfg.contains("budget_act_max_bits");
  const bool any_budget = has_bw || has_bs || has_bm;
  const bool auto_lam = cfg.value("auto_lambda", false);
  const bool has_lambda = cfg.contains("lambda");
  if (any_budget && wparam != dq::Param::U3 && wparam != dq::Param::P3)
    throw std::invalid_argument(
        "memory budgets need the bitwidth to be derived from trained range parameters; "
        "use --param U3 or P3");
  if (has_lambda && auto_lam)
    throw std::invalid_argument("--lambda and --auto-lambda are mutually exclusive");
  if ((has_lambda || auto_lam) && !any_budget)
    throw std::invalid_argument("--lambda/--auto-lambda need at least one --budget-* flag");

  dq::TrainConfig tc;
  tc.steps = cfg.value("steps", 500L);
  tc.batch = cfg.value("batch", 32);
  tc.optimizer = cfg.value("optimizer", "adam") == std::string("sgd") ? dq::OptKind::Sgd
                                                                      : dq::OptKind::Adam;
  tc.momentum = cfg.value("momentum", 0.9);
  tc.schedule.base_lr = cfg.value("lr", 0.01);
  tc.schedule.milestones = cfg.value("milestones", std::vector<long>{});
  tc.schedule.factor = cfg.value("lr_factor", 0.1);
  tc.seed = cfg.value("seed", std::uint64_t{1});
  tc.penalty_on = any_budget;
  tc.auto_lambda_at_start = auto_lam;
  if (any_budget) {
    const double lam = cfg.value("lambda", 0.1);  // matches the KiB constraint units
    dq::PenaltyConfig& p = tc.pcfg;
    p.g1_on = has_bw;
    p.g2_on = has_bs;
    p.g3_on = has_bm;
    if (has_bw) p.s0_w_bits = cfg.at("budget_w_bits").get<double>();
    if (has_bs) p.s0_x_bits = cfg.at("budget_act_sum_bits").get<double>();
    if (has_bm) p.s0_xhat_bits = cfg.at("budget_act_max_bits").get<double>();
    p.lambda = {has_bw ? lam : 0.0, has_bs ? lam : 0.0, has_bm ? lam : 0.0};
  }

  const int classes = cfg.value("classes", 4);
  const int dim = cfg.value("dim", 16);
  const long train_n = cfg.value("train_n", 512L);
  const long val_n = cfg.value("val_n", 256L);
  const std::vector<int> hidden = cfg.value("hidden", std::vector<int>{32});
  if (train_n <= 0 || val_n < 0) throw std::invalid_argument("need train-n > 0 and val-n >= 0");

  const dq::LabeledDataset full = dq::synthetic_classification(
      tc.seed, static_cast<std::size_t>(train_n + val_n), classes, dim);
  const dq::LabeledDataset train_ds = slice_dataset(full, 0, train_n);
  const dq::LabeledDataset val_ds = slice_dataset(full, train_n, train_n + val_n);

  dq::Network net;
  int in = dim;
  for (int h : hidden) {
    if (h <= 0) throw std::invalid_argument("hidden sizes must be positive");
    net.layers.push_back(dq::make_dense(in, h));
    net.layers.push_back(dq::make_relu());
    in = h;
  }
  net.layers.push_back(dq::make_dense(in, classes));
  dq::NormalGen wgen(tc.seed ^ 0x9e3779b97f4a7c15ULL);
  for (auto& l : net.layers) {
    if (!l.has_params()) continue;
    const double scale = 1.0 / std::sqrt(static_cast<double>(l.in_ch));
    for (auto& w : l.W) w = scale * wgen.next();
  }
  dq::init_quantizers(net, wparam, xparam, cfg.value("pretrained", false),
                      cfg.value("init_bits", 4));

  const dq::TrainLog log = dq::train(net, train_ds, val_ds, tc);

  ensure_outdir(outdir);
  std::vector<std::string> header{"step", "lr",  "loss",     "penalty", "g1",
                                  "g2",   "g3",  "s_w_kib",  "s_x_kib", "s_x_max_kib"};
  std::vector<std::size_t> qlayers;
  for (std::size_t i = 0; i < net.layers.size(); ++i)
    if (net.layers[i].has_params() && net.layers[i].quantized) qlayers.push_back(i);
  for (std::size_t i : qlayers) {
    const std::string tag = "L" + std::to_string(i);
    for (const char* side : {"w", "x"})
      for (const char* f : {"b", "d", "qmin", "qmax"})
        header.push_back(tag + "_" + side + "_" + f);
  }
  dq::CsvFile tl(outdir + "/trainlog.csv", header);
  for (const auto& r : log.records) {
    std::vector<std::string> row{std::to_string(r.step),
                                 dq::fmt_double(r.lr),
                                 dq::fmt_double(r.loss),
                                 dq::fmt_double(r.penalty_value),
                                 dq::fmt_double(r.g[0]),
                                 dq::fmt_double(r.g[1]),
                                 dq::fmt_double(r.g[2]),
                                 dq::fmt_double(r.s_w_bits / dq::kKiB),
                                 dq::fmt_double(r.s_x_bits / dq::kKiB),
                                 dq::fmt_double(r.s_x_max_bits / dq::kKiB)};
    for (const auto& e : r.eff) {
      for (const dq::EffectiveParams* p : {&e.w, &e.x}) {
        row.push_back(std::to_string(p->b));
        row.push_back(dq::fmt_double(p->d));
        row.push_back(dq::fmt_double(p->q_min));
        row.push_back(dq::fmt_double(p->q_max));
      }
    }
    tl.write_row(row);
  }

  dq::Tensor probe({train_ds.dim}, std::vector<double>(train_ds.sample(0),
                                                       train_ds.sample(0) + train_ds.dim));
  dq::CsvFile bw(outdir + "/bitwidths.csv",
                 {"layer", "kind", "b_w", "b_x", "s_w_kib", "s_x_kib"});
  for (const auto& row : dq::bitwidth_report(net, probe))
    bw.write_row({std::to_string(row.layer_index), kind_name(row.kind),
                  std::to_string(row.b_w), std::to_string(row.b_x),
                  dq::fmt_double(row.s_w_bits / dq::kKiB),
                  dq::fmt_double(row.s_x_bits / dq::kKiB)});

  json summary;
  summary["steps_run"] = log.records.size();
  summary["diverged"] = log.diverged;
  summary["abort_reason"] = log.abort_reason;
  summary["lambda_used"] = log.lambda_used;
  summary["final_train_loss"] = log.final_train_loss;
  summary["final_train_acc"] = log.final_train_acc;
  summary["final_val_loss"] = log.final_val_loss;
  summary["final_val_acc"] = log.final_val_acc;
  if (!log.records.empty()) {
    summary["init_s_w_kib"] = log.records.front().s_w_bits / dq::kKiB;
    summary["final_s_w_kib"] = log.records.back().s_w_bits / dq::kKiB;
    summary["final_s_x_kib"] = log.records.back().s_x_bits / dq::kKiB;
    summary["final_s_x_max_kib"] = log.records.back().s_x_max_bits / dq::kKiB;
  }
  dq::write_json_file(outdir + "/summary.json", summary);
  save_run_manifest(outdir, "train", tc.seed, cfg,
                    {"trainlog.csv", "bitwidths.csv", "summary.json"});
  if (log.diverged) {
    std::cerr << "train: diverged (" << log.abort_reason << ")\n";
    return kExitDiverged;
  }
  std::cout << "train " << dq::param_name(wparam) << ": val acc "
            << dq::fmt_double(log.final_val_acc) << ", S_w "
            << dq::fmt_double(log.records.back().s_w_bits / dq::kKiB) << " KiB\n";
  return kExitOk;
}

int dispatch(const std::string& sub, const json& cfg, const std::string& outdir) {
  if (sub == "gauss-mse") return run_gauss_mse(cfg, outdir);
  if (sub == "surface") return run_surface(cfg, outdir);
  if (sub == "gradnorm") return run_gradnorm(cfg, outdir);
  if (sub == "memcalc") return run_memcalc(cfg, outdir);
  if (sub == "train") return run_train(cfg, outdir);
  throw std::runtime_error("unknown subcommand '" + sub + "' in manifest");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"differentiable quantization experiments"};
  app.set_version_flag("--version", dq::kVersion);
  app.require_subcommand(1);

  std::string param = "U3", optimizer = "adam", out = "run";
  std::uint64_t seed = 1;
  long steps = 500;
  double lr = 0.01, momentum = 0.9;
  std::size_t samples = 10000;

  auto add_common = [&](CLI::App* sub, bool with_opt) {
    sub->add_option("--seed", seed, "rng seed");
    sub->add_option("--out", out, "output directory");
    if (with_opt) {
      sub->add_option("--steps", steps, "optimization steps");
      sub->add_option("--lr", lr, "learning rate");
      sub->add_option("--optimizer", optimizer, "optimizer")
          ->check(CLI::IsMember({"sgd", "adam"}));
      sub->add_option("--momentum", momentum, "sgd momentum");
    }
  };

  // gauss-mse
  auto* gm = app.add_subcommand("gauss-mse", "minimize quantization MSE of N(0,1) samples");
  gm->add_option("--param", param, "latent parametrization")
      ->check(CLI::IsMember({"U1", "U2", "U3", "P1", "P2", "P3"}));
  gm->add_option("--samples", samples, "sample count");
  add_common(gm, true);

  // surface
  auto* sf = app.add_subcommand("surface", "MSE over a latent grid plus a descent path");
  double t1_min = 0, t1_max = 0, t2_min = 0, t2_max = 0;
  int t1_steps = 0, t2_steps = 0;
  long descent_steps = 200;
  sf->add_option("--param", param, "latent parametrization")
      ->check(CLI::IsMember({"U1", "U2", "U3", "P1", "P2", "P3"}));
  auto* o_t1min = sf->add_option("--t1-min", t1_min, "first latent, grid start");
  auto* o_t1max = sf->add_option("--t1-max", t1_max, "first latent, grid end");
  auto* o_t1steps = sf->add_option("--t1-steps", t1_steps, "first latent, grid size");
  auto* o_t2min = sf->add_option("--t2-min", t2_min, "second latent, grid start");
  auto* o_t2max = sf->add_option("--t2-max", t2_max, "second latent, grid end");
  auto* o_t2steps = sf->add_option("--t2-steps", t2_steps, "second latent, grid size");
  sf->add_option("--descent-steps", descent_steps, "gradient descent path length");
  sf->add_option("--samples", samples, "sample count");
  add_common(sf, true);

  // gradnorm
  auto* gn = app.add_subcommand("gradnorm", "max latent-gradient norm vs bitwidth");
  std::string family = "uniform";
  int b_min = 2, b_max = 8;
  gn->add_option("--family", family, "quantizer family")
      ->check(CLI::IsMember({"uniform", "pow2"}));
  gn->add_option("--b-min", b_min, "lowest bitwidth");
  gn->add_option("--b-max", b_max, "highest bitwidth");
  add_common(gn, false);

  // memcalc
  auto* mc = app.add_subcommand("memcalc", "static memory/ops report for a network spec");
  std::string spec;
  double bits_w = 0, bits_x = 0;
  mc->add_option("--spec", spec, "network spec JSON (searched in $DATA_DIR too)")->required();
  auto* o_bw = mc->add_option("--bits-w", bits_w, "override every layer's weight bitwidth");
  auto* o_bx = mc->add_option("--bits-x", bits_x, "override every layer's activation bitwidth");
  add_common(mc, false);

  // train
  auto* tr = app.add_subcommand("train", "constrained training on the synthetic classifier");
  std::string act_param, budget_w, budget_as, budget_am;
  int batch = 32, classes = 4, dim = 16, init_bits = 4;
  long train_n = 512, val_n = 256;
  std::vector<int> hidden{32};
  std::vector<long> milestones;
  double lr_factor = 0.1, lambda = 0.1;
  bool auto_lambda_flag = false, pretrained = false;
  tr->add_option("--param", param, "weight/activation latent parametrization")
      ->check(CLI::IsMember({"U1", "U2", "U3", "P1", "P2", "P3"}));
  auto* o_ap = tr->add_option("--act-param", act_param,
                              "activation parametrization (same family; default --param)")
                   ->check(CLI::IsMember({"U1", "U2", "U3", "P1", "P2", "P3"}));
  tr->add_option("--batch", batch, "batch size");
  tr->add_option("--classes", classes, "class count");
  tr->add_option("--dim", dim, "feature dimension");
  tr->add_option("--train-n", train_n, "training samples");
  tr->add_option("--val-n", val_n, "validation samples");
  tr->add_option("--hidden", hidden, "hidden layer sizes")->delimiter(',');
  tr->add_option("--milestones", milestones, "lr decay steps")->delimiter(',');
  tr->add_option("--lr-factor", lr_factor, "lr decay factor per milestone");
  tr->add_option("--init-bits", init_bits, "initial effective bitwidth");
  tr->add_flag("--pretrained", pretrained, "stepsize from max|W| instead of 2^-3");
  auto* o_budw = tr->add_option("--budget-w", budget_w, "weight memory budget (KiB/MiB)");
  auto* o_buds = tr->add_option("--budget-act-sum", budget_as,
                                "total activation memory budget (KiB/MiB)");
  auto* o_budm = tr->add_option("--budget-act-max", budget_am,
                                "per-layer activation memory budget (KiB/MiB)");
  auto* o_lam = tr->add_option("--lambda", lambda, "penalty weight for all active budgets");
  tr->add_flag("--auto-lambda", auto_lambda_flag, "set penalty weights from the initial loss");
  add_common(tr, true);

  // rerun
  auto* rr = app.add_subcommand("rerun", "replay a recorded run from its manifest");
  std::string manifest_path, rerun_out;
  rr->add_option("--manifest", manifest_path, "path to manifest.json")->required();
  rr->add_option("--out", rerun_out, "output directory (default: the manifest's)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    json cfg;
    if (gm->parsed()) {
      cfg = {{"param", param}, {"optimizer", optimizer}, {"steps", steps}, {"lr", lr},
             {"momentum", momentum}, {"seed", seed}, {"samples", samples}};
      return run_gauss_mse(cfg, out);
    }
    if (sf->parsed()) {
      cfg = {{"param", param}, {"seed", seed}, {"samples", samples},
             {"descent_steps", descent_steps}, {"lr", lr}};
      if (*o_t1min) cfg["t1_min"] = t1_min;
      if (*o_t1max) cfg["t1_max"] = t1_max;
      if (*o_t1steps) cfg["t1_steps"] = t1_steps;
      if (*o_t2min) cfg["t2_min"] = t2_min;
      if (*o_t2max) cfg["t2_max"] = t2_max;
      if (*o_t2steps) cfg["t2_steps"] = t2_steps;
      return run_surface(cfg, out);
    }
    if (gn->parsed()) {
      cfg = {{"family", family}, {"b_min", b_min}, {"b_max", b_max}};
      return run_gradnorm(cfg, out);
    }
    if (mc->parsed()) {
      cfg = {{"spec", resolve_data_path(spec)}};
      if (*o_bw) cfg["bits_w"] = bits_w;
      if (*o_bx) cfg["bits_x"] = bits_x;
      return run_memcalc(cfg, out);
    }
    if (tr->parsed()) {
      cfg = {{"param", param},       {"optimizer", optimizer}, {"steps", steps},
             {"lr", lr},             {"momentum", momentum},   {"seed", seed},
             {"batch", batch},       {"classes", classes},     {"dim", dim},
             {"train_n", train_n},   {"val_n", val_n},         {"hidden", hidden},
             {"milestones", milestones}, {"lr_factor", lr_factor},
             {"init_bits", init_bits},   {"pretrained", pretrained}};
      if (*o_ap) cfg["act_param"] = act_param;
      if (*o_budw) cfg["budget_w_bits"] = parse_size_bits(budget_w);
      if (*o_buds) cfg["budget_act_sum_bits"] = parse_size_bits(budget_as);
      if (*o_budm) cfg["budget_act_max_bits"] = parse_size_bits(budget_am);
      if (*o_lam) cfg["lambda"] = lambda;
      if (auto_lambda_flag) cfg["auto_lambda"] = true;
      return run_train(cfg, out);
    }
    if (rr->parsed()) {
      const dq::RunManifest m = dq::load_manifest(manifest_path);
      const std::string dir = !rerun_out.empty()
                                  ? rerun_out
                                  : fs::path(manifest_path).parent_path().string();
      return dispatch(m.subcommand, m.config, dir.empty() ? "." : dir);
    }
  } catch (const std::exception& e) {
    std::cerr << "dq: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitConfig;
}
