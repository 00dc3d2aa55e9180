// Copyright 2026 The parmac Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Command-line front end. Exit codes: 0 success, 1 usage error, 2 runtime
// error.

#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "parmac/data.hpp"
#include "parmac/eval.hpp"
#include "parmac/mac.hpp"
#include "parmac/model.hpp"
#include "parmac/parmac.hpp"
#include "parmac/speedup.hpp"

namespace parmac {
namespace cli {

using nlohmann::json;

inline json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kMalformedRecord, path + ": " + e.what());
  }
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << text;
}

template <class T>
T get_or(const json& j, const char* key, T fallback) {
  return j.contains(key) ? j.at(key).get<T>() : fallback;
}

// Everything a train/run/simulate invocation needs, resolved from JSON.
struct RunSetup {
  Dataset train;
  Dataset validation;
  Dataset reserve;
  MacState init;
  ParmacConfig parmac;
};

inline ZMode parse_z_mode(const std::string& s) {
  if (s == "enumerate") return ZMode::kEnumerate;
  if (s == "alternate") return ZMode::kAlternate;
  throw Error(ErrorCode::kInvalidArgument, "z_mode must be enumerate or alternate");
}

inline WMode parse_w_mode(const std::string& s) {
  if (s == "sgd") return WMode::kSgd;
  if (s == "exact") return WMode::kExact;
  throw Error(ErrorCode::kInvalidArgument, "w_mode must be sgd or exact");
}

inline Phase parse_phase(const std::string& s) {
  if (s == "W" || s == "w") return Phase::kW;
  if (s == "Z" || s == "z") return Phase::kZ;
  throw Error(ErrorCode::kInvalidArgument, "phase must be W or Z");
}

inline std::vector<ClusterEvent> parse_events(const json& cfg) {
  std::vector<ClusterEvent> out;
  for (const auto& f : cfg.value("faults", json::array())) {
    ClusterEvent e;
    e.op = EventOp::kFault;
    e.iteration = get_or<std::size_t>(f, "iteration", 0);
    e.phase = parse_phase(get_or<std::string>(f, "phase", "W"));
    e.tick = get_or<std::size_t>(f, "tick", 1);
    e.machine = f.at("machine").get<std::size_t>();
    out.push_back(e);
  }
  for (const auto& m : cfg.value("membership", json::array())) {
    ClusterEvent e;
    auto op = m.at("op").get<std::string>();
    if (op == "add") e.op = EventOp::kAdd;
    else if (op == "remove") e.op = EventOp::kRemove;
    else throw Error(ErrorCode::kInvalidArgument, "membership op must be add or remove");
    e.iteration = get_or<std::size_t>(m, "iteration", 0);
    e.phase = parse_phase(get_or<std::string>(m, "phase", e.op == EventOp::kAdd ? "W" : "Z"));
    e.tick = get_or<std::size_t>(m, "tick", 1);
    e.machine = m.at("machine").get<std::size_t>();
    e.points = get_or<std::size_t>(m, "points", 0);
    if (m.contains("after")) e.after = m.at("after").get<std::size_t>();
    out.push_back(e);
  }
  return out;
}

inline RunSetup load_setup(const json& cfg) {
  const json seeds = cfg.value("seeds", json::object());
  auto seed = [&](const char* key, std::uint64_t fallback) {
    if (seeds.contains(key)) return seeds.at(key).get<std::uint64_t>();
    return get_or<std::uint64_t>(cfg, (std::string(key) + "_seed").c_str(), fallback);
  };

  RunSetup s;
  const std::size_t reserve = get_or<std::size_t>(cfg, "reserve", 0);
  Dataset all;
  const json data = cfg.value("data", json::object());
  if (data.contains("path")) {
    all = load_vecs(data.at("path").get<std::string>());
  } else {
    const json syn = data.value("synthetic", data);
    all = generate_synthetic(get_or<std::size_t>(syn, "n", 2000) + reserve, get_or<std::size_t>(syn, "d", 16),
                             get_or<std::size_t>(syn, "clusters", 50), seed("data", get_or<std::uint64_t>(syn, "seed", 1)));
  }
  require(all.size() > reserve, "reserve leaves no training data");
  s.reserve = all.range(all.size() - reserve, all.size());
  Dataset pool = all.range(0, all.size() - reserve);

  auto split = split_validation(pool, get_or<double>(cfg, "validation_fraction", 0.1), seed("split", 1));
  s.train = std::move(split.train);
  s.validation = std::move(split.validation);

  auto& mac = s.parmac.mac;
  mac.L = get_or<std::size_t>(cfg, "L", 8);
  const json sched = cfg.value("schedule", json::object());
  mac.schedule.mu0 = get_or<double>(sched, "mu0", 0.005);
  mac.schedule.factor = get_or<double>(sched, "factor", 1.2);
  mac.schedule.max_iters = get_or<std::size_t>(sched, "max_iters", 26);
  const json sgd = cfg.value("sgd", json::object());
  mac.sgd.epochs = get_or<std::size_t>(sgd, "epochs", get_or<std::size_t>(cfg, "epochs", 1));
  mac.sgd.minibatch = get_or<std::size_t>(sgd, "minibatch", 1);
  mac.sgd.lambda = get_or<double>(sgd, "lambda", 1e-4);
  mac.sgd.eta_base = get_or<double>(sgd, "eta_base", 0.1);
  mac.sgd.seed = seed("sgd", get_or<std::uint64_t>(sgd, "seed", 1));
  mac.sgd.shuffle = get_or<bool>(sgd, "shuffle", true);
  mac.z_mode = parse_z_mode(get_or<std::string>(cfg, "z_mode", "enumerate"));
  mac.w_mode = parse_w_mode(get_or<std::string>(cfg, "w_mode", "sgd"));
  mac.exact_svm_epochs = get_or<std::size_t>(cfg, "exact_svm_epochs", 30);
  mac.early_stop = get_or<bool>(cfg, "early_stop", true);
  mac.timing = get_or<bool>(cfg, "timing", false);
  const json metric = cfg.value("metric", json::object());
  mac.metric.K_true = get_or<std::size_t>(metric, "K", 50);
  mac.metric.k_retrieved = get_or<std::size_t>(metric, "k", 50);
  mac.metric.R_list = get_or<std::vector<std::size_t>>(metric, "R", {1, 10, 100});
  mac.validate();

  s.init = initialize_from_pca(s.train, mac.L, get_or<std::size_t>(cfg, "pca_subset", 1000), seed("init", 1));

  auto& pm = s.parmac;
  pm.P = get_or<std::size_t>(cfg, "P", 1);
  pm.speeds = get_or<std::vector<double>>(cfg, "speeds", {});
  pm.consecutive = get_or<bool>(cfg, "consecutive", false);
  pm.shuffle_topology = get_or<bool>(cfg, "shuffle", get_or<bool>(cfg, "shuffle_topology", false));
  pm.fault_tolerant = get_or<bool>(cfg, "fault_tolerant", false);
  pm.topology_seed = seed("topology", 1);
  auto exec = get_or<std::string>(cfg, "executor", "lockstep");
  if (exec == "threaded") pm.executor = Executor::kThreaded;
  else if (exec == "lockstep") pm.executor = Executor::kLockstep;
  else throw Error(ErrorCode::kInvalidArgument, "executor must be lockstep or threaded");
  const json cost = cfg.value("cost", json::object());
  pm.cost.train_per_value = get_or<double>(cost, "train_per_value", pm.cost.train_per_value);
  pm.cost.comm_latency = get_or<double>(cost, "comm_latency", pm.cost.comm_latency);
  pm.cost.comm_per_value = get_or<double>(cost, "comm_per_value", pm.cost.comm_per_value);
  pm.events = parse_events(cfg);
  pm.reserve = s.reserve;
  pm.timing = mac.timing;
  return s;
}

inline void write_run_outputs(const std::filesystem::path& dir, const BAModel& model, const RunRecord& record) {
  std::filesystem::create_directories(dir);
  std::ostringstream csv;
  write_run_csv(csv, record);
  write_text(dir / "run.csv", csv.str());
  save_checkpoint((dir / "model.pmac").string(), model);
}

inline void write_parmac_outputs(const std::filesystem::path& dir, const ParmacResult& r) {
  write_run_outputs(dir, r.model, r.record);
  write_text(dir / "commlog.json", r.comm.to_json().dump(2) + "\n");
  std::ostringstream trace;
  write_trace_csv(trace, r.trace);
  write_text(dir / "trace.csv", trace.str());
}

inline std::vector<std::size_t> parse_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(static_cast<std::size_t>(std::stoull(item)));
  return out;
}

inline int run_cli(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"ParMAC binary autoencoder trainer, cluster simulator and speedup model", "parmac"};
  app.require_subcommand(1);

  // gen
  auto* gen = app.add_subcommand("gen", "Write a synthetic Gaussian-mixture dataset");
  std::size_t gen_n = 2000, gen_d = 16, gen_k = 50;
  std::uint64_t gen_seed = 1;
  std::string gen_out;
  gen->add_option("--n", gen_n, "Number of points")->check(CLI::PositiveNumber);
  gen->add_option("--d", gen_d, "Dimension")->check(CLI::PositiveNumber);
  gen->add_option("--clusters", gen_k, "Mixture components")->check(CLI::PositiveNumber);
  gen->add_option("--seed", gen_seed, "Seed");
  gen->add_option("--out", gen_out, "Output .fvecs path")->required();

  // train
  auto* train = app.add_subcommand("train", "Serial MAC training");
  std::string train_cfg, train_out = ".";
  train->add_option("--config", train_cfg, "JSON config")->required();
  train->add_option("--out", train_out, "Output directory");

  // run
  auto* run = app.add_subcommand("run", "Distributed MAC on the ring");
  std::string run_cfg, run_out = ".";
  std::size_t run_p = 0;
  bool run_threaded = false;
  run->add_option("--config", run_cfg, "JSON config")->required();
  run->add_option("--P", run_p, "Machines (overrides the config)");
  run->add_flag("--threaded", run_threaded, "One thread per machine");
  run->add_option("--out", run_out, "Output directory");

  // simulate
  auto* sim = app.add_subcommand("simulate", "Lockstep replay of a scenario with faults and membership changes");
  std::string sim_cfg, sim_out = ".";
  sim->add_option("--scenario", sim_cfg, "Scenario JSON")->required();
  sim->add_option("--out", sim_out, "Output directory");

  // speedup
  auto* sp = app.add_subcommand("speedup", "Speedup model curve and theorem checks");
  SpeedupParams sp_params{1, 1e6, 512, 1, 1, 1e3, 5};
  std::size_t sp_pmax = 2048, sp_stride = 1, sp_draws = 100;
  std::string sp_out = "speedup.csv", sp_verify;
  sp->add_option("--N", sp_params.N, "Training points");
  sp->add_option("--M", sp_params.M, "Independent submodels");
  sp->add_option("--e", sp_params.e, "Epochs");
  sp->add_option("--twr", sp_params.t_w_r, "W compute time per submodel and point");
  sp->add_option("--twc", sp_params.t_w_c, "W communication time per submodel");
  sp->add_option("--tzr", sp_params.t_z_r, "Z compute time per point");
  sp->add_option("--pmax", sp_pmax, "Largest P")->check(CLI::PositiveNumber);
  sp->add_option("--stride", sp_stride, "Step in P")->check(CLI::PositiveNumber);
  sp->add_option("--out", sp_out, "Curve CSV");
  sp->add_option("--verify", sp_verify, "Also write a theorem verification report to this JSON file");
  sp->add_option("--draws", sp_draws, "Random parameter draws for --verify");

  // eval
  auto* ev = app.add_subcommand("eval", "Retrieval precision and recall of a model");
  std::string ev_base, ev_queries, ev_model, ev_out = "metrics.json", ev_r = "1,10,100";
  std::size_t ev_K = 50, ev_k = 50;
  ev->add_option("--base", ev_base, "Base set (.fvecs/.bvecs)")->required();
  ev->add_option("--queries", ev_queries, "Query set; omitted: base points query the rest of the base");
  ev->add_option("--model", ev_model, "Checkpoint")->required();
  ev->add_option("--K", ev_K, "True neighbours")->check(CLI::PositiveNumber);
  ev->add_option("--k", ev_k, "Retrieved neighbours")->check(CLI::PositiveNumber);
  ev->add_option("--R", ev_r, "Comma-separated recall cutoffs");
  ev->add_option("--out", ev_out, "Metrics JSON");

  // fit-times
  auto* fit = app.add_subcommand("fit-times", "Fit t_w_c and t_z_r (t_w_r = 1) to measured speedups");
  std::string fit_in;
  double fit_N = 0, fit_M = 0, fit_e = 1;
  fit->add_option("--measurements", fit_in, "CSV with columns P,S")->required();
  fit->add_option("--N", fit_N, "Training points")->required();
  fit->add_option("--M", fit_M, "Independent submodels")->required();
  fit->add_option("--e", fit_e, "Epochs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gen) {
      save_vecs(gen_out, generate_synthetic(gen_n, gen_d, gen_k, gen_seed));
    } else if (*train) {
      auto s = load_setup(read_json(train_cfg));
      auto r = mac_train(s.train, s.validation, s.parmac.mac, std::move(s.init));
      write_run_outputs(train_out, r.model, r.record);
      out << "stop=" << r.record.stop_reason << " iterations=" << r.record.iterations.size()
          << " precision=" << r.record.best_precision << "\n";
    } else if (*run || *sim) {
      auto cfg = read_json(*run ? run_cfg : sim_cfg);
      auto s = load_setup(cfg);
      if (*run && run_p > 0) s.parmac.P = run_p;
      if (*run && run_threaded) s.parmac.executor = Executor::kThreaded;
      if (*sim) s.parmac.executor = Executor::kLockstep;
      auto r = run_parmac(s.train, s.validation, s.parmac, std::move(s.init));
      write_parmac_outputs(*run ? run_out : sim_out, r);
      out << "stop=" << r.record.stop_reason << " iterations=" << r.record.iterations.size()
          << " messages=" << r.comm.total_messages() << " precision=" << r.record.best_precision << "\n";
    } else if (*sp) {
      sp_params.validate();
      std::ostringstream csv;
      emit_curve(csv, sp_params, sp_pmax, sp_stride);
      write_text(sp_out, csv.str());
      auto g = global_max(sp_params);
      auto r = ratios(sp_params);
      out << "rho1=" << r.rho1 << " rho2=" << r.rho2 << " rho=" << r.rho << " P*=" << g.P_star << " S*=" << g.S_star
          << "\n";
      if (!sp_verify.empty()) {
        VerifierConfig vc;
        vc.draws = sp_draws;
        auto rep = theorem_verifier(vc);
        write_text(sp_verify, rep.dump(2) + "\n");
        out << "violations=" << rep["violations"].size() << "\n";
      }
    } else if (*ev) {
      Dataset base = load_vecs(ev_base);
      BAModel model = load_checkpoint(ev_model);
      MetricConfig mc;
      mc.K_true = ev_K;
      mc.k_retrieved = ev_k;
      mc.R_list = parse_list(ev_r);
      RetrievalMetrics m;
      auto base_codes = encode_all(model.encoder, base);
      if (ev_queries.empty()) {
        m = evaluate_retrieval(base, base_codes, base, base_codes, mc, true);
      } else {
        Dataset q = load_vecs(ev_queries);
        m = evaluate_retrieval(base, base_codes, q, encode_all(model.encoder, q), mc, false);
      }
      json j;
      j["precision"] = m.precision;
      j["recall"] = json::object();
      for (auto [R, v] : m.recall) j["recall"][std::to_string(R)] = v;
      write_text(ev_out, j.dump(2) + "\n");
      out << j.dump() << "\n";
    } else if (*fit) {
      std::ifstream in(fit_in);
      if (!in) throw Error(ErrorCode::kIo, "cannot open " + fit_in);
      std::vector<Measurement> ms;
      std::string line;
      while (std::getline(in, line)) {
        if (line.empty() || !(std::isdigit(static_cast<unsigned char>(line[0])) || line[0] == '.')) continue;
        auto comma = line.find(',');
        if (comma == std::string::npos) throw Error(ErrorCode::kMalformedRecord, "expected P,S rows");
        ms.push_back({std::stod(line.substr(0, comma)), std::stod(line.substr(comma + 1))});
      }
      auto f = fit_time_params(ms, fit_N, fit_M, fit_e);
      json j{{"t_w_r", 1.0}, {"t_w_c", f.t_w_c}, {"t_z_r", f.t_z_r}, {"sse", f.sse}};
      out << j.dump() << "\n";
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace cli

using cli::run_cli;

}  // namespace parmac
