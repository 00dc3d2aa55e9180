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

// Distributed MAC for the binary autoencoder: shards and codes stay on their
// machines, hash functions and decoder rows circulate on the ring.

#pragma once

#include <chrono>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "parmac/data.hpp"
#include "parmac/mac.hpp"
#include "parmac/model.hpp"
#include "parmac/runtime.hpp"

namespace parmac {

// Submodel m < L is hash function m; the rest are decoder rows.
class BaProblem {
 public:
  BaProblem(std::size_t L, std::size_t D, SgdConfig sgd) : L_(L), D_(D), sgd_(sgd) {}

  std::size_t submodel_count() const { return L_ + D_; }
  std::size_t payload_size(std::size_t m) const { return parmac::payload_size(submodel_at(m, L_), L_, D_); }
  SubmodelId wire_id(std::size_t m) const { return submodel_at(m, L_); }
  std::size_t shard_size(MachineId id) const {
    auto it = shards_.find(id);
    return it == shards_.end() ? 0 : it->second.size();
  }

  void train(MachineId id, std::size_t m, std::size_t first_epoch, std::size_t passes, std::span<double> w) const {
    auto it = shards_.find(id);
    if (it == shards_.end() || it->second.empty()) return;
    train_submodel(submodel_at(m, L_), it->second, codes_.at(id), sgd_, {iteration_, id}, first_epoch, passes, w);
  }

  void set_iteration(std::size_t i) { iteration_ = i; }

  void put_shard(MachineId id, Dataset data) { shards_[id] = std::move(data); }
  void drop(MachineId id) {
    shards_.erase(id);
    codes_.erase(id);
  }
  bool has_codes(MachineId id) const { return codes_.count(id) > 0; }
  void put_codes(MachineId id, CodeMatrix c) { codes_[id] = std::move(c); }

  std::map<MachineId, Dataset>& shards() { return shards_; }
  const std::map<MachineId, Dataset>& shards() const { return shards_; }
  std::map<MachineId, CodeMatrix>& codes() { return codes_; }
  const std::map<MachineId, CodeMatrix>& codes() const { return codes_; }

 private:
  std::size_t L_;
  std::size_t D_;
  SgdConfig sgd_;
  std::size_t iteration_ = 0;
  std::map<MachineId, Dataset> shards_;
  std::map<MachineId, CodeMatrix> codes_;
};

inline std::vector<std::vector<double>> model_payloads(const BAModel& m) {
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < submodel_count(m.bits(), m.dim()); ++i) out.push_back(get_payload(m, submodel_at(i, m.bits())));
  return out;
}

inline BAModel model_from_payloads(const std::vector<std::vector<double>>& p, std::size_t L, std::size_t D) {
  BAModel m = BAModel::zeros(L, D);
  for (std::size_t i = 0; i < p.size(); ++i) set_payload(m, submodel_at(i, L), p[i]);
  return m;
}

enum class Executor { kLockstep, kThreaded };

struct ParmacConfig {
  MacConfig mac;
  std::size_t P = 1;
  std::vector<double> speeds;  // empty: equal
  bool consecutive = false;
  bool shuffle_topology = false;
  bool fault_tolerant = false;
  std::uint64_t topology_seed = 1;
  Executor executor = Executor::kLockstep;
  CostModel cost;
  std::vector<ClusterEvent> events;
  Dataset reserve;  // points handed to machines that join
  bool timing = false;
};

struct ParmacResult {
  BAModel model;
  RunRecord record;
  CommLog comm;
  std::vector<TraceEvent> trace;
  Topology final_topology;
  bool replicas_consistent = true;
};

// Virtual Z cost per point for the chosen solver.
inline double z_cost_per_point(std::size_t L, std::size_t D, ZMode mode) {
  if (mode == ZMode::kEnumerate) return static_cast<double>((std::size_t{1} << L) + L * D);
  return static_cast<double>(4 * L * D);
}

inline ParmacResult run_parmac(const Dataset& train, const Dataset& validation, const ParmacConfig& cfg,
                               MacState init) {
  cfg.mac.validate();
  require(cfg.mac.w_mode == WMode::kSgd, "the distributed W step trains by SGD only");
  require(cfg.P >= 1, "P must be >= 1");
  require(init.codes.size() == train.size(), "run_parmac: initial codes mismatch");
  const std::size_t L = cfg.mac.L;
  const std::size_t D = train.dim();

  std::vector<double> speeds = cfg.speeds.empty() ? std::vector<double>(cfg.P, 1.0) : cfg.speeds;
  require(speeds.size() == cfg.P, "one speed per machine");
  auto part = partition(train.size(), speeds);

  BaProblem problem(L, D, cfg.mac.sgd);
  std::vector<MachineId> ids;
  for (std::size_t p = 0; p < cfg.P; ++p) {
    ids.push_back(p);
    problem.put_shard(p, train.subset(part.shards[p]));
    problem.put_codes(p, init.codes.subset(part.shards[p]));
  }

  RingConfig rc;
  rc.epochs = cfg.mac.sgd.epochs;
  rc.consecutive = cfg.consecutive;
  rc.shuffle_topology = cfg.shuffle_topology;
  rc.fault_tolerant = cfg.fault_tolerant;
  rc.seed = cfg.topology_seed;
  rc.cost = cfg.cost;
  rc.cost.z_per_point = z_cost_per_point(L, D, cfg.mac.z_mode);
  RingCluster<BaProblem> cluster(problem, ids, rc);

  std::size_t reserve_next = 0;
  RingCluster<BaProblem>::Callbacks cb;
  cb.on_add = [&](MachineId id, std::size_t points) {
    require(reserve_next + points <= cfg.reserve.size(), "not enough reserve points for the new machine");
    if (points > 0) problem.put_shard(id, cfg.reserve.range(reserve_next, reserve_next + points));
    reserve_next += points;
  };
  cb.on_fault = [&](MachineId id) { problem.drop(id); };

  auto events_for = [&](std::size_t iter, Phase phase) {
    std::vector<ClusterEvent> out;
    for (const auto& e : cfg.events)
      if (e.iteration == iter && e.phase == phase) out.push_back(e);
    return out;
  };

  ValidationEvaluator evaluator(train, validation, cfg.mac.metric);
  StepCounts pending;
  bool consistent = true;
  auto wall0 = std::chrono::steady_clock::now();

  MacHooks hooks;
  hooks.w_step = [&](BAModel& model, std::size_t iter, double) {
    problem.set_iteration(iter);
    auto start = model_payloads(model);
    if (cfg.executor == Executor::kThreaded) {
      if (!events_for(iter, Phase::kW).empty()) throw Error(ErrorCode::kInvalidArgument, "threaded executor takes no events");
      pending = cluster.run_wstep_threaded(iter, start);
    } else {
      pending = cluster.run_wstep_lockstep(iter, start, events_for(iter, Phase::kW), cb);
    }
    consistent = consistent && cluster.replicas_consistent();
    model = model_from_payloads(cluster.replica(cluster.live().front()), L, D);
    // Newcomers start from the codes of the updated hash function.
    for (auto& [id, shard] : problem.shards())
      if (!problem.has_codes(id)) problem.put_codes(id, encode_all(model.encoder, shard));
  };
  hooks.z_step = [&](const BAModel& model, double mu) {
    for (const auto& ev : events_for(pending.iteration, Phase::kZ)) {
      if (ev.op == EventOp::kFault) {
        cluster.fail_idle(ev.machine, ev.iteration);
      } else if (ev.op == EventOp::kRemove) {
        cluster.remove_machine(ev.machine, ev.iteration, 0);
      } else {
        throw Error(ErrorCode::kProtocol, "machines may join only during the redistribution round");
      }
      problem.drop(ev.machine);
    }
    std::size_t changed = 0;
    std::map<MachineId, std::size_t> points;
    for (auto& [id, shard] : problem.shards()) {
      changed += z_step(shard, model.encoder, model.decoder, mu, cfg.mac.z_mode, problem.codes().at(id));
      points[id] = shard.size();
    }
    cluster.charge_z_step(pending, points);
    pending.z_messages = 0;  // the Z step is purely local
    cluster.record_step(pending);
    return changed;
  };
  hooks.e_q = [&](const BAModel& model, double mu) {
    double total = 0;
    for (const auto& [id, shard] : problem.shards())
      total += e_q(model.encoder, model.decoder, problem.codes().at(id), mu, shard);
    return total;
  };
  hooks.e_ba = [&](const BAModel& model) {
    double total = 0;
    for (const auto& [id, shard] : problem.shards()) total += e_ba(model.encoder, model.decoder, shard);
    return total;
  };
  hooks.codes_match_hash = [&](const BAModel& model) {
    for (const auto& [id, shard] : problem.shards())
      if (!(encode_all(model.encoder, shard) == problem.codes().at(id))) return false;
    return true;
  };

  ParmacResult out;
  auto res = mac_loop(cfg.mac, std::move(init.model), evaluator, hooks);
  res.record.degenerate_bits = init.degenerate_bits;
  cluster.sync_machine_times();
  if (cfg.timing) cluster.comm_log().wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();
  out.model = std::move(res.model);
  out.record = std::move(res.record);
  out.comm = cluster.comm_log();
  out.trace = cluster.trace();
  out.final_topology = cluster.topology();
  out.replicas_consistent = consistent;
  return out;
}

}  // namespace parmac
