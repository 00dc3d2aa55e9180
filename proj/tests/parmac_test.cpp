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


#include <map>
#include <vector>

#include <gtest/gtest.h>

#include "parmac/parmac.hpp"
#include "test_util.hpp"

namespace {

using namespace parmac;
using testing_util::code_of;

struct Fixture {
  Dataset train, validation;
  MacState init;
};

Fixture make_data(std::size_t n = 400, std::size_t d = 6, std::size_t L = 4) {
  auto all = generate_synthetic(n, d, 4, 3);
  auto sp = split_validation(all, 0.1, 1);
  Fixture f{sp.train, sp.validation, {}};
  f.init = initialize_from_pca(f.train, L, 1000, 1);
  return f;
}

ParmacConfig base_config(std::size_t P) {
  ParmacConfig c;
  c.mac.L = 4;
  c.mac.schedule = {0.005, 1.5, 4};
  c.mac.early_stop = false;
  c.mac.metric.K_true = 10;
  c.mac.metric.k_retrieved = 10;
  c.P = P;
  return c;
}

void expect_same_model(const BAModel& a, const BAModel& b) {
  EXPECT_TRUE(a.encoder.A == b.encoder.A);
  EXPECT_TRUE(a.decoder.F == b.decoder.F);
}

TEST(Parmac, OneMachineIsSerialMac) {
  auto f = make_data();
  for (std::size_t e : {1, 3}) {
    for (auto z : {ZMode::kEnumerate, ZMode::kAlternate}) {
      auto cfg = base_config(1);
      cfg.mac.sgd.epochs = e;
      cfg.mac.z_mode = z;
      auto serial = mac_train(f.train, f.validation, cfg.mac, f.init);
      auto par = run_parmac(f.train, f.validation, cfg, f.init);
      expect_same_model(par.model, serial.model);
      EXPECT_EQ(par.record, serial.record);
      EXPECT_TRUE(par.replicas_consistent);
    }
  }
}

TEST(Parmac, CommunicationAccounting) {
  auto f = make_data();
  for (std::size_t e : {1, 2}) {
    auto cfg = base_config(4);
    cfg.mac.sgd.epochs = e;
    auto r = run_parmac(f.train, f.validation, cfg, f.init);
    const std::size_t M = 4 + 6, P = 4;
    ASSERT_EQ(r.comm.steps.size(), r.record.iterations.size());
    for (const auto& s : r.comm.steps) {
      EXPECT_EQ(s.messages, M * (P * (e + 1) - 2));
      EXPECT_EQ(s.receives, s.messages);
      EXPECT_EQ(s.trains, M * P * e);
      EXPECT_EQ(s.ticks, P * e + P);
      EXPECT_EQ(s.z_messages, 0U);
      EXPECT_GT(s.z_time, 0.0);
      for (std::size_t m = 0; m < M; ++m) EXPECT_EQ(s.sends_per_submodel[m], P * (e + 1) - 2);
    }
    EXPECT_TRUE(r.replicas_consistent);
    EXPECT_EQ(r.comm.total_messages(), r.comm.total_receives());
    EXPECT_GT(r.comm.virtual_time, 0.0);
  }
}

TEST(Parmac, ZStepSendsNothing) {
  auto f = make_data();
  auto r = run_parmac(f.train, f.validation, base_config(3), f.init);
  // Every send in the trace belongs to a W step and is counted there.
  std::map<std::size_t, std::size_t> sends;
  for (const auto& e : r.trace)
    if (e.kind == TraceKind::kSend) ++sends[e.iteration];
  for (const auto& s : r.comm.steps) {
    EXPECT_EQ(sends[s.iteration], s.messages);
    EXPECT_EQ(s.z_messages, 0U);
  }
}

TEST(Parmac, LocalZStepMatchesWholeDataset) {
  auto f = make_data();
  auto part = partition(f.train.size(), std::vector<double>(4, 1.0));
  auto whole = f.init.codes;
  z_step(f.train, f.init.model.encoder, f.init.model.decoder, 0.02, ZMode::kEnumerate, whole);
  // Shards in reverse order: the result cannot depend on who goes first.
  for (std::size_t p = 4; p-- > 0;) {
    auto shard = f.train.subset(part.shards[p]);
    auto codes = f.init.codes.subset(part.shards[p]);
    z_step(shard, f.init.model.encoder, f.init.model.decoder, 0.02, ZMode::kEnumerate, codes);
    for (std::size_t i = 0; i < part.shards[p].size(); ++i) EXPECT_EQ(codes[i], whole[part.shards[p][i]]);
  }
}

TEST(Parmac, LockstepIsDeterministic) {
  auto f = make_data();
  auto cfg = base_config(4);
  cfg.shuffle_topology = true;
  cfg.mac.sgd.epochs = 2;
  auto a = run_parmac(f.train, f.validation, cfg, f.init);
  auto b = run_parmac(f.train, f.validation, cfg, f.init);
  expect_same_model(a.model, b.model);
  EXPECT_EQ(a.record, b.record);
  EXPECT_EQ(a.trace, b.trace);
  EXPECT_EQ(a.comm.to_json(), b.comm.to_json());
}

TEST(Parmac, ThreadedMatchesLockstep) {
  auto f = make_data();
  for (std::size_t P : {2, 4}) {
    auto cfg = base_config(P);
    auto a = run_parmac(f.train, f.validation, cfg, f.init);
    cfg.executor = Executor::kThreaded;
    auto b = run_parmac(f.train, f.validation, cfg, f.init);
    expect_same_model(a.model, b.model);
    EXPECT_EQ(a.record, b.record);
    EXPECT_TRUE(b.replicas_consistent);
    EXPECT_EQ(a.comm.total_messages(), b.comm.total_messages());
  }
}

TEST(Parmac, ThreadedRejectsEvents) {
  auto f = make_data();
  auto cfg = base_config(3);
  cfg.executor = Executor::kThreaded;
  cfg.fault_tolerant = true;
  cfg.events = {{.iteration = 0, .phase = Phase::kW, .tick = 2, .op = EventOp::kFault, .machine = 1}};
  EXPECT_EQ(code_of([&] { run_parmac(f.train, f.validation, cfg, f.init); }), ErrorCode::kInvalidArgument);
}

TEST(Parmac, RemovalDuringZStepShrinksTheRing) {
  auto f = make_data();
  auto cfg = base_config(4);
  cfg.mac.sgd.epochs = 2;
  cfg.events = {{.iteration = 0, .phase = Phase::kZ, .op = EventOp::kRemove, .machine = 2}};
  auto r = run_parmac(f.train, f.validation, cfg, f.init);
  ASSERT_GE(r.comm.steps.size(), 2U);
  for (auto t : r.comm.steps[0].trains_per_submodel) EXPECT_EQ(t, 4U * 2);
  for (auto t : r.comm.steps[1].trains_per_submodel) EXPECT_EQ(t, 3U * 2);
  EXPECT_EQ(r.final_topology.size(), 3U);
  EXPECT_FALSE(r.final_topology.contains(2));
  EXPECT_TRUE(r.replicas_consistent);
}

TEST(Parmac, FaultsRecoverOnlyWhenTolerant) {
  auto f = make_data();
  auto cfg = base_config(4);
  cfg.events = {{.iteration = 1, .phase = Phase::kW, .tick = 3, .op = EventOp::kFault, .machine = 1},
                {.iteration = 2, .phase = Phase::kZ, .op = EventOp::kFault, .machine = 3}};
  EXPECT_EQ(code_of([&] { run_parmac(f.train, f.validation, cfg, f.init); }), ErrorCode::kDeadWorker);
  cfg.fault_tolerant = true;
  auto r = run_parmac(f.train, f.validation, cfg, f.init);
  EXPECT_TRUE(r.replicas_consistent);
  EXPECT_EQ(r.final_topology.order(), (std::vector<MachineId>{0, 2}));
  EXPECT_GT(r.comm.steps[1].recoveries, 0U);
  for (auto t : r.comm.steps.back().trains_per_submodel) EXPECT_EQ(t, 2U);
  EXPECT_EQ(r.record.iterations.size(), 4U);
}

TEST(Parmac, NewMachineTrainsFromTheNextStep) {
  auto f = make_data();
  auto cfg = base_config(3);
  cfg.reserve = generate_synthetic(40, 6, 4, 9);
  cfg.events = {{.iteration = 0, .phase = Phase::kW, .tick = 5, .op = EventOp::kAdd, .machine = 5, .points = 40}};
  auto r = run_parmac(f.train, f.validation, cfg, f.init);
  EXPECT_TRUE(r.replicas_consistent);
  EXPECT_TRUE(r.final_topology.contains(5));
  for (auto t : r.comm.steps[0].trains_per_submodel) EXPECT_EQ(t, 3U);
  for (auto t : r.comm.steps[1].trains_per_submodel) EXPECT_EQ(t, 4U);
  EXPECT_GT(r.comm.steps[0].catchups, 0U);

  cfg.events[0].points = 41;
  EXPECT_EQ(code_of([&] { run_parmac(f.train, f.validation, cfg, f.init); }), ErrorCode::kInvalidArgument);
}

TEST(Parmac, ExactWStepIsSerialOnly) {
  auto f = make_data();
  auto cfg = base_config(2);
  cfg.mac.w_mode = WMode::kExact;
  EXPECT_EQ(code_of([&] { run_parmac(f.train, f.validation, cfg, f.init); }), ErrorCode::kInvalidArgument);
}

TEST(Parmac, EqDecreasesOverTheRun) {
  auto f = make_data(800, 8, 6);
  auto cfg = base_config(4);
  cfg.mac.L = 6;
  cfg.mac.sgd.epochs = 2;
  auto r = run_parmac(f.train, f.validation, cfg, f.init);
  ASSERT_FALSE(r.record.iterations.empty());
  // The Z step never raises E_Q for the current model.
  for (const auto& it : r.record.iterations) EXPECT_LE(it.eq, it.eq_after_w * (1 + 1e-12));
  EXPECT_LT(r.record.iterations.back().eba, r.record.iterations.front().eq_before_w);
}

}  // namespace
