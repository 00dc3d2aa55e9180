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

// Ring circulation of submodels: wire format, visit lists, topology, worker
// rules, and two executors (a deterministic lockstep simulator and one thread
// per worker). The engine is generic over the problem that trains payloads.

#pragma once

#include <algorithm>
#include <chrono>
#include <concepts>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "parmac/common.hpp"
#include "parmac/model.hpp"

namespace parmac {

using MachineId = std::size_t;

// ---------------------------------------------------------------------------
// Visit list: one bitmap row per training round plus a final row for the
// redistribution round. A set bit means "not visited yet".

class VisitList {
 public:
  VisitList() = default;
  VisitList(std::size_t rows, std::size_t words_per_row) : words_(words_per_row), bits_(rows * words_per_row, 0) {}

  static std::size_t words_for(MachineId max_id) { return max_id / 64 + 1; }

  std::size_t rows() const { return words_ == 0 ? 0 : bits_.size() / words_; }
  std::size_t training_rows() const { return rows() - 1; }
  std::size_t redistribution_row() const { return rows() - 1; }
  std::size_t words_per_row() const { return words_; }
  std::span<const std::uint64_t> words() const { return bits_; }

  bool test(std::size_t row, MachineId id) const {
    if (id / 64 >= words_) return false;
    return (bits_[row * words_ + id / 64] >> (id % 64)) & 1U;
  }
  void set(std::size_t row, MachineId id) {
    require(id / 64 < words_, "visit list: machine id beyond bitmap width");
    bits_[row * words_ + id / 64] |= std::uint64_t{1} << (id % 64);
  }
  void clear(std::size_t row, MachineId id) {
    if (id / 64 < words_) bits_[row * words_ + id / 64] &= ~(std::uint64_t{1} << (id % 64));
  }
  void clear_everywhere(MachineId id) {
    for (std::size_t r = 0; r < rows(); ++r) clear(r, id);
  }
  bool row_empty(std::size_t row) const {
    for (std::size_t w = 0; w < words_; ++w)
      if (bits_[row * words_ + w] != 0) return false;
    return true;
  }
  std::optional<std::size_t> first_open_training_row() const {
    for (std::size_t r = 0; r < training_rows(); ++r)
      if (!row_empty(r)) return r;
    return std::nullopt;
  }
  std::vector<MachineId> members(std::size_t row) const {
    std::vector<MachineId> out;
    for (std::size_t w = 0; w < words_; ++w)
      for (std::size_t b = 0; b < 64; ++b)
        if ((bits_[row * words_ + w] >> b) & 1U) out.push_back(w * 64 + b);
    return out;
  }

  static VisitList from_words(std::size_t rows, std::vector<std::uint64_t> words) {
    require(rows >= 1 && words.size() % rows == 0, "visit list: word count not a multiple of rows");
    VisitList v;
    v.words_ = words.size() / rows;
    v.bits_ = std::move(words);
    return v;
  }

  friend bool operator==(const VisitList&, const VisitList&) = default;

 private:
  std::size_t words_ = 0;
  std::vector<std::uint64_t> bits_;
};

struct SubmodelMsg {
  SubmodelId id;
  std::uint32_t counter = 1;
  VisitList visits;
  std::vector<double> payload;

  friend bool operator==(const SubmodelMsg&, const SubmodelMsg&) = default;
};

// [u8 kind][u32 index][u32 counter][u32 nwords][nwords x u64][u32 len][len x f64]
// All little-endian. Only submodel parameters travel: the encoder refuses any
// payload whose length is not the submodel's parameter count.
inline std::vector<std::uint8_t> encode_msg(const SubmodelMsg& msg, std::size_t expected_payload) {
  if (msg.payload.size() != expected_payload)
    throw Error(ErrorCode::kProtocol, "payload length " + std::to_string(msg.payload.size()) +
                                          " is not the submodel size " + std::to_string(expected_payload));
  std::ostringstream os(std::ios::binary);
  os.put(static_cast<char>(msg.id.kind));
  le::put_u32(os, msg.id.index);
  le::put_u32(os, msg.counter);
  le::put_u32(os, static_cast<std::uint32_t>(msg.visits.words().size()));
  for (auto w : msg.visits.words()) le::put_u64(os, w);
  le::put_u32(os, static_cast<std::uint32_t>(msg.payload.size()));
  for (double v : msg.payload) le::put_f64(os, v);
  auto s = os.str();
  return {s.begin(), s.end()};
}

inline std::size_t wire_size(std::size_t visit_words, std::size_t payload_len) {
  return 1 + 4 + 4 + 4 + 8 * visit_words + 4 + 8 * payload_len;
}

inline SubmodelMsg decode_msg(std::span<const std::uint8_t> bytes, std::size_t visit_rows) {
  std::string s(bytes.begin(), bytes.end());
  std::istringstream is(s, std::ios::binary);
  SubmodelMsg msg;
  int kind = is.get();
  if (kind != 0 && kind != 1) throw Error(ErrorCode::kMalformedRecord, "bad submodel kind");
  msg.id.kind = static_cast<SubmodelKind>(kind);
  msg.id.index = le::get_u32(is);
  msg.counter = le::get_u32(is);
  std::vector<std::uint64_t> words(le::get_u32(is));
  for (auto& w : words) w = le::get_u64(is);
  msg.visits = VisitList::from_words(visit_rows, std::move(words));
  msg.payload.resize(le::get_u32(is));
  for (auto& v : msg.payload) v = le::get_f64(is);
  if (is.peek() != std::char_traits<char>::eof()) throw Error(ErrorCode::kMalformedRecord, "trailing bytes in message");
  return msg;
}

// ---------------------------------------------------------------------------
// Topology: a directed cycle over live machines, stored in ring order.

class Topology {
 public:
  Topology() = default;
  explicit Topology(std::vector<MachineId> ring) : ring_(std::move(ring)) {
    std::set<MachineId> seen(ring_.begin(), ring_.end());
    require(seen.size() == ring_.size(), "topology: duplicate machine id");
  }

  static Topology identity(std::size_t P) {
    std::vector<MachineId> r(P);
    std::iota(r.begin(), r.end(), 0);
    return Topology(std::move(r));
  }

  std::size_t size() const { return ring_.size(); }
  const std::vector<MachineId>& order() const { return ring_; }
  bool contains(MachineId id) const { return std::find(ring_.begin(), ring_.end(), id) != ring_.end(); }

  MachineId successor(MachineId id) const {
    auto i = position(id);
    return ring_[(i + 1) % ring_.size()];
  }
  MachineId predecessor(MachineId id) const {
    auto i = position(id);
    return ring_[(i + ring_.size() - 1) % ring_.size()];
  }

  std::map<MachineId, MachineId> successor_map() const {
    std::map<MachineId, MachineId> s;
    for (auto id : ring_) s[id] = successor(id);
    return s;
  }

  // Connects `id` between `after` and its old successor.
  void insert_after(MachineId after, MachineId id) {
    require(!contains(id), "topology: machine already present");
    auto i = position(after);
    ring_.insert(ring_.begin() + static_cast<std::ptrdiff_t>(i + 1), id);
  }

  // Reconnects predecessor -> successor.
  void remove(MachineId id) {
    if (ring_.size() <= 1) throw Error(ErrorCode::kLastMachine, "cannot remove the only machine");
    ring_.erase(ring_.begin() + static_cast<std::ptrdiff_t>(position(id)));
  }

  // Walks successors from any machine and checks it returns after visiting
  // every machine once.
  bool is_single_cycle() const {
    if (ring_.empty()) return false;
    auto succ = successor_map();
    std::set<MachineId> seen;
    MachineId cur = ring_.front();
    for (std::size_t step = 0; step < ring_.size(); ++step) {
      if (!seen.insert(cur).second) return false;
      cur = succ.at(cur);
    }
    return cur == ring_.front() && seen.size() == ring_.size();
  }

  friend bool operator==(const Topology&, const Topology&) = default;

 private:
  std::size_t position(MachineId id) const {
    auto it = std::find(ring_.begin(), ring_.end(), id);
    require(it != ring_.end(), "topology: unknown machine " + std::to_string(id));
    return static_cast<std::size_t>(it - ring_.begin());
  }

  std::vector<MachineId> ring_;
};

// Uniform over the (P-1)! directed cycles: the smallest id stays first and the
// rest are shuffled.
inline Topology reshuffle_topology(const Topology& t, std::uint64_t seed) {
  require(t.size() >= 1, "reshuffle needs a machine");
  std::vector<MachineId> ids = t.order();
  std::sort(ids.begin(), ids.end());
  if (ids.size() > 2) {
    Rng rng(mix_seed({seed, 0x7090ULL}));
    portable_shuffle(ids.data() + 1, ids.size() - 1, rng);
  }
  return Topology(std::move(ids));
}

// ---------------------------------------------------------------------------
// Accounting.

// Virtual time. Training costs one unit per (point x pass x parameter);
// sending costs a latency plus one unit per parameter scaled by per_value.
struct CostModel {
  double train_per_value = 1.0;
  double comm_latency = 100.0;
  double comm_per_value = 1.0;
  double z_per_point = 1.0;
};

struct MachineTime {
  double busy = 0;
  double idle = 0;
};

struct StepCounts {
  std::size_t iteration = 0;
  std::size_t messages = 0;
  std::size_t bytes = 0;
  std::size_t receives = 0;
  std::size_t trains = 0;
  std::size_t recoveries = 0;
  std::size_t catchups = 0;
  std::size_t ticks = 0;
  std::vector<std::size_t> sends_per_submodel;
  std::vector<std::size_t> trains_per_submodel;
  double w_time = 0;  // virtual makespan of the W step
  double z_time = 0;
  std::size_t z_messages = 0;
};

struct CommLog {
  std::vector<StepCounts> steps;
  std::map<MachineId, MachineTime> machines;
  double virtual_time = 0;
  double wall_seconds = 0;

  std::size_t total_messages() const {
    std::size_t n = 0;
    for (const auto& s : steps) n += s.messages;
    return n;
  }
  std::size_t total_receives() const {
    std::size_t n = 0;
    for (const auto& s : steps) n += s.receives;
    return n;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["virtual_time"] = virtual_time;
    j["wall_seconds"] = wall_seconds;
    j["total_messages"] = total_messages();
    j["total_receives"] = total_receives();
    auto& st = j["steps"] = nlohmann::json::array();
    for (const auto& s : steps)
      st.push_back({{"iteration", s.iteration},
                    {"messages", s.messages},
                    {"bytes", s.bytes},
                    {"receives", s.receives},
                    {"trains", s.trains},
                    {"recoveries", s.recoveries},
                    {"catchups", s.catchups},
                    {"ticks", s.ticks},
                    {"w_time", s.w_time},
                    {"z_time", s.z_time},
                    {"z_messages", s.z_messages},
                    {"sends_per_submodel", s.sends_per_submodel},
                    {"trains_per_submodel", s.trains_per_submodel}});
    auto& ms = j["machines"] = nlohmann::json::object();
    for (const auto& [id, t] : machines) ms[std::to_string(id)] = {{"busy", t.busy}, {"idle", t.idle}};
    return j;
  }

  // Busy / (busy + idle) summed over machines.
  double utilisation() const {
    double b = 0, i = 0;
    for (const auto& [id, t] : machines) {
      b += t.busy;
      i += t.idle;
    }
    return b + i == 0 ? 0 : b / (b + i);
  }
};

enum class TraceKind { kTrain, kStore, kSend, kFault, kRecover, kAdd, kRemove, kCatchup, kBarrier, kReshuffle };

inline const char* trace_kind_name(TraceKind k) {
  switch (k) {
    case TraceKind::kTrain: return "train";
    case TraceKind::kStore: return "store";
    case TraceKind::kSend: return "send";
    case TraceKind::kFault: return "fault";
    case TraceKind::kRecover: return "recover";
    case TraceKind::kAdd: return "add";
    case TraceKind::kRemove: return "remove";
    case TraceKind::kCatchup: return "catchup";
    case TraceKind::kBarrier: return "barrier";
    case TraceKind::kReshuffle: return "reshuffle";
  }
  return "?";
}

// `submodel` is -1 for cluster-level events. For sends, `peer` is the
// receiver and `bytes` the wire size.
struct TraceEvent {
  std::size_t iteration = 0;
  std::size_t tick = 0;
  MachineId machine = 0;
  TraceKind kind = TraceKind::kBarrier;
  long submodel = -1;
  std::uint32_t counter = 0;
  long peer = -1;
  std::size_t bytes = 0;
  std::size_t row = 0;

  friend bool operator==(const TraceEvent&, const TraceEvent&) = default;
};

inline void write_trace_csv(std::ostream& os, const std::vector<TraceEvent>& trace) {
  os << "iteration,tick,machine,kind,submodel,counter,peer,bytes,row\n";
  for (const auto& e : trace)
    os << e.iteration << ',' << e.tick << ',' << e.machine << ',' << trace_kind_name(e.kind) << ',' << e.submodel
       << ',' << e.counter << ',' << e.peer << ',' << e.bytes << ',' << e.row << '\n';
}

// ---------------------------------------------------------------------------
// Scripted cluster events.

enum class EventOp { kFault, kAdd, kRemove };
enum class Phase { kW, kZ };

struct ClusterEvent {
  std::size_t iteration = 0;
  Phase phase = Phase::kW;
  std::size_t tick = 1;  // W phase only; applied at the start of that tick
  EventOp op = EventOp::kFault;
  MachineId machine = 0;
  std::size_t points = 0;               // add: points streamed to the newcomer
  std::optional<MachineId> after;       // add: ring position (default: last in ring)
};

// ---------------------------------------------------------------------------
// Problem interface.

template <class P>
concept RingProblem = requires(const P& p, MachineId machine, std::size_t m, std::size_t epoch, std::span<double> w) {
  { p.submodel_count() } -> std::convertible_to<std::size_t>;
  { p.payload_size(m) } -> std::convertible_to<std::size_t>;
  { p.wire_id(m) } -> std::same_as<SubmodelId>;
  { p.shard_size(machine) } -> std::convertible_to<std::size_t>;
  p.train(machine, m, epoch, epoch, w);
};

struct RingConfig {
  std::size_t epochs = 1;
  bool consecutive = false;
  bool shuffle_topology = false;
  bool fault_tolerant = false;
  std::uint64_t seed = 1;
  CostModel cost;
  std::size_t max_machine_id = 63;  // bitmap width

  std::size_t training_rows() const { return consecutive ? 1 : epochs; }
  std::size_t visit_rows() const { return training_rows() + 1; }
};

struct Envelope {
  std::vector<std::uint8_t> bytes;
  MachineId from = 0;
  double arrival = 0;  // virtual time
  bool initial = false;
};

struct Worker {
  MachineId id = 0;
  std::deque<Envelope> queue;
  std::vector<std::vector<double>> replica;
  std::vector<char> final_flag;
  std::map<std::size_t, Envelope> retained;  // last forwarded copy per submodel
  double clock = 0;
  MachineTime time;
  std::size_t finals = 0;
};

// Per-W-step context shared by the handlers.
struct WStepContext {
  std::size_t iteration = 0;
  std::set<MachineId> dead;
  std::vector<MachineId> live;  // everyone who must end with the full model
};

// ---------------------------------------------------------------------------
// Engine.

template <RingProblem Problem>
class RingCluster {
 public:
  RingCluster(const Problem& problem, std::vector<MachineId> machines, RingConfig cfg)
      : problem_(&problem), cfg_(cfg), topology_(machines) {
    require(!machines.empty(), "cluster needs at least one machine");
    require(cfg.epochs >= 1, "epochs must be >= 1");
    for (auto id : machines) add_worker(id);
  }

  const Topology& topology() const { return topology_; }
  const CommLog& comm_log() const { return log_; }
  CommLog& comm_log() { return log_; }
  const std::vector<TraceEvent>& trace() const { return trace_; }
  const RingConfig& config() const { return cfg_; }
  const Worker& worker(MachineId id) const { return workers_.at(id); }
  std::vector<MachineId> live() const {
    auto v = topology_.order();
    std::sort(v.begin(), v.end());
    return v;
  }

  // Data-bearing live machines, sorted by id; submodel homes are contiguous
  // blocks over this list with the remainder going to the lowest ids.
  std::vector<MachineId> data_machines() const {
    std::vector<MachineId> out;
    for (auto id : live())
      if (problem_->shard_size(id) > 0) out.push_back(id);
    return out;
  }

  std::vector<MachineId> homes() const {
    auto dm = data_machines();
    if (dm.empty()) dm = live();
    const std::size_t M = problem_->submodel_count();
    const std::size_t P = dm.size();
    std::vector<MachineId> h(M);
    std::size_t m = 0;
    for (std::size_t p = 0; p < P; ++p) {
      std::size_t count = M / P + (p < M % P ? 1 : 0);
      for (std::size_t c = 0; c < count; ++c) h[m++] = dm[p];
    }
    return h;
  }

  // -------------------------------------------------------------------------
  // Membership (outside W-step circulation).

  void add_machine(MachineId id, std::optional<MachineId> after, std::size_t iteration, std::size_t tick) {
    require(id <= cfg_.max_machine_id, "machine id exceeds visit-list width");
    require(!workers_.count(id), "machine id already in use");
    MachineId anchor = after.value_or(topology_.order().back());
    topology_.insert_after(anchor, id);
    add_worker(id);
    workers_.at(id).clock = max_clock();
    newcomers_.insert(id);
    trace_.push_back({iteration, tick, id, TraceKind::kAdd, -1, 0, static_cast<long>(anchor), 0, 0});
  }

  void remove_machine(MachineId id, std::size_t iteration, std::size_t tick) {
    topology_.remove(id);
    workers_.erase(id);
    newcomers_.erase(id);
    trace_.push_back({iteration, tick, id, TraceKind::kRemove, -1, 0, -1, 0, 0});
  }

  // Z-phase fault: the machine and its shard are gone; no model state is lost.
  void fail_idle(MachineId id, std::size_t iteration) {
    if (!cfg_.fault_tolerant) throw Error(ErrorCode::kDeadWorker, "machine " + std::to_string(id) + " failed");
    if (topology_.size() <= 1) throw Error(ErrorCode::kUnrecoverableLoss, "no surviving machine");
    trace_.push_back({iteration, 0, id, TraceKind::kFault, -1, 0, -1, 0, 0});
    topology_.remove(id);
    workers_.erase(id);
    newcomers_.erase(id);
  }

  // Charges a local Z step: compute only, then a barrier.
  void charge_z_step(StepCounts& step, const std::map<MachineId, std::size_t>& points) {
    for (auto id : live()) {
      auto& w = workers_.at(id);
      double cost = cfg_.cost.z_per_point * static_cast<double>(points.count(id) ? points.at(id) : 0);
      w.clock += cost;
      w.time.busy += cost;
    }
    double before = log_.virtual_time;
    barrier();
    step.z_time = log_.virtual_time - before;
  }

  // -------------------------------------------------------------------------
  // W step. `start` holds every submodel's payload at the beginning; every
  // live worker ends with an identical replica. Events for this W step are
  // applied at the start of their tick; membership callbacks let the owner
  // move data.
  struct Callbacks {
    std::function<void(MachineId, std::size_t points)> on_add;
    std::function<void(MachineId)> on_fault;
  };

  StepCounts run_wstep_lockstep(std::size_t iteration, const std::vector<std::vector<double>>& start,
                                std::vector<ClusterEvent> events = {}, const Callbacks& cb = {}) {
    std::sort(events.begin(), events.end(), [](const auto& a, const auto& b) { return a.tick < b.tick; });
    StepCounts step = begin_wstep(iteration, start, events.empty());
    WStepContext ctx{iteration, {}, live()};
    std::size_t next_event = 0;
    std::size_t tick = 0;
    double t0 = log_.virtual_time;

    while (any_queued()) {
      ++tick;
      while (next_event < events.size() && events[next_event].tick == tick)
        apply_w_event(events[next_event++], ctx, step, tick, cb);
      if (next_event < events.size() && events[next_event].tick < tick)
        throw Error(ErrorCode::kProtocol, "event scheduled for a past tick");

      std::vector<std::pair<MachineId, Envelope>> outbox;
      for (auto id : live()) {
        auto& w = workers_.at(id);
        std::deque<Envelope> snapshot;
        snapshot.swap(w.queue);
        for (auto& env : snapshot) {
          auto out = handle(w, env, ctx, step, tick);
          if (out) outbox.emplace_back(topology_.successor(id), std::move(*out));
        }
      }
      for (auto& [to, env] : outbox) {
        ++step.receives;
        workers_.at(to).queue.push_back(std::move(env));
      }
    }
    if (next_event < events.size()) throw Error(ErrorCode::kProtocol, "W-step event after circulation ended");

    // Barrier tick: replica commit, newcomer catch-up, consistency check.
    ++tick;
    finish_wstep(step, ctx, tick);
    step.ticks = tick;
    step.w_time = log_.virtual_time - t0;
    return step;
  }

  // One thread per worker, blocking queues of serialized messages. Faults and
  // membership changes are not supported here.
  StepCounts run_wstep_threaded(std::size_t iteration, const std::vector<std::vector<double>>& start) {
    StepCounts step = begin_wstep(iteration, start, true);
    WStepContext ctx{iteration, {}, live()};
    double t0 = log_.virtual_time;
    const std::size_t M = problem_->submodel_count();

    struct Channel {
      std::mutex mu;
      std::condition_variable cv;
      std::deque<Envelope> q;
    };
    std::map<MachineId, Channel> channels;
    for (auto id : ctx.live) channels[id];
    // Seed channels with the initial queues.
    for (auto id : ctx.live) {
      auto& w = workers_.at(id);
      for (auto& env : w.queue) channels.at(id).q.push_back(std::move(env));
      w.queue.clear();
    }

    std::map<MachineId, StepCounts> local;
    std::map<MachineId, std::vector<TraceEvent>> local_trace;
    for (auto id : ctx.live) {
      local[id] = StepCounts{};
      local[id].sends_per_submodel.assign(M, 0);
      local[id].trains_per_submodel.assign(M, 0);
      local_trace[id];
    }
    std::mutex error_mu;
    std::exception_ptr error;

    auto body = [&](MachineId id) {
      try {
        auto& w = workers_.at(id);
        auto& mine = channels.at(id);
        MachineId succ = topology_.successor(id);
        auto& next = channels.at(succ);
        while (w.finals < M) {
          Envelope env;
          {
            std::unique_lock lock(mine.mu);
            mine.cv.wait(lock, [&] { return !mine.q.empty(); });
            env = std::move(mine.q.front());
            mine.q.pop_front();
          }
          auto out = handle(w, env, ctx, local.at(id), 0, &local_trace.at(id));
          if (out) {
            {
              std::lock_guard lock(next.mu);
              next.q.push_back(std::move(*out));
            }
            next.cv.notify_one();
          }
        }
      } catch (...) {
        std::lock_guard lock(error_mu);
        if (!error) error = std::current_exception();
      }
    };

    std::vector<std::thread> threads;
    for (auto id : ctx.live) threads.emplace_back(body, id);
    for (auto& t : threads) t.join();
    if (error) std::rethrow_exception(error);

    // Deterministic merge: per-machine order is the processing order.
    for (auto id : ctx.live) {
      const auto& s = local.at(id);
      step.messages += s.messages;
      step.bytes += s.bytes;
      step.receives += s.messages;  // every send is delivered to a live successor
      step.trains += s.trains;
      for (std::size_t m = 0; m < M; ++m) {
        step.sends_per_submodel[m] += s.sends_per_submodel[m];
        step.trains_per_submodel[m] += s.trains_per_submodel[m];
      }
      for (auto& e : local_trace.at(id)) trace_.push_back(e);
    }
    std::size_t max_counter = 0;
    for (const auto& e : trace_)
      if (e.iteration == iteration) max_counter = std::max<std::size_t>(max_counter, e.counter);
    std::size_t tick = max_counter + 1;
    finish_wstep(step, ctx, tick);
    step.ticks = tick;
    step.w_time = log_.virtual_time - t0;
    return step;
  }

  // Final replica of a live worker.
  const std::vector<std::vector<double>>& replica(MachineId id) const { return workers_.at(id).replica; }

  bool replicas_consistent() const {
    const auto& ref = workers_.at(live().front()).replica;
    for (auto id : live())
      if (workers_.at(id).replica != ref) return false;
    return true;
  }

  void record_step(StepCounts step) { log_.steps.push_back(std::move(step)); }

  void sync_machine_times() {
    for (const auto& [id, w] : workers_) log_.machines[id] = w.time;
  }

 private:
  void add_worker(MachineId id) {
    require(id <= cfg_.max_machine_id, "machine id exceeds visit-list width");
    Worker w;
    w.id = id;
    workers_[id] = std::move(w);
  }

  double max_clock() const {
    double c = 0;
    for (const auto& [id, w] : workers_) c = std::max(c, w.clock);
    return c;
  }

  void barrier() {
    double c = max_clock();
    for (auto& [id, w] : workers_) {
      w.time.idle += c - w.clock;
      w.clock = c;
    }
    log_.virtual_time = c;
  }

  bool any_queued() const {
    for (const auto& [id, w] : workers_)
      if (!w.queue.empty()) return true;
    return false;
  }

  std::size_t visit_words() const { return VisitList::words_for(cfg_.max_machine_id); }

  VisitList fresh_visits(const std::vector<MachineId>& trainers) const {
    VisitList v(cfg_.visit_rows(), visit_words());
    for (std::size_t r = 0; r < cfg_.training_rows(); ++r)
      for (auto id : trainers) v.set(r, id);
    return v;
  }

  Envelope make_envelope(const SubmodelMsg& msg, MachineId from, double arrival, bool initial) const {
    Envelope env;
    env.bytes = encode_msg(msg, problem_->payload_size(global_index(msg.id)));
    env.from = from;
    env.arrival = arrival;
    env.initial = initial;
    return env;
  }

  std::size_t global_index(SubmodelId id) const {
    if (!index_ready_) {
      for (std::size_t m = 0; m < problem_->submodel_count(); ++m) {
        auto w = problem_->wire_id(m);
        index_[{static_cast<int>(w.kind), w.index}] = m;
      }
      index_ready_ = true;
    }
    auto it = index_.find({static_cast<int>(id.kind), id.index});
    if (it == index_.end()) throw Error(ErrorCode::kProtocol, "unknown submodel on the wire");
    return it->second;
  }

  StepCounts begin_wstep(std::size_t iteration, const std::vector<std::vector<double>>& start, bool may_shuffle) {
    const std::size_t M = problem_->submodel_count();
    require(start.size() == M, "W step: wrong number of submodels");
    index_ready_ = false;
    index_.clear();
    if (cfg_.shuffle_topology && may_shuffle && topology_.size() > 2) {
      topology_ = reshuffle_topology(topology_, mix_seed({cfg_.seed, iteration}));
      trace_.push_back({iteration, 0, topology_.order().front(), TraceKind::kReshuffle, -1, 0, -1, 0, 0});
    }
    StepCounts step;
    step.iteration = iteration;
    step.sends_per_submodel.assign(M, 0);
    step.trains_per_submodel.assign(M, 0);
    newcomers_.clear();
    initial_ = start;
    for (auto& [id, w] : workers_) {
      w.queue.clear();
      w.retained.clear();
      w.replica = start;
      w.final_flag.assign(M, 0);
      w.finals = 0;
    }
    auto trainers = data_machines();
    auto home = homes();
    for (std::size_t m = 0; m < M; ++m) {
      SubmodelMsg msg{problem_->wire_id(m), 1, fresh_visits(trainers), start[m]};
      auto& w = workers_.at(home[m]);
      w.queue.push_back(make_envelope(msg, home[m], w.clock, true));
    }
    return step;
  }

  void store_final(Worker& w, std::size_t m, const std::vector<double>& payload) {
    w.replica[m] = payload;
    if (!w.final_flag[m]) {
      w.final_flag[m] = 1;
      ++w.finals;
    }
  }

  // Worker rule for one message. Returns the envelope to forward, if any.
  std::optional<Envelope> handle(Worker& w, Envelope& env, const WStepContext& ctx, StepCounts& step, std::size_t tick,
                                 std::vector<TraceEvent>* trace = nullptr) {
    auto& out_trace = trace ? *trace : trace_;
    SubmodelMsg msg = decode_msg(env.bytes, cfg_.visit_rows());
    const std::size_t m = global_index(msg.id);
    const std::size_t t = tick ? tick : msg.counter;
    const auto sm = static_cast<long>(m);
    for (auto dead : ctx.dead) msg.visits.clear_everywhere(dead);

    double start = std::max(w.clock, env.arrival);
    w.time.idle += start - w.clock;
    w.clock = start;

    if (auto row = msg.visits.first_open_training_row()) {
      if (msg.visits.test(*row, w.id)) {
        const std::size_t first_epoch = cfg_.consecutive ? 0 : *row;
        const std::size_t passes = cfg_.consecutive ? cfg_.epochs : 1;
        problem_->train(w.id, m, first_epoch, passes, msg.payload);
        double cost = cfg_.cost.train_per_value * static_cast<double>(problem_->shard_size(w.id) * passes *
                                                                      msg.payload.size());
        w.clock += cost;
        w.time.busy += cost;
        msg.visits.clear(*row, w.id);
        ++step.trains;
        ++step.trains_per_submodel[m];
        out_trace.push_back({ctx.iteration, t, w.id, TraceKind::kTrain, sm, msg.counter, -1, 0, *row});
      }
      if (!msg.visits.first_open_training_row()) complete(w, m, msg, ctx, out_trace, t);
    } else if (msg.visits.row_empty(msg.visits.redistribution_row())) {
      // Every row is empty, which only happens once dead machines have been
      // cleared: finish here unless this machine already holds the result.
      if (w.final_flag[m]) return std::nullopt;
      complete(w, m, msg, ctx, out_trace, t);
    }
    if (!msg.visits.first_open_training_row()) {
      auto redistribution = msg.visits.redistribution_row();
      if (msg.visits.test(redistribution, w.id)) {
        store_final(w, m, msg.payload);
        msg.visits.clear(redistribution, w.id);
        out_trace.push_back({ctx.iteration, t, w.id, TraceKind::kStore, sm, msg.counter, -1, 0, redistribution});
      }
      if (msg.visits.row_empty(redistribution)) return std::nullopt;
    }

    // Forward.
    const MachineId to = topology_.successor(w.id);
    ++msg.counter;
    double comm = cfg_.cost.comm_latency + cfg_.cost.comm_per_value * static_cast<double>(msg.payload.size());
    w.clock += comm;
    w.time.busy += comm;
    Envelope out = make_envelope(msg, w.id, w.clock, false);
    ++step.messages;
    step.bytes += out.bytes.size();
    ++step.sends_per_submodel[m];
    out_trace.push_back({ctx.iteration, t, w.id, TraceKind::kSend, sm, msg.counter, static_cast<long>(to),
                         out.bytes.size(), 0});
    w.retained[m] = out;
    return out;
  }

  // Training finished here: keep the final payload and address everyone else.
  void complete(Worker& w, std::size_t m, SubmodelMsg& msg, const WStepContext& ctx, std::vector<TraceEvent>& tr,
                std::size_t t) {
    store_final(w, m, msg.payload);
    auto r = msg.visits.redistribution_row();
    for (auto id : ctx.live)
      if (id != w.id && !ctx.dead.count(id)) msg.visits.set(r, id);
    tr.push_back({ctx.iteration, t, w.id, TraceKind::kStore, static_cast<long>(m), msg.counter, -1, 0, r});
  }

  void apply_w_event(const ClusterEvent& ev, WStepContext& ctx, StepCounts& step, std::size_t tick,
                     const Callbacks& cb) {
    switch (ev.op) {
      case EventOp::kFault: fail_in_wstep(ev.machine, ctx, step, tick, cb); break;
      case EventOp::kAdd: {
        for (const auto& [id, w] : workers_)
          for (const auto& env : w.queue)
            if (decode_msg(env.bytes, cfg_.visit_rows()).visits.first_open_training_row())
              throw Error(ErrorCode::kProtocol, "machines may join only during the redistribution round");
        if (cb.on_add) cb.on_add(ev.machine, ev.points);
        add_machine(ev.machine, ev.after, ctx.iteration, tick);
        auto& w = workers_.at(ev.machine);
        w.replica = initial_;
        w.final_flag.assign(problem_->submodel_count(), 0);
        w.finals = 0;
        break;
      }
      case EventOp::kRemove:
        throw Error(ErrorCode::kProtocol, "machines may leave only outside the W step");
    }
  }

  // W-phase fault: the machine's queue is lost. Each lost message is resent
  // by its sender from the retained copy (or rebuilt from the start replica if
  // it had not left its home yet), now to the dead machine's successor.
  void fail_in_wstep(MachineId id, WStepContext& ctx, StepCounts& step, std::size_t tick, const Callbacks& cb) {
    if (!cfg_.fault_tolerant) throw Error(ErrorCode::kDeadWorker, "machine " + std::to_string(id) + " failed");
    if (!workers_.count(id)) throw Error(ErrorCode::kProtocol, "fault on unknown machine");
    if (topology_.size() <= 1) throw Error(ErrorCode::kUnrecoverableLoss, "no surviving machine");
    trace_.push_back({ctx.iteration, tick, id, TraceKind::kFault, -1, 0, -1, 0, 0});
    const MachineId pred = topology_.predecessor(id);
    std::deque<Envelope> lost = std::move(workers_.at(id).queue);
    topology_.remove(id);
    workers_.erase(id);
    newcomers_.erase(id);
    ctx.dead.insert(id);
    ctx.live.erase(std::remove(ctx.live.begin(), ctx.live.end(), id), ctx.live.end());
    if (cb.on_fault) cb.on_fault(id);

    const MachineId to = topology_.successor(pred);
    for (auto& env : lost) {
      SubmodelMsg msg = decode_msg(env.bytes, cfg_.visit_rows());
      const std::size_t m = global_index(msg.id);
      Envelope copy;
      MachineId sender = env.from;
      if (env.initial) {
        sender = pred;
        SubmodelMsg fresh{msg.id, 1, fresh_visits(data_machines()), initial_[m]};
        copy = make_envelope(fresh, pred, workers_.at(pred).clock, false);
      } else {
        if (!workers_.count(sender) || !workers_.at(sender).retained.count(m))
          throw Error(ErrorCode::kUnrecoverableLoss, "no surviving copy of submodel " + std::to_string(m));
        copy = workers_.at(sender).retained.at(m);
        if (copy.bytes != env.bytes) throw Error(ErrorCode::kUnrecoverableLoss, "retained copy is stale");
      }
      auto& s = workers_.at(sender);
      double comm = cfg_.cost.comm_latency +
                    cfg_.cost.comm_per_value * static_cast<double>(problem_->payload_size(m));
      s.clock = std::max(s.clock, copy.arrival) + comm;
      s.time.busy += comm;
      copy.arrival = s.clock;
      copy.from = sender;
      s.retained[m] = copy;
      ++step.messages;
      ++step.receives;
      ++step.recoveries;
      step.bytes += copy.bytes.size();
      ++step.sends_per_submodel[m];
      trace_.push_back({ctx.iteration, tick, sender, TraceKind::kRecover, static_cast<long>(m),
                        decode_msg(copy.bytes, cfg_.visit_rows()).counter, static_cast<long>(to), copy.bytes.size(), 0});
      workers_.at(to).queue.push_back(std::move(copy));
    }
  }

  void finish_wstep(StepCounts& step, const WStepContext& ctx, std::size_t tick) {
    const std::size_t M = problem_->submodel_count();
    // Newcomers get every final submodel from their predecessor.
    for (auto id : std::vector<MachineId>(newcomers_.begin(), newcomers_.end())) {
      auto& w = workers_.at(id);
      MachineId pred = topology_.predecessor(id);
      while (newcomers_.count(pred)) pred = topology_.predecessor(pred);
      auto& src = workers_.at(pred);
      for (std::size_t m = 0; m < M; ++m) {
        if (w.final_flag[m]) continue;
        double comm = cfg_.cost.comm_latency + cfg_.cost.comm_per_value * static_cast<double>(src.replica[m].size());
        src.clock += comm;
        src.time.busy += comm;
        store_final(w, m, src.replica[m]);
        ++step.catchups;
        ++step.messages;
        ++step.receives;
        step.bytes += wire_size(visit_words() * cfg_.visit_rows(), src.replica[m].size());
        trace_.push_back({ctx.iteration, tick, pred, TraceKind::kCatchup, static_cast<long>(m), 0,
                          static_cast<long>(id), wire_size(visit_words() * cfg_.visit_rows(), src.replica[m].size()), 0});
      }
    }
    newcomers_.clear();
    for (auto id : live()) {
      if (workers_.at(id).finals != M)
        throw Error(ErrorCode::kProtocol, "machine " + std::to_string(id) + " missed a final submodel");
    }
    if (!replicas_consistent()) throw Error(ErrorCode::kProtocol, "replicas differ at the end of the W step");
    barrier();
    trace_.push_back({ctx.iteration, tick, live().front(), TraceKind::kBarrier, -1, 0, -1, 0, 0});
  }

  const Problem* problem_;
  RingConfig cfg_;
  Topology topology_;
  std::map<MachineId, Worker> workers_;
  std::set<MachineId> newcomers_;
  std::vector<std::vector<double>> initial_;
  CommLog log_;
  std::vector<TraceEvent> trace_;
  mutable std::map<std::pair<int, std::uint32_t>, std::size_t> index_;
  mutable bool index_ready_ = false;
};

}  // namespace parmac
