// Copyright 2026 the fedsplit authors
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

#pragma once

#include <chrono>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fedsplit/cnmf.hpp"
#include "fedsplit/data.hpp"
#include "fedsplit/nmf.hpp"
#include "fedsplit/parallel.hpp"
#include "fedsplit/tuning.hpp"

namespace fedsplit::fed {

/// One simulated client: a group's local training data (rows = group users,
/// columns = the shared item space) and its locally trained model.
struct ClientState {
  int group_id = 0;
  SparseRatings data;      // X^g
  SparseRatings validation;  // group slice of the validation split (may be empty)
  cnmf::CnmfModel model;   // W^g, H^g, b_W^g, b_H^g, trained against mu_global
  double mu_g = 0.0;       // local mean, shared during setup

  int local_rank() const { return model.hyperparams.k; }
};

/// Everything a client ever sends. The setup round carries only the group
/// mean; the one-shot round carries the transposed item factors and item
/// biases. By construction there is no user factor, no user bias and no raw
/// rating anywhere in this type.
struct ClientUpload {
  int group_id = 0;         // positional identification number
  Matrix item_factors_t;    // (H^g)^T, m x k_g; empty in the setup round
  Vector item_bias;         // b_H^g, length m; empty in the setup round
  double mu_g = 0.0;        // meaningful in the setup round only
  std::size_t n_ratings = 0;  // only populated when the weighted-mean variant is enabled
};

/// Processor output: global item patterns plus the per-group slices of the
/// joint item-factor matrix.
struct GlobalModel {
  Matrix W_global;             // m x K
  Matrix H_global;             // K x sum(k_g)
  std::vector<Matrix> slices;  // M^g in upload order, K x k_g each
  std::vector<int> group_ids;  // upload order
  Vector b_H_global;           // length m
  double mu_global = 0.0;
  int rank = 0;  // K
  double joint_relative_error = 0.0;

  const Matrix& slice_for(int group_id) const {
    for (std::size_t g = 0; g < group_ids.size(); ++g)
      if (group_ids[g] == group_id) return slices[g];
    throw ProtocolError("no slice for group " + std::to_string(group_id));
  }
};

/// Post-distillation client state; holds everything Eq.-19-style prediction
/// needs: distilled user factors, the local user bias, and the broadcast
/// global artifacts.
struct FederatedClientModel {
  int group_id = 0;
  MatrixRM W_star;    // n_g x K
  Vector b_W;         // length n_g, local
  Matrix W_global;    // m x K, broadcast
  Vector b_H_global;  // length m, broadcast
  double mu_global = 0.0;

  double predict(Index i, Index j) const {
    if (i < 0 || i >= W_star.rows() || j < 0 || j >= W_global.rows())
      throw std::out_of_range("federated predict index out of range");
    return W_star.row(i).dot(W_global.row(j)) + b_W(i) + b_H_global(j) + mu_global;
  }
};

/// Unweighted mean of the group means. Every group counts equally regardless
/// of how many ratings it holds.
inline double compute_global_mean(const std::vector<std::pair<int, double>>& group_means) {
  if (group_means.empty()) throw DataError("global mean of zero groups is undefined");
  double acc = 0.0;
  for (const auto& [gid, mu] : group_means) acc += mu;
  return acc / static_cast<double>(group_means.size());
}

/// Rating-count-weighted variant, offered for sensitivity analysis only.
inline double compute_global_mean_weighted(
    const std::vector<std::pair<double, std::size_t>>& mean_and_count) {
  if (mean_and_count.empty()) throw DataError("global mean of zero groups is undefined");
  double acc = 0.0, weight = 0.0;
  for (const auto& [mu, count] : mean_and_count) {
    acc += mu * static_cast<double>(count);
    weight += static_cast<double>(count);
  }
  if (weight == 0.0) throw DataError("weighted global mean needs at least one rating");
  return acc / weight;
}

struct ServerConfig {
  std::vector<int> rank_candidates;  // defaults to 2,4,...,30
  int cv_folds = 5;
  double cv_val_frac = 0.2;
  nmf::NmfConfig nmf;  // 1000 iterations, tol 1e-6, NNDSVD init
  bool weighted_item_bias = false;
  std::size_t jobs = 1;
  std::uint64_t seed = 0;

  std::vector<int> candidates_or_default() const {
    if (!rank_candidates.empty()) return rank_candidates;
    std::vector<int> c;
    for (int k = 2; k <= 30; k += 2) c.push_back(k);
    return c;
  }
};

/// Joint factorization. Stacks the uploaded item factors side by side,
/// averages the item biases, picks the server rank by entry-holdout CV and
/// slices the joint H back into per-group blocks by cumulative rank offsets.
inline GlobalModel server_aggregate(const std::vector<ClientUpload>& uploads, const ServerConfig& cfg,
                                    int* selected_rank_out = nullptr) {
  if (uploads.empty()) throw ProtocolError("server_aggregate requires at least one upload");
  const Index m = uploads.front().item_factors_t.rows();
  Index total_k = 0;
  for (const auto& u : uploads) {
    if (u.item_factors_t.rows() != m)
      throw ProtocolError("upload from group " + std::to_string(u.group_id) +
                          " has mismatched item dimension");
    if (u.item_bias.size() != m)
      throw ProtocolError("upload from group " + std::to_string(u.group_id) +
                          " has mismatched item-bias length");
    if (u.item_factors_t.cols() < 1) throw ProtocolError("upload carries an empty factor block");
    total_k += u.item_factors_t.cols();
  }

  Matrix X_joint(m, total_k);
  Vector b_H_global = Vector::Zero(m);
  double weight = 0.0;
  Index off = 0;
  for (const auto& u : uploads) {
    X_joint.middleCols(off, u.item_factors_t.cols()) = u.item_factors_t;
    off += u.item_factors_t.cols();
    if (cfg.weighted_item_bias) {
      b_H_global += static_cast<double>(u.n_ratings) * u.item_bias;
      weight += static_cast<double>(u.n_ratings);
    } else {
      b_H_global += u.item_bias;
      weight += 1.0;
    }
  }
  b_H_global /= weight;

  nmf::NmfConfig fit_cfg = cfg.nmf;
  const int K = nmf::select_rank(X_joint, cfg.candidates_or_default(), cfg.cv_folds,
                                 cfg.cv_val_frac, fit_cfg, cfg.seed, cfg.jobs);
  if (selected_rank_out) *selected_rank_out = K;
  fit_cfg.rank = K;
  auto fit = nmf::nmf_fit(X_joint, fit_cfg);

  GlobalModel g;
  g.W_global = std::move(fit.factors.W);
  g.H_global = std::move(fit.factors.H);
  g.b_H_global = std::move(b_H_global);
  g.rank = K;
  g.joint_relative_error = fit.relative_error;
  off = 0;
  for (const auto& u : uploads) {
    g.group_ids.push_back(u.group_id);
    g.slices.emplace_back(g.H_global.middleCols(off, u.item_factors_t.cols()));
    off += u.item_factors_t.cols();
  }
  return g;
}

/// Knowledge distillation: W*^g = W^g (M^g)^T. A single product, no
/// iteration; non-negativity is inherited from the operands.
inline FederatedClientModel distill(const ClientState& client, const Matrix& M_g,
                                    const GlobalModel& global) {
  if (M_g.cols() != client.model.W.cols())
    throw ProtocolError("slice for group " + std::to_string(client.group_id) +
                        " does not match the client rank");
  FederatedClientModel f;
  f.group_id = client.group_id;
  f.W_star = client.model.W * M_g.transpose();
  f.b_W = client.model.b_W;
  f.W_global = global.W_global;
  f.b_H_global = global.b_H_global;
  f.mu_global = global.mu_global;
  return f;
}

/// Eq.-19-style estimate: distilled user factors against the global item
/// patterns plus local user bias, global item bias and global mean.
inline double federated_predict(const FederatedClientModel& fcm, Index i, Index j) {
  return fcm.predict(i, j);
}

struct CommunicationLedger {
  enum class Direction { ClientToServer, ServerToClient };
  struct Message {
    int phase = 0;  // 0 = setup, 2 = one-shot exchange
    Direction direction = Direction::ClientToServer;
    int group_id = 0;
    std::string kind;
  };
  std::vector<Message> messages;

  void record(int phase, Direction dir, int group_id, std::string kind) {
    messages.push_back({phase, dir, group_id, std::move(kind)});
  }
  std::size_t uplinks() const { return count(Direction::ClientToServer, -1); }
  std::size_t downlinks() const { return count(Direction::ServerToClient, -1); }
  std::size_t post_setup_uplinks(int group_id) const { return count(Direction::ClientToServer, group_id, 1); }
  std::size_t post_setup_downlinks(int group_id) const { return count(Direction::ServerToClient, group_id, 1); }

  /// The one-shot property: per client, exactly one uplink and one downlink
  /// in the setup phase and exactly one of each afterwards.
  bool one_shot(const std::vector<int>& group_ids) const {
    for (int gid : group_ids) {
      std::size_t setup_up = 0, setup_down = 0, main_up = 0, main_down = 0;
      for (const auto& msg : messages) {
        if (msg.group_id != gid) continue;
        auto& slot = msg.phase == 0
                         ? (msg.direction == Direction::ClientToServer ? setup_up : setup_down)
                         : (msg.direction == Direction::ClientToServer ? main_up : main_down);
        ++slot;
      }
      if (setup_up != 1 || setup_down != 1 || main_up != 1 || main_down != 1) return false;
    }
    return messages.size() == 4 * group_ids.size();
  }

 private:
  std::size_t count(Direction dir, int group_id, int min_phase = 0) const {
    std::size_t c = 0;
    for (const auto& msg : messages)
      if (msg.direction == dir && msg.phase >= min_phase && (group_id < 0 || msg.group_id == group_id)) ++c;
    return c;
  }
};

struct FedRunConfig {
  // client-side tuning budget (0 trials = use space midpoints untuned)
  std::size_t tuning_trials = 100;
  int tuning_folds = 5;
  int tuning_iters = 100;
  // final local fits
  int fit_iters = 500;
  bool early_stop = true;
  int patience = 20;
  // processor
  ServerConfig server;
  bool weighted_means = false;
  std::size_t jobs = 1;
  std::uint64_t seed = 0;
};

struct PhaseTimings {
  double setup_s = 0.0;
  double local_fit_s = 0.0;
  double aggregate_s = 0.0;
  double distill_s = 0.0;
};

struct FedSplitRun {
  std::vector<ClientState> clients;          // phase-1 local models (pre-distillation)
  std::vector<ClientUpload> uploads;         // exactly what the processor saw
  GlobalModel global;
  std::vector<FederatedClientModel> fed_models;
  CommunicationLedger ledger;
  PhaseTimings timings;
  double mu_global = 0.0;
  int selected_rank = 0;
};

namespace detail {
inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}
}  // namespace detail

/// The full protocol over in-process clients:
///   phase 0: every client reports its group mean, the processor returns the
///            global mean (one small uplink + downlink per client);
///   phase 1: clients tune and fit local models in parallel, using the
///            global mean;
///   phase 2: one upload of ((H^g)^T, b_H^g) per client, one joint
///            factorization, one download of (W_global, M^g, b_H_global);
///   phase 3: clients distill in parallel.
inline FedSplitRun run_fedsplit(const data::SplitSet& dataset, const data::GroupPartition& partition,
                                const FedRunConfig& cfg) {
  if (partition.n_groups() < 1) throw DataError("run_fedsplit requires at least one group");
  const auto n_groups = static_cast<std::size_t>(partition.n_groups());

  FedSplitRun run;
  run.clients.resize(n_groups);

  auto t0 = std::chrono::steady_clock::now();

  // Phase 0: mean exchange.
  std::vector<std::pair<int, double>> means;
  std::vector<std::pair<double, std::size_t>> weighted_means;
  for (std::size_t g = 0; g < n_groups; ++g) {
    const int gid = static_cast<int>(g) + 1;
    ClientState& client = run.clients[g];
    client.group_id = gid;
    client.data = dataset.train.restrict_to_users(partition.members(gid));
    client.validation = dataset.validation.restrict_to_users(partition.members(gid));
    if (client.data.empty())
      throw DataError("group " + std::to_string(gid) + " has no training ratings");
    client.mu_g = client.data.mean();
    means.emplace_back(gid, client.mu_g);
    weighted_means.emplace_back(client.mu_g, client.data.nnz());
    run.ledger.record(0, CommunicationLedger::Direction::ClientToServer, gid, "group_mean");
  }
  run.mu_global = cfg.weighted_means ? compute_global_mean_weighted(weighted_means)
                                     : compute_global_mean(means);
  for (std::size_t g = 0; g < n_groups; ++g)
    run.ledger.record(0, CommunicationLedger::Direction::ServerToClient, static_cast<int>(g) + 1,
                      "global_mean");
  run.timings.setup_s = detail::seconds_since(t0);

  // Phase 1: parallel local tuning and fitting against mu_global.
  t0 = std::chrono::steady_clock::now();
  parallel_for(n_groups, cfg.jobs, [&](std::size_t g) {
    ClientState& client = run.clients[g];
    const auto space = tuning::SearchSpace::for_group(client.data.n_users());
    const std::uint64_t client_seed = Rng(cfg.seed).child(0xC11e20 + g).seed();
    cnmf::CnmfHyperparams hp;
    if (cfg.tuning_trials > 0) {
      hp = tuning::tune(client.data, run.mu_global, space, cfg.tuning_trials, cfg.tuning_folds,
                        client_seed, cfg.tuning_iters, 1);
    } else {
      Rng rng(client_seed);
      hp.alpha = std::sqrt(space.alpha.lo * space.alpha.hi);
      hp.beta = std::sqrt(space.beta.lo * space.beta.hi);
      hp.gamma = std::sqrt(space.gamma.lo * space.gamma.hi);
      hp.delta = std::sqrt(space.delta.lo * space.delta.hi);
      hp.eta_W = std::sqrt(space.eta_W.lo * space.eta_W.hi);
      hp.eta_H = std::sqrt(space.eta_H.lo * space.eta_H.hi);
      hp.k = std::min(space.k_max, std::max(space.k_min, (space.k_min + space.k_max) / 2));
      hp.seed = rng.next_u64();
    }
    hp.max_iters = cfg.fit_iters;
    cnmf::CnmfFitOptions opt;
    opt.patience = cfg.patience;
    if (cfg.early_stop && !client.validation.empty()) opt.validation = &client.validation;
    client.model = cnmf::cnmf_fit(client.data, run.mu_global, hp, opt);
  });
  run.timings.local_fit_s = detail::seconds_since(t0);

  // Phase 2: one-shot exchange and joint factorization.
  t0 = std::chrono::steady_clock::now();
  run.uploads.reserve(n_groups);
  for (std::size_t g = 0; g < n_groups; ++g) {
    const ClientState& client = run.clients[g];
    ClientUpload up;
    up.group_id = client.group_id;
    up.item_factors_t = client.model.H.transpose();
    up.item_bias = client.model.b_H;
    up.mu_g = client.mu_g;
    if (cfg.weighted_means || cfg.server.weighted_item_bias) up.n_ratings = client.data.nnz();
    run.uploads.push_back(std::move(up));
    run.ledger.record(2, CommunicationLedger::Direction::ClientToServer, client.group_id,
                      "item_factors");
  }
  ServerConfig server_cfg = cfg.server;
  server_cfg.jobs = cfg.jobs;
  run.global = server_aggregate(run.uploads, server_cfg, &run.selected_rank);
  run.global.mu_global = run.mu_global;
  for (std::size_t g = 0; g < n_groups; ++g)
    run.ledger.record(2, CommunicationLedger::Direction::ServerToClient, static_cast<int>(g) + 1,
                      "global_patterns");
  run.timings.aggregate_s = detail::seconds_since(t0);

  // Phase 3: parallel distillation.
  t0 = std::chrono::steady_clock::now();
  run.fed_models.resize(n_groups);
  parallel_for(n_groups, cfg.jobs, [&](std::size_t g) {
    run.fed_models[g] = distill(run.clients[g], run.global.slice_for(run.clients[g].group_id),
                                run.global);
  });
  run.timings.distill_s = detail::seconds_since(t0);
  return run;
}

}  // namespace fedsplit::fed
