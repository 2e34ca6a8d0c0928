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

#include <catch2/catch_amalgamated.hpp>
#include <cstring>

#include "fedsplit/federation.hpp"
#include "helpers.hpp"

using namespace fedsplit;
using namespace fedsplit::fed;

namespace {

Matrix random_nonneg(Index n, Index m, std::uint64_t seed) {
  Rng rng(seed);
  Matrix X(n, m);
  for (Index j = 0; j < m; ++j)
    for (Index i = 0; i < n; ++i) X(i, j) = rng.uniform(0.0, 1.0);
  return X;
}

ClientUpload make_upload(int gid, Index m, Index k, std::uint64_t seed) {
  ClientUpload u;
  u.group_id = gid;
  u.item_factors_t = random_nonneg(m, k, seed);
  u.item_bias = Vector::Zero(m);
  return u;
}

std::string bytes_of(const double* data, std::size_t count) {
  return {reinterpret_cast<const char*>(data), count * sizeof(double)};
}

}  // namespace

TEST_CASE("global mean is the unweighted average of the group means", "[federation]") {
  CHECK(compute_global_mean({{1, 2.0}, {2, 3.0}, {3, 4.0}}) == Catch::Approx(3.0));
  CHECK(compute_global_mean({{1, 3.7}}) == Catch::Approx(3.7));

  // one tiny group of high ratings vs a huge group of low ones: every group
  // still counts equally
  CHECK(compute_global_mean({{1, 5.0}, {2, 1.0}}) == Catch::Approx(3.0));
  CHECK(compute_global_mean_weighted({{5.0, 10}, {1.0, 1000}}) ==
        Catch::Approx((5.0 * 10 + 1.0 * 1000) / 1010.0));
  CHECK_THROWS_AS(compute_global_mean({}), DataError);
}

TEST_CASE("server_aggregate stacks, averages and slices", "[federation]") {
  ServerConfig cfg;
  cfg.nmf.max_iters = 200;

  SECTION("single client degenerates to its own factor block") {
    auto up = make_upload(1, 10, 3, 5);
    up.item_bias = Vector::Constant(10, 0.25);
    auto g = server_aggregate({up}, cfg);
    CHECK(g.slices.size() == 1);
    CHECK(g.slices[0] == g.H_global);
    CHECK(g.b_H_global == up.item_bias);
    CHECK(g.W_global.rows() == 10);
  }

  SECTION("two clients with ranks 3 and 5 slice at the cumulative offsets") {
    auto a = make_upload(1, 12, 3, 7);
    auto b = make_upload(2, 12, 5, 8);
    a.item_bias = Vector::Constant(12, 0.5);
    b.item_bias = Vector::Constant(12, -0.1);
    auto g = server_aggregate({a, b}, cfg);
    REQUIRE(g.H_global.cols() == 8);
    CHECK(g.slices[0] == g.H_global.middleCols(0, 3));
    CHECK(g.slices[1] == g.H_global.middleCols(3, 5));
    CHECK(g.slice_for(2) == g.slices[1]);
    CHECK(g.b_H_global.isApprox(Vector::Constant(12, 0.2)));

    // concatenating the slices reconstructs H_global bit-exactly
    Matrix cat(g.rank, 8);
    cat << g.slices[0], g.slices[1];
    CHECK(cat == g.H_global);

    // factors stay non-negative
    CHECK(g.W_global.minCoeff() >= 0.0);
    CHECK(g.H_global.minCoeff() >= 0.0);
  }

  SECTION("mismatched item dimension is a protocol error") {
    auto a = make_upload(1, 12, 3, 1);
    auto b = make_upload(2, 11, 3, 2);
    CHECK_THROWS_AS(server_aggregate({a, b}, cfg), ProtocolError);
  }
}

TEST_CASE("distillation is a plain matrix product", "[federation]") {
  GlobalModel global;
  global.W_global = random_nonneg(6, 2, 3);
  global.b_H_global = Vector::Zero(6);
  global.mu_global = 3.0;

  ClientState client;
  client.group_id = 1;

  SECTION("identity slice keeps W") {
    client.model.W = MatrixRM::Identity(2, 2);
    client.model.b_W = Vector::Zero(2);
    auto f = distill(client, Matrix::Identity(2, 2), global);
    CHECK(Matrix(f.W_star) == Matrix::Identity(2, 2));
  }

  SECTION("zero W distills to zero") {
    client.model.W = MatrixRM::Zero(4, 2);
    client.model.b_W = Vector::Zero(4);
    auto f = distill(client, random_nonneg(5, 2, 9), global);
    CHECK(f.W_star.norm() == 0.0);
    CHECK(f.W_star.rows() == 4);
    CHECK(f.W_star.cols() == 5);
  }

  SECTION("matches the naive triple loop") {
    client.model.W = random_nonneg(4, 3, 11);
    client.model.b_W = Vector::Zero(4);
    const Matrix M = random_nonneg(6, 3, 12);  // K=6, k_g=3
    auto f = distill(client, M, global);
    REQUIRE(f.W_star.rows() == 4);
    REQUIRE(f.W_star.cols() == 6);
    for (Index i = 0; i < 4; ++i)
      for (Index q = 0; q < 6; ++q) {
        double acc = 0.0;
        for (Index p = 0; p < 3; ++p) acc += client.model.W(i, p) * M(q, p);
        CHECK(f.W_star(i, q) == Catch::Approx(acc).margin(1e-12));
      }
  }

  SECTION("rank mismatch is a protocol error") {
    client.model.W = random_nonneg(4, 3, 13);
    client.model.b_W = Vector::Zero(4);
    CHECK_THROWS_AS(distill(client, random_nonneg(6, 4, 14), global), ProtocolError);
  }
}

TEST_CASE("federated prediction composes the broadcast artifacts", "[federation]") {
  FederatedClientModel f;
  f.W_star = MatrixRM::Zero(1, 1);
  f.b_W = Vector::Zero(1);
  f.W_global = Matrix::Zero(2, 1);
  f.b_H_global = Vector::Zero(2);
  f.mu_global = 3.5;
  CHECK(federated_predict(f, 0, 0) == Catch::Approx(3.5));

  f.W_star(0, 0) = 2.0;
  f.W_global(1, 0) = 1.5;
  f.b_W(0) = 0.1;
  f.b_H_global(1) = 0.2;
  f.mu_global = 3.0;
  const double raw = federated_predict(f, 0, 1);
  CHECK(raw == Catch::Approx(6.3));
  CHECK(clamp_rating(raw) == Catch::Approx(5.0));
  CHECK_THROWS_AS(federated_predict(f, 2, 0), std::out_of_range);
}

namespace {

FedRunConfig smoke_config() {
  FedRunConfig cfg;
  cfg.tuning_trials = 4;
  cfg.tuning_iters = 25;
  cfg.fit_iters = 60;
  cfg.server.rank_candidates = {2, 4, 6};
  cfg.server.nmf.max_iters = 250;
  cfg.jobs = 2;
  cfg.seed = 12;
  return cfg;
}

}  // namespace

TEST_CASE("run_fedsplit executes the one-shot protocol end to end", "[federation]") {
  auto ratings = testutil::synthetic_ratings(60, 40, 0.30, 2024);
  auto splits = data::split(ratings, 0.2, 0.2, 3);
  auto partition = data::partition_groups(splits.train.user_ids(), 3, 15, 3);
  REQUIRE(partition.n_groups() >= 3);

  auto run = run_fedsplit(splits, partition, smoke_config());
  const auto n = static_cast<std::size_t>(partition.n_groups());

  SECTION("communication ledger holds the one-shot property") {
    CHECK(run.ledger.uplinks() == 2 * n);
    CHECK(run.ledger.downlinks() == 2 * n);
    std::vector<int> gids;
    for (int g = 1; g <= partition.n_groups(); ++g) gids.push_back(g);
    CHECK(run.ledger.one_shot(gids));
    for (int g : gids) {
      CHECK(run.ledger.post_setup_uplinks(g) == 1);
      CHECK(run.ledger.post_setup_downlinks(g) == 1);
    }
  }

  SECTION("slices concatenate back to the joint factors") {
    Index off = 0;
    for (const auto& M : run.global.slices) {
      CHECK(M == run.global.H_global.middleCols(off, M.cols()));
      off += M.cols();
    }
    CHECK(off == run.global.H_global.cols());
  }

  SECTION("distilled factors take the server rank regardless of local ranks") {
    for (std::size_t g = 0; g < n; ++g) {
      CHECK(run.fed_models[g].W_star.rows() == static_cast<Index>(run.clients[g].data.n_users()));
      CHECK(run.fed_models[g].W_star.cols() == run.global.rank);
      CHECK(run.fed_models[g].W_star.minCoeff() >= 0.0);
    }
  }

  SECTION("the processor never sees user factors, user biases or ratings") {
    std::string processor_state;
    for (const auto& up : run.uploads) {
      processor_state += bytes_of(up.item_factors_t.data(), static_cast<std::size_t>(up.item_factors_t.size()));
      processor_state += bytes_of(up.item_bias.data(), static_cast<std::size_t>(up.item_bias.size()));
      processor_state += bytes_of(&up.mu_g, 1);
    }
    processor_state += bytes_of(run.global.W_global.data(), static_cast<std::size_t>(run.global.W_global.size()));
    processor_state += bytes_of(run.global.H_global.data(), static_cast<std::size_t>(run.global.H_global.size()));

    for (const auto& client : run.clients) {
      const auto w = bytes_of(client.model.W.data(), static_cast<std::size_t>(client.model.W.size()));
      const auto bw = bytes_of(client.model.b_W.data(), static_cast<std::size_t>(client.model.b_W.size()));
      CHECK(processor_state.find(w) == std::string::npos);
      CHECK(processor_state.find(bw) == std::string::npos);
      std::string row;  // any single rated row of X^g
      for (const auto& t : client.data.triples()) {
        row += bytes_of(&t.rating, 1);
        if (row.size() > 64) break;
      }
      if (!row.empty()) CHECK(processor_state.find(row) == std::string::npos);
    }
  }

  SECTION("federated predictions are finite and usable on the test split") {
    double acc = 0.0;
    std::size_t count = 0;
    for (std::size_t g = 0; g < n; ++g) {
      auto test_g = splits.test.restrict_to_users(partition.members(static_cast<int>(g) + 1));
      for (const auto& t : test_g.triples()) {
        const auto i = run.clients[g].data.row_of(t.user);
        const auto j = run.clients[g].data.col_of(t.item);
        REQUIRE(i);
        REQUIRE(j);
        const double p = clamp_rating(run.fed_models[g].predict(static_cast<Index>(*i), static_cast<Index>(*j)));
        acc += (p - t.rating) * (p - t.rating);
        ++count;
      }
    }
    REQUIRE(count > 0);
    CHECK(std::isfinite(std::sqrt(acc / static_cast<double>(count))));
  }
}

TEST_CASE("a single all-user group degenerates to CNMF plus a self-refit", "[federation]") {
  auto ratings = testutil::synthetic_ratings(25, 20, 0.4, 5);
  auto splits = data::split(ratings, 0.2, 0.2, 9);
  data::GroupPartition partition({splits.train.user_ids()});

  auto cfg = smoke_config();
  cfg.seed = 4;
  auto run = run_fedsplit(splits, partition, cfg);

  CHECK(run.clients.size() == 1);
  CHECK(run.mu_global == Catch::Approx(run.clients[0].mu_g));
  CHECK(run.ledger.one_shot({1}));

  auto test_g = splits.test.restrict_to_users(partition.members(1));
  double acc = 0.0;
  for (const auto& t : test_g.triples()) {
    const auto i = run.clients[0].data.row_of(t.user);
    const auto j = run.clients[0].data.col_of(t.item);
    const double p = clamp_rating(run.fed_models[0].predict(static_cast<Index>(*i), static_cast<Index>(*j)));
    acc += (p - t.rating) * (p - t.rating);
  }
  CHECK(std::isfinite(std::sqrt(acc / static_cast<double>(test_g.nnz()))));
}
