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

#include <cstdint>
#include <limits>
#include <vector>

#include "fedsplit/cnmf.hpp"
#include "fedsplit/parallel.hpp"
#include "fedsplit/random.hpp"
#include "fedsplit/sparse_ratings.hpp"

namespace fedsplit::tuning {

/// Closed positive range sampled uniformly in log space.
struct ParamRange {
  double lo = 0.0;
  double hi = 0.0;

  double sample(Rng& rng) const { return rng.log_uniform(lo, hi); }
};

/// Hyperparameter search box. Rank is sampled uniformly (linear scale);
/// everything else log-uniform.
struct SearchSpace {
  ParamRange alpha{0.04, 0.08};
  ParamRange beta{0.04, 0.08};
  ParamRange gamma{0.01, 0.04};
  ParamRange delta{0.01, 0.04};
  ParamRange eta_W{0.002, 0.009};
  ParamRange eta_H{0.002, 0.009};
  int k_min = 2;
  int k_max = 20;

  /// Rank ceiling for a group of n users: min(n, 21) - 1, floored at 2 so
  /// that 3-member groups degenerate to a fixed k = 2.
  static SearchSpace for_group(std::size_t n_users) {
    SearchSpace s;
    s.k_max = std::max(2, static_cast<int>(std::min<std::size_t>(n_users, 21)) - 1);
    return s;
  }

  void validate() const {
    for (const auto* r : {&alpha, &beta, &gamma, &delta, &eta_W, &eta_H})
      if (!(r->lo > 0.0) || r->hi < r->lo) throw DataError("search range must satisfy 0 < lo <= hi");
    if (k_min < 2 || k_max < k_min) throw DataError("rank range must satisfy 2 <= k_min <= k_max");
  }

  cnmf::CnmfHyperparams sample(Rng& rng) const {
    cnmf::CnmfHyperparams hp;
    hp.alpha = alpha.sample(rng);
    hp.beta = beta.sample(rng);
    hp.gamma = gamma.sample(rng);
    hp.delta = delta.sample(rng);
    hp.eta_W = eta_W.sample(rng);
    hp.eta_H = eta_H.sample(rng);
    hp.k = static_cast<int>(rng.uniform_int(k_min, k_max));
    hp.seed = rng.next_u64();
    return hp;
  }
};

struct TrialResult {
  cnmf::CnmfHyperparams params;
  std::vector<double> fold_rmse;
  double mean_rmse = std::numeric_limits<double>::infinity();
};

struct TuneReport {
  std::vector<TrialResult> trials;
  std::size_t best_index = 0;
  bool fold_fallback = false;  // too few entries for the requested folds
};

namespace detail {

struct Fold {
  SparseRatings train;
  std::vector<RatingTriple> validation;
};

/// Partition the observed entries into disjoint validation folds (single
/// 80/20 holdout when there are fewer entries than folds).
inline std::vector<Fold> make_folds(const SparseRatings& X, int folds, std::uint64_t seed,
                                    bool* fell_back = nullptr) {
  if (folds < 1) throw DataError("folds must be >= 1");
  const std::size_t n = X.nnz();
  bool fallback = n < static_cast<std::size_t>(folds) || folds == 1;
  if (fell_back) *fell_back = fallback && folds > 1;

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);

  const auto& triples = X.triples();
  std::vector<Fold> out;
  auto build = [&](std::size_t lo, std::size_t hi) {
    Fold f;
    std::vector<char> in_val(n, 0);
    for (std::size_t p = lo; p < hi; ++p) in_val[order[p]] = 1;
    std::vector<RatingTriple> tr;
    tr.reserve(n - (hi - lo));
    for (std::size_t i = 0; i < n; ++i)
      (in_val[i] ? f.validation : tr).push_back(triples[i]);
    f.train = SparseRatings::from_triples(std::move(tr), X.user_ids(), X.item_ids());
    out.push_back(std::move(f));
  };

  if (fallback) {
    const std::size_t n_val = std::max<std::size_t>(1, n / 5);
    if (n_val >= n) throw DataError("too few entries to hold out a validation share");
    build(0, n_val);
    return out;
  }
  // folds contiguous chunks of the shuffled order; sizes differ by at most 1
  const std::size_t base = n / static_cast<std::size_t>(folds);
  const std::size_t extra = n % static_cast<std::size_t>(folds);
  std::size_t lo = 0;
  for (int f = 0; f < folds; ++f) {
    const std::size_t size = base + (static_cast<std::size_t>(f) < extra ? 1 : 0);
    build(lo, lo + size);
    lo += size;
  }
  return out;
}

}  // namespace detail

/// Mean clamped RMSE of `hp` across the given folds (fit on fold train,
/// score on fold validation).
inline double cv_rmse(const std::vector<detail::Fold>& folds, double mu,
                      cnmf::CnmfHyperparams hp, int fit_iters,
                      std::vector<double>* per_fold = nullptr) {
  hp.max_iters = fit_iters;
  double total = 0.0;
  if (per_fold) per_fold->clear();
  for (const auto& fold : folds) {
    auto mdl = cnmf::cnmf_fit(fold.train, mu, hp);
    double acc = 0.0;
    for (const auto& t : fold.validation) {
      const auto i = fold.train.row_of(t.user);
      const auto j = fold.train.col_of(t.item);
      const double p = clamp_rating(mdl.predict(static_cast<Index>(*i), static_cast<Index>(*j)));
      acc += (p - t.rating) * (p - t.rating);
    }
    const double r = std::sqrt(acc / static_cast<double>(fold.validation.size()));
    if (per_fold) per_fold->push_back(r);
    total += r;
  }
  return total / static_cast<double>(folds.size());
}

/// Random search over the box: `trials` samples, each scored by k-fold CV
/// with short fits; returns the argmin-mean-RMSE hyperparameters (first found
/// wins ties). Folds are drawn once from `seed` and shared across trials.
inline cnmf::CnmfHyperparams tune(const SparseRatings& X, double mu, const SearchSpace& space,
                                  std::size_t trials, int folds = 5, std::uint64_t seed = 0,
                                  int fit_iters = 100, std::size_t jobs = 1,
                                  TuneReport* report = nullptr) {
  space.validate();
  if (trials == 0) throw DataError("tune requires at least one trial");
  if (X.empty()) throw DataError("tune requires a non-empty rating set");

  bool fell_back = false;
  const auto cv_folds = detail::make_folds(X, folds, Rng(seed).child(0xF01d).seed(), &fell_back);

  std::vector<TrialResult> results(trials);
  parallel_for(trials, jobs, [&](std::size_t t) {
    Rng rng = Rng(seed).child(t);
    TrialResult res;
    res.params = space.sample(rng);
    res.mean_rmse = cv_rmse(cv_folds, mu, res.params, fit_iters, &res.fold_rmse);
    results[t] = std::move(res);
  });

  std::size_t best = 0;
  for (std::size_t t = 1; t < trials; ++t)
    if (results[t].mean_rmse < results[best].mean_rmse) best = t;

  auto chosen = results[best].params;
  if (report) {
    report->trials = std::move(results);
    report->best_index = best;
    report->fold_fallback = fell_back;
  }
  return chosen;
}

}  // namespace fedsplit::tuning
