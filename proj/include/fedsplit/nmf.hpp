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

#include <Eigen/SVD>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "fedsplit/common.hpp"
#include "fedsplit/parallel.hpp"
#include "fedsplit/random.hpp"

namespace fedsplit::nmf {

/// Non-negative factor pair X ~ W * H with W n x k, H k x m.
struct DenseFactorPair {
  Matrix W;
  Matrix H;
  int rank = 0;
};

struct NmfConfig {
  enum class Init { Nndsvd, Random };

  int rank = 2;
  int max_iters = 1000;
  double tol = 1e-6;      // stop when |change in relative error| drops below
  Init init = Init::Nndsvd;
  std::uint64_t seed = 0; // used by random init
  double epsilon = 1e-12; // division guard added to update denominators

  void validate() const {
    if (rank < 1) throw DataError("nmf rank must be >= 1");
    if (tol <= 0.0) throw DataError("nmf tol must be > 0");
    if (epsilon <= 0.0) throw DataError("nmf epsilon must be > 0");
    if (max_iters < 0) throw DataError("nmf max_iters must be >= 0");
  }
};

/// Squared Frobenius residual over squared norm: |X - WH|_F^2 / |X|_F^2.
inline double relative_error(const Matrix& X, const Matrix& W, const Matrix& H) {
  const double denom = X.squaredNorm();
  if (denom == 0.0) throw NumericError("relative error undefined for zero-norm X");
  return (X - W * H).squaredNorm() / denom;
}

/// Double-SVD non-negative initialization (basic variant: entries that come
/// out zero stay zero). Leading pair uses |u|,|v| directly; later pairs keep
/// the dominant of the positive/negative parts, scaled by sqrt(sigma * m).
inline DenseFactorPair nndsvd_init(const Matrix& X, int k) {
  const Index n = X.rows(), m = X.cols();
  if (k < 1 || k > std::min(n, m))
    throw DataError("nndsvd rank must lie in [1, min(n, m)]");

  Eigen::BDCSVD<Matrix> svd(X, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (svd.info() != Eigen::Success) throw NumericError("SVD failed in nndsvd initialization");
  const Matrix& U = svd.matrixU();
  const Matrix& V = svd.matrixV();
  const Vector& s = svd.singularValues();

  DenseFactorPair f;
  f.rank = k;
  f.W = Matrix::Zero(n, k);
  f.H = Matrix::Zero(k, m);

  f.W.col(0) = std::sqrt(s(0)) * U.col(0).cwiseAbs();
  f.H.row(0) = std::sqrt(s(0)) * V.col(0).cwiseAbs().transpose();

  for (int p = 1; p < k; ++p) {
    const Vector u = U.col(p), v = V.col(p);
    const Vector up = u.cwiseMax(0.0), un = (-u).cwiseMax(0.0);
    const Vector vp = v.cwiseMax(0.0), vn = (-v).cwiseMax(0.0);
    const double mp = up.norm() * vp.norm();
    const double mn = un.norm() * vn.norm();
    if (mp <= 0.0 && mn <= 0.0) continue;  // degenerate pair, leave column zero
    const Vector& uu = mp >= mn ? up : un;
    const Vector& vv = mp >= mn ? vp : vn;
    const double sigma = mp >= mn ? mp : mn;
    const double scale = std::sqrt(s(p) * sigma);
    f.W.col(p) = scale * uu / uu.norm();
    f.H.row(p) = scale * (vv / vv.norm()).transpose();
  }
  return f;
}

/// Random non-negative init scaled so that reconstruction magnitude matches
/// the data mean (commutes with positive rescaling of X, which the scale
/// consistency property relies on).
inline DenseFactorPair random_init(const Matrix& X, int k, std::uint64_t seed) {
  Rng rng(seed);
  const double scale = std::sqrt(std::max(X.mean(), 0.0) / static_cast<double>(k));
  DenseFactorPair f;
  f.rank = k;
  f.W = Matrix(X.rows(), k);
  f.H = Matrix(k, X.cols());
  for (Index i = 0; i < f.W.rows(); ++i)
    for (Index p = 0; p < f.W.cols(); ++p) f.W(i, p) = scale * rng.uniform();
  for (Index p = 0; p < f.H.rows(); ++p)
    for (Index j = 0; j < f.H.cols(); ++j) f.H(p, j) = scale * rng.uniform();
  return f;
}

struct NmfResult {
  DenseFactorPair factors;
  double relative_error = 0.0;
  int iterations = 0;
};

/// Called after every full W+H sweep; used by tests to assert per-iteration
/// invariants without exposing trainer internals.
using NmfObserver = std::function<void(int iter, const Matrix& W, const Matrix& H)>;

/// Multiplicative-update NMF on a dense non-negative matrix:
///   W <- W .* (X H^T) ./ (W H H^T + eps)
///   H <- H .* (W^T X) ./ (W^T W H + eps)
/// Alternates until max_iters or the relative-error change drops below tol.
inline NmfResult nmf_fit(const Matrix& X, const NmfConfig& cfg, const NmfObserver& observer = {}) {
  cfg.validate();
  if ((X.array() < 0.0).any()) throw DataError("nmf input must be non-negative");
  if (X.squaredNorm() == 0.0) throw DataError("nmf input must not be all-zero");

  NmfResult res;
  res.factors = cfg.init == NmfConfig::Init::Nndsvd ? nndsvd_init(X, cfg.rank)
                                                    : random_init(X, cfg.rank, cfg.seed);
  Matrix& W = res.factors.W;
  Matrix& H = res.factors.H;
  double prev = relative_error(X, W, H);
  res.relative_error = prev;

  for (int it = 1; it <= cfg.max_iters; ++it) {
    W = W.cwiseProduct((X * H.transpose()).cwiseQuotient(((W * (H * H.transpose())).array() + cfg.epsilon).matrix()));
    H = H.cwiseProduct((W.transpose() * X).cwiseQuotient((((W.transpose() * W) * H).array() + cfg.epsilon).matrix()));
    if (!W.allFinite() || !H.allFinite())
      throw NumericError("nmf diverged at iteration " + std::to_string(it));
    if (observer) observer(it, W, H);
    const double err = relative_error(X, W, H);
    res.iterations = it;
    res.relative_error = err;
    if (std::abs(prev - err) < cfg.tol) break;
    prev = err;
  }
  return res;
}

namespace detail {

/// Fit on X with the given entries held out: held-out cells start at the mean
/// of the remaining ones and are re-imputed with the current reconstruction
/// after every sweep. Returns the relative reconstruction error on the
/// held-out cells.
inline double heldout_error(const Matrix& X, const std::vector<std::pair<Index, Index>>& heldout,
                            const NmfConfig& cfg) {
  Matrix Xc = X;
  double train_sum = X.sum();
  for (const auto& [i, j] : heldout) train_sum -= X(i, j);
  const double denom_cells = static_cast<double>(X.size() - static_cast<Index>(heldout.size()));
  const double fill = denom_cells > 0.0 ? train_sum / denom_cells : 0.0;
  for (const auto& [i, j] : heldout) Xc(i, j) = fill;

  DenseFactorPair f = cfg.init == NmfConfig::Init::Nndsvd ? nndsvd_init(Xc, cfg.rank)
                                                          : random_init(Xc, cfg.rank, cfg.seed);
  Matrix& W = f.W;
  Matrix& H = f.H;
  double prev = relative_error(Xc, W, H);
  for (int it = 1; it <= cfg.max_iters; ++it) {
    W = W.cwiseProduct((Xc * H.transpose()).cwiseQuotient(((W * (H * H.transpose())).array() + cfg.epsilon).matrix()));
    H = H.cwiseProduct((W.transpose() * Xc).cwiseQuotient((((W.transpose() * W) * H).array() + cfg.epsilon).matrix()));
    if (!W.allFinite() || !H.allFinite())
      throw NumericError("nmf diverged at iteration " + std::to_string(it));
    const Matrix R = W * H;
    for (const auto& [i, j] : heldout) Xc(i, j) = R(i, j);
    const double err = relative_error(Xc, W, H);
    if (std::abs(prev - err) < cfg.tol) break;
    prev = err;
  }

  const Matrix R = W * H;
  double num = 0.0, den = 0.0;
  for (const auto& [i, j] : heldout) {
    const double d = X(i, j) - R(i, j);
    num += d * d;
    den += X(i, j) * X(i, j);
  }
  if (den == 0.0) return num == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return num / den;
}

}  // namespace detail

/// Pick the rank with the lowest mean held-out reconstruction error under
/// entry-holdout cross-validation (ties break toward the smaller rank).
/// Candidates above min(n, m) are skipped.
inline int select_rank(const Matrix& X, std::vector<int> candidates, int folds = 5,
                       double val_frac = 0.2, NmfConfig cfg = {}, std::uint64_t seed = 0,
                       std::size_t jobs = 1) {
  if (candidates.empty()) throw DataError("select_rank requires at least one candidate");
  std::sort(candidates.begin(), candidates.end());
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
  const int max_rank = static_cast<int>(std::min(X.rows(), X.cols()));
  while (candidates.size() > 1 && candidates.back() > max_rank) candidates.pop_back();
  if (candidates.size() == 1) return std::min(candidates.front(), max_rank);
  if (folds < 1) throw DataError("select_rank folds must be >= 1");

  // Disjoint validation folds of ~val_frac of the entries each.
  const auto total = static_cast<std::size_t>(X.size());
  const auto fold_size = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(val_frac * static_cast<double>(total))));
  if (fold_size * static_cast<std::size_t>(folds) > total)
    throw DataError("select_rank folds exceed available entries");
  std::vector<std::size_t> order(total);
  for (std::size_t i = 0; i < total; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);

  std::vector<std::vector<std::pair<Index, Index>>> fold_cells(static_cast<std::size_t>(folds));
  for (int f = 0; f < folds; ++f) {
    auto& cells = fold_cells[static_cast<std::size_t>(f)];
    cells.reserve(fold_size);
    for (std::size_t p = static_cast<std::size_t>(f) * fold_size; p < static_cast<std::size_t>(f + 1) * fold_size; ++p) {
      const auto idx = static_cast<Index>(order[p]);
      cells.emplace_back(idx % X.rows(), idx / X.rows());
    }
  }

  const std::size_t cells_total = candidates.size() * static_cast<std::size_t>(folds);
  std::vector<double> errors(cells_total, 0.0);
  parallel_for(cells_total, jobs, [&](std::size_t cell) {
    const std::size_t ci = cell / static_cast<std::size_t>(folds);
    const std::size_t fi = cell % static_cast<std::size_t>(folds);
    NmfConfig c = cfg;
    c.rank = candidates[ci];
    errors[cell] = detail::heldout_error(X, fold_cells[fi], c);
  });

  int best = candidates.front();
  double best_err = std::numeric_limits<double>::infinity();
  for (std::size_t ci = 0; ci < candidates.size(); ++ci) {
    double mean = 0.0;
    for (int f = 0; f < folds; ++f) mean += errors[ci * static_cast<std::size_t>(folds) + static_cast<std::size_t>(f)];
    mean /= static_cast<double>(folds);
    if (mean < best_err) {
      best_err = mean;
      best = candidates[ci];
    }
  }
  return best;
}

}  // namespace fedsplit::nmf
