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

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "fedsplit/common.hpp"
#include "fedsplit/random.hpp"
#include "fedsplit/sparse_ratings.hpp"

namespace fedsplit::cnmf {

struct CnmfHyperparams {
  int k = 2;             // latent rank
  double alpha = 0.06;   // W regularization
  double beta = 0.06;    // H regularization
  double gamma = 0.02;   // user-bias regularization
  double delta = 0.02;   // item-bias regularization
  double eta_W = 0.005;  // user-bias learning rate
  double eta_H = 0.005;  // item-bias learning rate
  int max_iters = 500;
  std::uint64_t seed = 0;

  void validate() const {
    if (k < 2) throw DataError("cnmf rank must be >= 2");
    if (alpha < 0 || beta < 0 || gamma < 0 || delta < 0)
      throw DataError("cnmf regularization weights must be >= 0");
    if (eta_W <= 0 || eta_H <= 0) throw DataError("cnmf learning rates must be > 0");
    if (max_iters < 0) throw DataError("cnmf max_iters must be >= 0");
  }
};

/// A trained collaborative-filtering state: non-negative factors plus
/// unconstrained user/item biases and the mean rating used in training.
struct CnmfModel {
  MatrixRM W;  // n x k user factors, >= 0
  Matrix H;    // k x m item factors, >= 0
  Vector b_W;  // per-user bias
  Vector b_H;  // per-item bias
  double mu = 0.0;
  CnmfHyperparams hyperparams;

  /// W_i. * H_.j + b_W_i + b_H_j + mu. Unclamped; clamping belongs to the
  /// evaluation layer only.
  double predict(Index i, Index j) const {
    if (i < 0 || i >= W.rows() || j < 0 || j >= H.cols())
      throw std::out_of_range("cnmf predict index out of range");
    return W.row(i).dot(H.col(j)) + b_W(i) + b_H(j) + mu;
  }
};

/// Average of the stored (non-zero) ratings.
inline double group_mean(const SparseRatings& X) { return X.mean(); }

/// Root of the mean squared difference over (predicted, actual) pairs.
inline double rmse(std::span<const std::pair<double, double>> pairs) {
  if (pairs.empty()) throw DataError("rmse of an empty pair list is undefined");
  double acc = 0.0;
  for (const auto& [p, a] : pairs) acc += (p - a) * (p - a);
  return std::sqrt(acc / static_cast<double>(pairs.size()));
}

/// Squared Frobenius residual scaled by sqrt(m*n), over full dense matrices.
/// Diagnostic only; held-out rmse() is the evaluation metric.
inline double scaled_squared_residual(const Matrix& X, const Matrix& Xhat) {
  if (X.rows() != Xhat.rows() || X.cols() != Xhat.cols())
    throw DataError("scaled_squared_residual shape mismatch");
  return (X - Xhat).squaredNorm() / std::sqrt(static_cast<double>(X.size()));
}

/// Invoked on every observed-coordinate access inside the masked kernels;
/// lets tests count exactly which cells the trainer touches.
using CoordObserver = std::function<void(Index i, Index j)>;

struct CnmfFitOptions {
  /// When set, validation RMSE (clamped) is tracked each iteration and
  /// training stops after `patience` iterations without improvement; the
  /// best-scoring parameters are restored. Must share X's index maps.
  const SparseRatings* validation = nullptr;
  int patience = 20;

  bool update_user_factors = true;
  bool update_item_factors = true;
  bool update_user_bias = true;
  bool update_item_bias = true;

  // Initial values; defaults are seeded uniform [0, 1/sqrt(k)) factors and
  // zero biases.
  std::optional<Matrix> W0;
  std::optional<Matrix> H0;
  std::optional<Vector> b_W0;
  std::optional<Vector> b_H0;

  CoordObserver observer;
  double epsilon = 1e-12;  // division guard
};

struct CnmfFitReport {
  int iterations = 0;
  int best_iteration = 0;           // iteration of the restored parameters
  long negative_projections = 0;    // factor entries clipped to 0 after update
  double final_validation_rmse = std::numeric_limits<double>::quiet_NaN();
  bool early_stopped = false;
};

/// Masked objective: sum over observed entries of (X - Xhat)^2 plus Tikhonov
/// terms for W, H, b_W, b_H.
inline double objective(const SparseRatings& X, const CnmfModel& model) {
  double sse = 0.0;
  for (std::size_t i = 0; i < X.n_users(); ++i) {
    const auto cols = X.row_cols(i);
    const auto vals = X.row_vals(i);
    for (std::size_t p = 0; p < cols.size(); ++p) {
      const double e = vals[p] - model.predict(static_cast<Index>(i), cols[p]);
      sse += e * e;
    }
  }
  const auto& hp = model.hyperparams;
  return sse + hp.alpha * model.W.squaredNorm() + hp.beta * model.H.squaredNorm() +
         hp.gamma * model.b_W.squaredNorm() + hp.delta * model.b_H.squaredNorm();
}

namespace detail {

inline double masked_pred(const CnmfModel& mdl, Index i, Index j) {
  const int k = static_cast<int>(mdl.W.cols());
  const double* wr = mdl.W.data() + static_cast<std::ptrdiff_t>(i) * k;
  const double* hc = mdl.H.data() + static_cast<std::ptrdiff_t>(j) * k;
  double dot = 0.0;
  for (int p = 0; p < k; ++p) dot += wr[p] * hc[p];
  return dot + mdl.b_W(i) + mdl.b_H(j) + mdl.mu;
}

inline double validation_rmse(const CnmfModel& mdl, const SparseRatings& X,
                              const SparseRatings& val) {
  double acc = 0.0;
  std::size_t count = 0;
  for (const auto& t : val.triples()) {
    const auto r = X.row_of(t.user);
    const auto c = X.col_of(t.item);
    if (!r || !c) continue;
    const double p = clamp_rating(masked_pred(mdl, static_cast<Index>(*r), static_cast<Index>(*c)));
    acc += (p - t.rating) * (p - t.rating);
    ++count;
  }
  return count == 0 ? std::numeric_limits<double>::quiet_NaN()
                    : std::sqrt(acc / static_cast<double>(count));
}

}  // namespace detail

/// Matrix-completion trainer. Each iteration performs, in order:
///   b_W_i += eta_W * sum_{j in obs(i)} (err_ij - gamma * b_W_i)
///   b_H_j += eta_H * sum_{i in obs(j)} (err_ij - delta * b_H_j)
///   W <- W .* (X H^T) ./ (Xhat H^T + alpha W)     (observed cells only)
///   H <- H .* (W^T X) ./ (W^T Xhat + beta H)      (observed cells only)
/// with Xhat re-evaluated before every sub-step and every sum restricted to
/// the non-zero coordinates of X. Factor entries driven negative by the bias
/// terms are projected back to 0 and counted.
inline CnmfModel cnmf_fit(const SparseRatings& X, double mu, const CnmfHyperparams& hp,
                          const CnmfFitOptions& options = {}, CnmfFitReport* report = nullptr) {
  hp.validate();
  if (X.empty()) throw DataError("cnmf_fit requires a non-empty rating set");

  const auto n = static_cast<Index>(X.n_users());
  const auto m = static_cast<Index>(X.n_items());
  const int k = hp.k;

  CnmfModel mdl;
  mdl.mu = mu;
  mdl.hyperparams = hp;
  if (options.W0) {
    if (options.W0->rows() != n || options.W0->cols() != k) throw DataError("W0 shape mismatch");
    mdl.W = *options.W0;
  } else {
    mdl.W.resize(n, k);
    Rng rng = Rng(hp.seed).child(0x57);
    const double hi = 1.0 / std::sqrt(static_cast<double>(k));
    for (Index i = 0; i < n; ++i)
      for (int p = 0; p < k; ++p) mdl.W(i, p) = rng.uniform(0.0, hi);
  }
  if (options.H0) {
    if (options.H0->rows() != k || options.H0->cols() != m) throw DataError("H0 shape mismatch");
    mdl.H = *options.H0;
  } else {
    mdl.H.resize(k, m);
    Rng rng = Rng(hp.seed).child(0x48);
    const double hi = 1.0 / std::sqrt(static_cast<double>(k));
    for (Index j = 0; j < m; ++j)
      for (int p = 0; p < k; ++p) mdl.H(p, j) = rng.uniform(0.0, hi);
  }
  mdl.b_W = options.b_W0 ? *options.b_W0 : Vector::Zero(n);
  mdl.b_H = options.b_H0 ? *options.b_H0 : Vector::Zero(m);
  if (mdl.b_W.size() != n || mdl.b_H.size() != m) throw DataError("bias init shape mismatch");

  CnmfFitReport rep;
  const auto& observe = options.observer;

  // Early-stop bookkeeping.
  double best_val = std::numeric_limits<double>::infinity();
  int best_iter = 0;
  MatrixRM best_W;
  Matrix best_H;
  Vector best_bW, best_bH;
  auto snapshot = [&] {
    best_W = mdl.W;
    best_H = mdl.H;
    best_bW = mdl.b_W;
    best_bH = mdl.b_H;
  };

  std::vector<double> num(static_cast<std::size_t>(k)), den(static_cast<std::size_t>(k));

  for (int it = 1; it <= hp.max_iters; ++it) {
    if (options.update_user_bias) {
      for (Index i = 0; i < n; ++i) {
        const auto cols = X.row_cols(static_cast<std::size_t>(i));
        const auto vals = X.row_vals(static_cast<std::size_t>(i));
        if (cols.empty()) continue;
        double acc = 0.0;
        for (std::size_t p = 0; p < cols.size(); ++p) {
          if (observe) observe(i, cols[p]);
          acc += (vals[p] - detail::masked_pred(mdl, i, cols[p])) - hp.gamma * mdl.b_W(i);
        }
        mdl.b_W(i) += hp.eta_W * acc;
      }
    }
    if (options.update_item_bias) {
      for (Index j = 0; j < m; ++j) {
        const auto rows = X.col_rows(static_cast<std::size_t>(j));
        const auto vals = X.col_vals(static_cast<std::size_t>(j));
        if (rows.empty()) continue;
        double acc = 0.0;
        for (std::size_t p = 0; p < rows.size(); ++p) {
          if (observe) observe(rows[p], j);
          acc += (vals[p] - detail::masked_pred(mdl, rows[p], j)) - hp.delta * mdl.b_H(j);
        }
        mdl.b_H(j) += hp.eta_H * acc;
      }
    }
    if (options.update_user_factors) {
      for (Index i = 0; i < n; ++i) {
        const auto cols = X.row_cols(static_cast<std::size_t>(i));
        const auto vals = X.row_vals(static_cast<std::size_t>(i));
        if (cols.empty()) continue;
        std::fill(num.begin(), num.end(), 0.0);
        std::fill(den.begin(), den.end(), 0.0);
        for (std::size_t p = 0; p < cols.size(); ++p) {
          if (observe) observe(i, cols[p]);
          const Index j = cols[p];
          const double xhat = detail::masked_pred(mdl, i, j);
          const double* hc = mdl.H.data() + static_cast<std::ptrdiff_t>(j) * k;
          for (int q = 0; q < k; ++q) {
            num[static_cast<std::size_t>(q)] += vals[p] * hc[q];
            den[static_cast<std::size_t>(q)] += xhat * hc[q];
          }
        }
        double* wr = mdl.W.data() + static_cast<std::ptrdiff_t>(i) * k;
        for (int q = 0; q < k; ++q) {
          const double w = wr[q];
          const double updated =
              w * num[static_cast<std::size_t>(q)] / (den[static_cast<std::size_t>(q)] + hp.alpha * w + options.epsilon);
          if (updated < 0.0) {
            wr[q] = 0.0;
            ++rep.negative_projections;
          } else {
            wr[q] = updated;
          }
        }
      }
    }
    if (options.update_item_factors) {
      for (Index j = 0; j < m; ++j) {
        const auto rows = X.col_rows(static_cast<std::size_t>(j));
        const auto vals = X.col_vals(static_cast<std::size_t>(j));
        if (rows.empty()) continue;
        std::fill(num.begin(), num.end(), 0.0);
        std::fill(den.begin(), den.end(), 0.0);
        for (std::size_t p = 0; p < rows.size(); ++p) {
          if (observe) observe(rows[p], j);
          const Index i = rows[p];
          const double xhat = detail::masked_pred(mdl, i, j);
          const double* wr = mdl.W.data() + static_cast<std::ptrdiff_t>(i) * k;
          for (int q = 0; q < k; ++q) {
            num[static_cast<std::size_t>(q)] += vals[p] * wr[q];
            den[static_cast<std::size_t>(q)] += xhat * wr[q];
          }
        }
        double* hc = mdl.H.data() + static_cast<std::ptrdiff_t>(j) * k;
        for (int q = 0; q < k; ++q) {
          const double h = hc[q];
          const double updated =
              h * num[static_cast<std::size_t>(q)] / (den[static_cast<std::size_t>(q)] + hp.beta * h + options.epsilon);
          if (updated < 0.0) {
            hc[q] = 0.0;
            ++rep.negative_projections;
          } else {
            hc[q] = updated;
          }
        }
      }
    }

    if (!mdl.W.allFinite() || !mdl.H.allFinite() || !mdl.b_W.allFinite() || !mdl.b_H.allFinite())
      throw NumericError("cnmf diverged at iteration " + std::to_string(it));
    rep.iterations = it;
    rep.best_iteration = it;

    if (options.validation) {
      const double val = detail::validation_rmse(mdl, X, *options.validation);
      rep.final_validation_rmse = val;
      if (std::isnan(val)) continue;  // validation shares no coordinates with X's maps
      if (val < best_val) {
        best_val = val;
        best_iter = it;
        snapshot();
      } else if (it - best_iter >= options.patience) {
        rep.early_stopped = true;
        break;
      }
    }
  }

  if (options.validation && best_iter > 0) {
    mdl.W = std::move(best_W);
    mdl.H = std::move(best_H);
    mdl.b_W = std::move(best_bW);
    mdl.b_H = std::move(best_bH);
    rep.best_iteration = best_iter;
    rep.final_validation_rmse = best_val;
  }
  if (report) *report = rep;
  return mdl;
}

}  // namespace fedsplit::cnmf
