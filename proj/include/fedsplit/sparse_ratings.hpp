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

#include <algorithm>
#include <cstdint>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "fedsplit/common.hpp"

namespace fedsplit {

/// One explicit-feedback rating. Zero is "missing" and is never stored.
struct RatingTriple {
  std::int64_t user = 0;
  std::int64_t item = 0;
  double rating = 0.0;

  friend bool operator==(const RatingTriple&, const RatingTriple&) = default;
};

/// Sparse users x items rating matrix stored by non-zero triples, with maps
/// from external user/item ids to dense row/column positions. Immutable after
/// construction; CSR and CSC views are prebuilt for the masked update kernels.
///
/// Row/column index spaces may be larger than the set of users/items that
/// actually appear in the triples (e.g. a validation split shares the full
/// dataset's index maps so that factor matrices line up across splits).
class SparseRatings {
 public:
  SparseRatings() = default;

  /// Build from triples; index maps are derived from the ids present,
  /// ascending. Throws DataError on duplicate (user,item) pairs or
  /// non-positive ratings.
  static SparseRatings from_triples(std::vector<RatingTriple> triples) {
    std::vector<std::int64_t> users, items;
    users.reserve(triples.size());
    items.reserve(triples.size());
    for (const auto& t : triples) {
      users.push_back(t.user);
      items.push_back(t.item);
    }
    sort_unique(users);
    sort_unique(items);
    return from_triples(std::move(triples), std::move(users), std::move(items));
  }

  /// Build with explicit index maps (ids must be sorted ascending and cover
  /// every id referenced by the triples).
  static SparseRatings from_triples(std::vector<RatingTriple> triples,
                                    std::vector<std::int64_t> user_ids,
                                    std::vector<std::int64_t> item_ids) {
    SparseRatings s;
    s.user_ids_ = std::move(user_ids);
    s.item_ids_ = std::move(item_ids);
    s.build_id_maps();
    std::sort(triples.begin(), triples.end(), [](const RatingTriple& a, const RatingTriple& b) {
      return a.user != b.user ? a.user < b.user : a.item < b.item;
    });
    for (std::size_t i = 0; i < triples.size(); ++i) {
      const auto& t = triples[i];
      if (t.rating <= 0.0) throw DataError("rating must be strictly positive");
      if (i > 0 && triples[i - 1].user == t.user && triples[i - 1].item == t.item)
        throw DataError("duplicate (user,item) pair in rating set");
      if (!s.user_index_.count(t.user) || !s.item_index_.count(t.item))
        throw DataError("triple references id missing from index maps");
    }
    s.triples_ = std::move(triples);
    s.build_compressed();
    return s;
  }

  /// New matrix over the given users (rows re-indexed, ascending by id) and
  /// the same item index space. Users with no ratings keep an empty row.
  SparseRatings restrict_to_users(std::vector<std::int64_t> users) const {
    sort_unique(users);
    std::vector<RatingTriple> kept;
    for (std::int64_t u : users) {
      if (auto r = row_of(u)) {
        for (std::size_t p = row_ptr_[*r]; p < row_ptr_[*r + 1]; ++p)
          kept.push_back({u, item_ids_[static_cast<std::size_t>(col_[p])], val_[p]});
      }
    }
    return from_triples(std::move(kept), std::move(users), item_ids_);
  }

  std::size_t n_users() const { return user_ids_.size(); }
  std::size_t n_items() const { return item_ids_.size(); }
  std::size_t nnz() const { return triples_.size(); }
  bool empty() const { return triples_.empty(); }

  /// Triples in canonical (user id, item id) ascending order.
  const std::vector<RatingTriple>& triples() const { return triples_; }

  double sum() const {
    double s = 0.0;
    for (double v : val_) s += v;
    return s;
  }

  /// Arithmetic mean of the stored (non-zero) ratings.
  double mean() const {
    if (empty()) throw DataError("mean of empty rating set is undefined");
    return sum() / static_cast<double>(nnz());
  }

  std::int64_t user_id_at(std::size_t row) const { return user_ids_.at(row); }
  std::int64_t item_id_at(std::size_t col) const { return item_ids_.at(col); }
  const std::vector<std::int64_t>& user_ids() const { return user_ids_; }
  const std::vector<std::int64_t>& item_ids() const { return item_ids_; }

  std::optional<std::size_t> row_of(std::int64_t user) const {
    auto it = user_index_.find(user);
    if (it == user_index_.end()) return std::nullopt;
    return it->second;
  }
  std::optional<std::size_t> col_of(std::int64_t item) const {
    auto it = item_index_.find(item);
    if (it == item_index_.end()) return std::nullopt;
    return it->second;
  }

  // CSR view (dense row index -> column indices / values).
  std::span<const int> row_cols(std::size_t i) const {
    return {col_.data() + row_ptr_[i], row_ptr_[i + 1] - row_ptr_[i]};
  }
  std::span<const double> row_vals(std::size_t i) const {
    return {val_.data() + row_ptr_[i], row_ptr_[i + 1] - row_ptr_[i]};
  }
  std::size_t row_nnz(std::size_t i) const { return row_ptr_[i + 1] - row_ptr_[i]; }

  // CSC view (dense column index -> row indices / values).
  std::span<const int> col_rows(std::size_t j) const {
    return {row_.data() + col_ptr_[j], col_ptr_[j + 1] - col_ptr_[j]};
  }
  std::span<const double> col_vals(std::size_t j) const {
    return {cval_.data() + col_ptr_[j], col_ptr_[j + 1] - col_ptr_[j]};
  }
  std::size_t col_nnz(std::size_t j) const { return col_ptr_[j + 1] - col_ptr_[j]; }

  /// Non-zero count per dense row.
  std::vector<std::size_t> user_counts() const {
    std::vector<std::size_t> c(n_users());
    for (std::size_t i = 0; i < c.size(); ++i) c[i] = row_nnz(i);
    return c;
  }
  /// Non-zero count per dense column.
  std::vector<std::size_t> item_counts() const {
    std::vector<std::size_t> c(n_items());
    for (std::size_t j = 0; j < c.size(); ++j) c[j] = col_nnz(j);
    return c;
  }

  /// Dense copy; intended for small instances in tests and diagnostics.
  Matrix to_dense() const {
    Matrix X = Matrix::Zero(static_cast<Index>(n_users()), static_cast<Index>(n_items()));
    for (std::size_t i = 0; i < n_users(); ++i) {
      auto cols = row_cols(i);
      auto vals = row_vals(i);
      for (std::size_t p = 0; p < cols.size(); ++p)
        X(static_cast<Index>(i), cols[p]) = vals[p];
    }
    return X;
  }

 private:
  static void sort_unique(std::vector<std::int64_t>& v) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
  }

  void build_id_maps() {
    user_index_.clear();
    item_index_.clear();
    user_index_.reserve(user_ids_.size());
    item_index_.reserve(item_ids_.size());
    for (std::size_t i = 0; i < user_ids_.size(); ++i) {
      if (i > 0 && user_ids_[i] <= user_ids_[i - 1]) throw DataError("user ids not sorted unique");
      user_index_.emplace(user_ids_[i], i);
    }
    for (std::size_t j = 0; j < item_ids_.size(); ++j) {
      if (j > 0 && item_ids_[j] <= item_ids_[j - 1]) throw DataError("item ids not sorted unique");
      item_index_.emplace(item_ids_[j], j);
    }
  }

  void build_compressed() {
    const std::size_t n = n_users(), m = n_items();
    row_ptr_.assign(n + 1, 0);
    col_ptr_.assign(m + 1, 0);
    col_.resize(nnz());
    val_.resize(nnz());
    row_.resize(nnz());
    cval_.resize(nnz());
    for (const auto& t : triples_) {
      ++row_ptr_[user_index_.at(t.user) + 1];
      ++col_ptr_[item_index_.at(t.item) + 1];
    }
    for (std::size_t i = 0; i < n; ++i) row_ptr_[i + 1] += row_ptr_[i];
    for (std::size_t j = 0; j < m; ++j) col_ptr_[j + 1] += col_ptr_[j];
    // triples_ are sorted by (user, item), so CSR fills in order.
    std::vector<std::size_t> rfill(row_ptr_.begin(), row_ptr_.end() - 1);
    std::vector<std::size_t> cfill(col_ptr_.begin(), col_ptr_.end() - 1);
    for (const auto& t : triples_) {
      const std::size_t r = user_index_.at(t.user), c = item_index_.at(t.item);
      col_[rfill[r]] = static_cast<int>(c);
      val_[rfill[r]++] = t.rating;
      row_[cfill[c]] = static_cast<int>(r);
      cval_[cfill[c]++] = t.rating;
    }
  }

  std::vector<RatingTriple> triples_;
  std::vector<std::int64_t> user_ids_, item_ids_;
  std::unordered_map<std::int64_t, std::size_t> user_index_, item_index_;
  std::vector<std::size_t> row_ptr_, col_ptr_;
  std::vector<int> col_, row_;
  std::vector<double> val_, cval_;
};

}  // namespace fedsplit
