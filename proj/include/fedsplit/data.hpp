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

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "fedsplit/random.hpp"
#include "fedsplit/sparse_ratings.hpp"

namespace fedsplit::data {

/// Rating file layouts: `user<TAB>item<TAB>rating<TAB>timestamp`,
/// `user,item,rating[,timestamp]` (optional header line), and
/// `user::item::rating::timestamp`. Auto sniffs the separator from the first
/// data line.
enum class RatingsFormat { Tab, Csv, Colons, Auto };

inline const char* to_string(RatingsFormat f) {
  switch (f) {
    case RatingsFormat::Tab: return "tab";
    case RatingsFormat::Csv: return "csv";
    case RatingsFormat::Colons: return "colons";
    default: return "auto";
  }
}

inline RatingsFormat ratings_format_from_string(std::string_view s) {
  if (s == "tab") return RatingsFormat::Tab;
  if (s == "csv") return RatingsFormat::Csv;
  if (s == "colons") return RatingsFormat::Colons;
  if (s == "auto" || s.empty()) return RatingsFormat::Auto;
  throw DataError("unknown ratings format: " + std::string(s));
}

/// Train/validation/test triple sets sharing one index space. Triples are
/// disjoint across members and every user/item appearing in validation or
/// test has at least one training rating.
struct SplitSet {
  SparseRatings train;
  SparseRatings validation;
  SparseRatings test;
};

/// Assignment of every user to exactly one group, group ids 1..N.
class GroupPartition {
 public:
  GroupPartition() = default;
  explicit GroupPartition(std::vector<std::vector<std::int64_t>> groups)
      : groups_(std::move(groups)) {
    for (std::size_t g = 0; g < groups_.size(); ++g)
      for (std::int64_t u : groups_[g]) assignments_[u] = static_cast<int>(g) + 1;
  }

  int n_groups() const { return static_cast<int>(groups_.size()); }
  /// Member user ids of group g (1-based), ascending.
  const std::vector<std::int64_t>& members(int g) const { return groups_.at(static_cast<std::size_t>(g - 1)); }
  int group_of(std::int64_t user) const { return assignments_.at(user); }
  const std::map<std::int64_t, int>& assignments() const { return assignments_; }

 private:
  std::vector<std::vector<std::int64_t>> groups_;
  std::map<std::int64_t, int> assignments_;
};

namespace detail {

inline bool split_fields(std::string_view line, RatingsFormat fmt, std::vector<std::string_view>& out,
                         std::size_t min_fields = 3) {
  out.clear();
  if (fmt == RatingsFormat::Colons) {
    std::size_t pos = 0;
    while (true) {
      const std::size_t next = line.find("::", pos);
      if (next == std::string_view::npos) {
        out.push_back(line.substr(pos));
        break;
      }
      out.push_back(line.substr(pos, next - pos));
      pos = next + 2;
    }
    return out.size() >= min_fields;
  }
  const char sep = fmt == RatingsFormat::Tab ? '\t' : ',';
  std::size_t pos = 0;
  while (true) {
    const std::size_t next = line.find(sep, pos);
    if (next == std::string_view::npos) {
      out.push_back(line.substr(pos));
      break;
    }
    out.push_back(line.substr(pos, next - pos));
    pos = next + 1;
  }
  return out.size() >= min_fields;
}

inline bool parse_i64(std::string_view s, std::int64_t& v) {
  const char* b = s.data();
  const char* e = s.data() + s.size();
  auto [p, ec] = std::from_chars(b, e, v);
  return ec == std::errc{} && p == e;
}

inline bool parse_f64(std::string_view s, double& v) {
  const char* b = s.data();
  const char* e = s.data() + s.size();
  auto [p, ec] = std::from_chars(b, e, v);
  return ec == std::errc{} && p == e;
}

inline RatingsFormat sniff_format(std::string_view line) {
  if (line.find("::") != std::string_view::npos) return RatingsFormat::Colons;
  if (line.find('\t') != std::string_view::npos) return RatingsFormat::Tab;
  return RatingsFormat::Csv;
}

inline std::string_view strip_cr(std::string_view s) {
  if (!s.empty() && s.back() == '\r') s.remove_suffix(1);
  return s;
}

}  // namespace detail

/// Load a MovieLens-style rating file. Duplicate (user,item) pairs keep the
/// last occurrence. A csv header line is tolerated. Ratings must lie in
/// [0.5, 5].
inline SparseRatings load_movielens(const std::filesystem::path& path,
                                    RatingsFormat format = RatingsFormat::Auto) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open rating file: " + path.string());

  std::vector<RatingTriple> triples;
  std::map<std::pair<std::int64_t, std::int64_t>, std::size_t> seen;  // keep-last dedup
  std::vector<std::string_view> fields;
  std::string line;
  std::size_t lineno = 0;
  RatingsFormat fmt = format;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string_view sv = detail::strip_cr(line);
    if (sv.empty()) continue;
    if (fmt == RatingsFormat::Auto) fmt = detail::sniff_format(sv);
    if (!detail::split_fields(sv, fmt, fields))
      throw ParseError("expected at least 3 fields", lineno);
    std::int64_t user = 0, item = 0;
    double rating = 0.0;
    if (!detail::parse_i64(fields[0], user)) {
      // ml-latest csv files begin with a "userId,movieId,rating,timestamp" header.
      if (lineno == 1 && fmt == RatingsFormat::Csv) continue;
      throw ParseError("bad user id '" + std::string(fields[0]) + "'", lineno);
    }
    if (!detail::parse_i64(fields[1], item))
      throw ParseError("bad item id '" + std::string(fields[1]) + "'", lineno);
    if (!detail::parse_f64(fields[2], rating))
      throw ParseError("bad rating '" + std::string(fields[2]) + "'", lineno);
    if (rating < 0.5 || rating > 5.0)
      throw ParseError("rating outside [0.5, 5]", lineno);
    const auto key = std::make_pair(user, item);
    if (auto it = seen.find(key); it != seen.end()) {
      triples[it->second].rating = rating;
    } else {
      seen.emplace(key, triples.size());
      triples.push_back({user, item, rating});
    }
  }
  if (triples.empty()) throw DataError("empty rating file: " + path.string());
  return SparseRatings::from_triples(std::move(triples));
}

enum class HalfStarMode {
  CeilToInteger,  // every half-star rating is rounded up (3.5 -> 4)
  OnlyHalfToOne,  // literal reading: only 0.5 becomes 1, other values untouched
};

/// Filter users with fewer than min_user_ratings ratings, then items with
/// fewer than min_item_ratings ratings (one pass each, in that order; item
/// removal may legitimately leave some users below the threshold afterwards),
/// then round half-star ratings up.
inline SparseRatings preprocess(const SparseRatings& raw, std::size_t min_user_ratings = 20,
                                std::size_t min_item_ratings = 20,
                                HalfStarMode half_star = HalfStarMode::CeilToInteger) {
  if (raw.empty()) throw DataError("preprocess requires a non-empty dataset");

  const auto ucount = raw.user_counts();
  std::vector<char> user_kept(raw.n_users());
  for (std::size_t i = 0; i < ucount.size(); ++i) user_kept[i] = ucount[i] >= min_user_ratings;

  // Item counts measured after user removal.
  std::vector<std::size_t> icount(raw.n_items(), 0);
  for (std::size_t i = 0; i < raw.n_users(); ++i) {
    if (!user_kept[i]) continue;
    for (int j : raw.row_cols(i)) ++icount[static_cast<std::size_t>(j)];
  }

  std::vector<RatingTriple> kept;
  for (const auto& t : raw.triples()) {
    const std::size_t r = *raw.row_of(t.user), c = *raw.col_of(t.item);
    if (!user_kept[r] || icount[c] < min_item_ratings) continue;
    double v = t.rating;
    if (half_star == HalfStarMode::CeilToInteger) {
      v = std::ceil(v);
    } else if (v == 0.5) {
      v = 1.0;
    }
    kept.push_back({t.user, t.item, v});
  }
  if (kept.empty()) throw DataError("dataset is empty after preprocessing");
  return SparseRatings::from_triples(std::move(kept));
}

/// Seeded uniform split into train/validation/test. Test takes test_frac of
/// all triples; validation takes val_frac of the remaining training triples.
/// A post-hoc repair moves triples back to train until every user and item
/// seen in validation or test has at least one training rating.
inline SplitSet split(const SparseRatings& ratings, double test_frac = 0.2, double val_frac = 0.2,
                      std::uint64_t seed = 0) {
  if (!(test_frac > 0.0 && test_frac < 1.0) || !(val_frac > 0.0 && val_frac < 1.0))
    throw DataError("split fractions must lie in (0,1)");
  const std::size_t n = ratings.nnz();
  const auto n_test = static_cast<std::size_t>(std::llround(test_frac * static_cast<double>(n)));
  const auto n_val = static_cast<std::size_t>(std::llround(val_frac * static_cast<double>(n - n_test)));
  if (n_test + n_val >= n) throw DataError("split fractions leave no training data");

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);

  // 0 = train, 1 = validation, 2 = test
  std::vector<char> bucket(n, 0);
  for (std::size_t i = 0; i < n_test; ++i) bucket[order[i]] = 2;
  for (std::size_t i = n_test; i < n_test + n_val; ++i) bucket[order[i]] = 1;

  const auto& triples = ratings.triples();
  std::vector<std::size_t> train_user(ratings.n_users(), 0), train_item(ratings.n_items(), 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (bucket[i] != 0) continue;
    ++train_user[*ratings.row_of(triples[i].user)];
    ++train_item[*ratings.col_of(triples[i].item)];
  }
  // Repair in canonical triple order: deterministic, converges because moves
  // only ever add to train.
  bool changed = true;
  while (changed) {
    changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      if (bucket[i] == 0) continue;
      const std::size_t r = *ratings.row_of(triples[i].user);
      const std::size_t c = *ratings.col_of(triples[i].item);
      if (train_user[r] == 0 || train_item[c] == 0) {
        bucket[i] = 0;
        ++train_user[r];
        ++train_item[c];
        changed = true;
      }
    }
  }

  std::vector<RatingTriple> tr, va, te;
  for (std::size_t i = 0; i < n; ++i) {
    (bucket[i] == 0 ? tr : bucket[i] == 1 ? va : te).push_back(triples[i]);
  }
  if (tr.empty()) throw DataError("split infeasible: no training triples after repair");

  SplitSet s;
  s.train = SparseRatings::from_triples(std::move(tr), ratings.user_ids(), ratings.item_ids());
  s.validation = SparseRatings::from_triples(std::move(va), ratings.user_ids(), ratings.item_ids());
  s.test = SparseRatings::from_triples(std::move(te), ratings.user_ids(), ratings.item_ids());
  return s;
}

/// Shuffle users by seed, then cut into groups with sizes drawn uniformly
/// from [min_size, max_size]. A final remainder smaller than min_size is
/// merged into the previous group.
inline GroupPartition partition_groups(std::vector<std::int64_t> users, std::size_t min_size = 3,
                                       std::size_t max_size = 30, std::uint64_t seed = 0) {
  if (users.size() < min_size)
    throw DataError("cannot partition " + std::to_string(users.size()) + " users into groups of at least " +
                    std::to_string(min_size));
  Rng rng(seed);
  rng.shuffle(users);

  std::vector<std::vector<std::int64_t>> groups;
  std::size_t pos = 0;
  while (pos < users.size()) {
    auto size = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(min_size),
                                                         static_cast<std::int64_t>(max_size)));
    size = std::min(size, users.size() - pos);
    groups.emplace_back(users.begin() + static_cast<std::ptrdiff_t>(pos),
                        users.begin() + static_cast<std::ptrdiff_t>(pos + size));
    pos += size;
  }
  if (groups.size() > 1 && groups.back().size() < min_size) {
    auto tail = std::move(groups.back());
    groups.pop_back();
    groups.back().insert(groups.back().end(), tail.begin(), tail.end());
  }
  for (auto& g : groups) std::sort(g.begin(), g.end());
  return GroupPartition(std::move(groups));
}

/// Canonical `user,item,rating` snapshot, one triple per line in canonical
/// order; byte-identical across reruns.
inline void write_snapshot(const SparseRatings& ratings, const std::filesystem::path& path,
                           const std::string& config_hash = {}) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write snapshot: " + path.string());
  if (!config_hash.empty()) out << "# config " << config_hash << "\n";
  out << "user,item,rating\n";
  std::ostringstream row;
  for (const auto& t : ratings.triples()) {
    row.str("");
    row << t.user << ',' << t.item << ',' << t.rating;
    out << row.str() << '\n';
  }
  if (!out) throw IoError("failed writing snapshot: " + path.string());
}

/// Read a snapshot produced by write_snapshot (comment and header tolerated).
inline SparseRatings read_snapshot(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open snapshot: " + path.string());
  std::vector<RatingTriple> triples;
  std::vector<std::string_view> fields;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string_view sv = detail::strip_cr(line);
    if (sv.empty() || sv.front() == '#') continue;
    if (!detail::split_fields(sv, RatingsFormat::Csv, fields))
      throw ParseError("expected 3 fields", lineno);
    RatingTriple t;
    if (!detail::parse_i64(fields[0], t.user)) {
      if (lineno <= 2) continue;  // header
      throw ParseError("bad user id", lineno);
    }
    if (!detail::parse_i64(fields[1], t.item)) throw ParseError("bad item id", lineno);
    if (!detail::parse_f64(fields[2], t.rating)) throw ParseError("bad rating", lineno);
    triples.push_back(t);
  }
  if (triples.empty()) throw DataError("empty snapshot: " + path.string());
  return SparseRatings::from_triples(std::move(triples));
}

/// Group assignment CSV: `user,group`.
inline void write_partition(const GroupPartition& partition, const std::filesystem::path& path,
                            const std::string& config_hash = {}) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write partition: " + path.string());
  if (!config_hash.empty()) out << "# config " << config_hash << "\n";
  out << "user,group\n";
  for (const auto& [user, group] : partition.assignments()) out << user << ',' << group << '\n';
}

inline GroupPartition read_partition(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open partition: " + path.string());
  std::map<int, std::vector<std::int64_t>> by_group;
  std::vector<std::string_view> fields;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string_view sv = detail::strip_cr(line);
    if (sv.empty() || sv.front() == '#') continue;
    if (!detail::split_fields(sv, RatingsFormat::Csv, fields, 2))
      throw ParseError("expected 2 fields", lineno);
    std::int64_t user = 0, group = 0;
    if (!detail::parse_i64(fields[0], user)) {
      if (lineno <= 2) continue;  // header
      throw ParseError("bad user id", lineno);
    }
    if (!detail::parse_i64(fields[1], group)) throw ParseError("bad group id", lineno);
    by_group[static_cast<int>(group)].push_back(user);
  }
  if (by_group.empty()) throw DataError("empty partition: " + path.string());
  std::vector<std::vector<std::int64_t>> groups;
  int expect = 1;
  for (auto& [g, members] : by_group) {
    if (g != expect++) throw DataError("partition group ids must be contiguous from 1");
    groups.push_back(std::move(members));
  }
  return GroupPartition(std::move(groups));
}

}  // namespace fedsplit::data
