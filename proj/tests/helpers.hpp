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

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "fedsplit/random.hpp"
#include "fedsplit/sparse_ratings.hpp"

namespace testutil {

#ifndef FEDSPLIT_SOURCE_DIR
#define FEDSPLIT_SOURCE_DIR "."
#endif

/// Data directory: $FEDSPLIT_DATA_DIR, else <repo>/data.
inline std::filesystem::path data_dir() {
  if (const char* env = std::getenv("FEDSPLIT_DATA_DIR")) return env;
  return std::filesystem::path(FEDSPLIT_SOURCE_DIR) / "data";
}

inline std::optional<std::filesystem::path> movielens_small_path() {
  auto p = data_dir() / "ml-latest-small" / "ratings.csv";
  if (std::filesystem::exists(p)) return p;
  return std::nullopt;
}

inline std::optional<std::filesystem::path> movielens_1m_path() {
  auto p = data_dir() / "ml-1m" / "ratings.dat";
  if (std::filesystem::exists(p)) return p;
  return std::nullopt;
}

/// Self-deleting scratch directory under the system temp dir.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    auto base = std::filesystem::temp_directory_path();
    for (int i = 0;; ++i) {
      path_ = base / (tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(i));
      if (std::filesystem::create_directory(path_)) break;
    }
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path file(const std::string& name) const { return path_ / name; }

  std::filesystem::path write_file(const std::string& name, const std::string& content) const {
    auto p = file(name);
    std::ofstream out(p);
    out << content;
    return p;
  }

 private:
  std::filesystem::path path_;
};

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline fedsplit::SparseRatings make_ratings(std::vector<fedsplit::RatingTriple> triples) {
  return fedsplit::SparseRatings::from_triples(std::move(triples));
}

/// Synthetic explicit-feedback dataset with planted low-rank structure plus
/// user/item biases: ratings are round(W H + b_W + b_H + mu + noise) clamped
/// to 1..5, observed at the requested density.
inline fedsplit::SparseRatings synthetic_ratings(std::size_t n_users, std::size_t n_items,
                                                 double density, std::uint64_t seed,
                                                 int rank = 4, double noise = 0.25) {
  fedsplit::Rng rng(seed);
  std::vector<double> wu(n_users * static_cast<std::size_t>(rank));
  std::vector<double> hi(n_items * static_cast<std::size_t>(rank));
  for (auto& v : wu) v = rng.uniform(0.0, 1.2);
  for (auto& v : hi) v = rng.uniform(0.0, 1.2);
  std::vector<double> bu(n_users), bi(n_items);
  for (auto& v : bu) v = rng.uniform(-0.6, 0.6);
  for (auto& v : bi) v = rng.uniform(-0.6, 0.6);

  auto rate = [&](std::size_t u, std::size_t i) {
    double dot = 0.0;
    for (int p = 0; p < rank; ++p)
      dot += wu[u * static_cast<std::size_t>(rank) + static_cast<std::size_t>(p)] *
             hi[i * static_cast<std::size_t>(rank) + static_cast<std::size_t>(p)];
    const double raw = 1.2 * dot + bu[u] + bi[i] + 2.2 + rng.uniform(-noise, noise);
    return std::clamp(std::round(raw), 1.0, 5.0);
  };
  std::vector<fedsplit::RatingTriple> triples;
  for (std::size_t u = 0; u < n_users; ++u) {
    const std::size_t row_start = triples.size();
    for (std::size_t i = 0; i < n_items; ++i) {
      if (rng.uniform() >= density) continue;
      triples.push_back({static_cast<std::int64_t>(u + 1), static_cast<std::int64_t>(i + 1), rate(u, i)});
    }
    if (triples.size() == row_start) {  // keep every user non-empty
      const std::size_t i = u % n_items;
      triples.push_back({static_cast<std::int64_t>(u + 1), static_cast<std::int64_t>(i + 1), rate(u, i)});
    }
  }
  return fedsplit::SparseRatings::from_triples(std::move(triples));
}

}  // namespace testutil
