#pragma once

// Synthetic clustered tasks, label-wise Dirichlet partitioning across
// clients, and the 80/10/10 split.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "flame/errors.hpp"
#include "flame/moe_model.hpp"
#include "flame/random.hpp"

namespace flame {

struct Dataset {
  TaskKind task = TaskKind::classification;
  std::size_t class_count = 0;  // clusters; also the label range for regression
  std::vector<Example> examples;

  std::size_t size() const noexcept { return examples.size(); }
  bool empty() const noexcept { return examples.empty(); }
  std::size_t feature_dim() const noexcept { return examples.empty() ? 0 : examples.front().input.size(); }
  std::size_t target_dim() const noexcept { return examples.empty() ? 0 : examples.front().target.size(); }

  Dataset subset(std::span<const std::size_t> indices) const {
    Dataset d{task, class_count, {}};
    d.examples.reserve(indices.size());
    for (std::size_t i : indices) d.examples.push_back(examples.at(i));
    return d;
  }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> c(class_count, 0);
    for (const auto& e : examples) ++c.at(e.label);
    return c;
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct ClusteredTaskSpec {
  std::size_t classes = 4;
  std::size_t per_class = 100;
  std::size_t dim = 8;
  double spread = 0.5;
  double separation = 4.0;
  TaskKind task = TaskKind::classification;
  std::size_t target_dim = 4;  // regression only
};

/// Class centers at +/- separation along the coordinate axes (cycling through
/// dimensions, then flipping sign), so any two centers are at least
/// separation * sqrt(2) apart while classes <= 2 * dim.
inline std::vector<Vector> cluster_centers(std::size_t classes, std::size_t dim, double separation) {
  std::vector<Vector> centers(classes, Vector(dim, 0.0));
  for (std::size_t c = 0; c < classes; ++c) {
    const std::size_t axis = c % dim;
    const double sign = ((c / dim) % 2 == 0) ? 1.0 : -1.0;
    const double shell = 1.0 + static_cast<double>(c / (2 * dim));
    centers[c][axis] = sign * separation * shell;
  }
  return centers;
}

inline Dataset generate_clustered_task(const ClusteredTaskSpec& spec, std::uint64_t seed) {
  if (spec.classes < 2) throw DomainError("generate_clustered_task: need at least 2 classes");
  if (spec.per_class < 1) throw DomainError("generate_clustered_task: need at least 1 example per class");
  if (spec.dim < 1) throw DomainError("generate_clustered_task: dimension must be positive");
  if (spec.spread < 0.0 || !std::isfinite(spec.spread)) throw DomainError("generate_clustered_task: spread must be finite and >= 0");
  if (spec.task == TaskKind::regression && spec.target_dim < 1) throw DomainError("generate_clustered_task: target_dim must be positive");

  Rng rng(seed);
  const auto centers = cluster_centers(spec.classes, spec.dim, spec.separation);

  // Regression: each cluster has its own affine map, so targets are
  // piecewise linear in the input.
  std::vector<Matrix> maps;
  std::vector<Vector> offsets;
  if (spec.task == TaskKind::regression) {
    const double sd = 1.0 / std::sqrt(static_cast<double>(spec.dim));
    for (std::size_t c = 0; c < spec.classes; ++c) {
      Matrix t(spec.target_dim, spec.dim);
      for (auto& v : t.data()) v = rng.normal(0.0, sd);
      Vector b(spec.target_dim);
      for (auto& v : b) v = rng.normal(0.0, 0.5);
      maps.push_back(std::move(t));
      offsets.push_back(std::move(b));
    }
  }

  Dataset ds{spec.task, spec.classes, {}};
  ds.examples.reserve(spec.classes * spec.per_class);
  for (std::size_t c = 0; c < spec.classes; ++c) {
    for (std::size_t i = 0; i < spec.per_class; ++i) {
      Example ex;
      ex.label = c;
      ex.input = centers[c];
      for (auto& v : ex.input) v += spec.spread * rng.normal();
      if (spec.task == TaskKind::regression) {
        ex.target = matvec(maps[c], ex.input);
        for (std::size_t k = 0; k < ex.target.size(); ++k) ex.target[k] += offsets[c][k];
      }
      ds.examples.push_back(std::move(ex));
    }
  }
  return ds;
}

struct Partition {
  std::vector<std::vector<std::size_t>> client_indices;
  bool allows_empty = false;

  std::size_t client_count() const noexcept { return client_indices.size(); }
};

namespace detail {

/// Integer counts proportional to `shares` summing to `total`; leftover units
/// go to the largest fractional parts, ties to the lower index.
inline std::vector<std::size_t> largest_remainder(std::span<const double> shares, std::size_t total) {
  std::vector<std::size_t> counts(shares.size());
  std::vector<double> frac(shares.size());
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < shares.size(); ++i) {
    const double exact = shares[i] * static_cast<double>(total);
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    frac[i] = exact - static_cast<double>(counts[i]);
    assigned += counts[i];
  }
  // Guard against floor rounding above total when shares sum slightly > 1.
  while (assigned > total) {
    const auto it = std::max_element(counts.begin(), counts.end());
    --*it;
    --assigned;
  }
  std::vector<std::size_t> order(shares.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (std::size_t k = 0; assigned < total; k = (k + 1) % order.size()) {
    ++counts[order[k]];
    ++assigned;
  }
  return counts;
}

}  // namespace detail

/// Label-wise Dirichlet split: for each class, client shares are drawn from
/// Dirichlet(alpha * 1_N) and the class's shuffled examples are dealt out in
/// those proportions. Draws that leave a client empty are retried up to 10
/// times unless `allow_empty` is set.
inline Partition dirichlet_partition(const Dataset& ds, std::size_t clients, double alpha, Rng& rng, bool allow_empty = false) {
  if (clients < 1) throw DomainError("dirichlet_partition: need at least one client");
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw DomainError("dirichlet_partition: alpha must be positive and finite");
  if (ds.empty()) throw DomainError("dirichlet_partition: empty dataset");

  std::vector<std::vector<std::size_t>> by_class(ds.class_count);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class.at(ds.examples[i].label).push_back(i);

  constexpr int kAttempts = 10;
  for (int attempt = 0; attempt <= kAttempts; ++attempt) {
    Partition p{std::vector<std::vector<std::size_t>>(clients), allow_empty};
    for (const auto& members : by_class) {
      if (members.empty()) continue;
      std::vector<std::size_t> shuffled = members;
      rng.shuffle(shuffled);
      const std::vector<double> shares = rng.dirichlet(clients, alpha);
      const std::vector<std::size_t> counts = detail::largest_remainder(shares, shuffled.size());
      std::size_t cursor = 0;
      for (std::size_t c = 0; c < clients; ++c) {
        for (std::size_t k = 0; k < counts[c]; ++k) p.client_indices[c].push_back(shuffled[cursor++]);
      }
    }
    for (auto& idx : p.client_indices) std::sort(idx.begin(), idx.end());
    const bool has_empty = std::any_of(p.client_indices.begin(), p.client_indices.end(), [](const auto& v) { return v.empty(); });
    if (!has_empty || allow_empty) return p;
  }
  throw DomainError("dirichlet_partition: a client received no examples after " + std::to_string(kAttempts) +
                    " re-draws (alpha=" + std::to_string(alpha) + ", clients=" + std::to_string(clients) + ")");
}

struct SplitIndices {
  std::vector<std::size_t> train, val, test;
};

/// Shuffled 80/10/10 index split: floor(0.8n), floor(0.1n), remainder.
inline SplitIndices split_indices_80_10_10(std::size_t n, Rng& rng) {
  if (n < 10) throw DomainError("split_80_10_10: need at least 10 examples, got " + std::to_string(n));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  rng.shuffle(idx);
  const std::size_t n_train = (n * 8) / 10;
  const std::size_t n_val = n / 10;
  SplitIndices s;
  s.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), idx.end());
  return s;
}

struct DatasetSplit {
  Dataset train, val, test;
};

inline DatasetSplit split_80_10_10(const Dataset& ds, Rng& rng) {
  const SplitIndices s = split_indices_80_10_10(ds.size(), rng);
  return {ds.subset(s.train), ds.subset(s.val), ds.subset(s.test)};
}

// ---------------------------------------------------------------------------
// CSV: x_0..x_{d-1},label[,y_0..y_{t-1}]

inline void write_dataset_csv(const Dataset& ds, std::ostream& os) {
  const std::size_t d = ds.feature_dim();
  const std::size_t t = ds.task == TaskKind::regression ? ds.target_dim() : 0;
  for (std::size_t i = 0; i < d; ++i) os << "x_" << i << ',';
  os << "label";
  for (std::size_t i = 0; i < t; ++i) os << ",y_" << i;
  os << '\n';
  os << std::setprecision(17);
  for (const auto& ex : ds.examples) {
    for (double v : ex.input) os << v << ',';
    os << ex.label;
    for (double v : ex.target) os << ',' << v;
    os << '\n';
  }
}

inline void save_dataset_csv(const Dataset& ds, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path + " for writing");
  write_dataset_csv(ds, os);
  if (!os) throw IoError("failed writing " + path);
}

inline Dataset read_dataset_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw IoError("dataset CSV: missing header");
  std::vector<std::string> cols;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cols.push_back(cell);
  }
  std::size_t d = 0;
  while (d < cols.size() && cols[d].rfind("x_", 0) == 0) ++d;
  if (d == 0 || d >= cols.size() || cols[d] != "label") throw IoError("dataset CSV: header must be x_0..x_{d-1},label[,y_...]");
  const std::size_t t = cols.size() - d - 1;

  Dataset ds;
  ds.task = t > 0 ? TaskKind::regression : TaskKind::classification;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != cols.size()) throw IoError("dataset CSV: line " + std::to_string(line_no) + " has " + std::to_string(cells.size()) + " fields");
    Example ex;
    try {
      for (std::size_t i = 0; i < d; ++i) ex.input.push_back(std::stod(cells[i]));
      ex.label = static_cast<std::size_t>(std::stoull(cells[d]));
      for (std::size_t i = 0; i < t; ++i) ex.target.push_back(std::stod(cells[d + 1 + i]));
    } catch (const std::exception&) {
      throw IoError("dataset CSV: unparsable value on line " + std::to_string(line_no));
    }
    ds.class_count = std::max(ds.class_count, ex.label + 1);
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

inline Dataset load_dataset_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw NotFoundError("cannot open " + path);
  return read_dataset_csv(is);
}

}  // namespace flame
