// crowdqc/gbm.hpp
//
// Squared-loss gradient boosting over depth-limited regression trees.

#ifndef CROWDQC_GBM_HPP_
#define CROWDQC_GBM_HPP_

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "crowdqc/error.hpp"

namespace crowdqc {

/// feature < 0 marks a leaf. Internal nodes send x[feature] <= threshold left.
struct TreeNode {
  int feature = -1;
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double value = 0.0;

  bool operator==(const TreeNode &) const = default;
};

/// Nodes stored in pre-order; node 0 is the root.
struct RegressionTree {
  std::vector<TreeNode> nodes;

  double predict(std::span<const double> x) const {
    int i = 0;
    while (nodes[static_cast<std::size_t>(i)].feature >= 0) {
      const auto &n = nodes[static_cast<std::size_t>(i)];
      i = x[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left : n.right;
    }
    return nodes[static_cast<std::size_t>(i)].value;
  }

  int depth(int node = 0) const {
    const auto &n = nodes[static_cast<std::size_t>(node)];
    if (n.feature < 0) return 0;
    return 1 + std::max(depth(n.left), depth(n.right));
  }

  bool operator==(const RegressionTree &) const = default;
};

struct GbmOptions {
  int rounds = 100;
  int max_depth = 3;
  double learning_rate = 0.1;
  int min_samples_leaf = 5;
};

struct GbmModel {
  std::vector<std::string> feature_names;
  double initial_prediction = 0.0;
  double learning_rate = 0.1;
  int max_depth = 3;
  std::vector<RegressionTree> trees;
  /// Training MSE before any tree (index 0) and after each round.
  std::vector<double> training_loss;

  bool operator==(const GbmModel &o) const {
    return feature_names == o.feature_names && initial_prediction == o.initial_prediction &&
           learning_rate == o.learning_rate && max_depth == o.max_depth && trees == o.trees;
  }
};

namespace detail {

class TreeBuilder {
 public:
  TreeBuilder(std::span<const std::vector<double>> rows, std::span<const double> residual,
              const GbmOptions &opt)
      : rows_(rows), residual_(residual), opt_(opt) {}

  RegressionTree build() {
    std::vector<std::size_t> idx(rows_.size());
    std::iota(idx.begin(), idx.end(), 0);
    RegressionTree tree;
    grow(tree, idx, 0);
    return tree;
  }

 private:
  struct Split {
    int feature = -1;
    double threshold = 0.0;
    double gain = 0.0;
  };

  int grow(RegressionTree &tree, std::vector<std::size_t> &idx, int depth) {
    const int node = static_cast<int>(tree.nodes.size());
    tree.nodes.emplace_back();
    double sum = 0.0;
    for (auto i : idx) sum += residual_[i];
    tree.nodes.back().value = sum / static_cast<double>(idx.size());

    if (depth >= opt_.max_depth) return node;
    Split s = best_split(idx, sum);
    if (s.feature < 0) return node;

    std::vector<std::size_t> left, right;
    for (auto i : idx)
      (rows_[i][static_cast<std::size_t>(s.feature)] <= s.threshold ? left : right).push_back(i);
    idx.clear();
    idx.shrink_to_fit();
    tree.nodes[static_cast<std::size_t>(node)].feature = s.feature;
    tree.nodes[static_cast<std::size_t>(node)].threshold = s.threshold;
    int l = grow(tree, left, depth + 1);
    tree.nodes[static_cast<std::size_t>(node)].left = l;
    int r = grow(tree, right, depth + 1);
    tree.nodes[static_cast<std::size_t>(node)].right = r;
    return node;
  }

  Split best_split(std::vector<std::size_t> &idx, double total) const {
    Split best;
    const std::size_t n = idx.size();
    const std::size_t min_leaf = static_cast<std::size_t>(std::max(1, opt_.min_samples_leaf));
    if (n < 2 * min_leaf) return best;
    const double base = total * total / static_cast<double>(n);
    const std::size_t dims = rows_[idx[0]].size();
    std::vector<std::size_t> order(idx);
    for (std::size_t f = 0; f < dims; ++f) {
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return rows_[a][f] < rows_[b][f];
      });
      double left_sum = 0.0;
      for (std::size_t k = 1; k < n; ++k) {
        left_sum += residual_[order[k - 1]];
        double lo = rows_[order[k - 1]][f];
        double hi = rows_[order[k]][f];
        if (k < min_leaf || n - k < min_leaf || !(lo < hi)) continue;
        double right_sum = total - left_sum;
        double gain = left_sum * left_sum / static_cast<double>(k) +
                      right_sum * right_sum / static_cast<double>(n - k) - base;
        if (gain > best.gain * (1.0 + 1e-12) + 1e-12) {
          double mid = lo + (hi - lo) / 2.0;
          best = {static_cast<int>(f), mid < hi ? mid : lo, gain};
        }
      }
    }
    return best;
  }

  std::span<const std::vector<double>> rows_;
  std::span<const double> residual_;
  const GbmOptions &opt_;
};

inline double mean_squared(std::span<const double> r) {
  double s = 0.0;
  for (double v : r) s += v * v;
  return s / static_cast<double>(r.size());
}

}  // namespace detail

/// Prediction using the first `n_trees` trees (all when n_trees < 0),
/// without the lower clamp.
inline double predict_raw(const GbmModel &model, std::span<const double> row, int n_trees = -1) {
  std::size_t n = n_trees < 0 ? model.trees.size()
                              : std::min(model.trees.size(), static_cast<std::size_t>(n_trees));
  double p = model.initial_prediction;
  for (std::size_t t = 0; t < n; ++t) p += model.learning_rate * model.trees[t].predict(row);
  return p;
}

inline double predict_expected_errors(const GbmModel &model, std::span<const double> row) {
  return std::max(0.0, predict_raw(model, row));
}

inline GbmModel train_gbm(std::span<const std::vector<double>> rows,
                          std::span<const double> targets, const GbmOptions &opt = {},
                          std::vector<std::string> feature_names = {}) {
  if (rows.empty()) throw DataError("cannot train a boosted model on zero rows");
  if (rows.size() != targets.size()) throw InvariantError("one target per row required");
  if (!(opt.learning_rate > 0.0 && opt.learning_rate <= 1.0))
    throw UsageError("learning rate must lie in (0, 1]");
  if (opt.max_depth < 0 || opt.rounds < 0) throw UsageError("negative depth or round count");
  for (const auto &r : rows)
    if (r.size() != rows[0].size()) throw DataError("ragged feature rows");

  GbmModel model;
  model.feature_names = std::move(feature_names);
  model.learning_rate = opt.learning_rate;
  model.max_depth = opt.max_depth;
  model.initial_prediction =
      std::accumulate(targets.begin(), targets.end(), 0.0) / static_cast<double>(targets.size());

  std::vector<double> residual(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i)
    residual[i] = targets[i] - model.initial_prediction;
  model.training_loss.push_back(detail::mean_squared(residual));

  for (int round = 0; round < opt.rounds; ++round) {
    RegressionTree tree = detail::TreeBuilder(rows, residual, opt).build();
    for (std::size_t i = 0; i < rows.size(); ++i)
      residual[i] -= opt.learning_rate * tree.predict(rows[i]);
    model.trees.push_back(std::move(tree));
    model.training_loss.push_back(detail::mean_squared(residual));
  }
  return model;
}

// ---------------------------------------------------------------------------

inline void save_gbm(std::ostream &out, const GbmModel &m) {
  std::ostringstream s;
  s.precision(17);
  s << "crowdqc-gbm 1\n";
  s << "features " << m.feature_names.size();
  for (const auto &f : m.feature_names) s << ' ' << f;
  s << "\ninitial_prediction " << m.initial_prediction << "\nlearning_rate " << m.learning_rate
    << "\nmax_depth " << m.max_depth << "\ntrees " << m.trees.size() << '\n';
  for (const auto &t : m.trees) {
    s << "tree " << t.nodes.size() << '\n';
    for (const auto &n : t.nodes)
      s << n.feature << ' ' << n.threshold << ' ' << n.left << ' ' << n.right << ' ' << n.value
        << '\n';
  }
  out << s.str();
}

inline GbmModel load_gbm(std::istream &in) {
  auto expect = [&](const std::string &key) {
    std::string got;
    if (!(in >> got) || got != key)
      throw DataError("boosted model: expected '" + key + "', got '" + got + "'");
  };
  GbmModel m;
  int version = 0;
  expect("crowdqc-gbm");
  in >> version;
  if (version != 1) throw DataError("boosted model: unsupported version");
  std::size_t count = 0;
  expect("features");
  in >> count;
  m.feature_names.resize(count);
  for (auto &f : m.feature_names) in >> f;
  expect("initial_prediction");
  in >> m.initial_prediction;
  expect("learning_rate");
  in >> m.learning_rate;
  expect("max_depth");
  in >> m.max_depth;
  expect("trees");
  in >> count;
  m.trees.resize(count);
  for (auto &t : m.trees) {
    std::size_t nodes = 0;
    expect("tree");
    in >> nodes;
    t.nodes.resize(nodes);
    for (auto &n : t.nodes) in >> n.feature >> n.threshold >> n.left >> n.right >> n.value;
    for (const auto &n : t.nodes)
      if (n.feature >= 0 && (n.left <= 0 || n.right <= 0 ||
                             static_cast<std::size_t>(std::max(n.left, n.right)) >= nodes))
        throw DataError("boosted model: bad child index");
  }
  if (!in) throw DataError("boosted model: truncated file");
  return m;
}

}  // namespace crowdqc

#endif  // CROWDQC_GBM_HPP_
