#pragma once

// Depth-weighted rank-deficiency score of a CNN: for each conv layer the rank
// of the stacked weight/gradient operator is compared against the number of
// unknowns, shallow layers weighted more heavily.
//
//   c(M) = sum_i (d - (i-1))/d * (rank(U_i) - n_i)
//
// Zero means every layer's system has full column rank at the probe point.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "gradleak/linop.hpp"
#include "gradleak/net.hpp"
#include "gradleak/tensor.hpp"
#include "json.hpp"

namespace gradleak::secmetric {

struct LayerRank {
  std::size_t index = 0;  // 1-based
  std::size_t rows = 0;
  std::size_t cols = 0;   // n_i
  std::size_t rank = 0;
  double weight = 0.0;
  double contribution = 0.0;
};

struct ProbeInfo {
  std::optional<std::uint64_t> seed;
  std::string image;  // e.g. "cifar:data.bin#0"
  std::size_t label = 0;
};

struct MetricReport {
  std::vector<LayerRank> layers;
  double total = 0.0;
  bool upper_bound = false;
  ProbeInfo probe;
};

inline double depth_weight(std::size_t index, std::size_t depth) {
  return static_cast<double>(depth - (index - 1)) / static_cast<double>(depth);
}

inline void finish(MetricReport& rep) {
  rep.total = 0.0;
  for (auto& l : rep.layers) {
    l.contribution = l.weight * (static_cast<double>(l.rank) - static_cast<double>(l.cols));
    rep.total += l.contribution;
  }
}

// Ranks at the true per-layer output gradients of (probe_image, probe_label).
inline MetricReport security_metric(const net::ModelSpec& spec, const net::ModelWeights& weights,
                                    const TensorMap& probe_image, std::size_t probe_label,
                                    double rel_tolerance = linop::kDefaultRankTolerance) {
  const auto r = net::loss_and_gradients(spec, weights, probe_image, probe_label);
  const std::size_t depth = spec.depth();
  MetricReport rep;
  rep.probe.label = probe_label;
  for (std::size_t li = 0; li < depth; ++li) {
    const auto& geom = spec.conv_layers[li].geometry;
    const auto u = linop::DenseMatrix::vstack(linop::weight_circulant(weights.kernels[li], geom),
                                              linop::gradient_circulant(r.backward.grad_pre_activation[li], geom));
    LayerRank l;
    l.index = li + 1;
    l.rows = u.rows();
    l.cols = u.cols();
    l.rank = linop::numerical_rank(u, rel_tolerance);
    l.weight = depth_weight(l.index, depth);
    rep.layers.push_back(l);
  }
  finish(rep);
  return rep;
}

// Probe-free structural bound: rank(U_i) <= min(rows_i, n_i) where the
// gradient block contributes at most |kernel| rows.
inline MetricReport upper_bound_metric(const net::ModelSpec& spec) {
  spec.validate();
  const std::size_t depth = spec.depth();
  MetricReport rep;
  rep.upper_bound = true;
  for (std::size_t li = 0; li < depth; ++li) {
    const auto& geom = spec.conv_layers[li].geometry;
    LayerRank l;
    l.index = li + 1;
    l.rows = geom.output_size() + geom.kernel_entries();
    l.cols = geom.input_size();
    l.rank = std::min(l.rows, l.cols);
    l.weight = depth_weight(l.index, depth);
    rep.layers.push_back(l);
  }
  finish(rep);
  return rep;
}

inline nlohmann::json to_json(const MetricReport& rep) {
  nlohmann::json j;
  j["total"] = rep.total;
  j["upper_bound"] = rep.upper_bound;
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : rep.layers) {
    layers.push_back({{"index", l.index},
                      {"rows", l.rows},
                      {"cols", l.cols},
                      {"rank", l.rank},
                      {"deficiency", l.cols - l.rank},
                      {"weight", l.weight},
                      {"contribution", l.contribution}});
  }
  j["layers"] = layers;
  if (!rep.upper_bound) {
    nlohmann::json probe{{"label", rep.probe.label}, {"image", rep.probe.image}};
    if (rep.probe.seed) probe["seed"] = *rep.probe.seed;
    j["probe"] = probe;
  }
  return j;
}

}  // namespace gradleak::secmetric
