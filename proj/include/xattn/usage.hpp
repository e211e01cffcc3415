#pragma once

// Expert-usage statistics: run a dataset through the model, count how often
// the router selects each expert in each routed layer, and serialize the
// counts. Pruning consumes these counts to decide which experts survive.

#include <json.hpp>

#include <algorithm>
#include <string>
#include <vector>

#include "xattn/training.hpp"

namespace xattn {

template <class S>
std::vector<LayerUsage> collect_usage(Model<S>& model, const Dataset& ds,
                                      Index batch_size) {
  std::vector<LayerUsage> usage;
  accuracy(model, ds, batch_size, &usage);
  return usage;
}

// The m most-used experts, most used first; ties go to the lower index.
inline std::vector<Index> select_retained(const LayerUsage& u, Index m) {
  const Index n = static_cast<Index>(u.counts.size());
  if (m < 1 || m > n)
    throw UsageError("select_retained: m=" + std::to_string(m) + " with " +
                     std::to_string(n) + " experts");
  std::vector<Index> order(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  std::stable_sort(order.begin(), order.end(), [&u](Index a, Index b) {
    return u.counts[static_cast<std::size_t>(a)] >
           u.counts[static_cast<std::size_t>(b)];
  });
  order.resize(static_cast<std::size_t>(m));
  return order;
}

inline nlohmann::json usage_to_json(const std::vector<LayerUsage>& usage,
                                    Index top_k, const std::string& dataset) {
  nlohmann::json layers = nlohmann::json::array();
  for (const LayerUsage& u : usage) {
    layers.push_back({{"layer", u.layer},
                      {"counts", u.counts},
                      {"total", u.total}});
  }
  return nlohmann::json{
      {"k", top_k}, {"dataset", dataset}, {"layers", layers}};
}

inline std::vector<LayerUsage> usage_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("layers") || !j["layers"].is_array())
    throw IoError("usage file: expected an object with a 'layers' array");
  std::vector<LayerUsage> out;
  for (const auto& item : j["layers"]) {
    LayerUsage u;
    u.layer = item.at("layer").get<Index>();
    u.counts = item.at("counts").get<std::vector<Index>>();
    u.total = item.at("total").get<Index>();
    Index sum = 0;
    for (Index c : u.counts) {
      if (c < 0) throw IoError("usage file: negative count");
      sum += c;
    }
    if (sum != u.total)
      throw IoError("usage file: counts for layer " + std::to_string(u.layer) +
                    " sum to " + std::to_string(sum) + ", total says " +
                    std::to_string(u.total));
    out.push_back(std::move(u));
  }
  return out;
}

}  // namespace xattn
