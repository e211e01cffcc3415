#pragma once

// Usage-driven pruning: every routed layer keeps its m most-selected
// experts and becomes a deterministic layer. The router is dropped
// entirely, which has_router_params() makes checkable: after pruning, no
// parameter name anywhere contains ".router.".

#include <json.hpp>

#include <map>
#include <string>
#include <vector>

#include "xattn/usage.hpp"

namespace xattn {

struct PruneReport {
  Index m = 0;
  std::map<Index, std::vector<Index>> retained;  // layer -> expert indices
};

template <class S>
bool has_router_params(Model<S>& model) {
  bool found = false;
  model.visit_params([&found](const std::string& name, Parameter<S>&) {
    if (name.find(".router.") != std::string::npos) found = true;
  });
  return found;
}

// True iff every layer runs a fixed computation per input — no routed layer
// (and hence no data-dependent branching) remains. Pruned and standard
// models qualify; anything still carrying a router does not.
template <class S>
bool is_static(const Model<S>& model) {
  for (const auto& layer : model.layers)
    if (kind_of(layer) == LayerKind::routed) return false;
  return true;
}

template <class S>
PruneReport prune_model(Model<S>& model, const std::vector<LayerUsage>& usage,
                        Index m) {
  std::map<Index, const LayerUsage*> by_layer;
  for (const LayerUsage& u : usage) by_layer[u.layer] = &u;

  PruneReport report;
  report.m = m;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    if (kind_of(model.layers[i]) != LayerKind::routed) continue;
    auto& moe = std::get<MoELayer<S>>(model.layers[i]);
    auto it = by_layer.find(static_cast<Index>(i));
    if (it == by_layer.end())
      throw UsageError("prune_model: no usage counts for routed layer " +
                       std::to_string(i));
    if (static_cast<Index>(it->second->counts.size()) != moe.n_experts())
      throw UsageError("prune_model: usage for layer " + std::to_string(i) +
                       " covers " + std::to_string(it->second->counts.size()) +
                       " experts, layer has " +
                       std::to_string(moe.n_experts()));
    const auto retained = select_retained(*it->second, m);
    model.layers[i] = prune_layer(moe, retained);
    report.retained[static_cast<Index>(i)] = retained;
  }
  if (report.retained.empty())
    throw UsageError("prune_model: model has no routed layers");
  return report;
}

inline nlohmann::json prune_report_to_json(const PruneReport& r) {
  nlohmann::json layers = nlohmann::json::object();
  for (const auto& [layer, experts] : r.retained)
    layers[std::to_string(layer)] = experts;
  return nlohmann::json{{"m", r.m}, {"retained", layers}};
}

}  // namespace xattn
