#include "dslstm/folds.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "dslstm/error.hpp"
#include "dslstm/log.hpp"
#include "dslstm/rng.hpp"

namespace dslstm::train {

std::string_view to_string(FoldStrategy s) {
  return s == FoldStrategy::kByGroup ? "by_group" : "stratified_random";
}

FoldStrategy parse_fold_strategy(std::string_view s) {
  if (s == "stratified_random") return FoldStrategy::kStratifiedRandom;
  if (s == "by_group") return FoldStrategy::kByGroup;
  throw ValidationError("unknown fold strategy '" + std::string(s) + "' (expected stratified_random or by_group)");
}

namespace {

std::vector<std::size_t> sorted_by_id(std::span<const std::string> ids) {
  std::vector<std::size_t> order(ids.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return ids[a] < ids[b]; });
  for (std::size_t i = 1; i < order.size(); ++i) {
    if (ids[order[i]] == ids[order[i - 1]]) throw ValidationError("duplicate utterance id " + ids[order[i]]);
  }
  return order;
}

void finish(FoldPlan& plan, const std::vector<std::size_t>& assignment, const std::vector<std::size_t>& by_id) {
  plan.folds.assign(plan.k, {});
  for (const std::size_t idx : by_id) {
    for (std::size_t f = 0; f < plan.k; ++f) {
      (assignment[idx] == f ? plan.folds[f].test : plan.folds[f].train).push_back(idx);
    }
  }
}

}  // namespace

FoldPlan make_folds(std::span<const std::string> ids, std::span<const int> labels, std::size_t k,
                    FoldStrategy strategy, std::uint64_t seed, std::span<const std::string> groups) {
  if (k < 2) throw ValidationError("fold count must be >= 2, got " + std::to_string(k));
  if (ids.size() != labels.size()) throw ValidationError("make_folds: ids and labels differ in length");
  if (ids.size() < k) {
    throw ValidationError("dataset of " + std::to_string(ids.size()) + " items cannot fill " + std::to_string(k) +
                          " folds");
  }
  const auto by_id = sorted_by_id(ids);
  FoldPlan plan;
  plan.k = k;
  plan.strategy = strategy;
  std::vector<std::size_t> assignment(ids.size());
  Rng rng(seed);

  if (strategy == FoldStrategy::kStratifiedRandom) {
    std::map<int, std::vector<std::size_t>> classes;
    for (const std::size_t idx : by_id) classes[labels[idx]].push_back(idx);
    std::size_t dealer = 0;
    for (auto& [label, members] : classes) {
      if (members.size() < k) {
        spdlog::warn("class {} has {} members, fewer than {} folds; some test folds will lack it", label,
                    members.size(), k);
      }
      auto stream = rng.split(static_cast<std::uint64_t>(label));
      stream.shuffle(members.begin(), members.end());
      for (const std::size_t idx : members) assignment[idx] = dealer++ % k;
    }
  } else {
    if (groups.size() != ids.size()) throw ValidationError("by_group folds need one group key per item");
    std::map<std::string, std::vector<std::size_t>> members;
    for (const std::size_t idx : by_id) members[groups[idx]].push_back(idx);
    if (members.size() < k) {
      throw ValidationError("by_group folds need at least " + std::to_string(k) + " groups, found " +
                            std::to_string(members.size()));
    }
    std::vector<std::string> names;
    for (const auto& [name, _] : members) names.push_back(name);
    rng.shuffle(names.begin(), names.end());
    // Largest group first, each into the currently smallest fold.
    std::stable_sort(names.begin(), names.end(),
                     [&](const std::string& a, const std::string& b) { return members[a].size() > members[b].size(); });
    std::vector<std::size_t> load(k, 0);
    for (const auto& name : names) {
      const std::size_t f = static_cast<std::size_t>(std::min_element(load.begin(), load.end()) - load.begin());
      load[f] += members[name].size();
      for (const std::size_t idx : members[name]) assignment[idx] = f;
    }
  }
  finish(plan, assignment, by_id);
  return plan;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_holdout(std::span<const std::size_t> indices,
                                                                                 std::span<const int> labels,
                                                                                 double fraction, std::uint64_t seed) {
  if (fraction < 0.0 || fraction >= 1.0) throw ValidationError("holdout fraction must be in [0, 1)");
  std::map<int, std::vector<std::size_t>> classes;
  for (const std::size_t idx : indices) classes[labels[idx]].push_back(idx);
  Rng rng(seed);
  std::set<std::size_t> held;
  for (auto& [label, members] : classes) {
    auto stream = rng.split(static_cast<std::uint64_t>(label));
    stream.shuffle(members.begin(), members.end());
    const auto take = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(members.size())));
    for (std::size_t i = 0; i < take && i + 1 < members.size(); ++i) held.insert(members[i]);
  }
  if (held.empty() && fraction > 0.0 && indices.size() >= 2) {
    // Take one item from the largest class.
    const auto largest = std::max_element(classes.begin(), classes.end(), [](const auto& a, const auto& b) {
      return a.second.size() < b.second.size();
    });
    held.insert(largest->second.front());
  }
  std::pair<std::vector<std::size_t>, std::vector<std::size_t>> out;
  for (const std::size_t idx : indices) (held.count(idx) ? out.second : out.first).push_back(idx);
  return out;
}

}  // namespace dslstm::train
