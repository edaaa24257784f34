#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dslstm::train {

enum class FoldStrategy { kStratifiedRandom, kByGroup };

std::string_view to_string(FoldStrategy s);
FoldStrategy parse_fold_strategy(std::string_view s);

/// Indices into the dataset the plan was built from, ordered by id.
struct Fold {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

struct FoldPlan {
  std::size_t k = 0;
  FoldStrategy strategy = FoldStrategy::kStratifiedRandom;
  std::vector<Fold> folds;
};

/// The plan depends on the (id, label, group) set, not on its order.
/// kStratifiedRandom shuffles each class and deals its members round-robin,
/// continuing the dealer position across classes so fold sizes differ by at
/// most one. kByGroup keeps every group inside a single test fold.
FoldPlan make_folds(std::span<const std::string> ids, std::span<const int> labels, std::size_t k,
                    FoldStrategy strategy, std::uint64_t seed, std::span<const std::string> groups = {});

/// Stratified split of `indices` into (train, holdout). Each class
/// contributes round(fraction * n_c) items; the holdout is never empty when
/// fraction > 0 and there are at least two items.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_holdout(std::span<const std::size_t> indices,
                                                                                 std::span<const int> labels,
                                                                                 double fraction, std::uint64_t seed);

}  // namespace dslstm::train
