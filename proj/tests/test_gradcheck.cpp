#include <gtest/gtest.h>

#include <algorithm>

#include "dslstm/error.hpp"
#include "dslstm/gradcheck.hpp"

namespace dslstm::gradcheck {
namespace {

TEST(RelativeError, UsesFloorForTinyValues) {
  EXPECT_DOUBLE_EQ(relative_error(1.0, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(relative_error(2.0, 1.0), 0.5);
  EXPECT_DOUBLE_EQ(relative_error(0.0, 1e-6), 1e-6 / kAbsFloor);
}

TEST(Gradcheck, ComparesAgainstFiniteDifferences) {
  Case square{"square", {{3, 2}}, [](Graph<double>&, std::span<const Var<double>> in) { return ad::mul(in[0], in[0]); }};
  const auto r = check(square, 3, 1);
  EXPECT_TRUE(r.passed);
  EXPECT_EQ(r.instances, 3u);
  EXPECT_EQ(r.checked, 18u);
  // Central differences never match to the last bit, so a zero tolerance must fail.
  EXPECT_FALSE(check(square, 3, 1, 0.0).passed);
}

TEST(Gradcheck, ScopeNames) {
  for (auto s : {Scope::kOps, Scope::kLstm, Scope::kDsLstm, Scope::kModel, Scope::kAll}) {
    EXPECT_EQ(parse_scope(to_string(s)), s);
  }
  EXPECT_THROW(parse_scope("everything"), ValidationError);
}

class SuiteScope : public ::testing::TestWithParam<Scope> {};

TEST_P(SuiteScope, EveryCasePasses) {
  const auto results = run(GetParam(), 5, 0);
  ASSERT_FALSE(results.empty());
  for (const auto& r : results) {
    EXPECT_TRUE(r.passed) << r.name << " max rel " << r.max_rel_error;
    EXPECT_GE(r.instances, 5u) << r.name;
    EXPECT_GT(r.checked, 0u) << r.name;
    EXPECT_LE(r.max_rel_error, kTolerance) << r.name;
  }
}

INSTANTIATE_TEST_SUITE_P(Scopes, SuiteScope, ::testing::Values(Scope::kOps, Scope::kLstm, Scope::kDsLstm, Scope::kModel),
                         [](const auto& info) { return std::string(to_string(info.param)); });

TEST(Gradcheck, SuiteCoversTheRecurrentPaths) {
  std::vector<std::string> names;
  for (const auto& c : suite(Scope::kAll)) names.push_back(c.name);
  for (const char* want : {"lstm_pointwise", "lstm_stack_packed", "ds_layer_unroll", "conv2d", "maxpool2d"}) {
    EXPECT_NE(std::find(names.begin(), names.end(), want), names.end()) << want;
  }
}

}  // namespace
}  // namespace dslstm::gradcheck
