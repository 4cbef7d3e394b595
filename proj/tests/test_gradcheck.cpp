#include <gtest/gtest.h>

#include "gradcheck.hpp"

namespace {

class GradCheck : public ::testing::TestWithParam<std::size_t> {};

TEST_P(GradCheck, MatchesCentralDifferences) {
  const auto cases = gradcheck::all_cases();
  const auto& c = cases.at(GetParam());
  const auto r = gradcheck::run_case(c, 25, 7);
  EXPECT_LT(r.worst, gradcheck::kTolerance) << c.name;
}

INSTANTIATE_TEST_SUITE_P(AllOps, GradCheck, ::testing::Range<std::size_t>(0, gradcheck::all_cases().size()),
                         [](const auto& info) { return gradcheck::all_cases()[info.param].name; });

TEST(GradCheckHarness, DetectsAWrongGradient) {
  // an op whose backward is off by a factor of two must be flagged
  gradcheck::Case bad{"bad", [](std::mt19937_64& g) {
                        auto a = gradcheck::uniform({3}, g);
                        return gradcheck::Trial{{a}, [a] {
                                                  auto pa = a.impl();
                                                  mkd::Buffer out(a.data().begin(), a.data().end());
                                                  return mkd::detail::make_result({3}, out, {a}, "bad", [pa](mkd::detail::TensorImpl& s) {
                                                    auto& g2 = pa->ensure_grad();
                                                    for (std::size_t i = 0; i < 3; ++i) g2[i] += 2.0 * s.grad[i];
                                                  });
                                                }};
                      }};
  EXPECT_GT(gradcheck::run_case(bad, 3, 1).worst, 0.1);
}

}  // namespace
