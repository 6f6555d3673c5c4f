/*
 * Copyright 2026 The pestnet Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <gtest/gtest.h>

#include "pestnet/gradient_suite.hpp"

namespace pestnet {
namespace {

TEST(GradientSuite, EveryCaseWithinTolerance) {
  double total = 0;
  const auto results = run_gradient_suite();
  EXPECT_GE(results.size(), 30u);
  for (const auto& r : results) {
    EXPECT_LE(r.error, kGradTolerance) << r.name;
    total += r.seconds;
  }
  EXPECT_LT(total, 60.0);
}

}  // namespace
}  // namespace pestnet
