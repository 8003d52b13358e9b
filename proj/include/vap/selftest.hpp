#pragma once

#include <string>
#include <vector>

namespace vap {

struct SelftestCheck {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Fast invariant checks over every module: codec round trip, projection and
/// loss anchors, causality, gradients, event extraction, encoder prefix
/// stability and generator determinism.
std::vector<SelftestCheck> run_selftest();

}  // namespace vap
