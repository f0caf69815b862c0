#pragma once

#include "icl/model.hpp"

namespace icl {

// Internal accessor for analysis code that recomputes attention rows from
// cached traces and needs the projection weights.
struct ModelAccess {
  static const Tensor& wo(const TransformerModel& m, int layer) {
    return m.layers_[static_cast<std::size_t>(layer)].wo;
  }
};

}  // namespace icl
