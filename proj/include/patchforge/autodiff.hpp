#pragma once

// Minimal reverse-mode automatic differentiation over NCHW tensors.

#include "patchforge/autodiff/graph.hpp"
#include "patchforge/autodiff/image_ops.hpp"
#include "patchforge/autodiff/ops.hpp"
#include "patchforge/tensor.hpp"
