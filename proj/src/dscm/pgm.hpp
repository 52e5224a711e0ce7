#pragma once

#include <string>
#include <vector>

#include "dscm/tensor.hpp"

namespace dscm {

// Binary PGM (P5) output with values mapped [-1,1] -> [0,255].
void write_pgm(const std::string& path, const Tensor& image);

// Non-negative map scaled by a fixed factor into [0,255] (for uncertainty
// heat images); the scale is part of the file contract so outputs stay
// deterministic.
void write_pgm_heat(const std::string& path, const Tensor& image, double scale);

// Horizontal tiling with a 1px separator column at background level.
Tensor tile_row(const std::vector<Tensor>& images);

}  // namespace dscm
