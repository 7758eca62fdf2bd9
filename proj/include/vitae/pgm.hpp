#pragma once

#include <string>

#include "vitae/tensor.hpp"

namespace vitae {

// Binary 8-bit PGM (magic "P5").  Pixels map to [0,1] doubles: read divides
// by the file's maxval, write rounds v*255 after clamping to [0,1], so a
// write/read round trip is exact on values that are already k/255.
Tensor read_pgm(const std::string& path);
void write_pgm(const std::string& path, const Tensor& image);

}  // namespace vitae
