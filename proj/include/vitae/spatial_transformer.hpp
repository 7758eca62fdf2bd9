#pragma once

#include <cstddef>

#include "vitae/tensor.hpp"
#include "vitae/transforms.hpp"

namespace vitae {

// Sampling-grid coordinate convention. Affine kinds move points of [-1,1]^2,
// the piecewise-affine kind lives on its [0,1]^2 tessellation.
enum class GridDomain { SymSquare, UnitSquare };

GridDomain domain_for(TransformKind kind);

struct SamplingGrid {
    size_t h = 0, w = 0;
    GridDomain domain = GridDomain::SymSquare;
    Tensor coords;  // [h*w, 2] rows of (x, y), row-major pixel order, y grows with the row index
};

// Pixel centers (i+0.5)/extent mapped into the domain.
SamplingGrid identity_grid(size_t h, size_t w, GridDomain domain);

// Moves every grid coordinate through the transformation (its inverse when
// `inverse`). The params kind must match the grid's domain.
SamplingGrid warp_grid(const TransformParams& tp, const SamplingGrid& grid, bool inverse = false);

// Bilinear interpolation of `image` ([H,W] or [C,H,W]) at the grid's
// coordinates, zero outside the image; differentiable in image and coords.
// Output is [grid.h, grid.w] (or [C, grid.h, grid.w]).
Tensor bilinear_sample(const Tensor& image, const SamplingGrid& grid);

// identity_grid -> warp_grid -> bilinear_sample. Backward-warping: the output
// at pixel p samples the input at T(p), so composing with the inverse
// transformation round-trips up to interpolation error.
Tensor spatial_transform(const Tensor& image, const TransformParams& tp, bool inverse = false);

// Batch-fused equivalent of spatial_transform for matrix maps: one tape node
// for the whole batch.  images [B, h*w]; mats [B, 6] row-major 2x3 matrices
// acting on SymSquare coordinates (use affine_matrix_rowmajor to get them,
// with the inverse already folded in).  Differentiable in both inputs.
Tensor warp_rows_affine(const Tensor& images, const Tensor& mats, size_t h, size_t w);

}  // namespace vitae
