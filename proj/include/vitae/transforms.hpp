#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "vitae/tensor.hpp"

namespace vitae {

enum class TransformKind { Affine, AffineDecomp, AffineDiffeo, Cpab };

const char* transform_kind_name(TransformKind k);

// ---------------- raw affine ----------------
// Six parameters laid out row-major as the 2x3 matrix
//   [ g0 g1 g2 ]        x' = g0*x + g1*y + g2
//   [ g3 g4 g5 ]        y' = g3*x + g4*y + g5
// (g2 and g5 are the x/y translations).  points are [N,2], x in column 0.
Tensor affine_apply(const Tensor& params, const Tensor& points);

// Exact inverse parameters via the adjugate; differentiable, so the
// conditional model can backprop through it.  A near-singular matrix has no
// trustworthy inverse and raises UnsupportedInverse.
Tensor affine_inverse(const Tensor& params);

// ---------------- decomposed affine ----------------
// (sx, sy, alpha, m, tx, ty):  p' = Rot(alpha)*Shear(m)*Scale(sx,sy)*p + t
// with Shear(m) = [[1, m], [0, 1]].  Scales must be positive.
Tensor decomposed_apply(const Tensor& params, const Tensor& points);

// Functional inverse p -> L^-1 (p - t); differentiable, always defined for
// positive scales.
Tensor decomposed_apply_inverse(const Tensor& params, const Tensor& points);

// Parameter-level exact inverse.  The negation rule (1/sx, 1/sy, -alpha,
// -m, -t) inverts only when the factors commute (e.g. m = 0 and sx = sy);
// in general the inverse linear map is re-decomposed into rotation x shear
// x scale form, and the translation is -(R Sh S)^-1 t, so that applying the
// returned parameters round-trips exactly.
std::array<double, 6> decomposed_inverse(const std::array<double, 6>& d);

// ---------------- velocity affine ----------------
// expm of [[g0 g1 g2],[g3 g4 g5],[0 0 0]] by scaling-and-squaring with a
// 13-term Taylor core; the bottom row of the result is exactly (0,0,1).
Tensor expm_homogeneous(const Tensor& params);

// Applies expm(sign * gamma) to points; sign = -1 gives the exact inverse
// flow, which is the whole point of this parametrization.
Tensor velocity_affine_apply(const Tensor& params, const Tensor& points, int sign = +1);

// Batch form: each row of gammas [B,6] to the row-major 2x3 of
// expm(sign * gamma), one tape node for the whole batch.  Backward is the
// exact derivative of the scaling-and-squaring recurrence.  A zero row gives
// the identity matrix bit-exactly.
Tensor expm_batch_rowmajor(const Tensor& gammas, int sign = +1);

// ---------------- CPAB ----------------
// Continuous piecewise-affine velocity fields on [0,1]^2.  Each cell of an
// nx x ny grid is split into 4 triangles around its center.
struct SharedEdge {
    int t1, t2;          // triangle indices, t1 < t2
    double x0, y0, x1, y1;  // edge endpoints
};

struct BoundaryEdge {
    int tri;
    double x0, y0, x1, y1;
};

struct Tessellation {
    size_t nx = 0, ny = 0;
    // per triangle, three vertices (x,y) in index order
    std::vector<std::array<double, 6>> tris;
    std::vector<SharedEdge> shared_edges;
    std::vector<BoundaryEdge> boundary_edges;

    size_t triangle_count() const { return tris.size(); }
};

Tessellation make_tessellation(size_t nx, size_t ny);

// Deterministic point location; boundary ties go to the lowest triangle
// index.  Point must be inside [0,1]^2.
int locate_triangle(const Tessellation& tess, double x, double y);

// Orthonormal basis of the subspace of per-triangle affine velocities that
// agree at the two endpoints of every shared edge (hence along the edge),
// optionally pinned to zero on the outer boundary.  Null space computed by
// rank-revealing elimination with tolerance 1e-10.
struct CpabBasis {
    Tessellation tess;
    bool zero_boundary = true;
    size_t dim = 0;                // d_cpab
    std::vector<double> basis;     // row-major (6*T) x dim
};

CpabBasis build_continuity_basis(const Tessellation& tess, bool zero_boundary);

// Velocity field B*theta evaluated at points; differentiable in theta and
// points (the triangle assignment is treated as locally constant).  The
// basis must outlive any tape built from this.
Tensor cpab_velocity(const CpabBasis& basis, const Tensor& theta, const Tensor& points);

// Integrates the stationary field by scaling-and-squaring: one explicit
// Euler step of size 2^-steps, then `steps` self-compositions, which equals
// 2^steps Euler iterations of the same small map.  Points are clamped to
// [0,1]^2 after every substep.  sign = -1 integrates -theta; the round trip
// misses identity only by the integration error.
Tensor cpab_apply(const CpabBasis& basis, const Tensor& theta, const Tensor& points, int steps = 8,
                  int sign = +1);

// The 2x3 row-major matrix (affine_apply layout) equivalent to applying the
// transformation, or its exact inverse map when `inverse`.  Differentiable in
// params.  Defined for the three affine kinds only.
Tensor affine_matrix_rowmajor(TransformKind kind, const Tensor& params, bool inverse = false);

// ---------------- generic dispatch ----------------
struct TransformParams {
    TransformKind kind = TransformKind::Affine;
    Tensor params;                    // [param_count]
    const CpabBasis* basis = nullptr;  // Cpab only
    int steps = 8;                     // Cpab integration steps
};

size_t param_count(TransformKind kind, const CpabBasis* basis = nullptr);
std::vector<double> identity_params(TransformKind kind, const CpabBasis* basis = nullptr);

Tensor transform_points(const TransformParams& tp, const Tensor& points, bool inverse = false);

// Parameter-level inverse for CLI/reporting; velocity kinds negate, affine
// kinds use their exact closed forms.
std::vector<double> inverse_params(TransformKind kind, const std::vector<double>& params);

}  // namespace vitae
