#include "vitae/transforms.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "vitae/errors.hpp"

extern "C" {
void cblas_dgemm(int order, int transa, int transb, int m, int n, int k, double alpha, const double* a,
                 int lda, const double* b, int ldb, double beta, double* c, int ldc);
}

namespace vitae {

namespace {

void dgemm_rm(bool ta, bool tb, int m, int n, int k, const double* a, int lda, const double* b, int ldb,
              double beta, double* c, int ldc) {
    cblas_dgemm(101, ta ? 112 : 111, tb ? 112 : 111, m, n, k, 1.0, a, lda, b, ldb, beta, c, ldc);
}

Tensor neg(const Tensor& t) { return mul(t, Tensor::full(t.shape(), -1.0)); }

Tensor elem(const Tensor& params, size_t i) { return slice(params, 0, i, i + 1); }

void check_params6(const char* what, const Tensor& params) {
    if (params.rank() != 1 || params.numel() != 6)
        throw ShapeMismatch(std::string(what) + ": parameters must be shape [6], got " +
                            shape_str(params.shape()));
}

void check_points(const char* what, const Tensor& points) {
    if (points.rank() != 2 || points.shape()[1] != 2)
        throw ShapeMismatch(std::string(what) + ": points must be [N,2], got " +
                            shape_str(points.shape()));
}

Tensor hom_points(const Tensor& points) {
    return concat({points, Tensor::full({points.shape()[0], 1}, 1.0)}, 1);
}

// 13-term Taylor core with scaling-and-squaring; exact zero rows in the
// generator survive, so homogeneous results keep their (0,0,1) row/column
// bit-exactly.
Tensor expm_taylor_3x3(const Tensor& m) {
    double norm = 0.0;
    for (int r = 0; r < 3; ++r) {
        double s = 0.0;
        for (int c = 0; c < 3; ++c) s += std::abs(m.data()[r * 3 + c]);
        norm = std::max(norm, s);
    }
    int squarings = 0;
    while (std::ldexp(norm, -squarings) >= 0.5) ++squarings;

    Tensor scaled = mul(m, Tensor::full({3, 3}, std::ldexp(1.0, -squarings)));
    Tensor eye = Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Tensor acc = add(eye, scaled);
    Tensor term = scaled;
    for (int k = 2; k <= 13; ++k) {
        term = mul(matmul(term, scaled), Tensor::full({3, 3}, 1.0 / k));
        acc = add(acc, term);
    }
    for (int i = 0; i < squarings; ++i) acc = matmul(acc, acc);
    return acc;
}

}  // namespace

const char* transform_kind_name(TransformKind k) {
    switch (k) {
        case TransformKind::Affine: return "affine";
        case TransformKind::AffineDecomp: return "affine-decomp";
        case TransformKind::AffineDiffeo: return "affine-diffeo";
        case TransformKind::Cpab: return "cpab";
    }
    return "?";
}

// --------------------------------------------------------------------------
// raw affine
// --------------------------------------------------------------------------

Tensor affine_apply(const Tensor& params, const Tensor& points) {
    check_params6("affine_apply", params);
    check_points("affine_apply", points);
    // [N,3] x [3,2] with the matrix transposed into column layout
    Tensor g = reshape(
        concat({elem(params, 0), elem(params, 3), elem(params, 1), elem(params, 4), elem(params, 2),
                elem(params, 5)},
               0),
        {3, 2});
    return matmul(hom_points(points), g);
}

Tensor affine_inverse(const Tensor& params) {
    check_params6("affine_inverse", params);
    const auto& p = params.data();
    double det = p[0] * p[4] - p[1] * p[3];
    if (std::abs(det) < 1e-12)
        throw UnsupportedInverse("affine matrix is numerically singular (det " + std::to_string(det) +
                                 ")");
    Tensor a = elem(params, 0), b = elem(params, 1), tx = elem(params, 2);
    Tensor c = elem(params, 3), d = elem(params, 4), ty = elem(params, 5);
    Tensor dt = sub(mul(a, d), mul(b, c));
    Tensor ia = div(d, dt), ib = neg(div(b, dt));
    Tensor ic = neg(div(c, dt)), id = div(a, dt);
    Tensor itx = neg(add(mul(ia, tx), mul(ib, ty)));
    Tensor ity = neg(add(mul(ic, tx), mul(id, ty)));
    return concat({ia, ib, itx, ic, id, ity}, 0);
}

// --------------------------------------------------------------------------
// decomposed affine
// --------------------------------------------------------------------------

namespace {

// L^T = S * Sh^T * R(-alpha); built transposed so points can right-multiply
Tensor decomposed_linear_t(const Tensor& params) {
    Tensor sx = elem(params, 0), sy = elem(params, 1);
    Tensor alpha = elem(params, 2), m = elem(params, 3);
    Tensor z = Tensor::zeros({1}), one = Tensor::full({1}, 1.0);

    Tensor na = neg(alpha);
    Tensor gen = reshape(concat({z, neg(na), z, na, z, z, z, z, z}, 0), {3, 3});
    Tensor rot3 = expm_taylor_3x3(gen);  // R(-alpha) in the upper 2x2 block
    Tensor rot = slice(slice(rot3, 0, 0, 2), 1, 0, 2);

    Tensor s_mat = reshape(concat({sx, z, z, sy}, 0), {2, 2});
    Tensor sh_t = reshape(concat({one, z, m, one}, 0), {2, 2});
    return matmul(s_mat, matmul(sh_t, rot));
}

void check_scales(const char* what, const Tensor& params) {
    if (params.data()[0] <= 0.0 || params.data()[1] <= 0.0)
        throw NonPositiveScale(std::string(what) + ": scales (" + std::to_string(params.data()[0]) +
                               ", " + std::to_string(params.data()[1]) + ") must be positive");
}

}  // namespace

Tensor decomposed_apply(const Tensor& params, const Tensor& points) {
    check_params6("decomposed_apply", params);
    check_points("decomposed_apply", points);
    check_scales("decomposed_apply", params);
    Tensor lt = decomposed_linear_t(params);
    Tensor t_row = reshape(slice(params, 0, 4, 6), {1, 2});
    return matmul(hom_points(points), concat({lt, t_row}, 0));
}

Tensor decomposed_apply_inverse(const Tensor& params, const Tensor& points) {
    check_params6("decomposed_apply_inverse", params);
    check_points("decomposed_apply_inverse", points);
    check_scales("decomposed_apply_inverse", params);
    Tensor lt = decomposed_linear_t(params);
    Tensor f = reshape(lt, {4});
    Tensor a = elem(f, 0), b = elem(f, 1), c = elem(f, 2), d = elem(f, 3);
    Tensor dt = sub(mul(a, d), mul(b, c));  // det = sx*sy > 0
    Tensor lt_inv =
        reshape(concat({div(d, dt), neg(div(b, dt)), neg(div(c, dt)), div(a, dt)}, 0), {2, 2});
    Tensor t_row = reshape(slice(params, 0, 4, 6), {1, 2});
    Tensor inv_t = matmul(neg(t_row), lt_inv);
    return matmul(hom_points(points), concat({lt_inv, inv_t}, 0));
}

std::array<double, 6> decomposed_inverse(const std::array<double, 6>& dparams) {
    double sx = dparams[0], sy = dparams[1], alpha = dparams[2], m = dparams[3];
    double tx = dparams[4], ty = dparams[5];
    if (sx <= 0.0 || sy <= 0.0)
        throw NonPositiveScale("decomposed_inverse: scales must be positive");

    // M = L^-1 = S^-1 * Shear(-m) * Rot(-alpha)
    double c = std::cos(alpha), s = std::sin(alpha);
    double m00 = (c + m * s) / sx, m01 = (s - m * c) / sx;
    double m10 = -s / sy, m11 = c / sy;

    // re-decompose M as Rot(a') * Shear(m') * Scale: rotation angle from the
    // first column, shear/scale from rotating the second column back
    double sx_i = std::hypot(m00, m10);
    double a_i = std::atan2(m10, m00);
    double ci = std::cos(a_i), si = std::sin(a_i);
    double b_i = ci * m01 + si * m11;
    double sy_i = -si * m01 + ci * m11;  // det(M)/sx_i > 0
    double m_i = b_i / sy_i;

    return {sx_i, sy_i, a_i, m_i, -(m00 * tx + m01 * ty), -(m10 * tx + m11 * ty)};
}

// --------------------------------------------------------------------------
// velocity affine
// --------------------------------------------------------------------------

Tensor expm_homogeneous(const Tensor& params) {
    check_params6("expm_homogeneous", params);
    return expm_taylor_3x3(reshape(concat({params, Tensor::zeros({3})}, 0), {3, 3}));
}

namespace {

// 3x3 product helpers over flat row-major arrays; plain loops keep exact
// zeros in the homogeneous bottom row.
void mat3_mul(const double* a, const double* b, double* out) {
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double s = 0.0;
            for (int k = 0; k < 3; ++k) s += a[i * 3 + k] * b[k * 3 + j];
            out[i * 3 + j] = s;
        }
}

void mat3_scale_add(double* acc, const double* x, double f) {
    for (int i = 0; i < 9; ++i) acc[i] += f * x[i];
}

struct ExpmTrace {
    double A[9];          // scaled generator
    double h;             // 2^-squarings
    int squarings;
    double T[13][9];      // T[k] = Taylor term k (already divided), k = 1..12
    std::vector<std::array<double, 9>> S;  // acc before each squaring
    double out[9];
};

// Same recurrence as expm_taylor_3x3, on one flat 6-entry generator row.
void expm_row(const double* g6, int sign, ExpmTrace& tr) {
    double gen[9] = {0, 0, 0, 0, 0, 0, 0, 0, 0};
    for (int i = 0; i < 6; ++i) gen[i] = sign < 0 ? -g6[i] : g6[i];

    double norm = 0.0;
    for (int r = 0; r < 3; ++r) {
        double s = 0.0;
        for (int c = 0; c < 3; ++c) s += std::abs(gen[r * 3 + c]);
        norm = std::max(norm, s);
    }
    tr.squarings = 0;
    while (std::ldexp(norm, -tr.squarings) >= 0.5) ++tr.squarings;
    tr.h = std::ldexp(1.0, -tr.squarings);

    for (int i = 0; i < 9; ++i) tr.A[i] = gen[i] * tr.h;
    double acc[9] = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    mat3_scale_add(acc, tr.A, 1.0);
    std::copy(tr.A, tr.A + 9, tr.T[1]);
    for (int k = 2; k <= 13; ++k) {
        double prod[9];
        mat3_mul(tr.T[k - 1], tr.A, prod);
        double term[9];
        for (int i = 0; i < 9; ++i) term[i] = prod[i] * (1.0 / k);
        mat3_scale_add(acc, term, 1.0);
        if (k < 13) std::copy(term, term + 9, tr.T[k]);
    }
    tr.S.resize(tr.squarings);
    for (int i = 0; i < tr.squarings; ++i) {
        std::copy(acc, acc + 9, tr.S[i].data());
        double sq[9];
        mat3_mul(acc, acc, sq);
        std::copy(sq, sq + 9, acc);
    }
    std::copy(acc, acc + 9, tr.out);
}

// Derivative of expm_row along generator coordinate t, via the saved trace.
void expm_row_tangent(const ExpmTrace& tr, int sign, int t, double* dacc) {
    double dA[9] = {0, 0, 0, 0, 0, 0, 0, 0, 0};
    dA[t] = (sign < 0 ? -1.0 : 1.0) * tr.h;
    double dterm[9];
    std::copy(dA, dA + 9, dterm);
    std::copy(dA, dA + 9, dacc);
    for (int k = 2; k <= 13; ++k) {
        double p1[9], p2[9];
        mat3_mul(dterm, tr.A, p1);
        mat3_mul(tr.T[k - 1], dA, p2);
        for (int i = 0; i < 9; ++i) dterm[i] = (p1[i] + p2[i]) * (1.0 / k);
        mat3_scale_add(dacc, dterm, 1.0);
    }
    for (int i = 0; i < tr.squarings; ++i) {
        double p1[9], p2[9];
        mat3_mul(dacc, tr.S[i].data(), p1);
        mat3_mul(tr.S[i].data(), dacc, p2);
        for (int j = 0; j < 9; ++j) dacc[j] = p1[j] + p2[j];
    }
}

}  // namespace

Tensor expm_batch_rowmajor(const Tensor& gammas, int sign) {
    const auto& s = gammas.shape();
    if (s.size() != 2 || s[1] != 6)
        throw ShapeMismatch("expm_batch_rowmajor: want [B,6], got " + shape_str(s));
    size_t bsz = s[0];
    const auto& gv = gammas.data();

    std::vector<double> out(bsz * 6);
    for (size_t b = 0; b < bsz; ++b) {
        ExpmTrace tr;
        expm_row(&gv[b * 6], sign, tr);
        for (int i = 0; i < 6; ++i) out[b * 6 + i] = tr.out[i];
    }

    auto backward = [bsz, sign](TensorNode& n) {
        TensorNode& gn = *n.inputs[0];
        if (!gn.requires_grad) return;
        gn.ensure_grad();
        for (size_t b = 0; b < bsz; ++b) {
            const double* up = &n.grad[b * 6];
            bool any = false;
            for (int i = 0; i < 6; ++i) any = any || up[i] != 0.0;
            if (!any) continue;
            ExpmTrace tr;
            expm_row(&gn.data[b * 6], sign, tr);
            for (int t = 0; t < 6; ++t) {
                double dacc[9];
                expm_row_tangent(tr, sign, t, dacc);
                double g = 0.0;
                for (int i = 0; i < 6; ++i) g += up[i] * dacc[i];
                gn.grad[b * 6 + t] += g;
            }
        }
    };
    return make_custom("expm_batch_rowmajor", {bsz, 6}, std::move(out), {gammas},
                       std::move(backward));
}

Tensor velocity_affine_apply(const Tensor& params, const Tensor& points, int sign) {
    check_params6("velocity_affine_apply", params);
    check_points("velocity_affine_apply", points);
    Tensor p = sign < 0 ? neg(params) : params;
    Tensor z = Tensor::zeros({1});
    // generator transposed, so exp comes out transposed as well
    Tensor gen_t = reshape(concat({elem(p, 0), elem(p, 3), z, elem(p, 1), elem(p, 4), z, elem(p, 2),
                                   elem(p, 5), z},
                                  0),
                           {3, 3});
    Tensor m_t = expm_taylor_3x3(gen_t);
    return matmul(hom_points(points), slice(m_t, 1, 0, 2));
}

// --------------------------------------------------------------------------
// CPAB
// --------------------------------------------------------------------------

Tessellation make_tessellation(size_t nx, size_t ny) {
    if (nx == 0 || ny == 0) throw ShapeMismatch("make_tessellation: empty grid");
    Tessellation t;
    t.nx = nx;
    t.ny = ny;
    t.tris.reserve(4 * nx * ny);
    auto cell_base = [nx](size_t cx, size_t cy) { return (int)(4 * (cy * nx + cx)); };
    for (size_t cy = 0; cy < ny; ++cy) {
        for (size_t cx = 0; cx < nx; ++cx) {
            double x0 = (double)cx / (double)nx, x1 = (double)(cx + 1) / (double)nx;
            double y0 = (double)cy / (double)ny, y1 = (double)(cy + 1) / (double)ny;
            double mx = 0.5 * (x0 + x1), my = 0.5 * (y0 + y1);
            int base = cell_base(cx, cy);
            // 0: bottom, 1: right, 2: top, 3: left; all close around the center
            t.tris.push_back({x0, y0, x1, y0, mx, my});
            t.tris.push_back({x1, y0, x1, y1, mx, my});
            t.tris.push_back({x1, y1, x0, y1, mx, my});
            t.tris.push_back({x0, y1, x0, y0, mx, my});

            // spokes between neighbours inside the cell
            t.shared_edges.push_back({base + 0, base + 1, x1, y0, mx, my});
            t.shared_edges.push_back({base + 1, base + 2, x1, y1, mx, my});
            t.shared_edges.push_back({base + 2, base + 3, x0, y1, mx, my});
            t.shared_edges.push_back({base + 0, base + 3, x0, y0, mx, my});

            // sides shared with the next cell to the right / above
            if (cx + 1 < nx)
                t.shared_edges.push_back({base + 1, cell_base(cx + 1, cy) + 3, x1, y0, x1, y1});
            if (cy + 1 < ny)
                t.shared_edges.push_back({base + 2, cell_base(cx, cy + 1) + 0, x0, y1, x1, y1});

            if (cx == 0) t.boundary_edges.push_back({base + 3, x0, y0, x0, y1});
            if (cx + 1 == nx) t.boundary_edges.push_back({base + 1, x1, y0, x1, y1});
            if (cy == 0) t.boundary_edges.push_back({base + 0, x0, y0, x1, y0});
            if (cy + 1 == ny) t.boundary_edges.push_back({base + 2, x0, y1, x1, y1});
        }
    }
    return t;
}

namespace {

bool tri_contains(const std::array<double, 6>& v, double x, double y, double tol) {
    double ax = v[0], ay = v[1], bx = v[2], by = v[3], cx = v[4], cy = v[5];
    double den = (bx - ax) * (cy - ay) - (cx - ax) * (by - ay);
    double l1 = ((x - ax) * (cy - ay) - (cx - ax) * (y - ay)) / den;
    double l2 = ((bx - ax) * (y - ay) - (x - ax) * (by - ay)) / den;
    return l1 >= -tol && l2 >= -tol && (1.0 - l1 - l2) >= -tol;
}

}  // namespace

int locate_triangle(const Tessellation& tess, double x, double y) {
    if (x < -1e-9 || x > 1.0 + 1e-9 || y < -1e-9 || y > 1.0 + 1e-9)
        throw OutOfDomain("locate_triangle: (" + std::to_string(x) + ", " + std::to_string(y) + ")");
    x = std::min(std::max(x, 0.0), 1.0);
    y = std::min(std::max(y, 0.0), 1.0);

    auto cell_candidates = [](double v, size_t n) {
        double f = v * (double)n;
        long c = std::min((long)std::floor(f), (long)n - 1);
        std::vector<long> out;
        // points sitting exactly on a cell border also belong to the lower
        // cell; check it first so the lowest triangle index wins
        if (f == std::floor(f) && c > 0) out.push_back(c - 1);
        out.push_back(c);
        return out;
    };

    for (long cy : cell_candidates(y, tess.ny)) {
        for (long cx : cell_candidates(x, tess.nx)) {
            int base = (int)(4 * ((size_t)cy * tess.nx + (size_t)cx));
            for (int k = 0; k < 4; ++k)
                if (tri_contains(tess.tris[(size_t)(base + k)], x, y, 1e-12)) return base + k;
        }
    }
    // numerical dust on a candidate-cell edge: fall back to a full scan
    for (size_t t = 0; t < tess.tris.size(); ++t)
        if (tri_contains(tess.tris[t], x, y, 1e-9)) return (int)t;
    throw OutOfDomain("locate_triangle: no triangle contains (" + std::to_string(x) + ", " +
                      std::to_string(y) + ")");
}

CpabBasis build_continuity_basis(const Tessellation& tess, bool zero_boundary) {
    size_t t_count = tess.triangle_count();
    size_t n = 6 * t_count;
    std::vector<double> rows;
    size_t m = 0;

    auto add_row = [&](int t1, int t2, double px, double py, int comp) {
        rows.resize(rows.size() + n, 0.0);
        double* r = rows.data() + (m++) * n;
        size_t o1 = (size_t)(6 * t1 + 3 * comp);
        r[o1 + 0] = px;
        r[o1 + 1] = py;
        r[o1 + 2] = 1.0;
        if (t2 >= 0) {
            size_t o2 = (size_t)(6 * t2 + 3 * comp);
            r[o2 + 0] = -px;
            r[o2 + 1] = -py;
            r[o2 + 2] = -1.0;
        }
    };

    // agreement of both velocity components at both endpoints of every
    // shared edge; affine fields agreeing at two points agree on the line
    for (const auto& e : tess.shared_edges) {
        for (int comp = 0; comp < 2; ++comp) {
            add_row(e.t1, e.t2, e.x0, e.y0, comp);
            add_row(e.t1, e.t2, e.x1, e.y1, comp);
        }
    }
    if (zero_boundary) {
        for (const auto& e : tess.boundary_edges) {
            for (int comp = 0; comp < 2; ++comp) {
                add_row(e.tri, -1, e.x0, e.y0, comp);
                add_row(e.tri, -1, e.x1, e.y1, comp);
            }
        }
    }

    // rank-revealing Gauss-Jordan elimination
    const double tol = 1e-10;
    std::vector<std::pair<size_t, size_t>> pivots;  // (row, col)
    size_t rank = 0;
    for (size_t col = 0; col < n && rank < m; ++col) {
        size_t best = rank;
        for (size_t i = rank; i < m; ++i)
            if (std::abs(rows[i * n + col]) > std::abs(rows[best * n + col])) best = i;
        if (std::abs(rows[best * n + col]) <= tol) continue;
        if (best != rank)
            for (size_t j = 0; j < n; ++j) std::swap(rows[best * n + j], rows[rank * n + j]);
        double piv = rows[rank * n + col];
        for (size_t j = 0; j < n; ++j) rows[rank * n + j] /= piv;
        for (size_t i = 0; i < m; ++i) {
            if (i == rank) continue;
            double f = rows[i * n + col];
            if (f == 0.0) continue;
            for (size_t j = 0; j < n; ++j) rows[i * n + j] -= f * rows[rank * n + j];
        }
        pivots.emplace_back(rank, col);
        ++rank;
    }

    std::vector<bool> is_pivot(n, false);
    for (auto& [r, c] : pivots) is_pivot[c] = true;

    CpabBasis basis;
    basis.tess = tess;
    basis.zero_boundary = zero_boundary;
    basis.dim = n - rank;
    if (basis.dim == 0)
        throw DegenerateBasis("continuity constraints leave no degrees of freedom");
    basis.basis.assign(n * basis.dim, 0.0);

    size_t j = 0;
    std::vector<std::vector<double>> cols(basis.dim, std::vector<double>(n, 0.0));
    for (size_t free_col = 0; free_col < n; ++free_col) {
        if (is_pivot[free_col]) continue;
        auto& v = cols[j];
        v[free_col] = 1.0;
        for (auto& [r, pc] : pivots) v[pc] = -rows[r * n + free_col];
        ++j;
    }

    // modified Gram-Schmidt, two passes for orthonormality to ~1e-14
    for (size_t it = 0; it < cols.size(); ++it) {
        for (int pass = 0; pass < 2; ++pass) {
            for (size_t k = 0; k < it; ++k) {
                double dot = 0.0;
                for (size_t i = 0; i < n; ++i) dot += cols[it][i] * cols[k][i];
                for (size_t i = 0; i < n; ++i) cols[it][i] -= dot * cols[k][i];
            }
        }
        double nrm = 0.0;
        for (double v : cols[it]) nrm += v * v;
        nrm = std::sqrt(nrm);
        if (nrm < 1e-8) throw DegenerateBasis("null-space vectors collapsed during orthonormalization");
        for (auto& v : cols[it]) v /= nrm;
    }
    for (size_t row = 0; row < n; ++row)
        for (size_t c = 0; c < basis.dim; ++c) basis.basis[row * basis.dim + c] = cols[c][row];
    return basis;
}

namespace {

void check_theta(const CpabBasis& basis, const Tensor& theta) {
    if (theta.rank() != 1 || theta.numel() != basis.dim)
        throw ShapeMismatch("cpab: theta must be shape [" + std::to_string(basis.dim) + "], got " +
                            shape_str(theta.shape()));
}

std::vector<double> field_coefficients(const CpabBasis& basis, const std::vector<double>& theta) {
    size_t n = 6 * basis.tess.triangle_count();
    std::vector<double> a(n, 0.0);
    dgemm_rm(false, false, (int)n, 1, (int)basis.dim, basis.basis.data(), (int)basis.dim, theta.data(),
             1, 0.0, a.data(), 1);
    return a;
}

void check_domain(const Tensor& points) {
    for (size_t i = 0; i < points.shape()[0]; ++i) {
        double x = points.data()[2 * i], y = points.data()[2 * i + 1];
        if (x < -1e-9 || x > 1.0 + 1e-9 || y < -1e-9 || y > 1.0 + 1e-9)
            throw OutOfDomain("cpab point (" + std::to_string(x) + ", " + std::to_string(y) +
                              ") outside the unit square");
    }
}

}  // namespace

Tensor cpab_velocity(const CpabBasis& basis, const Tensor& theta, const Tensor& points) {
    check_theta(basis, theta);
    check_points("cpab_velocity", points);
    check_domain(points);

    size_t n_pts = points.shape()[0];
    std::vector<double> coeff = field_coefficients(basis, theta.data());
    std::vector<int> tri(n_pts);
    std::vector<double> pts = points.data();
    std::vector<double> out(2 * n_pts);
    for (size_t i = 0; i < n_pts; ++i) {
        double x = std::min(std::max(pts[2 * i], 0.0), 1.0);
        double y = std::min(std::max(pts[2 * i + 1], 0.0), 1.0);
        int t = locate_triangle(basis.tess, x, y);
        tri[i] = t;
        const double* a = coeff.data() + 6 * t;
        out[2 * i] = a[0] * x + a[1] * y + a[2];
        out[2 * i + 1] = a[3] * x + a[4] * y + a[5];
    }

    const CpabBasis* bp = &basis;
    auto backward_fn = [bp, tri, pts, coeff](TensorNode& node) {
        TensorNode& th = *node.inputs[0];
        TensorNode& pt = *node.inputs[1];
        size_t n_pts = tri.size();
        if (th.requires_grad) {
            size_t rows = 6 * bp->tess.triangle_count();
            std::vector<double> ga(rows, 0.0);
            for (size_t i = 0; i < n_pts; ++i) {
                double x = std::min(std::max(pts[2 * i], 0.0), 1.0);
                double y = std::min(std::max(pts[2 * i + 1], 0.0), 1.0);
                double gx = node.grad[2 * i], gy = node.grad[2 * i + 1];
                double* g = ga.data() + 6 * tri[i];
                g[0] += gx * x;
                g[1] += gx * y;
                g[2] += gx;
                g[3] += gy * x;
                g[4] += gy * y;
                g[5] += gy;
            }
            th.ensure_grad();
            dgemm_rm(true, false, (int)bp->dim, 1, (int)rows, bp->basis.data(), (int)bp->dim, ga.data(),
                     1, 1.0, th.grad.data(), 1);
        }
        if (pt.requires_grad) {
            pt.ensure_grad();
            for (size_t i = 0; i < n_pts; ++i) {
                const double* a = coeff.data() + 6 * tri[i];
                double gx = node.grad[2 * i], gy = node.grad[2 * i + 1];
                pt.grad[2 * i] += gx * a[0] + gy * a[3];
                pt.grad[2 * i + 1] += gx * a[1] + gy * a[4];
            }
        }
    };
    return make_custom("cpab_velocity", {n_pts, 2}, std::move(out), {theta, points},
                       std::move(backward_fn));
}

Tensor cpab_apply(const CpabBasis& basis, const Tensor& theta, const Tensor& points, int steps,
                  int sign) {
    check_theta(basis, theta);
    check_points("cpab_apply", points);
    check_domain(points);
    if (steps < 0 || steps > 30) throw ShapeMismatch("cpab_apply: steps out of range");

    size_t iterations = size_t{1} << steps;
    double h = std::ldexp(1.0, -steps);
    size_t n_pts = points.shape()[0];

    if (!theta.requires_grad() && !points.requires_grad()) {
        // value-only path: identical arithmetic to the tape path below,
        // without building 2^steps tape nodes
        std::vector<double> th = theta.data();
        if (sign < 0)
            for (auto& v : th) v = v * -1.0;
        std::vector<double> coeff = field_coefficients(basis, th);
        std::vector<double> q = points.data();
        for (auto& v : q) v = std::min(std::max(v, 0.0), 1.0);
        for (size_t it = 0; it < iterations; ++it) {
            for (size_t i = 0; i < n_pts; ++i) {
                double x = q[2 * i], y = q[2 * i + 1];
                int t = locate_triangle(basis.tess, x, y);
                const double* a = coeff.data() + 6 * t;
                double vx = a[0] * x + a[1] * y + a[2];
                double vy = a[3] * x + a[4] * y + a[5];
                q[2 * i] = std::min(std::max(x + vx * h, 0.0), 1.0);
                q[2 * i + 1] = std::min(std::max(y + vy * h, 0.0), 1.0);
            }
        }
        return Tensor::from_data({n_pts, 2}, std::move(q));
    }

    Tensor th = sign < 0 ? neg(theta) : theta;
    Tensor h_const = Tensor::full({n_pts, 2}, h);
    Tensor q = clamp(points, 0.0, 1.0);
    for (size_t it = 0; it < iterations; ++it) {
        Tensor v = cpab_velocity(basis, th, q);
        q = clamp(add(q, mul(v, h_const)), 0.0, 1.0);
    }
    return q;
}

// --------------------------------------------------------------------------
// dispatch
// --------------------------------------------------------------------------

size_t param_count(TransformKind kind, const CpabBasis* basis) {
    if (kind == TransformKind::Cpab) {
        if (!basis) throw ShapeMismatch("param_count: cpab needs a basis");
        return basis->dim;
    }
    return 6;
}

std::vector<double> identity_params(TransformKind kind, const CpabBasis* basis) {
    switch (kind) {
        case TransformKind::Affine: return {1, 0, 0, 0, 1, 0};
        case TransformKind::AffineDecomp: return {1, 1, 0, 0, 0, 0};
        case TransformKind::AffineDiffeo: return {0, 0, 0, 0, 0, 0};
        case TransformKind::Cpab: return std::vector<double>(param_count(kind, basis), 0.0);
    }
    return {};
}

Tensor affine_matrix_rowmajor(TransformKind kind, const Tensor& params, bool inverse) {
    switch (kind) {
        case TransformKind::Affine:
            check_params6("affine_matrix_rowmajor", params);
            return inverse ? affine_inverse(params) : params;
        case TransformKind::AffineDecomp: {
            check_params6("affine_matrix_rowmajor", params);
            check_scales("affine_matrix_rowmajor", params);
            Tensor lt = decomposed_linear_t(params);  // L^T flat (a,b,c,d): out = p * L^T
            if (!inverse) {
                Tensor f = reshape(lt, {4});
                return concat({elem(f, 0), elem(f, 2), elem(params, 4), elem(f, 1), elem(f, 3),
                               elem(params, 5)},
                              0);
            }
            Tensor f = reshape(lt, {4});
            Tensor a = elem(f, 0), b = elem(f, 1), c = elem(f, 2), d = elem(f, 3);
            Tensor dt = sub(mul(a, d), mul(b, c));  // det = sx*sy > 0
            Tensor lt_inv =
                reshape(concat({div(d, dt), neg(div(b, dt)), neg(div(c, dt)), div(a, dt)}, 0), {2, 2});
            Tensor t_row = reshape(slice(params, 0, 4, 6), {1, 2});
            Tensor ti = reshape(matmul(neg(t_row), lt_inv), {2});
            Tensor fi = reshape(lt_inv, {4});
            return concat({elem(fi, 0), elem(fi, 2), elem(ti, 0), elem(fi, 1), elem(fi, 3),
                           elem(ti, 1)},
                          0);
        }
        case TransformKind::AffineDiffeo: {
            check_params6("affine_matrix_rowmajor", params);
            Tensor e = expm_homogeneous(inverse ? neg(params) : params);
            return slice(reshape(e, {9}), 0, 0, 6);  // rows 0 and 1 of the homogeneous exp
        }
        case TransformKind::Cpab:
            throw ShapeMismatch("affine_matrix_rowmajor: cpab has no matrix form");
    }
    throw ShapeMismatch("affine_matrix_rowmajor: unknown kind");
}

Tensor transform_points(const TransformParams& tp, const Tensor& points, bool inverse) {
    switch (tp.kind) {
        case TransformKind::Affine:
            return affine_apply(inverse ? affine_inverse(tp.params) : tp.params, points);
        case TransformKind::AffineDecomp:
            return inverse ? decomposed_apply_inverse(tp.params, points)
                           : decomposed_apply(tp.params, points);
        case TransformKind::AffineDiffeo:
            return velocity_affine_apply(tp.params, points, inverse ? -1 : +1);
        case TransformKind::Cpab:
            if (!tp.basis) throw ShapeMismatch("transform_points: cpab needs a basis");
            return cpab_apply(*tp.basis, tp.params, points, tp.steps, inverse ? -1 : +1);
    }
    throw ShapeMismatch("transform_points: unknown kind");
}

std::vector<double> inverse_params(TransformKind kind, const std::vector<double>& params) {
    switch (kind) {
        case TransformKind::Affine: {
            Tensor inv = affine_inverse(Tensor::from_data({6}, params));
            return inv.data();
        }
        case TransformKind::AffineDecomp: {
            if (params.size() != 6) throw ShapeMismatch("inverse_params: want 6 parameters");
            std::array<double, 6> d;
            std::copy_n(params.begin(), 6, d.begin());
            auto inv = decomposed_inverse(d);
            return {inv.begin(), inv.end()};
        }
        case TransformKind::AffineDiffeo:
        case TransformKind::Cpab: {
            std::vector<double> out = params;
            for (auto& v : out) v = -v;
            return out;
        }
    }
    throw ShapeMismatch("inverse_params: unknown kind");
}

}  // namespace vitae
