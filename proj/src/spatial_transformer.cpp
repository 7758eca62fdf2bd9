#include "vitae/spatial_transformer.hpp"

#include <cmath>

#include "vitae/errors.hpp"

namespace vitae {

GridDomain domain_for(TransformKind kind) {
    return kind == TransformKind::Cpab ? GridDomain::UnitSquare : GridDomain::SymSquare;
}

SamplingGrid identity_grid(size_t h, size_t w, GridDomain domain) {
    if (h < 1 || w < 1) throw ShapeMismatch("identity_grid: extents must be at least 1");
    std::vector<double> coords(2 * h * w);
    for (size_t j = 0; j < h; ++j) {
        for (size_t i = 0; i < w; ++i) {
            double x = (i + 0.5) / (double)w;
            double y = (j + 0.5) / (double)h;
            if (domain == GridDomain::SymSquare) {
                x = 2.0 * x - 1.0;
                y = 2.0 * y - 1.0;
            }
            coords[2 * (j * w + i)] = x;
            coords[2 * (j * w + i) + 1] = y;
        }
    }
    SamplingGrid g;
    g.h = h;
    g.w = w;
    g.domain = domain;
    g.coords = Tensor::from_data({h * w, 2}, std::move(coords));
    return g;
}

SamplingGrid warp_grid(const TransformParams& tp, const SamplingGrid& grid, bool inverse) {
    if (domain_for(tp.kind) != grid.domain)
        throw ShapeMismatch(std::string("warp_grid: ") + transform_kind_name(tp.kind) +
                            " does not operate on this grid domain");
    SamplingGrid out;
    out.h = grid.h;
    out.w = grid.w;
    out.domain = grid.domain;
    out.coords = transform_points(tp, grid.coords, inverse);
    return out;
}

Tensor bilinear_sample(const Tensor& image, const SamplingGrid& grid) {
    if (image.rank() != 2 && image.rank() != 3)
        throw ShapeMismatch("bilinear_sample: image must be [H,W] or [C,H,W], got " +
                            shape_str(image.shape()));
    size_t chans = image.rank() == 3 ? image.shape()[0] : 1;
    size_t h_in = image.shape()[image.rank() - 2];
    size_t w_in = image.shape()[image.rank() - 1];
    size_t n = grid.h * grid.w;
    if (grid.coords.rank() != 2 || grid.coords.shape()[0] != n || grid.coords.shape()[1] != 2)
        throw ShapeMismatch("bilinear_sample: grid coords must be [h*w, 2]");

    // map normalized domain coordinates to pixel coordinates; pixel centers
    // sit at integers, so a point exactly on a center copies that pixel
    std::vector<double> sc(2 * n), of(2 * n);
    double ax, bx, ay, by;
    if (grid.domain == GridDomain::UnitSquare) {
        ax = (double)w_in;
        ay = (double)h_in;
        bx = -0.5;
        by = -0.5;
    } else {
        ax = 0.5 * (double)w_in;
        ay = 0.5 * (double)h_in;
        bx = 0.5 * (double)w_in - 0.5;
        by = 0.5 * (double)h_in - 0.5;
    }
    for (size_t i = 0; i < n; ++i) {
        sc[2 * i] = ax;
        sc[2 * i + 1] = ay;
        of[2 * i] = bx;
        of[2 * i + 1] = by;
    }
    Tensor pix = add(mul(grid.coords, Tensor::from_data({n, 2}, std::move(sc))),
                     Tensor::from_data({n, 2}, std::move(of)));

    const std::vector<double>& img = image.data();
    const std::vector<double>& p = pix.data();
    std::vector<double> out(chans * n, 0.0);
    for (size_t i = 0; i < n; ++i) {
        double px = p[2 * i], py = p[2 * i + 1];
        double fx = std::floor(px), fy = std::floor(py);
        long x0 = (long)fx, y0 = (long)fy;
        double wx = px - fx, wy = py - fy;
        for (int dy = 0; dy < 2; ++dy) {
            long yy = y0 + dy;
            if (yy < 0 || yy >= (long)h_in) continue;
            double wyv = dy ? wy : 1.0 - wy;
            for (int dx = 0; dx < 2; ++dx) {
                long xx = x0 + dx;
                if (xx < 0 || xx >= (long)w_in) continue;
                double wgt = (dx ? wx : 1.0 - wx) * wyv;
                for (size_t c = 0; c < chans; ++c)
                    out[c * n + i] += wgt * img[(c * h_in + (size_t)yy) * w_in + (size_t)xx];
            }
        }
    }

    size_t hh = grid.h, ww = grid.w;
    std::vector<size_t> out_shape =
        image.rank() == 3 ? std::vector<size_t>{chans, hh, ww} : std::vector<size_t>{hh, ww};
    auto backward_fn = [chans, h_in, w_in, n](TensorNode& node) {
        TensorNode& im = *node.inputs[0];
        TensorNode& px_node = *node.inputs[1];
        const std::vector<double>& p = px_node.data;
        const std::vector<double>& img_vals = im.data;
        if (im.requires_grad) im.ensure_grad();
        if (px_node.requires_grad) px_node.ensure_grad();
        for (size_t i = 0; i < n; ++i) {
            double px = p[2 * i], py = p[2 * i + 1];
            double fx = std::floor(px), fy = std::floor(py);
            long x0 = (long)fx, y0 = (long)fy;
            double wx = px - fx, wy = py - fy;
            double gx = 0.0, gy = 0.0;
            for (size_t c = 0; c < chans; ++c) {
                double g = node.grad[c * n + i];
                if (g == 0.0) continue;
                double v[2][2] = {{0, 0}, {0, 0}};  // in-bounds pixel values, zero padded
                for (int dy = 0; dy < 2; ++dy) {
                    long yy = y0 + dy;
                    if (yy < 0 || yy >= (long)h_in) continue;
                    for (int dx = 0; dx < 2; ++dx) {
                        long xx = x0 + dx;
                        if (xx < 0 || xx >= (long)w_in) continue;
                        size_t idx = (c * h_in + (size_t)yy) * w_in + (size_t)xx;
                        v[dy][dx] = img_vals[idx];
                        if (im.requires_grad)
                            im.grad[idx] += g * (dx ? wx : 1.0 - wx) * (dy ? wy : 1.0 - wy);
                    }
                }
                gx += g * ((v[0][1] - v[0][0]) * (1.0 - wy) + (v[1][1] - v[1][0]) * wy);
                gy += g * ((v[1][0] - v[0][0]) * (1.0 - wx) + (v[1][1] - v[0][1]) * wx);
            }
            if (px_node.requires_grad) {
                px_node.grad[2 * i] += gx;
                px_node.grad[2 * i + 1] += gy;
            }
        }
    };
    return make_custom("bilinear_sample", out_shape, std::move(out), {image, pix},
                       std::move(backward_fn));
}

Tensor spatial_transform(const Tensor& image, const TransformParams& tp, bool inverse) {
    if (image.rank() != 2 && image.rank() != 3)
        throw ShapeMismatch("spatial_transform: image must be [H,W] or [C,H,W]");
    size_t h = image.shape()[image.rank() - 2];
    size_t w = image.shape()[image.rank() - 1];
    SamplingGrid grid = identity_grid(h, w, domain_for(tp.kind));
    return bilinear_sample(image, warp_grid(tp, grid, inverse));
}

Tensor warp_rows_affine(const Tensor& images, const Tensor& mats, size_t h, size_t w) {
    if (images.rank() != 2 || images.shape()[1] != h * w)
        throw ShapeMismatch("warp_rows_affine: images must be [B, " + std::to_string(h * w) +
                            "], got " + shape_str(images.shape()));
    size_t bsz = images.shape()[0];
    if (mats.rank() != 2 || mats.shape()[0] != bsz || mats.shape()[1] != 6)
        throw ShapeMismatch("warp_rows_affine: mats must be [" + std::to_string(bsz) + ", 6], got " +
                            shape_str(mats.shape()));
    const size_t n = h * w;

    // same coordinate expressions as identity_grid / bilinear_sample so the
    // fused path reproduces the per-image path, bit for bit at the identity
    std::vector<double> xv(n), yv(n);
    for (size_t j = 0; j < h; ++j) {
        for (size_t i = 0; i < w; ++i) {
            xv[j * w + i] = 2.0 * ((i + 0.5) / (double)w) - 1.0;
            yv[j * w + i] = 2.0 * ((j + 0.5) / (double)h) - 1.0;
        }
    }
    const double ax = 0.5 * (double)w, bx = 0.5 * (double)w - 0.5;
    const double ay = 0.5 * (double)h, by = 0.5 * (double)h - 0.5;

    const std::vector<double>& img = images.data();
    const std::vector<double>& mt = mats.data();
    std::vector<double> out(bsz * n, 0.0);
    for (size_t b = 0; b < bsz; ++b) {
        const double* m = mt.data() + b * 6;
        const double* row = img.data() + b * n;
        double* o = out.data() + b * n;
        for (size_t i = 0; i < n; ++i) {
            double px = ax * (m[0] * xv[i] + m[1] * yv[i] + m[2]) + bx;
            double py = ay * (m[3] * xv[i] + m[4] * yv[i] + m[5]) + by;
            double fx = std::floor(px), fy = std::floor(py);
            long x0 = (long)fx, y0 = (long)fy;
            double wx = px - fx, wy = py - fy;
            double acc = 0.0;
            for (int dy = 0; dy < 2; ++dy) {
                long yy = y0 + dy;
                if (yy < 0 || yy >= (long)h) continue;
                double wyv = dy ? wy : 1.0 - wy;
                for (int dx = 0; dx < 2; ++dx) {
                    long xx = x0 + dx;
                    if (xx < 0 || xx >= (long)w) continue;
                    acc += (dx ? wx : 1.0 - wx) * wyv * row[(size_t)yy * w + (size_t)xx];
                }
            }
            o[i] = acc;
        }
    }

    auto backward_fn = [bsz, n, h, w, ax, ay, bx, by, xv, yv](TensorNode& node) {
        TensorNode& im = *node.inputs[0];
        TensorNode& mn = *node.inputs[1];
        if (im.requires_grad) im.ensure_grad();
        if (mn.requires_grad) mn.ensure_grad();
        for (size_t b = 0; b < bsz; ++b) {
            const double* m = mn.data.data() + b * 6;
            const double* row = im.data.data() + b * n;
            double mg[6] = {0, 0, 0, 0, 0, 0};
            for (size_t i = 0; i < n; ++i) {
                double g = node.grad[b * n + i];
                if (g == 0.0) continue;
                double px = ax * (m[0] * xv[i] + m[1] * yv[i] + m[2]) + bx;
                double py = ay * (m[3] * xv[i] + m[4] * yv[i] + m[5]) + by;
                double fx = std::floor(px), fy = std::floor(py);
                long x0 = (long)fx, y0 = (long)fy;
                double wx = px - fx, wy = py - fy;
                double v[2][2] = {{0, 0}, {0, 0}};  // in-bounds pixel values, zero padded
                for (int dy = 0; dy < 2; ++dy) {
                    long yy = y0 + dy;
                    if (yy < 0 || yy >= (long)h) continue;
                    for (int dx = 0; dx < 2; ++dx) {
                        long xx = x0 + dx;
                        if (xx < 0 || xx >= (long)w) continue;
                        size_t idx = (size_t)yy * w + (size_t)xx;
                        v[dy][dx] = row[idx];
                        if (im.requires_grad)
                            im.grad[b * n + idx] += g * (dx ? wx : 1.0 - wx) * (dy ? wy : 1.0 - wy);
                    }
                }
                if (mn.requires_grad) {
                    double gx = g * ((v[0][1] - v[0][0]) * (1.0 - wy) + (v[1][1] - v[1][0]) * wy) * ax;
                    double gy = g * ((v[1][0] - v[0][0]) * (1.0 - wx) + (v[1][1] - v[0][1]) * wx) * ay;
                    mg[0] += gx * xv[i];
                    mg[1] += gx * yv[i];
                    mg[2] += gx;
                    mg[3] += gy * xv[i];
                    mg[4] += gy * yv[i];
                    mg[5] += gy;
                }
            }
            if (mn.requires_grad)
                for (int k = 0; k < 6; ++k) mn.grad[b * 6 + k] += mg[k];
        }
    };
    return make_custom("warp_rows_affine", {bsz, n}, std::move(out), {images, mats},
                       std::move(backward_fn));
}

}  // namespace vitae
