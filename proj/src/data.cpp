#include "vitae/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>

#include "vitae/checkpoint.hpp"
#include "vitae/errors.hpp"
#include "vitae/rng.hpp"
#include "vitae/spatial_transformer.hpp"
#include "vitae/transforms.hpp"

namespace vitae {

namespace {

constexpr size_t kCanvas = 64;
constexpr double kEllipseAspect = 0.62;
// 8 per axis = 64 samples per pixel: quantizes coverage finer than the 1/7-px
// fractional offsets of the position grid, so edge pixels round the same way
// true coverage would and rasterized areas track the analytic ones
constexpr int kSubsamples = 8;

struct SpriteFactors {
    size_t shape, scale, orient, pos_x, pos_y;
};

// half-extent / semi-major axis / circumradius in pixels
double sprite_size(size_t scale_idx) { return 7.0 * (1.0 + (double)scale_idx / 5.0); }

double sprite_center(size_t pos_idx) { return 22.0 + 20.0 * (double)pos_idx / 7.0; }

struct SpriteGeometry {
    size_t shape;
    double s, cx, cy, c, sn;
    double vx[3], vy[3];  // triangle vertices in the shape frame
};

SpriteGeometry sprite_geometry(const SpriteFactors& f) {
    SpriteGeometry g;
    g.shape = f.shape;
    g.s = sprite_size(f.scale);
    g.cx = sprite_center(f.pos_x);
    g.cy = sprite_center(f.pos_y);
    double theta = 2.0 * M_PI * (double)f.orient / 8.0;
    g.c = std::cos(theta);
    g.sn = std::sin(theta);
    for (int k = 0; k < 3; ++k) {
        double phi = M_PI / 2.0 + 2.0 * M_PI * (double)k / 3.0;
        g.vx[k] = g.s * std::cos(phi);
        g.vy[k] = g.s * std::sin(phi);
    }
    return g;
}

bool inside_shape(const SpriteGeometry& g, double x, double y) {
    double dx = x - g.cx, dy = y - g.cy;
    double u = g.c * dx + g.sn * dy, v = -g.sn * dx + g.c * dy;
    switch (g.shape) {
        case 0: return std::max(std::abs(u), std::abs(v)) <= g.s;
        case 1: {
            double a = u / g.s, b = v / (kEllipseAspect * g.s);
            return a * a + b * b <= 1.0;
        }
        default: {
            // equilateral triangle: all edge cross products share a sign
            double sign = 0.0;
            for (int k = 0; k < 3; ++k) {
                int k2 = (k + 1) % 3;
                double cr = (g.vx[k2] - g.vx[k]) * (v - g.vy[k]) -
                            (g.vy[k2] - g.vy[k]) * (u - g.vx[k]);
                if (cr == 0.0) continue;
                if (sign == 0.0) sign = cr > 0 ? 1.0 : -1.0;
                else if ((cr > 0 ? 1.0 : -1.0) != sign) return false;
            }
            return true;
        }
    }
}

void rasterize(const SpriteFactors& f, double* out) {
    std::fill(out, out + kCanvas * kCanvas, 0.0);
    SpriteGeometry g = sprite_geometry(f);
    double s = g.s;
    double reach = s * 1.4143 + 1.0;  // circumradius bound for every shape
    double cx = g.cx, cy = g.cy;
    size_t x0 = (size_t)std::max(0.0, std::floor(cx - reach));
    size_t x1 = (size_t)std::min((double)kCanvas, std::ceil(cx + reach));
    size_t y0 = (size_t)std::max(0.0, std::floor(cy - reach));
    size_t y1 = (size_t)std::min((double)kCanvas, std::ceil(cy + reach));
    for (size_t j = y0; j < y1; ++j)
        for (size_t i = x0; i < x1; ++i) {
            int hit = 0;
            for (int sy = 0; sy < kSubsamples; ++sy)
                for (int sx = 0; sx < kSubsamples; ++sx) {
                    double x = (double)i + ((double)sx + 0.5) / kSubsamples;
                    double y = (double)j + ((double)sy + 0.5) / kSubsamples;
                    if (inside_shape(g, x, y)) ++hit;
                }
            if (2 * hit >= kSubsamples * kSubsamples) out[j * kCanvas + i] = 1.0;
        }
}

uint32_t read_be32(std::ifstream& in, const std::string& path) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4))
        throw TruncatedFile(path + ": header ends early");
    return ((uint32_t)b[0] << 24) | ((uint32_t)b[1] << 16) | ((uint32_t)b[2] << 8) | (uint32_t)b[3];
}

}  // namespace

LabeledImageDataset generate_sprites(uint64_t seed, size_t subsample) {
    const size_t counts[5] = {3, 6, 8, 8, 8};
    const char* names[5] = {"shape", "scale", "orientation", "posX", "posY"};
    size_t total = 3 * 6 * 8 * 8 * 8;

    std::vector<size_t> keep(total);
    for (size_t i = 0; i < total; ++i) keep[i] = i;
    if (subsample > 0 && subsample < total) {
        RngStream pick(seed, "subsample");
        pick.shuffle(keep);
        keep.resize(subsample);
        std::sort(keep.begin(), keep.end());
    }

    size_t n = keep.size();
    std::vector<double> images(n * kCanvas * kCanvas);
    std::vector<double> factors(n * 5);
    for (size_t r = 0; r < n; ++r) {
        size_t rem = keep[r];
        size_t ids[5];
        for (int f = 4; f >= 0; --f) {
            ids[f] = rem % counts[f];
            rem /= counts[f];
        }
        SpriteFactors sf{ids[0], ids[1], ids[2], ids[3], ids[4]};
        rasterize(sf, images.data() + r * kCanvas * kCanvas);
        for (int f = 0; f < 5; ++f) factors[r * 5 + f] = (double)ids[f];
    }

    LabeledImageDataset ds;
    ds.img_h = ds.img_w = kCanvas;
    ds.images = Tensor::from_data({n, 1, kCanvas, kCanvas}, std::move(images));
    ds.factors = Tensor::from_data({n, 5}, std::move(factors));
    for (int f = 0; f < 5; ++f)
        ds.factor_specs.push_back({names[f], FactorType::Discrete, counts[f]});
    return ds;
}

Tensor load_idx(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    uint32_t magic = read_be32(in, path);
    size_t ndims;
    if (magic == 0x00000803u) ndims = 3;
    else if (magic == 0x00000801u) ndims = 1;
    else {
        std::ostringstream msg;
        msg << path << ": magic 0x" << std::hex << magic;
        throw BadMagic(msg.str());
    }
    std::vector<size_t> shape(ndims);
    size_t total = 1;
    for (size_t i = 0; i < ndims; ++i) {
        shape[i] = read_be32(in, path);
        total *= shape[i];
    }
    std::vector<unsigned char> raw(total);
    if (!in.read(reinterpret_cast<char*>(raw.data()), (std::streamsize)total))
        throw TruncatedFile(path + ": payload ends early");
    std::vector<double> vals(total);
    double scale = magic == 0x00000803u ? 1.0 / 255.0 : 1.0;
    for (size_t i = 0; i < total; ++i) vals[i] = (double)raw[i] * scale;
    return Tensor::from_data(shape, std::move(vals));
}

LabeledImageDataset make_idx_dataset(const std::string& images_path,
                                     const std::string& labels_path) {
    Tensor imgs = load_idx(images_path);
    Tensor labels = load_idx(labels_path);
    if (imgs.rank() != 3) throw BadMagic(images_path + ": expected an image cube");
    if (labels.rank() != 1) throw BadMagic(labels_path + ": expected a label vector");
    if (imgs.shape()[0] != labels.shape()[0])
        throw ShapeMismatch("image/label counts differ: " + std::to_string(imgs.shape()[0]) +
                            " vs " + std::to_string(labels.shape()[0]));
    LabeledImageDataset ds;
    ds.img_h = imgs.shape()[1];
    ds.img_w = imgs.shape()[2];
    ds.images = reshape(imgs, {imgs.shape()[0], 1, ds.img_h, ds.img_w});
    ds.factors = reshape(labels, {labels.shape()[0], 1});
    ds.factor_specs = {{"label", FactorType::Discrete, 10}};
    return ds;
}

std::vector<AugmentDraw> augment_draws(size_t n, uint64_t seed, double max_angle_deg,
                                       double max_shift_px) {
    RngStream r(seed, "augment");
    std::vector<AugmentDraw> out(n);
    for (size_t i = 0; i < n; ++i) {
        out[i].angle_deg = r.uniform(-max_angle_deg, max_angle_deg);
        out[i].tx = r.uniform(-max_shift_px, max_shift_px);
        out[i].ty = r.uniform(-max_shift_px, max_shift_px);
    }
    return out;
}

Tensor augment_rotate_translate(const Tensor& images, uint64_t seed, double max_angle_deg,
                                double max_shift_px) {
    if (images.rank() != 4 || images.shape()[1] != 1)
        throw ShapeMismatch("augment: images must be [N,1,H,W]");
    size_t n = images.shape()[0], h = images.shape()[2], w = images.shape()[3];
    std::vector<AugmentDraw> draws = augment_draws(n, seed, max_angle_deg, max_shift_px);
    const std::vector<double>& src = images.data();
    std::vector<double> out(src.size());
    for (size_t i = 0; i < n; ++i) {
        std::vector<double> one(src.begin() + (ptrdiff_t)(i * h * w),
                                src.begin() + (ptrdiff_t)((i + 1) * h * w));
        TransformParams tp;
        tp.kind = TransformKind::AffineDecomp;
        tp.params = Tensor::from_data(
            {6}, {1.0, 1.0, draws[i].angle_deg * M_PI / 180.0, 0.0,
                  2.0 * draws[i].tx / (double)w, 2.0 * draws[i].ty / (double)h});
        Tensor warped = spatial_transform(Tensor::from_data({h, w}, std::move(one)), tp, false);
        const std::vector<double>& wv = warped.data();
        std::copy(wv.begin(), wv.end(), out.begin() + (ptrdiff_t)(i * h * w));
    }
    return Tensor::from_data(images.shape(), std::move(out));
}

namespace {

LabeledImageDataset take_rows(const LabeledImageDataset& ds, const std::vector<size_t>& idx) {
    LabeledImageDataset out;
    out.img_h = ds.img_h;
    out.img_w = ds.img_w;
    out.factor_specs = ds.factor_specs;
    size_t d = ds.img_h * ds.img_w;
    size_t f = ds.factors.shape()[1];
    std::vector<double> imgs(idx.size() * d), facs(idx.size() * f);
    const std::vector<double>& iv = ds.images.data();
    const std::vector<double>& fv = ds.factors.data();
    for (size_t r = 0; r < idx.size(); ++r) {
        std::copy(iv.begin() + (ptrdiff_t)(idx[r] * d), iv.begin() + (ptrdiff_t)((idx[r] + 1) * d),
                  imgs.begin() + (ptrdiff_t)(r * d));
        std::copy(fv.begin() + (ptrdiff_t)(idx[r] * f), fv.begin() + (ptrdiff_t)((idx[r] + 1) * f),
                  facs.begin() + (ptrdiff_t)(r * f));
    }
    out.images = Tensor::from_data({idx.size(), 1, ds.img_h, ds.img_w}, std::move(imgs));
    out.factors = Tensor::from_data({idx.size(), f}, std::move(facs));
    return out;
}

}  // namespace

std::pair<LabeledImageDataset, LabeledImageDataset> split_train_test(
    const LabeledImageDataset& ds, uint64_t seed) {
    size_t n = ds.size();
    size_t test_n = n / 5;
    std::vector<size_t> perm(n);
    for (size_t i = 0; i < n; ++i) perm[i] = i;
    RngStream r(seed, "split");
    r.shuffle(perm);
    std::vector<size_t> train(perm.begin(), perm.end() - (ptrdiff_t)test_n);
    std::vector<size_t> test(perm.end() - (ptrdiff_t)test_n, perm.end());
    if (train.empty()) throw EmptyTrainSet("split: no rows left for training");
    return {take_rows(ds, train), take_rows(ds, test)};
}

std::vector<std::vector<size_t>> batch_iter(const LabeledImageDataset& ds, size_t batch_size,
                                            uint64_t seed, size_t epoch) {
    if (batch_size == 0) throw ConfigError("batch_iter: batch_size must be at least 1");
    std::vector<size_t> idx(ds.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    RngStream r(seed, "shuffle", epoch);
    r.shuffle(idx);
    std::vector<std::vector<size_t>> out;
    for (size_t at = 0; at < idx.size(); at += batch_size) {
        size_t hi = std::min(at + batch_size, idx.size());
        out.emplace_back(idx.begin() + (ptrdiff_t)at, idx.begin() + (ptrdiff_t)hi);
    }
    return out;
}

Tensor gather_images(const LabeledImageDataset& ds, const std::vector<size_t>& idx) {
    size_t d = ds.img_h * ds.img_w;
    const std::vector<double>& iv = ds.images.data();
    std::vector<double> out(idx.size() * d);
    for (size_t r = 0; r < idx.size(); ++r)
        std::copy(iv.begin() + (ptrdiff_t)(idx[r] * d), iv.begin() + (ptrdiff_t)((idx[r] + 1) * d),
                  out.begin() + (ptrdiff_t)(r * d));
    return Tensor::from_data({idx.size(), d}, std::move(out));
}

Tensor gather_factors(const LabeledImageDataset& ds, const std::vector<size_t>& idx) {
    size_t f = ds.factors.shape()[1];
    const std::vector<double>& fv = ds.factors.data();
    std::vector<double> out(idx.size() * f);
    for (size_t r = 0; r < idx.size(); ++r)
        std::copy(fv.begin() + (ptrdiff_t)(idx[r] * f), fv.begin() + (ptrdiff_t)((idx[r] + 1) * f),
                  out.begin() + (ptrdiff_t)(r * f));
    return Tensor::from_data({idx.size(), f}, std::move(out));
}

void save_dataset(const LabeledImageDataset& ds, const std::string& path) {
    std::ostringstream header;
    header << "vitae-dataset 1 " << ds.img_h << " " << ds.img_w << " " << ds.factor_specs.size();
    for (const auto& s : ds.factor_specs)
        header << " " << s.name << ":" << (s.type == FactorType::Discrete ? "d" : "c") << ":"
               << s.cardinality;
    header << "\n";
    std::string body = encode_arrays({{"images", ds.images.shape(), ds.images.data()},
                                      {"factors", ds.factors.shape(), ds.factors.data()}});
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << header.str();
    out.write(body.data(), (std::streamsize)body.size());
    if (!out) throw IoError("short write to " + path);
}

LabeledImageDataset load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::string header;
    if (!std::getline(in, header)) throw TruncatedFile(path + ": missing header line");
    std::istringstream hs(header);
    std::string tag;
    size_t version = 0, h = 0, w = 0, nspec = 0;
    hs >> tag >> version >> h >> w >> nspec;
    if (tag != "vitae-dataset" || version != 1) throw BadMagic(path + ": not a dataset cache");
    LabeledImageDataset ds;
    ds.img_h = h;
    ds.img_w = w;
    for (size_t i = 0; i < nspec; ++i) {
        std::string item;
        if (!(hs >> item)) throw TruncatedFile(path + ": factor specs end early");
        size_t c1 = item.find(':'), c2 = item.rfind(':');
        if (c1 == std::string::npos || c2 == c1) throw BadMagic(path + ": bad factor spec " + item);
        FactorSpec spec;
        spec.name = item.substr(0, c1);
        spec.type = item.substr(c1 + 1, c2 - c1 - 1) == "d" ? FactorType::Discrete
                                                            : FactorType::Continuous;
        spec.cardinality = (size_t)std::stoull(item.substr(c2 + 1));
        ds.factor_specs.push_back(spec);
    }
    std::string body((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::vector<NamedArray> arrays = decode_arrays(body.data(), body.size(), path);
    for (auto& a : arrays) {
        if (a.name == "images") ds.images = Tensor::from_data(a.shape, std::move(a.data));
        else if (a.name == "factors") ds.factors = Tensor::from_data(a.shape, std::move(a.data));
    }
    if (!ds.images.defined() || !ds.factors.defined())
        throw TruncatedFile(path + ": dataset arrays missing");
    return ds;
}

}  // namespace vitae
