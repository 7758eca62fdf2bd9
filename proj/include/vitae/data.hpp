#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "vitae/tensor.hpp"

namespace vitae {

enum class FactorType { Discrete, Continuous };

struct FactorSpec {
    std::string name;
    FactorType type = FactorType::Discrete;
    size_t cardinality = 0;  // 0 when continuous
};

// images [N,1,H,W] with every pixel in [0,1]; factors [N,F]; discrete factor
// values are indices in [0, cardinality)
struct LabeledImageDataset {
    size_t img_h = 0, img_w = 0;
    Tensor images;
    Tensor factors;
    std::vector<FactorSpec> factor_specs;
    size_t size() const { return images.defined() ? images.shape()[0] : 0; }
};

// Procedural sprite grid: shape {square, ellipse, triangle} x 6 scales x
// 8 orientations x 8 x-positions x 8 y-positions on a 64x64 canvas, binary
// pixels, shapes never clipped by the border.  subsample == 0 keeps the full
// Cartesian product; otherwise that many rows are chosen by seeded draw
// (without replacement, original order).
LabeledImageDataset generate_sprites(uint64_t seed, size_t subsample = 0);

// IDX file readers: big-endian magic 0x803 (image cube, scaled to [0,1]) or
// 0x801 (label vector, raw values)
Tensor load_idx(const std::string& path);
LabeledImageDataset make_idx_dataset(const std::string& images_path,
                                     const std::string& labels_path);

struct AugmentDraw {
    double angle_deg, tx, ty;
};

// the per-image draw sequence behind augment_rotate_translate, exposed so the
// distribution itself can be checked without rasterizing anything
std::vector<AugmentDraw> augment_draws(size_t n, uint64_t seed, double max_angle_deg = 20.0,
                                       double max_shift_px = 3.0);

// independent per-image rotation U(-max_angle, max_angle) degrees about the
// image center and translation U(-max_shift, max_shift) pixels per axis,
// bilinear with zero padding
Tensor augment_rotate_translate(const Tensor& images, uint64_t seed, double max_angle_deg = 20.0,
                                double max_shift_px = 3.0);

// seeded permutation; the last fifth (rounded down) of rows becomes the test set
std::pair<LabeledImageDataset, LabeledImageDataset> split_train_test(
    const LabeledImageDataset& ds, uint64_t seed);

// per-epoch seeded shuffle chunked into batches; the final partial batch is kept
std::vector<std::vector<size_t>> batch_iter(const LabeledImageDataset& ds, size_t batch_size,
                                            uint64_t seed, size_t epoch);

Tensor gather_images(const LabeledImageDataset& ds, const std::vector<size_t>& idx);  // [B, H*W]
Tensor gather_factors(const LabeledImageDataset& ds, const std::vector<size_t>& idx);  // [B, F]

// cache file: one text header line, then the checkpoint container bytes
void save_dataset(const LabeledImageDataset& ds, const std::string& path);
LabeledImageDataset load_dataset(const std::string& path);

}  // namespace vitae
