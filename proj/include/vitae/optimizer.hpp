#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "vitae/data.hpp"
#include "vitae/models.hpp"
#include "vitae/tensor.hpp"

namespace vitae {

struct AdamState {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    size_t t = 0;
    std::vector<std::vector<double>> m, v;  // one moment pair per parameter
};

AdamState make_adam_state(const std::vector<std::pair<std::string, Tensor>>& params);

// Standard bias-corrected update, each parameter independent.  A non-finite
// gradient aborts the whole step untouched and returns false (divergence);
// nothing is clipped.
bool adam_step(std::vector<std::pair<std::string, Tensor>>& params, AdamState& state, double lr);

struct TrainConfig {
    ModelKind kind = ModelKind::Vae;
    TransformKind transform = TransformKind::AffineDiffeo;
    double learning_rate = 1e-4;
    size_t batch_size = 128;
    size_t epochs = 200;
    size_t warmup = 0;  // 0: resolved to epochs/2 (and at least 1) at train time
    double beta = 1.0;
    uint64_t seed = 0;
    size_t k_importance = 1000;
    std::string data = "sprites";  // "sprites" or "idx:IMAGES_PATH"
    size_t subsample = 0;
    bool augment = false;
    size_t d = 4, d_a = 2, d_p = 2;
    Likelihood likelihood = Likelihood::Bernoulli;
    size_t enc_w1 = 128, enc_w2 = 64, dec_w1 = 64, dec_w2 = 64;
    size_t tess_nx = 2, tess_ny = 2;
    bool zero_boundary = true;
    int steps = 8;
    size_t checkpoint_every = 50;

    size_t resolved_warmup() const;
    ModelConfig model_config(size_t img_h, size_t img_w) const;
};

// flat key=value lines; '#' starts a comment; unknown keys and invalid values
// are ConfigError
TrainConfig parse_config_text(const std::string& text, const std::string& what);
TrainConfig parse_config(const std::string& path);
void apply_override(TrainConfig& cfg, const std::string& key, const std::string& value);
// canonical key=value echo of every field, one per line, fixed order
std::string config_echo(const TrainConfig& cfg);

// materializes cfg.data: procedural sprites or an IDX pair (the labels path is
// derived from the images path by the images->labels / idx3->idx1 renames),
// then optional seeded subsampling and the rotation/translation augmentation
LabeledImageDataset load_data_spec(const TrainConfig& cfg);

struct EpochRow {
    size_t epoch = 0;  // 0-based
    double elbo = 0, recon = 0, kl_a = 0, kl_p = 0, w = 0, beta = 1;
};

struct TrainResult {
    Model model;
    std::vector<EpochRow> log;
    bool diverged = false;
    size_t diverged_epoch = 0;  // valid when diverged
};

// Epoch loop over seeded shuffled batches.  When out_dir is nonempty, writes
// loss.csv, periodic checkpoints (ckpt_NNNN.bin) and model.bin there.  A
// non-finite loss or gradient stops training with the partial log retained;
// the divergence is recorded in the result and in loss.csv, not thrown.
TrainResult train(const TrainConfig& cfg, const LabeledImageDataset& dataset,
                  const std::string& out_dir = "");

void write_loss_csv(const TrainResult& res, const std::string& path);

struct SweepCell {
    TransformKind transform;
    double rate = 0;
    bool diverged = false;
    double final_elbo = 0;  // valid when not diverged
};

// Stability grid: a conditional two-branch model per (affine
// parametrization, learning rate) cell.  Diverged cells are recorded as
// such.  When out_dir is nonempty, writes sweep.csv there.
std::vector<SweepCell> lr_sweep(const TrainConfig& base, const std::vector<double>& rates,
                                const LabeledImageDataset& dataset,
                                const std::string& out_dir = "");

void write_sweep_csv(const std::vector<SweepCell>& cells, const std::string& path);

}  // namespace vitae
