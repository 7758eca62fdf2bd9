#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "vitae/rng.hpp"
#include "vitae/tensor.hpp"
#include "vitae/transforms.hpp"

namespace vitae {

enum class ModelKind { Vae, BetaVae, UVitae, CVitae };
enum class Likelihood { Bernoulli, Gaussian };

const char* model_kind_name(ModelKind k);
ModelKind model_kind_from(const std::string& name);
TransformKind transform_kind_from(const std::string& name);
const char* likelihood_name(Likelihood l);
Likelihood likelihood_from(const std::string& name);

struct GaussianParams {
    Tensor mu;   // [B, d]
    Tensor var;  // [B, d], strictly positive (softplus head + 1e-6 floor)
};

struct Dense {
    Tensor w;  // [in, out]
    Tensor b;  // [1, out]
};

struct Mlp {
    std::vector<Dense> layers;  // LeakyReLU(0.1) after each
};

struct ModelConfig {
    ModelKind kind = ModelKind::Vae;
    TransformKind transform = TransformKind::AffineDiffeo;
    size_t img_h = 64, img_w = 64;
    size_t d = 4;             // latent size, single-latent kinds
    size_t d_a = 2, d_p = 2;  // latent split, two-branch kinds
    Likelihood likelihood = Likelihood::Bernoulli;
    double beta = 1.0;  // KL scale, >1 only meaningful for BetaVae
    // base widths; two-branch kinds split them 0.6/0.4 appearance/perspective
    size_t enc_w1 = 128, enc_w2 = 64;
    size_t dec_w1 = 64, dec_w2 = 64;
    size_t tess_nx = 2, tess_ny = 2;
    bool zero_boundary = true;
    int steps = 8;  // velocity-field integration steps

    bool split() const { return kind == ModelKind::UVitae || kind == ModelKind::CVitae; }
    size_t pixels() const { return img_h * img_w; }
    size_t latent_dim() const { return split() ? d_a + d_p : d; }
};

struct Model {
    ModelConfig cfg;
    std::shared_ptr<CpabBasis> basis;  // present only for the cpab transform kind

    // single-latent kinds
    Mlp q_trunk;
    Dense q_mu, q_var;
    Mlp p_net;
    Dense p_out;

    // two-branch kinds
    Mlp qa_trunk;
    Dense qa_mu, qa_var;
    Mlp qp_trunk;
    Dense qp_mu, qp_var;
    Mlp pa_net;
    Dense pa_out;
    Mlp pg_net;
    Dense pg_out;  // transformation head, zero-initialized

    size_t gamma_dim() const;
    // deterministic order; names namespaced by branch, e.g. "qP.layer0.weight"
    std::vector<std::pair<std::string, Tensor>> named_params() const;
    size_t param_scalars() const;
};

Model build_model(const ModelConfig& cfg, RngStream& init);

struct EncodeResult {
    GaussianParams qa;       // the only posterior for single-latent kinds
    GaussianParams qp;       // two-branch kinds
    Tensor zp;               // the perspective sample the appearance branch saw (CVitae)
    Tensor gamma_d_enc;      // CVitae: transformation decoded from zp
    Tensor gamma_e;          // CVitae, velocity kinds: the negated parameters actually applied
    Tensor aligned;          // CVitae: inverse-transformed input fed to the appearance encoder
};

// noise_p: [B, d_p] standard normal driving the CVitae perspective sample;
// pass nullptr for the deterministic path (zp = posterior mean), used when
// extracting codes.
EncodeResult encode(const Model& m, const Tensor& x, const Tensor* noise_p = nullptr);

Tensor reparameterize(const GaussianParams& g, const Tensor& noise);

struct DecodeResult {
    Tensor recon;       // [B, D] likelihood mean
    Tensor appearance;  // [B, D] pre-warp decoder output (== recon for single-latent)
    Tensor gamma_d;     // [B, G] transformation parameters (two-branch kinds)
};

// za: [B, d_a] (or [B, d] for single-latent); zp: [B, d_p], ignored otherwise
DecodeResult decode(const Model& m, const Tensor& za, const Tensor& zp = {});

struct ForwardPass {
    Tensor recon;
    Tensor appearance;
    GaussianParams qa, qp;
    Tensor za, zp;
    Tensor gamma_d;  // decoder-side transformation parameters
    Tensor gamma_e;  // CVitae velocity kinds: enc-side parameters (= -gamma_d)
};

ForwardPass forward(const Model& m, const Tensor& x, const Tensor& noise_a, const Tensor& noise_p = {});

// the generative procedure: prior samples in, image out
Tensor generate(const Model& m, const Tensor& noise_a, const Tensor& noise_p = {});

// per-sample warp of flattened images: images [B, D], gammas [B, G]
Tensor warp_batch(const Model& m, const Tensor& images, const Tensor& gammas, bool inverse);

void save_model(const Model& m, const std::string& path);
Model load_model(const std::string& path);

}  // namespace vitae
