#pragma once

#include <cstddef>
#include <vector>

#include "vitae/models.hpp"
#include "vitae/rng.hpp"
#include "vitae/tensor.hpp"

namespace vitae {

// All scalars are per-batch means of per-image sums, so learning rates
// transfer across batch sizes.  elbo is the maximization objective; it always
// equals recon - beta*w*(kl_a + kl_p) with the exact same evaluation order, so
// the decomposition identity holds bit-for-bit.
struct LossBreakdown {
    Tensor elbo;
    Tensor recon;
    Tensor kl_a;
    Tensor kl_p;  // scalar zero for single-latent kinds
    double beta = 1.0;
    double w = 1.0;
};

// 0.5 * sum(mu^2 + var - 1 - ln var), averaged over the batch
Tensor kl_std_normal(const GaussianParams& g);

// bernoulli: sum x ln mu + (1-x) ln(1-mu) with mu clamped to [1e-7, 1-1e-7];
// gaussian: sum -((x-mu)^2/0.2 + 0.5 ln(2*pi*0.1)); averaged over the batch
Tensor recon_loglik(const Tensor& x, const Tensor& mu_p, Likelihood lik);

LossBreakdown elbo_vae(const LossBreakdown& parts, double beta, double w);
LossBreakdown elbo_uvitae(const LossBreakdown& parts, double w);
LossBreakdown elbo_cvitae(const LossBreakdown& parts, double w);

double warmup_weight(size_t epoch, size_t warmup);

// dispatches on the model kind; w is the current warmup weight
LossBreakdown compute_loss(const Model& m, const ForwardPass& fp, const Tensor& x, double w);

// log-mean-exp importance estimate of log p(x) per image, max-subtracted for
// stability; draws K (noise_a, noise_p) pairs from rng in that order per draw
std::vector<double> importance_loglik_per_image(const Model& m, const Tensor& x, size_t k,
                                                RngStream& rng);
double importance_loglik(const Model& m, const Tensor& x, size_t k, RngStream& rng);

}  // namespace vitae
