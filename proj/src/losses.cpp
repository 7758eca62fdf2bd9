#include "vitae/losses.hpp"

#include <algorithm>
#include <cmath>

#include "vitae/errors.hpp"

namespace vitae {

namespace {

constexpr double kBernoulliEps = 1e-7;
constexpr double kGaussianVar = 0.1;

Tensor batch_mean_of_sums(const Tensor& per_entry, size_t batch) {
    return mul(sum(per_entry), Tensor::scalar(1.0 / (double)batch));
}

LossBreakdown combine(const LossBreakdown& parts, double beta, double w) {
    LossBreakdown out = parts;
    if (!out.kl_p.defined()) out.kl_p = Tensor::scalar(0.0);
    out.beta = beta;
    out.w = w;
    out.elbo = sub(out.recon, mul(Tensor::scalar(beta * w), add(out.kl_a, out.kl_p)));
    return out;
}

}  // namespace

Tensor kl_std_normal(const GaussianParams& g) {
    for (double v : g.var.data())
        if (v <= 0.0) throw NonPositiveVariance("kl_std_normal: var must be positive");
    size_t b = g.mu.shape()[0];
    Tensor one = Tensor::full(g.mu.shape(), 1.0);
    Tensor per = sub(sub(add(mul(g.mu, g.mu), g.var), one), log(g.var));
    return mul(batch_mean_of_sums(per, b), Tensor::scalar(0.5));
}

// One fused pass instead of the elementwise op chain: this sits on the widest
// tensors of every training step.  Accumulation is flat row-major, matching
// sum() over the per-entry tensor the chain used to build.
Tensor recon_loglik(const Tensor& x, const Tensor& mu_p, Likelihood lik) {
    if (x.shape() != mu_p.shape())
        throw ShapeMismatch("recon_loglik: x " + shape_str(x.shape()) + " vs mu " +
                            shape_str(mu_p.shape()));
    size_t b = x.shape()[0];
    size_t n = x.numel();
    const std::vector<double>& xv = x.data();
    const std::vector<double>& mv = mu_p.data();
    double total = 0.0;
    if (lik == Likelihood::Bernoulli) {
        for (size_t i = 0; i < n; ++i) {
            double p = std::min(std::max(mv[i], kBernoulliEps), 1.0 - kBernoulliEps);
            total += xv[i] * std::log(p) + (1.0 - xv[i]) * std::log(1.0 - p);
        }
    } else {
        const double c = -0.5 * std::log(2.0 * M_PI * kGaussianVar);
        const double hv = 0.5 / kGaussianVar;
        for (size_t i = 0; i < n; ++i) {
            double r = xv[i] - mv[i];
            total += c - hv * (r * r);
        }
    }
    auto backward_fn = [n, lik](TensorNode& node) {
        TensorNode& xn = *node.inputs[0];
        TensorNode& mn = *node.inputs[1];
        if (xn.requires_grad) xn.ensure_grad();
        if (mn.requires_grad) mn.ensure_grad();
        double g = node.grad[0];
        if (lik == Likelihood::Bernoulli) {
            for (size_t i = 0; i < n; ++i) {
                double m = mn.data[i];
                double p = std::min(std::max(m, kBernoulliEps), 1.0 - kBernoulliEps);
                if (xn.requires_grad) xn.grad[i] += g * (std::log(p) - std::log(1.0 - p));
                // clamp passes gradient on the closed interval only
                if (mn.requires_grad && m >= kBernoulliEps && m <= 1.0 - kBernoulliEps)
                    mn.grad[i] += g * (xn.data[i] / p - (1.0 - xn.data[i]) / (1.0 - p));
            }
        } else {
            for (size_t i = 0; i < n; ++i) {
                double r = (xn.data[i] - mn.data[i]) / kGaussianVar;
                if (xn.requires_grad) xn.grad[i] += g * -r;
                if (mn.requires_grad) mn.grad[i] += g * r;
            }
        }
    };
    Tensor sum_all =
        make_custom("recon_loglik", {}, {total}, {x, mu_p}, std::move(backward_fn));
    return mul(sum_all, Tensor::scalar(1.0 / (double)b));
}

LossBreakdown elbo_vae(const LossBreakdown& parts, double beta, double w) {
    return combine(parts, beta, w);
}

LossBreakdown elbo_uvitae(const LossBreakdown& parts, double w) { return combine(parts, 1.0, w); }

LossBreakdown elbo_cvitae(const LossBreakdown& parts, double w) { return combine(parts, 1.0, w); }

double warmup_weight(size_t epoch, size_t warmup) {
    if (warmup == 0) return 1.0;
    return std::min((double)epoch / (double)warmup, 1.0);
}

LossBreakdown compute_loss(const Model& m, const ForwardPass& fp, const Tensor& x, double w) {
    LossBreakdown parts;
    parts.recon = recon_loglik(x, fp.recon, m.cfg.likelihood);
    parts.kl_a = kl_std_normal(fp.qa);
    if (m.cfg.split()) parts.kl_p = kl_std_normal(fp.qp);
    switch (m.cfg.kind) {
        case ModelKind::Vae: return elbo_vae(parts, 1.0, w);
        case ModelKind::BetaVae: return elbo_vae(parts, m.cfg.beta, w);
        case ModelKind::UVitae: return elbo_uvitae(parts, w);
        case ModelKind::CVitae: return elbo_cvitae(parts, w);
    }
    throw ConfigError("compute_loss: unknown model kind");
}

namespace {

// per-image sum of the reconstruction log-likelihood, values only
void recon_rows(const Tensor& x, const Tensor& mu_p, Likelihood lik, std::vector<double>& out) {
    size_t b = x.shape()[0], d = x.shape()[1];
    const std::vector<double>& xv = x.data();
    const std::vector<double>& mv = mu_p.data();
    out.assign(b, 0.0);
    if (lik == Likelihood::Bernoulli) {
        for (size_t i = 0; i < b; ++i)
            for (size_t j = 0; j < d; ++j) {
                double p = std::min(std::max(mv[i * d + j], kBernoulliEps), 1.0 - kBernoulliEps);
                out[i] += xv[i * d + j] * std::log(p) + (1.0 - xv[i * d + j]) * std::log(1.0 - p);
            }
        return;
    }
    double c = -0.5 * std::log(2.0 * M_PI * kGaussianVar);
    for (size_t i = 0; i < b; ++i)
        for (size_t j = 0; j < d; ++j) {
            double r = xv[i * d + j] - mv[i * d + j];
            out[i] += c - 0.5 * r * r / kGaussianVar;
        }
}

// per-image sum of ln N(z; mu, var) over latent dimensions
void gauss_rows(const Tensor& z, const Tensor& mu, const Tensor& var, std::vector<double>& out) {
    size_t b = z.shape()[0], d = z.shape()[1];
    const std::vector<double>& zv = z.data();
    const std::vector<double>& mv = mu.data();
    const std::vector<double>& vv = var.data();
    out.assign(b, 0.0);
    for (size_t i = 0; i < b; ++i)
        for (size_t j = 0; j < d; ++j) {
            size_t k = i * d + j;
            double r = zv[k] - mv[k];
            out[i] += -0.5 * (std::log(2.0 * M_PI * vv[k]) + r * r / vv[k]);
        }
}

void std_normal_rows(const Tensor& z, std::vector<double>& out) {
    size_t b = z.shape()[0], d = z.shape()[1];
    const std::vector<double>& zv = z.data();
    out.assign(b, 0.0);
    for (size_t i = 0; i < b; ++i)
        for (size_t j = 0; j < d; ++j)
            out[i] += -0.5 * (std::log(2.0 * M_PI) + zv[i * d + j] * zv[i * d + j]);
}

Tensor draw_noise(size_t b, size_t d, RngStream& rng) {
    std::vector<double> v(b * d);
    for (auto& x : v) x = rng.normal();
    return Tensor::from_data({b, d}, std::move(v));
}

}  // namespace

std::vector<double> importance_loglik_per_image(const Model& m, const Tensor& x, size_t k,
                                                RngStream& rng) {
    if (k == 0) throw ConfigError("importance_loglik: need at least one sample");
    size_t b = x.shape()[0];
    bool split = m.cfg.split();
    size_t da = split ? m.cfg.d_a : m.cfg.d;
    std::vector<std::vector<double>> lw(b, std::vector<double>(k));
    std::vector<double> rec, lp, lq_a, lq_p, lp_p;
    for (size_t s = 0; s < k; ++s) {
        Tensor na = draw_noise(b, da, rng);
        Tensor np = split ? draw_noise(b, m.cfg.d_p, rng) : Tensor();
        ForwardPass fp = forward(m, x, na, np);
        recon_rows(x, fp.recon, m.cfg.likelihood, rec);
        std_normal_rows(fp.za, lp);
        gauss_rows(fp.za, fp.qa.mu, fp.qa.var, lq_a);
        for (size_t i = 0; i < b; ++i) lw[i][s] = rec[i] + lp[i] - lq_a[i];
        if (split) {
            std_normal_rows(fp.zp, lp_p);
            gauss_rows(fp.zp, fp.qp.mu, fp.qp.var, lq_p);
            for (size_t i = 0; i < b; ++i) lw[i][s] += lp_p[i] - lq_p[i];
        }
    }
    std::vector<double> out(b);
    for (size_t i = 0; i < b; ++i) {
        double hi = *std::max_element(lw[i].begin(), lw[i].end());
        if (!std::isfinite(hi)) throw AllZeroImportance("importance_loglik: all weights vanished");
        double acc = 0.0;
        for (double v : lw[i]) acc += std::exp(v - hi);
        out[i] = hi + std::log(acc) - std::log((double)k);
    }
    return out;
}

double importance_loglik(const Model& m, const Tensor& x, size_t k, RngStream& rng) {
    std::vector<double> rows = importance_loglik_per_image(m, x, k, rng);
    double acc = 0.0;
    for (double v : rows) acc += v;
    return acc / (double)rows.size();
}

}  // namespace vitae
