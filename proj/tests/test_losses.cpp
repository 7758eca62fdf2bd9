#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "vitae/errors.hpp"
#include "vitae/losses.hpp"
#include "vitae/models.hpp"
#include "vitae/rng.hpp"
#include "vitae/tensor.hpp"

using namespace vitae;

namespace {

ModelConfig tiny_cfg(ModelKind kind, TransformKind tk) {
    ModelConfig c;
    c.kind = kind;
    c.transform = tk;
    c.img_h = 8;
    c.img_w = 8;
    c.d = 4;
    c.d_a = 2;
    c.d_p = 2;
    c.enc_w1 = 16;
    c.enc_w2 = 12;
    c.dec_w1 = 12;
    c.dec_w2 = 12;
    c.tess_nx = 1;
    c.tess_ny = 1;
    c.zero_boundary = true;
    c.steps = 4;
    return c;
}

Tensor random_images(size_t b, size_t d, uint64_t seed) {
    RngStream r(seed, "img");
    std::vector<double> v(b * d);
    for (auto& x : v) x = r.uniform();
    return Tensor::from_data({b, d}, std::move(v));
}

Tensor normal_noise(size_t b, size_t d, uint64_t seed) {
    RngStream r(seed, "noise");
    std::vector<double> v(b * d);
    for (auto& x : v) x = r.normal();
    return Tensor::from_data({b, d}, std::move(v));
}

// Simpson's rule for the 1-d KL integral; the integrand decays like a Gaussian
double kl_by_quadrature(double mu, double var) {
    auto q = [&](double z) {
        return std::exp(-0.5 * (z - mu) * (z - mu) / var) / std::sqrt(2.0 * M_PI * var);
    };
    auto log_ratio = [&](double z) {
        return -0.5 * (z - mu) * (z - mu) / var - 0.5 * std::log(var) + 0.5 * z * z;
    };
    const double lo = mu - 10.0 * std::sqrt(var), hi = mu + 10.0 * std::sqrt(var);
    const size_t n = 40000;  // even
    double h = (hi - lo) / (double)n, acc = 0.0;
    for (size_t i = 0; i <= n; ++i) {
        double z = lo + h * (double)i;
        double f = q(z) * log_ratio(z);
        acc += f * (i == 0 || i == n ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0));
    }
    return acc * h / 3.0;
}

double ln_normal(double z, double mu, double var) {
    double r = z - mu;
    return -0.5 * (std::log(2.0 * M_PI * var) + r * r / var);
}

}  // namespace

TEST_CASE("kl against closed form, quadrature, and nonnegativity") {
    GaussianParams std_q{Tensor::zeros({1, 3}), Tensor::full({1, 3}, 1.0)};
    CHECK(kl_std_normal(std_q).value() == 0.0);

    GaussianParams shifted{Tensor::full({1, 1}, 1.0), Tensor::full({1, 1}, 1.0)};
    double got = kl_std_normal(shifted).value();
    CHECK(got == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(got == doctest::Approx(kl_by_quadrature(1.0, 1.0)).epsilon(1e-8));

    GaussianParams wide{Tensor::full({1, 1}, -0.4), Tensor::full({1, 1}, 2.3)};
    CHECK(kl_std_normal(wide).value() ==
          doctest::Approx(kl_by_quadrature(-0.4, 2.3)).epsilon(1e-8));

    RngStream r(7, "kl");
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> mu(4), var(4);
        for (auto& v : mu) v = r.uniform(-3, 3);
        for (auto& v : var) v = std::exp(r.uniform(-2, 2));
        GaussianParams g{Tensor::from_data({1, 4}, std::move(mu)),
                         Tensor::from_data({1, 4}, std::move(var))};
        CHECK(kl_std_normal(g).value() >= -1e-12);
    }

    GaussianParams nearly{Tensor::full({1, 1}, 1e-4), Tensor::full({1, 1}, 1.0)};
    CHECK(kl_std_normal(nearly).value() > 0.0);

    GaussianParams bad{Tensor::zeros({1, 1}), Tensor::zeros({1, 1})};
    CHECK_THROWS_AS(kl_std_normal(bad), NonPositiveVariance);
}

TEST_CASE("kl averages per-image sums over the batch") {
    // rows: (mu, var) = (1,1) on both dims -> 0.5 per dim; (0,1) -> 0
    GaussianParams g{Tensor::from_data({2, 2}, {1, 1, 0, 0}),
                     Tensor::full({2, 2}, 1.0)};
    CHECK(kl_std_normal(g).value() == doctest::Approx((1.0 + 0.0) / 2.0).epsilon(1e-14));
}

TEST_CASE("reconstruction log-likelihood closed forms") {
    Tensor half = Tensor::full({1, 1}, 0.5);
    CHECK(recon_loglik(half, half, Likelihood::Bernoulli).value() ==
          doctest::Approx(std::log(0.5)).epsilon(1e-14));

    Tensor x = random_images(1, 3, 2);
    CHECK(recon_loglik(x, x, Likelihood::Gaussian).value() ==
          doctest::Approx(3.0 * -0.5 * std::log(2.0 * M_PI * 0.1)).epsilon(1e-13));

    // batch mean of per-image sums, by hand
    Tensor xs = Tensor::from_data({2, 2}, {1, 0, 1, 1});
    Tensor ps = Tensor::from_data({2, 2}, {0.9, 0.2, 0.6, 0.7});
    double img0 = std::log(0.9) + std::log(0.8);
    double img1 = std::log(0.6) + std::log(0.7);
    CHECK(recon_loglik(xs, ps, Likelihood::Bernoulli).value() ==
          doctest::Approx((img0 + img1) / 2.0).epsilon(1e-13));
}

TEST_CASE("bernoulli gradient pushes the mean toward the target") {
    Tensor x = Tensor::from_data({1, 2}, {0.8, 0.3});
    Tensor mu = Tensor::from_data({1, 2}, {0.6, 0.9}, true);
    Tensor ll = recon_loglik(x, mu, Likelihood::Bernoulli);
    backward(ll);
    CHECK(mu.grad()[0] > 0.0);  // mu below target: log-lik grows with mu
    CHECK(mu.grad()[1] < 0.0);  // mu above target
}

TEST_CASE("elbo arithmetic and monotonicity in beta") {
    LossBreakdown parts;
    parts.recon = Tensor::scalar(-10.0);
    parts.kl_a = Tensor::scalar(2.0);

    LossBreakdown plain = elbo_vae(parts, 1.0, 1.0);
    CHECK(plain.elbo.value() == doctest::Approx(-12.0));
    LossBreakdown zero_kl = elbo_vae({Tensor::scalar(-10.0), Tensor::scalar(-10.0),
                                      Tensor::scalar(0.0), Tensor(), 1, 1},
                                     1.0, 1.0);
    CHECK(zero_kl.elbo.value() == zero_kl.recon.value());

    LossBreakdown weighted = elbo_vae(parts, 8.0, 0.5);
    CHECK(weighted.elbo.value() == doctest::Approx(-18.0).epsilon(1e-14));

    double prev = elbo_vae(parts, 1.0, 1.0).elbo.value();
    for (double beta : {2.0, 4.0, 8.0}) {
        double cur = elbo_vae(parts, beta, 1.0).elbo.value();
        CHECK(cur < prev);
        prev = cur;
    }
}

TEST_CASE("split elbo equals the single-latent form on the pooled kl") {
    LossBreakdown parts;
    parts.recon = Tensor::scalar(-25.0);
    parts.kl_a = Tensor::scalar(1.25);
    parts.kl_p = Tensor::scalar(0.75);
    LossBreakdown u = elbo_uvitae(parts, 0.8);

    LossBreakdown pooled;
    pooled.recon = parts.recon;
    pooled.kl_a = Tensor::scalar(2.0);
    CHECK(u.elbo.value() ==
          doctest::Approx(elbo_vae(pooled, 1.0, 0.8).elbo.value()).epsilon(1e-14));
}

TEST_CASE("decomposition identity holds for every model kind") {
    for (ModelKind kind : {ModelKind::Vae, ModelKind::BetaVae, ModelKind::UVitae, ModelKind::CVitae}) {
        ModelConfig cfg = tiny_cfg(kind, TransformKind::AffineDiffeo);
        cfg.beta = kind == ModelKind::BetaVae ? 8.0 : 1.0;
        RngStream init(13, "init");
        Model m = build_model(cfg, init);
        Tensor x = random_images(3, cfg.pixels(), 19);
        Tensor na = normal_noise(3, cfg.split() ? cfg.d_a : cfg.d, 20);
        Tensor np = normal_noise(3, cfg.d_p, 21);
        ForwardPass fp = forward(m, x, na, np);
        LossBreakdown bd = compute_loss(m, fp, x, 0.7);
        double manual = bd.recon.value() -
                        (bd.beta * bd.w) * (bd.kl_a.value() + bd.kl_p.value());
        CHECK(std::abs(bd.elbo.value() - manual) <= 1e-12);
        if (kind == ModelKind::BetaVae) CHECK(bd.beta == 8.0);
    }
}

TEST_CASE("conditional loss equals unconditional loss while the head is zero") {
    ModelConfig cu = tiny_cfg(ModelKind::UVitae, TransformKind::AffineDiffeo);
    ModelConfig cc = tiny_cfg(ModelKind::CVitae, TransformKind::AffineDiffeo);
    RngStream iu(61, "init"), ic(61, "init");
    Model u = build_model(cu, iu);
    Model c = build_model(cc, ic);
    Tensor x = random_images(3, cu.pixels(), 33);
    Tensor na = normal_noise(3, cu.d_a, 34);
    Tensor np = normal_noise(3, cu.d_p, 35);
    LossBreakdown lu = compute_loss(u, forward(u, x, na, np), x, 1.0);
    LossBreakdown lc = compute_loss(c, forward(c, x, na, np), x, 1.0);
    CHECK(std::abs(lu.elbo.value() - lc.elbo.value()) <= 1e-10);
    CHECK(std::abs(lu.recon.value() - lc.recon.value()) <= 1e-10);
    CHECK(std::abs(lu.kl_a.value() - lc.kl_a.value()) <= 1e-10);
    CHECK(std::abs(lu.kl_p.value() - lc.kl_p.value()) <= 1e-10);
}

TEST_CASE("warmup weight schedule") {
    CHECK(warmup_weight(0, 1000) == 0.0);
    CHECK(warmup_weight(500, 1000) == 0.5);
    CHECK(warmup_weight(1000, 1000) == 1.0);
    CHECK(warmup_weight(5000, 1000) == 1.0);
    CHECK(warmup_weight(3, 0) == 1.0);
}

TEST_CASE("single-sample elbo estimates agree across independent halves") {
    ModelConfig cfg = tiny_cfg(ModelKind::UVitae, TransformKind::Affine);
    cfg.img_h = 4;
    cfg.img_w = 4;
    RngStream init(41, "init");
    Model m = build_model(cfg, init);
    Tensor x = random_images(2, cfg.pixels(), 43);

    auto batch = [&](uint64_t lo, uint64_t hi) {
        double s = 0.0, s2 = 0.0;
        for (uint64_t t = lo; t < hi; ++t) {
            Tensor na = normal_noise(2, cfg.d_a, 1000 + t);
            Tensor np = normal_noise(2, cfg.d_p, 5000 + t);
            double e = compute_loss(m, forward(m, x, na, np), x, 1.0).elbo.value();
            s += e;
            s2 += e * e;
        }
        double n = (double)(hi - lo);
        double mean = s / n;
        double var = (s2 - n * mean * mean) / (n - 1.0);
        return std::pair<double, double>(mean, var / n);
    };
    auto [m1, v1] = batch(0, 200);
    auto [m2, v2] = batch(200, 400);
    CHECK(std::abs(m1 - m2) <= 3.0 * std::sqrt(v1 + v2) + 1e-12);
}

TEST_CASE("importance estimate at K=1 is the single-sample integrand") {
    ModelConfig cfg = tiny_cfg(ModelKind::CVitae, TransformKind::AffineDiffeo);
    RngStream init(51, "init");
    Model m = build_model(cfg, init);
    std::vector<double>& hb = m.pg_out.b.leaf_data();
    for (size_t i = 0; i < hb.size(); ++i) hb[i] = 0.02 * ((i % 2) ? -1.0 : 1.0);
    Tensor x = random_images(2, cfg.pixels(), 53);

    RngStream r1(97, "imp");
    std::vector<double> est = importance_loglik_per_image(m, x, 1, r1);

    // replay the same draws by hand
    RngStream r2(97, "imp");
    std::vector<double> va(2 * cfg.d_a), vp(2 * cfg.d_p);
    for (auto& v : va) v = r2.normal();
    for (auto& v : vp) v = r2.normal();
    ForwardPass fp = forward(m, x, Tensor::from_data({2, cfg.d_a}, std::move(va)),
                             Tensor::from_data({2, cfg.d_p}, std::move(vp)));
    for (size_t i = 0; i < 2; ++i) {
        double rec = 0.0;
        for (size_t j = 0; j < cfg.pixels(); ++j) {
            size_t k = i * cfg.pixels() + j;
            double p = std::min(std::max(fp.recon.data()[k], 1e-7), 1.0 - 1e-7);
            rec += x.data()[k] * std::log(p) + (1.0 - x.data()[k]) * std::log(1.0 - p);
        }
        double lw = rec;
        for (size_t j = 0; j < cfg.d_a; ++j) {
            size_t k = i * cfg.d_a + j;
            lw += ln_normal(fp.za.data()[k], 0.0, 1.0) -
                  ln_normal(fp.za.data()[k], fp.qa.mu.data()[k], fp.qa.var.data()[k]);
        }
        for (size_t j = 0; j < cfg.d_p; ++j) {
            size_t k = i * cfg.d_p + j;
            lw += ln_normal(fp.zp.data()[k], 0.0, 1.0) -
                  ln_normal(fp.zp.data()[k], fp.qp.mu.data()[k], fp.qp.var.data()[k]);
        }
        CHECK(est[i] == doctest::Approx(lw).epsilon(1e-12));
    }
}

TEST_CASE("importance estimate does not decrease with K") {
    ModelConfig cfg = tiny_cfg(ModelKind::Vae, TransformKind::AffineDiffeo);
    cfg.img_h = 4;
    cfg.img_w = 4;
    cfg.d = 2;
    RngStream init(61, "init");
    Model m = build_model(cfg, init);
    Tensor x = random_images(2, cfg.pixels(), 63);

    const size_t reps = 50;
    double s1 = 0, s1sq = 0, s64 = 0, s64sq = 0;
    for (size_t t = 0; t < reps; ++t) {
        RngStream ra(200 + t, "imp");
        double e1 = importance_loglik(m, x, 1, ra);
        RngStream rb(400 + t, "imp");
        double e64 = importance_loglik(m, x, 64, rb);
        s1 += e1;
        s1sq += e1 * e1;
        s64 += e64;
        s64sq += e64 * e64;
    }
    double n = (double)reps;
    double m1 = s1 / n, m64 = s64 / n;
    double v1 = (s1sq - n * m1 * m1) / (n - 1.0) / n;
    double v64 = (s64sq - n * m64 * m64) / (n - 1.0) / n;
    CHECK(m64 >= m1 - 2.0 * std::sqrt(v1 + v64));
}

TEST_CASE("importance recovers log p(x) exactly on a degenerate model") {
    // decoder ignores z (all-zero weights -> every pixel 0.5) and q is the
    // prior, so every importance weight equals p(x|z) exactly
    ModelConfig cfg = tiny_cfg(ModelKind::Vae, TransformKind::AffineDiffeo);
    RngStream init(71, "init");
    Model m = build_model(cfg, init);
    for (auto& [name, t] : m.named_params()) {
        std::vector<double>& v = t.leaf_data();
        std::fill(v.begin(), v.end(), 0.0);
    }
    double b0 = std::log(std::exp(1.0 - 1e-6) - 1.0);  // softplus(b0) + 1e-6 == 1
    std::vector<double>& vb = m.q_var.b.leaf_data();
    std::fill(vb.begin(), vb.end(), b0);

    Tensor x = random_images(3, cfg.pixels(), 73);
    RngStream r(75, "imp");
    double est = importance_loglik(m, x, 32, r);
    CHECK(est == doctest::Approx((double)cfg.pixels() * std::log(0.5)).epsilon(1e-9));
}

TEST_CASE("recon_loglik gradients pass finite differences for both likelihoods") {
    RngStream rng(77, "img");
    const size_t b = 3, d = 10;
    std::vector<double> xv(b * d), mv(b * d);
    for (auto& v : xv) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
    // probe means strictly inside the clamp interval so the finite-difference
    // step never crosses the kink at its ends
    for (auto& v : mv) v = rng.uniform(0.05, 0.95);
    Tensor x = Tensor::from_data({b, d}, xv);

    Tensor mu_b = Tensor::from_data({b, d}, mv, true);
    CHECK(finite_diff_check([&](const Tensor& m) { return recon_loglik(x, m, Likelihood::Bernoulli); },
                            mu_b) < 1e-6);

    Tensor mu_g = Tensor::from_data({b, d}, mv, true);
    CHECK(finite_diff_check([&](const Tensor& m) { return recon_loglik(x, m, Likelihood::Gaussian); },
                            mu_g) < 1e-6);

    // and through x for the gaussian case (continuous everywhere)
    Tensor xg = Tensor::from_data({b, d}, mv, true);
    Tensor mu_c = Tensor::from_data({b, d}, xv);
    CHECK(finite_diff_check([&](const Tensor& xx) { return recon_loglik(xx, mu_c, Likelihood::Gaussian); },
                            xg) < 1e-6);

    // outside the clamp the mean gradient is exactly zero
    Tensor mu_sat = Tensor::from_data({1, 2}, {1e-9, 1.0 - 1e-9}, true);
    Tensor x_sat = Tensor::from_data({1, 2}, {1.0, 0.0});
    Tensor l = recon_loglik(x_sat, mu_sat, Likelihood::Bernoulli);
    mu_sat.zero_grad();
    backward(l);
    CHECK(mu_sat.grad()[0] == 0.0);
    CHECK(mu_sat.grad()[1] == 0.0);
}
