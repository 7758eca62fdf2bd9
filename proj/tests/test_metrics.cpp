#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "vitae/errors.hpp"
#include "vitae/metrics.hpp"
#include "vitae/models.hpp"
#include "vitae/rng.hpp"
#include "vitae/tensor.hpp"

using namespace vitae;

namespace {

Tensor codes2(std::vector<double> v, size_t n, size_t d) {
    return Tensor::from_data({n, d}, std::move(v));
}

std::vector<FactorSpec> discrete_specs(std::initializer_list<size_t> cards) {
    std::vector<FactorSpec> out;
    size_t i = 0;
    for (size_t c : cards) out.push_back({"f" + std::to_string(i++), FactorType::Discrete, c});
    return out;
}

// balanced 4x4 grid: dimension 0 carries factor 0 exactly, dimension 1
// carries factor 1 exactly; everything about it evaluates to exact rationals
void perfect_grid(Tensor& train_codes, Tensor& train_facs, Tensor& eval_codes,
                  Tensor& eval_facs) {
    std::vector<double> tc, tf, ec, ef;
    for (int copy = 0; copy < 2; ++copy)
        for (int a = 0; a < 4; ++a)
            for (int b = 0; b < 4; ++b) {
                tc.push_back(a);
                tc.push_back(b);
                tf.push_back(a);
                tf.push_back(b);
            }
    for (int a = 0; a < 4; ++a)
        for (int b = 0; b < 4; ++b) {
            ec.push_back(a);
            ec.push_back(b);
            ef.push_back(a);
            ef.push_back(b);
        }
    train_codes = codes2(std::move(tc), 32, 2);
    train_facs = codes2(std::move(tf), 32, 2);
    eval_codes = codes2(std::move(ec), 16, 2);
    eval_facs = codes2(std::move(ef), 16, 2);
}

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

}  // namespace

TEST_CASE("knn basics: exact hit, constant labels, xor leave-one-out") {
    Tensor train = codes2({0, 0, 1, 1, 0, 1, 1, 0}, 4, 2);
    std::vector<double> labels = {0, 0, 1, 1};

    KnnResult exact = knn_classify(train, labels, codes2({1, 1}, 1, 2), {0}, 1);
    CHECK(exact.predictions[0] == 0.0);

    KnnResult constant =
        knn_classify(train, {7, 7, 7, 7}, codes2({0.3, 0.7, 0.9, 0.1}, 2, 2), {7, 7}, 3);
    CHECK(constant.accuracy == 1.0);

    // xor: each point's nearest other points vote for the wrong class
    size_t wrong = 0;
    for (size_t leave = 0; leave < 4; ++leave) {
        std::vector<double> tc, tl, qc{train.data()[leave * 2], train.data()[leave * 2 + 1]};
        for (size_t i = 0; i < 4; ++i) {
            if (i == leave) continue;
            tc.push_back(train.data()[i * 2]);
            tc.push_back(train.data()[i * 2 + 1]);
            tl.push_back(labels[i]);
        }
        KnnResult r = knn_classify(codes2(std::move(tc), 3, 2), tl, codes2(std::move(qc), 1, 2),
                                   {labels[leave]}, 1);
        if (r.accuracy == 0.0) ++wrong;
    }
    CHECK(wrong == 4);
}

TEST_CASE("knn tie rules are deterministic") {
    // equal distances: the smaller train index wins
    KnnResult by_index =
        knn_classify(codes2({-1, 1}, 2, 1), {2, 7}, codes2({0}, 1, 1), {2}, 1);
    CHECK(by_index.predictions[0] == 2.0);

    // split vote: the smaller label wins
    KnnResult by_label =
        knn_classify(codes2({-1, 1}, 2, 1), {5, 3}, codes2({0}, 1, 1), {3}, 2);
    CHECK(by_label.predictions[0] == 3.0);

    CHECK_THROWS_AS(knn_classify(Tensor::zeros({0, 1}), {}, codes2({0}, 1, 1), {0}, 1),
                    EmptyTrainSet);
}

TEST_CASE("importance concentrates on the informative dimension") {
    RngStream r(3, "mk");
    size_t n = 400;
    std::vector<double> codes(n * 2), facs(n);
    for (size_t i = 0; i < n; ++i) {
        double v = (double)(i % 4);
        codes[i * 2] = v;
        codes[i * 2 + 1] = 0.0;  // dead dimension
        facs[i] = v;
    }
    ImportanceMatrix im = importance_matrix(codes2(std::move(codes), n, 2),
                                            codes2(std::move(facs), n, 1),
                                            discrete_specs({4}), 5, 7);
    CHECK(im.at(0, 0) >= 0.5);
    CHECK(im.at(1, 0) <= 0.1);
}

TEST_CASE("pure-noise codes carry no importance") {
    RngStream r(11, "noise");
    size_t n = 1000;
    std::vector<double> codes(n * 2), facs(n);
    for (size_t i = 0; i < n; ++i) {
        codes[i * 2] = r.uniform();
        codes[i * 2 + 1] = r.uniform();
        facs[i] = (double)r.below(4);
    }
    ImportanceMatrix im = importance_matrix(codes2(std::move(codes), n, 2),
                                            codes2(std::move(facs), n, 1),
                                            discrete_specs({4}), 5, 13);
    for (double v : im.r) CHECK(v < 0.1);
}

TEST_CASE("duplicated latent dimension duplicates its importance row") {
    RngStream r(17, "dup");
    size_t n = 200;
    std::vector<double> codes(n * 2), facs(n);
    for (size_t i = 0; i < n; ++i) {
        double v = r.uniform() + (double)(i % 3);
        codes[i * 2] = v;
        codes[i * 2 + 1] = v;
        facs[i] = (double)(i % 3);
    }
    ImportanceMatrix im = importance_matrix(codes2(std::move(codes), n, 2),
                                            codes2(std::move(facs), n, 1),
                                            discrete_specs({3}), 5, 19);
    CHECK(im.at(0, 0) == im.at(1, 0));
}

TEST_CASE("degenerate factors are rejected") {
    Tensor tc = codes2({0, 1, 2, 3}, 4, 1);
    Tensor tf = codes2({0, 1, 0, 1}, 4, 1);
    Tensor ec = codes2({0.5, 1.5}, 2, 1);
    Tensor ef_const = codes2({1, 1}, 2, 1);
    CHECK_THROWS_AS(importance_matrix(tc, tf, ec, ef_const, discrete_specs({2}), 1),
                    DegenerateFactor);

    std::vector<FactorSpec> cont = {{"c0", FactorType::Continuous, 0}};
    CHECK_THROWS_AS(importance_matrix(tc, tf, ec, ef_const, cont, 1), DegenerateFactor);
}

TEST_CASE("continuous factors use 1-NN regression R^2") {
    // code dimension 0 equals the factor -> perfect regression; dimension 1
    // is unrelated -> floored at zero
    size_t n = 64;
    std::vector<double> tc(n * 2), tf(n), ec, ef;
    RngStream r(23, "cont");
    for (size_t i = 0; i < n; ++i) {
        double v = r.uniform(-2, 2);
        tc[i * 2] = v;
        tc[i * 2 + 1] = r.uniform(-2, 2);
        tf[i] = v;
    }
    for (size_t i = 0; i < 16; ++i) {
        double v = tf[i * 3];  // values that exist in train, so 1-NN is exact
        ec.push_back(v);
        ec.push_back(r.uniform(-2, 2));
        ef.push_back(v);
    }
    std::vector<FactorSpec> spec = {{"c0", FactorType::Continuous, 0}};
    ImportanceMatrix im = importance_matrix(codes2(std::move(tc), n, 2),
                                            codes2(std::move(tf), n, 1),
                                            codes2(std::move(ec), 16, 2),
                                            codes2(std::move(ef), 16, 1), spec, 1);
    CHECK(im.at(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(im.at(1, 0) >= 0.0);
    CHECK(im.at(1, 0) < 0.5);
}

TEST_CASE("d_score closed forms") {
    ImportanceMatrix perm;
    perm.d = perm.f = 3;
    perm.r = {0.4, 0, 0, 0, 0.2, 0, 0, 0, 0.9};
    CHECK(d_score(perm) == 1.0);

    ImportanceMatrix uniform;
    uniform.d = 2;
    uniform.f = 4;
    uniform.r = {0.3, 0.3, 0.3, 0.3, 0.1, 0.1, 0.1, 0.1};
    CHECK(d_score(uniform) == doctest::Approx(0.0).epsilon(1e-15));

    ImportanceMatrix mixed;
    mixed.d = mixed.f = 2;
    mixed.r = {0.9, 0.1, 0.1, 0.9};
    double h = -(0.9 * std::log(0.9) + 0.1 * std::log(0.1));
    CHECK(d_score(mixed) == doctest::Approx(1.0 - h / std::log(2.0)).epsilon(1e-12));

    ImportanceMatrix zero;
    zero.d = zero.f = 2;
    zero.r = {0, 0, 0, 0};
    CHECK_THROWS_AS(d_score(zero), AllZeroImportance);

    // single labeled factor: any informative row counts as fully disentangled
    ImportanceMatrix single;
    single.d = 2;
    single.f = 1;
    single.r = {0.6, 0.0};
    CHECK(d_score(single) == 1.0);
}

TEST_CASE("d_score invariances: permutations and uniform scaling") {
    RngStream r(29, "inv");
    size_t n = 300;
    std::vector<double> codes(n * 3), facs(n * 2);
    for (size_t i = 0; i < n; ++i) {
        codes[i * 3] = (double)(i % 4) + 0.1 * r.uniform();
        codes[i * 3 + 1] = (double)((i / 4) % 3) + 0.1 * r.uniform();
        codes[i * 3 + 2] = r.uniform();
        facs[i * 2] = (double)(i % 4);
        facs[i * 2 + 1] = (double)((i / 4) % 3);
    }
    Tensor c = codes2(codes, n, 3);
    Tensor f = codes2(facs, n, 2);
    auto specs = discrete_specs({4, 3});
    ImportanceMatrix base = importance_matrix(c, f, specs, 5, 31);
    double base_score = d_score(base);

    // permute latent dimensions (swap columns 0 and 2 of the codes)
    std::vector<double> pc(codes);
    for (size_t i = 0; i < n; ++i) std::swap(pc[i * 3], pc[i * 3 + 2]);
    ImportanceMatrix permuted = importance_matrix(codes2(std::move(pc), n, 3), f, specs, 5, 31);
    for (size_t j = 0; j < 2; ++j) {
        CHECK(permuted.at(0, j) == base.at(2, j));
        CHECK(permuted.at(2, j) == base.at(0, j));
    }
    CHECK(d_score(permuted) == doctest::Approx(base_score).epsilon(1e-12));

    // permute factor columns
    std::vector<double> pf(facs);
    for (size_t i = 0; i < n; ++i) std::swap(pf[i * 2], pf[i * 2 + 1]);
    ImportanceMatrix fperm =
        importance_matrix(c, codes2(std::move(pf), n, 2), discrete_specs({3, 4}), 5, 31);
    for (size_t i = 0; i < 3; ++i) {
        CHECK(fperm.at(i, 0) == base.at(i, 1));
        CHECK(fperm.at(i, 1) == base.at(i, 0));
    }
    CHECK(d_score(fperm) == doctest::Approx(base_score).epsilon(1e-12));

    // uniform positive scaling preserves neighbor order, hence R, bit for bit
    std::vector<double> sc(codes);
    for (double& v : sc) v *= 3.7;
    ImportanceMatrix scaled = importance_matrix(codes2(std::move(sc), n, 3), f, specs, 5, 31);
    CHECK(scaled.r == base.r);
    CHECK(d_score(scaled) == d_score(base));
}

TEST_CASE("an exactly disentangled grid scores 1.0") {
    Tensor tc, tf, ec, ef;
    perfect_grid(tc, tf, ec, ef);
    ImportanceMatrix im = importance_matrix(tc, tf, ec, ef, discrete_specs({4, 4}), 5);
    CHECK(im.at(0, 0) == 0.75);
    CHECK(im.at(0, 1) == 0.0);
    CHECK(im.at(1, 0) == 0.0);
    CHECK(im.at(1, 1) == 0.75);
    CHECK(d_score(im) == 1.0);
}

TEST_CASE("d_score stays in the unit interval on random matrices") {
    RngStream r(37, "rand");
    for (int trial = 0; trial < 200; ++trial) {
        ImportanceMatrix im;
        im.d = 1 + r.below(5);
        im.f = 1 + r.below(5);
        im.r.resize(im.d * im.f);
        for (double& v : im.r) v = r.uniform();
        double s = d_score(im);
        CHECK(s >= 0.0);
        CHECK(s <= 1.0 + 1e-15);
    }
}

TEST_CASE("model codes stack posterior means for both branches") {
    ModelConfig cfg = tiny_cfg(ModelKind::UVitae, TransformKind::Affine);
    RngStream init(41, "init");
    Model m = build_model(cfg, init);
    Tensor x = random_images(5, cfg.pixels(), 43);
    Tensor codes = model_codes(m, x);  // one chunk: bit-identical to encode
    CHECK(codes.shape() == std::vector<size_t>{5, cfg.d_a + cfg.d_p});
    EncodeResult er = encode(m, x);
    for (size_t i = 0; i < 5; ++i) {
        for (size_t j = 0; j < cfg.d_a; ++j)
            CHECK(codes.data()[i * 4 + j] == er.qa.mu.data()[i * 2 + j]);
        for (size_t j = 0; j < cfg.d_p; ++j)
            CHECK(codes.data()[i * 4 + 2 + j] == er.qp.mu.data()[i * 2 + j]);
    }

    // chunked evaluation matches up to matmul-kernel rounding differences
    Tensor chunked = model_codes(m, x, 2);
    for (size_t i = 0; i < chunked.numel(); ++i)
        CHECK(chunked.data()[i] == doctest::Approx(codes.data()[i]).epsilon(1e-12));
}

TEST_CASE("latent traversal sweeps one dimension at a time") {
    ModelConfig cfg = tiny_cfg(ModelKind::CVitae, TransformKind::AffineDiffeo);
    RngStream init(47, "init");
    Model m = build_model(cfg, init);
    Tensor x = random_images(1, cfg.pixels(), 49);

    Tensor strip = latent_traversal(m, x, 0, -3, 3, 9);
    CHECK(strip.shape() == std::vector<size_t>{9, cfg.pixels()});

    // steps == 1 keeps the posterior mean: identical to the plain
    // mean-reconstruction pathway
    Tensor one = latent_traversal(m, x, 1, -3, 3, 1);
    EncodeResult er = encode(m, x);
    Tensor plain = decode(m, er.qa.mu, er.qp.mu).recon;
    CHECK(one.data() == plain.data());

    // with the transform head still zero, perspective sweeps cannot move the
    // image: every step decodes identically
    Tensor pstrip = latent_traversal(m, x, cfg.d_a, -3, 3, 5);
    for (size_t s = 1; s < 5; ++s)
        for (size_t j = 0; j < cfg.pixels(); ++j)
            CHECK(pstrip.data()[s * cfg.pixels() + j] == pstrip.data()[j]);

    // an appearance sweep, by contrast, changes the decoded image
    Tensor astrip = latent_traversal(m, x, 0, -3, 3, 5);
    bool moved = false;
    for (size_t j = 0; j < cfg.pixels(); ++j)
        if (astrip.data()[j] != astrip.data()[4 * cfg.pixels() + j]) moved = true;
    CHECK(moved);

    CHECK_THROWS_AS(latent_traversal(m, x, 99, -3, 3, 5), ConfigError);
}
