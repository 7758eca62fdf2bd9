#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "vitae/data.hpp"
#include "vitae/losses.hpp"
#include "vitae/models.hpp"
#include "vitae/optimizer.hpp"
#include "vitae/rng.hpp"
#include "vitae/tensor.hpp"

using namespace vitae;

namespace {

std::vector<std::pair<std::string, Tensor>> one_param(std::vector<double> vals) {
    size_t n = vals.size();
    return {{"p", Tensor::from_data({n}, std::move(vals), true)}};
}

void set_grad(Tensor& t, const std::vector<double>& g) {
    t.node()->ensure_grad();
    t.node()->grad = g;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string temp_dir(const char* name) {
    auto p = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p.string();
}

TrainConfig smoke_config() {
    TrainConfig c;
    c.kind = ModelKind::Vae;
    c.learning_rate = 1e-3;
    c.batch_size = 32;
    c.epochs = 3;
    c.beta = 1.0;
    c.seed = 11;
    c.subsample = 64;
    c.d = 3;
    c.enc_w1 = 24;
    c.enc_w2 = 16;
    c.dec_w1 = 16;
    c.dec_w2 = 16;
    c.checkpoint_every = 2;
    return c;
}

}  // namespace

TEST_CASE("adam: zero gradient leaves parameters untouched while moments decay") {
    auto params = one_param({1.5, -2.0, 0.25});
    AdamState st = make_adam_state(params);
    // seed the moments with one real step, then feed zero gradients
    set_grad(params[0].second, {1.0, -1.0, 2.0});
    REQUIRE(adam_step(params, st, 0.0));  // lr 0: moments move, params don't
    std::vector<double> m1 = st.m[0], v1 = st.v[0];
    CHECK(params[0].second.data() == std::vector<double>{1.5, -2.0, 0.25});

    set_grad(params[0].second, {0.0, 0.0, 0.0});
    REQUIRE(adam_step(params, st, 0.0));
    for (size_t j = 0; j < 3; ++j) {
        CHECK(st.m[0][j] == doctest::Approx(0.9 * m1[j]).epsilon(1e-15));
        CHECK(st.v[0][j] == doctest::Approx(0.999 * v1[j]).epsilon(1e-15));
    }

    // fresh state + zero gradient: update is exactly zero even with lr > 0
    auto fresh = one_param({3.0, 4.0});
    AdamState st2 = make_adam_state(fresh);
    set_grad(fresh[0].second, {0.0, 0.0});
    REQUIRE(adam_step(fresh, st2, 0.5));
    CHECK(fresh[0].second.data() == std::vector<double>{3.0, 4.0});
    CHECK(st2.t == 1);
}

TEST_CASE("adam: first step matches the hand formula") {
    const double lr = 0.07;
    const std::vector<double> p0 = {0.3, -1.1, 5.0};
    const std::vector<double> g = {0.8, -0.05, 3.0};
    auto params = one_param(p0);
    AdamState st = make_adam_state(params);
    set_grad(params[0].second, g);
    REQUIRE(adam_step(params, st, lr));
    for (size_t j = 0; j < 3; ++j) {
        double m = (1 - 0.9) * g[j];
        double v = (1 - 0.999) * g[j] * g[j];
        double expect = p0[j] - lr * (m / (1 - 0.9)) / (std::sqrt(v / (1 - 0.999)) + 1e-8);
        CHECK(params[0].second.data()[j] == expect);
    }
    CHECK(st.t == 1);
}

TEST_CASE("adam: quadratic bowl converges below 1e-4 within 2000 steps") {
    const std::vector<double> target = {2.0, -3.0, 0.5};
    Tensor p = Tensor::from_data({1, 3}, {0.0, 0.0, 0.0}, true);
    Tensor c = Tensor::from_data({1, 3}, std::vector<double>(target));
    std::vector<std::pair<std::string, Tensor>> params = {{"p", p}};
    AdamState st = make_adam_state(params);
    for (int i = 0; i < 2000; ++i) {
        Tensor diff = sub(p, c);
        Tensor loss = sum(mul(diff, diff));
        p.zero_grad();
        backward(loss);
        REQUIRE(adam_step(params, st, 0.01));
    }
    for (size_t j = 0; j < 3; ++j)
        CHECK(std::abs(p.data()[j] - target[j]) < 1e-4);
}

TEST_CASE("adam: non-finite gradient aborts the step untouched and flags divergence") {
    auto params = one_param({1.0, 2.0});
    AdamState st = make_adam_state(params);
    set_grad(params[0].second, {0.5, 0.5});
    REQUIRE(adam_step(params, st, 0.1));
    std::vector<double> p_before = params[0].second.data();
    std::vector<double> m_before = st.m[0];
    size_t t_before = st.t;

    set_grad(params[0].second, {1.0, std::numeric_limits<double>::quiet_NaN()});
    CHECK_FALSE(adam_step(params, st, 0.1));
    CHECK(params[0].second.data() == p_before);
    CHECK(st.m[0] == m_before);
    CHECK(st.t == t_before);

    set_grad(params[0].second, {std::numeric_limits<double>::infinity(), 0.0});
    CHECK_FALSE(adam_step(params, st, 0.1));
    CHECK(params[0].second.data() == p_before);
}

TEST_CASE("adam: per-parameter updates are independent of list order") {
    auto make = [] {
        return std::vector<std::pair<std::string, Tensor>>{
            {"a", Tensor::from_data({2}, {1.0, -1.0}, true)},
            {"b", Tensor::from_data({3}, {0.2, 0.4, 0.6}, true)},
        };
    };
    auto fwd = make();
    auto rev = make();
    std::swap(rev[0], rev[1]);
    AdamState sf = make_adam_state(fwd);
    AdamState sr = make_adam_state(rev);
    for (int step = 0; step < 5; ++step) {
        set_grad(fwd[0].second, {0.3, -0.2});
        set_grad(fwd[1].second, {0.1, 0.0, -0.5});
        set_grad(rev[1].second, {0.3, -0.2});
        set_grad(rev[0].second, {0.1, 0.0, -0.5});
        REQUIRE(adam_step(fwd, sf, 0.05));
        REQUIRE(adam_step(rev, sr, 0.05));
    }
    CHECK(fwd[0].second.data() == rev[1].second.data());
    CHECK(fwd[1].second.data() == rev[0].second.data());
}

TEST_CASE("config: parse, defaults, overrides, echo round-trip") {
    std::string text =
        "# comment line\n"
        "model = c-vitae\n"
        "transform=cpab\n"
        "learning_rate = 0.001  # inline comment\n"
        "batch_size=64\n"
        "epochs=10\n"
        "beta=4.5\n"
        "seed=123\n"
        "K=25\n"
        "data=sprites\n"
        "subsample=256\n"
        "augment=true\n"
        "d_a=3\n"
        "d_p=2\n"
        "likelihood=gaussian\n"
        "tess_nx=3\n"
        "tess_ny=2\n"
        "zero_boundary=0\n"
        "steps=6\n";
    TrainConfig c = parse_config_text(text, "inline");
    CHECK(c.kind == ModelKind::CVitae);
    CHECK(c.transform == TransformKind::Cpab);
    CHECK(c.learning_rate == 0.001);
    CHECK(c.batch_size == 64);
    CHECK(c.epochs == 10);
    CHECK(c.warmup == 0);
    CHECK(c.resolved_warmup() == 5);  // epochs/2 when unset
    CHECK(c.beta == 4.5);
    CHECK(c.seed == 123);
    CHECK(c.k_importance == 25);
    CHECK(c.subsample == 256);
    CHECK(c.augment);
    CHECK(c.d_a == 3);
    CHECK(c.d_p == 2);
    CHECK(c.likelihood == Likelihood::Gaussian);
    CHECK(c.tess_nx == 3);
    CHECK(c.tess_ny == 2);
    CHECK_FALSE(c.zero_boundary);
    CHECK(c.steps == 6);

    // defaults untouched by the file
    CHECK(c.d == 4);
    CHECK(c.enc_w1 == 128);
    CHECK(c.checkpoint_every == 50);

    apply_override(c, "seed", "999");
    apply_override(c, "warmup", "3");
    CHECK(c.seed == 999);
    CHECK(c.resolved_warmup() == 3);

    // echo lists every field and parses back to the identical config
    std::string echo = config_echo(c);
    TrainConfig back = parse_config_text(echo, "echo");
    CHECK(config_echo(back) == echo);
    CHECK(back.kind == c.kind);
    CHECK(back.learning_rate == c.learning_rate);
    CHECK(back.warmup == 3);
    for (const char* key : {"model", "transform", "learning_rate", "batch_size", "epochs",
                            "warmup", "beta", "seed", "K", "data", "subsample", "augment", "d",
                            "d_a", "d_p", "likelihood", "enc_w1", "enc_w2", "dec_w1", "dec_w2",
                            "tess_nx", "tess_ny", "zero_boundary", "steps", "checkpoint_every"})
        CHECK(echo.find(std::string(key) + "=") != std::string::npos);
}

TEST_CASE("config: invalid input is rejected") {
    CHECK_THROWS_AS(parse_config_text("learning_rate=0\n", "t"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("learning_rate=-1e-4\n", "t"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("beta=0.5\n", "t"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("batch_size=0\n", "t"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("frobnicate=1\n", "t"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("model=resnet\n", "t"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("just a line\n", "t"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("epochs=ten\n", "t"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("augment=maybe\n", "t"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("batch_size=-4\n", "t"), ConfigError);
    CHECK_THROWS_AS(parse_config(std::string("/nonexistent/config.cfg")), IoError);
}

TEST_CASE("train: epochs=0 returns the initialized model and an empty log") {
    TrainConfig c = smoke_config();
    c.epochs = 0;
    LabeledImageDataset ds = load_data_spec(c);
    std::string dir = temp_dir("vitae_opt_e0");
    TrainResult res = train(c, ds, dir);
    CHECK(res.log.empty());
    CHECK_FALSE(res.diverged);
    CHECK(std::filesystem::exists(dir + "/model.bin"));
    CHECK(std::filesystem::exists(dir + "/loss.csv"));

    // the returned model is exactly the seeded initialization
    RngStream init(c.seed, "init");
    Model fresh = build_model(c.model_config(ds.img_h, ds.img_w), init);
    auto got = res.model.named_params();
    auto want = fresh.named_params();
    REQUIRE(got.size() == want.size());
    for (size_t i = 0; i < got.size(); ++i)
        CHECK(got[i].second.data() == want[i].second.data());
}

TEST_CASE("train: sprite smoke run improves the elbo and logs every epoch") {
    TrainConfig c;
    c.kind = ModelKind::Vae;
    c.learning_rate = 1e-3;
    c.batch_size = 128;
    c.epochs = 50;
    c.seed = 7;
    c.subsample = 512;
    c.d = 4;
    LabeledImageDataset ds = load_data_spec(c);
    REQUIRE(ds.size() == 512);
    TrainResult res = train(c, ds);
    REQUIRE_FALSE(res.diverged);
    REQUIRE(res.log.size() == 50);
    CHECK(res.log.back().elbo > res.log.front().elbo);
    for (size_t e = 0; e < res.log.size(); ++e) {
        const EpochRow& r = res.log[e];
        CHECK(r.epoch == e);
        CHECK(std::isfinite(r.elbo));
        CHECK(r.kl_a >= 0.0);
        CHECK(r.kl_p == 0.0);  // single-latent
        CHECK(r.beta == 1.0);
        CHECK(r.w == warmup_weight(e, 25));
        // logged decomposition identity, exact
        CHECK(r.elbo == r.recon - r.beta * r.w * (r.kl_a + r.kl_p));
    }
    // warmup ramps: first epoch weight 0, past the midpoint weight 1
    CHECK(res.log.front().w == 0.0);
    CHECK(res.log.back().w == 1.0);
}

TEST_CASE("train: fixed seed gives bit-identical checkpoints across runs") {
    TrainConfig c = smoke_config();
    c.kind = ModelKind::CVitae;
    c.transform = TransformKind::Affine;
    c.d_a = 2;
    c.d_p = 2;
    c.epochs = 2;
    c.subsample = 48;
    c.batch_size = 16;
    std::string d1 = temp_dir("vitae_opt_det1");
    std::string d2 = temp_dir("vitae_opt_det2");
    LabeledImageDataset ds = load_data_spec(c);
    TrainResult r1 = train(c, ds, d1);
    TrainResult r2 = train(c, ds, d2);
    REQUIRE_FALSE(r1.diverged);
    REQUIRE(r1.log.size() == 2);
    REQUIRE(r2.log.size() == 2);
    for (size_t e = 0; e < 2; ++e) {
        CHECK(r1.log[e].elbo == r2.log[e].elbo);
        CHECK(r1.log[e].recon == r2.log[e].recon);
    }
    CHECK(read_file(d1 + "/model.bin") == read_file(d2 + "/model.bin"));
    CHECK(read_file(d1 + "/loss.csv") == read_file(d2 + "/loss.csv"));
}

TEST_CASE("train: periodic checkpoints appear at the configured cadence") {
    TrainConfig c = smoke_config();
    c.epochs = 5;
    c.checkpoint_every = 2;
    c.subsample = 32;
    c.batch_size = 16;
    std::string dir = temp_dir("vitae_opt_ckpt");
    LabeledImageDataset ds = load_data_spec(c);
    TrainResult res = train(c, ds, dir);
    REQUIRE_FALSE(res.diverged);
    CHECK(std::filesystem::exists(dir + "/ckpt_0002.bin"));
    CHECK(std::filesystem::exists(dir + "/ckpt_0004.bin"));
    CHECK_FALSE(std::filesystem::exists(dir + "/ckpt_0005.bin"));  // final goes to model.bin
    CHECK(std::filesystem::exists(dir + "/model.bin"));
    Model m = load_model(dir + "/ckpt_0002.bin");
    CHECK(m.cfg.kind == ModelKind::Vae);

    // loss.csv carries the header plus one row per epoch
    std::string csv = read_file(dir + "/loss.csv");
    CHECK(csv.rfind("epoch,elbo,recon,kl_A,kl_P,w,beta\n", 0) == 0);
    size_t lines = 0;
    for (char ch : csv)
        if (ch == '\n') ++lines;
    CHECK(lines == 6);
}

TEST_CASE("train: an exploding run is flagged as diverged with the partial log kept") {
    // the velocity-field exponential overflows as soon as the transformation
    // head weights reach ~1e3, so a huge rate diverges within the first epoch
    TrainConfig c = smoke_config();
    c.kind = ModelKind::CVitae;
    c.transform = TransformKind::AffineDiffeo;
    c.d_a = 2;
    c.d_p = 2;
    c.learning_rate = 1e8;
    c.epochs = 20;
    c.subsample = 32;
    c.batch_size = 16;
    std::string dir = temp_dir("vitae_opt_div");
    LabeledImageDataset ds = load_data_spec(c);
    TrainResult res = train(c, ds, dir);
    CHECK(res.diverged);
    CHECK(res.log.size() < 20);
    CHECK(res.diverged_epoch >= res.log.size());
    CHECK_FALSE(std::filesystem::exists(dir + "/model.bin"));
    std::string csv = read_file(dir + "/loss.csv");
    CHECK(csv.find("diverged at epoch") != std::string::npos);
}

TEST_CASE("load_data_spec: sprites honor subsample and augment") {
    TrainConfig c;
    c.subsample = 40;
    c.seed = 5;
    LabeledImageDataset plain = load_data_spec(c);
    CHECK(plain.size() == 40);
    CHECK(plain.img_h == 64);

    c.augment = true;
    LabeledImageDataset aug = load_data_spec(c);
    REQUIRE(aug.size() == 40);
    // factors untouched, images changed
    CHECK(aug.factors.data() == plain.factors.data());
    CHECK(aug.images.data() != plain.images.data());
    // still valid pixel range
    for (double v : aug.images.data()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    CHECK_THROWS_AS([] {
        TrainConfig bad;
        bad.data = "http://nope";
        return load_data_spec(bad);
    }(), ConfigError);
}

TEST_CASE("load_data_spec: idx pair via derived labels path") {
    namespace fs = std::filesystem;
    std::string dir = temp_dir("vitae_opt_idx");
    auto be32 = [](std::ofstream& o, uint32_t v) {
        unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
        o.write(reinterpret_cast<char*>(b), 4);
    };
    {
        std::ofstream o(dir + "/toy-images-idx3-ubyte", std::ios::binary);
        be32(o, 0x803);
        be32(o, 3);
        be32(o, 2);
        be32(o, 2);
        for (int i = 0; i < 12; ++i) o.put(static_cast<char>(i * 20));
    }
    {
        std::ofstream o(dir + "/toy-labels-idx1-ubyte", std::ios::binary);
        be32(o, 0x801);
        be32(o, 3);
        o.put(1);
        o.put(0);
        o.put(2);
    }
    TrainConfig c;
    c.data = "idx:" + dir + "/toy-images-idx3-ubyte";
    LabeledImageDataset ds = load_data_spec(c);
    CHECK(ds.size() == 3);
    CHECK(ds.img_h == 2);
    CHECK(ds.factors.data()[0] == 1.0);

    c.subsample = 2;
    LabeledImageDataset sub = load_data_spec(c);
    CHECK(sub.size() == 2);

    TrainConfig bad;
    bad.data = "idx:" + dir + "/toy-pictures.bin";
    CHECK_THROWS_AS(load_data_spec(bad), ConfigError);
}

TEST_CASE("lr_sweep: full grid with divergent cells marked") {
    TrainConfig base = smoke_config();
    base.d_a = 2;
    base.d_p = 2;
    base.epochs = 2;
    base.subsample = 32;
    base.batch_size = 16;
    LabeledImageDataset ds = load_data_spec(base);
    std::string dir = temp_dir("vitae_opt_sweep");
    std::vector<double> rates = {1e-3, 1e8};
    std::vector<SweepCell> cells = lr_sweep(base, rates, ds, dir);
    REQUIRE(cells.size() == 6);  // 3 parametrizations x 2 rates
    for (size_t i = 0; i < cells.size(); ++i) {
        const SweepCell& cell = cells[i];
        INFO(transform_kind_name(cell.transform), " @ ", cell.rate);
        if (cell.rate == 1e-3) {
            CHECK_FALSE(cell.diverged);
            CHECK(std::isfinite(cell.final_elbo));
        }
    }
    // cells are ordered kind-major: affine, affine-decomp, affine-diffeo
    CHECK(cells[0].transform == TransformKind::Affine);
    CHECK(cells[2].transform == TransformKind::AffineDecomp);
    CHECK(cells[4].transform == TransformKind::AffineDiffeo);
    // the velocity-field parametrization overflows its exponential at 1e8
    CHECK(cells[5].diverged);

    std::string csv = read_file(dir + "/sweep.csv");
    CHECK(csv.rfind("parametrization,learning_rate,final_elbo,diverged\n", 0) == 0);
    size_t lines = 0;
    for (char ch : csv)
        if (ch == '\n') ++lines;
    CHECK(lines == 7);  // header + 6 cells

    CHECK_THROWS_AS(lr_sweep(base, {}, ds), ConfigError);
    CHECK_THROWS_AS(lr_sweep(base, {-1.0}, ds), ConfigError);
}
