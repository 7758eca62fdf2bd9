#include <CLI11.hpp>
#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "vitae/data.hpp"
#include "vitae/errors.hpp"
#include "vitae/losses.hpp"
#include "vitae/manifest.hpp"
#include "vitae/metrics.hpp"
#include "vitae/models.hpp"
#include "vitae/optimizer.hpp"
#include "vitae/pgm.hpp"
#include "vitae/rng.hpp"
#include "vitae/spatial_transformer.hpp"
#include "vitae/transforms.hpp"

namespace fs = std::filesystem;
using namespace vitae;

namespace {

std::vector<double> parse_csv_doubles(const std::string& csv, const std::string& what) {
    std::vector<double> out;
    size_t pos = 0;
    while (pos <= csv.size()) {
        size_t comma = csv.find(',', pos);
        std::string tok = csv.substr(pos, comma == std::string::npos ? std::string::npos
                                                                     : comma - pos);
        const char* s = tok.c_str();
        char* end = nullptr;
        double v = std::strtod(s, &end);
        if (end == s || *end != '\0')
            throw ConfigError(what + ": bad number '" + tok + "'");
        out.push_back(v);
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    return out;
}

Tensor draw_normal(RngStream& rng, size_t rows, size_t cols) {
    std::vector<double> v(rows * cols);
    for (double& x : v) x = rng.normal();
    return Tensor::from_data({rows, cols}, std::move(v));
}

std::string fmt(double v) {
    char buf[40];
    for (int prec = 1; prec <= 17; ++prec) {
        snprintf(buf, sizeof buf, "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

// config echo lines become manifest fields verbatim
void manifest_config(Manifest& m, const TrainConfig& cfg) {
    std::string echo = config_echo(cfg);
    size_t pos = 0;
    while (pos < echo.size()) {
        size_t nl = echo.find('\n', pos);
        std::string line = echo.substr(pos, nl - pos);
        size_t eq = line.find('=');
        if (eq != std::string::npos) manifest_set(m, line.substr(0, eq), line.substr(eq + 1));
        pos = nl == std::string::npos ? echo.size() : nl + 1;
    }
}

// data inputs are part of the manifest when they are files
void manifest_data_inputs(Manifest& m, const std::string& data) {
    if (data.rfind("idx:", 0) == 0) manifest_input(m, "images", data.substr(4));
}

int cmd_train(const std::string& config_path, const std::string& out_dir, long long seed_flag) {
    TrainConfig cfg = parse_config(config_path);
    if (seed_flag >= 0) cfg.seed = (uint64_t)seed_flag;
    LabeledImageDataset ds = load_data_spec(cfg);

    fs::create_directories(out_dir);
    Manifest man;
    man.command = "train";
    manifest_config(man, cfg);
    manifest_set(man, "out", out_dir);
    manifest_input(man, "config", config_path);
    manifest_data_inputs(man, cfg.data);
    write_manifest(man, (fs::path(out_dir) / "manifest.txt").string());

    TrainResult res = train(cfg, ds, out_dir);
    if (res.diverged) {
        fprintf(stderr, "diverged at epoch %zu; partial log kept in %s\n", res.diverged_epoch,
                out_dir.c_str());
        return 2;
    }
    return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& report,
             size_t k_imp) {
    Model m = load_model(ckpt);

    TrainConfig dcfg;
    dcfg.data = data;
    dcfg.seed = 0;
    LabeledImageDataset ds = load_data_spec(dcfg);
    if (ds.img_h != m.cfg.img_h || ds.img_w != m.cfg.img_w)
        throw ShapeMismatch("eval: data is " + std::to_string(ds.img_h) + "x" +
                            std::to_string(ds.img_w) + " but the checkpoint expects " +
                            std::to_string(m.cfg.img_h) + "x" + std::to_string(m.cfg.img_w));

    // one-sample ELBO, averaged over the set in fixed-size batches
    size_t n = ds.size();
    RngStream noise(0, "noise");
    double elbo_sum = 0.0;
    size_t batch = 256;
    size_t na_dim = m.cfg.split() ? m.cfg.d_a : m.cfg.d;
    for (size_t off = 0; off < n; off += batch) {
        size_t b = std::min(batch, n - off);
        std::vector<size_t> idx(b);
        for (size_t i = 0; i < b; ++i) idx[i] = off + i;
        Tensor x = gather_images(ds, idx);
        Tensor noise_a = draw_normal(noise, b, na_dim);
        Tensor noise_p = m.cfg.split() ? draw_normal(noise, b, m.cfg.d_p) : Tensor();
        ForwardPass fp = forward(m, x, noise_a, noise_p);
        LossBreakdown parts = compute_loss(m, fp, x, 1.0);
        double e = parts.recon.data()[0] - (parts.kl_a.data()[0] + parts.kl_p.data()[0]);
        elbo_sum += e * (double)b;
    }
    double elbo = elbo_sum / (double)n;

    // importance estimate on a seeded subset; the full set would be hours
    size_t imp_n = std::min<size_t>(n, 512);
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    RngStream pick(0, "subsample");
    pick.shuffle(order);
    order.resize(imp_n);
    std::sort(order.begin(), order.end());
    Tensor x_imp = gather_images(ds, order);
    RngStream imp_rng(0, "imp");
    double loglik = importance_loglik(m, x_imp, k_imp, imp_rng);

    Tensor codes = model_codes(m, gather_images(ds, [&] {
                                   std::vector<size_t> all(n);
                                   for (size_t i = 0; i < n; ++i) all[i] = i;
                                   return all;
                               }()));
    Tensor factors = gather_factors(ds, [&] {
        std::vector<size_t> all(n);
        for (size_t i = 0; i < n; ++i) all[i] = i;
        return all;
    }());
    ImportanceMatrix r = importance_matrix(codes, factors, ds.factor_specs, 5, 0);
    double ds_score = d_score(r);

    {
        std::string text = "elbo,loglik,K,d_score\n" + fmt(elbo) + "," + fmt(loglik) + "," +
                           std::to_string(k_imp) + "," + fmt(ds_score) + "\n";
        FILE* f = fopen(report.c_str(), "wb");
        if (!f) throw IoError("cannot write " + report);
        fwrite(text.data(), 1, text.size(), f);
        fclose(f);
    }

    Manifest man;
    man.command = "eval";
    manifest_set(man, "data", data);
    manifest_set(man, "K", std::to_string(k_imp));
    manifest_set(man, "report", report);
    manifest_input(man, "ckpt", ckpt);
    manifest_data_inputs(man, data);
    write_manifest(man, report + ".manifest");
    return 0;
}

int cmd_traverse(const std::string& ckpt, const std::string& image_path, size_t dim,
                 const std::string& range_csv, size_t steps, const std::string& out_path) {
    Model m = load_model(ckpt);
    Tensor img = read_pgm(image_path);
    if (img.shape()[0] != m.cfg.img_h || img.shape()[1] != m.cfg.img_w)
        throw ShapeMismatch("traverse: image is " + std::to_string(img.shape()[0]) + "x" +
                            std::to_string(img.shape()[1]) + " but the checkpoint expects " +
                            std::to_string(m.cfg.img_h) + "x" + std::to_string(m.cfg.img_w));
    auto range = parse_csv_doubles(range_csv, "--range");
    if (range.size() != 2 || !(range[0] < range[1]))
        throw ConfigError("--range wants A,B with A < B");
    if (steps == 0) throw ConfigError("--steps wants at least 1");

    Tensor x = reshape(img, {1, m.cfg.pixels()});
    Tensor rows = latent_traversal(m, x, dim, range[0], range[1], steps);

    // one horizontal strip, settings left to right
    size_t h = m.cfg.img_h, w = m.cfg.img_w;
    std::vector<double> strip(h * steps * w);
    for (size_t s = 0; s < steps; ++s)
        for (size_t r = 0; r < h; ++r)
            for (size_t c = 0; c < w; ++c)
                strip[r * steps * w + s * w + c] = rows.data()[s * h * w + r * w + c];
    write_pgm(out_path, Tensor::from_data({h, steps * w}, std::move(strip)));

    Manifest man;
    man.command = "traverse";
    manifest_set(man, "dim", std::to_string(dim));
    manifest_set(man, "range", range_csv);
    manifest_set(man, "steps", std::to_string(steps));
    manifest_set(man, "out", out_path);
    manifest_input(man, "ckpt", ckpt);
    manifest_input(man, "image", image_path);
    write_manifest(man, out_path + ".manifest");
    return 0;
}

int cmd_warp(const std::string& kind_name, const std::string& params_csv,
             const std::string& tess_csv, int steps, const std::string& in_path,
             const std::string& out_path, bool inverse) {
    TransformKind kind = transform_kind_from(kind_name);
    auto pv = parse_csv_doubles(params_csv, "--params");
    auto tv = parse_csv_doubles(tess_csv, "--tess");
    if (tv.size() != 2 || tv[0] < 1 || tv[1] < 1 || tv[0] != (size_t)tv[0] ||
        tv[1] != (size_t)tv[1])
        throw ConfigError("--tess wants NX,NY positive integers");
    if (steps < 1) throw ConfigError("--steps wants at least 1");

    CpabBasis basis;
    TransformParams tp;
    tp.kind = kind;
    tp.steps = steps;
    if (kind == TransformKind::Cpab) {
        basis = build_continuity_basis(make_tessellation((size_t)tv[0], (size_t)tv[1]), true);
        tp.basis = &basis;
    }
    size_t want = param_count(kind, tp.basis);
    if (pv.size() != want)
        throw ConfigError("--params wants " + std::to_string(want) + " values for " + kind_name +
                          ", got " + std::to_string(pv.size()));
    tp.params = Tensor::from_data({pv.size()}, pv);

    Tensor img = read_pgm(in_path);
    write_pgm(out_path, spatial_transform(img, tp, inverse));

    Manifest man;
    man.command = "warp";
    manifest_set(man, "kind", kind_name);
    manifest_set(man, "params", params_csv);
    manifest_set(man, "tess", tess_csv);
    manifest_set(man, "steps", std::to_string(steps));
    manifest_set(man, "inverse", inverse ? "1" : "0");
    manifest_set(man, "out", out_path);
    manifest_input(man, "in", in_path);
    write_manifest(man, out_path + ".manifest");
    return 0;
}

int cmd_lr_sweep(const std::string& config_path, const std::string& rates_csv,
                 const std::string& out_dir) {
    TrainConfig cfg = parse_config(config_path);
    auto rates = parse_csv_doubles(rates_csv, "--rates");
    LabeledImageDataset ds = load_data_spec(cfg);

    fs::create_directories(out_dir);
    Manifest man;
    man.command = "lr-sweep";
    manifest_config(man, cfg);
    manifest_set(man, "rates", rates_csv);
    manifest_set(man, "out", out_dir);
    manifest_input(man, "config", config_path);
    manifest_data_inputs(man, cfg.data);
    write_manifest(man, (fs::path(out_dir) / "manifest.txt").string());

    lr_sweep(cfg, rates, ds, out_dir);
    return 0;
}

int cmd_gen_sprites(uint64_t seed, const std::string& out_dir, size_t subsample) {
    LabeledImageDataset ds = generate_sprites(seed, subsample);
    fs::create_directories(out_dir);
    save_dataset(ds, (fs::path(out_dir) / "sprites.bin").string());

    Manifest man;
    man.command = "gen-sprites";
    manifest_set(man, "seed", std::to_string(seed));
    manifest_set(man, "subsample", std::to_string(subsample));
    manifest_set(man, "count", std::to_string(ds.size()));
    manifest_set(man, "out", out_dir);
    write_manifest(man, (fs::path(out_dir) / "manifest.txt").string());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"disentangled representation lab"};
    app.require_subcommand(1);

    auto* c_train = app.add_subcommand("train", "train a model from a config file");
    std::string t_config, t_out = ".";
    long long t_seed = -1;
    c_train->add_option("--config", t_config)->required();
    c_train->add_option("--out", t_out);
    c_train->add_option("--seed", t_seed)->check(CLI::NonNegativeNumber);

    auto* c_eval = app.add_subcommand("eval", "score a checkpoint on a dataset");
    std::string e_ckpt, e_data, e_report;
    size_t e_k = 1000;
    c_eval->add_option("--ckpt", e_ckpt)->required();
    c_eval->add_option("--data", e_data)->required();
    c_eval->add_option("--report", e_report)->required();
    c_eval->add_option("--K", e_k);

    auto* c_trav = app.add_subcommand("traverse", "render a latent traversal strip");
    std::string v_ckpt, v_image, v_range = "-3,3", v_out;
    size_t v_dim = 0, v_steps = 9;
    c_trav->add_option("--ckpt", v_ckpt)->required();
    c_trav->add_option("--image", v_image)->required();
    c_trav->add_option("--dim", v_dim)->required();
    c_trav->add_option("--range", v_range);
    c_trav->add_option("--steps", v_steps);
    c_trav->add_option("--out", v_out)->required();

    auto* c_warp = app.add_subcommand("warp", "apply one spatial transformation to an image");
    std::string w_kind, w_params, w_tess = "2,2", w_in, w_out;
    int w_steps = 8;
    bool w_inverse = false;
    c_warp->add_option("--kind", w_kind)->required();
    c_warp->add_option("--params", w_params)->required();
    c_warp->add_option("--tess", w_tess);
    c_warp->add_option("--steps", w_steps);
    c_warp->add_option("--in", w_in)->required();
    c_warp->add_option("--out", w_out)->required();
    c_warp->add_flag("--inverse", w_inverse);

    auto* c_sweep = app.add_subcommand("lr-sweep", "stability grid over rates x parametrizations");
    std::string s_config, s_rates, s_out;
    c_sweep->add_option("--config", s_config)->required();
    c_sweep->add_option("--rates", s_rates)->required();
    c_sweep->add_option("--out", s_out)->required();

    auto* c_gen = app.add_subcommand("gen-sprites", "write the procedural sprite dataset");
    uint64_t g_seed = 0;
    std::string g_out;
    size_t g_subsample = 0;
    c_gen->add_option("--seed", g_seed)->required();
    c_gen->add_option("--out", g_out)->required();
    c_gen->add_option("--subsample", g_subsample);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        fprintf(stderr, "%s\n", e.what());
        return 1;
    }

    try {
        if (c_train->parsed()) return cmd_train(t_config, t_out, t_seed);
        if (c_eval->parsed()) return cmd_eval(e_ckpt, e_data, e_report, e_k);
        if (c_trav->parsed()) return cmd_traverse(v_ckpt, v_image, v_dim, v_range, v_steps, v_out);
        if (c_warp->parsed())
            return cmd_warp(w_kind, w_params, w_tess, w_steps, w_in, w_out, w_inverse);
        if (c_sweep->parsed()) return cmd_lr_sweep(s_config, s_rates, s_out);
        if (c_gen->parsed()) return cmd_gen_sprites(g_seed, g_out, g_subsample);
    } catch (const Diverged& e) {
        fprintf(stderr, "%s\n", e.what());
        return 2;
    } catch (const IoError& e) {
        fprintf(stderr, "%s\n", e.what());
        return 3;
    } catch (const BadMagic& e) {
        fprintf(stderr, "%s\n", e.what());
        return 3;
    } catch (const TruncatedFile& e) {
        fprintf(stderr, "%s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        fprintf(stderr, "%s\n", e.what());
        return 1;
    }
    return 1;
}
