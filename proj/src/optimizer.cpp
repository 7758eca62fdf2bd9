#include "vitae/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "vitae/losses.hpp"
#include "vitae/rng.hpp"

namespace vitae {

// --------------------------------------------------------------------------
// adam
// --------------------------------------------------------------------------

AdamState make_adam_state(const std::vector<std::pair<std::string, Tensor>>& params) {
    AdamState st;
    st.m.reserve(params.size());
    st.v.reserve(params.size());
    for (const auto& [name, t] : params) {
        st.m.emplace_back(t.numel(), 0.0);
        st.v.emplace_back(t.numel(), 0.0);
    }
    return st;
}

bool adam_step(std::vector<std::pair<std::string, Tensor>>& params, AdamState& state, double lr) {
    if (params.size() != state.m.size())
        throw ShapeMismatch("adam_step: state sized for " + std::to_string(state.m.size()) +
                            " parameters, got " + std::to_string(params.size()));
    // validate every gradient before touching anything, so an aborted step
    // leaves params and moments exactly as they were
    for (const auto& [name, t] : params) {
        const auto& g = t.node()->grad;
        for (double v : g)
            if (!std::isfinite(v)) return false;
    }
    state.t += 1;
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    for (size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i].second.leaf_data();
        const auto& g = params[i].second.node()->grad;  // empty means never accumulated
        auto& m = state.m[i];
        auto& v = state.v[i];
        if (m.size() != p.size())
            throw ShapeMismatch("adam_step: parameter " + params[i].first + " changed size");
        for (size_t j = 0; j < p.size(); ++j) {
            double gj = g.empty() ? 0.0 : g[j];
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * gj;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj;
            p[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + state.eps);
        }
    }
    return true;
}

// --------------------------------------------------------------------------
// config
// --------------------------------------------------------------------------

size_t TrainConfig::resolved_warmup() const {
    if (warmup > 0) return warmup;
    size_t half = epochs / 2;
    return half > 0 ? half : 1;
}

ModelConfig TrainConfig::model_config(size_t img_h, size_t img_w) const {
    ModelConfig mc;
    mc.kind = kind;
    mc.transform = transform;
    mc.img_h = img_h;
    mc.img_w = img_w;
    mc.d = d;
    mc.d_a = d_a;
    mc.d_p = d_p;
    mc.likelihood = likelihood;
    mc.beta = beta;
    mc.enc_w1 = enc_w1;
    mc.enc_w2 = enc_w2;
    mc.dec_w1 = dec_w1;
    mc.dec_w2 = dec_w2;
    mc.tess_nx = tess_nx;
    mc.tess_ny = tess_ny;
    mc.zero_boundary = zero_boundary;
    mc.steps = steps;
    return mc;
}

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

double parse_double(const std::string& key, const std::string& value) {
    const char* c = value.c_str();
    char* end = nullptr;
    double v = std::strtod(c, &end);
    if (end == c || *end != '\0')
        throw ConfigError(key + ": not a number: '" + value + "'");
    return v;
}

size_t parse_size(const std::string& key, const std::string& value) {
    if (!value.empty() && value[0] == '-')
        throw ConfigError(key + ": must be non-negative: '" + value + "'");
    const char* c = value.c_str();
    char* end = nullptr;
    unsigned long long v = std::strtoull(c, &end, 10);
    if (end == c || *end != '\0')
        throw ConfigError(key + ": not an integer: '" + value + "'");
    return static_cast<size_t>(v);
}

uint64_t parse_u64(const std::string& key, const std::string& value) {
    return static_cast<uint64_t>(parse_size(key, value));
}

int parse_int(const std::string& key, const std::string& value) {
    size_t v = parse_size(key, value);
    if (v > 1u << 20) throw ConfigError(key + ": out of range: '" + value + "'");
    return static_cast<int>(v);
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "1" || value == "true") return true;
    if (value == "0" || value == "false") return false;
    throw ConfigError(key + ": expected 0/1/true/false, got '" + value + "'");
}

void validate_config(const TrainConfig& c) {
    if (!(c.learning_rate > 0) || !std::isfinite(c.learning_rate))
        throw ConfigError("learning_rate must be positive");
    if (c.beta < 1.0) throw ConfigError("beta must be >= 1");
    if (c.batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (c.d == 0 || c.d_a == 0 || c.d_p == 0) throw ConfigError("latent sizes must be >= 1");
    if (c.enc_w1 == 0 || c.enc_w2 == 0 || c.dec_w1 == 0 || c.dec_w2 == 0)
        throw ConfigError("layer widths must be >= 1");
    if (c.tess_nx == 0 || c.tess_ny == 0) throw ConfigError("tessellation must be >= 1x1");
    if (c.steps < 1) throw ConfigError("steps must be >= 1");
    if (c.checkpoint_every == 0) throw ConfigError("checkpoint_every must be >= 1");
    if (c.k_importance == 0) throw ConfigError("K must be >= 1");
    if (c.data.empty()) throw ConfigError("data must be set");
}

// shortest decimal string that parses back to exactly v
std::string fmt_double(double v) {
    char buf[64];
    for (int prec = 1; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) return buf;
    }
    return buf;
}

}  // namespace

void apply_override(TrainConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "model") cfg.kind = model_kind_from(value);
    else if (key == "transform") cfg.transform = transform_kind_from(value);
    else if (key == "learning_rate") cfg.learning_rate = parse_double(key, value);
    else if (key == "batch_size") cfg.batch_size = parse_size(key, value);
    else if (key == "epochs") cfg.epochs = parse_size(key, value);
    else if (key == "warmup") cfg.warmup = parse_size(key, value);
    else if (key == "beta") cfg.beta = parse_double(key, value);
    else if (key == "seed") cfg.seed = parse_u64(key, value);
    else if (key == "K") cfg.k_importance = parse_size(key, value);
    else if (key == "data") cfg.data = value;
    else if (key == "subsample") cfg.subsample = parse_size(key, value);
    else if (key == "augment") cfg.augment = parse_bool(key, value);
    else if (key == "d") cfg.d = parse_size(key, value);
    else if (key == "d_a") cfg.d_a = parse_size(key, value);
    else if (key == "d_p") cfg.d_p = parse_size(key, value);
    else if (key == "likelihood") cfg.likelihood = likelihood_from(value);
    else if (key == "enc_w1") cfg.enc_w1 = parse_size(key, value);
    else if (key == "enc_w2") cfg.enc_w2 = parse_size(key, value);
    else if (key == "dec_w1") cfg.dec_w1 = parse_size(key, value);
    else if (key == "dec_w2") cfg.dec_w2 = parse_size(key, value);
    else if (key == "tess_nx") cfg.tess_nx = parse_size(key, value);
    else if (key == "tess_ny") cfg.tess_ny = parse_size(key, value);
    else if (key == "zero_boundary") cfg.zero_boundary = parse_bool(key, value);
    else if (key == "steps") cfg.steps = parse_int(key, value);
    else if (key == "checkpoint_every") cfg.checkpoint_every = parse_size(key, value);
    else throw ConfigError("unknown config key '" + key + "'");
}

TrainConfig parse_config_text(const std::string& text, const std::string& what) {
    TrainConfig cfg;
    std::istringstream in(text);
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(what + ":" + std::to_string(lineno) + ": expected key=value, got '" +
                              line + "'");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError(what + ":" + std::to_string(lineno) + ": empty key");
        apply_override(cfg, key, value);
    }
    validate_config(cfg);
    return cfg;
}

TrainConfig parse_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open config " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str(), path);
}

std::string config_echo(const TrainConfig& c) {
    std::ostringstream out;
    out << "model=" << model_kind_name(c.kind) << "\n";
    out << "transform=" << transform_kind_name(c.transform) << "\n";
    out << "learning_rate=" << fmt_double(c.learning_rate) << "\n";
    out << "batch_size=" << c.batch_size << "\n";
    out << "epochs=" << c.epochs << "\n";
    out << "warmup=" << c.warmup << "\n";
    out << "beta=" << fmt_double(c.beta) << "\n";
    out << "seed=" << c.seed << "\n";
    out << "K=" << c.k_importance << "\n";
    out << "data=" << c.data << "\n";
    out << "subsample=" << c.subsample << "\n";
    out << "augment=" << (c.augment ? 1 : 0) << "\n";
    out << "d=" << c.d << "\n";
    out << "d_a=" << c.d_a << "\n";
    out << "d_p=" << c.d_p << "\n";
    out << "likelihood=" << likelihood_name(c.likelihood) << "\n";
    out << "enc_w1=" << c.enc_w1 << "\n";
    out << "enc_w2=" << c.enc_w2 << "\n";
    out << "dec_w1=" << c.dec_w1 << "\n";
    out << "dec_w2=" << c.dec_w2 << "\n";
    out << "tess_nx=" << c.tess_nx << "\n";
    out << "tess_ny=" << c.tess_ny << "\n";
    out << "zero_boundary=" << (c.zero_boundary ? 1 : 0) << "\n";
    out << "steps=" << c.steps << "\n";
    out << "checkpoint_every=" << c.checkpoint_every << "\n";
    return out.str();
}

// --------------------------------------------------------------------------
// data materialization
// --------------------------------------------------------------------------

namespace {

LabeledImageDataset take_dataset_rows(const LabeledImageDataset& ds, const std::vector<size_t>& idx) {
    size_t px = ds.img_h * ds.img_w;
    size_t nf = ds.factor_specs.size();
    std::vector<double> imgs(idx.size() * px), facs(idx.size() * nf);
    for (size_t i = 0; i < idx.size(); ++i) {
        const double* src = ds.images.data().data() + idx[i] * px;
        std::copy(src, src + px, imgs.data() + i * px);
        const double* fs = ds.factors.data().data() + idx[i] * nf;
        std::copy(fs, fs + nf, facs.data() + i * nf);
    }
    LabeledImageDataset out;
    out.img_h = ds.img_h;
    out.img_w = ds.img_w;
    out.images = Tensor::from_data({idx.size(), 1, ds.img_h, ds.img_w}, std::move(imgs));
    out.factors = Tensor::from_data({idx.size(), nf}, std::move(facs));
    out.factor_specs = ds.factor_specs;
    return out;
}

std::string derive_labels_path(const std::string& images_path) {
    std::string p = images_path;
    size_t pos = p.rfind("images");
    if (pos == std::string::npos)
        throw ConfigError("idx data path must contain 'images' so the labels file can be derived: " +
                          images_path);
    p.replace(pos, 6, "labels");
    size_t d3 = p.rfind("idx3");
    if (d3 != std::string::npos) p.replace(d3, 4, "idx1");
    return p;
}

}  // namespace

LabeledImageDataset load_data_spec(const TrainConfig& cfg) {
    LabeledImageDataset ds;
    if (cfg.data == "sprites") {
        ds = generate_sprites(cfg.seed, cfg.subsample);
    } else if (cfg.data.rfind("idx:", 0) == 0) {
        std::string images_path = cfg.data.substr(4);
        ds = make_idx_dataset(images_path, derive_labels_path(images_path));
        if (cfg.subsample > 0 && cfg.subsample < ds.size()) {
            std::vector<size_t> idx(ds.size());
            for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
            RngStream pick(cfg.seed, "subsample");
            pick.shuffle(idx);
            idx.resize(cfg.subsample);
            std::sort(idx.begin(), idx.end());
            ds = take_dataset_rows(ds, idx);
        }
    } else {
        throw ConfigError("data must be 'sprites' or 'idx:PATH', got '" + cfg.data + "'");
    }
    if (cfg.augment) ds.images = augment_rotate_translate(ds.images, cfg.seed);
    return ds;
}

// --------------------------------------------------------------------------
// training loop
// --------------------------------------------------------------------------

namespace {

Tensor draw_normal(RngStream& rng, size_t rows, size_t cols) {
    std::vector<double> v(rows * cols);
    for (double& x : v) x = rng.normal();
    return Tensor::from_data({rows, cols}, std::move(v));
}

std::string checkpoint_name(size_t epoch_1based) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "ckpt_%04zu.bin", epoch_1based);
    return buf;
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const LabeledImageDataset& dataset,
                  const std::string& out_dir) {
    validate_config(cfg);
    if (dataset.size() == 0) throw EmptyTrainSet("train: dataset is empty");
    if (!out_dir.empty()) std::filesystem::create_directories(out_dir);

    RngStream init(cfg.seed, "init");
    TrainResult res;
    res.model = build_model(cfg.model_config(dataset.img_h, dataset.img_w), init);
    auto params = res.model.named_params();
    AdamState st = make_adam_state(params);
    RngStream noise(cfg.seed, "noise");

    const size_t warm = cfg.resolved_warmup();
    const bool split = res.model.cfg.split();
    const size_t na_dim = split ? cfg.d_a : cfg.d;
    const double eff_beta = cfg.kind == ModelKind::BetaVae ? cfg.beta : 1.0;

    for (size_t epoch = 0; epoch < cfg.epochs && !res.diverged; ++epoch) {
        const double w = warmup_weight(epoch, warm);
        double sum_recon = 0, sum_kl_a = 0, sum_kl_p = 0;
        size_t n_images = 0;
        for (const auto& batch : batch_iter(dataset, cfg.batch_size, cfg.seed, epoch)) {
            Tensor x = gather_images(dataset, batch);
            Tensor noise_a = draw_normal(noise, batch.size(), na_dim);
            Tensor noise_p = split ? draw_normal(noise, batch.size(), cfg.d_p) : Tensor{};
            try {
                ForwardPass fp = forward(res.model, x, noise_a, noise_p);
                LossBreakdown bd = compute_loss(res.model, fp, x, w);
                double recon = bd.recon.value();
                double kl_a = bd.kl_a.value();
                double kl_p = bd.kl_p.value();
                Tensor objective = mul(bd.elbo, Tensor::scalar(-1.0));
                for (auto& [name, t] : params) t.zero_grad();
                backward(objective);
                if (!adam_step(params, st, cfg.learning_rate)) {
                    res.diverged = true;
                } else {
                    sum_recon += recon * static_cast<double>(batch.size());
                    sum_kl_a += kl_a * static_cast<double>(batch.size());
                    sum_kl_p += kl_p * static_cast<double>(batch.size());
                    n_images += batch.size();
                }
            } catch (const NonFinite&) {
                res.diverged = true;
            }
            if (res.diverged) {
                res.diverged_epoch = epoch;
                break;
            }
        }
        if (res.diverged) break;
        EpochRow row;
        row.epoch = epoch;
        row.recon = sum_recon / static_cast<double>(n_images);
        row.kl_a = sum_kl_a / static_cast<double>(n_images);
        row.kl_p = sum_kl_p / static_cast<double>(n_images);
        row.w = w;
        row.beta = eff_beta;
        // composed from the logged parts, so the decomposition identity is
        // exact for every row by construction
        row.elbo = row.recon - row.beta * row.w * (row.kl_a + row.kl_p);
        res.log.push_back(row);
        if (!out_dir.empty() && (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs)
            save_model(res.model, out_dir + "/" + checkpoint_name(epoch + 1));
    }

    if (!out_dir.empty()) {
        write_loss_csv(res, out_dir + "/loss.csv");
        if (!res.diverged) save_model(res.model, out_dir + "/model.bin");
    }
    return res;
}

void write_loss_csv(const TrainResult& res, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << "epoch,elbo,recon,kl_A,kl_P,w,beta\n";
    for (const EpochRow& r : res.log)
        out << r.epoch << ',' << fmt_double(r.elbo) << ',' << fmt_double(r.recon) << ','
            << fmt_double(r.kl_a) << ',' << fmt_double(r.kl_p) << ',' << fmt_double(r.w) << ','
            << fmt_double(r.beta) << "\n";
    if (res.diverged) out << "# diverged at epoch " << res.diverged_epoch << "\n";
    if (!out.good()) throw IoError("failed writing " + path);
}

// --------------------------------------------------------------------------
// learning-rate sweep
// --------------------------------------------------------------------------

std::vector<SweepCell> lr_sweep(const TrainConfig& base, const std::vector<double>& rates,
                                const LabeledImageDataset& dataset, const std::string& out_dir) {
    if (rates.empty()) throw ConfigError("lr_sweep: no rates given");
    for (double r : rates)
        if (!(r > 0) || !std::isfinite(r)) throw ConfigError("lr_sweep: rates must be positive");
    const TransformKind kinds[] = {TransformKind::Affine, TransformKind::AffineDecomp,
                                   TransformKind::AffineDiffeo};
    std::vector<SweepCell> cells;
    for (TransformKind tk : kinds) {
        for (double rate : rates) {
            TrainConfig c = base;
            c.kind = ModelKind::CVitae;
            c.transform = tk;
            c.learning_rate = rate;
            TrainResult tr = train(c, dataset, "");
            SweepCell cell;
            cell.transform = tk;
            cell.rate = rate;
            cell.diverged = tr.diverged;
            cell.final_elbo = (!tr.diverged && !tr.log.empty()) ? tr.log.back().elbo : 0.0;
            cells.push_back(cell);
        }
    }
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        write_sweep_csv(cells, out_dir + "/sweep.csv");
    }
    return cells;
}

void write_sweep_csv(const std::vector<SweepCell>& cells, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << "parametrization,learning_rate,final_elbo,diverged\n";
    for (const SweepCell& c : cells) {
        out << transform_kind_name(c.transform) << ',' << fmt_double(c.rate) << ',';
        if (!c.diverged) out << fmt_double(c.final_elbo);
        out << ',' << (c.diverged ? 1 : 0) << "\n";
    }
    if (!out.good()) throw IoError("failed writing " + path);
}

}  // namespace vitae
