#include "vitae/models.hpp"

#include <cmath>

#include "vitae/checkpoint.hpp"
#include "vitae/errors.hpp"
#include "vitae/spatial_transformer.hpp"

namespace vitae {

const char* model_kind_name(ModelKind k) {
    switch (k) {
        case ModelKind::Vae: return "vae";
        case ModelKind::BetaVae: return "beta-vae";
        case ModelKind::UVitae: return "u-vitae";
        case ModelKind::CVitae: return "c-vitae";
    }
    return "?";
}

ModelKind model_kind_from(const std::string& name) {
    if (name == "vae") return ModelKind::Vae;
    if (name == "beta-vae") return ModelKind::BetaVae;
    if (name == "u-vitae") return ModelKind::UVitae;
    if (name == "c-vitae") return ModelKind::CVitae;
    throw ConfigError("unknown model kind '" + name + "'");
}

TransformKind transform_kind_from(const std::string& name) {
    if (name == "affine") return TransformKind::Affine;
    if (name == "affine-decomp") return TransformKind::AffineDecomp;
    if (name == "affine-diffeo") return TransformKind::AffineDiffeo;
    if (name == "cpab") return TransformKind::Cpab;
    throw ConfigError("unknown transform kind '" + name + "'");
}

const char* likelihood_name(Likelihood l) {
    return l == Likelihood::Bernoulli ? "bernoulli" : "gaussian";
}

Likelihood likelihood_from(const std::string& name) {
    if (name == "bernoulli") return Likelihood::Bernoulli;
    if (name == "gaussian") return Likelihood::Gaussian;
    throw ConfigError("unknown likelihood '" + name + "'");
}

namespace {

size_t appearance_width(size_t w) { return (size_t)std::ceil(0.6 * (double)w); }
size_t perspective_width(size_t w) { return (size_t)std::floor(0.4 * (double)w); }

Dense make_dense(size_t in, size_t out, RngStream& rng) {
    double a = std::sqrt(6.0 / (double)(in + out));
    std::vector<double> w(in * out);
    for (auto& v : w) v = rng.uniform(-a, a);
    return {Tensor::from_data({in, out}, std::move(w), true), Tensor::zeros({1, out}, true)};
}

Dense make_zero_dense(size_t in, size_t out) {
    return {Tensor::zeros({in, out}, true), Tensor::zeros({1, out}, true)};
}

Tensor dense_forward(const Dense& d, const Tensor& x) {
    Tensor ones = Tensor::full({x.shape()[0], 1}, 1.0);
    return add(matmul(x, d.w), matmul(ones, d.b));
}

Tensor mlp_forward(const Mlp& m, const Tensor& x) {
    Tensor h = x;
    for (const auto& layer : m.layers) h = leakyrelu(dense_forward(layer, h));
    return h;
}

GaussianParams posterior(const Mlp& trunk, const Dense& mu_head, const Dense& var_head,
                         const Tensor& x) {
    Tensor h = mlp_forward(trunk, x);
    Tensor mu = dense_forward(mu_head, h);
    Tensor raw = dense_forward(var_head, h);
    Tensor var = add(softplus(raw), Tensor::full(raw.shape(), 1e-6));
    return {mu, var};
}

Tensor neg(const Tensor& t) { return mul(t, Tensor::full(t.shape(), -1.0)); }

// head output -> valid transformation parameters; zero head output must give
// the identity transformation for every kind
Tensor gamma_from_raw(const Model& m, const Tensor& raw) {
    size_t b = raw.shape()[0];
    switch (m.cfg.transform) {
        case TransformKind::Affine: {
            std::vector<double> ident(b * 6);
            for (size_t i = 0; i < b; ++i) {
                double row[6] = {1, 0, 0, 0, 1, 0};
                for (int j = 0; j < 6; ++j) ident[6 * i + j] = row[j];
            }
            return add(raw, Tensor::from_data({b, 6}, std::move(ident)));
        }
        case TransformKind::AffineDecomp: {
            // softplus(h + ln(e-1)) == 1 at h == 0, keeping scales positive
            double shift = std::log(std::exp(1.0) - 1.0);
            Tensor scales =
                softplus(add(slice(raw, 1, 0, 2), Tensor::full({b, 2}, shift)));
            return concat({scales, slice(raw, 1, 2, 6)}, 1);
        }
        case TransformKind::AffineDiffeo:
        case TransformKind::Cpab: return raw;
    }
    throw ConfigError("gamma_from_raw: unknown transform kind");
}

Tensor decoder_output(const Model& m, const Mlp& net, const Dense& out_head, const Tensor& z) {
    Tensor h = dense_forward(out_head, mlp_forward(net, z));
    return m.cfg.likelihood == Likelihood::Bernoulli ? sigmoid(h) : h;
}

void push_mlp(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix,
              const Mlp& m) {
    for (size_t i = 0; i < m.layers.size(); ++i) {
        out.emplace_back(prefix + ".layer" + std::to_string(i) + ".weight", m.layers[i].w);
        out.emplace_back(prefix + ".layer" + std::to_string(i) + ".bias", m.layers[i].b);
    }
}

void push_dense(std::vector<std::pair<std::string, Tensor>>& out, const std::string& name,
                const Dense& d) {
    out.emplace_back(name + ".weight", d.w);
    out.emplace_back(name + ".bias", d.b);
}

}  // namespace

size_t Model::gamma_dim() const { return param_count(cfg.transform, basis.get()); }

std::vector<std::pair<std::string, Tensor>> Model::named_params() const {
    std::vector<std::pair<std::string, Tensor>> out;
    if (!cfg.split()) {
        push_mlp(out, "q", q_trunk);
        push_dense(out, "q.mu", q_mu);
        push_dense(out, "q.var", q_var);
        push_mlp(out, "p", p_net);
        push_dense(out, "p.out", p_out);
        return out;
    }
    push_mlp(out, "qA", qa_trunk);
    push_dense(out, "qA.mu", qa_mu);
    push_dense(out, "qA.var", qa_var);
    push_mlp(out, "qP", qp_trunk);
    push_dense(out, "qP.mu", qp_mu);
    push_dense(out, "qP.var", qp_var);
    push_mlp(out, "pA", pa_net);
    push_dense(out, "pA.out", pa_out);
    push_mlp(out, "pG", pg_net);
    push_dense(out, "pG.out", pg_out);
    return out;
}

size_t Model::param_scalars() const {
    size_t n = 0;
    for (const auto& [name, t] : named_params()) n += t.numel();
    return n;
}

Model build_model(const ModelConfig& cfg, RngStream& init) {
    Model m;
    m.cfg = cfg;
    if (cfg.transform == TransformKind::Cpab)
        m.basis = std::make_shared<CpabBasis>(
            build_continuity_basis(make_tessellation(cfg.tess_nx, cfg.tess_ny), cfg.zero_boundary));

    size_t d_in = cfg.pixels();
    if (!cfg.split()) {
        m.q_trunk.layers = {make_dense(d_in, cfg.enc_w1, init), make_dense(cfg.enc_w1, cfg.enc_w2, init)};
        m.q_mu = make_dense(cfg.enc_w2, cfg.d, init);
        m.q_var = make_dense(cfg.enc_w2, cfg.d, init);
        m.p_net.layers = {make_dense(cfg.d, cfg.dec_w1, init), make_dense(cfg.dec_w1, cfg.dec_w2, init)};
        m.p_out = make_dense(cfg.dec_w2, d_in, init);
        return m;
    }

    size_t a1 = appearance_width(cfg.enc_w1), a2 = appearance_width(cfg.enc_w2);
    size_t p1 = perspective_width(cfg.enc_w1), p2 = perspective_width(cfg.enc_w2);
    size_t da1 = appearance_width(cfg.dec_w1), da2 = appearance_width(cfg.dec_w2);
    size_t dp1 = perspective_width(cfg.dec_w1), dp2 = perspective_width(cfg.dec_w2);

    m.qa_trunk.layers = {make_dense(d_in, a1, init), make_dense(a1, a2, init)};
    m.qa_mu = make_dense(a2, cfg.d_a, init);
    m.qa_var = make_dense(a2, cfg.d_a, init);
    m.qp_trunk.layers = {make_dense(d_in, p1, init), make_dense(p1, p2, init)};
    m.qp_mu = make_dense(p2, cfg.d_p, init);
    m.qp_var = make_dense(p2, cfg.d_p, init);
    m.pa_net.layers = {make_dense(cfg.d_a, da1, init), make_dense(da1, da2, init)};
    m.pa_out = make_dense(da2, d_in, init);
    m.pg_net.layers = {make_dense(cfg.d_p, dp1, init), make_dense(dp1, dp2, init)};
    m.pg_out = make_zero_dense(dp2, m.gamma_dim());
    return m;
}

Tensor reparameterize(const GaussianParams& g, const Tensor& noise) {
    return add(g.mu, mul(sqrt(g.var), noise));
}

Tensor warp_batch(const Model& m, const Tensor& images, const Tensor& gammas, bool inverse) {
    if (images.rank() != 2 || images.shape()[1] != m.cfg.pixels())
        throw ShapeMismatch("warp_batch: images must be [B, " + std::to_string(m.cfg.pixels()) + "]");
    size_t b = images.shape()[0];
    if (gammas.rank() != 2 || gammas.shape()[0] != b || gammas.shape()[1] != m.gamma_dim())
        throw ShapeMismatch("warp_batch: gammas must be [B, " + std::to_string(m.gamma_dim()) + "]");
    if (m.cfg.transform == TransformKind::Cpab) {
        std::vector<Tensor> rows;
        rows.reserve(b);
        for (size_t i = 0; i < b; ++i) {
            Tensor img = reshape(slice(images, 0, i, i + 1), {m.cfg.img_h, m.cfg.img_w});
            TransformParams tp;
            tp.kind = m.cfg.transform;
            tp.params = reshape(slice(gammas, 0, i, i + 1), {m.gamma_dim()});
            tp.basis = m.basis.get();
            tp.steps = m.cfg.steps;
            rows.push_back(reshape(spatial_transform(img, tp, inverse), {1, m.cfg.pixels()}));
        }
        return b == 1 ? rows[0] : concat(rows, 0);
    }
    // matrix maps take the fused batch kernel; a plain forward warp is the
    // matrix itself, and velocity rows get the batched exponential
    Tensor mats;
    if (m.cfg.transform == TransformKind::Affine && !inverse) {
        mats = gammas;
    } else if (m.cfg.transform == TransformKind::AffineDiffeo) {
        mats = expm_batch_rowmajor(gammas, inverse ? -1 : +1);
    } else {
        std::vector<Tensor> rows;
        rows.reserve(b);
        for (size_t i = 0; i < b; ++i) {
            Tensor six = affine_matrix_rowmajor(m.cfg.transform,
                                                reshape(slice(gammas, 0, i, i + 1), {6}), inverse);
            rows.push_back(reshape(six, {1, 6}));
        }
        mats = b == 1 ? rows[0] : concat(rows, 0);
    }
    return warp_rows_affine(images, mats, m.cfg.img_h, m.cfg.img_w);
}

EncodeResult encode(const Model& m, const Tensor& x, const Tensor* noise_p) {
    if (x.rank() != 2 || x.shape()[1] != m.cfg.pixels())
        throw ShapeMismatch("encode: input must be [B, " + std::to_string(m.cfg.pixels()) + "]");
    EncodeResult r;
    if (!m.cfg.split()) {
        r.qa = posterior(m.q_trunk, m.q_mu, m.q_var, x);
        return r;
    }
    r.qp = posterior(m.qp_trunk, m.qp_mu, m.qp_var, x);
    if (m.cfg.kind == ModelKind::UVitae) {
        r.qa = posterior(m.qa_trunk, m.qa_mu, m.qa_var, x);
        return r;
    }
    // conditional pathway: the appearance encoder sees the input pulled back
    // through the inverse of the transformation decoded from z_P
    r.zp = noise_p && noise_p->defined() ? reparameterize(r.qp, *noise_p) : r.qp.mu;
    r.gamma_d_enc = gamma_from_raw(m, dense_forward(m.pg_out, mlp_forward(m.pg_net, r.zp)));
    if (m.cfg.transform == TransformKind::AffineDiffeo || m.cfg.transform == TransformKind::Cpab)
        r.gamma_e = neg(r.gamma_d_enc);
    r.aligned = warp_batch(m, x, r.gamma_d_enc, /*inverse=*/true);
    r.qa = posterior(m.qa_trunk, m.qa_mu, m.qa_var, r.aligned);
    return r;
}

DecodeResult decode(const Model& m, const Tensor& za, const Tensor& zp) {
    DecodeResult r;
    if (!m.cfg.split()) {
        r.recon = decoder_output(m, m.p_net, m.p_out, za);
        r.appearance = r.recon;
        return r;
    }
    if (!zp.defined()) throw ShapeMismatch("decode: two-branch model needs a perspective latent");
    r.appearance = decoder_output(m, m.pa_net, m.pa_out, za);
    r.gamma_d = gamma_from_raw(m, dense_forward(m.pg_out, mlp_forward(m.pg_net, zp)));
    r.recon = warp_batch(m, r.appearance, r.gamma_d, /*inverse=*/false);
    return r;
}

ForwardPass forward(const Model& m, const Tensor& x, const Tensor& noise_a, const Tensor& noise_p) {
    ForwardPass fp;
    if (!m.cfg.split()) {
        EncodeResult er = encode(m, x);
        fp.qa = er.qa;
        fp.za = reparameterize(er.qa, noise_a);
        DecodeResult dr = decode(m, fp.za);
        fp.recon = dr.recon;
        fp.appearance = dr.appearance;
        return fp;
    }

    EncodeResult er = encode(m, x, &noise_p);
    fp.qa = er.qa;
    fp.qp = er.qp;
    fp.gamma_e = er.gamma_e;
    fp.za = reparameterize(er.qa, noise_a);
    if (m.cfg.kind == ModelKind::UVitae) {
        fp.zp = reparameterize(er.qp, noise_p);
        DecodeResult dr = decode(m, fp.za, fp.zp);
        fp.recon = dr.recon;
        fp.appearance = dr.appearance;
        fp.gamma_d = dr.gamma_d;
        return fp;
    }
    // CVitae: one pathway — the decoder warps with the transformation already
    // decoded from the posterior z_P sample
    fp.zp = er.zp;
    fp.gamma_d = er.gamma_d_enc;
    fp.appearance = decoder_output(m, m.pa_net, m.pa_out, fp.za);
    fp.recon = warp_batch(m, fp.appearance, fp.gamma_d, /*inverse=*/false);
    return fp;
}

Tensor generate(const Model& m, const Tensor& noise_a, const Tensor& noise_p) {
    return decode(m, noise_a, noise_p).recon;
}

namespace {

double cfg_num(const std::vector<NamedArray>& arrays, const std::string& name) {
    for (const auto& a : arrays)
        if (a.name == name) {
            if (a.data.size() != 1) throw ShapeMismatch("checkpoint scalar " + name);
            return a.data[0];
        }
    throw BadMagic("checkpoint missing field " + name);
}

}  // namespace

void save_model(const Model& m, const std::string& path) {
    std::vector<NamedArray> arrays;
    auto put = [&](const std::string& name, double v) {
        arrays.push_back({"config." + name, {1}, {v}});
    };
    put("kind", (double)(int)m.cfg.kind);
    put("transform", (double)(int)m.cfg.transform);
    put("img_h", (double)m.cfg.img_h);
    put("img_w", (double)m.cfg.img_w);
    put("d", (double)m.cfg.d);
    put("d_a", (double)m.cfg.d_a);
    put("d_p", (double)m.cfg.d_p);
    put("likelihood", (double)(int)m.cfg.likelihood);
    put("beta", m.cfg.beta);
    put("enc_w1", (double)m.cfg.enc_w1);
    put("enc_w2", (double)m.cfg.enc_w2);
    put("dec_w1", (double)m.cfg.dec_w1);
    put("dec_w2", (double)m.cfg.dec_w2);
    put("tess_nx", (double)m.cfg.tess_nx);
    put("tess_ny", (double)m.cfg.tess_ny);
    put("zero_boundary", m.cfg.zero_boundary ? 1.0 : 0.0);
    put("steps", (double)m.cfg.steps);
    for (const auto& [name, t] : m.named_params()) arrays.push_back({name, t.shape(), t.data()});
    save_arrays(path, arrays);
}

Model load_model(const std::string& path) {
    std::vector<NamedArray> arrays = load_arrays(path);
    ModelConfig cfg;
    cfg.kind = (ModelKind)(int)cfg_num(arrays, "config.kind");
    cfg.transform = (TransformKind)(int)cfg_num(arrays, "config.transform");
    cfg.img_h = (size_t)cfg_num(arrays, "config.img_h");
    cfg.img_w = (size_t)cfg_num(arrays, "config.img_w");
    cfg.d = (size_t)cfg_num(arrays, "config.d");
    cfg.d_a = (size_t)cfg_num(arrays, "config.d_a");
    cfg.d_p = (size_t)cfg_num(arrays, "config.d_p");
    cfg.likelihood = (Likelihood)(int)cfg_num(arrays, "config.likelihood");
    cfg.beta = cfg_num(arrays, "config.beta");
    cfg.enc_w1 = (size_t)cfg_num(arrays, "config.enc_w1");
    cfg.enc_w2 = (size_t)cfg_num(arrays, "config.enc_w2");
    cfg.dec_w1 = (size_t)cfg_num(arrays, "config.dec_w1");
    cfg.dec_w2 = (size_t)cfg_num(arrays, "config.dec_w2");
    cfg.tess_nx = (size_t)cfg_num(arrays, "config.tess_nx");
    cfg.tess_ny = (size_t)cfg_num(arrays, "config.tess_ny");
    cfg.zero_boundary = cfg_num(arrays, "config.zero_boundary") != 0.0;
    cfg.steps = (int)cfg_num(arrays, "config.steps");

    RngStream unused(0, "load");
    Model m = build_model(cfg, unused);
    for (auto& [name, t] : m.named_params()) {
        bool found = false;
        for (const auto& a : arrays) {
            if (a.name != name) continue;
            if (a.shape != t.shape())
                throw ShapeMismatch("checkpoint array " + name + " has shape " + shape_str(a.shape) +
                                    ", model wants " + shape_str(t.shape()));
            t.leaf_data() = a.data;
            found = true;
            break;
        }
        if (!found) throw BadMagic("checkpoint missing array " + name);
    }
    return m;
}

}  // namespace vitae
