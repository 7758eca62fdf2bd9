#include "vitae/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "vitae/errors.hpp"
#include "vitae/rng.hpp"

namespace vitae {

namespace {

double sq_dist(const double* a, const double* b, size_t d) {
    double acc = 0.0;
    for (size_t j = 0; j < d; ++j) {
        double r = a[j] - b[j];
        acc += r * r;
    }
    return acc;
}

// indices of the k nearest train rows, distance ties resolved toward the
// smaller index by the comparison order
std::vector<size_t> nearest(const double* probe, const std::vector<double>& train, size_t n,
                            size_t d, size_t k) {
    std::vector<std::pair<double, size_t>> dist(n);
    for (size_t i = 0; i < n; ++i) dist[i] = {sq_dist(probe, train.data() + i * d, d), i};
    std::partial_sort(dist.begin(), dist.begin() + (ptrdiff_t)k, dist.end());
    std::vector<size_t> out(k);
    for (size_t i = 0; i < k; ++i) out[i] = dist[i].second;
    return out;
}

double majority_label(const std::vector<size_t>& idx, const std::vector<double>& labels) {
    std::map<double, size_t> votes;
    for (size_t i : idx) ++votes[labels[i]];
    double best = 0.0;
    size_t best_count = 0;
    for (const auto& [label, count] : votes)  // map order: smallest label wins ties
        if (count > best_count) {
            best = label;
            best_count = count;
        }
    return best;
}

}  // namespace

KnnResult knn_classify(const Tensor& train_codes, const std::vector<double>& train_labels,
                       const Tensor& test_codes, const std::vector<double>& test_labels,
                       size_t k) {
    size_t n = train_codes.defined() ? train_codes.shape()[0] : 0;
    if (n == 0) throw EmptyTrainSet("knn_classify: no training rows");
    if (n != train_labels.size())
        throw ShapeMismatch("knn_classify: train codes/labels disagree");
    size_t d = train_codes.shape()[1];
    if (test_codes.shape()[1] != d) throw ShapeMismatch("knn_classify: code widths disagree");
    size_t m = test_codes.shape()[0];
    if (m != test_labels.size()) throw ShapeMismatch("knn_classify: test codes/labels disagree");
    if (k == 0) throw ConfigError("knn_classify: k must be at least 1");
    k = std::min(k, n);

    KnnResult res;
    res.predictions.resize(m);
    size_t hits = 0;
    const std::vector<double>& tr = train_codes.data();
    const std::vector<double>& te = test_codes.data();
    for (size_t i = 0; i < m; ++i) {
        res.predictions[i] = majority_label(nearest(te.data() + i * d, tr, n, d, k), train_labels);
        if (res.predictions[i] == test_labels[i]) ++hits;
    }
    res.accuracy = m == 0 ? 0.0 : (double)hits / (double)m;
    return res;
}

namespace {

std::vector<double> column(const Tensor& t, size_t j) {
    size_t n = t.shape()[0], w = t.shape()[1];
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = t.data()[i * w + j];
    return out;
}

Tensor column_tensor(const Tensor& t, size_t j) {
    std::vector<double> v = column(t, j);
    size_t n = v.size();
    return Tensor::from_data({n, 1}, std::move(v));
}

double modal_frequency(const std::vector<double>& labels) {
    std::map<double, size_t> counts;
    for (double v : labels) ++counts[v];
    size_t best = 0;
    for (const auto& [label, count] : counts) best = std::max(best, count);
    return (double)best / (double)labels.size();
}

// R^2 of predicting the eval factor by its 1-NN's train factor, floored at 0
double regression_importance(const Tensor& train_dim, const std::vector<double>& train_y,
                             const Tensor& eval_dim, const std::vector<double>& eval_y) {
    size_t m = eval_dim.shape()[0];
    double mean = 0.0;
    for (double v : eval_y) mean += v;
    mean /= (double)m;
    double ss_tot = 0.0;
    for (double v : eval_y) ss_tot += (v - mean) * (v - mean);
    if (ss_tot == 0.0)
        throw DegenerateFactor("continuous factor constant on the evaluation split");
    double ss_res = 0.0;
    const std::vector<double>& tr = train_dim.data();
    for (size_t i = 0; i < m; ++i) {
        std::vector<size_t> nn = nearest(eval_dim.data().data() + i, tr, tr.size(), 1, 1);
        double r = eval_y[i] - train_y[nn[0]];
        ss_res += r * r;
    }
    return std::max(0.0, 1.0 - ss_res / ss_tot);
}

}  // namespace

ImportanceMatrix importance_matrix(const Tensor& train_codes, const Tensor& train_factors,
                                   const Tensor& eval_codes, const Tensor& eval_factors,
                                   const std::vector<FactorSpec>& specs, size_t k) {
    if (train_codes.shape()[0] == 0) throw EmptyTrainSet("importance_matrix: no training rows");
    size_t d = train_codes.shape()[1];
    size_t f = train_factors.shape()[1];
    if (specs.size() != f) throw ShapeMismatch("importance_matrix: factor specs vs columns");

    ImportanceMatrix out;
    out.d = d;
    out.f = f;
    out.r.assign(d * f, 0.0);
    for (size_t j = 0; j < f; ++j) {
        std::vector<double> train_y = column(train_factors, j);
        std::vector<double> eval_y = column(eval_factors, j);
        bool discrete = specs[j].type == FactorType::Discrete;
        double chance = 0.0;
        if (discrete) {
            std::map<double, size_t> distinct;
            for (double v : eval_y) ++distinct[v];
            if (distinct.size() < 2)
                throw DegenerateFactor("factor " + specs[j].name +
                                       " has fewer than two classes on the evaluation split");
            chance = modal_frequency(eval_y);
        }
        for (size_t i = 0; i < d; ++i) {
            Tensor train_dim = column_tensor(train_codes, i);
            Tensor eval_dim = column_tensor(eval_codes, i);
            if (discrete) {
                double acc = knn_classify(train_dim, train_y, eval_dim, eval_y, k).accuracy;
                out.r[i * f + j] = std::max(0.0, acc - chance);
            } else {
                out.r[i * f + j] = regression_importance(train_dim, train_y, eval_dim, eval_y);
            }
        }
    }
    return out;
}

ImportanceMatrix importance_matrix(const Tensor& codes, const Tensor& factors,
                                   const std::vector<FactorSpec>& specs, size_t k, uint64_t seed) {
    size_t n = codes.shape()[0];
    size_t test_n = n / 5;
    if (test_n == 0 || n - test_n == 0)
        throw EmptyTrainSet("importance_matrix: too few rows to split");
    std::vector<size_t> perm(n);
    for (size_t i = 0; i < n; ++i) perm[i] = i;
    RngStream r(seed, "metrics-split");
    r.shuffle(perm);

    size_t dc = codes.shape()[1], fc = factors.shape()[1];
    auto take = [&](const Tensor& t, size_t w, size_t lo, size_t hi) {
        std::vector<double> v((hi - lo) * w);
        for (size_t i = lo; i < hi; ++i)
            std::copy(t.data().begin() + (ptrdiff_t)(perm[i] * w),
                      t.data().begin() + (ptrdiff_t)((perm[i] + 1) * w),
                      v.begin() + (ptrdiff_t)((i - lo) * w));
        return Tensor::from_data({hi - lo, w}, std::move(v));
    };
    size_t train_n = n - test_n;
    return importance_matrix(take(codes, dc, 0, train_n), take(factors, fc, 0, train_n),
                             take(codes, dc, train_n, n), take(factors, fc, train_n, n), specs, k);
}

double d_score(const ImportanceMatrix& r) {
    double total = 0.0;
    for (double v : r.r) {
        if (!(v >= 0.0) || !std::isfinite(v))
            throw AllZeroImportance("d_score: importances must be finite and nonnegative");
        total += v;
    }
    if (total == 0.0) throw AllZeroImportance("d_score: every importance is zero");

    double score = 0.0;
    double log_f = std::log((double)r.f);
    for (size_t i = 0; i < r.d; ++i) {
        double row_sum = 0.0;
        for (size_t j = 0; j < r.f; ++j) row_sum += r.at(i, j);
        if (row_sum == 0.0) continue;  // no weight, no contribution
        double h = 0.0;
        for (size_t j = 0; j < r.f; ++j) {
            double p = r.at(i, j) / row_sum;
            if (p > 0.0) h -= p * std::log(p);
        }
        double rho = r.f == 1 ? 1.0 : 1.0 - h / log_f;
        score += (row_sum / total) * rho;
    }
    return score;
}

Tensor model_codes(const Model& m, const Tensor& images, size_t batch) {
    size_t n = images.shape()[0], d = images.shape()[1];
    size_t width = m.cfg.latent_dim();
    std::vector<double> codes(n * width);
    for (size_t at = 0; at < n; at += batch) {
        size_t hi = std::min(at + batch, n);
        std::vector<double> chunk(images.data().begin() + (ptrdiff_t)(at * d),
                                  images.data().begin() + (ptrdiff_t)(hi * d));
        EncodeResult er = encode(m, Tensor::from_data({hi - at, d}, std::move(chunk)));
        for (size_t i = 0; i < hi - at; ++i) {
            if (m.cfg.split()) {
                for (size_t j = 0; j < m.cfg.d_a; ++j)
                    codes[(at + i) * width + j] = er.qa.mu.data()[i * m.cfg.d_a + j];
                for (size_t j = 0; j < m.cfg.d_p; ++j)
                    codes[(at + i) * width + m.cfg.d_a + j] = er.qp.mu.data()[i * m.cfg.d_p + j];
            } else {
                for (size_t j = 0; j < width; ++j)
                    codes[(at + i) * width + j] = er.qa.mu.data()[i * width + j];
            }
        }
    }
    return Tensor::from_data({n, width}, std::move(codes));
}

Tensor latent_traversal(const Model& m, const Tensor& x, size_t dim, double lo, double hi,
                        size_t steps) {
    if (x.rank() != 2 || x.shape()[0] != 1)
        throw ShapeMismatch("latent_traversal: expected a single image row");
    if (dim >= m.cfg.latent_dim()) throw ConfigError("latent_traversal: dimension out of range");
    if (steps == 0) throw ConfigError("latent_traversal: need at least one step");

    EncodeResult er = encode(m, x);
    bool split = m.cfg.split();
    std::vector<double> za = er.qa.mu.data();
    std::vector<double> zp = split ? er.qp.mu.data() : std::vector<double>();
    bool sweep_appearance = !split || dim < m.cfg.d_a;
    size_t local = sweep_appearance ? dim : dim - m.cfg.d_a;
    double base = sweep_appearance ? za[local] : zp[local];

    size_t d = x.shape()[1];
    std::vector<double> strip(steps * d);
    for (size_t s = 0; s < steps; ++s) {
        double v = steps == 1 ? base : lo + (hi - lo) * (double)s / (double)(steps - 1);
        std::vector<double> a = za, p = zp;
        (sweep_appearance ? a[local] : p[local]) = v;
        size_t na = a.size(), np = p.size();
        Tensor ta = Tensor::from_data({1, na}, std::move(a));
        Tensor tp = split ? Tensor::from_data({1, np}, std::move(p)) : Tensor();
        Tensor row = decode(m, ta, tp).recon;
        std::copy(row.data().begin(), row.data().end(), strip.begin() + (ptrdiff_t)(s * d));
    }
    return Tensor::from_data({steps, d}, std::move(strip));
}

}  // namespace vitae
