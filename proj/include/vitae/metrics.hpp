#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "vitae/data.hpp"
#include "vitae/models.hpp"
#include "vitae/tensor.hpp"

namespace vitae {

struct KnnResult {
    std::vector<double> predictions;
    double accuracy = 0.0;
};

// majority vote over the k Euclidean nearest neighbours; distance ties prefer
// the smaller train index, vote ties the smaller label, so results are
// deterministic; k is clamped to the train size
KnnResult knn_classify(const Tensor& train_codes, const std::vector<double>& train_labels,
                       const Tensor& test_codes, const std::vector<double>& test_labels,
                       size_t k = 5);

// R[i][j]: how well latent dimension i alone predicts factor j, above chance
struct ImportanceMatrix {
    size_t d = 0, f = 0;
    std::vector<double> r;  // row-major d x f, entries >= 0 and finite
    double at(size_t i, size_t j) const { return r[i * f + j]; }
};

// discrete factor j: max(0, knn accuracy - modal-class frequency), both on the
// eval split; continuous factor j: R^2 of 1-NN regression, floored at 0
ImportanceMatrix importance_matrix(const Tensor& train_codes, const Tensor& train_factors,
                                   const Tensor& eval_codes, const Tensor& eval_factors,
                                   const std::vector<FactorSpec>& specs, size_t k = 5);

// convenience: seeded 80/20 split of one labeled set, then the overload above
ImportanceMatrix importance_matrix(const Tensor& codes, const Tensor& factors,
                                   const std::vector<FactorSpec>& specs, size_t k = 5,
                                   uint64_t seed = 0);

// weighted row-sparsity of R: rho_i = 1 - H(row_i normalized)/log F, weighted
// by normalized row sums; single-factor matrices score 1 on any positive row
double d_score(const ImportanceMatrix& r);

// posterior-mean codes [N, d_A+d_P] (or [N, d]), batched through the encoder
Tensor model_codes(const Model& m, const Tensor& images, size_t batch = 256);

// encode x [1,D] to posterior means, sweep one latent dimension across
// [lo, hi], decode each setting into one row; steps == 1 keeps the mean
Tensor latent_traversal(const Model& m, const Tensor& x, size_t dim, double lo = -3.0,
                        double hi = 3.0, size_t steps = 9);

}  // namespace vitae
