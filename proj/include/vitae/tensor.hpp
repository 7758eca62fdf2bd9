#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "vitae/errors.hpp"

namespace vitae {

// Dense, double-precision, rank <= 4 in practice (nothing enforces a cap).
// A forward pass builds a DAG of nodes; the tape is that DAG in creation
// order, owned by whoever holds the output tensors.  No global state, so
// forward passes on different threads never share anything.
enum class OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Sum,
    Mean,
    Reshape,
    Slice,
    Concat,
    Exp,
    Log,
    Sqrt,
    Sigmoid,
    Softplus,
    LeakyRelu,
    Clamp,
    Custom,  // structured kernels (bilinear sampling, piecewise fields) with hand-written backward
};

struct OpAttrs {
    double alpha = 0.1;  // leakyrelu slope for x < 0
    double lo = 0.0, hi = 0.0;
    int axis = 0;
    size_t start = 0, stop = 0;
    std::vector<size_t> shape;
};

struct TensorNode {
    std::vector<size_t> shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // sized on first accumulation
    OpKind op = OpKind::Leaf;
    std::vector<std::shared_ptr<TensorNode>> inputs;
    OpAttrs attrs;
    std::string label;  // custom kernel name, for error messages
    std::function<void(TensorNode&)> custom_backward;

    size_t numel() const {
        size_t n = 1;
        for (size_t e : shape) n *= e;
        return n;
    }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

using NodePtr = std::shared_ptr<TensorNode>;

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(NodePtr n) : n_(std::move(n)) {}

    static Tensor from_data(std::vector<size_t> shape, std::vector<double> data, bool requires_grad = false);
    static Tensor zeros(std::vector<size_t> shape, bool requires_grad = false);
    static Tensor full(std::vector<size_t> shape, double v, bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);

    bool defined() const { return n_ != nullptr; }
    const std::vector<size_t>& shape() const { return n_->shape; }
    size_t rank() const { return n_->shape.size(); }
    size_t numel() const { return n_->numel(); }
    const std::vector<double>& data() const { return n_->data; }
    bool requires_grad() const { return n_->requires_grad; }
    const std::vector<double>& grad() const;
    void zero_grad() { n_->grad.assign(n_->data.size(), 0.0); }

    // scalar extraction; NotScalar if numel != 1
    double value() const;

    // In-place data write for optimizer updates on leaves. Never call on a
    // node that is an input of a live tape.
    std::vector<double>& leaf_data();

    NodePtr node() const { return n_; }

private:
    NodePtr n_;
};

// --- op vocabulary ---
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor matmul(const Tensor& a, const Tensor& b);  // rank-2 x rank-2 only
Tensor sum(const Tensor& a);                      // full reduction to rank-0
Tensor mean(const Tensor& a);
Tensor reshape(const Tensor& a, std::vector<size_t> shape);
Tensor slice(const Tensor& a, int axis, size_t start, size_t stop);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor leakyrelu(const Tensor& a, double alpha = 0.1);
Tensor clamp(const Tensor& a, double lo, double hi);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

// Generic entry point over the vocabulary above (Custom is not reachable
// from here; structured kernels come from their owning modules).
Tensor apply(OpKind kind, const std::vector<Tensor>& inputs, const OpAttrs& attrs = {});

// Reverse-mode sweep from a scalar loss. Accumulates into .grad of every
// reachable node with requires_grad; repeated calls keep accumulating.
void backward(const Tensor& loss);

// max over coordinates of |analytic - central_difference| / max(1, |analytic|)
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h = 1e-5);

// Extension point for structured kernels: the closure receives the output
// node after the upstream grad is final and must push gradients into
// node.inputs itself.
Tensor make_custom(const std::string& label, std::vector<size_t> shape, std::vector<double> data,
                   std::vector<Tensor> inputs, std::function<void(TensorNode&)> backward_fn);

std::string shape_str(const std::vector<size_t>& s);

}  // namespace vitae
