#include "vitae/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

extern "C" {
void cblas_dgemm(int order, int transa, int transb, int m, int n, int k, double alpha, const double* a,
                 int lda, const double* b, int ldb, double beta, double* c, int ldc);
void openblas_set_num_threads(int);
}

namespace {
constexpr int kRowMajor = 101;
constexpr int kNoTrans = 111;
constexpr int kTrans = 112;

void dgemm(bool ta, bool tb, int m, int n, int k, const double* a, int lda, const double* b, int ldb,
           double beta, double* c, int ldc) {
    // Single BLAS thread: results must be bit-identical across runs.
    static const bool init = [] {
        openblas_set_num_threads(1);
        return true;
    }();
    (void)init;
    cblas_dgemm(kRowMajor, ta ? kTrans : kNoTrans, tb ? kTrans : kNoTrans, m, n, k, 1.0, a, lda, b, ldb,
                beta, c, ldc);
}
}  // namespace

namespace vitae {

std::string shape_str(const std::vector<size_t>& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

static const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::Leaf: return "leaf";
        case OpKind::Add: return "add";
        case OpKind::Sub: return "sub";
        case OpKind::Mul: return "mul";
        case OpKind::Div: return "div";
        case OpKind::MatMul: return "matmul";
        case OpKind::Sum: return "sum";
        case OpKind::Mean: return "mean";
        case OpKind::Reshape: return "reshape";
        case OpKind::Slice: return "slice";
        case OpKind::Concat: return "concat";
        case OpKind::Exp: return "exp";
        case OpKind::Log: return "log";
        case OpKind::Sqrt: return "sqrt";
        case OpKind::Sigmoid: return "sigmoid";
        case OpKind::Softplus: return "softplus";
        case OpKind::LeakyRelu: return "leakyrelu";
        case OpKind::Clamp: return "clamp";
        case OpKind::Custom: return "custom";
    }
    return "?";
}

static size_t numel_of(const std::vector<size_t>& shape) {
    size_t n = 1;
    for (size_t e : shape) n *= e;
    return n;
}

// Output values must be finite after every op; a NaN/Inf here is how
// divergence surfaces, and the training loop catches it.
static void check_finite(const TensorNode& n) {
    for (double v : n.data) {
        if (!std::isfinite(v)) {
            throw NonFinite(std::string(op_name(n.op)) + (n.label.empty() ? "" : ":" + n.label) +
                            " produced a non-finite value");
        }
    }
}

static Tensor finish(NodePtr n) {
    check_finite(*n);
    return Tensor(std::move(n));
}

Tensor Tensor::from_data(std::vector<size_t> shape, std::vector<double> data, bool requires_grad) {
    if (numel_of(shape) != data.size())
        throw ShapeMismatch("from_data: " + shape_str(shape) + " vs " + std::to_string(data.size()) +
                            " values");
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::zeros(std::vector<size_t> shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(std::vector<size_t> shape, double v, bool requires_grad) {
    std::vector<double> d(numel_of(shape), v);
    return from_data(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::scalar(double v, bool requires_grad) { return from_data({}, {v}, requires_grad); }

const std::vector<double>& Tensor::grad() const {
    n_->ensure_grad();
    return n_->grad;
}

double Tensor::value() const {
    if (numel() != 1) throw NotScalar("value() on shape " + shape_str(shape()));
    return n_->data[0];
}

std::vector<double>& Tensor::leaf_data() {
    if (n_->op != OpKind::Leaf) throw std::logic_error("leaf_data() on a non-leaf tensor");
    return n_->data;
}

static NodePtr new_node(OpKind op, std::vector<size_t> shape, std::vector<Tensor> inputs) {
    auto n = std::make_shared<TensorNode>();
    n->op = op;
    n->shape = std::move(shape);
    n->data.resize(n->numel());
    n->inputs.reserve(inputs.size());
    for (auto& t : inputs) {
        n->requires_grad = n->requires_grad || t.requires_grad();
        n->inputs.push_back(t.node());
    }
    return n;
}

// Elementwise shapes conform when identical, or when they agree everywhere
// but the last axis and one side has extent 1 there.  Anything fancier is a
// ShapeMismatch by design.
struct EwPlan {
    size_t rows, cols, la, lb;  // la/lb: last-axis strides (0 when broadcasting)
};

static EwPlan ew_plan(const char* what, const Tensor& a, const Tensor& b) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa == sb) {
        size_t n = a.numel();
        return {1, n, 1, 1};
    }
    if (sa.size() != sb.size() || sa.empty())
        throw ShapeMismatch(std::string(what) + ": " + shape_str(sa) + " vs " + shape_str(sb));
    for (size_t i = 0; i + 1 < sa.size(); ++i)
        if (sa[i] != sb[i])
            throw ShapeMismatch(std::string(what) + ": " + shape_str(sa) + " vs " + shape_str(sb));
    size_t ea = sa.back(), eb = sb.back();
    if (!((ea == 1 && eb > 1) || (eb == 1 && ea > 1)))
        throw ShapeMismatch(std::string(what) + ": " + shape_str(sa) + " vs " + shape_str(sb));
    size_t rows = numel_of(sa) / ea;
    return {rows, std::max(ea, eb), ea == 1 ? size_t{0} : size_t{1}, eb == 1 ? size_t{0} : size_t{1}};
}

template <typename F>
static Tensor ew_binary(OpKind op, const Tensor& a, const Tensor& b, F f) {
    EwPlan p = ew_plan(op_name(op), a, b);
    std::vector<size_t> out_shape = p.la ? a.shape() : b.shape();
    auto n = new_node(op, std::move(out_shape), {a, b});
    const auto& da = a.data();
    const auto& db = b.data();
    size_t wa = p.la ? p.cols : 1, wb = p.lb ? p.cols : 1;
    for (size_t r = 0; r < p.rows; ++r)
        for (size_t c = 0; c < p.cols; ++c)
            n->data[r * p.cols + c] = f(da[r * wa + c * p.la], db[r * wb + c * p.lb]);
    return finish(std::move(n));
}

Tensor add(const Tensor& a, const Tensor& b) {
    return ew_binary(OpKind::Add, a, b, [](double x, double y) { return x + y; });
}
Tensor sub(const Tensor& a, const Tensor& b) {
    return ew_binary(OpKind::Sub, a, b, [](double x, double y) { return x - y; });
}
Tensor mul(const Tensor& a, const Tensor& b) {
    return ew_binary(OpKind::Mul, a, b, [](double x, double y) { return x * y; });
}
Tensor div(const Tensor& a, const Tensor& b) {
    return ew_binary(OpKind::Div, a, b, [](double x, double y) { return x / y; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0])
        throw ShapeMismatch("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    size_t m = a.shape()[0], k = a.shape()[1], nn = b.shape()[1];
    auto n = new_node(OpKind::MatMul, {m, nn}, {a, b});
    dgemm(false, false, (int)m, (int)nn, (int)k, a.data().data(), (int)k, b.data().data(), (int)nn, 0.0,
          n->data.data(), (int)nn);
    return finish(std::move(n));
}

Tensor sum(const Tensor& a) {
    auto n = new_node(OpKind::Sum, {}, {a});
    double s = 0.0;
    for (double v : a.data()) s += v;
    n->data[0] = s;
    return finish(std::move(n));
}

Tensor mean(const Tensor& a) {
    if (a.numel() == 0) throw ShapeMismatch("mean of empty tensor");
    auto n = new_node(OpKind::Mean, {}, {a});
    double s = 0.0;
    for (double v : a.data()) s += v;
    n->data[0] = s / (double)a.numel();
    return finish(std::move(n));
}

Tensor reshape(const Tensor& a, std::vector<size_t> shape) {
    if (numel_of(shape) != a.numel())
        throw ShapeMismatch("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
    auto n = new_node(OpKind::Reshape, std::move(shape), {a});
    n->data = a.data();
    return finish(std::move(n));
}

struct AxisPlan {
    size_t outer, extent, inner;
};

static AxisPlan axis_plan(const std::vector<size_t>& shape, int axis) {
    AxisPlan p{1, shape[(size_t)axis], 1};
    for (int i = 0; i < axis; ++i) p.outer *= shape[(size_t)i];
    for (size_t i = (size_t)axis + 1; i < shape.size(); ++i) p.inner *= shape[i];
    return p;
}

Tensor slice(const Tensor& a, int axis, size_t start, size_t stop) {
    if (axis < 0 || (size_t)axis >= a.rank())
        throw ShapeMismatch("slice: axis " + std::to_string(axis) + " on " + shape_str(a.shape()));
    if (start >= stop || stop > a.shape()[(size_t)axis])
        throw ShapeMismatch("slice: [" + std::to_string(start) + "," + std::to_string(stop) + ") on " +
                            shape_str(a.shape()));
    auto out_shape = a.shape();
    out_shape[(size_t)axis] = stop - start;
    auto n = new_node(OpKind::Slice, out_shape, {a});
    n->attrs.axis = axis;
    n->attrs.start = start;
    n->attrs.stop = stop;
    AxisPlan p = axis_plan(a.shape(), axis);
    size_t w = stop - start;
    for (size_t o = 0; o < p.outer; ++o)
        for (size_t e = 0; e < w; ++e)
            std::copy_n(a.data().begin() + ((o * p.extent + start + e) * p.inner), p.inner,
                        n->data.begin() + ((o * w + e) * p.inner));
    return finish(std::move(n));
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ShapeMismatch("concat of nothing");
    const auto& s0 = parts[0].shape();
    if (axis < 0 || (size_t)axis >= s0.size())
        throw ShapeMismatch("concat: axis " + std::to_string(axis) + " on " + shape_str(s0));
    size_t total = 0;
    for (const auto& t : parts) {
        if (t.rank() != s0.size()) throw ShapeMismatch("concat: rank mismatch");
        for (size_t i = 0; i < s0.size(); ++i)
            if (i != (size_t)axis && t.shape()[i] != s0[i])
                throw ShapeMismatch("concat: " + shape_str(s0) + " vs " + shape_str(t.shape()));
        total += t.shape()[(size_t)axis];
    }
    auto out_shape = s0;
    out_shape[(size_t)axis] = total;
    auto n = new_node(OpKind::Concat, out_shape, parts);
    n->attrs.axis = axis;
    AxisPlan p = axis_plan(out_shape, axis);
    size_t off = 0;
    for (const auto& t : parts) {
        size_t w = t.shape()[(size_t)axis];
        for (size_t o = 0; o < p.outer; ++o)
            for (size_t e = 0; e < w; ++e)
                std::copy_n(t.data().begin() + ((o * w + e) * p.inner), p.inner,
                            n->data.begin() + ((o * p.extent + off + e) * p.inner));
        off += w;
    }
    return finish(std::move(n));
}

template <typename F>
static Tensor ew_unary(OpKind op, const Tensor& a, F f) {
    auto n = new_node(op, a.shape(), {a});
    const auto& d = a.data();
    for (size_t i = 0; i < d.size(); ++i) n->data[i] = f(d[i]);
    return finish(std::move(n));
}

Tensor exp(const Tensor& a) {
    return ew_unary(OpKind::Exp, a, [](double x) { return std::exp(x); });
}
Tensor log(const Tensor& a) {
    return ew_unary(OpKind::Log, a, [](double x) { return std::log(x); });
}
Tensor sqrt(const Tensor& a) {
    return ew_unary(OpKind::Sqrt, a, [](double x) { return std::sqrt(x); });
}
Tensor sigmoid(const Tensor& a) {
    return ew_unary(OpKind::Sigmoid, a, [](double x) {
        return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    });
}
Tensor softplus(const Tensor& a) {
    return ew_unary(OpKind::Softplus, a, [](double x) {
        return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
    });
}
Tensor leakyrelu(const Tensor& a, double alpha) {
    auto t = ew_unary(OpKind::LeakyRelu, a, [alpha](double x) { return x >= 0.0 ? x : alpha * x; });
    t.node()->attrs.alpha = alpha;
    return t;
}
Tensor clamp(const Tensor& a, double lo, double hi) {
    if (lo > hi) throw ShapeMismatch("clamp: lo > hi");
    auto t = ew_unary(OpKind::Clamp, a, [lo, hi](double x) { return std::min(std::max(x, lo), hi); });
    t.node()->attrs.lo = lo;
    t.node()->attrs.hi = hi;
    return t;
}

Tensor apply(OpKind kind, const std::vector<Tensor>& in, const OpAttrs& attrs) {
    auto want = [&](size_t k) {
        if (in.size() != k)
            throw ShapeMismatch(std::string(op_name(kind)) + ": expected " + std::to_string(k) +
                                " inputs, got " + std::to_string(in.size()));
    };
    switch (kind) {
        case OpKind::Add: want(2); return add(in[0], in[1]);
        case OpKind::Sub: want(2); return sub(in[0], in[1]);
        case OpKind::Mul: want(2); return mul(in[0], in[1]);
        case OpKind::Div: want(2); return div(in[0], in[1]);
        case OpKind::MatMul: want(2); return matmul(in[0], in[1]);
        case OpKind::Sum: want(1); return sum(in[0]);
        case OpKind::Mean: want(1); return mean(in[0]);
        case OpKind::Reshape: want(1); return reshape(in[0], attrs.shape);
        case OpKind::Slice: want(1); return slice(in[0], attrs.axis, attrs.start, attrs.stop);
        case OpKind::Concat: return concat(in, attrs.axis);
        case OpKind::Exp: want(1); return exp(in[0]);
        case OpKind::Log: want(1); return log(in[0]);
        case OpKind::Sqrt: want(1); return sqrt(in[0]);
        case OpKind::Sigmoid: want(1); return sigmoid(in[0]);
        case OpKind::Softplus: want(1); return softplus(in[0]);
        case OpKind::LeakyRelu: want(1); return leakyrelu(in[0], attrs.alpha);
        case OpKind::Clamp: want(1); return clamp(in[0], attrs.lo, attrs.hi);
        default: throw std::logic_error("apply: op kind not in the public vocabulary");
    }
}

Tensor make_custom(const std::string& label, std::vector<size_t> shape, std::vector<double> data,
                   std::vector<Tensor> inputs, std::function<void(TensorNode&)> backward_fn) {
    if (numel_of(shape) != data.size()) throw ShapeMismatch("make_custom: " + label);
    auto n = new_node(OpKind::Custom, std::move(shape), std::move(inputs));
    n->data = std::move(data);
    n->label = label;
    n->custom_backward = std::move(backward_fn);
    return finish(std::move(n));
}

// --- reverse sweep ---

static void ew_backward(TensorNode& n) {
    TensorNode& a = *n.inputs[0];
    TensorNode& b = *n.inputs[1];
    Tensor ta(n.inputs[0]), tb(n.inputs[1]);
    EwPlan p = ew_plan(op_name(n.op), ta, tb);
    size_t wa = p.la ? p.cols : 1, wb = p.lb ? p.cols : 1;
    if (a.requires_grad) a.ensure_grad();
    if (b.requires_grad) b.ensure_grad();
    for (size_t r = 0; r < p.rows; ++r) {
        for (size_t c = 0; c < p.cols; ++c) {
            double g = n.grad[r * p.cols + c];
            size_t ia = r * wa + c * p.la, ib = r * wb + c * p.lb;
            switch (n.op) {
                case OpKind::Add:
                    if (a.requires_grad) a.grad[ia] += g;
                    if (b.requires_grad) b.grad[ib] += g;
                    break;
                case OpKind::Sub:
                    if (a.requires_grad) a.grad[ia] += g;
                    if (b.requires_grad) b.grad[ib] -= g;
                    break;
                case OpKind::Mul:
                    if (a.requires_grad) a.grad[ia] += g * b.data[ib];
                    if (b.requires_grad) b.grad[ib] += g * a.data[ia];
                    break;
                case OpKind::Div:
                    if (a.requires_grad) a.grad[ia] += g / b.data[ib];
                    if (b.requires_grad) b.grad[ib] -= g * a.data[ia] / (b.data[ib] * b.data[ib]);
                    break;
                default: break;
            }
        }
    }
}

static void node_backward(TensorNode& n) {
    switch (n.op) {
        case OpKind::Leaf:
            return;
        case OpKind::Add:
        case OpKind::Sub:
        case OpKind::Mul:
        case OpKind::Div:
            ew_backward(n);
            return;
        case OpKind::MatMul: {
            TensorNode& a = *n.inputs[0];
            TensorNode& b = *n.inputs[1];
            int m = (int)a.shape[0], k = (int)a.shape[1], nn = (int)b.shape[1];
            if (a.requires_grad) {
                a.ensure_grad();
                dgemm(false, true, m, k, nn, n.grad.data(), nn, b.data.data(), nn, 1.0, a.grad.data(), k);
            }
            if (b.requires_grad) {
                b.ensure_grad();
                dgemm(true, false, k, nn, m, a.data.data(), k, n.grad.data(), nn, 1.0, b.grad.data(), nn);
            }
            return;
        }
        case OpKind::Sum:
        case OpKind::Mean: {
            TensorNode& a = *n.inputs[0];
            if (!a.requires_grad) return;
            a.ensure_grad();
            double g = n.grad[0];
            if (n.op == OpKind::Mean) g /= (double)a.numel();
            for (double& v : a.grad) v += g;
            return;
        }
        case OpKind::Reshape: {
            TensorNode& a = *n.inputs[0];
            if (!a.requires_grad) return;
            a.ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) a.grad[i] += n.grad[i];
            return;
        }
        case OpKind::Slice: {
            TensorNode& a = *n.inputs[0];
            if (!a.requires_grad) return;
            a.ensure_grad();
            AxisPlan p = axis_plan(a.shape, n.attrs.axis);
            size_t w = n.attrs.stop - n.attrs.start;
            for (size_t o = 0; o < p.outer; ++o)
                for (size_t e = 0; e < w; ++e)
                    for (size_t i = 0; i < p.inner; ++i)
                        a.grad[(o * p.extent + n.attrs.start + e) * p.inner + i] +=
                            n.grad[(o * w + e) * p.inner + i];
            return;
        }
        case OpKind::Concat: {
            AxisPlan p = axis_plan(n.shape, n.attrs.axis);
            size_t off = 0;
            for (auto& in : n.inputs) {
                size_t w = in->shape[(size_t)n.attrs.axis];
                if (in->requires_grad) {
                    in->ensure_grad();
                    for (size_t o = 0; o < p.outer; ++o)
                        for (size_t e = 0; e < w; ++e)
                            for (size_t i = 0; i < p.inner; ++i)
                                in->grad[(o * w + e) * p.inner + i] +=
                                    n.grad[(o * p.extent + off + e) * p.inner + i];
                }
                off += w;
            }
            return;
        }
        case OpKind::Exp:
        case OpKind::Log:
        case OpKind::Sqrt:
        case OpKind::Sigmoid:
        case OpKind::Softplus:
        case OpKind::LeakyRelu:
        case OpKind::Clamp: {
            TensorNode& a = *n.inputs[0];
            if (!a.requires_grad) return;
            a.ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) {
                double x = a.data[i], y = n.data[i], d = 0.0;
                switch (n.op) {
                    case OpKind::Exp: d = y; break;
                    case OpKind::Log: d = 1.0 / x; break;
                    case OpKind::Sqrt: d = 0.5 / y; break;
                    case OpKind::Sigmoid: d = y * (1.0 - y); break;
                    case OpKind::Softplus:
                        d = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
                        break;
                    case OpKind::LeakyRelu: d = x >= 0.0 ? 1.0 : n.attrs.alpha; break;
                    // gradient 1 inside [lo,hi] (inclusive), 0 outside
                    case OpKind::Clamp: d = (x >= n.attrs.lo && x <= n.attrs.hi) ? 1.0 : 0.0; break;
                    default: break;
                }
                a.grad[i] += n.grad[i] * d;
            }
            return;
        }
        case OpKind::Custom:
            n.custom_backward(n);
            return;
    }
}

void backward(const Tensor& loss) {
    if (loss.numel() != 1) throw NotScalar("backward on shape " + shape_str(loss.shape()));
    NodePtr root = loss.node();
    if (!root->requires_grad) return;

    // Post-order DFS; only the reachable requires_grad subgraph matters.
    struct Frame {
        TensorNode* n;
        size_t i;
    };
    std::vector<TensorNode*> order;
    std::vector<Frame> stack{{root.get(), 0}};
    std::unordered_set<TensorNode*> seen{root.get()};
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.i < f.n->inputs.size()) {
            TensorNode* in = f.n->inputs[f.i++].get();
            if (in->requires_grad && seen.insert(in).second) stack.push_back({in, 0});
            continue;
        }
        order.push_back(f.n);
        stack.pop_back();
    }

    // Working grads on interior nodes are per-sweep; only leaf grads persist,
    // so calling backward twice doubles a parameter's gradient, not more.
    for (TensorNode* n : order) {
        if (n->op != OpKind::Leaf)
            n->grad.assign(n->data.size(), 0.0);
        else
            n->ensure_grad();
    }
    root->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) node_backward(**it);
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h) {
    Tensor xg = Tensor::from_data(x.shape(), x.data(), true);
    Tensor y = f(xg);
    if (y.numel() != 1) throw NotScalar("finite_diff_check: f must be scalar-valued");
    backward(y);
    std::vector<double> analytic = xg.grad();

    std::vector<double> base = x.data();
    double worst = 0.0;
    for (size_t i = 0; i < base.size(); ++i) {
        std::vector<double> d = base;
        d[i] = base[i] + h;
        double fp = f(Tensor::from_data(x.shape(), d)).value();
        d[i] = base[i] - h;
        double fm = f(Tensor::from_data(x.shape(), d)).value();
        double fd = (fp - fm) / (2.0 * h);
        double rel = std::abs(analytic[i] - fd) / std::max(1.0, std::abs(analytic[i]));
        worst = std::max(worst, rel);
    }
    return worst;
}

}  // namespace vitae
