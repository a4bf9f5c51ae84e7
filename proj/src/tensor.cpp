#include "dmc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace dmc::core {

namespace {

thread_local bool g_grad_enabled = true;

int shape_size(const std::vector<int>& shape) {
    int n = 1;
    for (int d : shape) {
        if (d <= 0) throw ContractError("tensor dimensions must be positive");
        n *= d;
    }
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

using NodePtr = std::shared_ptr<detail::Node>;

NodePtr make_leaf(std::vector<int> shape, std::vector<double> value, bool requires_grad) {
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return n;
}

// Records parents/backprop only when the result actually needs gradients.
Tensor make_op(std::vector<int> shape, std::vector<double> value,
               std::vector<NodePtr> parents, std::function<void(detail::Node&)> backprop) {
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    bool needs = false;
    if (g_grad_enabled) {
        for (const auto& p : parents)
            if (p && p->requires_grad) { needs = true; break; }
    }
    if (needs) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backprop = std::move(backprop);
    }
    return Tensor(n);
}

void check_defined(const Tensor& t, const char* who) {
    if (!t.defined()) throw ContractError(std::string(who) + ": undefined tensor");
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* who) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(who) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
}

void check_rank2(const Tensor& t, const char* who) {
    if (t.rank() != 2) throw DimensionError(std::string(who) + ": expected rank-2 tensor");
}

// Elementwise op with value map f and local derivative df (as a function of input value).
Tensor unary_elementwise(const Tensor& a, const char* who, double (*f)(double),
                         double (*df)(double)) {
    check_defined(a, who);
    const auto& av = a.values();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
    auto pa = a.node();
    return make_op(a.shape(), std::move(out), {pa}, [pa, df](detail::Node& n) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (size_t i = 0; i < n.value.size(); ++i)
            pa->grad[i] += n.grad[i] * df(pa->value[i]);
    });
}

double softplus_val(double x) {
    if (x > 30.0) return x;
    if (x < -30.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

double sigmoid_val(double x) {
    if (x >= 0) {
        double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    double e = std::exp(x);
    return e / (1.0 + e);
}

} // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    int n = shape_size(shape);
    return Tensor(make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::constant(std::vector<int> shape, double fill) {
    int n = shape_size(shape);
    return Tensor(make_leaf(std::move(shape), std::vector<double>(n, fill), false));
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> values, bool requires_grad) {
    int n = shape_size(shape);
    if (n != static_cast<int>(values.size()))
        throw DimensionError("Tensor::from: shape " + shape_str(shape) + " needs " +
                             std::to_string(n) + " values, got " + std::to_string(values.size()));
    return Tensor(make_leaf(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return Tensor(make_leaf({1}, {v}, requires_grad));
}

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, double stddev, bool requires_grad) {
    int n = shape_size(shape);
    std::vector<double> v(n);
    for (double& x : v) x = rng.normal() * stddev;
    return Tensor(make_leaf(std::move(shape), std::move(v), requires_grad));
}

const std::vector<int>& Tensor::shape() const {
    check_defined(*this, "shape");
    return node_->shape;
}

int Tensor::size() const {
    check_defined(*this, "size");
    return node_->size();
}

int Tensor::dim(int i) const { return shape().at(static_cast<size_t>(i)); }

int Tensor::rank() const { return static_cast<int>(shape().size()); }

double Tensor::item() const {
    if (size() != 1) throw ContractError("item: tensor is not scalar");
    return node_->value[0];
}

double Tensor::at(int flat_index) const {
    check_defined(*this, "at");
    return node_->value.at(static_cast<size_t>(flat_index));
}

const std::vector<double>& Tensor::values() const {
    check_defined(*this, "values");
    return node_->value;
}

std::vector<double>& Tensor::mutable_values() {
    check_defined(*this, "mutable_values");
    return node_->value;
}

bool Tensor::requires_grad() const {
    check_defined(*this, "requires_grad");
    return node_->requires_grad;
}

void Tensor::set_requires_grad(bool flag) {
    check_defined(*this, "set_requires_grad");
    node_->requires_grad = flag;
}

const std::vector<double>& Tensor::grad() const {
    check_defined(*this, "grad");
    node_->ensure_grad();
    return node_->grad;
}

void Tensor::zero_grad() {
    check_defined(*this, "zero_grad");
    node_->grad.assign(node_->value.size(), 0.0);
}

int Tensor::backward_visits() const {
    check_defined(*this, "backward_visits");
    return node_->visits;
}

std::vector<Tensor> Tensor::parents() const {
    check_defined(*this, "parents");
    std::vector<Tensor> out;
    out.reserve(node_->parents.size());
    for (const auto& p : node_->parents) out.emplace_back(p);
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    check_defined(a, "add");
    check_defined(b, "add");
    check_same_shape(a, b, "add");
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
    auto pa = a.node(), pb = b.node();
    return make_op(a.shape(), std::move(out), {pa, pb}, [pa, pb](detail::Node& n) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (size_t i = 0; i < n.value.size(); ++i) pa->grad[i] += n.grad[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (size_t i = 0; i < n.value.size(); ++i) pb->grad[i] += n.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_defined(a, "sub");
    check_defined(b, "sub");
    check_same_shape(a, b, "sub");
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
    auto pa = a.node(), pb = b.node();
    return make_op(a.shape(), std::move(out), {pa, pb}, [pa, pb](detail::Node& n) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (size_t i = 0; i < n.value.size(); ++i) pa->grad[i] += n.grad[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (size_t i = 0; i < n.value.size(); ++i) pb->grad[i] -= n.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_defined(a, "mul");
    check_defined(b, "mul");
    check_same_shape(a, b, "mul");
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
    auto pa = a.node(), pb = b.node();
    return make_op(a.shape(), std::move(out), {pa, pb}, [pa, pb](detail::Node& n) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (size_t i = 0; i < n.value.size(); ++i) pa->grad[i] += n.grad[i] * pb->value[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (size_t i = 0; i < n.value.size(); ++i) pb->grad[i] += n.grad[i] * pa->value[i];
        }
    });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor scale(const Tensor& a, double s) {
    check_defined(a, "scale");
    const auto& av = a.values();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * s;
    auto pa = a.node();
    return make_op(a.shape(), std::move(out), {pa}, [pa, s](detail::Node& n) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (size_t i = 0; i < n.value.size(); ++i) pa->grad[i] += n.grad[i] * s;
    });
}

Tensor add_scalar(const Tensor& a, double s) {
    check_defined(a, "add_scalar");
    const auto& av = a.values();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + s;
    auto pa = a.node();
    return make_op(a.shape(), std::move(out), {pa}, [pa](detail::Node& n) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (size_t i = 0; i < n.value.size(); ++i) pa->grad[i] += n.grad[i];
    });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_defined(a, "matmul");
    check_defined(b, "matmul");
    check_rank2(a, "matmul");
    check_rank2(b, "matmul");
    const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw DimensionError("matmul: inner dims " + std::to_string(k) + " vs " +
                             std::to_string(k2));
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i) {
        const double* arow = av.data() + static_cast<size_t>(i) * k;
        double* orow = out.data() + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double aip = arow[p];
            if (aip == 0.0) continue;
            const double* brow = bv.data() + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) orow[j] += aip * brow[j];
        }
    }
    auto pa = a.node(), pb = b.node();
    return make_op({m, n}, std::move(out), {pa, pb}, [pa, pb, m, k, n](detail::Node& nd) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            // dA = dC * B^T
            for (int i = 0; i < m; ++i) {
                const double* grow = nd.grad.data() + static_cast<size_t>(i) * n;
                double* garow = pa->grad.data() + static_cast<size_t>(i) * k;
                for (int p = 0; p < k; ++p) {
                    const double* brow = pb->value.data() + static_cast<size_t>(p) * n;
                    double acc = 0.0;
                    for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                    garow[p] += acc;
                }
            }
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            // dB = A^T * dC
            for (int i = 0; i < m; ++i) {
                const double* arow = pa->value.data() + static_cast<size_t>(i) * k;
                const double* grow = nd.grad.data() + static_cast<size_t>(i) * n;
                for (int p = 0; p < k; ++p) {
                    const double aip = arow[p];
                    if (aip == 0.0) continue;
                    double* gbrow = pb->grad.data() + static_cast<size_t>(p) * n;
                    for (int j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
                }
            }
        }
    });
}

Tensor add_rowvec(const Tensor& m, const Tensor& v) {
    check_defined(m, "add_rowvec");
    check_defined(v, "add_rowvec");
    check_rank2(m, "add_rowvec");
    const int rows = m.dim(0), cols = m.dim(1);
    if (v.size() != cols)
        throw DimensionError("add_rowvec: vector size " + std::to_string(v.size()) +
                             " vs cols " + std::to_string(cols));
    const auto& mv = m.values();
    const auto& vv = v.values();
    std::vector<double> out(mv.size());
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j)
            out[static_cast<size_t>(i) * cols + j] = mv[static_cast<size_t>(i) * cols + j] + vv[j];
    auto pm = m.node(), pv = v.node();
    return make_op(m.shape(), std::move(out), {pm, pv}, [pm, pv, rows, cols](detail::Node& n) {
        if (pm->requires_grad) {
            pm->ensure_grad();
            for (size_t i = 0; i < n.value.size(); ++i) pm->grad[i] += n.grad[i];
        }
        if (pv->requires_grad) {
            pv->ensure_grad();
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < cols; ++j)
                    pv->grad[j] += n.grad[static_cast<size_t>(i) * cols + j];
        }
    });
}

Tensor tanh(const Tensor& a) {
    return unary_elementwise(
        a, "tanh", [](double x) { return std::tanh(x); },
        [](double x) {
            double t = std::tanh(x);
            return 1.0 - t * t;
        });
}

Tensor softplus(const Tensor& a) {
    return unary_elementwise(a, "softplus", &softplus_val, &sigmoid_val);
}

Tensor exp(const Tensor& a) {
    return unary_elementwise(
        a, "exp", [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

Tensor log(const Tensor& a) {
    return unary_elementwise(
        a, "log", [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

Tensor sigmoid(const Tensor& a) {
    return unary_elementwise(a, "sigmoid", &sigmoid_val, [](double x) {
        double s = sigmoid_val(x);
        return s * (1.0 - s);
    });
}

Tensor square(const Tensor& a) {
    return unary_elementwise(
        a, "square", [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
    check_defined(a, "minimum");
    check_defined(b, "minimum");
    check_same_shape(a, b, "minimum");
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = std::min(av[i], bv[i]);
    auto pa = a.node(), pb = b.node();
    return make_op(a.shape(), std::move(out), {pa, pb}, [pa, pb](detail::Node& n) {
        for (size_t i = 0; i < n.value.size(); ++i) {
            bool a_wins = pa->value[i] <= pb->value[i];
            auto& p = a_wins ? pa : pb;
            if (p->requires_grad) {
                p->ensure_grad();
                p->grad[i] += n.grad[i];
            }
        }
    });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
    check_defined(a, "maximum");
    check_defined(b, "maximum");
    check_same_shape(a, b, "maximum");
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = std::max(av[i], bv[i]);
    auto pa = a.node(), pb = b.node();
    return make_op(a.shape(), std::move(out), {pa, pb}, [pa, pb](detail::Node& n) {
        for (size_t i = 0; i < n.value.size(); ++i) {
            bool a_wins = pa->value[i] >= pb->value[i];
            auto& p = a_wins ? pa : pb;
            if (p->requires_grad) {
                p->ensure_grad();
                p->grad[i] += n.grad[i];
            }
        }
    });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
    check_defined(a, "clamp");
    if (lo > hi) throw ContractError("clamp: lo > hi");
    const auto& av = a.values();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = std::min(std::max(av[i], lo), hi);
    auto pa = a.node();
    return make_op(a.shape(), std::move(out), {pa}, [pa, lo, hi](detail::Node& n) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (size_t i = 0; i < n.value.size(); ++i)
            if (pa->value[i] > lo && pa->value[i] < hi) pa->grad[i] += n.grad[i];
    });
}

Tensor sum(const Tensor& a) {
    check_defined(a, "sum");
    const auto& av = a.values();
    double s = std::accumulate(av.begin(), av.end(), 0.0);
    auto pa = a.node();
    return make_op({1}, {s}, {pa}, [pa](detail::Node& n) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (double& g : pa->grad) g += n.grad[0];
    });
}

Tensor mean(const Tensor& a) {
    check_defined(a, "mean");
    return scale(sum(a), 1.0 / a.size());
}

Tensor rows_sum(const Tensor& a) {
    check_defined(a, "rows_sum");
    check_rank2(a, "rows_sum");
    const int rows = a.dim(0), cols = a.dim(1);
    const auto& av = a.values();
    std::vector<double> out(static_cast<size_t>(rows), 0.0);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) out[i] += av[static_cast<size_t>(i) * cols + j];
    auto pa = a.node();
    return make_op({rows, 1}, std::move(out), {pa}, [pa, rows, cols](detail::Node& n) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < cols; ++j)
                pa->grad[static_cast<size_t>(i) * cols + j] += n.grad[i];
    });
}

Tensor cols_sum(const Tensor& a) {
    check_defined(a, "cols_sum");
    check_rank2(a, "cols_sum");
    const int rows = a.dim(0), cols = a.dim(1);
    const auto& av = a.values();
    std::vector<double> out(static_cast<size_t>(cols), 0.0);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) out[j] += av[static_cast<size_t>(i) * cols + j];
    auto pa = a.node();
    return make_op({1, cols}, std::move(out), {pa}, [pa, rows, cols](detail::Node& n) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < cols; ++j)
                pa->grad[static_cast<size_t>(i) * cols + j] += n.grad[j];
    });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
    check_defined(a, "concat_cols");
    check_defined(b, "concat_cols");
    check_rank2(a, "concat_cols");
    check_rank2(b, "concat_cols");
    const int rows = a.dim(0);
    if (b.dim(0) != rows) throw DimensionError("concat_cols: row counts differ");
    const int ca = a.dim(1), cb = b.dim(1);
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(static_cast<size_t>(rows) * (ca + cb));
    for (int i = 0; i < rows; ++i) {
        std::copy_n(av.data() + static_cast<size_t>(i) * ca, ca,
                    out.data() + static_cast<size_t>(i) * (ca + cb));
        std::copy_n(bv.data() + static_cast<size_t>(i) * cb, cb,
                    out.data() + static_cast<size_t>(i) * (ca + cb) + ca);
    }
    auto pa = a.node(), pb = b.node();
    return make_op({rows, ca + cb}, std::move(out), {pa, pb},
                   [pa, pb, rows, ca, cb](detail::Node& n) {
                       const int cols = ca + cb;
                       if (pa->requires_grad) {
                           pa->ensure_grad();
                           for (int i = 0; i < rows; ++i)
                               for (int j = 0; j < ca; ++j)
                                   pa->grad[static_cast<size_t>(i) * ca + j] +=
                                       n.grad[static_cast<size_t>(i) * cols + j];
                       }
                       if (pb->requires_grad) {
                           pb->ensure_grad();
                           for (int i = 0; i < rows; ++i)
                               for (int j = 0; j < cb; ++j)
                                   pb->grad[static_cast<size_t>(i) * cb + j] +=
                                       n.grad[static_cast<size_t>(i) * cols + ca + j];
                       }
                   });
}

Tensor slice_cols(const Tensor& a, int begin, int len) {
    check_defined(a, "slice_cols");
    check_rank2(a, "slice_cols");
    const int rows = a.dim(0), cols = a.dim(1);
    if (begin < 0 || len <= 0 || begin + len > cols)
        throw DimensionError("slice_cols: range [" + std::to_string(begin) + "," +
                             std::to_string(begin + len) + ") out of " + std::to_string(cols));
    const auto& av = a.values();
    std::vector<double> out(static_cast<size_t>(rows) * len);
    for (int i = 0; i < rows; ++i)
        std::copy_n(av.data() + static_cast<size_t>(i) * cols + begin, len,
                    out.data() + static_cast<size_t>(i) * len);
    auto pa = a.node();
    return make_op({rows, len}, std::move(out), {pa}, [pa, rows, cols, begin, len](detail::Node& n) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < len; ++j)
                pa->grad[static_cast<size_t>(i) * cols + begin + j] +=
                    n.grad[static_cast<size_t>(i) * len + j];
    });
}

Tensor stop_gradient(const Tensor& x) {
    check_defined(x, "stop_gradient");
    return Tensor::from(x.shape(), x.values(), false);
}

void backward(const Tensor& loss) {
    check_defined(loss, "backward");
    if (loss.size() != 1) throw ContractError("backward: loss must be scalar");
    auto root = loss.node();
    if (!root->requires_grad) return; // constant loss: nothing to do

    // Iterative post-order toposort over the differentiable subgraph.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            detail::Node* p = node->parents[idx++].get();
            if (p && p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (detail::Node* n : order) {
        n->ensure_grad();
        n->visits = 0;
    }
    root->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* n = *it;
        if (n->backprop) {
            n->backprop(*n);
            ++n->visits;
        }
    }
}

} // namespace dmc::core
