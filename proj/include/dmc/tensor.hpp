#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "dmc/errors.hpp"
#include "dmc/rng.hpp"

namespace dmc::core {

namespace detail {

struct Node {
    std::vector<int> shape;
    std::vector<double> value;
    std::vector<double> grad; // lazily allocated; accumulates additively across backward calls
    bool requires_grad = false;
    int visits = 0; // backprop invocations during the most recent backward
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop; // reads this->grad, accumulates into parents

    int size() const { return static_cast<int>(value.size()); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

} // namespace detail

// Tape recording is on by default; a NoGradGuard disables it for the current
// thread so bulk sampling does not build graphs.
bool grad_enabled();

struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Dense row-major tensor handle with reverse-mode autodiff. Copying a Tensor
// copies the handle, not the storage; ops record parents on a tape that
// backward() walks once in reverse topological order.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor constant(std::vector<int> shape, double fill);
    static Tensor from(std::vector<int> shape, std::vector<double> values,
                       bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);
    static Tensor randn(std::vector<int> shape, Rng& rng, double stddev = 1.0,
                        bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const std::vector<int>& shape() const;
    int size() const;
    int dim(int i) const;
    int rank() const;

    double item() const; // scalar tensors only
    double at(int flat_index) const;
    const std::vector<double>& values() const;
    std::vector<double>& mutable_values(); // direct edits bypass the tape

    bool requires_grad() const;
    void set_requires_grad(bool flag); // affects graphs recorded after the call
    const std::vector<double>& grad() const;
    void zero_grad();

    int backward_visits() const;
    std::vector<Tensor> parents() const;

    std::shared_ptr<detail::Node> node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

// Elementwise; shapes must match exactly.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);
// [B,n] + [n] broadcast over rows
Tensor add_rowvec(const Tensor& m, const Tensor& v);

Tensor tanh(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor square(const Tensor& a);

Tensor minimum(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);
// Subgradient is zero outside (lo, hi).
Tensor clamp(const Tensor& a, double lo, double hi);

Tensor sum(const Tensor& a);  // -> scalar
Tensor mean(const Tensor& a); // -> scalar
Tensor rows_sum(const Tensor& a); // [B,n] -> [B,1]
Tensor cols_sum(const Tensor& a); // [B,n] -> [1,n]

Tensor concat_cols(const Tensor& a, const Tensor& b); // [B,p],[B,q] -> [B,p+q]
Tensor slice_cols(const Tensor& a, int begin, int len);

// Forward value of x, detached from the tape.
Tensor stop_gradient(const Tensor& x);

// Populates grads of every requires_grad ancestor of a scalar loss.
// Repeated calls without zero_grad accumulate.
void backward(const Tensor& loss);

} // namespace dmc::core
