#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mixlab/matrix.hpp"

namespace mixlab::ad {

// A named trainable tensor. Gradients accumulate across backward calls until
// zero_grad(); the optimizer owns per-parameter state keyed by address.
struct Parameter {
    std::string name;
    Matrix value;
    Matrix grad;

    Parameter(std::string n, Matrix v)
        : name(std::move(n)), value(std::move(v)), grad(value.rows(), value.cols()) {}
    void zero_grad() { grad = Matrix(value.rows(), value.cols()); }
};

struct Value {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Eager-forward, taped-backward reverse-mode engine over a closed set of
// twelve primitives: matmul, add, mul, scale, exp, log, phi1, relu,
// softmax_rows, norm_rows, sum_all, transpose. Leaves (constants, parameter
// bindings) are not operations. Everything the models build — attention,
// convolutions via shift compositions, the recurrent state-space scan, the
// losses — compiles down to these.
class Tape {
public:
    Value constant(Matrix m);
    Value param(Parameter& p);

    Value matmul(Value a, Value b);
    // add/mul allow the second operand to broadcast from (1,c), (r,1) or (1,1)
    // against a (r,c) first operand; the backward pass sums over broadcast axes.
    Value add(Value a, Value b);
    Value mul(Value a, Value b);
    Value scale(Value a, double c);
    Value exp(Value a);
    Value log(Value a);  // throws std::domain_error on non-positive entries
    // phi1(x) = (e^x - 1)/x with the limit value 1 substituted for |x| < 1e-8;
    // the zero-order-hold discretization factor.
    Value phi1(Value a);
    Value relu(Value a);
    Value softmax_rows(Value a);  // backward uses the closed-form Jacobian product
    Value norm_rows(Value a, double eps = 1e-5);  // per-row mean-0 / var-1
    Value sum_all(Value a);                       // reduce to 1x1
    Value transpose(Value a);

    // Compositions of the primitives above (not new primitives).
    Value sub(Value a, Value b) { return add(a, scale(b, -1.0)); }
    Value add_scalar(Value a, double c) { return add(a, constant(Matrix(1, 1, c))); }

    const Matrix& val(Value v) const;
    // Gradient of the loss w.r.t. this node; zero matrix if the node was
    // unreachable from the loss.
    Matrix grad(Value v) const;

    struct BackwardStats {
        std::size_t node_count = 0;
        // Parameters bound on this tape that received no gradient at all —
        // usually a wiring bug in a model, so callers can assert on it.
        std::vector<std::string> detached_params;
    };
    // Seeds d(loss)/d(loss) = 1 and walks the tape in reverse, accumulating
    // into Parameter::grad. The loss must be 1x1.
    BackwardStats backward(Value loss);

    std::size_t size() const { return nodes_.size(); }
    void reset();

private:
    enum class Op {
        Const, Param, MatMul, Add, Mul, Scale, Exp, Log, Phi1, Relu,
        SoftmaxRows, NormRows, SumAll, Transpose
    };
    struct Node {
        Op op;
        int a = -1, b = -1;
        double c0 = 0.0;   // scale factor / norm epsilon
        Matrix val;
        Matrix grad;       // allocated only if reachable from the loss
        Matrix cache;      // norm_rows: per-row inverse stddev
        Parameter* parameter = nullptr;
    };

    Value push(Node n);
    const Node& node(Value v) const;
    void accumulate(int id, const Matrix& g);

    std::vector<Node> nodes_;
};

// Central finite differences of f w.r.t. every entry of p (f re-evaluated with
// p temporarily perturbed; the stored value is restored afterwards).
Matrix finite_diff_grad(const std::function<double()>& f, Parameter& p, double eps = 1e-6);

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst_param;
};

// Compares analytic gradients against central differences:
//   max over parameters of ||analytic - numeric||_inf / (||numeric||_inf + 1e-12).
// `backward_fn` must zero grads and run one forward+backward pass;
// `loss_fn` must evaluate the same loss without touching gradients.
GradCheckResult grad_check(const std::function<double()>& loss_fn,
                           const std::function<void()>& backward_fn,
                           const std::vector<Parameter*>& params,
                           double eps = 1e-6);

}  // namespace mixlab::ad
