#include "mixlab/autodiff.hpp"

#include <cmath>
#include <stdexcept>

namespace mixlab::ad {

namespace {

std::string shape_str(const Matrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

bool broadcastable(const Matrix& a, const Matrix& b) {
    if (a.same_shape(b)) return true;
    if (b.rows() == 1 && b.cols() == 1) return true;
    if (b.rows() == 1 && b.cols() == a.cols()) return true;
    if (b.cols() == 1 && b.rows() == a.rows()) return true;
    return false;
}

double bval(const Matrix& a, const Matrix& b, std::size_t i, std::size_t j) {
    const std::size_t bi = b.rows() == 1 ? 0 : i;
    const std::size_t bj = b.cols() == 1 ? 0 : j;
    (void)a;
    return b(bi, bj);
}

// Sums g down to the shape of b (the broadcast operand).
Matrix reduce_to(const Matrix& g, const Matrix& b) {
    if (g.same_shape(b)) return g;
    Matrix r(b.rows(), b.cols());
    for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) {
            const std::size_t bi = b.rows() == 1 ? 0 : i;
            const std::size_t bj = b.cols() == 1 ? 0 : j;
            r(bi, bj) += g(i, j);
        }
    return r;
}

double phi1_val(double x) {
    if (std::fabs(x) < 1e-8) return 1.0;
    return std::expm1(x) / x;
}

double phi1_deriv(double x) {
    if (std::fabs(x) < 1e-4) {
        // Series of d/dx[(e^x-1)/x]; the closed form loses precision near 0.
        return 0.5 + x / 3.0 + x * x / 8.0 + x * x * x / 30.0;
    }
    return ((x - 1.0) * std::exp(x) + 1.0) / (x * x);
}

}  // namespace

Value Tape::push(Node n) {
    nodes_.push_back(std::move(n));
    return Value{static_cast<int>(nodes_.size()) - 1};
}

const Tape::Node& Tape::node(Value v) const {
    if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size())
        throw std::invalid_argument("Tape: invalid value handle");
    return nodes_[static_cast<std::size_t>(v.id)];
}

Value Tape::constant(Matrix m) {
    Node n;
    n.op = Op::Const;
    n.val = std::move(m);
    return push(std::move(n));
}

Value Tape::param(Parameter& p) {
    Node n;
    n.op = Op::Param;
    n.val = p.value;
    n.parameter = &p;
    return push(std::move(n));
}

Value Tape::matmul(Value a, Value b) {
    const Matrix& av = node(a).val;
    const Matrix& bv = node(b).val;
    Node n;
    n.op = Op::MatMul;
    n.a = a.id;
    n.b = b.id;
    n.val = mixlab::matmul(av, bv);
    return push(std::move(n));
}

Value Tape::add(Value a, Value b) {
    const Matrix& av = node(a).val;
    const Matrix& bv = node(b).val;
    if (!broadcastable(av, bv))
        throw std::invalid_argument("Tape::add: shapes " + shape_str(av) + " vs " +
                                    shape_str(bv) + " are not broadcast-compatible");
    Node n;
    n.op = Op::Add;
    n.a = a.id;
    n.b = b.id;
    n.val = Matrix(av.rows(), av.cols());
    for (std::size_t i = 0; i < av.rows(); ++i)
        for (std::size_t j = 0; j < av.cols(); ++j)
            n.val(i, j) = av(i, j) + bval(av, bv, i, j);
    return push(std::move(n));
}

Value Tape::mul(Value a, Value b) {
    const Matrix& av = node(a).val;
    const Matrix& bv = node(b).val;
    if (!broadcastable(av, bv))
        throw std::invalid_argument("Tape::mul: shapes " + shape_str(av) + " vs " +
                                    shape_str(bv) + " are not broadcast-compatible");
    Node n;
    n.op = Op::Mul;
    n.a = a.id;
    n.b = b.id;
    n.val = Matrix(av.rows(), av.cols());
    for (std::size_t i = 0; i < av.rows(); ++i)
        for (std::size_t j = 0; j < av.cols(); ++j)
            n.val(i, j) = av(i, j) * bval(av, bv, i, j);
    return push(std::move(n));
}

Value Tape::scale(Value a, double c) {
    Node n;
    n.op = Op::Scale;
    n.a = a.id;
    n.c0 = c;
    n.val = mixlab::scale(node(a).val, c);
    return push(std::move(n));
}

Value Tape::exp(Value a) {
    Node n;
    n.op = Op::Exp;
    n.a = a.id;
    n.val = map(node(a).val, [](double x) { return std::exp(x); });
    return push(std::move(n));
}

Value Tape::log(Value a) {
    const Matrix& av = node(a).val;
    for (std::size_t i = 0; i < av.size(); ++i)
        if (!(av.data()[i] > 0.0))
            throw std::domain_error("Tape::log: non-positive entry " +
                                    std::to_string(av.data()[i]));
    Node n;
    n.op = Op::Log;
    n.a = a.id;
    n.val = map(av, [](double x) { return std::log(x); });
    return push(std::move(n));
}

Value Tape::phi1(Value a) {
    Node n;
    n.op = Op::Phi1;
    n.a = a.id;
    n.val = map(node(a).val, [](double x) { return phi1_val(x); });
    return push(std::move(n));
}

Value Tape::relu(Value a) {
    Node n;
    n.op = Op::Relu;
    n.a = a.id;
    n.val = map(node(a).val, [](double x) { return x > 0.0 ? x : 0.0; });
    return push(std::move(n));
}

Value Tape::softmax_rows(Value a) {
    Node n;
    n.op = Op::SoftmaxRows;
    n.a = a.id;
    n.val = mixlab::softmax_rows(node(a).val);
    return push(std::move(n));
}

Value Tape::norm_rows(Value a, double eps) {
    const Matrix& av = node(a).val;
    if (av.cols() == 0) throw std::invalid_argument("Tape::norm_rows: empty rows");
    Node n;
    n.op = Op::NormRows;
    n.a = a.id;
    n.c0 = eps;
    n.val = Matrix(av.rows(), av.cols());
    n.cache = Matrix(av.rows(), 1);
    for (std::size_t i = 0; i < av.rows(); ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < av.cols(); ++j) mean += av(i, j);
        mean /= static_cast<double>(av.cols());
        double var = 0.0;
        for (std::size_t j = 0; j < av.cols(); ++j) {
            const double d = av(i, j) - mean;
            var += d * d;
        }
        var /= static_cast<double>(av.cols());
        const double inv = 1.0 / std::sqrt(var + eps);
        n.cache(i, 0) = inv;
        for (std::size_t j = 0; j < av.cols(); ++j) n.val(i, j) = (av(i, j) - mean) * inv;
    }
    return push(std::move(n));
}

Value Tape::sum_all(Value a) {
    const Matrix& av = node(a).val;
    double s = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) s += av.data()[i];
    Node n;
    n.op = Op::SumAll;
    n.a = a.id;
    n.val = Matrix(1, 1, s);
    return push(std::move(n));
}

Value Tape::transpose(Value a) {
    Node n;
    n.op = Op::Transpose;
    n.a = a.id;
    n.val = mixlab::transpose(node(a).val);
    return push(std::move(n));
}

const Matrix& Tape::val(Value v) const { return node(v).val; }

Matrix Tape::grad(Value v) const {
    const Node& n = node(v);
    if (n.grad.size() == 0 && n.val.size() != 0)
        return Matrix(n.val.rows(), n.val.cols());
    return n.grad;
}

void Tape::accumulate(int id, const Matrix& g) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) n.grad = Matrix(n.val.rows(), n.val.cols());
    for (std::size_t i = 0; i < g.size(); ++i) n.grad.data()[i] += g.data()[i];
}

Tape::BackwardStats Tape::backward(Value loss) {
    const Node& ln = node(loss);
    if (ln.val.rows() != 1 || ln.val.cols() != 1)
        throw std::invalid_argument("Tape::backward: loss must be 1x1, got " +
                                    shape_str(ln.val));
    accumulate(loss.id, Matrix(1, 1, 1.0));

    for (int id = loss.id; id >= 0; --id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.grad.size() == 0) continue;  // unreachable from the loss
        const Matrix& g = n.grad;
        switch (n.op) {
            case Op::Const:
            case Op::Param:
                break;
            case Op::MatMul: {
                const Matrix& av = nodes_[n.a].val;
                const Matrix& bv = nodes_[n.b].val;
                accumulate(n.a, mixlab::matmul(g, mixlab::transpose(bv)));
                accumulate(n.b, mixlab::matmul(mixlab::transpose(av), g));
                break;
            }
            case Op::Add: {
                accumulate(n.a, g);
                accumulate(n.b, reduce_to(g, nodes_[n.b].val));
                break;
            }
            case Op::Mul: {
                const Matrix& av = nodes_[n.a].val;
                const Matrix& bv = nodes_[n.b].val;
                Matrix ga(av.rows(), av.cols());
                for (std::size_t i = 0; i < av.rows(); ++i)
                    for (std::size_t j = 0; j < av.cols(); ++j)
                        ga(i, j) = g(i, j) * bval(av, bv, i, j);
                accumulate(n.a, ga);
                Matrix gb_full(av.rows(), av.cols());
                for (std::size_t i = 0; i < av.rows(); ++i)
                    for (std::size_t j = 0; j < av.cols(); ++j)
                        gb_full(i, j) = g(i, j) * av(i, j);
                accumulate(n.b, reduce_to(gb_full, bv));
                break;
            }
            case Op::Scale:
                accumulate(n.a, mixlab::scale(g, n.c0));
                break;
            case Op::Exp:
                accumulate(n.a, hadamard(g, n.val));
                break;
            case Op::Log: {
                const Matrix& av = nodes_[n.a].val;
                Matrix ga = g;
                for (std::size_t i = 0; i < ga.size(); ++i) ga.data()[i] /= av.data()[i];
                accumulate(n.a, ga);
                break;
            }
            case Op::Phi1: {
                const Matrix& av = nodes_[n.a].val;
                Matrix ga = g;
                for (std::size_t i = 0; i < ga.size(); ++i)
                    ga.data()[i] *= phi1_deriv(av.data()[i]);
                accumulate(n.a, ga);
                break;
            }
            case Op::Relu: {
                const Matrix& av = nodes_[n.a].val;
                Matrix ga = g;
                for (std::size_t i = 0; i < ga.size(); ++i)
                    if (!(av.data()[i] > 0.0)) ga.data()[i] = 0.0;
                accumulate(n.a, ga);
                break;
            }
            case Op::SoftmaxRows: {
                // Closed form per row: ga = s .* (g - <g, s> 1)
                const Matrix& s = n.val;
                Matrix ga(s.rows(), s.cols());
                for (std::size_t i = 0; i < s.rows(); ++i) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < s.cols(); ++j) dot += g(i, j) * s(i, j);
                    for (std::size_t j = 0; j < s.cols(); ++j)
                        ga(i, j) = s(i, j) * (g(i, j) - dot);
                }
                accumulate(n.a, ga);
                break;
            }
            case Op::NormRows: {
                const Matrix& y = n.val;
                const std::size_t c = y.cols();
                Matrix ga(y.rows(), c);
                for (std::size_t i = 0; i < y.rows(); ++i) {
                    double gmean = 0.0, gymean = 0.0;
                    for (std::size_t j = 0; j < c; ++j) {
                        gmean += g(i, j);
                        gymean += g(i, j) * y(i, j);
                    }
                    gmean /= static_cast<double>(c);
                    gymean /= static_cast<double>(c);
                    const double inv = n.cache(i, 0);
                    for (std::size_t j = 0; j < c; ++j)
                        ga(i, j) = inv * (g(i, j) - gmean - y(i, j) * gymean);
                }
                accumulate(n.a, ga);
                break;
            }
            case Op::SumAll: {
                const Matrix& av = nodes_[n.a].val;
                accumulate(n.a, Matrix(av.rows(), av.cols(), g(0, 0)));
                break;
            }
            case Op::Transpose:
                accumulate(n.a, mixlab::transpose(g));
                break;
        }
    }

    BackwardStats stats;
    stats.node_count = nodes_.size();
    for (Node& n : nodes_) {
        if (n.op != Op::Param) continue;
        if (n.grad.size() == 0) {
            stats.detached_params.push_back(n.parameter->name);
            continue;
        }
        Matrix& pg = n.parameter->grad;
        for (std::size_t i = 0; i < pg.size(); ++i) pg.data()[i] += n.grad.data()[i];
    }
    return stats;
}

void Tape::reset() { nodes_.clear(); }

Matrix finite_diff_grad(const std::function<double()>& f, Parameter& p, double eps) {
    Matrix g(p.value.rows(), p.value.cols());
    for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double saved = p.value.data()[i];
        p.value.data()[i] = saved + eps;
        const double fp = f();
        p.value.data()[i] = saved - eps;
        const double fm = f();
        p.value.data()[i] = saved;
        g.data()[i] = (fp - fm) / (2.0 * eps);
    }
    return g;
}

GradCheckResult grad_check(const std::function<double()>& loss_fn,
                           const std::function<void()>& backward_fn,
                           const std::vector<Parameter*>& params,
                           double eps) {
    backward_fn();
    GradCheckResult res;
    for (Parameter* p : params) {
        const Matrix analytic = p->grad;
        const Matrix numeric = finite_diff_grad(loss_fn, *p, eps);
        const double err = max_abs(sub(analytic, numeric));
        const double rel = err / (max_abs(numeric) + 1e-12);
        if (rel > res.max_rel_err) {
            res.max_rel_err = rel;
            res.worst_param = p->name;
        }
    }
    return res;
}

}  // namespace mixlab::ad
