#include "mixlab/mixers.hpp"

#include <cmath>
#include <stdexcept>

#include "mixlab/fft.hpp"

namespace mixlab::mix {

namespace {

void check_head(std::size_t head, std::size_t count, const char* where) {
    if (head >= count)
        throw std::invalid_argument(std::string(where) + ": head " + std::to_string(head) +
                                    " out of range (H=" + std::to_string(count) + ")");
}

Matrix head_projection(const Matrix& embedded, const Matrix& W, const char* where) {
    if (embedded.cols() != W.rows())
        throw std::invalid_argument(std::string(where) + ": embedding width " +
                                    std::to_string(embedded.cols()) +
                                    " does not match projection rows " +
                                    std::to_string(W.rows()));
    return matmul(embedded, W);
}

double softplus(double x) { return (x > 0.0 ? x : 0.0) + std::log1p(std::exp(-std::fabs(x))); }

// Per-head view of the semiseparable data: step transitions/inputs for channel
// d plus the shared output projection C.
struct SsmData {
    std::vector<Matrix> A_bar;  // L of D x N
    std::vector<Matrix> B_bar;  // L of D x N
    Matrix C;                   // L x N
    std::size_t D = 0;
};

SsmData compute_ssm(const SemiseparableParams& p, const Matrix& X) {
    if (p.state_size == 0)
        throw std::invalid_argument("semiseparable: state_size must be positive");
    if (X.rows() == 0) throw std::invalid_argument("semiseparable: empty input");
    if (X.cols() != p.W_B.rows() || X.cols() != p.W_C.rows())
        throw std::invalid_argument("semiseparable: input width " + std::to_string(X.cols()) +
                                    " does not match W_B/W_C rows");
    if (p.W_B.cols() != p.state_size || p.W_C.cols() != p.state_size)
        throw std::invalid_argument("semiseparable: W_B/W_C columns must equal state_size");
    if (p.A.cols() != p.state_size)
        throw std::invalid_argument("semiseparable: A columns must equal state_size");

    const std::size_t L = X.rows();
    SsmData d;
    d.D = p.A.rows();
    d.C = matmul(X, p.W_C);
    const Matrix B = matmul(X, p.W_B);

    if (p.variant == SsmVariant::ZeroOrderHold) {
        if (p.W_delta.rows() != X.cols() || p.W_delta.cols() != d.D)
            throw std::invalid_argument("semiseparable: W_delta must be input_width x D");
        Matrix Delta = matmul(X, p.W_delta);
        if (p.positive_delta) Delta = map(Delta, softplus);
        if (!all_finite(Delta))
            throw std::invalid_argument("semiseparable: non-finite step sizes");
        DiscretizedSsm disc = discretize_ssm(p.A, Delta, B);
        d.A_bar = std::move(disc.A_bar);
        d.B_bar = std::move(disc.B_bar);
    } else {
        // Direct: per-step transitions are the A values themselves and the
        // input projection is applied undiscretized.
        d.A_bar.assign(L, p.A);
        d.B_bar.reserve(L);
        for (std::size_t t = 0; t < L; ++t) {
            Matrix bb(d.D, p.state_size);
            for (std::size_t dd = 0; dd < d.D; ++dd)
                for (std::size_t n = 0; n < p.state_size; ++n) bb(dd, n) = B(t, n);
            d.B_bar.push_back(std::move(bb));
        }
    }
    return d;
}

}  // namespace

const char* family_name(MixerFamily f) {
    switch (f) {
        case MixerFamily::Dense: return "dense";
        case MixerFamily::Attention: return "attention";
        case MixerFamily::Toeplitz: return "toeplitz";
        case MixerFamily::Autocorrelation: return "autocorrelation";
        case MixerFamily::Semiseparable: return "semiseparable";
        case MixerFamily::MaskedLowRank: return "masked_lowrank";
    }
    return "unknown";
}

Matrix build_attention_mixer(const Matrix& embedded, const AttentionParams& p,
                             std::size_t head) {
    check_head(head, p.W_Q.size(), "build_attention_mixer");
    if (p.W_Q.size() != p.W_K.size())
        throw std::invalid_argument("build_attention_mixer: W_Q/W_K head counts differ");
    const Matrix Q = head_projection(embedded, p.W_Q[head], "build_attention_mixer");
    const Matrix K = head_projection(embedded, p.W_K[head], "build_attention_mixer");
    const double P = static_cast<double>(Q.cols());
    if (P == 0.0) throw std::invalid_argument("build_attention_mixer: zero head width");
    return softmax_rows(scale(matmul(Q, transpose(K)), 1.0 / std::sqrt(P)));
}

Matrix build_toeplitz_mixer(const ToeplitzParams& p, std::size_t L) {
    const std::size_t K = p.kernel.size();
    if (K == 0) throw std::invalid_argument("build_toeplitz_mixer: empty kernel");
    if (p.dilation == 0) throw std::invalid_argument("build_toeplitz_mixer: zero dilation");
    if (p.dilation * (K - 1) >= L)
        throw std::invalid_argument("build_toeplitz_mixer: band " +
                                    std::to_string(p.dilation * (K - 1)) +
                                    " does not fit in L=" + std::to_string(L));
    Matrix M(L, L);
    for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j <= i; ++j) {
            const std::size_t diff = i - j;
            if (diff % p.dilation != 0) continue;
            const std::size_t k = diff / p.dilation;  // 0-based tap index
            if (k < K) M(i, j) = p.kernel[k];
        }
    return M;
}

Matrix conv_apply(const ToeplitzParams& p, const Matrix& U) {
    const std::size_t K = p.kernel.size();
    const std::size_t L = U.rows();
    if (K == 0) throw std::invalid_argument("conv_apply: empty kernel");
    if (p.dilation == 0) throw std::invalid_argument("conv_apply: zero dilation");
    if (p.dilation * (K - 1) >= L)
        throw std::invalid_argument("conv_apply: band " + std::to_string(p.dilation * (K - 1)) +
                                    " does not fit in L=" + std::to_string(L));
    Matrix Y(L, U.cols());
    for (std::size_t i = 0; i < L; ++i)
        for (std::size_t k = 0; k < K; ++k) {
            const std::size_t off = k * p.dilation;
            if (off > i) break;
            const double w = p.kernel[k];
            const double* src = U.data() + (i - off) * U.cols();
            double* dst = Y.data() + i * U.cols();
            for (std::size_t c = 0; c < U.cols(); ++c) dst[c] += w * src[c];
        }
    return Y;
}

std::vector<double> autocorr_scores(const Matrix& Q, const Matrix& K) {
    if (!Q.same_shape(K))
        throw std::invalid_argument("autocorr_scores: Q/K shape mismatch");
    if (Q.rows() == 0 || Q.cols() == 0)
        throw std::invalid_argument("autocorr_scores: empty projections");
    const std::size_t L = Q.rows(), P = Q.cols();
    std::vector<double> acc(L, 0.0);
    std::vector<double> q(L), k(L);
    for (std::size_t p = 0; p < P; ++p) {
        for (std::size_t t = 0; t < L; ++t) {
            q[t] = Q(t, p);
            k[t] = K(t, p);
        }
        const std::vector<double> corr = fft_autocorrelation(q, k);
        for (std::size_t tau = 0; tau < L; ++tau) acc[tau] += corr[tau];
    }
    for (double& v : acc) v /= static_cast<double>(P);
    return acc;
}

Matrix build_autocorr_mixer(const Matrix& embedded, const AutocorrelationParams& p,
                            std::size_t head) {
    check_head(head, p.W_Q.size(), "build_autocorr_mixer");
    if (p.W_Q.size() != p.W_K.size())
        throw std::invalid_argument("build_autocorr_mixer: W_Q/W_K head counts differ");
    const Matrix Q = head_projection(embedded, p.W_Q[head], "build_autocorr_mixer");
    const Matrix K = head_projection(embedded, p.W_K[head], "build_autocorr_mixer");
    const std::vector<double> acorr = autocorr_scores(Q, K);
    const std::size_t L = Q.rows();
    Matrix M(L, L);
    for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j < L; ++j)
            M(i, j) = acorr[i >= j ? i - j : j - i];
    return M;
}

DiscretizedSsm discretize_ssm(const Matrix& A, const Matrix& Delta, const Matrix& B) {
    const std::size_t D = A.rows(), N = A.cols(), L = Delta.rows();
    if (Delta.cols() != D)
        throw std::invalid_argument("discretize_ssm: Delta columns " +
                                    std::to_string(Delta.cols()) + " != D " + std::to_string(D));
    if (B.rows() != L || B.cols() != N)
        throw std::invalid_argument("discretize_ssm: B must be L x N");
    if (!all_finite(Delta)) throw std::invalid_argument("discretize_ssm: non-finite Delta");
    DiscretizedSsm out;
    out.A_bar.reserve(L);
    out.B_bar.reserve(L);
    for (std::size_t t = 0; t < L; ++t) {
        Matrix ab(D, N), bb(D, N);
        for (std::size_t d = 0; d < D; ++d) {
            const double dt = Delta(t, d);
            for (std::size_t n = 0; n < N; ++n) {
                const double x = dt * A(d, n);
                ab(d, n) = std::exp(x);
                const double phi = std::fabs(x) < 1e-8 ? 1.0 : std::expm1(x) / x;
                bb(d, n) = phi * dt * B(t, n);
            }
        }
        out.A_bar.push_back(std::move(ab));
        out.B_bar.push_back(std::move(bb));
    }
    return out;
}

Matrix build_semiseparable_mixer(const SemiseparableParams& p, const Matrix& X,
                                 std::size_t head) {
    const SsmData d = compute_ssm(p, X);
    check_head(head, d.D, "build_semiseparable_mixer");
    const std::size_t L = X.rows(), N = p.state_size;
    Matrix M(L, L);
    std::vector<double> w(N);
    for (std::size_t j = 0; j < L; ++j) {
        for (std::size_t n = 0; n < N; ++n) w[n] = d.B_bar[j](head, n);
        for (std::size_t i = j; i < L; ++i) {
            double dot = 0.0;
            for (std::size_t n = 0; n < N; ++n) dot += d.C(i, n) * w[n];
            M(i, j) = dot;
            // The product in m_ij runs over k strictly between j and i: row j+1
            // still sees the raw b_bar_j (the state update at step j adds the
            // input before the next transition multiplies), so the transition
            // at step i+1 is the first one folded into this column.
            if (i > j)
                for (std::size_t n = 0; n < N; ++n) w[n] *= d.A_bar[i](head, n);
        }
    }
    return M;
}

Matrix scan_semiseparable(const SemiseparableParams& p, const Matrix& X,
                          const Matrix& U, std::size_t head) {
    const SsmData d = compute_ssm(p, X);
    check_head(head, d.D, "scan_semiseparable");
    if (U.rows() != X.rows())
        throw std::invalid_argument("scan_semiseparable: U rows " + std::to_string(U.rows()) +
                                    " != L " + std::to_string(X.rows()));
    const std::size_t L = X.rows(), N = p.state_size, P = U.cols();
    Matrix h(N, P);  // running state
    Matrix Y(L, P);
    Matrix pt(N, P);
    for (std::size_t t = 0; t < L; ++t) {
        for (std::size_t n = 0; n < N; ++n) {
            const double b = d.B_bar[t](head, n);
            for (std::size_t c = 0; c < P; ++c) pt(n, c) = b * U(t, c);
        }
        for (std::size_t c = 0; c < P; ++c) {
            double y = 0.0;
            for (std::size_t n = 0; n < N; ++n) y += d.C(t, n) * (h(n, c) + pt(n, c));
            Y(t, c) = y;
        }
        for (std::size_t n = 0; n < N; ++n) {
            const double a = d.A_bar[t](head, n);
            for (std::size_t c = 0; c < P; ++c) h(n, c) = a * h(n, c) + pt(n, c);
        }
    }
    return Y;
}

Matrix build_masked_lowrank_mixer(const MaskedLowRankParams& p, const Matrix& Y,
                                  std::size_t row) {
    if (row >= Y.rows())
        throw std::invalid_argument("build_masked_lowrank_mixer: row " + std::to_string(row) +
                                    " out of range");
    const std::size_t D = p.W_up.rows(), U = p.W_up.cols();
    if (p.W_down.rows() != U || p.W_down.cols() != D)
        throw std::invalid_argument("build_masked_lowrank_mixer: W_down must be U x D");
    if (Y.cols() != D)
        throw std::invalid_argument("build_masked_lowrank_mixer: row width " +
                                    std::to_string(Y.cols()) + " != D " + std::to_string(D));
    // Pre-activations for this row decide which hidden units pass through.
    std::vector<double> mask(U, 0.0);
    for (std::size_t u = 0; u < U; ++u) {
        double pre = 0.0;
        for (std::size_t j = 0; j < D; ++j) pre += Y(row, j) * p.W_up(j, u);
        mask[u] = pre > 0.0 ? 1.0 : 0.0;
    }
    Matrix M(D, D);
    for (std::size_t i = 0; i < D; ++i)
        for (std::size_t j = 0; j < D; ++j) {
            double s = 0.0;
            for (std::size_t u = 0; u < U; ++u)
                s += p.W_down(u, i) * mask[u] * p.W_up(j, u);
            M(i, j) = s;
        }
    return M;
}

Matrix apply_mixer(const Matrix& M, const Matrix& V) {
    if (M.rows() != M.cols())
        throw std::invalid_argument("apply_mixer: mixer must be square, got " +
                                    std::to_string(M.rows()) + "x" + std::to_string(M.cols()));
    return matmul(M, V);
}

ad::Parameter make_dense_mixer(std::size_t n, const InitPolicy& init,
                               RandomStream& rs, std::string name) {
    if (n == 0) throw std::invalid_argument("make_dense_mixer: n must be positive");
    Matrix value(n, n);
    switch (init.kind) {
        case InitPolicy::Kind::Zero:
            break;
        case InitPolicy::Kind::ScaledUniform: {
            const double b = 1.0 / std::sqrt(static_cast<double>(n));
            value = random_uniform(n, n, rs, -b, b);
            break;
        }
        case InitPolicy::Kind::Distill:
            if (init.distill_source.rows() != n || init.distill_source.cols() != n)
                throw std::invalid_argument("make_dense_mixer: distill source is " +
                                            std::to_string(init.distill_source.rows()) + "x" +
                                            std::to_string(init.distill_source.cols()) +
                                            ", expected " + std::to_string(n) + "x" +
                                            std::to_string(n));
            value = init.distill_source;
            break;
    }
    return ad::Parameter(std::move(name), std::move(value));
}

}  // namespace mixlab::mix
