#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "mixlab/autodiff.hpp"
#include "mixlab/matrix.hpp"
#include "mixlab/rng.hpp"

namespace mixlab::mix {

// Every sequence-mixing layer in this project is, explicitly or implicitly, an
// n x n matrix M applied to the mixed axis: Y = M * V. The builders below
// materialize that matrix for each structured family; the model layer applies
// the same math on the autodiff tape and must agree with these to 1e-9.

enum class MixerFamily {
    Dense,
    Attention,
    Toeplitz,
    Autocorrelation,
    Semiseparable,
    MaskedLowRank,
};

const char* family_name(MixerFamily f);

enum class SsmVariant { Direct, ZeroOrderHold };

// Structural description of a mixer (no weights); enough to pick the rank
// bound and rebuild parameter shapes.
struct MixerSpec {
    MixerFamily family = MixerFamily::Dense;
    std::size_t mix_dim = 0;     // n: length of the mixed axis
    std::size_t heads = 1;       // H
    std::size_t head_width = 0;  // P (attention / autocorrelation)
    std::size_t kernel_size = 0; // K (Toeplitz)
    std::size_t dilation = 1;    // d (Toeplitz)
    std::size_t state_size = 0;  // N (semiseparable)
    std::size_t hidden = 0;      // U (masked low-rank)
    SsmVariant ssm_variant = SsmVariant::ZeroOrderHold;
    bool positive_delta = true;  // softplus on Delta (ZeroOrderHold)
    // True when the mixer acts on the feature axis instead of the token axis
    // (the masked low-rank family and its dense replacement).
    bool on_width = false;
};

// ---- attention ----------------------------------------------------------

// Per-head projections taken from the embedded sequence: Q = E W_Q, K = E W_K,
// both D x P per head; M = softmax_rows(Q K^T / sqrt(P)).
struct AttentionParams {
    std::vector<Matrix> W_Q;
    std::vector<Matrix> W_K;
};

Matrix build_attention_mixer(const Matrix& embedded, const AttentionParams& p,
                             std::size_t head);

// ---- banded Toeplitz (causal dilated convolution) -----------------------

// m_ij = w_k  iff  (i - j) mod d == 0 and k = (i - j)/d + 1 lies in [1, K];
// zero otherwise. Lower-triangular banded: i >= j only.
struct ToeplitzParams {
    std::vector<double> kernel;  // w_1 .. w_K
    std::size_t dilation = 1;
};

Matrix build_toeplitz_mixer(const ToeplitzParams& p, std::size_t L);

// Sliding-window application, O(L*K*P); equal to matmul(build_toeplitz_mixer, U).
Matrix conv_apply(const ToeplitzParams& p, const Matrix& U);

// ---- autocorrelation ----------------------------------------------------

// Per-head Q/K projections as in attention; lag scores averaged over the P
// columns; M is the symmetric Toeplitz matrix m_ij = acorr[|i-j|], all lags kept.
struct AutocorrelationParams {
    std::vector<Matrix> W_Q;
    std::vector<Matrix> W_K;
};

std::vector<double> autocorr_scores(const Matrix& Q, const Matrix& K);
Matrix build_autocorr_mixer(const Matrix& embedded, const AutocorrelationParams& p,
                            std::size_t head);

// ---- semiseparable (diagonal state-space) -------------------------------

// Input-dependent projections B = X W_B, C = X W_C (shared across heads);
// one head per channel d with scalar head width. Two variants:
//  * ZeroOrderHold: Delta = X W_delta (optionally softplus'd positive),
//    A continuous (D x N), discretized per step;
//  * Direct: the transition values in A are used at every step as-is and
//    B is applied undiscretized.
struct SemiseparableParams {
    SsmVariant variant = SsmVariant::ZeroOrderHold;
    std::size_t state_size = 0;  // N
    Matrix W_B;                  // C_in x N
    Matrix W_C;                  // C_in x N
    Matrix W_delta;              // C_in x D (ZeroOrderHold only)
    Matrix A;                    // D x N
    bool positive_delta = true;  // pass Delta through softplus (ZeroOrderHold)
};

// Zero-order-hold discretization, elementwise over (t, d, n):
//   A_bar[t](d,n) = exp(Delta(t,d) * A(d,n))
//   B_bar[t](d,n) = phi1(Delta(t,d) * A(d,n)) * Delta(t,d) * B(t,n)
// where phi1(x) = (e^x - 1)/x with the limit 1 substituted for |x| < 1e-8.
struct DiscretizedSsm {
    std::vector<Matrix> A_bar;  // L matrices, each D x N
    std::vector<Matrix> B_bar;  // L matrices, each D x N
};

DiscretizedSsm discretize_ssm(const Matrix& A, const Matrix& Delta, const Matrix& B);

// m_ij = c_i^T (prod_{j<k<i} A_bar_k) b_bar_j for i >= j (empty product =
// identity, so m_ii = c_i^T b_bar_i); zero above the diagonal.
Matrix build_semiseparable_mixer(const SemiseparableParams& p, const Matrix& X,
                                 std::size_t head);

// Recurrent O(L*N*P) application of head `head` to U (L x P):
//   y_t = c_t^T (h_{t-1} + b_bar_t * u_t),  h_t = a_bar_t .* h_{t-1} + b_bar_t * u_t.
// Exactly equal to matmul(build_semiseparable_mixer(...), U).
Matrix scan_semiseparable(const SemiseparableParams& p, const Matrix& X,
                          const Matrix& U, std::size_t head);

// ---- masked low-rank (ReLU feed-forward viewed as a mixer) --------------

// For a single row y of Y: M = W_down^T diag(mask) W_up^T with
// mask_u = [ (y W_up)_u > 0 ], arranged so M y^T equals the FFN output
// (ReLU(y W_up) W_down)^T for that row. Rank is at most U exactly.
struct MaskedLowRankParams {
    Matrix W_up;    // D x U
    Matrix W_down;  // U x D
};

Matrix build_masked_lowrank_mixer(const MaskedLowRankParams& p, const Matrix& Y,
                                  std::size_t row);

// ---- shared -------------------------------------------------------------

Matrix apply_mixer(const Matrix& M, const Matrix& V);  // matmul with shape checks

struct InitPolicy {
    enum class Kind { Zero, ScaledUniform, Distill };
    Kind kind = Kind::ScaledUniform;
    Matrix distill_source;

    static InitPolicy zero() { return {Kind::Zero, {}}; }
    static InitPolicy scaled_uniform() { return {Kind::ScaledUniform, {}}; }
    static InitPolicy distill(Matrix m) { return {Kind::Distill, std::move(m)}; }
};

// Unconstrained trainable n x n matrix. ScaledUniform draws from
// U(-1/sqrt(n), 1/sqrt(n)); Distill copies the supplied materialized mixer.
ad::Parameter make_dense_mixer(std::size_t n, const InitPolicy& init,
                               RandomStream& rs, std::string name);

}  // namespace mixlab::mix
