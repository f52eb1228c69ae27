#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mixlab/matrix.hpp"
#include "mixlab/mixers.hpp"
#include "mixlab/models.hpp"
#include "mixlab/svd.hpp"

namespace mixlab::analysis {

// ---- similarity between two mixer matrices ------------------------------

struct PsnrResult {
    double value = 0.0;   // dB; +infinity when the matrices are identical
    bool rescaled = false;  // set when the reference peak was non-positive and
                            // both matrices were jointly min-max mapped to [0,1]
};

// 10 log10(peak^2 / mse) with the peak taken from the reference matrix.
PsnrResult psnr(const Matrix& reference, const Matrix& other);

// Jensen-Shannon divergence (natural log, so the range is [0, ln 2]) between
// the two matrices viewed as distributions: entries are |.|-normalized to sum
// to one. All-zero matrices are rejected.
double jsd(const Matrix& a, const Matrix& b);

struct SimilarityReport {
    PsnrResult psnr;
    double jsd = 0.0;
    double frobenius_distance = 0.0;
};

SimilarityReport compare_mixers(const Matrix& reference, const Matrix& other);

// ---- rank structure ------------------------------------------------------

// Nominal rank ceiling implied by each family's parameterization: head width
// for attention, K+1 for a K-tap band, N*ceil(n/N) for state size N, the
// hidden width for masked low-rank, and full rank n otherwise. For some
// families the measured rank of the realized matrix can exceed this nominal
// figure (the tests demonstrate where); rank_report records both and flags it.
std::size_t mixer_rank_bound(const mix::MixerSpec& spec);

struct RankReport {
    std::size_t rank = 0;
    std::size_t bound = 0;
    bool within = false;
    double sigma_max = 0.0;
    double nuclear = 0.0;
};

RankReport rank_report(const Matrix& M, const mix::MixerSpec& spec,
                       double rel_tol = 1e-8);

// ---- dense approximation of a fixed target ------------------------------

struct FitResult {
    double initial_residual = 0.0;
    double residual = 0.0;  // Frobenius distance after the final step
    std::size_t steps = 0;
};

// Gradient descent through the autodiff tape on ||M - target||_F^2 from a
// scaled-uniform start. The objective is quadratic, so with lr < 0.5 the
// distance contracts by (1 - 2 lr) every step.
FitResult fit_dense_to_structured(const Matrix& target, std::size_t steps = 500,
                                  double lr = 0.4, std::uint64_t seed = 1);

// ---- snapshots of a model's mixers --------------------------------------

struct MixerSnapshot {
    std::string label;
    mix::MixerSpec spec;
    Matrix mean_mixer;  // materialized mixer averaged over calibration windows
};

// Mean materialization over at most 32 calibration windows (extra windows are
// ignored); input-independent families give the same matrix for every window.
std::vector<MixerSnapshot> snapshot_mixers(const models::SequenceModel& m,
                                           const std::vector<Matrix>& windows);

// ---- heatmap export ------------------------------------------------------

// 8-bit binary PGM (P5), entries min-max scaled to 0..255; a constant matrix
// maps to all zeros.
void export_heatmap_pgm(const Matrix& M, const std::string& path);
// One row per line, comma separated, printed with %.17g so values round-trip.
void export_heatmap_csv(const Matrix& M, const std::string& path);
Matrix load_csv_matrix(const std::string& path);

}  // namespace mixlab::analysis
