#include "mixlab/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "mixlab/autodiff.hpp"
#include "mixlab/rng.hpp"

namespace mixlab::analysis {

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        std::ostringstream os;
        os << what << ": shapes " << a.rows() << "x" << a.cols() << " and "
           << b.rows() << "x" << b.cols() << " differ";
        throw std::invalid_argument(os.str());
    }
}

void require_finite(const Matrix& m, const char* what) {
    if (!all_finite(m))
        throw std::invalid_argument(std::string(what) + ": non-finite entries");
}

}  // namespace

PsnrResult psnr(const Matrix& reference, const Matrix& other) {
    require_same_shape(reference, other, "psnr");
    require_finite(reference, "psnr");
    require_finite(other, "psnr");
    if (reference.size() == 0) throw std::invalid_argument("psnr: empty matrices");

    PsnrResult out;
    double peak = *std::max_element(reference.data(), reference.data() + reference.size());
    Matrix a = reference, b = other;
    if (peak <= 0.0) {
        // Joint min-max rescale to [0,1] so the peak is meaningful.
        double lo = std::numeric_limits<double>::infinity();
        double hi = -std::numeric_limits<double>::infinity();
        for (const Matrix* m : {&a, &b}) {
            for (std::size_t i = 0; i < m->size(); ++i) {
                lo = std::min(lo, m->data()[i]);
                hi = std::max(hi, m->data()[i]);
            }
        }
        out.rescaled = true;
        if (hi > lo) {
            double inv = 1.0 / (hi - lo);
            for (Matrix* m : {&a, &b})
                for (std::size_t i = 0; i < m->size(); ++i)
                    m->data()[i] = (m->data()[i] - lo) * inv;
        }
        peak = 1.0;
    }
    double mse = mean_squared_error(a, b);
    if (mse == 0.0) {
        out.value = std::numeric_limits<double>::infinity();
        return out;
    }
    out.value = 10.0 * std::log10(peak * peak / mse);
    return out;
}

double jsd(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "jsd");
    require_finite(a, "jsd");
    require_finite(b, "jsd");

    auto normalize = [](const Matrix& m) {
        std::vector<double> p(m.size());
        double s = 0.0;
        for (std::size_t i = 0; i < m.size(); ++i) {
            p[i] = std::abs(m.data()[i]);
            s += p[i];
        }
        if (s == 0.0)
            throw std::invalid_argument("jsd: all-zero matrix has no distribution");
        for (double& x : p) x /= s;
        return p;
    };
    std::vector<double> p = normalize(a), q = normalize(b);

    auto kl_to_mix = [&](const std::vector<double>& u) {
        double acc = 0.0;
        for (std::size_t i = 0; i < u.size(); ++i) {
            if (u[i] > 0.0) {
                double m = 0.5 * (p[i] + q[i]);
                acc += u[i] * std::log(u[i] / m);
            }
        }
        return acc;
    };
    double v = 0.5 * kl_to_mix(p) + 0.5 * kl_to_mix(q);
    // guard against tiny negative round-off
    return v < 0.0 ? 0.0 : v;
}

SimilarityReport compare_mixers(const Matrix& reference, const Matrix& other) {
    SimilarityReport r;
    r.psnr = psnr(reference, other);
    r.jsd = jsd(reference, other);
    r.frobenius_distance = frobenius_norm(sub(reference, other));
    return r;
}

std::size_t mixer_rank_bound(const mix::MixerSpec& spec) {
    const std::size_t n = spec.mix_dim;
    switch (spec.family) {
        case mix::MixerFamily::Attention:
            return std::min(n, spec.head_width);
        case mix::MixerFamily::Toeplitz:
            return std::min(n, spec.kernel_size + 1);
        case mix::MixerFamily::Semiseparable: {
            const std::size_t N = spec.state_size;
            return std::min(n, N * ((n + N - 1) / N));
        }
        case mix::MixerFamily::MaskedLowRank:
            return std::min(n, spec.hidden);
        case mix::MixerFamily::Autocorrelation:
        case mix::MixerFamily::Dense:
            return n;
    }
    throw std::logic_error("unknown mixer family");
}

RankReport rank_report(const Matrix& M, const mix::MixerSpec& spec, double rel_tol) {
    if (M.rows() != M.cols() || M.rows() != spec.mix_dim)
        throw std::invalid_argument("rank_report: matrix does not match the mixer spec");
    RankReport r;
    std::vector<double> sv = singular_values(M);
    r.sigma_max = sv.empty() ? 0.0 : sv.front();
    for (double s : sv) r.nuclear += s;
    r.rank = static_cast<std::size_t>(numerical_rank(M, rel_tol));
    r.bound = mixer_rank_bound(spec);
    r.within = r.rank <= r.bound;
    return r;
}

FitResult fit_dense_to_structured(const Matrix& target, std::size_t steps, double lr,
                                  std::uint64_t seed) {
    if (target.rows() != target.cols())
        throw std::invalid_argument("fit target must be square");
    require_finite(target, "fit_dense_to_structured");

    RandomStream rs(seed);
    ad::Parameter M = mix::make_dense_mixer(target.rows(),
                                            mix::InitPolicy::scaled_uniform(), rs, "M");
    FitResult out;
    out.initial_residual = frobenius_norm(sub(M.value, target));
    out.steps = steps;
    for (std::size_t s = 0; s < steps; ++s) {
        M.zero_grad();
        ad::Tape t;
        ad::Value diff = t.sub(t.param(M), t.constant(target));
        t.backward(t.sum_all(t.mul(diff, diff)));
        for (std::size_t i = 0; i < M.value.size(); ++i)
            M.value.data()[i] -= lr * M.grad.data()[i];
    }
    out.residual = frobenius_norm(sub(M.value, target));
    return out;
}

std::vector<MixerSnapshot> snapshot_mixers(const models::SequenceModel& m,
                                           const std::vector<Matrix>& windows) {
    if (windows.empty())
        throw std::invalid_argument("snapshot_mixers: need at least one window");
    const std::size_t used = std::min<std::size_t>(windows.size(), 32);

    std::vector<MixerSnapshot> out;
    std::vector<models::MixerHandle> handles = m.mixer_handles();
    std::vector<Matrix> acc;
    for (std::size_t w = 0; w < used; ++w) {
        std::vector<Matrix> mats = m.materialize_all(windows[w]);
        if (acc.empty()) {
            acc = std::move(mats);
        } else {
            for (std::size_t i = 0; i < acc.size(); ++i) acc[i] = add(acc[i], mats[i]);
        }
    }
    for (std::size_t i = 0; i < handles.size(); ++i) {
        MixerSnapshot s;
        s.label = handles[i].label;
        s.spec = handles[i].spec;
        s.mean_mixer = scale(acc[i], 1.0 / static_cast<double>(used));
        out.push_back(std::move(s));
    }
    return out;
}

void export_heatmap_pgm(const Matrix& M, const std::string& path) {
    if (M.size() == 0) throw std::invalid_argument("cannot export an empty matrix");
    require_finite(M, "export_heatmap_pgm");
    double lo = M.data()[0], hi = M.data()[0];
    for (std::size_t i = 0; i < M.size(); ++i) {
        lo = std::min(lo, M.data()[i]);
        hi = std::max(hi, M.data()[i]);
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    f << "P5\n" << M.cols() << " " << M.rows() << "\n255\n";
    const double inv = hi > lo ? 255.0 / (hi - lo) : 0.0;
    for (std::size_t i = 0; i < M.size(); ++i) {
        int v = static_cast<int>(std::lround((M.data()[i] - lo) * inv));
        v = std::clamp(v, 0, 255);
        f.put(static_cast<char>(static_cast<unsigned char>(v)));
    }
    if (!f) throw std::runtime_error("short write: " + path);
}

void export_heatmap_csv(const Matrix& M, const std::string& path) {
    if (M.size() == 0) throw std::invalid_argument("cannot export an empty matrix");
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    char buf[64];
    for (std::size_t i = 0; i < M.rows(); ++i) {
        for (std::size_t j = 0; j < M.cols(); ++j) {
            std::snprintf(buf, sizeof(buf), "%.17g", M(i, j));
            f << (j ? "," : "") << buf;
        }
        f << "\n";
    }
    if (!f) throw std::runtime_error("short write: " + path);
}

Matrix load_csv_matrix(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open: " + path);
    std::vector<std::vector<double>> rows;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::vector<double> row;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
        if (!rows.empty() && row.size() != rows.front().size())
            throw std::runtime_error("ragged csv matrix in " + path);
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw std::runtime_error("empty csv matrix in " + path);
    Matrix m(rows.size(), rows.front().size());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) m(i, j) = rows[i][j];
    return m;
}

}  // namespace mixlab::analysis
