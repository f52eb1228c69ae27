#include "mixlab/harness.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <complex>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace mixlab::harness {

namespace {

using json = nlohmann::json;

void check_fractions(const SplitFractions& s) {
    const double parts[] = {s.train, s.val, s.test};
    for (double f : parts)
        if (!std::isfinite(f) || f < 0.0 || f > 1.0)
            throw std::invalid_argument("split fractions must lie in [0, 1]");
    if (std::abs(s.train + s.val + s.test - 1.0) > 1e-9)
        throw std::invalid_argument("split fractions must sum to 1");
}

// val and test get the floor of their share; train absorbs the remainder so
// every item lands somewhere even when the fractions do not divide evenly.
struct SplitCounts {
    std::size_t train = 0, val = 0, test = 0;
};

SplitCounts split_counts(std::size_t total, const SplitFractions& s) {
    check_fractions(s);
    SplitCounts c;
    c.val = static_cast<std::size_t>(std::floor(static_cast<double>(total) * s.val));
    c.test = static_cast<std::size_t>(std::floor(static_cast<double>(total) * s.test));
    c.train = total - c.val - c.test;
    return c;
}

}  // namespace

// ---- datasets ------------------------------------------------------------

double max_char_root_modulus(const std::vector<double>& coeffs) {
    if (coeffs.empty())
        throw std::invalid_argument("max_char_root_modulus: no coefficients");
    for (double c : coeffs)
        if (!std::isfinite(c))
            throw std::invalid_argument("max_char_root_modulus: non-finite coefficient");
    const std::size_t p = coeffs.size();
    using cd = std::complex<double>;
    // Characteristic polynomial z^p - c1 z^{p-1} - ... - cp, evaluated by Horner.
    auto eval = [&](cd z) {
        cd acc(1.0, 0.0);
        for (std::size_t k = 0; k < p; ++k) acc = acc * z - coeffs[k];
        return acc;
    };
    // Durand-Kerner from distinct non-real starting points.
    std::vector<cd> roots(p);
    const cd base(0.4, 0.9);
    cd pw = base;
    for (std::size_t i = 0; i < p; ++i) {
        roots[i] = pw;
        pw *= base;
    }
    for (int iter = 0; iter < 1000; ++iter) {
        double moved = 0.0;
        for (std::size_t i = 0; i < p; ++i) {
            cd denom(1.0, 0.0);
            for (std::size_t j = 0; j < p; ++j)
                if (j != i) denom *= roots[i] - roots[j];
            if (std::abs(denom) < 1e-30) denom = cd(1e-30, 0.0);
            const cd delta = eval(roots[i]) / denom;
            roots[i] -= delta;
            moved = std::max(moved, std::abs(delta));
        }
        if (moved < 1e-13) break;
    }
    double worst = 0.0;
    for (const cd& r : roots) worst = std::max(worst, std::abs(r));
    return worst;
}

std::vector<double> gen_ar_series(const std::vector<double>& coeffs, double noise_std,
                                  std::size_t len, RandomStream& rs) {
    if (coeffs.empty()) throw std::invalid_argument("gen_ar_series: no coefficients");
    if (noise_std < 0.0 || !std::isfinite(noise_std))
        throw std::invalid_argument("gen_ar_series: bad noise_std");
    const std::size_t p = coeffs.size();
    std::vector<double> hist(p);  // hist[k] = x_{t-1-k}
    for (std::size_t k = 0; k < p; ++k) hist[k] = rs.normal(0.0, 1.0);
    const std::size_t burn = noise_std > 0.0 ? 256 : 0;
    std::vector<double> out;
    out.reserve(len);
    for (std::size_t t = 0; t < burn + len; ++t) {
        double x = 0.0;
        for (std::size_t k = 0; k < p; ++k) x += coeffs[k] * hist[k];
        if (noise_std > 0.0) x += noise_std * rs.normal(0.0, 1.0);
        for (std::size_t k = p; k-- > 1;) hist[k] = hist[k - 1];
        hist[0] = x;
        if (t >= burn) out.push_back(x);
    }
    return out;
}

namespace {

// One split segment of C independent AR channels, long enough for `count`
// stride-1 windows of L + T steps.
void fill_ar_split(std::vector<Window>& split, std::size_t count, std::size_t L,
                   std::size_t C, std::size_t T, const std::vector<double>& coeffs,
                   double noise_std, RandomStream& rs) {
    if (count == 0) return;
    const std::size_t len = count + L + T - 1;
    Matrix seg(len, C);
    for (std::size_t c = 0; c < C; ++c) {
        const std::vector<double> series = gen_ar_series(coeffs, noise_std, len, rs);
        for (std::size_t t = 0; t < len; ++t) seg(t, c) = series[t];
    }
    for (std::size_t i = 0; i < count; ++i) {
        Window w;
        w.lookback = Matrix(L, C);
        w.target = Matrix(T, C);
        for (std::size_t t = 0; t < L; ++t)
            for (std::size_t c = 0; c < C; ++c) w.lookback(t, c) = seg(i + t, c);
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t c = 0; c < C; ++c) w.target(t, c) = seg(i + L + t, c);
        split.push_back(std::move(w));
    }
}

}  // namespace

WindowedDataset gen_synthetic_ar(std::size_t L, std::size_t C, std::size_t T,
                                 const std::vector<double>& coeffs, double noise_std,
                                 std::size_t n_windows, std::uint64_t seed,
                                 const SplitFractions& splits) {
    if (L == 0 || C == 0 || T == 0 || n_windows == 0)
        throw std::invalid_argument("gen_synthetic_ar: L, C, T, n_windows must be positive");
    const double modulus = max_char_root_modulus(coeffs);
    if (modulus > 1.0 + 1e-9) {
        std::ostringstream os;
        os << "gen_synthetic_ar: unstable coefficients (largest characteristic root "
           << modulus << " > 1)";
        throw std::invalid_argument(os.str());
    }
    const SplitCounts counts = split_counts(n_windows, splits);
    WindowedDataset d;
    d.task = models::Task::Forecast;
    d.L = L;
    d.C = C;
    d.horizon = T;
    RandomStream rs(seed);
    fill_ar_split(d.train, counts.train, L, C, T, coeffs, noise_std, rs);
    fill_ar_split(d.val, counts.val, L, C, T, coeffs, noise_std, rs);
    fill_ar_split(d.test, counts.test, L, C, T, coeffs, noise_std, rs);
    return d;
}

namespace {

void fill_toy_split(std::vector<Window>& split, std::size_t count, std::size_t L,
                    std::size_t C, std::size_t n_classes, double noise_std,
                    RandomStream& rs) {
    constexpr double two_pi = 6.283185307179586476925286766559;
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t k = i % n_classes;  // round-robin keeps priors balanced
        Window w;
        w.label = k;
        w.lookback = Matrix(L, C);
        for (std::size_t t = 0; t < L; ++t)
            for (std::size_t c = 0; c < C; ++c) {
                const double phase = two_pi * static_cast<double>(c) / static_cast<double>(C);
                double v = std::sin(two_pi * static_cast<double>(k + 1) *
                                        static_cast<double>(t) / static_cast<double>(L) +
                                    phase);
                if (noise_std > 0.0) v += noise_std * rs.normal(0.0, 1.0);
                w.lookback(t, c) = v;
            }
        split.push_back(std::move(w));
    }
}

}  // namespace

WindowedDataset gen_classification_toy(std::size_t L, std::size_t C,
                                       std::size_t n_classes, std::size_t n_windows,
                                       double noise_std, std::uint64_t seed,
                                       const SplitFractions& splits) {
    if (L == 0 || C == 0 || n_windows == 0)
        throw std::invalid_argument("gen_classification_toy: L, C, n_windows must be positive");
    if (n_classes < 2)
        throw std::invalid_argument("gen_classification_toy: need at least two classes");
    if (noise_std < 0.0 || !std::isfinite(noise_std))
        throw std::invalid_argument("gen_classification_toy: bad noise_std");
    const SplitCounts counts = split_counts(n_windows, splits);
    WindowedDataset d;
    d.task = models::Task::Classification;
    d.L = L;
    d.C = C;
    d.n_classes = n_classes;
    RandomStream rs(seed);
    fill_toy_split(d.train, counts.train, L, C, n_classes, noise_std, rs);
    fill_toy_split(d.val, counts.val, L, C, n_classes, noise_std, rs);
    fill_toy_split(d.test, counts.test, L, C, n_classes, noise_std, rs);
    return d;
}

namespace {

std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

std::vector<std::string> split_on(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : s) {
        if (ch == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += ch;
        }
    }
    out.push_back(cur);
    return out;
}

double parse_cell(const std::string& cell, const std::string& path, std::size_t line,
                  std::size_t col) {
    const std::string t = trim(cell);
    std::ostringstream os;
    if (t.empty()) {
        os << path << ": line " << line << ", column " << col + 1 << ": empty cell";
        throw std::runtime_error(os.str());
    }
    char* end = nullptr;
    const double v = std::strtod(t.c_str(), &end);
    if (end != t.c_str() + t.size()) {
        os << path << ": line " << line << ", column " << col + 1 << ": not a number: '"
           << t << "'";
        throw std::runtime_error(os.str());
    }
    return v;
}

void windows_from_rows(std::vector<Window>& split, const Matrix& table,
                       std::size_t begin, std::size_t count, std::size_t L,
                       std::size_t T, const std::string& name, const std::string& path,
                       double fraction) {
    if (count == 0 && fraction <= 0.0) return;
    if (count < L + T) {
        std::ostringstream os;
        os << path << ": " << name << " split has " << count << " rows but a window needs "
           << L + T;
        throw std::runtime_error(os.str());
    }
    const std::size_t C = table.cols();
    for (std::size_t i = 0; i + L + T <= count; ++i) {
        Window w;
        w.lookback = Matrix(L, C);
        w.target = Matrix(T, C);
        for (std::size_t t = 0; t < L; ++t)
            for (std::size_t c = 0; c < C; ++c) w.lookback(t, c) = table(begin + i + t, c);
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t c = 0; c < C; ++c)
                w.target(t, c) = table(begin + i + L + t, c);
        split.push_back(std::move(w));
    }
}

}  // namespace

WindowedDataset load_csv(const std::string& path, std::size_t L, std::size_t T,
                         const SplitFractions& splits) {
    if (L == 0 || T == 0) throw std::invalid_argument("load_csv: L and T must be positive");
    check_fractions(splits);
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_csv: cannot open " + path);
    std::string line;
    if (!std::getline(in, line))
        throw std::runtime_error(path + ": line 1: missing header row");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::vector<std::string> header = split_on(line, ',');
    if (header.size() < 2)
        throw std::runtime_error(path +
                                 ": line 1: need a timestamp column plus at least one channel");
    const std::size_t C = header.size() - 1;

    std::vector<std::vector<double>> rows;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (trim(line).empty()) continue;
        const std::vector<std::string> cells = split_on(line, ',');
        if (cells.size() != C + 1) {
            std::ostringstream os;
            os << path << ": line " << lineno << ": expected " << C + 1 << " columns, got "
               << cells.size();
            throw std::runtime_error(os.str());
        }
        std::vector<double> row(C);
        for (std::size_t c = 0; c < C; ++c)
            row[c] = parse_cell(cells[c + 1], path, lineno, c + 1);
        rows.push_back(std::move(row));
    }
    const std::size_t R = rows.size();
    if (R == 0) throw std::runtime_error(path + ": no data rows");

    const SplitCounts counts = split_counts(R, splits);
    if (counts.train == 0)
        throw std::runtime_error(path + ": train split is empty");

    // Standardize per channel from train-split statistics only.
    Matrix table(R, C);
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) table(r, c) = rows[r][c];
    for (std::size_t c = 0; c < C; ++c) {
        double mean = 0.0;
        for (std::size_t r = 0; r < counts.train; ++r) mean += table(r, c);
        mean /= static_cast<double>(counts.train);
        double var = 0.0;
        for (std::size_t r = 0; r < counts.train; ++r) {
            const double d = table(r, c) - mean;
            var += d * d;
        }
        var /= static_cast<double>(counts.train);
        const double sd = std::sqrt(var);
        const double div = sd > 0.0 ? sd : 1.0;  // constant column maps to zeros
        for (std::size_t r = 0; r < R; ++r) table(r, c) = (table(r, c) - mean) / div;
    }

    WindowedDataset d;
    d.task = models::Task::Forecast;
    d.L = L;
    d.C = C;
    d.horizon = T;
    windows_from_rows(d.train, table, 0, counts.train, L, T, "train", path, splits.train);
    windows_from_rows(d.val, table, counts.train, counts.val, L, T, "val", path, splits.val);
    windows_from_rows(d.test, table, counts.train + counts.val, counts.test, L, T, "test",
                      path, splits.test);
    return d;
}

void mask_for_imputation(WindowedDataset& data, double mask_frac, std::uint64_t seed) {
    if (!(mask_frac >= 0.0 && mask_frac <= 1.0))
        throw std::invalid_argument("mask_for_imputation: mask_frac must lie in [0, 1]");
    if (data.task == models::Task::Classification)
        throw std::invalid_argument("mask_for_imputation: classification windows have no targets");
    RandomStream rs(seed);
    auto mask_split = [&](std::vector<Window>& split) {
        for (Window& w : split) {
            const Matrix intact = w.lookback;
            w.mask = Matrix(intact.rows(), intact.cols());
            for (std::size_t i = 0; i < intact.rows(); ++i)
                for (std::size_t j = 0; j < intact.cols(); ++j)
                    if (rs.uniform(0.0, 1.0) < mask_frac) {
                        w.mask(i, j) = 1.0;
                        w.lookback(i, j) = 0.0;
                    }
            w.target = intact;
        }
    };
    mask_split(data.train);
    mask_split(data.val);
    mask_split(data.test);
    data.task = models::Task::Imputation;
}

// ---- metrics -------------------------------------------------------------

double metric_mse(const Matrix& pred, const Matrix& truth) {
    if (!pred.same_shape(truth) || pred.empty())
        throw std::invalid_argument("metric_mse: shapes differ or empty");
    return mean_squared_error(pred, truth);
}

namespace {

double mase_with_scale(const Matrix& pred, const Matrix& truth, const Matrix& scale_src) {
    if (!pred.same_shape(truth) || pred.empty())
        throw std::invalid_argument("mase: shapes differ or empty");
    if (truth.cols() != scale_src.cols())
        throw std::invalid_argument("mase: channel count mismatch with scale series");
    if (scale_src.rows() < 2)
        throw std::invalid_argument("mase: scale series needs at least two steps");
    const std::size_t T = truth.rows(), C = truth.cols();
    const std::size_t S = scale_src.rows();
    double acc = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
        double den = 0.0;
        for (std::size_t t = 1; t < S; ++t)
            den += std::abs(scale_src(t, c) - scale_src(t - 1, c));
        den /= static_cast<double>(S - 1);
        if (den == 0.0)
            throw std::domain_error("mase: constant scale series in channel " +
                                    std::to_string(c));
        double num = 0.0;
        for (std::size_t t = 0; t < T; ++t) num += std::abs(pred(t, c) - truth(t, c));
        num /= static_cast<double>(T);
        acc += num / den;
    }
    return acc / static_cast<double>(C);
}

}  // namespace

double metric_mase(const Matrix& pred, const Matrix& truth) {
    return mase_with_scale(pred, truth, truth);
}

double metric_mase_insample(const Matrix& pred, const Matrix& truth,
                            const Matrix& history) {
    return mase_with_scale(pred, truth, history);
}

double metric_accuracy(const std::vector<std::size_t>& pred,
                       const std::vector<std::size_t>& truth) {
    if (pred.size() != truth.size() || pred.empty())
        throw std::invalid_argument("metric_accuracy: size mismatch or empty");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i)
        if (pred[i] == truth[i]) ++hit;
    return static_cast<double>(hit) / static_cast<double>(pred.size());
}

double metric_f1(const std::vector<std::size_t>& pred,
                 const std::vector<std::size_t>& truth, std::size_t positive) {
    if (pred.size() != truth.size() || pred.empty())
        throw std::invalid_argument("metric_f1: size mismatch or empty");
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] == positive, t = truth[i] == positive;
        if (p && t) ++tp;
        else if (p && !t) ++fp;
        else if (!p && t) ++fn;
    }
    const double denom_p = static_cast<double>(tp + fp);
    const double denom_r = static_cast<double>(tp + fn);
    const double prec = denom_p > 0.0 ? static_cast<double>(tp) / denom_p : 0.0;
    const double rec = denom_r > 0.0 ? static_cast<double>(tp) / denom_r : 0.0;
    if (prec + rec == 0.0) return 0.0;
    return 2.0 * prec * rec / (prec + rec);
}

// ---- training ------------------------------------------------------------

AdamOptimizer::AdamOptimizer(std::vector<ad::Parameter*> params, double lr, double beta1,
                             double beta2, double eps, double clip_norm)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps),
      clip_(clip_norm) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const ad::Parameter* p : params_) {
        m_.emplace_back(p->value.rows(), p->value.cols());
        v_.emplace_back(p->value.rows(), p->value.cols());
    }
}

void AdamOptimizer::step() {
    double sq = 0.0;
    for (const ad::Parameter* p : params_)
        for (std::size_t i = 0; i < p->grad.size(); ++i) {
            const double g = p->grad.data()[i];
            sq += g * g;
        }
    last_norm_ = std::sqrt(sq);
    const double factor =
        (clip_ > 0.0 && last_norm_ > clip_) ? clip_ / last_norm_ : 1.0;
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
        ad::Parameter& p = *params_[k];
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double g = p.grad.data()[i] * factor;
            double& m = m_[k].data()[i];
            double& v = v_[k].data()[i];
            m = beta1_ * m + (1.0 - beta1_) * g;
            v = beta2_ * v + (1.0 - beta2_) * g * g;
            const double mhat = m / bc1;
            const double vhat = v / bc2;
            p.value.data()[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

ad::Value window_loss(ad::Tape& t, const models::SequenceModel& m, const Window& w,
                      const WindowedDataset& data) {
    const ad::Value out = m.forward(t, w.lookback);
    switch (data.task) {
        case models::Task::Forecast: {
            const ad::Value target = t.constant(flatten_row(w.target));
            const ad::Value diff = t.sub(out, target);
            const double n = static_cast<double>(w.target.size());
            return t.scale(t.sum_all(t.mul(diff, diff)), 1.0 / n);
        }
        case models::Task::Imputation: {
            const ad::Value target = t.constant(flatten_row(w.target));
            const ad::Value mask = t.constant(flatten_row(w.mask));
            const ad::Value diff = t.mul(t.sub(out, target), mask);
            double masked = 0.0;
            for (std::size_t i = 0; i < w.mask.size(); ++i) masked += w.mask.data()[i];
            const double n = masked > 0.0 ? masked : 1.0;
            return t.scale(t.sum_all(t.mul(diff, diff)), 1.0 / n);
        }
        case models::Task::Classification: {
            Matrix onehot(1, data.n_classes);
            if (w.label >= data.n_classes)
                throw std::invalid_argument("window_loss: label out of range");
            onehot(0, w.label) = 1.0;
            const ad::Value probs = t.softmax_rows(out);
            return t.scale(t.sum_all(t.mul(t.log(probs), t.constant(onehot))), -1.0);
        }
    }
    throw std::logic_error("window_loss: unhandled task");
}

TrainResult train(models::SequenceModel& model, const WindowedDataset& data,
                  const TrainConfig& cfg) {
    if (data.train.empty()) throw std::invalid_argument("train: no training windows");
    if (cfg.batch_size == 0) throw std::invalid_argument("train: batch_size must be positive");
    const std::vector<ad::Parameter*> params = model.parameters();
    AdamOptimizer opt(params, cfg.lr, 0.9, 0.999, 1e-8, cfg.clip_norm);
    RandomStream order(cfg.batch_seed);
    TrainResult res;
    res.loss_curve.reserve(cfg.steps);
    const auto start = std::chrono::steady_clock::now();
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        std::vector<std::size_t> batch(cfg.batch_size);
        for (std::size_t b = 0; b < cfg.batch_size; ++b)
            batch[b] = static_cast<std::size_t>(order.uniform_index(data.train.size()));
        ad::Tape t;
        ad::Value total{};
        for (std::size_t b = 0; b < cfg.batch_size; ++b) {
            const ad::Value li = window_loss(t, model, data.train[batch[b]], data);
            total = total.valid() ? t.add(total, li) : li;
        }
        const ad::Value loss = t.scale(total, 1.0 / static_cast<double>(cfg.batch_size));
        const double lv = t.val(loss)(0, 0);
        if (!std::isfinite(lv)) {
            std::ostringstream os;
            os << "train: non-finite loss at step " << step + 1;
            throw std::runtime_error(os.str());
        }
        for (ad::Parameter* p : params) p->zero_grad();
        t.backward(loss);
        opt.step();
        res.loss_curve.push_back(lv);
    }
    const auto stop = std::chrono::steady_clock::now();
    res.wall_seconds = std::chrono::duration<double>(stop - start).count();
    return res;
}

EvalResult evaluate(const models::SequenceModel& m, const std::vector<Window>& split,
                    const WindowedDataset& data, bool mase_insample) {
    EvalResult r;
    if (split.empty()) return r;
    switch (data.task) {
        case models::Task::Forecast: {
            double mse_acc = 0.0, mase_acc = 0.0;
            std::size_t mase_n = 0;
            for (const Window& w : split) {
                const Matrix pred =
                    unflatten_row(m.predict(w.lookback), w.target.rows(), w.target.cols());
                mse_acc += metric_mse(pred, w.target);
                try {
                    mase_acc += mase_insample
                                    ? metric_mase_insample(pred, w.target, w.lookback)
                                    : metric_mase(pred, w.target);
                    ++mase_n;
                } catch (const std::domain_error&) {
                    ++r.mase_undefined_windows;
                }
            }
            r.mse = mse_acc / static_cast<double>(split.size());
            if (mase_n > 0) {
                r.mase = mase_acc / static_cast<double>(mase_n);
                r.mase_defined = true;
            }
            break;
        }
        case models::Task::Imputation: {
            double err = 0.0, count = 0.0;
            for (const Window& w : split) {
                const Matrix pred =
                    unflatten_row(m.predict(w.lookback), w.target.rows(), w.target.cols());
                for (std::size_t i = 0; i < w.mask.size(); ++i)
                    if (w.mask.data()[i] > 0.0) {
                        const double d = pred.data()[i] - w.target.data()[i];
                        err += d * d;
                        count += 1.0;
                    }
            }
            r.mse = count > 0.0 ? err / count : 0.0;
            break;
        }
        case models::Task::Classification: {
            std::vector<std::size_t> pred, truth;
            pred.reserve(split.size());
            truth.reserve(split.size());
            for (const Window& w : split) {
                const Matrix logits = m.predict(w.lookback);
                std::size_t best = 0;
                for (std::size_t k = 1; k < logits.cols(); ++k)
                    if (logits(0, k) > logits(0, best)) best = k;
                pred.push_back(best);
                truth.push_back(w.label);
            }
            r.accuracy = metric_accuracy(pred, truth);
            double f1_acc = 0.0;
            for (std::size_t k = 0; k < data.n_classes; ++k)
                f1_acc += metric_f1(pred, truth, k);
            r.f1 = f1_acc / static_cast<double>(data.n_classes);
            break;
        }
    }
    return r;
}

// ---- experiment configuration --------------------------------------------

namespace {

std::uint64_t parse_u64(const std::string& v) {
    const std::string t = trim(v);
    if (t.empty()) throw std::invalid_argument("expected an unsigned integer");
    for (char ch : t)
        if (!std::isdigit(static_cast<unsigned char>(ch)))
            throw std::invalid_argument("expected an unsigned integer, got '" + t + "'");
    return std::stoull(t);
}

std::size_t parse_size(const std::string& v) {
    return static_cast<std::size_t>(parse_u64(v));
}

double parse_real(const std::string& v) {
    const std::string t = trim(v);
    if (t.empty()) throw std::invalid_argument("expected a number");
    char* end = nullptr;
    const double d = std::strtod(t.c_str(), &end);
    if (end != t.c_str() + t.size())
        throw std::invalid_argument("expected a number, got '" + t + "'");
    return d;
}

bool parse_bool(const std::string& v) {
    const std::string t = trim(v);
    if (t == "true" || t == "1") return true;
    if (t == "false" || t == "0") return false;
    throw std::invalid_argument("expected true or false, got '" + t + "'");
}

std::vector<double> parse_reals(const std::string& v) {
    std::vector<double> out;
    for (const std::string& part : split_on(v, ',')) out.push_back(parse_real(part));
    if (out.empty()) throw std::invalid_argument("expected a comma-separated list");
    return out;
}

void expect_one_of(const std::string& what, const std::string& v,
                   std::initializer_list<const char*> allowed) {
    for (const char* a : allowed)
        if (v == a) return;
    std::ostringstream os;
    os << what << " must be one of {";
    bool first = true;
    for (const char* a : allowed) {
        if (!first) os << ", ";
        os << a;
        first = false;
    }
    os << "}, got '" << v << "'";
    throw std::invalid_argument(os.str());
}

using Setter = std::function<void(ExperimentConfig&, const std::string&)>;

const std::map<std::string, Setter>& key_table() {
    static const std::map<std::string, Setter> table = {
        {"task",
         [](ExperimentConfig& e, const std::string& v) {
             expect_one_of("task", v, {"forecast", "imputation", "classification"});
             e.task = v;
         }},
        {"template",
         [](ExperimentConfig& e, const std::string& v) {
             expect_one_of("template", v,
                           {"attention", "patchtst", "itransformer", "moderntcn", "mamba",
                            "smamba"});
             e.template_name = v;
         }},
        {"mixer",
         [](ExperimentConfig& e, const std::string& v) {
             expect_one_of("mixer", v,
                           {"attention", "toeplitz", "autocorrelation", "semiseparable",
                            "masked_lowrank", "dense"});
             e.mixer_family = v;
         }},
        {"dataset",
         [](ExperimentConfig& e, const std::string& v) {
             expect_one_of("dataset", v, {"ar", "toy", "csv"});
             e.dataset = v;
         }},
        {"csv_path", [](ExperimentConfig& e, const std::string& v) { e.csv_path = v; }},
        {"lookback", [](ExperimentConfig& e, const std::string& v) { e.L = parse_size(v); }},
        {"channels", [](ExperimentConfig& e, const std::string& v) { e.C = parse_size(v); }},
        {"horizon",
         [](ExperimentConfig& e, const std::string& v) { e.horizon = parse_size(v); }},
        {"n_classes",
         [](ExperimentConfig& e, const std::string& v) { e.n_classes = parse_size(v); }},
        {"embed_dim", [](ExperimentConfig& e, const std::string& v) { e.D = parse_size(v); }},
        {"heads", [](ExperimentConfig& e, const std::string& v) { e.H = parse_size(v); }},
        {"blocks",
         [](ExperimentConfig& e, const std::string& v) { e.blocks = parse_size(v); }},
        {"n_windows",
         [](ExperimentConfig& e, const std::string& v) { e.n_windows = parse_size(v); }},
        {"ar_coeffs",
         [](ExperimentConfig& e, const std::string& v) { e.ar_coeffs = parse_reals(v); }},
        {"ar_noise",
         [](ExperimentConfig& e, const std::string& v) { e.ar_noise = parse_real(v); }},
        {"toy_noise",
         [](ExperimentConfig& e, const std::string& v) { e.toy_noise = parse_real(v); }},
        {"mask_frac",
         [](ExperimentConfig& e, const std::string& v) { e.mask_frac = parse_real(v); }},
        {"lr", [](ExperimentConfig& e, const std::string& v) { e.lr = parse_real(v); }},
        {"steps", [](ExperimentConfig& e, const std::string& v) { e.steps = parse_size(v); }},
        {"batch_size",
         [](ExperimentConfig& e, const std::string& v) { e.batch_size = parse_size(v); }},
        {"dense_init",
         [](ExperimentConfig& e, const std::string& v) {
             expect_one_of("dense_init", v, {"zero", "scaled", "distill"});
             e.dense_init = v;
         }},
        {"causal_dense",
         [](ExperimentConfig& e, const std::string& v) { e.causal_dense = parse_bool(v); }},
        {"jd_finetune",
         [](ExperimentConfig& e, const std::string& v) { e.jd_finetune = parse_bool(v); }},
        {"mase_insample",
         [](ExperimentConfig& e, const std::string& v) { e.mase_insample = parse_bool(v); }},
        {"seed", [](ExperimentConfig& e, const std::string& v) { e.seed = parse_u64(v); }},
        {"train_frac",
         [](ExperimentConfig& e, const std::string& v) { e.train_frac = parse_real(v); }},
        {"val_frac",
         [](ExperimentConfig& e, const std::string& v) { e.val_frac = parse_real(v); }},
        {"test_frac",
         [](ExperimentConfig& e, const std::string& v) { e.test_frac = parse_real(v); }},
        {"patch_len",
         [](ExperimentConfig& e, const std::string& v) { e.patch_len = parse_size(v); }},
        {"kernel_size",
         [](ExperimentConfig& e, const std::string& v) { e.kernel_size = parse_size(v); }},
        {"dilation",
         [](ExperimentConfig& e, const std::string& v) { e.dilation = parse_size(v); }},
        {"state_size",
         [](ExperimentConfig& e, const std::string& v) { e.state_size = parse_size(v); }},
        {"mlr_hidden",
         [](ExperimentConfig& e, const std::string& v) { e.mlr_hidden = parse_size(v); }},
        {"ffn_hidden",
         [](ExperimentConfig& e, const std::string& v) { e.ffn_hidden = parse_size(v); }},
        {"ssm_variant",
         [](ExperimentConfig& e, const std::string& v) {
             expect_one_of("ssm_variant", v, {"zoh", "direct"});
             e.ssm_variant = v;
         }},
    };
    return table;
}

}  // namespace

ExperimentConfig parse_config_text(const std::string& text, const std::string& origin) {
    ExperimentConfig ec;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        std::ostringstream where;
        where << origin << ": line " << lineno << ": ";
        if (eq == std::string::npos)
            throw std::invalid_argument(where.str() + "expected key=value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw std::invalid_argument(where.str() + "empty key");
        try {
            set_config_key(ec, key, value);
        } catch (const std::exception& e) {
            throw std::invalid_argument(where.str() + e.what());
        }
    }
    return ec;
}

ExperimentConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str(), path);
}

void set_config_key(ExperimentConfig& ec, const std::string& key,
                    const std::string& value) {
    const auto& table = key_table();
    const auto it = table.find(key);
    if (it == table.end()) throw std::invalid_argument("unknown key '" + key + "'");
    it->second(ec, value);
    ec.raw[key] = value;
}

models::ModelConfig model_config_from(const ExperimentConfig& ec) {
    models::ModelShape shape{ec.L, ec.C, ec.D, ec.H};
    models::TaskSpec task;
    if (ec.task == "forecast") {
        task = {models::Task::Forecast, ec.horizon, 0};
    } else if (ec.task == "imputation") {
        task = {models::Task::Imputation, 0, 0};
    } else if (ec.task == "classification") {
        task = {models::Task::Classification, 0, ec.n_classes};
    } else {
        throw std::invalid_argument("unknown task '" + ec.task + "'");
    }
    models::ModelConfig cfg = models::template_config(ec.template_name, shape, task);

    // Template-level knobs.
    if (cfg.front_end == models::FrontEnd::Patchify) cfg.patch_len = ec.patch_len;
    if (cfg.block.mixer.family == mix::MixerFamily::Toeplitz) {
        cfg.block.mixer.kernel_size = ec.kernel_size;
        cfg.block.mixer.dilation = ec.dilation;
    }
    if (cfg.block.mixer.family == mix::MixerFamily::Semiseparable) {
        cfg.block.mixer.state_size = ec.state_size;
        cfg.block.mixer.ssm_variant =
            ec.ssm_variant == "direct" ? mix::SsmVariant::Direct : mix::SsmVariant::ZeroOrderHold;
    }
    if (ec.ffn_hidden > 0) cfg.block.ffn_hidden = ec.ffn_hidden;
    cfg.n_blocks = ec.blocks;
    cfg.causal_dense = ec.causal_dense;

    // Mixer-family override: rebuild the MixerSpec from scratch for the new family.
    if (!ec.mixer_family.empty()) {
        mix::MixerSpec ms;
        const std::size_t D = cfg.shape.D, H = cfg.shape.H;
        if (ec.mixer_family == "attention") {
            ms.family = mix::MixerFamily::Attention;
            ms.heads = H;
            ms.head_width = D / H;
        } else if (ec.mixer_family == "toeplitz") {
            ms.family = mix::MixerFamily::Toeplitz;
            ms.heads = H;
            ms.kernel_size = ec.kernel_size;
            ms.dilation = ec.dilation;
        } else if (ec.mixer_family == "autocorrelation") {
            ms.family = mix::MixerFamily::Autocorrelation;
            ms.heads = H;
            ms.head_width = D / H;
        } else if (ec.mixer_family == "semiseparable") {
            ms.family = mix::MixerFamily::Semiseparable;
            ms.heads = D;  // one scalar head per embedding channel
            ms.head_width = 1;
            ms.state_size = ec.state_size;
            ms.ssm_variant = ec.ssm_variant == "direct" ? mix::SsmVariant::Direct
                                                        : mix::SsmVariant::ZeroOrderHold;
        } else if (ec.mixer_family == "masked_lowrank") {
            ms.family = mix::MixerFamily::MaskedLowRank;
            ms.heads = 1;
            ms.hidden = ec.mlr_hidden;
            ms.on_width = true;
        } else if (ec.mixer_family == "dense") {
            ms.family = mix::MixerFamily::Dense;
            ms.heads = H;
        } else {
            throw std::invalid_argument("unknown mixer family '" + ec.mixer_family + "'");
        }
        cfg.block.mixer = ms;
    }
    cfg.block.mixer.mix_dim = cfg.block.mixer.on_width ? cfg.shape.D : cfg.tokens();
    return cfg;
}

WindowedDataset build_dataset(const ExperimentConfig& ec) {
    const std::uint64_t data_seed =
        derive_seed(ec.seed, static_cast<std::uint64_t>(SeedStream::DataGen));
    const SplitFractions splits{ec.train_frac, ec.val_frac, ec.test_frac};
    if (ec.task == "classification") {
        if (ec.dataset != "toy")
            throw std::invalid_argument("classification runs on dataset=toy");
        return gen_classification_toy(ec.L, ec.C, ec.n_classes, ec.n_windows, ec.toy_noise,
                                      data_seed, splits);
    }
    if (ec.dataset == "toy")
        throw std::invalid_argument("dataset=toy is classification-only");
    WindowedDataset d;
    if (ec.dataset == "ar") {
        d = gen_synthetic_ar(ec.L, ec.C, ec.horizon, ec.ar_coeffs, ec.ar_noise,
                             ec.n_windows, data_seed, splits);
    } else if (ec.dataset == "csv") {
        if (ec.csv_path.empty()) throw std::invalid_argument("dataset=csv needs csv_path");
        d = load_csv(ec.csv_path, ec.L, ec.horizon, splits);
    } else {
        throw std::invalid_argument("unknown dataset '" + ec.dataset + "'");
    }
    if (ec.task == "imputation")
        mask_for_imputation(d, ec.mask_frac, derive_seed(data_seed, 1));
    return d;
}

models::DenseInit dense_init_from(const std::string& name) {
    if (name == "zero") return models::DenseInit::Zero;
    if (name == "scaled") return models::DenseInit::ScaledUniform;
    if (name == "distill") return models::DenseInit::Distill;
    throw std::invalid_argument("unknown dense_init '" + name + "'");
}

std::vector<Matrix> calibration_windows(const WindowedDataset& data) {
    std::vector<Matrix> out;
    const std::size_t n = std::min<std::size_t>(32, data.train.size());
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(data.train[i].lookback);
    return out;
}

// ---- experiment pipeline -------------------------------------------------

namespace {

ArmReport arm_from(const models::SequenceModel& m, const TrainResult& tr,
                   const EvalResult& val, const EvalResult& test) {
    ArmReport a;
    a.present = true;
    a.param_count = m.param_count();
    a.wall_seconds = tr.wall_seconds;
    a.loss_curve = tr.loss_curve;
    a.val_metrics = val;
    a.test_metrics = test;
    return a;
}

}  // namespace

ExperimentReport run_experiment(const ExperimentConfig& ec, ExperimentModels* out) {
    ExperimentReport r;
    r.seed = ec.seed;
    r.config_echo = ec.raw;
    try {
        const WindowedDataset data = build_dataset(ec);
        const models::ModelConfig mcfg = model_config_from(ec);
        auto orig = std::make_unique<models::SequenceModel>(models::build_model(
            mcfg, derive_seed(ec.seed, static_cast<std::uint64_t>(SeedStream::InitOrig))));
        const std::vector<Matrix> calib = calibration_windows(data);

        TrainConfig tc;
        tc.lr = ec.lr;
        tc.steps = ec.steps;
        tc.batch_size = ec.batch_size;
        tc.batch_seed = derive_seed(ec.seed, static_cast<std::uint64_t>(SeedStream::BatchOrder));

        // Default: both arms start untrained on identical budgets. With
        // jd_finetune the dense arm is converted from the *trained* original
        // instead (distill then fine-tune); the original's trajectory is
        // unaffected because each train() call replays the same batch stream.
        std::unique_ptr<models::SequenceModel> jd;
        TrainResult tr_orig, tr_jd;
        const std::uint64_t dense_seed =
            derive_seed(ec.seed, static_cast<std::uint64_t>(SeedStream::InitDense));
        const models::DenseInit dinit = dense_init_from(ec.dense_init);
        if (ec.jd_finetune) {
            tr_orig = train(*orig, data, tc);
            jd = std::make_unique<models::SequenceModel>(
                models::convert_to_dense(*orig, dinit, calib, dense_seed));
            tr_jd = train(*jd, data, tc);
        } else {
            jd = std::make_unique<models::SequenceModel>(
                models::convert_to_dense(*orig, dinit, calib, dense_seed));
            tr_orig = train(*orig, data, tc);
            tr_jd = train(*jd, data, tc);  // same batch stream
        }

        r.orig = arm_from(*orig, tr_orig, evaluate(*orig, data.val, data, ec.mase_insample),
                          evaluate(*orig, data.test, data, ec.mase_insample));
        r.jd = arm_from(*jd, tr_jd, evaluate(*jd, data.val, data, ec.mase_insample),
                        evaluate(*jd, data.test, data, ec.mase_insample));

        const std::vector<analysis::MixerSnapshot> so = analysis::snapshot_mixers(*orig, calib);
        const std::vector<analysis::MixerSnapshot> sj = analysis::snapshot_mixers(*jd, calib);
        if (so.size() != sj.size())
            throw std::logic_error("mixer snapshot count mismatch between arms");
        for (std::size_t i = 0; i < so.size(); ++i) {
            MixerComparison mc;
            mc.label = so[i].label;
            mc.sim = analysis::compare_mixers(so[i].mean_mixer, sj[i].mean_mixer);
            mc.rank_orig = analysis::rank_report(so[i].mean_mixer, so[i].spec);
            mc.rank_jd = analysis::rank_report(sj[i].mean_mixer, sj[i].spec);
            r.mixers.push_back(std::move(mc));
        }
        if (out) {
            out->orig = std::move(orig);
            out->jd = std::move(jd);
        }
        r.complete = true;
    } catch (const std::exception& e) {
        r.complete = false;
        r.error = e.what();
    }
    return r;
}

ExperimentReport run_single_arm(const ExperimentConfig& ec, ExperimentModels* out) {
    ExperimentReport r;
    r.seed = ec.seed;
    r.config_echo = ec.raw;
    try {
        const WindowedDataset data = build_dataset(ec);
        const models::ModelConfig mcfg = model_config_from(ec);
        auto orig = std::make_unique<models::SequenceModel>(models::build_model(
            mcfg, derive_seed(ec.seed, static_cast<std::uint64_t>(SeedStream::InitOrig))));
        TrainConfig tc;
        tc.lr = ec.lr;
        tc.steps = ec.steps;
        tc.batch_size = ec.batch_size;
        tc.batch_seed = derive_seed(ec.seed, static_cast<std::uint64_t>(SeedStream::BatchOrder));
        const TrainResult tr = train(*orig, data, tc);
        r.orig = arm_from(*orig, tr, evaluate(*orig, data.val, data, ec.mase_insample),
                          evaluate(*orig, data.test, data, ec.mase_insample));
        if (out) out->orig = std::move(orig);
        r.complete = true;
    } catch (const std::exception& e) {
        r.complete = false;
        r.error = e.what();
    }
    return r;
}

// ---- report serialization -------------------------------------------------

namespace {

// JSON has no literals for the IEEE specials, so they travel as strings.
json enc_double(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0.0 ? "inf" : "-inf";
    return v;
}

double dec_double(const json& j) {
    if (j.is_string()) {
        const std::string s = j.get<std::string>();
        if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
        if (s == "inf") return std::numeric_limits<double>::infinity();
        if (s == "-inf") return -std::numeric_limits<double>::infinity();
        throw std::runtime_error("report: bad numeric string '" + s + "'");
    }
    return j.get<double>();
}

json eval_to_json(const EvalResult& e) {
    return json{{"mse", enc_double(e.mse)},
                {"mase", enc_double(e.mase)},
                {"mase_defined", e.mase_defined},
                {"mase_undefined_windows", e.mase_undefined_windows},
                {"accuracy", enc_double(e.accuracy)},
                {"f1", enc_double(e.f1)}};
}

EvalResult eval_from_json(const json& j) {
    EvalResult e;
    e.mse = dec_double(j.at("mse"));
    e.mase = dec_double(j.at("mase"));
    e.mase_defined = j.at("mase_defined").get<bool>();
    e.mase_undefined_windows = j.at("mase_undefined_windows").get<std::size_t>();
    e.accuracy = dec_double(j.at("accuracy"));
    e.f1 = dec_double(j.at("f1"));
    return e;
}

json arm_to_json(const ArmReport& a) {
    json curve = json::array();
    for (double v : a.loss_curve) curve.push_back(enc_double(v));
    return json{{"present", a.present},
                {"param_count", a.param_count},
                {"wall_seconds", enc_double(a.wall_seconds)},
                {"loss_curve", std::move(curve)},
                {"val", eval_to_json(a.val_metrics)},
                {"test", eval_to_json(a.test_metrics)}};
}

ArmReport arm_from_json(const json& j) {
    ArmReport a;
    a.present = j.at("present").get<bool>();
    a.param_count = j.at("param_count").get<std::size_t>();
    a.wall_seconds = dec_double(j.at("wall_seconds"));
    for (const json& v : j.at("loss_curve")) a.loss_curve.push_back(dec_double(v));
    a.val_metrics = eval_from_json(j.at("val"));
    a.test_metrics = eval_from_json(j.at("test"));
    return a;
}

json rank_to_json(const analysis::RankReport& r) {
    return json{{"rank", r.rank},
                {"bound", r.bound},
                {"within", r.within},
                {"sigma_max", enc_double(r.sigma_max)},
                {"nuclear", enc_double(r.nuclear)}};
}

analysis::RankReport rank_from_json(const json& j) {
    analysis::RankReport r;
    r.rank = j.at("rank").get<std::size_t>();
    r.bound = j.at("bound").get<std::size_t>();
    r.within = j.at("within").get<bool>();
    r.sigma_max = dec_double(j.at("sigma_max"));
    r.nuclear = dec_double(j.at("nuclear"));
    return r;
}

json mixer_to_json(const MixerComparison& m) {
    return json{{"label", m.label},
                {"psnr", enc_double(m.sim.psnr.value)},
                {"psnr_rescaled", m.sim.psnr.rescaled},
                {"jsd", enc_double(m.sim.jsd)},
                {"frobenius_distance", enc_double(m.sim.frobenius_distance)},
                {"rank_orig", rank_to_json(m.rank_orig)},
                {"rank_jd", rank_to_json(m.rank_jd)}};
}

MixerComparison mixer_from_json(const json& j) {
    MixerComparison m;
    m.label = j.at("label").get<std::string>();
    m.sim.psnr.value = dec_double(j.at("psnr"));
    m.sim.psnr.rescaled = j.at("psnr_rescaled").get<bool>();
    m.sim.jsd = dec_double(j.at("jsd"));
    m.sim.frobenius_distance = dec_double(j.at("frobenius_distance"));
    m.rank_orig = rank_from_json(j.at("rank_orig"));
    m.rank_jd = rank_from_json(j.at("rank_jd"));
    return m;
}

}  // namespace

std::string report_to_json_text(const ExperimentReport& r) {
    json j;
    j["schema_version"] = r.schema_version;
    j["seed"] = r.seed;
    j["complete"] = r.complete;
    j["error"] = r.error;
    j["config"] = r.config_echo;
    j["arms"] = json{{"orig", arm_to_json(r.orig)}, {"jd", arm_to_json(r.jd)}};
    json mixers = json::array();
    for (const MixerComparison& m : r.mixers) mixers.push_back(mixer_to_json(m));
    j["mixers"] = std::move(mixers);
    return j.dump(2) + "\n";
}

ExperimentReport report_from_json_text(const std::string& text) {
    const json j = json::parse(text);
    ExperimentReport r;
    r.schema_version = j.at("schema_version").get<int>();
    if (r.schema_version != 1)
        throw std::runtime_error("report: unsupported schema_version " +
                                 std::to_string(r.schema_version));
    r.seed = j.at("seed").get<std::uint64_t>();
    r.complete = j.at("complete").get<bool>();
    r.error = j.at("error").get<std::string>();
    r.config_echo = j.at("config").get<std::map<std::string, std::string>>();
    r.orig = arm_from_json(j.at("arms").at("orig"));
    r.jd = arm_from_json(j.at("arms").at("jd"));
    for (const json& m : j.at("mixers")) r.mixers.push_back(mixer_from_json(m));
    return r;
}

void write_report(const ExperimentReport& r, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write report to " + path);
    out << report_to_json_text(r);
    if (!out) throw std::runtime_error("failed writing report to " + path);
}

ExperimentReport read_report(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open report " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return report_from_json_text(buf.str());
}

}  // namespace mixlab::harness
