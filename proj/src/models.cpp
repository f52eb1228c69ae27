#include "mixlab/models.hpp"

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <utility>

#include "mixlab/rng.hpp"

namespace mixlab::models {

namespace {

using ad::Parameter;
using ad::Tape;
using ad::Value;

std::string block_prefix(std::size_t b, bool rev) {
    std::string s = "block" + std::to_string(b);
    if (rev) s += ".rev";
    return s;
}

// ---- constant matrices used to express structure as matmuls --------------

Matrix one_hot_row(std::size_t i, std::size_t n) {
    Matrix m(1, n);
    m(0, i) = 1.0;
    return m;
}

Matrix one_hot_col(std::size_t i, std::size_t n) {
    Matrix m(n, 1);
    m(i, 0) = 1.0;
    return m;
}

// rows x D mask selecting the column slice [h*P, (h+1)*P).
Matrix head_mask(std::size_t rows, std::size_t D, std::size_t h, std::size_t P) {
    Matrix m(rows, D);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = h * P; j < (h + 1) * P; ++j) m(r, j) = 1.0;
    return m;
}

Matrix lower_mask(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j <= i; ++j) m(i, j) = 1.0;
    return m;
}

Matrix flip_matrix(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, n - 1 - i) = 1.0;
    return m;
}

// (S Z)[i] = Z[i - off]; rows with i < off are zero.
Matrix shift_down(std::size_t n, std::size_t off) {
    Matrix m(n, n);
    for (std::size_t i = off; i < n; ++i) m(i, i - off) = 1.0;
    return m;
}

// (S Z)[t] = Z[t + off]; rows with t + off >= n are zero.
Matrix shift_up(std::size_t n, std::size_t off) {
    Matrix m(n, n);
    for (std::size_t t = 0; t + off < n; ++t) m(t, t + off) = 1.0;
    return m;
}

Matrix lag_indicator(std::size_t n, std::size_t tau) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if ((i >= j ? i - j : j - i) == tau) m(i, j) = 1.0;
    return m;
}

// Strided-window selector: (S Z)[r] = Z[r*stride + k].
Matrix stage_selector(std::size_t n_out, std::size_t n_in, std::size_t stride,
                      std::size_t k) {
    Matrix m(n_out, n_in);
    for (std::size_t r = 0; r < n_out; ++r)
        if (r * stride + k < n_in) m(r, r * stride + k) = 1.0;
    return m;
}

Matrix column_of(const Matrix& X, std::size_t c) {
    Matrix m(X.rows(), 1);
    for (std::size_t i = 0; i < X.rows(); ++i) m(i, 0) = X(i, c);
    return m;
}

Matrix uniform_fan(std::size_t rows, std::size_t cols, RandomStream& rs,
                   std::size_t fan_in) {
    double b = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return random_uniform(rows, cols, rs, -b, b);
}

// ---- taped building blocks ----------------------------------------------

// softplus(x) = relu(x) + log(1 + exp(x - 2 relu(x))); the exp argument is
// always <= 0, so this never overflows and stays on the primitive set.
Value softplus(Tape& t, Value x) {
    Value r = t.relu(x);
    Value neg = t.sub(x, t.scale(r, 2.0));
    return t.add(r, t.log(t.add_scalar(t.exp(neg), 1.0)));
}

Value apply_norm(Tape& t, NormKind k, Value v) {
    switch (k) {
        case NormKind::LayerNorm:
            return t.norm_rows(v);
        case NormKind::BatchNormPerChannel:
            return t.transpose(t.norm_rows(t.transpose(v)));
        case NormKind::None:
            return v;
    }
    throw std::logic_error("unknown norm kind");
}

// Recurrent selective-state mixer over all channels at once. One head per
// channel d (head width 1): y[t,d] = sum_n C(t,n) * h_t(d,n) with
// h_t = a_bar_t .* h_{t-1} + b_bar_t * u_t, written with one-hot row selectors
// so the whole scan stays on the tape.
Value ssm_taped(Tape& t, const ModelConfig& cfg, const BlockParams& bp, Value V) {
    const mix::MixerSpec& ms = cfg.block.mixer;
    const std::size_t n = ms.mix_dim;
    const std::size_t D = cfg.shape.D;
    const bool zoh = ms.ssm_variant == mix::SsmVariant::ZeroOrderHold;

    Value A_eff = zoh ? t.scale(t.exp(t.param(*bp.A_log)), -1.0)  // A = -exp(A_log) < 0
                      : t.param(*bp.A_direct);                    // D x N
    Value B = t.matmul(V, t.param(*bp.W_B));   // n x N
    Value Cm = t.matmul(V, t.param(*bp.W_C));  // n x N
    Value delta;                               // n x D
    if (zoh) {
        delta = t.matmul(V, t.param(*bp.W_delta));
        if (ms.positive_delta) delta = softplus(t, delta);
    }
    Value ones_col = t.constant(Matrix(D, 1, 1.0));

    Value h, Y;
    bool first = true;
    for (std::size_t step = 0; step < n; ++step) {
        Value sel = t.constant(one_hot_row(step, n));
        Value b_row = t.matmul(sel, B);  // 1 x N
        Value u_row = t.matmul(sel, V);  // 1 x D
        Value abar, bbar;                // D x N each
        if (zoh) {
            Value dt_col = t.transpose(t.matmul(sel, delta));  // D x 1
            Value xm = t.mul(A_eff, dt_col);
            abar = t.exp(xm);
            bbar = t.mul(t.phi1(xm), t.matmul(dt_col, b_row));
        } else {
            abar = A_eff;
            bbar = t.matmul(ones_col, b_row);
        }
        Value p = t.mul(bbar, t.transpose(u_row));  // b_bar_t * u_t, per channel
        Value g = first ? p : t.add(p, h);          // h_{t-1} + b_bar_t u_t
        Value y_col = t.matmul(g, t.transpose(t.matmul(sel, Cm)));  // D x 1
        Value placed = t.matmul(t.constant(one_hot_col(step, n)), t.transpose(y_col));
        Y = first ? placed : t.add(Y, placed);
        h = first ? p : t.add(t.mul(abar, h), p);
        first = false;
    }
    return Y;
}

Value mixer_taped(Tape& t, const ModelConfig& cfg, const BlockParams& bp, Value V) {
    const mix::MixerSpec& ms = cfg.block.mixer;
    const std::size_t n = ms.mix_dim;
    const std::size_t D = cfg.shape.D;

    switch (ms.family) {
        case mix::MixerFamily::Attention: {
            const std::size_t Pv = D / ms.heads;
            Value acc;
            for (std::size_t h = 0; h < ms.heads; ++h) {
                Value Q = t.matmul(V, t.param(*bp.W_Q[h]));
                Value K = t.matmul(V, t.param(*bp.W_K[h]));
                double inv = 1.0 / std::sqrt(static_cast<double>(ms.head_width));
                Value M = t.softmax_rows(t.scale(t.matmul(Q, t.transpose(K)), inv));
                Value Vh = t.mul(V, t.constant(head_mask(n, D, h, Pv)));
                Value Yh = t.matmul(M, Vh);
                acc = h ? t.add(acc, Yh) : Yh;
            }
            return acc;
        }
        case mix::MixerFamily::Toeplitz: {
            const std::size_t Pv = D / ms.heads;
            const std::size_t K = ms.kernel_size;
            Value acc;
            for (std::size_t h = 0; h < ms.heads; ++h) {
                Value Vh = t.mul(V, t.constant(head_mask(n, D, h, Pv)));
                Value hacc;
                for (std::size_t k = 0; k < K; ++k) {
                    Value wk = t.matmul(t.constant(one_hot_row(k, K)),
                                        t.param(*bp.kernels[h]));  // 1 x 1
                    Value term = t.mul(
                        t.matmul(t.constant(shift_down(n, k * ms.dilation)), Vh), wk);
                    hacc = k ? t.add(hacc, term) : term;
                }
                acc = h ? t.add(acc, hacc) : hacc;
            }
            return acc;
        }
        case mix::MixerFamily::Autocorrelation: {
            const std::size_t Pv = D / ms.heads;
            Value acc;
            for (std::size_t h = 0; h < ms.heads; ++h) {
                Value Q = t.matmul(V, t.param(*bp.W_Q[h]));
                Value K = t.matmul(V, t.param(*bp.W_K[h]));
                Value M;
                for (std::size_t tau = 0; tau < n; ++tau) {
                    Value prod = t.mul(t.matmul(t.constant(shift_up(n, tau)), Q), K);
                    Value a = t.scale(t.sum_all(prod),
                                      1.0 / static_cast<double>(ms.head_width));
                    Value term = t.mul(t.constant(lag_indicator(n, tau)), a);
                    M = tau ? t.add(M, term) : term;
                }
                Value Vh = t.mul(V, t.constant(head_mask(n, D, h, Pv)));
                Value Yh = t.matmul(M, Vh);
                acc = h ? t.add(acc, Yh) : Yh;
            }
            return acc;
        }
        case mix::MixerFamily::Semiseparable:
            return ssm_taped(t, cfg, bp, V);
        case mix::MixerFamily::MaskedLowRank:
            // ReLU(V W_up) W_down == applying the masked low-rank matrix to
            // each row on the feature axis.
            return t.matmul(t.relu(t.matmul(V, t.param(*bp.mix_up))),
                            t.param(*bp.mix_down));
        case mix::MixerFamily::Dense: {
            if (ms.on_width) {
                Value M = t.param(*bp.M_dense[0]);
                return t.transpose(t.matmul(M, t.transpose(V)));
            }
            const std::size_t Pv = D / ms.heads;
            Value acc;
            for (std::size_t h = 0; h < ms.heads; ++h) {
                Value M = t.param(*bp.M_dense[h]);
                if (cfg.causal_dense) M = t.mul(M, t.constant(lower_mask(n)));
                Value Yh = t.matmul(M, t.mul(V, t.constant(head_mask(n, D, h, Pv))));
                acc = h ? t.add(acc, Yh) : Yh;
            }
            return acc;
        }
    }
    throw std::logic_error("unknown mixer family");
}

Value block_taped(Tape& t, const ModelConfig& cfg, const BlockParams& bp, Value V) {
    Value mixed = mixer_taped(t, cfg, bp, V);
    Value s1 = cfg.block.residual ? t.add(V, mixed) : mixed;
    s1 = apply_norm(t, cfg.block.norm, s1);
    Value ff = t.matmul(t.relu(t.matmul(s1, t.param(*bp.ffn_up))),
                        t.param(*bp.ffn_down));
    Value s2 = cfg.block.residual ? t.add(s1, ff) : ff;
    return apply_norm(t, cfg.block.norm, s2);
}

Value apply_layer(Tape& t, const SequenceModel& m, std::size_t layer, Value V) {
    Value f = block_taped(t, m.cfg, m.blocks[layer], V);
    if (!m.cfg.bidirectional) return f;
    Value flip = t.constant(flip_matrix(m.cfg.tokens()));
    Value r = block_taped(t, m.cfg, m.blocks_rev[layer], t.matmul(flip, V));
    return t.add(f, t.matmul(flip, r));
}

// Strided conv stages with per-feature standardization, one variable at a time.
Value stages_taped(Tape& t, const SequenceModel& m, Value col) {
    std::size_t n_in = m.cfg.shape.L;
    Value Z = col;
    for (std::size_t s = 0; s < m.cfg.stages.size(); ++s) {
        const ConvStage& st = m.cfg.stages[s];
        const std::size_t n_out = n_in / st.stride;
        Value acc;
        for (std::size_t k = 0; k < st.kernel; ++k) {
            Value sel = t.constant(stage_selector(n_out, n_in, st.stride, k));
            Value term = t.matmul(t.matmul(sel, Z), t.param(*m.stage_taps[s][k]));
            acc = k ? t.add(acc, term) : term;
        }
        Z = t.transpose(t.norm_rows(t.transpose(acc)));
        n_in = n_out;
    }
    return Z;
}

// out = flatten(V) * W_head, written as a sum over token rows against the
// per-token slices of W_head.
Value head_taped(Tape& t, const std::vector<Parameter*>& slices, Value V,
                 std::size_t tokens) {
    Value out;
    for (std::size_t tok = 0; tok < tokens; ++tok) {
        Value row = t.matmul(t.constant(one_hot_row(tok, tokens)), V);
        Value term = t.matmul(row, t.param(*slices[tok]));
        out = tok ? t.add(out, term) : term;
    }
    return out;
}

// Scatter a per-variable 1 x w output row into the interleaved full output
// (full index = position * C + variable).
Matrix variable_placement(std::size_t w, std::size_t C, std::size_t c) {
    Matrix m(w, w * C);
    for (std::size_t i = 0; i < w; ++i) m(i, i * C + c) = 1.0;
    return m;
}

void validate_config(const ModelConfig& cfg) {
    const ModelShape& sh = cfg.shape;
    if (sh.L == 0 || sh.C == 0 || sh.D == 0 || sh.H == 0)
        throw std::invalid_argument("model shape entries must be positive");
    if (sh.D % sh.H != 0)
        throw std::invalid_argument("head count must divide embedding width");
    if (cfg.n_blocks == 0) throw std::invalid_argument("need at least one block");
    if (cfg.block.ffn_hidden == 0)
        throw std::invalid_argument("ffn hidden width must be positive");

    switch (cfg.task.task) {
        case Task::Forecast:
            if (cfg.task.horizon == 0)
                throw std::invalid_argument("forecast horizon must be positive");
            break;
        case Task::Classification:
            if (cfg.task.n_classes < 2)
                throw std::invalid_argument("need at least two classes");
            break;
        case Task::Imputation:
            break;
    }

    if (cfg.front_end == FrontEnd::Patchify) {
        if (cfg.patch_len == 0 || sh.L % cfg.patch_len != 0)
            throw std::invalid_argument("patch length must divide the lookback length");
    }
    if (cfg.front_end == FrontEnd::DownsampleEmbed) {
        if (cfg.stages.empty())
            throw std::invalid_argument("downsampling front end needs conv stages");
        std::size_t n = sh.L;
        for (const ConvStage& st : cfg.stages) {
            if (st.stride == 0 || st.kernel == 0)
                throw std::invalid_argument("conv stage kernel/stride must be positive");
            if (n % st.stride != 0)
                throw std::invalid_argument("conv stage stride must divide the length");
            std::size_t n_out = n / st.stride;
            if ((n_out - 1) * st.stride + st.kernel > n)
                throw std::invalid_argument("conv stage window overruns the sequence");
            n = n_out;
        }
    }

    const mix::MixerSpec& ms = cfg.block.mixer;
    const std::size_t expect = ms.on_width ? sh.D : cfg.tokens();
    if (ms.mix_dim != expect)
        throw std::invalid_argument("mixer dimension does not match the token count");
    switch (ms.family) {
        case mix::MixerFamily::Attention:
        case mix::MixerFamily::Autocorrelation:
            if (ms.heads != sh.H)
                throw std::invalid_argument("mixer head count must match the model");
            if (ms.head_width == 0)
                throw std::invalid_argument("attention head width must be positive");
            break;
        case mix::MixerFamily::Toeplitz:
            if (ms.heads != sh.H)
                throw std::invalid_argument("mixer head count must match the model");
            if (ms.kernel_size == 0 || ms.dilation == 0)
                throw std::invalid_argument("kernel size and dilation must be positive");
            if (ms.dilation * (ms.kernel_size - 1) >= ms.mix_dim)
                throw std::invalid_argument("dilated kernel span must stay below the length");
            break;
        case mix::MixerFamily::Semiseparable:
            if (ms.heads != sh.D)
                throw std::invalid_argument("state-space mixing uses one head per channel");
            if (ms.state_size == 0)
                throw std::invalid_argument("state size must be positive");
            break;
        case mix::MixerFamily::MaskedLowRank:
            if (!ms.on_width)
                throw std::invalid_argument("masked low-rank mixers act on the feature axis");
            if (ms.hidden == 0)
                throw std::invalid_argument("masked low-rank hidden width must be positive");
            break;
        case mix::MixerFamily::Dense:
            if (!ms.on_width && sh.D % ms.heads != 0)
                throw std::invalid_argument("dense head count must divide the width");
            break;
    }
}

std::size_t head_slice_width(const ModelConfig& cfg) {
    if (cfg.front_end != FrontEnd::DownsampleEmbed) return cfg.head_output_dim();
    switch (cfg.task.task) {
        case Task::Forecast: return cfg.task.horizon;
        case Task::Imputation: return cfg.shape.L;
        case Task::Classification: return cfg.task.n_classes;
    }
    throw std::logic_error("unknown task");
}

void allocate_block(SequenceModel& m, std::size_t b, bool rev, RandomStream& rs) {
    const ModelConfig& cfg = m.cfg;
    const mix::MixerSpec& ms = cfg.block.mixer;
    const std::size_t D = cfg.shape.D;
    const std::size_t N = ms.state_size;
    const std::string pre = block_prefix(b, rev);
    BlockParams bp;

    switch (ms.family) {
        case mix::MixerFamily::Attention:
        case mix::MixerFamily::Autocorrelation:
            for (std::size_t h = 0; h < ms.heads; ++h) {
                const std::string hp = pre + ".head" + std::to_string(h);
                bp.W_Q.push_back(m.add_param(hp + ".W_Q",
                                             uniform_fan(D, ms.head_width, rs, D)));
                bp.W_K.push_back(m.add_param(hp + ".W_K",
                                             uniform_fan(D, ms.head_width, rs, D)));
            }
            break;
        case mix::MixerFamily::Toeplitz:
            for (std::size_t h = 0; h < ms.heads; ++h) {
                const std::string hp = pre + ".head" + std::to_string(h);
                bp.kernels.push_back(m.add_param(
                    hp + ".kernel", uniform_fan(ms.kernel_size, 1, rs, ms.kernel_size)));
            }
            break;
        case mix::MixerFamily::Semiseparable:
            bp.W_B = m.add_param(pre + ".ssm.W_B", uniform_fan(D, N, rs, D));
            bp.W_C = m.add_param(pre + ".ssm.W_C", uniform_fan(D, N, rs, D));
            if (ms.ssm_variant == mix::SsmVariant::ZeroOrderHold) {
                bp.W_delta = m.add_param(pre + ".ssm.W_delta", uniform_fan(D, D, rs, D));
                bp.A_log = m.add_param(pre + ".ssm.A_log",
                                       random_uniform(D, N, rs, -0.5, 0.5));
            } else {
                bp.A_direct = m.add_param(pre + ".ssm.A",
                                          random_uniform(D, N, rs, -0.9, 0.9));
            }
            break;
        case mix::MixerFamily::MaskedLowRank:
            bp.mix_up = m.add_param(pre + ".mix.W_up", uniform_fan(D, ms.hidden, rs, D));
            bp.mix_down =
                m.add_param(pre + ".mix.W_down", uniform_fan(ms.hidden, D, rs, ms.hidden));
            break;
        case mix::MixerFamily::Dense: {
            const std::size_t count = ms.on_width ? 1 : ms.heads;
            for (std::size_t h = 0; h < count; ++h) {
                ad::Parameter p = mix::make_dense_mixer(
                    ms.mix_dim, mix::InitPolicy::scaled_uniform(), rs,
                    pre + ".head" + std::to_string(h) + ".M");
                bp.M_dense.push_back(m.add_param(p.name, std::move(p.value)));
            }
            break;
        }
    }

    const std::size_t U = cfg.block.ffn_hidden;
    bp.ffn_up = m.add_param(pre + ".ffn.W_up", uniform_fan(D, U, rs, D));
    bp.ffn_down = m.add_param(pre + ".ffn.W_down", uniform_fan(U, D, rs, U));
    (rev ? m.blocks_rev : m.blocks).push_back(bp);
}

void allocate_params(SequenceModel& m, RandomStream& rs) {
    const ModelConfig& cfg = m.cfg;
    const std::size_t D = cfg.shape.D;

    if (cfg.front_end == FrontEnd::DownsampleEmbed) {
        std::size_t width = 1;
        for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
            std::vector<Parameter*> taps;
            for (std::size_t k = 0; k < cfg.stages[s].kernel; ++k) {
                taps.push_back(m.add_param(
                    "embed.stage" + std::to_string(s) + ".tap" + std::to_string(k),
                    uniform_fan(width, D, rs, cfg.stages[s].kernel * width)));
            }
            m.stage_taps.push_back(std::move(taps));
            width = D;
        }
    } else {
        m.W_V = m.add_param("embed.W_V",
                            uniform_fan(cfg.embed_width(), D, rs, cfg.embed_width()));
        if (cfg.use_positions)
            m.W_pos = m.add_param("embed.W_pos", uniform_fan(cfg.tokens(), D, rs, D));
    }

    for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
        allocate_block(m, b, false, rs);
        if (cfg.bidirectional) allocate_block(m, b, true, rs);
    }

    const std::size_t tokens = cfg.tokens();
    const std::size_t w = head_slice_width(cfg);
    for (std::size_t tok = 0; tok < tokens; ++tok) {
        m.head_slices.push_back(m.add_param("head.t" + std::to_string(tok),
                                            uniform_fan(D, w, rs, tokens * D)));
    }
}

}  // namespace

// ---- ModelConfig ---------------------------------------------------------

std::size_t ModelConfig::tokens() const {
    switch (front_end) {
        case FrontEnd::LinearEmbed: return shape.L;
        case FrontEnd::Patchify: return patch_len ? shape.L / patch_len : 0;
        case FrontEnd::ChannelsAsTokens: return shape.C;
        case FrontEnd::DownsampleEmbed: {
            std::size_t n = shape.L;
            for (const ConvStage& st : stages) n = st.stride ? n / st.stride : 0;
            return n;
        }
    }
    throw std::logic_error("unknown front end");
}

std::size_t ModelConfig::embed_width() const {
    switch (front_end) {
        case FrontEnd::LinearEmbed: return shape.C;
        case FrontEnd::Patchify: return patch_len * shape.C;
        case FrontEnd::ChannelsAsTokens: return shape.L;
        case FrontEnd::DownsampleEmbed: return 1;
    }
    throw std::logic_error("unknown front end");
}

std::size_t ModelConfig::head_output_dim() const {
    switch (task.task) {
        case Task::Forecast: return task.horizon * shape.C;
        case Task::Imputation: return shape.L * shape.C;
        case Task::Classification: return task.n_classes;
    }
    throw std::logic_error("unknown task");
}

// ---- SequenceModel -------------------------------------------------------

ad::Parameter* SequenceModel::add_param(const std::string& name, Matrix value) {
    store_.push_back(std::make_unique<Parameter>(name, std::move(value)));
    return store_.back().get();
}

std::vector<Parameter*> SequenceModel::parameters() const {
    std::vector<Parameter*> out;
    out.reserve(store_.size());
    for (const auto& p : store_) out.push_back(p.get());
    return out;
}

ad::Parameter* SequenceModel::find(const std::string& name) const {
    for (const auto& p : store_)
        if (p->name == name) return p.get();
    return nullptr;
}

std::size_t SequenceModel::param_count() const {
    std::size_t n = 0;
    for (const auto& p : store_) n += p->value.size();
    return n;
}

Value SequenceModel::forward(Tape& t, const Matrix& X, ForwardTrace* trace) const {
    if (X.rows() != cfg.shape.L || X.cols() != cfg.shape.C) {
        std::ostringstream os;
        os << "forward: expected " << cfg.shape.L << "x" << cfg.shape.C
           << " input, got " << X.rows() << "x" << X.cols();
        throw std::invalid_argument(os.str());
    }
    const std::size_t tokens = cfg.tokens();

    if (cfg.front_end == FrontEnd::DownsampleEmbed) {
        const std::size_t C = cfg.shape.C;
        const std::size_t w = head_slice_width(cfg);
        Value out;
        for (std::size_t c = 0; c < C; ++c) {
            Value V = stages_taped(t, *this, t.constant(column_of(X, c)));
            for (std::size_t layer = 0; layer < cfg.n_blocks; ++layer) {
                if (trace && c == 0) trace->block_inputs.push_back(t.val(V));
                V = apply_layer(t, *this, layer, V);
            }
            Value hv = head_taped(t, head_slices, V, tokens);
            Value term = cfg.task.task == Task::Classification
                             ? hv
                             : t.matmul(hv, t.constant(variable_placement(w, C, c)));
            out = c ? t.add(out, term) : term;
        }
        if (cfg.task.task == Task::Classification)
            out = t.scale(out, 1.0 / static_cast<double>(C));
        return out;
    }

    Matrix X0;
    switch (cfg.front_end) {
        case FrontEnd::LinearEmbed: X0 = X; break;
        case FrontEnd::Patchify: X0 = patchify(X, cfg.patch_len); break;
        case FrontEnd::ChannelsAsTokens: X0 = transpose(X); break;
        case FrontEnd::DownsampleEmbed: break;  // handled above
    }
    Value E = t.matmul(t.constant(X0), t.param(*W_V));
    if (cfg.use_positions) E = t.add(E, t.param(*W_pos));
    Value V = E;
    for (std::size_t layer = 0; layer < cfg.n_blocks; ++layer) {
        if (trace) trace->block_inputs.push_back(t.val(V));
        V = apply_layer(t, *this, layer, V);
    }
    return head_taped(t, head_slices, V, tokens);
}

Matrix SequenceModel::predict(const Matrix& X) const {
    Tape t;
    return t.val(forward(t, X));
}

std::vector<MixerHandle> SequenceModel::mixer_handles() const {
    const mix::MixerSpec& ms = cfg.block.mixer;
    const std::size_t per_block =
        (ms.family == mix::MixerFamily::MaskedLowRank || ms.on_width) ? 1 : ms.heads;
    std::vector<MixerHandle> out;
    for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
        for (int rev = 0; rev < (cfg.bidirectional ? 2 : 1); ++rev) {
            for (std::size_t h = 0; h < per_block; ++h) {
                MixerHandle mh;
                mh.layer = b;
                mh.reverse = rev == 1;
                mh.head = h;
                mh.label = block_prefix(b, mh.reverse) + ".head" + std::to_string(h);
                mh.spec = ms;
                out.push_back(std::move(mh));
            }
        }
    }
    return out;
}

namespace {

Matrix materialize_from_input(const SequenceModel& m, const MixerHandle& h,
                              const Matrix& Vb) {
    const mix::MixerSpec& ms = m.cfg.block.mixer;
    const BlockParams& bp = h.reverse ? m.blocks_rev[h.layer] : m.blocks[h.layer];
    switch (ms.family) {
        case mix::MixerFamily::Attention: {
            mix::AttentionParams p{{bp.W_Q[h.head]->value}, {bp.W_K[h.head]->value}};
            return mix::build_attention_mixer(Vb, p, 0);
        }
        case mix::MixerFamily::Autocorrelation: {
            mix::AutocorrelationParams p{{bp.W_Q[h.head]->value},
                                         {bp.W_K[h.head]->value}};
            return mix::build_autocorr_mixer(Vb, p, 0);
        }
        case mix::MixerFamily::Toeplitz: {
            mix::ToeplitzParams p;
            const Matrix& k = bp.kernels[h.head]->value;
            p.kernel.assign(k.data(), k.data() + k.size());
            p.dilation = ms.dilation;
            return mix::build_toeplitz_mixer(p, ms.mix_dim);
        }
        case mix::MixerFamily::Semiseparable: {
            mix::SemiseparableParams p;
            p.variant = ms.ssm_variant;
            p.state_size = ms.state_size;
            p.W_B = bp.W_B->value;
            p.W_C = bp.W_C->value;
            p.positive_delta = ms.positive_delta;
            if (ms.ssm_variant == mix::SsmVariant::ZeroOrderHold) {
                p.W_delta = bp.W_delta->value;
                p.A = map(bp.A_log->value, [](double x) { return -std::exp(x); });
            } else {
                p.A = bp.A_direct->value;
            }
            return mix::build_semiseparable_mixer(p, Vb, h.head);
        }
        case mix::MixerFamily::MaskedLowRank: {
            mix::MaskedLowRankParams p{bp.mix_up->value, bp.mix_down->value};
            Matrix acc(m.cfg.shape.D, m.cfg.shape.D);
            for (std::size_t r = 0; r < Vb.rows(); ++r)
                acc = add(acc, mix::build_masked_lowrank_mixer(p, Vb, r));
            return scale(acc, 1.0 / static_cast<double>(Vb.rows()));
        }
        case mix::MixerFamily::Dense: {
            Matrix M = bp.M_dense[h.head]->value;
            if (!ms.on_width && m.cfg.causal_dense)
                M = hadamard(M, lower_mask(ms.mix_dim));
            return M;
        }
    }
    throw std::logic_error("unknown mixer family");
}

bool needs_trace(mix::MixerFamily f) {
    return f != mix::MixerFamily::Toeplitz && f != mix::MixerFamily::Dense;
}

}  // namespace

Matrix SequenceModel::materialize_mixer(const MixerHandle& h, const Matrix& X) const {
    Matrix Vb;
    if (needs_trace(cfg.block.mixer.family)) {
        ForwardTrace tr;
        Tape t;
        forward(t, X, &tr);
        Vb = tr.block_inputs.at(h.layer);
        if (h.reverse) Vb = reverse_rows(Vb);
    }
    return materialize_from_input(*this, h, Vb);
}

std::vector<Matrix> SequenceModel::materialize_all(const Matrix& X) const {
    ForwardTrace tr;
    if (needs_trace(cfg.block.mixer.family)) {
        Tape t;
        forward(t, X, &tr);
    }
    std::vector<Matrix> out;
    for (const MixerHandle& h : mixer_handles()) {
        Matrix Vb;
        if (!tr.block_inputs.empty()) {
            Vb = tr.block_inputs.at(h.layer);
            if (h.reverse) Vb = reverse_rows(Vb);
        }
        out.push_back(materialize_from_input(*this, h, Vb));
    }
    return out;
}

// ---- reference operations ------------------------------------------------

Matrix embed(const Matrix& X, const Matrix& W_V, const Matrix& W_pos) {
    return add(matmul(X, W_V), W_pos);
}

Matrix patchify(const Matrix& X, std::size_t patch_len) {
    if (patch_len == 0 || X.rows() % patch_len != 0)
        throw std::invalid_argument("patch length must divide the sequence length");
    const std::size_t P = X.rows() / patch_len;
    Matrix out(P, patch_len * X.cols());
    for (std::size_t p = 0; p < P; ++p)
        for (std::size_t j = 0; j < patch_len; ++j)
            for (std::size_t c = 0; c < X.cols(); ++c)
                out(p, j * X.cols() + c) = X(p * patch_len + j, c);
    return out;
}

std::vector<Matrix> downsample_embed(const Matrix& X, const std::vector<ConvStage>& stages,
                                     const std::vector<std::vector<Matrix>>& taps) {
    if (stages.size() != taps.size())
        throw std::invalid_argument("one tap set per conv stage required");
    std::vector<Matrix> out;
    for (std::size_t c = 0; c < X.cols(); ++c) {
        Matrix Z = column_of(X, c);
        for (std::size_t s = 0; s < stages.size(); ++s) {
            const ConvStage& st = stages[s];
            if (taps[s].size() != st.kernel)
                throw std::invalid_argument("tap count must equal the stage kernel size");
            if (st.stride == 0 || Z.rows() % st.stride != 0)
                throw std::invalid_argument("conv stage stride must divide the length");
            const std::size_t n_out = Z.rows() / st.stride;
            if ((n_out - 1) * st.stride + st.kernel > Z.rows())
                throw std::invalid_argument("conv stage window overruns the sequence");
            Matrix acc(n_out, taps[s][0].cols());
            for (std::size_t k = 0; k < st.kernel; ++k)
                acc = add(acc, matmul(matmul(stage_selector(n_out, Z.rows(), st.stride, k),
                                             Z),
                                      taps[s][k]));
            // Per-feature standardization over the token axis, matching the
            // on-tape transpose/norm_rows/transpose composition (eps 1e-5).
            for (std::size_t f = 0; f < acc.cols(); ++f) {
                double mean = 0.0;
                for (std::size_t r = 0; r < acc.rows(); ++r) mean += acc(r, f);
                mean /= static_cast<double>(acc.rows());
                double var = 0.0;
                for (std::size_t r = 0; r < acc.rows(); ++r) {
                    double d = acc(r, f) - mean;
                    var += d * d;
                }
                var /= static_cast<double>(acc.rows());
                double inv = 1.0 / std::sqrt(var + 1e-5);
                for (std::size_t r = 0; r < acc.rows(); ++r)
                    acc(r, f) = (acc(r, f) - mean) * inv;
            }
            Z = std::move(acc);
        }
        out.push_back(std::move(Z));
    }
    return out;
}

Matrix channel_mixer_ffn(const Matrix& Y, const Matrix& W_up, const Matrix& W_down) {
    Matrix h = matmul(Y, W_up);
    h = map(h, [](double x) { return x > 0.0 ? x : 0.0; });
    return matmul(h, W_down);
}

Matrix forward_block(const ModelConfig& cfg, const BlockParams& bp, const Matrix& V) {
    Tape t;
    return t.val(block_taped(t, cfg, bp, t.constant(V)));
}

Matrix bidirectional_compose(const ModelConfig& cfg, const BlockParams& bp,
                             const Matrix& V) {
    Matrix f = forward_block(cfg, bp, V);
    Matrix r = reverse_rows(forward_block(cfg, bp, reverse_rows(V)));
    return add(f, r);
}

// ---- construction --------------------------------------------------------

ModelConfig template_config(const std::string& name, const ModelShape& shape,
                            const TaskSpec& task) {
    ModelConfig cfg;
    cfg.template_name = name;
    cfg.shape = shape;
    cfg.task = task;
    cfg.n_blocks = 2;
    cfg.block.ffn_hidden = 2 * shape.D;
    cfg.block.norm = NormKind::LayerNorm;
    mix::MixerSpec& ms = cfg.block.mixer;

    if (name == "attention" || name == "patchtst" || name == "itransformer") {
        ms.family = mix::MixerFamily::Attention;
        ms.heads = shape.H;
        ms.head_width = shape.D / shape.H;
        if (name == "patchtst") {
            cfg.front_end = FrontEnd::Patchify;
            cfg.patch_len = 4;
        } else if (name == "itransformer") {
            cfg.front_end = FrontEnd::ChannelsAsTokens;
        } else {
            cfg.front_end = FrontEnd::LinearEmbed;
        }
        cfg.use_positions = true;
    } else if (name == "moderntcn") {
        cfg.front_end = FrontEnd::DownsampleEmbed;
        // One stride-2 stem stage. A deeper pyramid leaves so few tokens at
        // short lookbacks that per-channel normalization degenerates to a sign
        // function and mixer gradients vanish.
        cfg.stages = {{2, 2}};
        cfg.use_positions = false;
        cfg.block.norm = NormKind::BatchNormPerChannel;
        ms.family = mix::MixerFamily::Toeplitz;
        ms.heads = shape.H;
        ms.kernel_size = 3;
        ms.dilation = 1;
    } else if (name == "mamba" || name == "smamba") {
        cfg.front_end = FrontEnd::LinearEmbed;
        cfg.use_positions = false;
        cfg.bidirectional = name == "smamba";
        cfg.shape.H = shape.D;  // one head per channel
        ms.family = mix::MixerFamily::Semiseparable;
        ms.heads = shape.D;
        ms.head_width = 1;
        ms.state_size = 4;
        ms.ssm_variant = mix::SsmVariant::ZeroOrderHold;
        ms.positive_delta = true;
    } else {
        throw std::invalid_argument(
            "unknown template '" + name +
            "' (known: attention, patchtst, itransformer, moderntcn, mamba, smamba)");
    }
    ms.mix_dim = cfg.tokens();
    return cfg;
}

SequenceModel build_model(const ModelConfig& cfg, std::uint64_t init_seed) {
    validate_config(cfg);
    SequenceModel m;
    m.cfg = cfg;
    RandomStream rs(init_seed);
    allocate_params(m, rs);
    return m;
}

SequenceModel convert_to_dense(const SequenceModel& src, DenseInit init,
                               const std::vector<Matrix>& calibration,
                               std::uint64_t seed) {
    if (init == DenseInit::Distill && calibration.empty())
        throw std::invalid_argument("distillation needs at least one calibration window");

    ModelConfig cfg = src.cfg;
    cfg.block.mixer.family = mix::MixerFamily::Dense;
    SequenceModel m = build_model(cfg, seed);

    // Copy everything that is not a dense mixer from the source by name.
    for (Parameter* p : m.parameters()) {
        if (p->name.size() >= 2 && p->name.compare(p->name.size() - 2, 2, ".M") == 0)
            continue;
        Parameter* srcp = src.find(p->name);
        if (srcp == nullptr)
            throw std::logic_error("conversion lost parameter " + p->name);
        p->value = srcp->value;
    }

    switch (init) {
        case DenseInit::ScaledUniform:
            break;  // keep the build-time draw
        case DenseInit::Zero:
            for (const MixerHandle& h : m.mixer_handles()) {
                Parameter* p = m.find(h.label + ".M");
                p->value = Matrix(p->value.rows(), p->value.cols());
            }
            break;
        case DenseInit::Distill: {
            std::vector<MixerHandle> src_handles = src.mixer_handles();
            std::vector<MixerHandle> dst_handles = m.mixer_handles();
            if (src_handles.size() != dst_handles.size())
                throw std::logic_error("mixer count changed during conversion");
            // Toeplitz and dense mixers do not depend on the window, so the
            // materialization is copied verbatim; averaging identical matrices
            // would only add accumulation round-off. The input-dependent
            // families take the mean over the calibration batch.
            const mix::MixerFamily fam = src.cfg.block.mixer.family;
            const bool input_independent =
                fam == mix::MixerFamily::Toeplitz || fam == mix::MixerFamily::Dense;
            for (std::size_t i = 0; i < src_handles.size(); ++i) {
                Matrix acc;
                if (input_independent) {
                    acc = src.materialize_mixer(src_handles[i], calibration.front());
                } else {
                    for (const Matrix& X : calibration) {
                        Matrix M = src.materialize_mixer(src_handles[i], X);
                        acc = acc.size() ? add(acc, M) : M;
                    }
                    acc = scale(acc, 1.0 / static_cast<double>(calibration.size()));
                }
                m.find(dst_handles[i].label + ".M")->value = acc;
            }
            break;
        }
    }
    return m;
}

// ---- checkpoints ---------------------------------------------------------

namespace {
constexpr char kMagic[8] = {'M', 'X', 'L', 'C', 'K', 'P', 'T', '1'};

template <typename T>
void write_pod(std::ofstream& f, T v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& f) {
    T v{};
    f.read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
}
}  // namespace

void save_checkpoint(const SequenceModel& model, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    f.write(kMagic, sizeof(kMagic));
    write_pod<std::uint64_t>(f, model.parameters().size());
    for (const Parameter* p : model.parameters()) {
        write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(p->name.size()));
        f.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
        write_pod<std::uint64_t>(f, p->value.rows());
        write_pod<std::uint64_t>(f, p->value.cols());
        f.write(reinterpret_cast<const char*>(p->value.data()),
                static_cast<std::streamsize>(p->value.size() * sizeof(double)));
    }
    if (!f) throw std::runtime_error("short write to checkpoint: " + path);
}

void load_checkpoint(SequenceModel& model, const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[8];
    f.read(magic, sizeof(magic));
    if (!f || std::string(magic, 8) != std::string(kMagic, 8))
        throw std::runtime_error("not a checkpoint file: " + path);
    const std::uint64_t count = read_pod<std::uint64_t>(f);
    std::map<std::string, Matrix> tensors;
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint32_t len = read_pod<std::uint32_t>(f);
        std::string name(len, '\0');
        f.read(name.data(), len);
        const std::uint64_t rows = read_pod<std::uint64_t>(f);
        const std::uint64_t cols = read_pod<std::uint64_t>(f);
        if (!f) throw std::runtime_error("truncated checkpoint: " + path);
        Matrix m(rows, cols);
        f.read(reinterpret_cast<char*>(m.data()),
               static_cast<std::streamsize>(m.size() * sizeof(double)));
        if (!f) throw std::runtime_error("truncated checkpoint: " + path);
        tensors.emplace(std::move(name), std::move(m));
    }
    for (Parameter* p : model.parameters()) {
        auto it = tensors.find(p->name);
        if (it == tensors.end())
            throw std::runtime_error("checkpoint is missing tensor " + p->name);
        if (it->second.rows() != p->value.rows() || it->second.cols() != p->value.cols()) {
            std::ostringstream os;
            os << "checkpoint tensor " << p->name << " has shape " << it->second.rows()
               << "x" << it->second.cols() << ", expected " << p->value.rows() << "x"
               << p->value.cols();
            throw std::runtime_error(os.str());
        }
        p->value = it->second;
        tensors.erase(it);
    }
    if (!tensors.empty())
        throw std::runtime_error("checkpoint has unknown tensor " +
                                 tensors.begin()->first);
}

}  // namespace mixlab::models
