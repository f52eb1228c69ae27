#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "mixlab/autodiff.hpp"
#include "mixlab/matrix.hpp"
#include "mixlab/mixers.hpp"

namespace mixlab::models {

enum class FrontEnd { LinearEmbed, Patchify, DownsampleEmbed, ChannelsAsTokens };
enum class NormKind { LayerNorm, BatchNormPerChannel, None };
enum class Task { Forecast, Imputation, Classification };

struct ConvStage {
    std::size_t kernel = 2;
    std::size_t stride = 2;
};

struct ModelShape {
    std::size_t L = 0;  // lookback length
    std::size_t C = 0;  // input channels
    std::size_t D = 0;  // embedding width
    std::size_t H = 1;  // heads (must divide D)
};

struct TaskSpec {
    Task task = Task::Forecast;
    std::size_t horizon = 0;    // T, forecasting
    std::size_t n_classes = 0;  // classification
};

struct BlockConfig {
    mix::MixerSpec mixer;
    std::size_t ffn_hidden = 0;
    NormKind norm = NormKind::LayerNorm;
    bool residual = true;
};

struct ModelConfig {
    std::string template_name;
    FrontEnd front_end = FrontEnd::LinearEmbed;
    ModelShape shape;
    TaskSpec task;
    std::size_t n_blocks = 2;
    BlockConfig block;
    std::size_t patch_len = 0;         // Patchify front end
    std::vector<ConvStage> stages;     // DownsampleEmbed front end
    bool use_positions = true;         // add a learned position table in embed
    bool bidirectional = false;        // compose each layer forward + reversed
    bool causal_dense = false;         // dense mixers masked lower-triangular

    // Number of tokens the mixer acts on (L, L/patch_len, L', or C).
    std::size_t tokens() const;
    // Feature width entering the linear embedding (C, patch_len*C, or L).
    std::size_t embed_width() const;
    std::size_t head_output_dim() const;  // per-head-slice output width
};

// Per-block trainable tensors; raw pointers into the owning model's store.
struct BlockParams {
    std::vector<ad::Parameter*> W_Q, W_K;     // attention / autocorrelation, per head
    std::vector<ad::Parameter*> kernels;      // Toeplitz, per head (K x 1)
    ad::Parameter* W_B = nullptr;             // semiseparable
    ad::Parameter* W_C = nullptr;
    ad::Parameter* W_delta = nullptr;
    ad::Parameter* A_log = nullptr;           // ZeroOrderHold: A = -exp(A_log)
    ad::Parameter* A_direct = nullptr;        // Direct variant transitions
    ad::Parameter* mix_up = nullptr;          // masked low-rank mixer
    ad::Parameter* mix_down = nullptr;
    std::vector<ad::Parameter*> M_dense;      // dense mixers, per head
    ad::Parameter* ffn_up = nullptr;
    ad::Parameter* ffn_down = nullptr;
};

// Labels one materializable mixer inside a model.
struct MixerHandle {
    std::size_t layer = 0;
    bool reverse = false;  // the reversed-direction block of a bidirectional layer
    std::size_t head = 0;
    std::string label;
    mix::MixerSpec spec;
};

struct ForwardTrace {
    // Input to each layer's block(s), in layer order (variable 0 under the
    // per-variable front end). For bidirectional layers the reversed-direction
    // input is reverse_rows(block_inputs[layer]).
    std::vector<Matrix> block_inputs;
};

class SequenceModel {
public:
    ModelConfig cfg;

    // Front-end parameters.
    ad::Parameter* W_V = nullptr;
    ad::Parameter* W_pos = nullptr;
    std::vector<std::vector<ad::Parameter*>> stage_taps;  // DownsampleEmbed
    std::vector<BlockParams> blocks;
    std::vector<BlockParams> blocks_rev;  // bidirectional only
    std::vector<ad::Parameter*> head_slices;  // token t -> (D x out_dim) slice

    std::vector<ad::Parameter*> parameters() const;
    ad::Parameter* find(const std::string& name) const;
    std::size_t param_count() const;  // total scalar count

    // Builds the full forward graph; returns the 1 x out_dim prediction row.
    ad::Value forward(ad::Tape& t, const Matrix& X, ForwardTrace* trace = nullptr) const;
    Matrix predict(const Matrix& X) const;

    std::vector<MixerHandle> mixer_handles() const;
    // Explicit n x n mixer matrix for one handle at input X (input-dependent
    // families read the traced block input; masked low-rank averages over rows).
    Matrix materialize_mixer(const MixerHandle& h, const Matrix& X) const;
    std::vector<Matrix> materialize_all(const Matrix& X) const;

    ad::Parameter* add_param(const std::string& name, Matrix value);

private:
    std::vector<std::unique_ptr<ad::Parameter>> store_;
};

// ---- free-standing reference operations ---------------------------------

Matrix embed(const Matrix& X, const Matrix& W_V, const Matrix& W_pos);
// Rows of consecutive steps concatenated channel-major within each step;
// requires patch_len to divide L.
Matrix patchify(const Matrix& X, std::size_t patch_len);
// Stacked strided convolutions with per-feature normalization, applied to each
// variable independently; returns one L' x D matrix per variable.
std::vector<Matrix> downsample_embed(const Matrix& X, const std::vector<ConvStage>& stages,
                                     const std::vector<std::vector<Matrix>>& taps);
Matrix channel_mixer_ffn(const Matrix& Y, const Matrix& W_up, const Matrix& W_down);

// One mixing block over V (mix + residual + norm, then FFN + residual + norm).
Matrix forward_block(const ModelConfig& cfg, const BlockParams& bp, const Matrix& V);
// forward_block(V) + reverse(forward_block(reverse(V))) with shared parameters.
Matrix bidirectional_compose(const ModelConfig& cfg, const BlockParams& bp, const Matrix& V);

// ---- construction -------------------------------------------------------

// Known templates: attention, patchtst, itransformer, moderntcn, mamba, smamba.
ModelConfig template_config(const std::string& name, const ModelShape& shape,
                            const TaskSpec& task);
SequenceModel build_model(const ModelConfig& cfg, std::uint64_t init_seed);

enum class DenseInit { Zero, ScaledUniform, Distill };

// Same architecture with every mixer replaced by an unconstrained trainable
// matrix (head count preserved); non-mixer parameters copied from the source.
// Distill initializes each dense mixer to the source's materialized mixer,
// averaged over the calibration windows.
SequenceModel convert_to_dense(const SequenceModel& src, DenseInit init,
                               const std::vector<Matrix>& calibration,
                               std::uint64_t seed);

// ---- checkpoints --------------------------------------------------------

// Flat list of named tensors; see README for the byte layout.
void save_checkpoint(const SequenceModel& model, const std::string& path);
void load_checkpoint(SequenceModel& model, const std::string& path);

}  // namespace mixlab::models
