#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "mixlab/analysis.hpp"
#include "mixlab/matrix.hpp"
#include "mixlab/models.hpp"
#include "mixlab/rng.hpp"

namespace mixlab::harness {

// ---- datasets ------------------------------------------------------------

struct Window {
    Matrix lookback;       // L x C model input (already masked for imputation)
    Matrix target;         // T x C horizon, or the full L x C window for imputation
    Matrix mask;           // imputation only: 1 marks a held-out entry
    std::size_t label = 0; // classification only
};

struct WindowedDataset {
    models::Task task = models::Task::Forecast;
    std::size_t L = 0, C = 0, horizon = 0, n_classes = 0;
    std::vector<Window> train, val, test;
};

struct SplitFractions {
    double train = 0.7, val = 0.1, test = 0.2;
};

// Largest characteristic-root modulus of z^p - c1 z^{p-1} - ... - cp
// (Durand-Kerner iteration).
double max_char_root_modulus(const std::vector<double>& coeffs);

// One AR(p) realization: initial state drawn N(0,1), then
// x_t = sum_k c_k x_{t-k} + noise_std * eps_t. A 256-step burn-in precedes the
// returned samples when noise_std > 0 (with no innovations the transient is
// the signal, so noiseless series start at the initial state).
std::vector<double> gen_ar_series(const std::vector<double>& coeffs, double noise_std,
                                  std::size_t len, RandomStream& rs);

// Channels are independent AR(p) processes with shared coefficients; windows
// slide with stride 1 inside each split segment, so none crosses a boundary.
// Coefficients with a characteristic root outside the closed unit disk
// (tolerance 1e-9) are rejected.
WindowedDataset gen_synthetic_ar(std::size_t L, std::size_t C, std::size_t T,
                                 const std::vector<double>& coeffs, double noise_std,
                                 std::size_t n_windows, std::uint64_t seed,
                                 const SplitFractions& splits = {});

// Class k is a pure sinusoid at frequency k+1 cycles per window with a fixed
// per-channel phase offset, plus Gaussian noise; labels are balanced
// round-robin within each split.
WindowedDataset gen_classification_toy(std::size_t L, std::size_t C,
                                       std::size_t n_classes, std::size_t n_windows,
                                       double noise_std, std::uint64_t seed,
                                       const SplitFractions& splits = {});

// Header row, first column a timestamp (ignored), remaining columns numeric
// channels. Stride-1 windows inside each split; per-channel standardization
// from train-split statistics only (constant columns fall back to divisor 1).
// Parse errors carry 1-based line numbers.
WindowedDataset load_csv(const std::string& path, std::size_t L, std::size_t T,
                         const SplitFractions& splits);

// Converts forecast-style windows into an imputation task: `mask_frac` of the
// lookback entries (Bernoulli per entry) are zeroed in the input, the intact
// window becomes the target and the mask marks what was hidden.
void mask_for_imputation(WindowedDataset& data, double mask_frac, std::uint64_t seed);

// ---- metrics -------------------------------------------------------------

double metric_mse(const Matrix& pred, const Matrix& truth);
// Mean |error| over the window divided by the mean one-step |difference| of
// the truth inside the same window (T >= 2). A constant truth channel makes
// the scale zero: reported by throwing std::domain_error, never as 0.
double metric_mase(const Matrix& pred, const Matrix& truth);
// Conventional variant: the scale comes from a separate history series.
double metric_mase_insample(const Matrix& pred, const Matrix& truth,
                            const Matrix& history);
double metric_accuracy(const std::vector<std::size_t>& pred,
                       const std::vector<std::size_t>& truth);
double metric_f1(const std::vector<std::size_t>& pred,
                 const std::vector<std::size_t>& truth, std::size_t positive);

// ---- training ------------------------------------------------------------

struct TrainConfig {
    double lr = 1e-3;
    std::size_t steps = 1000;
    std::size_t batch_size = 16;
    double clip_norm = 1.0;      // global-norm gradient clip; <= 0 disables
    std::uint64_t batch_seed = 0;
};

struct TrainResult {
    std::vector<double> loss_curve;  // one entry per step
    double wall_seconds = 0.0;
};

class AdamOptimizer {
public:
    AdamOptimizer(std::vector<ad::Parameter*> params, double lr, double beta1 = 0.9,
                  double beta2 = 0.999, double eps = 1e-8, double clip_norm = 1.0);
    void step();  // consumes current gradients
    double last_grad_norm() const { return last_norm_; }

private:
    std::vector<ad::Parameter*> params_;
    std::vector<Matrix> m_, v_;
    double lr_, beta1_, beta2_, eps_, clip_;
    std::size_t t_ = 0;
    double last_norm_ = 0.0;
};

// Task loss for one window on the tape: mean squared error over the target
// entries (masked entries only for imputation), softmax cross-entropy for
// classification.
ad::Value window_loss(ad::Tape& t, const models::SequenceModel& m, const Window& w,
                      const WindowedDataset& data);

// Adam with bias correction and global-norm clipping; batches are drawn with
// replacement from a dedicated stream, so two arms sharing `batch_seed` see
// the same windows in the same order. A non-finite loss aborts with the step
// index in the exception message.
TrainResult train(models::SequenceModel& model, const WindowedDataset& data,
                  const TrainConfig& cfg);

struct EvalResult {
    double mse = 0.0;
    double mase = 0.0;
    std::size_t mase_undefined_windows = 0;
    bool mase_defined = false;
    double accuracy = 0.0;
    double f1 = 0.0;  // macro-averaged over classes
};

EvalResult evaluate(const models::SequenceModel& m, const std::vector<Window>& split,
                    const WindowedDataset& data, bool mase_insample);

// ---- experiment pipeline -------------------------------------------------

struct ExperimentConfig {
    // every accepted key=value pair, echoed verbatim into the report
    std::map<std::string, std::string> raw;

    std::string task = "forecast";  // forecast | imputation | classification
    std::string template_name = "attention";
    std::string mixer_family;       // empty = template default
    std::string dataset = "ar";     // ar | toy | csv
    std::string csv_path;
    std::size_t L = 32, C = 2, horizon = 8, n_classes = 3;
    std::size_t D = 8, H = 2, blocks = 2;
    std::size_t n_windows = 2000;
    std::vector<double> ar_coeffs = {0.6, 0.25};
    double ar_noise = 0.1;
    double toy_noise = 0.1;
    double mask_frac = 0.25;
    double lr = 1e-3;
    std::size_t steps = 3000;
    std::size_t batch_size = 16;
    std::string dense_init = "distill";  // zero | scaled | distill
    bool causal_dense = false;
    // Convert the dense arm from the trained original (distill-then-finetune)
    // instead of training both arms from scratch on identical budgets.
    bool jd_finetune = false;
    bool mase_insample = false;
    std::uint64_t seed = 1;
    double train_frac = 0.7, val_frac = 0.1, test_frac = 0.2;
    std::size_t patch_len = 4, kernel_size = 3, dilation = 1, state_size = 4;
    std::size_t mlr_hidden = 16, ffn_hidden = 0;  // 0 = 2*D
    std::string ssm_variant = "zoh";              // zoh | direct
};

// key=value lines, '#' comments, unknown keys rejected with their line number.
ExperimentConfig parse_config_text(const std::string& text, const std::string& origin);
ExperimentConfig parse_config_file(const std::string& path);
// Re-applies one key (used for CLI overrides); validates like the file parser.
void set_config_key(ExperimentConfig& ec, const std::string& key,
                    const std::string& value);

models::ModelConfig model_config_from(const ExperimentConfig& ec);
WindowedDataset build_dataset(const ExperimentConfig& ec);
models::DenseInit dense_init_from(const std::string& name);

struct ArmReport {
    bool present = false;
    std::size_t param_count = 0;
    double wall_seconds = 0.0;
    std::vector<double> loss_curve;
    EvalResult val_metrics, test_metrics;
};

struct MixerComparison {
    std::string label;
    analysis::SimilarityReport sim;  // orig snapshot vs dense snapshot
    analysis::RankReport rank_orig, rank_jd;
};

struct ExperimentReport {
    int schema_version = 1;
    std::uint64_t seed = 0;
    bool complete = false;
    std::string error;
    std::map<std::string, std::string> config_echo;
    ArmReport orig, jd;
    std::vector<MixerComparison> mixers;
};

struct ExperimentModels {
    std::unique_ptr<models::SequenceModel> orig, jd;
};

// Builds both arms from one master seed and trains them on the same batch
// stream under the same budget: by default the dense arm is converted from
// the untrained original so both train from scratch; with jd_finetune it is
// converted from the trained original instead and then fine-tuned. Evaluates,
// snapshots the mixers and compares them. Failures mark the report incomplete
// instead of losing it. When `out` is given the trained models are handed
// back for checkpointing.
ExperimentReport run_experiment(const ExperimentConfig& ec,
                                ExperimentModels* out = nullptr);
// Original arm only (no conversion); used by the `train` subcommand.
ExperimentReport run_single_arm(const ExperimentConfig& ec,
                                ExperimentModels* out = nullptr);

// First min(32, train windows) lookbacks; the calibration batch for
// distillation and snapshots.
std::vector<Matrix> calibration_windows(const WindowedDataset& data);

std::string report_to_json_text(const ExperimentReport& r);
ExperimentReport report_from_json_text(const std::string& text);
void write_report(const ExperimentReport& r, const std::string& path);
ExperimentReport read_report(const std::string& path);

}  // namespace mixlab::harness
