#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mixlab/harness.hpp"

namespace fs = std::filesystem;
using namespace mixlab;

namespace {

struct CliOverrides {
    std::string config_path;
    std::string out_dir = "out";
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::string template_name;
    std::string mixer;
    std::string dense_init;
    bool causal_dense = false;
};

// Every subcommand accepts the same flag set; overrides are re-applied through
// the config validator so they land in the report's config echo.
void add_common_flags(CLI::App* cmd, CliOverrides& ov) {
    cmd->add_option("--config", ov.config_path, "key=value config file");
    cmd->add_option("--seed", ov.seed, "master seed (overrides the config)")
        ->trigger_on_parse()
        ->each([&ov](const std::string&) { ov.seed_set = true; });
    cmd->add_option("--out", ov.out_dir, "output directory")->capture_default_str();
    cmd->add_option("--template", ov.template_name,
                    "model template: attention|patchtst|itransformer|moderntcn|mamba|smamba");
    cmd->add_option("--mixer", ov.mixer,
                    "mixer family override: attention|toeplitz|autocorrelation|"
                    "semiseparable|masked_lowrank|dense");
    cmd->add_option("--dense-init", ov.dense_init, "dense arm init: zero|scaled|distill");
    cmd->add_flag("--causal-dense", ov.causal_dense,
                  "mask dense mixers lower-triangular");
}

harness::ExperimentConfig build_config(const CliOverrides& ov) {
    harness::ExperimentConfig ec;
    if (!ov.config_path.empty()) ec = harness::parse_config_file(ov.config_path);
    if (ov.seed_set) harness::set_config_key(ec, "seed", std::to_string(ov.seed));
    if (!ov.template_name.empty())
        harness::set_config_key(ec, "template", ov.template_name);
    if (!ov.mixer.empty()) harness::set_config_key(ec, "mixer", ov.mixer);
    if (!ov.dense_init.empty()) harness::set_config_key(ec, "dense_init", ov.dense_init);
    if (ov.causal_dense) harness::set_config_key(ec, "causal_dense", "true");
    return ec;
}

std::string out_path(const CliOverrides& ov, const std::string& name) {
    fs::create_directories(ov.out_dir);
    return (fs::path(ov.out_dir) / name).string();
}

// One continuous AR segment long enough for the configured window count,
// written in the format load_csv reads back.
int cmd_gen(const CliOverrides& ov) {
    const harness::ExperimentConfig ec = build_config(ov);
    if (ec.dataset != "ar")
        throw std::invalid_argument(
            "gen writes AR series only; dataset=" + ec.dataset + " has no CSV form");
    const double modulus = harness::max_char_root_modulus(ec.ar_coeffs);
    if (modulus > 1.0 + 1e-9)
        throw std::invalid_argument("gen: unstable AR coefficients (largest root " +
                                    std::to_string(modulus) + ")");
    const std::size_t len = ec.n_windows + ec.L + ec.horizon - 1;
    RandomStream rs(derive_seed(ec.seed, static_cast<std::uint64_t>(SeedStream::DataGen)));
    std::vector<std::vector<double>> channels(ec.C);
    for (std::size_t c = 0; c < ec.C; ++c)
        channels[c] = harness::gen_ar_series(ec.ar_coeffs, ec.ar_noise, len, rs);

    const std::string path = out_path(ov, "synthetic.csv");
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "timestamp";
    for (std::size_t c = 0; c < ec.C; ++c) out << ",ch" << c;
    out << "\n";
    char buf[64];
    for (std::size_t t = 0; t < len; ++t) {
        out << t;
        for (std::size_t c = 0; c < ec.C; ++c) {
            std::snprintf(buf, sizeof(buf), "%.17g", channels[c][t]);
            out << ',' << buf;
        }
        out << "\n";
    }
    if (!out) throw std::runtime_error("failed writing " + path);
    std::cout << path << "\n";
    return 0;
}

int finish_report(const harness::ExperimentReport& rep, const std::string& path) {
    harness::write_report(rep, path);
    std::cout << path << "\n";
    if (!rep.complete) {
        std::cerr << "error: " << rep.error << "\n";
        return 1;
    }
    return 0;
}

int cmd_train(const CliOverrides& ov) {
    const harness::ExperimentConfig ec = build_config(ov);
    harness::ExperimentModels trained;
    const harness::ExperimentReport rep = harness::run_single_arm(ec, &trained);
    if (trained.orig) models::save_checkpoint(*trained.orig, out_path(ov, "model.ckpt"));
    return finish_report(rep, out_path(ov, "report.json"));
}

int cmd_compare(const CliOverrides& ov) {
    const harness::ExperimentConfig ec = build_config(ov);
    harness::ExperimentModels trained;
    const harness::ExperimentReport rep = harness::run_experiment(ec, &trained);
    if (trained.orig) models::save_checkpoint(*trained.orig, out_path(ov, "orig.ckpt"));
    if (trained.jd) models::save_checkpoint(*trained.jd, out_path(ov, "jd.ckpt"));
    return finish_report(rep, out_path(ov, "report.json"));
}

// Rebuilds both arms from the config, loads their checkpoints from --out.
struct LoadedArms {
    std::unique_ptr<models::SequenceModel> orig, jd;
    std::vector<Matrix> calib;
};

LoadedArms load_arms(const harness::ExperimentConfig& ec, const CliOverrides& ov) {
    LoadedArms arms;
    const harness::WindowedDataset data = harness::build_dataset(ec);
    arms.calib = harness::calibration_windows(data);
    const models::ModelConfig mcfg = harness::model_config_from(ec);
    arms.orig = std::make_unique<models::SequenceModel>(models::build_model(
        mcfg, derive_seed(ec.seed, static_cast<std::uint64_t>(SeedStream::InitOrig))));
    models::load_checkpoint(*arms.orig, (fs::path(ov.out_dir) / "orig.ckpt").string());
    arms.jd = std::make_unique<models::SequenceModel>(models::convert_to_dense(
        *arms.orig, models::DenseInit::Zero, {},
        derive_seed(ec.seed, static_cast<std::uint64_t>(SeedStream::InitDense))));
    models::load_checkpoint(*arms.jd, (fs::path(ov.out_dir) / "jd.ckpt").string());
    return arms;
}

nlohmann::json enc_double(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0.0 ? "inf" : "-inf";
    return v;
}

nlohmann::json rank_json(const analysis::RankReport& r) {
    return {{"rank", r.rank},
            {"bound", r.bound},
            {"within", r.within},
            {"sigma_max", enc_double(r.sigma_max)},
            {"nuclear", enc_double(r.nuclear)}};
}

int cmd_analyze(const CliOverrides& ov) {
    const harness::ExperimentConfig ec = build_config(ov);
    const LoadedArms arms = load_arms(ec, ov);
    const auto so = analysis::snapshot_mixers(*arms.orig, arms.calib);
    const auto sj = analysis::snapshot_mixers(*arms.jd, arms.calib);

    // One reference stream across all handles, in handle order.
    RandomStream ref(derive_seed(ec.seed, static_cast<std::uint64_t>(SeedStream::Reference)));
    nlohmann::json mixers = nlohmann::json::array();
    for (std::size_t i = 0; i < so.size(); ++i) {
        const analysis::SimilarityReport sim =
            analysis::compare_mixers(so[i].mean_mixer, sj[i].mean_mixer);
        const Matrix random = random_uniform(so[i].mean_mixer.rows(),
                                             so[i].mean_mixer.cols(), ref, 0.0, 1.0);
        mixers.push_back(
            {{"label", so[i].label},
             {"psnr", enc_double(sim.psnr.value)},
             {"psnr_rescaled", sim.psnr.rescaled},
             {"jsd", enc_double(sim.jsd)},
             {"frobenius_distance", enc_double(sim.frobenius_distance)},
             {"jsd_vs_random", enc_double(analysis::jsd(so[i].mean_mixer, random))},
             {"rank_orig", rank_json(analysis::rank_report(so[i].mean_mixer, so[i].spec))},
             {"rank_jd", rank_json(analysis::rank_report(sj[i].mean_mixer, sj[i].spec))}});
    }
    nlohmann::json j{{"schema_version", 1}, {"seed", ec.seed}, {"mixers", mixers}};
    const std::string path = out_path(ov, "analysis.json");
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << j.dump(2) << "\n";
    if (!out) throw std::runtime_error("failed writing " + path);
    std::cout << path << "\n";
    return 0;
}

int cmd_export(const CliOverrides& ov) {
    const harness::ExperimentConfig ec = build_config(ov);
    const LoadedArms arms = load_arms(ec, ov);
    const auto so = analysis::snapshot_mixers(*arms.orig, arms.calib);
    const auto sj = analysis::snapshot_mixers(*arms.jd, arms.calib);
    std::size_t files = 0;
    auto dump = [&](const char* arm, const std::vector<analysis::MixerSnapshot>& snaps) {
        for (const analysis::MixerSnapshot& s : snaps) {
            const std::string stem = std::string(arm) + "_" + s.label;
            analysis::export_heatmap_pgm(s.mean_mixer, out_path(ov, stem + ".pgm"));
            analysis::export_heatmap_csv(s.mean_mixer, out_path(ov, stem + ".csv"));
            files += 2;
        }
    };
    dump("orig", so);
    dump("jd", sj);
    std::cout << ov.out_dir << ": " << files << " heatmap files\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Sequence-mixer laboratory: structured mixers vs. trained dense ones"};
    app.require_subcommand(1);

    CliOverrides ov;
    CLI::App* gen = app.add_subcommand("gen", "write a synthetic AR dataset as CSV");
    CLI::App* train = app.add_subcommand("train", "train the original arm only");
    CLI::App* compare =
        app.add_subcommand("compare", "train original and dense arms, report both");
    CLI::App* analyze =
        app.add_subcommand("analyze", "similarity and rank diagnostics from checkpoints");
    CLI::App* exp = app.add_subcommand("export", "mixer heatmaps (PGM and CSV)");
    for (CLI::App* cmd : {gen, train, compare, analyze, exp}) add_common_flags(cmd, ov);

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen(ov);
        if (train->parsed()) return cmd_train(ov);
        if (compare->parsed()) return cmd_compare(ov);
        if (analyze->parsed()) return cmd_analyze(ov);
        if (exp->parsed()) return cmd_export(ov);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
