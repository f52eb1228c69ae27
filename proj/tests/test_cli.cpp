#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "json.hpp"
#include "mixlab/harness.hpp"

namespace fs = std::filesystem;
using namespace mixlab;

namespace {

const char* cli = MIXLAB_CLI_PATH;

int run(const std::string& args) {
    const std::string cmd = std::string(cli) + " " + args;
    return std::system(cmd.c_str());
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::path("cli_scratch") / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

fs::path write_config(const fs::path& dir, const std::string& content) {
    const fs::path path = dir / "exp.cfg";
    std::ofstream out(path);
    out << content;
    return path;
}

const std::string tiny_cfg =
    "template = moderntcn\n"
    "lookback = 16\n"
    "channels = 2\n"
    "horizon = 4\n"
    "n_windows = 60\n"
    "steps = 2\n"
    "dense_init = distill\n"
    "seed = 5\n";

}  // namespace

TEST_CASE("cli rejects missing subcommands and bad configs") {
    CHECK(run("> /dev/null 2>&1") != 0);
    const fs::path dir = fresh_dir("bad");
    const fs::path cfg = write_config(dir, "nonsense_key = 1\n");
    CHECK(run("compare --config " + cfg.string() + " --out " + (dir / "out").string() +
              " > /dev/null 2>&1") != 0);
}

TEST_CASE("gen writes a CSV that load_csv accepts") {
    const fs::path dir = fresh_dir("gen");
    const fs::path cfg = write_config(dir,
                                      "lookback = 8\n"
                                      "horizon = 2\n"
                                      "channels = 3\n"
                                      "n_windows = 20\n"
                                      "seed = 9\n");
    REQUIRE(run("gen --config " + cfg.string() + " --out " + dir.string() +
                " > /dev/null") == 0);
    const fs::path csv = dir / "synthetic.csv";
    REQUIRE(fs::exists(csv));

    const std::string text = slurp(csv);
    CHECK(text.rfind("timestamp,ch0,ch1,ch2\n", 0) == 0);

    // 20 windows of 8+2 steps at stride 1 need exactly 29 rows.
    const harness::WindowedDataset d =
        harness::load_csv(csv.string(), 8, 2, {1.0, 0.0, 0.0});
    CHECK(d.train.size() == 20);
    CHECK(d.train[0].lookback.shape() == Shape{8, 3});

    // Same config, same bytes.
    const fs::path dir2 = fresh_dir("gen2");
    REQUIRE(run("gen --config " + cfg.string() + " --out " + dir2.string() +
                " > /dev/null") == 0);
    CHECK(slurp(dir2 / "synthetic.csv") == text);
}

TEST_CASE("compare produces a versioned report plus both checkpoints") {
    const fs::path dir = fresh_dir("compare");
    const fs::path cfg = write_config(dir, tiny_cfg);
    REQUIRE(run("compare --config " + cfg.string() + " --out " + dir.string() +
                " > /dev/null") == 0);
    REQUIRE(fs::exists(dir / "report.json"));
    REQUIRE(fs::exists(dir / "orig.ckpt"));
    REQUIRE(fs::exists(dir / "jd.ckpt"));

    const harness::ExperimentReport r = harness::read_report((dir / "report.json").string());
    CHECK(r.schema_version == 1);
    CHECK(r.complete);
    CHECK(r.seed == 5);
    CHECK(r.orig.present);
    CHECK(r.jd.present);
    CHECK(r.orig.loss_curve.size() == 2);
    CHECK(r.config_echo.at("template") == "moderntcn");
    CHECK(r.config_echo.at("seed") == "5");
    CHECK(r.config_echo.size() == 8);  // every config key echoed
    CHECK(r.mixers.size() == 4);

    // The checkpoints reload into models with the reported parameter counts.
    harness::ExperimentConfig ec = harness::parse_config_file(cfg.string());
    models::SequenceModel orig = models::build_model(
        harness::model_config_from(ec),
        derive_seed(ec.seed, static_cast<std::uint64_t>(SeedStream::InitOrig)));
    models::load_checkpoint(orig, (dir / "orig.ckpt").string());
    CHECK(orig.param_count() == r.orig.param_count);
}

TEST_CASE("flags override the config and land in the echo") {
    const fs::path dir = fresh_dir("flags");
    const fs::path cfg = write_config(dir, tiny_cfg);
    REQUIRE(run("train --config " + cfg.string() + " --seed 11 --mixer toeplitz --out " +
                dir.string() + " > /dev/null") == 0);
    const harness::ExperimentReport r = harness::read_report((dir / "report.json").string());
    CHECK(r.seed == 11);
    CHECK(r.config_echo.at("seed") == "11");
    CHECK(r.config_echo.at("mixer") == "toeplitz");
    CHECK(r.orig.present);
    CHECK_FALSE(r.jd.present);
    CHECK(fs::exists(dir / "model.ckpt"));
}

TEST_CASE("analyze and export consume the compare outputs") {
    const fs::path dir = fresh_dir("analyze");
    const fs::path cfg = write_config(dir, tiny_cfg);
    REQUIRE(run("compare --config " + cfg.string() + " --out " + dir.string() +
                " > /dev/null") == 0);

    REQUIRE(run("analyze --config " + cfg.string() + " --out " + dir.string() +
                " > /dev/null") == 0);
    const nlohmann::json j = nlohmann::json::parse(slurp(dir / "analysis.json"));
    CHECK(j.at("schema_version") == 1);
    CHECK(j.at("seed") == 5);
    REQUIRE(j.at("mixers").size() == 4);
    for (const nlohmann::json& m : j.at("mixers")) {
        CHECK(m.contains("label"));
        CHECK(m.contains("jsd"));
        CHECK(m.contains("jsd_vs_random"));
        CHECK(m.at("rank_orig").contains("nuclear"));
        CHECK(m.at("rank_jd").contains("within"));
    }

    REQUIRE(run("export --config " + cfg.string() + " --out " + dir.string() +
                " > /dev/null") == 0);
    std::size_t pgm = 0, csv = 0;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (name.ends_with(".pgm")) {
            ++pgm;
            CHECK(slurp(entry.path()).rfind("P5\n", 0) == 0);
        }
        if (name.ends_with(".csv") && name != "synthetic.csv") ++csv;
    }
    CHECK(pgm == 8);  // 4 handles x 2 arms
    CHECK(csv == 8);
    CHECK(fs::exists(dir / "orig_block0.head0.pgm"));
    CHECK(fs::exists(dir / "jd_block1.head1.csv"));

    // analyze without checkpoints fails loudly.
    const fs::path bare = fresh_dir("bare");
    CHECK(run("analyze --config " + cfg.string() + " --out " + bare.string() +
              " > /dev/null 2>&1") != 0);
}

TEST_CASE("identical invocations reproduce reports and checkpoints bit-exactly") {
    const fs::path dir_a = fresh_dir("det_a");
    const fs::path dir_b = fresh_dir("det_b");
    const fs::path cfg = write_config(dir_a, tiny_cfg);
    REQUIRE(run("compare --config " + cfg.string() + " --out " + dir_a.string() +
                " > /dev/null") == 0);
    REQUIRE(run("compare --config " + cfg.string() + " --out " + dir_b.string() +
                " > /dev/null") == 0);

    harness::ExperimentReport a = harness::read_report((dir_a / "report.json").string());
    harness::ExperimentReport b = harness::read_report((dir_b / "report.json").string());
    a.orig.wall_seconds = a.jd.wall_seconds = 0.0;
    b.orig.wall_seconds = b.jd.wall_seconds = 0.0;
    CHECK(harness::report_to_json_text(a) == harness::report_to_json_text(b));

    CHECK(slurp(dir_a / "orig.ckpt") == slurp(dir_b / "orig.ckpt"));
    CHECK(slurp(dir_a / "jd.ckpt") == slurp(dir_b / "jd.ckpt"));
}
