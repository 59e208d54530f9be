#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <fstream>
#include <regex>
#include <sstream>

#include "bicat/pipeline.hpp"

using namespace bicat;

namespace {

namespace fs = std::filesystem;

fs::path fresh_dir(const std::string& tag) {
    fs::path dir = fs::temp_directory_path() / ("bicat_test_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) { return detail::read_file_bytes(p); }

/// Synthetic ratings file: users walking a seeded 30-state chain.
void write_fixture_csv(const fs::path& path, std::size_t users = 40) {
    Rng rng(4242);
    std::ostringstream out;
    for (std::size_t u = 0; u < users; ++u) {
        const std::size_t len = 3 + uniform_below(rng, 8);
        std::size_t state = uniform_below(rng, 30);
        for (std::size_t i = 0; i < len; ++i) {
            out << "user" << u << ",item" << state << "," << (1 + uniform_below(rng, 5))
                << ".0," << 100 * (i + 1) << "\n";
            state = (state + 1 + uniform_below(rng, 2)) % 30;
        }
    }
    detail::atomic_write_file(path, out.str());
}

ExperimentConfig small_config(const fs::path& dir) {
    ExperimentConfig cfg;
    cfg.data_input = (dir / "ratings.csv").string();
    cfg.out_dir = (dir / "out").string();
    cfg.seed = 7;
    cfg.encoder.n = 16;
    cfg.encoder.d = 8;
    cfg.encoder.h = 2;
    cfg.encoder.layers = 1;
    cfg.encoder.dropout = 0.1;
    cfg.pretrain.lambda = 0.4;
    cfg.pretrain.epochs = 2;
    cfg.pretrain.batch_size = 16;
    cfg.pretrain.lr = 1e-3;
    cfg.augment.max_generated = 3;
    cfg.augment.short_threshold = 6;
    cfg.augment.strategy = AugmentStrategy::bicat;
    cfg.finetune.alpha = 0.5;
    cfg.finetune.clip_k = 1;
    cfg.finetune.epochs = 2;
    cfg.finetune.batch_size = 16;
    cfg.finetune.lr = 1e-3;
    cfg.eval_ks = {1, 5};
    cfg.eval_negatives = 5;
    cfg.eval_seeds = 2;
    return cfg;
}

// Minimal JSON-schema checker covering the subset the shipped schema uses:
// type, required, properties, pattern, additionalProperties.
bool matches_schema(const nlohmann::json& value, const nlohmann::json& schema,
                    std::string* why) {
    const std::string type = schema.value("type", "");
    if (type == "object") {
        if (!value.is_object()) {
            *why = "expected object";
            return false;
        }
        for (const auto& req : schema.value("required", nlohmann::json::array()))
            if (!value.contains(req.get<std::string>())) {
                *why = "missing required key " + req.get<std::string>();
                return false;
            }
        const auto& props = schema.value("properties", nlohmann::json::object());
        const bool extra_ok = schema.value("additionalProperties", true);
        for (const auto& [key, sub] : value.items()) {
            if (props.contains(key)) {
                if (!matches_schema(sub, props.at(key), why)) return false;
            } else if (!extra_ok) {
                *why = "unexpected key " + key;
                return false;
            }
        }
        return true;
    }
    if (type == "string") {
        if (!value.is_string()) {
            *why = "expected string";
            return false;
        }
        if (schema.contains("pattern") &&
            !std::regex_search(value.get<std::string>(),
                               std::regex(schema.at("pattern").get<std::string>()))) {
            *why = "pattern mismatch on " + value.get<std::string>();
            return false;
        }
        return true;
    }
    if (type == "boolean") {
        if (!value.is_boolean()) {
            *why = "expected boolean";
            return false;
        }
        return true;
    }
    *why = "unsupported schema type " + type;
    return false;
}

}  // namespace

TEST_CASE("experiment config round trips through its text form") {
    ExperimentConfig cfg;
    cfg.data_input = "somewhere.csv";
    cfg.seed = 123;
    cfg.encoder.d = 64;
    cfg.encoder.dropout = 0.35;
    cfg.pretrain.lambda = 0.4;
    cfg.augment.strategy = AugmentStrategy::replace;
    cfg.finetune.alpha = 0.25;
    cfg.eval_ks = {1, 5, 10, 20};
    ExperimentConfig back = ExperimentConfig::parse_string(cfg.serialize());
    CHECK(back == cfg);
    CHECK(back.serialize() == cfg.serialize());
}

TEST_CASE("config parser rejects malformed input") {
    CHECK_THROWS_AS(ExperimentConfig::parse_string("bogus.key = 1"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::parse_string("seed = 1\nseed = 2"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::parse_string("encoder.sqrt_d_scale = maybe"),
                    ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::parse_string("just a line"), ConfigError);
    // Comments and blank lines are fine.
    ExperimentConfig ok = ExperimentConfig::parse_string("# comment\n\nseed = 9\n");
    CHECK(ok.seed == 9);
}

TEST_CASE("shipped dataset configs carry the published optima") {
    std::ifstream b(std::string(BICAT_DATA_DIR) + "/configs/beauty.cfg");
    REQUIRE(b.good());
    ExperimentConfig beauty = ExperimentConfig::parse(b);
    CHECK(beauty.encoder.n == 100);
    CHECK(beauty.encoder.d == 128);
    CHECK(beauty.encoder.layers == 2);
    CHECK(beauty.encoder.h == 4);
    CHECK(beauty.encoder.dropout == 0.7);
    CHECK(beauty.pretrain.lambda == 0.4);
    CHECK(beauty.augment.max_generated == 15);
    CHECK(beauty.augment.short_threshold == 18);
    CHECK(beauty.finetune.alpha == 1.0);
    CHECK(beauty.finetune.clip_k == 8);

    std::ifstream p(std::string(BICAT_DATA_DIR) + "/configs/phones.cfg");
    REQUIRE(p.good());
    ExperimentConfig phones = ExperimentConfig::parse(p);
    CHECK(phones.encoder.d == 32);
    CHECK(phones.encoder.h == 2);
    CHECK(phones.encoder.dropout == 0.5);
    CHECK(phones.pretrain.lambda == 0.3);
    CHECK(phones.augment.max_generated == 17);
    CHECK(phones.augment.short_threshold == 18);
    CHECK(phones.finetune.alpha == 0.2);
    CHECK(phones.finetune.clip_k == 8);
}

TEST_CASE("prepare writes deterministic artifacts and a consistent histogram") {
    fs::path dir = fresh_dir("prepare");
    write_fixture_csv(dir / "ratings.csv");
    ExperimentConfig cfg = small_config(dir);

    std::ostringstream log;
    PrepareSummary sum = cmd_prepare(cfg, log);
    CHECK(sum.users > 0);
    CHECK(sum.items > 0);
    std::size_t hist_total = 0;
    for (const auto& [len, count] : sum.length_histogram) hist_total += count;
    CHECK(hist_total == sum.users);

    // Second run into a different directory produces identical bytes.
    ExperimentConfig cfg2 = cfg;
    cfg2.out_dir = (dir / "out2").string();
    cmd_prepare(cfg2, log);
    CHECK(slurp(fs::path(cfg.out_dir) / "sequences.tsv") ==
          slurp(fs::path(cfg2.out_dir) / "sequences.tsv"));
    CHECK(slurp(fs::path(cfg.out_dir) / "vocab.tsv") ==
          slurp(fs::path(cfg2.out_dir) / "vocab.tsv"));
    CHECK(slurp(fs::path(cfg.out_dir) / "length_histogram.csv") ==
          slurp(fs::path(cfg2.out_dir) / "length_histogram.csv"));

    fs::remove_all(dir);
}

TEST_CASE("prepare fails loudly on an empty filtered corpus") {
    fs::path dir = fresh_dir("prepare_empty");
    detail::atomic_write_file(dir / "ratings.csv", "u1,i1,5.0,100\nu1,i2,5.0,200\n");
    ExperimentConfig cfg = small_config(dir);
    std::ostringstream log;
    CHECK_THROWS_AS(cmd_prepare(cfg, log), DataError);
    fs::remove_all(dir);
}

TEST_CASE("stages demand their prerequisites in order") {
    fs::path dir = fresh_dir("order");
    write_fixture_csv(dir / "ratings.csv");
    ExperimentConfig cfg = small_config(dir);
    std::ostringstream log;

    CHECK_THROWS_MATCHES(cmd_pretrain(cfg, log), StageOrderError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("sequences.tsv")));
    cmd_prepare(cfg, log);
    CHECK_THROWS_MATCHES(cmd_finetune(cfg, log), StageOrderError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("augmented.tsv")));
    CHECK_THROWS_MATCHES(cmd_augment(cfg, log), StageOrderError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("pretrain.ckpt")));
    fs::remove_all(dir);
}

TEST_CASE("the full pipeline is reproducible manifest for manifest") {
    fs::path dir = fresh_dir("full");
    write_fixture_csv(dir / "ratings.csv");
    std::ostringstream log;

    auto run_all = [&](const std::string& out) {
        ExperimentConfig cfg = small_config(dir);
        cfg.out_dir = (dir / out).string();
        cmd_prepare(cfg, log);
        cmd_pretrain(cfg, log);
        cmd_augment(cfg, log);
        cmd_finetune(cfg, log);
        cmd_evaluate(cfg, "", log);
        return cfg.out_dir;
    };
    const std::string a = run_all("out_a");
    const std::string b = run_all("out_b");
    for (const char* stage : {"prepare", "pretrain", "augment", "finetune", "evaluate"}) {
        const std::string name = std::string(stage) + ".manifest.json";
        INFO(name);
        CHECK(slurp(fs::path(a) / name) == slurp(fs::path(b) / name));
    }
    // Spot check the artifact bytes behind the digests as well.
    CHECK(slurp(fs::path(a) / "finetune.ckpt") == slurp(fs::path(b) / "finetune.ckpt"));
    CHECK(slurp(fs::path(a) / "metrics_avg.json") ==
          slurp(fs::path(b) / "metrics_avg.json"));

    // Evaluate emits per-seed and averaged reports.
    CHECK(fs::exists(fs::path(a) / "metrics_seed0.json"));
    CHECK(fs::exists(fs::path(a) / "metrics_seed1.json"));
    CHECK(fs::exists(fs::path(a) / "metrics_avg.csv"));

    // CSV shape: header + (overall + 4 buckets) x (2 recall + 2 ndcg + mrr).
    std::istringstream csv(slurp(fs::path(a) / "metrics_avg.csv"));
    std::size_t lines = 0;
    std::string line;
    while (std::getline(csv, line)) ++lines;
    CHECK(lines == 1 + 5 * 5);

    fs::remove_all(dir);
}

TEST_CASE("evaluate rejects a checkpoint from another vocabulary") {
    fs::path dir = fresh_dir("compat");
    write_fixture_csv(dir / "ratings.csv");
    ExperimentConfig cfg = small_config(dir);
    std::ostringstream log;
    cmd_prepare(cfg, log);
    cmd_pretrain(cfg, log);
    cmd_augment(cfg, log);
    cmd_finetune(cfg, log);

    ModelParams other = ModelParams::init(cfg.encoder, 999, 3);
    save_checkpoint_file((dir / "alien.ckpt").string(), cfg.encoder, other);
    CHECK_THROWS_AS(cmd_evaluate(cfg, (dir / "alien.ckpt").string(), log),
                    CompatibilityError);
    fs::remove_all(dir);
}

TEST_CASE("oracle command reproduces the fixture analysis and matches the schema") {
    fs::path dir = fresh_dir("oracle");
    std::ostringstream log;
    const std::string fixture = std::string(BICAT_DATA_DIR) + "/fig4.txt";
    CounterexampleReport rep =
        cmd_oracle(fixture, (dir / "report.json").string(), log);
    CHECK(rep.forward_before == Rational(3, 4));
    CHECK(rep.reverse_choice == "B");
    CHECK(rep.forward_after_reverse == Rational(2, 3));
    CHECK(rep.forward_choice == "D");
    CHECK(rep.forward_after_forward == Rational(1, 1));
    CHECK(rep.reverse_degrades_forward);

    const nlohmann::json report = nlohmann::json::parse(slurp(dir / "report.json"));
    const nlohmann::json schema = nlohmann::json::parse(
        slurp(std::string(BICAT_DATA_DIR) + "/oracle_report_schema.json"));
    std::string why;
    const bool ok = matches_schema(report, schema, &why);
    INFO(why);
    CHECK(ok);

    detail::atomic_write_file(dir / "empty.txt", "\n");
    CHECK_THROWS_AS(cmd_oracle((dir / "empty.txt").string(), "", log),
                    UndefinedConditionalError);
    fs::remove_all(dir);
}

TEST_CASE("cli binary exit codes") {
    const std::string cli = BICAT_CLI_PATH;
    const std::string fixture = std::string(BICAT_DATA_DIR) + "/fig4.txt";
    auto run = [&](const std::string& args) {
        const std::string cmd = cli + " " + args + " > /dev/null 2>&1";
        const int status = std::system(cmd.c_str());
        return WEXITSTATUS(status);
    };
    CHECK(run("oracle " + fixture) == 0);
    CHECK(run("--help") == 0);
    CHECK(run("bogus-subcommand") == 1);
    CHECK(run("pretrain") == 1);                        // missing required --config
    CHECK(run("oracle /nonexistent/corpus.txt") == 2);  // unreadable data
    CHECK(run("prepare --config /nonexistent.cfg") == 1);
}
