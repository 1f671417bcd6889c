#include <doctest.h>

#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "oscar/cli/cli.hpp"
#include "oscar/core/hash.hpp"

using namespace oscar;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() /
               ("oscar_cli_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

ExperimentConfig tiny_experiment(const std::string& root) {
    ExperimentConfig cfg;
    cfg.name = "tiny";
    cfg.seed = 5;
    cfg.out_root = root;

    cfg.dataset.size = 32;
    cfg.dataset.count = 8;
    cfg.dataset.looks = 4;
    cfg.dataset.lee_window = 5;
    cfg.dataset.split_ratio = 0.75;

    cfg.encoder.depth = 4;
    cfg.encoder.embed_dim = 32;
    cfg.encoder.heads = 4;
    cfg.encoder.patch_size = 8;
    cfg.encoder.num_classes = 6;
    cfg.encoder.lora_rank = 4;
    cfg.encoder.lora_alpha = 8.0;
    cfg.encoder.lora_dropout = 0.0;
    cfg.encoder.aligned_layers = {0, 1, 2, 3};
    cfg.encoder.hier_layers = {0, 1, 2, 3};

    cfg.teacher_train = {1, 4, 1e-3, 0, true, false};
    cfg.distill_train = {1, 4, 1e-3, 0, true, false};
    cfg.translator_train.steps = 6;
    cfg.translator_train.batch_size = 2;
    cfg.translator_train.lr = 1e-3;
    cfg.translator_train.warmup_steps = 0;
    cfg.translator_train.augment = false;

    cfg.diffusion.image_size = 32;
    cfg.diffusion.stage_channels = {8, 8, 8, 8};
    cfg.diffusion.groups = 4;
    cfg.diffusion.time_dim = 8;
    cfg.diffusion.t_max = 50;
    cfg.diffusion.d_txt = 8;
    cfg.diffusion.d_k = 8;
    cfg.diffusion.ddim_steps = 5;

    cfg.sampler.steps = 5;
    cfg.sampler.cfg_scale = 1.5;
    cfg.sampler.max_images = 2;
    cfg.sampler.batch_size = 2;
    return cfg;
}

}  // namespace

TEST_CASE("experiment config: round trip, hashing, strict parsing, validation") {
    ExperimentConfig cfg = tiny_experiment("/tmp/unused");

    SUBCASE("serialization round-trips byte-exactly and hashes stably") {
        Json j = experiment_config_to_json(cfg);
        ExperimentConfig back = experiment_config_from_json(j);
        CHECK(experiment_config_to_json(back).dump() == j.dump());
        CHECK(config_hash(back) == config_hash(cfg));

        ExperimentConfig other = cfg;
        other.seed += 1;
        CHECK(config_hash(other) != config_hash(cfg));
        other = cfg;
        other.sampler.cfg_scale = 3.0;
        CHECK(config_hash(other) != config_hash(cfg));
    }
    SUBCASE("unknown keys are rejected at every level") {
        Json j = experiment_config_to_json(cfg);
        Json bad = j;
        bad["surprise"] = 1;
        CHECK_THROWS_AS(experiment_config_from_json(bad), ConfigError);
        bad = j;
        bad["dataset"]["sneaky"] = 2;
        CHECK_THROWS_AS(experiment_config_from_json(bad), ConfigError);
        bad = j;
        bad["sampler"]["typo_steps"] = 10;
        CHECK_THROWS_AS(experiment_config_from_json(bad), ConfigError);
        bad = j;
        bad["diffusion"]["unknown"] = 0;
        CHECK_THROWS_AS(experiment_config_from_json(bad), ConfigError);
    }
    SUBCASE("schema version is mandatory") {
        Json j = experiment_config_to_json(cfg);
        j.erase("schema_version");
        CHECK_THROWS_AS(experiment_config_from_json(j), ConfigError);
        j["schema_version"] = 2;
        CHECK_THROWS_AS(experiment_config_from_json(j), ConfigError);
    }
    SUBCASE("cross-field validation") {
        ExperimentConfig bad = cfg;
        bad.dataset.size = 64;  // no longer matches diffusion.image_size
        CHECK_THROWS_AS(bad.validate(), ConfigError);
        bad = cfg;
        bad.encoder.num_classes = 5;
        CHECK_THROWS_AS(bad.validate(), ConfigError);
        bad = cfg;
        bad.sampler.steps = 51;  // exceeds t_max
        CHECK_THROWS_AS(bad.validate(), ConfigError);
        bad = cfg;
        bad.name = "a/b";
        CHECK_THROWS_AS(bad.validate(), ConfigError);
        bad = cfg;
        bad.translator_train.lr = 0.0;
        CHECK_THROWS_AS(bad.validate(), ConfigError);
    }
    SUBCASE("loading") {
        CHECK_THROWS_AS(load_experiment_config("/tmp/definitely_missing_config.json"),
                        ArtifactError);
        TempDir tmp("cfgload");
        const std::string path = (tmp.path / "cfg.json").string();
        write_json(path, experiment_config_to_json(cfg));
        ExperimentConfig loaded = load_experiment_config(path);
        CHECK(config_hash(loaded) == config_hash(cfg));
    }
    SUBCASE("run root env override applies to paths only") {
        ::setenv("OSCAR_RUN_ROOT", "/tmp/oscar_override", 1);
        CHECK(run_dir(cfg) == "/tmp/oscar_override/tiny");
        ::unsetenv("OSCAR_RUN_ROOT");
        CHECK(run_dir(cfg) == cfg.out_root + "/tiny");
    }
}

TEST_CASE("pipeline commands: ordering, integrity, determinism") {
    TempDir tmp("pipe");
    ExperimentConfig cfg = tiny_experiment(tmp.path.string());
    const std::string run = run_dir(cfg);

    // Upstream requirements fire before any work happens.
    CHECK_THROWS_AS(cmd_train_teacher(cfg), ArtifactError);
    CHECK_THROWS_AS(cmd_distill(cfg), ArtifactError);
    CHECK_THROWS_AS(cmd_train_translator(cfg), ArtifactError);
    CHECK_THROWS_AS(cmd_translate(cfg), ArtifactError);
    CHECK_THROWS_AS(cmd_evaluate(cfg), ArtifactError);

    // synth
    const std::string dataset_dir = cmd_synth(cfg);
    CHECK(file_exists(dataset_dir + "/manifest.json"));
    Json m = read_run_manifest(run);
    REQUIRE(m.at("stages").contains("synth"));
    CHECK(m.at("config_hash") == config_hash(cfg));
    CHECK(m.at("seed") == cfg.seed);

    // distill still refuses: teacher missing, and the error names the command.
    try {
        cmd_distill(cfg);
        FAIL("expected ArtifactError");
    } catch (const ArtifactError& e) {
        CHECK(std::string(e.what()).find("train-teacher") != std::string::npos);
    }

    // teacher
    const std::string teacher_dir = cmd_train_teacher(cfg);
    Json teacher_manifest = read_json(teacher_dir + "/manifest.json");
    CHECK(teacher_manifest.at("config_hash") == config_hash(cfg));
    m = read_run_manifest(run);
    CHECK(m.at("stages").at("teacher").contains("best_val_ap_micro"));

    // translator still refuses without the student.
    try {
        cmd_train_translator(cfg);
        FAIL("expected ArtifactError");
    } catch (const ArtifactError& e) {
        CHECK(std::string(e.what()).find("distill") != std::string::npos);
    }

    // student
    const std::string student_dir = cmd_distill(cfg);
    m = read_run_manifest(run);
    CHECK(m.at("stages").at("student").contains("attn_kl_initial"));
    CHECK(m.at("stages").at("student").contains("attn_kl_final"));

    // a corrupted upstream checkpoint refuses to feed the next stage
    {
        const std::string params = student_dir + "/params.bin";
        std::vector<unsigned char> original = read_file_bytes(params);
        std::vector<unsigned char> tampered = original;
        tampered[tampered.size() / 2] ^= 0xFF;
        atomic_write_bytes(params, tampered);
        CHECK_THROWS_AS(cmd_train_translator(cfg), ArtifactError);
        atomic_write_bytes(params, original);
    }

    // translator
    const std::string translator_dir = cmd_train_translator(cfg);
    Json translator_manifest = read_json(translator_dir + "/manifest.json");
    CHECK(translator_manifest.at("config_hash") == config_hash(cfg));
    CHECK(translator_manifest.contains("student_params_sha256"));

    // translate
    const std::string out = cmd_translate(cfg);
    Json index = read_json(out + "/index.json");
    CHECK(index.at("kind") == "translated");
    CHECK(index.at("count") == 2);
    CHECK(index.at("config_hash") == config_hash(cfg));
    std::size_t pred_count = 0;
    for (const auto& [rel, sha] : index.at("files").items()) {
        CHECK(sha256_file(out + "/" + rel) == sha.get<std::string>());
        if (rel.rfind("pred/", 0) == 0) ++pred_count;
    }
    CHECK(pred_count == 2);

    // translation is deterministic: rerun reproduces identical bytes
    std::map<std::string, std::string> before;
    for (const auto& [rel, sha] : index.at("files").items())
        before[rel] = sha.get<std::string>();
    cmd_translate(cfg);
    Json index2 = read_json(out + "/index.json");
    for (const auto& [rel, sha] : index2.at("files").items())
        CHECK(before.at(rel) == sha.get<std::string>());

    // evaluate
    MetricReport report = cmd_evaluate(cfg);
    CHECK(report.per_image.size() == 2);
    CHECK(file_exists(run + "/report.json"));
    CHECK(file_exists(run + "/report.txt"));
    Json rj = read_json(run + "/report.json");
    CHECK(rj.at("config_hash") == config_hash(cfg));
    CHECK(rj.at("schema_version") == 1);

    // rerunning evaluate reproduces the report bit-exactly
    const std::string bytes1 = read_file_text(run + "/report.json");
    cmd_evaluate(cfg);
    CHECK(read_file_text(run + "/report.json") == bytes1);

    // the finished manifest satisfies the integrity invariant for every stage
    m = read_run_manifest(run);
    for (const auto& stage : {"synth", "teacher", "student", "translator", "translate",
                              "evaluate"}) {
        REQUIRE(m.at("stages").contains(stage));
        verify_stage_artifact(m, stage, run);
        CHECK(m.at("stages").at(stage).at("seconds").get<double>() >= 0.0);
    }

    // a config change is rejected against the existing run directory
    ExperimentConfig changed = cfg;
    changed.seed += 1;
    CHECK_THROWS_AS(cmd_synth(changed), ValidationError);

    // exit-code mapping
    CHECK(run_command("bogus", cfg) == 2);
    ExperimentConfig fresh = cfg;
    fresh.name = "fresh";
    CHECK(run_command("train-teacher", fresh) == 3);  // no run manifest yet
    CHECK(run_command("evaluate", cfg) == 0);

    // JSON-lines command log accumulated one record per completed command
    std::ifstream log(run + "/logs/cli.jsonl");
    REQUIRE(log.good());
    std::size_t lines = 0;
    std::string line;
    while (std::getline(log, line)) {
        Json j = Json::parse(line);
        CHECK(j.contains("cmd"));
        ++lines;
    }
    CHECK(lines >= 7);  // synth, teacher, distill, translator, 2x translate, 2x evaluate
}
