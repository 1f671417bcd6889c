#pragma once

#include <cstdint>
#include <string>

#include "oscar/diffusion/diffusion.hpp"
#include "oscar/distill/distill.hpp"
#include "oscar/evalkit/evalkit.hpp"
#include "oscar/synthdata/synthdata.hpp"

namespace oscar {

// Hyperparameters of one supervised training stage.
struct StageTrainConfig {
    std::size_t epochs = 8;
    std::size_t batch_size = 8;
    Real lr = 1e-3;
    std::size_t warmup_steps = 100;
    bool cosine = true;
    bool augment = true;

    void validate() const;
};

struct TranslatorStageConfig {
    std::size_t steps = 4000;
    std::size_t batch_size = 4;
    Real lr = 2e-4;
    std::size_t warmup_steps = 100;
    bool cosine = true;
    bool augment = true;

    void validate() const;
};

struct SamplerConfig {
    std::size_t steps = 50;
    Real cfg_scale = 5.5;
    std::size_t max_images = 0;  // 0 = translate the full test split
    std::size_t batch_size = 8;

    void validate() const;
};

// Complete declarative description of one experiment. A single root seed feeds
// every stage through named child streams; per-stage seeds are derived, never
// configured directly.
struct ExperimentConfig {
    std::string name = "experiment";
    std::uint64_t seed = 1;
    DatasetConfig dataset;          // dataset.seed is derived from the root seed
    EncoderConfig encoder;
    DistillWeights distill;         // class counts are filled from data at runtime
    StageTrainConfig teacher_train;
    StageTrainConfig distill_train;
    TranslatorStageConfig translator_train;
    DiffusionConfig diffusion;
    SamplerConfig sampler;
    std::string out_root = "runs";  // parent of the run directory; env-overridable

    void validate() const;
};

Json experiment_config_to_json(const ExperimentConfig& cfg);
ExperimentConfig experiment_config_from_json(const Json& j);  // unknown keys are errors
ExperimentConfig load_experiment_config(const std::string& path);

// sha256 of the canonical serialized form; embedded in every produced artifact.
std::string config_hash(const ExperimentConfig& cfg);

// The run directory: out_root/name, overridable via OSCAR_RUN_ROOT (paths only).
std::string run_dir(const ExperimentConfig& cfg);

// Per-run manifest: config hash, root seed, and per-stage artifact records
// (path relative to the run dir, content checksum, wall-clock seconds).
// Updated atomically after every completed command.
Json read_run_manifest(const std::string& dir);  // ArtifactError when absent
void assert_stage_done(const Json& manifest, const std::string& stage,
                       const std::string& run, const std::string& needed_cmd);
// Re-checks that a recorded stage artifact still exists and matches its checksum.
void verify_stage_artifact(const Json& manifest, const std::string& stage,
                           const std::string& run);

// The six pipeline commands. Each validates its upstream artifacts (existence,
// checksum, config hash), runs deterministically for a fixed config + seed, and
// records its outputs in the run manifest.
std::string cmd_synth(const ExperimentConfig& cfg);
std::string cmd_train_teacher(const ExperimentConfig& cfg);
std::string cmd_distill(const ExperimentConfig& cfg);
std::string cmd_train_translator(const ExperimentConfig& cfg);
std::string cmd_translate(const ExperimentConfig& cfg, const std::string& input_dir = "");
MetricReport cmd_evaluate(const ExperimentConfig& cfg, bool strict = false);

// Maps the error taxonomy to process exit codes (0 ok, 2 validation,
// 3 upstream artifact, 4 numerical) and prints the message to stderr.
int run_command(const std::string& command, const ExperimentConfig& cfg,
                const std::string& input_dir = "", bool strict = false);

}  // namespace oscar
