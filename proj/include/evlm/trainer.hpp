#pragma once

// Three-stage curriculum: single-frame pretraining with guidance losses,
// multi-frame pretraining with the same losses, then generative-only
// fine-tuning with hierarchical merging switched on. Stage structure (frames,
// merge, loss gating, lr schedule) is fixed; scale knobs are free.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "evlm/backbone.hpp"
#include "evlm/guidance.hpp"
#include "evlm/patch_embed.hpp"
#include "evlm/synth.hpp"

namespace evlm::train {

struct StageConfig {
    int stage = 1;
    double lr = 4e-5;
    double warmup_ratio = 0.03;
    int batch = 8;
    int epochs = 1;
    int steps_override = 0;  // > 0 pins the total step count
    int frames = 1;
    bool merge_enabled = false;
    bool gen_only = false;
    double weight_decay = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    uint64_t seed = 1;

    // Full-scale presets: frames 1/16/32, merge off/off/on, lr 4e-5/4e-5/2e-5,
    // warmup ratio 0.03/0.01/0.01, batch 256/256/128, epochs 1/2/1.
    static StageConfig paper_defaults(int stage);
    // Desk-scale presets sized for minute-long CPU runs.
    static StageConfig toy(int stage);

    void validate() const;
    void to_file(const std::string& path) const;
    static StageConfig from_file(const std::string& path);
};

// Linear warmup to the peak over ceil(warmup_ratio * total) steps, then cosine
// decay hitting exactly zero on the final step.
double lr_at(int64_t step, int64_t total_steps, const StageConfig& cfg);

struct ModelState {
    embed::PatchEmbedParams pe;
    backbone::BackboneParams bb;
    guidance::GuidanceHead head;
    guidance::GuidanceConfig gcfg;
    int completed_stage = 0;

    std::vector<std::pair<std::string, Tensor>> named_params() const;
    uint64_t param_hash() const;
    void save(const std::string& dir) const;
    static ModelState load(const std::string& dir);
};

ModelState toy_model(uint64_t seed);

struct StepRecord {
    int64_t step = 0;
    double lr = 0.0;
    double l_gen = 0.0, l_mse = 0.0, l_con = 0.0, l_total = 0.0;
    double step_ms = 0.0;
    int64_t tokens = 0;
};

struct TrainLog {
    int stage = 0;
    std::vector<StepRecord> steps;
    std::string checkpoint_dir;

    void to_jsonl(const std::string& path) const;
};

// Runs one stage over the corpus, updating the model in place. Stages must be
// run in order 1 -> 2 -> 3; a checkpoint is written when checkpoint_dir is
// non-empty. Aborts with a step report if the loss goes non-finite.
TrainLog run_stage(const StageConfig& cfg, const std::vector<synth::Sample>& corpus, ModelState& state,
                   const std::string& checkpoint_dir = "");

// Greedy-decode exact-match accuracy on question/answer samples.
double evaluate_qa(const ModelState& state, const std::vector<synth::Sample>& corpus);

struct PipelineResult {
    ModelState state;
    std::vector<TrainLog> logs;
    double qa_before = 0.0;
    double qa_after = 0.0;
    std::string checkpoint_dir;
};

// Builds the three toy corpora under workdir, trains all stages in order, and
// evaluates QA on the stage-3 samples before and after.
PipelineResult run_toy_pipeline(const std::string& workdir, uint64_t seed);

}  // namespace evlm::train
