#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>

#include "evlm/backbone.hpp"
#include "evlm/guidance.hpp"
#include "evlm/hybridres.hpp"
#include "evlm/ops.hpp"
#include "evlm/patch_embed.hpp"
#include "evlm/profiler.hpp"
#include "evlm/synth.hpp"
#include "evlm/tokenize.hpp"
#include "evlm/trainer.hpp"
#include "evlm/video.hpp"

namespace {

using namespace evlm;

std::string default_out_dir() {
    const char* env = std::getenv("EVLM_OUT_DIR");
    return env && *env ? std::string(env) : std::string(".");
}

std::vector<int> parse_int_list(const std::string& csv) {
    std::vector<int> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        out.push_back(std::stoi(item));
    }
    check(!out.empty(), ErrKind::contract, msg("empty list: '", csv, "'"));
    return out;
}

std::vector<double> parse_double_list(const std::string& csv) {
    std::vector<double> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        out.push_back(std::stod(item));
    }
    check(!out.empty(), ErrKind::contract, msg("empty list: '", csv, "'"));
    return out;
}

video::ResolutionPolicy policy_for(const std::string& preset) {
    if (preset == "defaults") return video::ResolutionPolicy::defaults();
    if (preset == "table5") return video::ResolutionPolicy::table5();
    raise(ErrKind::contract, msg("unknown preset '", preset, "' (defaults|table5)"));
}

int cmd_tokenize(const std::string& clip_path, const std::string& ppm_dir, const std::string& preset,
                 const std::string& tier_name, const std::string& out_path) {
    video::VideoClip clip;
    if (!clip_path.empty())
        clip = video::clip_from_elvt(clip_path);
    else if (!ppm_dir.empty())
        clip = video::clip_from_ppm_dir(ppm_dir);
    else
        raise(ErrKind::contract, "tokenize: provide --clip or --ppm-dir");
    video::ResolutionPolicy policy = policy_for(preset);
    video::Tier tier = tier_name == "low" ? video::Tier::low : video::Tier::high;
    video::VideoClip sized = video::resize_to_policy(clip, policy, tier);
    tok::TokenStream stream = tok::tokenize(sized, policy);
    tok::stream_to_jsonl(stream, out_path);
    tok::TokenCounts c = stream.counts();
    nlohmann::json j = {{"out", out_path},
                        {"frames", sized.frames},
                        {"height", sized.height},
                        {"width", sized.width},
                        {"frame_marks", c.frame_marks},
                        {"line_marks", c.line_marks},
                        {"patches", c.patches},
                        {"total", c.total()}};
    std::cout << j.dump(2) << "\n";
    return 0;
}

int cmd_plan(int frames, int high, int low, const std::string& preset, const std::string& placement,
             int src_h, int src_w, const std::string& emit) {
    if (low < 0) low = frames - high;
    hybrid::HybridPlan p = hybrid::plan(frames, high, low, policy_for(preset),
                                        hybrid::placement_from_name(placement), src_h, src_w);
    if (emit == "json")
        std::cout << p.to_json().dump(2) << "\n";
    else
        std::cout << p.predicted_tokens << "\n";
    return 0;
}

int cmd_profile(bool scenarios, bool measure, const std::string& frames_list, int frames, int text_len,
                bool merged, const std::string& emit, uint64_t seed) {
    if (scenarios) {
        profiler::ScenarioKnobs knobs;
        knobs.text_len = text_len;
        auto rows = profiler::scenario_table(parse_int_list(frames_list), knobs);
        if (emit == "json") {
            std::cout << profiler::scenario_table_json(rows).dump(2) << "\n";
        } else if (emit == "csv") {
            std::cout << "scenario,frames,total_macs,vs_encoder_free\n";
            for (const auto& r : rows)
                std::cout << r.scenario << "," << r.frames << "," << std::setprecision(17)
                          << r.total_macs << "," << r.vs_encoder_free << "\n";
        } else {
            std::cout << profiler::scenario_table_text(rows);
        }
        return 0;
    }
    if (measure) {
        Rng rng(seed);
        backbone::BackboneConfig cfg = backbone::BackboneConfig::toy();
        cfg.merge.enabled = merged;
        backbone::BackboneParams params = backbone::BackboneParams::init(cfg, rng);
        embed::PatchEmbedConfig pcfg;
        pcfg.dim = cfg.dim;
        embed::PatchEmbedParams pe = embed::PatchEmbedParams::init(pcfg, rng);
        synth::SynthSpec spec;
        spec.seed = seed;
        spec.frames = frames;
        spec.motion = frames > 1 ? synth::MotionKind::right : synth::MotionKind::still;
        auto [clip, caption] = synth::generate(spec);
        (void)caption;
        tok::TokenStream stream = tok::tokenize(clip, video::ResolutionPolicy::defaults());
        embed::FeatureSeq seq = embed::embed(stream, pe);
        seq = embed::marker_cross_attend(seq, pe);
        std::vector<int> text_ids = tok::encode_text("describe the clip");
        profiler::PrefillMeasurement pm = profiler::measure_prefill(seq, text_ids, params);
        nlohmann::json j = {{"prefill_ms", pm.prefill_ms},
                            {"ttft_ms", pm.ttft_ms},
                            {"measured_macs", pm.measured_macs},
                            {"analytic_macs", pm.analytic_macs},
                            {"timer_advisory", pm.timer_advisory},
                            {"runs_ms", pm.run_ms}};
        std::cout << j.dump(2) << "\n";
        return 0;
    }
    backbone::BackboneConfig cfg = backbone::BackboneConfig::toy();
    cfg.merge.enabled = merged;
    int grid = 56 / 28;
    int64_t patches_per_frame = static_cast<int64_t>(grid) * grid;
    int64_t patches = patches_per_frame * frames;
    int64_t markers = static_cast<int64_t>(grid + 1) * frames;
    auto schedule = profiler::simulate_merge_schedule(patches, markers, patches_per_frame, cfg, 0.75,
                                                      cfg.merge.target_ratio);
    profiler::EmbedCost ec{patches, markers, 3ll * 28 * 28};
    profiler::FlopsReport rep = profiler::analytic_flops(schedule, cfg, text_len, &ec);
    rep.scenario = merged ? "toy+merge" : "toy";
    if (emit == "json")
        std::cout << rep.to_json().dump(2) << "\n";
    else if (emit == "csv")
        std::cout << rep.to_csv();
    else
        std::cout << rep.to_table();
    return 0;
}

// Full-pipeline finite-difference check on the miniature model: embed,
// cross-attend, two blocks with merging, all three losses.
double tiny_pipeline_check(uint64_t seed, std::vector<std::string> which) {
    PrecGuard pg(Prec::f64);
    Rng rng(seed);

    embed::PatchEmbedConfig pcfg;
    pcfg.patch = 4;
    pcfg.dim = 16;
    pcfg.heads = 2;
    embed::PatchEmbedParams pe = embed::PatchEmbedParams::init(pcfg, rng);

    backbone::BackboneConfig bcfg = backbone::BackboneConfig::tiny();
    bcfg.merge.enabled = true;
    bcfg.merge.threshold = 0.05;  // low bar: most chains merge in the shallow layer
    bcfg.merge.target_ratio = 0.75;
    backbone::BackboneParams bb = backbone::BackboneParams::init(bcfg, rng);

    guidance::TeacherGeometry geom{2, 2, 8};
    guidance::GuidanceConfig gcfg;
    gcfg.geometry = geom;
    guidance::GuidanceHead head = guidance::GuidanceHead::init(bcfg.dim, geom.dim, rng);

    video::VideoClip clip = video::VideoClip::empty(2, 8, 8, "gradcheck");
    for (auto& p : clip.pixels) p = static_cast<float>(rng.uniform());
    video::ResolutionPolicy policy{4, 8, 8};
    tok::TokenStream stream = tok::tokenize(clip, policy);
    guidance::TeacherFeatures teacher = guidance::mock_teacher(clip, geom, seed);
    std::vector<int> text_ids = {tok::kBos, 104, 105, tok::kEos};

    auto loss_of = [&]() {
        embed::FeatureSeq seq = embed::embed(stream, pe);
        seq = embed::marker_cross_attend(seq, pe);
        backbone::ForwardTrace trace = backbone::forward(seq, text_ids, bb);
        std::vector<guidance::GuidanceSample> batch;
        std::vector<int64_t> rows = {0, 1, 2};
        std::vector<int> ids = {104, 105, tok::kEos};
        batch.push_back({std::move(trace), teacher, rows, ids});
        return guidance::total_loss(batch, head, gcfg, false).total;
    };

    std::map<std::string, Tensor> by_name;
    for (auto& [n, t] : pe.named_params()) by_name.emplace("pe." + n, t);
    for (auto& [n, t] : bb.named_params()) by_name.emplace("bb." + n, t);
    for (auto& [n, t] : head.named_params()) by_name.emplace("head." + n, t);

    double worst = 0.0;
    for (const auto& name : which) {
        auto it = by_name.find(name);
        check(it != by_name.end(), ErrKind::contract, msg("gradcheck: no parameter ", name));
        Tensor param = it->second;
        auto f = [&](const Tensor&) { return loss_of(); };
        ops::GradCheckReport rep = ops::grad_check(f, param, 1e-5);
        worst = std::max(worst, rep.max_rel_err);
    }
    return worst;
}

int cmd_gradcheck(bool tiny, int instances, uint64_t seed) {
    check(tiny, ErrKind::contract, "gradcheck: only the --tiny mode exists");
    std::vector<std::vector<std::string>> rotation = {
        {"pe.proj_bias", "head.log_temp"},
        {"pe.frame_embed", "bb.layers.1.attn_gain"},
        {"head.chan_proj", "bb.final_gain"},
        {"pe.wq", "bb.layers.0.ffn_gain"},
    };
    double worst = 0.0;
    for (int i = 0; i < instances; ++i) {
        double e = tiny_pipeline_check(seed + static_cast<uint64_t>(i) * 977,
                                       rotation[static_cast<size_t>(i) % rotation.size()]);
        worst = std::max(worst, e);
    }
    std::cout << "max relative error " << std::scientific << std::setprecision(3) << worst << "\n";
    return worst < 1e-4 ? 0 : 1;
}

int cmd_synth(int n, int stage, uint64_t seed, const std::string& out, int frames, int edge) {
    auto samples = synth::make_corpus(n, stage, seed, out, frames, edge);
    nlohmann::json j = {{"manifest", (std::filesystem::path(out) / "manifest.jsonl").string()},
                        {"samples", samples.size()},
                        {"stage", stage}};
    std::cout << j.dump(2) << "\n";
    return 0;
}

int cmd_train_pipeline(const std::string& workdir, uint64_t seed) {
    train::PipelineResult res = train::run_toy_pipeline(workdir, seed);
    nlohmann::json j = {{"qa_before", res.qa_before},
                        {"qa_after", res.qa_after},
                        {"checkpoint", res.checkpoint_dir},
                        {"param_hash", hex64(res.state.param_hash())}};
    for (const auto& log : res.logs) {
        if (log.steps.empty()) continue;
        j[msg("stage", log.stage, "_first_total")] = log.steps.front().l_total;
        j[msg("stage", log.stage, "_final_total")] = log.steps.back().l_total;
    }
    std::cout << j.dump(2) << "\n";
    return 0;
}

int cmd_train_stage(const std::string& config_path, const std::string& corpus_dir,
                    const std::string& model_in, const std::string& model_out,
                    const std::string& log_path, uint64_t seed) {
    train::StageConfig cfg = train::StageConfig::from_file(config_path);
    auto corpus = synth::load_corpus(corpus_dir);
    train::ModelState state = model_in.empty() ? train::toy_model(seed) : train::ModelState::load(model_in);
    train::TrainLog log = train::run_stage(cfg, corpus, state, model_out);
    if (!log_path.empty()) log.to_jsonl(log_path);
    nlohmann::json j = {{"stage", cfg.stage},
                        {"steps", log.steps.size()},
                        {"first_total", log.steps.front().l_total},
                        {"final_total", log.steps.back().l_total},
                        {"param_hash", hex64(state.param_hash())}};
    std::cout << j.dump(2) << "\n";
    return 0;
}

int cmd_eval(const std::string& model_dir, const std::string& corpus_dir) {
    train::ModelState state = train::ModelState::load(model_dir);
    auto corpus = synth::load_corpus(corpus_dir);
    double acc = train::evaluate_qa(state, corpus);
    std::cout << nlohmann::json{{"samples", corpus.size()}, {"exact_match", acc}}.dump(2) << "\n";
    return 0;
}

int cmd_merge_sweep(const std::string& ratios_csv, int frames, int edge, int text_len,
                    const std::string& model_dir, const std::string& corpus_dir,
                    const std::string& out_path) {
    std::vector<double> ratios = parse_double_list(ratios_csv);
    backbone::BackboneConfig cfg = backbone::BackboneConfig::toy();
    cfg.merge.enabled = true;
    int grid = edge / 28;
    check(grid >= 1 && grid * 28 == edge, ErrKind::contract, "merge-sweep: edge must be a multiple of 28");
    int64_t per_frame = static_cast<int64_t>(grid) * grid;
    int64_t patches = per_frame * frames;
    int64_t markers = static_cast<int64_t>(grid + 1) * frames;

    bool with_eval = !model_dir.empty() && !corpus_dir.empty();
    std::vector<synth::Sample> corpus;
    train::ModelState state;
    if (with_eval) {
        state = train::ModelState::load(model_dir);
        corpus = synth::load_corpus(corpus_dir);
    }

    std::ostringstream csv;
    csv << "ratio,last_layer_visual_tokens,total_gmacs" << (with_eval ? ",exact_match" : "") << "\n";
    for (double r : ratios) {
        check(r > 0.0 && r <= 1.0, ErrKind::contract, msg("merge-sweep: ratio ", r, " outside (0,1]"));
        auto schedule = profiler::simulate_merge_schedule(patches, markers, per_frame, cfg, 0.75, r);
        profiler::EmbedCost ec{patches, markers, 3ll * 28 * 28};
        profiler::FlopsReport rep = profiler::analytic_flops(schedule, cfg, text_len, &ec);
        csv << std::setprecision(6) << r << "," << schedule.back() << "," << rep.total_macs / 1e9;
        if (with_eval) {
            state.bb.cfg.merge.enabled = true;
            state.bb.cfg.merge.target_ratio = r;
            csv << "," << train::evaluate_qa(state, corpus);
        }
        csv << "\n";
    }
    if (out_path.empty()) {
        std::cout << csv.str();
    } else {
        std::ofstream out(out_path, std::ios::trunc);
        check(out.good(), ErrKind::io, msg("cannot write ", out_path));
        out << csv.str();
        std::cout << nlohmann::json{{"out", out_path}, {"rows", ratios.size()}}.dump(2) << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"encoder-free video-language model toolkit"};
    app.require_subcommand(1);
    app.fallthrough();
    std::string out_dir = default_out_dir();

    uint64_t seed = 1;
    int workers = 1;
    app.add_option("--seed", seed, "seed for all randomized work");
    app.add_option("--workers", workers, "worker threads for independent items");

    auto* tok_cmd = app.add_subcommand("tokenize", "turn a clip into a marker/patch token stream");
    std::string clip_path, ppm_dir, preset = "defaults", tier = "high";
    std::string tok_out = (std::filesystem::path(out_dir) / "tokens.jsonl").string();
    tok_cmd->add_option("--clip", clip_path, "clip tensor file");
    tok_cmd->add_option("--ppm-dir", ppm_dir, "directory of P6 .ppm frames");
    tok_cmd->add_option("--preset", preset, "resolution preset (defaults|table5)");
    tok_cmd->add_option("--tier", tier, "resolution tier (high|low)");
    tok_cmd->add_option("--out", tok_out, "output token stream path");

    auto* plan_cmd = app.add_subcommand("plan", "predict token counts for a resolution mixture");
    int frames = 8, high = 0, low = -1, src_h = -1, src_w = -1;
    std::string placement = "uniform", plan_emit = "total";
    plan_cmd->add_option("--frames", frames, "clip length in frames")->required();
    plan_cmd->add_option("--high", high, "frames at the high tier")->required();
    plan_cmd->add_option("--low", low, "frames at the low tier (default frames-high)");
    plan_cmd->add_option("--preset", preset, "resolution preset (defaults|table5)");
    plan_cmd->add_option("--placement", placement, "high-tier placement (uniform|first_k|stride)");
    plan_cmd->add_option("--src-h", src_h, "source frame height");
    plan_cmd->add_option("--src-w", src_w, "source frame width");
    plan_cmd->add_option("--emit", plan_emit, "output form (total|json)");

    auto* prof_cmd = app.add_subcommand("profile", "analytic cost reports and wall-time measurement");
    bool scenarios = false, measure = false, merged = false;
    std::string frames_list = "8,16,32", prof_emit = "table";
    int text_len = 64, prof_frames = 8;
    prof_cmd->add_flag("--scenarios", scenarios, "emit the scenario comparison table");
    prof_cmd->add_flag("--measure", measure, "measure prefill wall time on the toy model");
    prof_cmd->add_flag("--merge", merged, "enable merging in the profiled config");
    prof_cmd->add_option("--frames-list", frames_list, "frame counts for --scenarios");
    prof_cmd->add_option("--frames", prof_frames, "frame count for single reports");
    prof_cmd->add_option("--text", text_len, "text length in tokens");
    prof_cmd->add_option("--emit", prof_emit, "output form (table|json|csv)");

    auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of the full pipeline");
    bool tiny = false;
    int instances = 3;
    grad_cmd->add_flag("--tiny", tiny, "use the miniature pipeline");
    grad_cmd->add_option("--instances", instances, "number of random instances");

    auto* synth_cmd = app.add_subcommand("synth", "generate a procedural video/caption corpus");
    int n = 64, stage = 1, synth_frames = 1, edge = 56;
    std::string synth_out = (std::filesystem::path(out_dir) / "corpus").string();
    synth_cmd->add_option("--n", n, "sample count");
    synth_cmd->add_option("--stage", stage, "curriculum stage (1|2|3)");
    synth_cmd->add_option("--out", synth_out, "output directory");
    synth_cmd->add_option("--frames", synth_frames, "frames per clip (stages 2-3)");
    synth_cmd->add_option("--edge", edge, "frame edge in pixels");

    auto* train_cmd = app.add_subcommand("train", "run staged training");
    bool toy_pipeline = false;
    std::string workdir = (std::filesystem::path(out_dir) / "toyrun").string();
    std::string config_path, corpus_dir, model_in, model_out, log_path;
    train_cmd->add_flag("--toy-pipeline", toy_pipeline, "run all three stages at toy scale");
    train_cmd->add_option("--workdir", workdir, "working directory for --toy-pipeline");
    train_cmd->add_option("--config", config_path, "stage config file (key=value lines)");
    train_cmd->add_option("--corpus", corpus_dir, "corpus directory with manifest.jsonl");
    train_cmd->add_option("--model-in", model_in, "checkpoint to continue from (empty: fresh)");
    train_cmd->add_option("--model-out", model_out, "checkpoint directory to write");
    train_cmd->add_option("--log", log_path, "step log output (JSON lines)");

    auto* eval_cmd = app.add_subcommand("eval", "exact-match QA evaluation");
    std::string eval_model, eval_corpus;
    eval_cmd->add_option("--model", eval_model, "checkpoint directory")->required();
    eval_cmd->add_option("--corpus", eval_corpus, "question/answer corpus directory")->required();

    auto* sweep_cmd = app.add_subcommand("merge-sweep", "token/cost sweep over merge ratios");
    std::string ratios = "0.9,0.75,0.5,0.25", sweep_model, sweep_corpus, sweep_out;
    int sweep_frames = 8, sweep_edge = 56, sweep_text = 16;
    sweep_cmd->add_option("--ratios", ratios, "comma-separated merge ratios");
    sweep_cmd->add_option("--frames", sweep_frames, "frames per clip");
    sweep_cmd->add_option("--edge", sweep_edge, "frame edge in pixels");
    sweep_cmd->add_option("--text", sweep_text, "text length in tokens");
    sweep_cmd->add_option("--model", sweep_model, "optional checkpoint for accuracy column");
    sweep_cmd->add_option("--corpus", sweep_corpus, "optional QA corpus for accuracy column");
    sweep_cmd->add_option("--out", sweep_out, "CSV output path (default stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        evlm::threading::set_threads(workers);
        if (app.got_subcommand(tok_cmd))
            return cmd_tokenize(clip_path, ppm_dir, preset, tier, tok_out);
        if (app.got_subcommand(plan_cmd))
            return cmd_plan(frames, high, low, preset, placement, src_h, src_w, plan_emit);
        if (app.got_subcommand(prof_cmd))
            return cmd_profile(scenarios, measure, frames_list, prof_frames, text_len, merged,
                               prof_emit, seed);
        if (app.got_subcommand(grad_cmd)) return cmd_gradcheck(tiny, instances, seed);
        if (app.got_subcommand(synth_cmd)) return cmd_synth(n, stage, seed, synth_out, synth_frames, edge);
        if (app.got_subcommand(train_cmd)) {
            if (toy_pipeline) return cmd_train_pipeline(workdir, seed);
            check(!config_path.empty() && !corpus_dir.empty(), ErrKind::contract,
                  "train: provide --toy-pipeline or --config with --corpus");
            return cmd_train_stage(config_path, corpus_dir, model_in, model_out, log_path, seed);
        }
        if (app.got_subcommand(eval_cmd)) return cmd_eval(eval_model, eval_corpus);
        if (app.got_subcommand(sweep_cmd))
            return cmd_merge_sweep(ratios, sweep_frames, sweep_edge, sweep_text, sweep_model,
                                   sweep_corpus, sweep_out);
        std::cerr << "error: no subcommand\n";
        return 2;
    } catch (const evlm::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
