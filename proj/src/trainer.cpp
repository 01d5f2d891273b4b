#include "evlm/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "evlm/elvt.hpp"
#include "evlm/tokenize.hpp"

namespace evlm::train {

StageConfig StageConfig::paper_defaults(int stage) {
    check(stage >= 1 && stage <= 3, ErrKind::contract, msg("invalid stage ", stage));
    StageConfig c;
    c.stage = stage;
    switch (stage) {
        case 1:
            c.lr = 4e-5;
            c.warmup_ratio = 0.03;
            c.batch = 256;
            c.epochs = 1;
            c.frames = 1;
            break;
        case 2:
            c.lr = 4e-5;
            c.warmup_ratio = 0.01;
            c.batch = 256;
            c.epochs = 2;
            c.frames = 16;
            break;
        case 3:
            c.lr = 2e-5;
            c.warmup_ratio = 0.01;
            c.batch = 128;
            c.epochs = 1;
            c.frames = 32;
            c.merge_enabled = true;
            c.gen_only = true;
            break;
    }
    return c;
}

StageConfig StageConfig::toy(int stage) {
    check(stage >= 1 && stage <= 3, ErrKind::contract, msg("invalid stage ", stage));
    StageConfig c;
    c.stage = stage;
    c.batch = 8;
    c.epochs = 1;
    switch (stage) {
        case 1:
            c.lr = 3e-3;
            c.warmup_ratio = 0.03;
            c.frames = 1;
            c.steps_override = 200;
            break;
        case 2:
            c.lr = 2e-3;
            c.warmup_ratio = 0.01;
            c.frames = 4;
            c.steps_override = 100;
            break;
        case 3:
            c.lr = 1e-3;
            c.warmup_ratio = 0.01;
            c.frames = 8;
            c.steps_override = 240;
            c.merge_enabled = true;
            c.gen_only = true;
            break;
    }
    return c;
}

void StageConfig::validate() const {
    check(stage >= 1 && stage <= 3, ErrKind::contract, msg("invalid stage ", stage));
    check(lr > 0.0, ErrKind::contract, "lr must be positive");
    check(warmup_ratio >= 0.0 && warmup_ratio < 1.0, ErrKind::contract, "warmup_ratio must be in [0,1)");
    check(batch >= 1 && epochs >= 1 && frames >= 1, ErrKind::contract,
          "batch, epochs and frames must be positive");
    check(steps_override >= 0, ErrKind::contract, "steps_override must be non-negative");
    check(weight_decay >= 0.0, ErrKind::contract, "weight_decay must be non-negative");
    check(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0, ErrKind::contract,
          "betas must be in (0,1)");
    check(adam_eps > 0.0, ErrKind::contract, "adam_eps must be positive");
    if (stage == 1) check(frames == 1, ErrKind::contract, "stage 1 trains on single-frame clips");
    if (stage >= 2) check(frames > 1, ErrKind::contract, "stages 2 and 3 train on multi-frame clips");
    check(merge_enabled == (stage == 3), ErrKind::contract,
          "merging is enabled exactly in stage 3");
    check(gen_only == (stage == 3), ErrKind::contract,
          "stage 3 trains on the generative loss only; stages 1-2 use all losses");
}

void StageConfig::to_file(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    check(out.good(), ErrKind::io, msg("cannot write ", path));
    out << "stage=" << stage << "\n";
    out << "lr=" << std::setprecision(17) << lr << "\n";
    out << "warmup_ratio=" << warmup_ratio << "\n";
    out << "batch=" << batch << "\n";
    out << "epochs=" << epochs << "\n";
    out << "steps_override=" << steps_override << "\n";
    out << "frames=" << frames << "\n";
    out << "merge_enabled=" << (merge_enabled ? 1 : 0) << "\n";
    out << "gen_only=" << (gen_only ? 1 : 0) << "\n";
    out << "weight_decay=" << weight_decay << "\n";
    out << "beta1=" << beta1 << "\n";
    out << "beta2=" << beta2 << "\n";
    out << "adam_eps=" << adam_eps << "\n";
    out << "seed=" << seed << "\n";
    check(out.good(), ErrKind::io, msg("write failed for ", path));
}

StageConfig StageConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    check(in.good(), ErrKind::io, msg("cannot open ", path));
    StageConfig c;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        auto eq = line.find('=');
        check(eq != std::string::npos, ErrKind::contract,
              msg(path, ":", lineno, ": expected key=value, got '", line, "'"));
        std::string key = line.substr(0, eq);
        std::string val = line.substr(eq + 1);
        try {
            if (key == "stage")
                c.stage = std::stoi(val);
            else if (key == "lr")
                c.lr = std::stod(val);
            else if (key == "warmup_ratio")
                c.warmup_ratio = std::stod(val);
            else if (key == "batch")
                c.batch = std::stoi(val);
            else if (key == "epochs")
                c.epochs = std::stoi(val);
            else if (key == "steps_override")
                c.steps_override = std::stoi(val);
            else if (key == "frames")
                c.frames = std::stoi(val);
            else if (key == "merge_enabled")
                c.merge_enabled = std::stoi(val) != 0;
            else if (key == "gen_only")
                c.gen_only = std::stoi(val) != 0;
            else if (key == "weight_decay")
                c.weight_decay = std::stod(val);
            else if (key == "beta1")
                c.beta1 = std::stod(val);
            else if (key == "beta2")
                c.beta2 = std::stod(val);
            else if (key == "adam_eps")
                c.adam_eps = std::stod(val);
            else if (key == "seed")
                c.seed = std::stoull(val);
            else
                raise(ErrKind::contract, msg(path, ":", lineno, ": unknown key '", key, "'"));
        } catch (const Error&) {
            throw;
        } catch (const std::exception&) {
            raise(ErrKind::contract, msg(path, ":", lineno, ": cannot parse value '", val, "'"));
        }
    }
    c.validate();
    return c;
}

double lr_at(int64_t step, int64_t total_steps, const StageConfig& cfg) {
    check(total_steps > 0, ErrKind::contract, "lr_at: total_steps must be positive");
    check(step >= 0 && step < total_steps, ErrKind::contract,
          msg("lr_at: step ", step, " outside [0,", total_steps, ")"));
    int64_t warm = static_cast<int64_t>(
        std::ceil(cfg.warmup_ratio * static_cast<double>(total_steps)));
    if (warm > 0 && step < warm)
        return cfg.lr * static_cast<double>(step) / static_cast<double>(warm);
    int64_t decay = total_steps - 1 - warm;
    double progress =
        decay > 0 ? static_cast<double>(step - warm) / static_cast<double>(decay) : 0.0;
    constexpr double kPi = 3.14159265358979323846;
    return cfg.lr * 0.5 * (1.0 + std::cos(kPi * progress));
}

std::vector<std::pair<std::string, Tensor>> ModelState::named_params() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (auto& [n, t] : pe.named_params()) out.emplace_back("pe." + n, t);
    for (auto& [n, t] : bb.named_params()) out.emplace_back("bb." + n, t);
    for (auto& [n, t] : head.named_params()) out.emplace_back("head." + n, t);
    return out;
}

uint64_t ModelState::param_hash() const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [name, t] : named_params()) {
        h = fnv1a64(name.data(), name.size(), h);
        int64_t n = t.numel();
        for (int64_t i = 0; i < n; ++i) {
            float f = static_cast<float>(t.at(i));
            uint32_t bits;
            std::memcpy(&bits, &f, 4);
            unsigned char le[4] = {static_cast<unsigned char>(bits & 0xff),
                                   static_cast<unsigned char>((bits >> 8) & 0xff),
                                   static_cast<unsigned char>((bits >> 16) & 0xff),
                                   static_cast<unsigned char>((bits >> 24) & 0xff)};
            h = fnv1a64(le, 4, h);
        }
    }
    return h;
}

void ModelState::save(const std::string& dir) const {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    check(!ec, ErrKind::io, msg("cannot create ", dir, ": ", ec.message()));
    pe.save((fs::path(dir) / "pe").string());
    bb.save((fs::path(dir) / "bb").string());
    head.save((fs::path(dir) / "head").string());
    nlohmann::json meta = {{"completed_stage", completed_stage}, {"guidance", gcfg.to_json()}};
    std::ofstream out(fs::path(dir) / "state.json", std::ios::trunc);
    check(out.good(), ErrKind::io, msg("cannot write ", dir, "/state.json"));
    out << meta.dump(2) << "\n";
}

ModelState ModelState::load(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream in(fs::path(dir) / "state.json");
    check(in.good(), ErrKind::io, msg("cannot open ", dir, "/state.json"));
    nlohmann::json meta = nlohmann::json::parse(in);
    ModelState s{embed::PatchEmbedParams::load((fs::path(dir) / "pe").string()),
                 backbone::BackboneParams::load((fs::path(dir) / "bb").string()),
                 guidance::GuidanceHead::load((fs::path(dir) / "head").string()),
                 guidance::GuidanceConfig::from_json(meta.at("guidance")),
                 meta.at("completed_stage").get<int>()};
    return s;
}

ModelState toy_model(uint64_t seed) {
    Rng rng(seed);
    embed::PatchEmbedConfig pcfg;  // patch 28, dim 128, heads 4
    backbone::BackboneConfig bcfg = backbone::BackboneConfig::toy();
    ModelState s{embed::PatchEmbedParams::init(pcfg, rng), backbone::BackboneParams::init(bcfg, rng),
                 guidance::GuidanceHead::init(bcfg.dim, guidance::TeacherGeometry{}.dim, rng),
                 guidance::GuidanceConfig{}, 0};
    return s;
}

void TrainLog::to_jsonl(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    check(out.good(), ErrKind::io, msg("cannot write ", path));
    out << nlohmann::json{{"stage", stage}, {"checkpoint_dir", checkpoint_dir}}.dump() << "\n";
    for (const auto& s : steps)
        out << nlohmann::json{{"step", s.step},
                              {"lr", s.lr},
                              {"l_gen", s.l_gen},
                              {"l_mse", s.l_mse},
                              {"l_con", s.l_con},
                              {"l_total", s.l_total},
                              {"step_ms", s.step_ms},
                              {"tokens", s.tokens}}
                   .dump()
            << "\n";
    check(out.good(), ErrKind::io, msg("write failed for ", path));
}

namespace {

struct Prepared {
    tok::TokenStream stream;
    guidance::TeacherFeatures teacher;
    std::vector<int> text_ids;
    std::vector<int64_t> target_rows;
    std::vector<int> target_ids;
};

Prepared prepare_sample(const synth::Sample& s, const StageConfig& cfg,
                        const guidance::GuidanceConfig& gcfg) {
    check(s.spec.frames == cfg.frames, ErrKind::contract,
          msg("corpus/stage mismatch: sample ", s.id, " has ", s.spec.frames, " frames, stage ",
              cfg.stage, " expects ", cfg.frames));
    auto [clip, caption] = synth::generate(s.spec);
    Prepared p;
    p.stream = tok::tokenize(clip, video::ResolutionPolicy::defaults());
    if (!cfg.gen_only) p.teacher = guidance::mock_teacher(clip, gcfg.geometry, gcfg.teacher_seed);

    if (cfg.stage == 3) {
        check(!s.answer.empty(), ErrKind::contract,
              msg("corpus/stage mismatch: sample ", s.id, " has no question/answer pair"));
        std::vector<int> q = tok::encode_text(s.question);
        std::vector<int> a = tok::encode_text(s.answer);
        p.text_ids.push_back(tok::kBos);
        p.text_ids.insert(p.text_ids.end(), q.begin(), q.end());
        p.text_ids.push_back(tok::kSep);
        int64_t answer_from = static_cast<int64_t>(p.text_ids.size());
        p.text_ids.insert(p.text_ids.end(), a.begin(), a.end());
        p.text_ids.push_back(tok::kEos);
        for (int64_t j = answer_from; j < static_cast<int64_t>(p.text_ids.size()); ++j) {
            p.target_rows.push_back(j - 1);
            p.target_ids.push_back(p.text_ids[static_cast<size_t>(j)]);
        }
    } else {
        check(!caption.empty(), ErrKind::contract, msg("sample ", s.id, " has an empty caption"));
        std::vector<int> cap = tok::encode_text(caption);
        p.text_ids.push_back(tok::kBos);
        p.text_ids.insert(p.text_ids.end(), cap.begin(), cap.end());
        p.text_ids.push_back(tok::kEos);
        for (int64_t j = 1; j < static_cast<int64_t>(p.text_ids.size()); ++j) {
            p.target_rows.push_back(j - 1);
            p.target_ids.push_back(p.text_ids[static_cast<size_t>(j)]);
        }
    }
    return p;
}

// Decoupled-weight-decay adaptive-moment optimizer state, one slot per param.
struct AdamSlot {
    std::vector<double> m, v;
};

void adam_step(std::vector<std::pair<std::string, Tensor>>& params, std::vector<AdamSlot>& slots,
               const StageConfig& cfg, double lr, int64_t t) {
    double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = params[pi].second;
        AdamSlot& slot = slots[pi];
        int64_t n = p.numel();
        if (!p.has_grad()) continue;  // param unused by this stage's losses
        // Raw-pointer walk; per-element set/grad_at accessors are too slow for
        // a couple million params every step.
        Storage& ws = p.store();
        Storage& gs = p.grad_store();
        auto run = [&](auto* wp, const auto* gp) {
            for (int64_t i = 0; i < n; ++i) {
                double g = static_cast<double>(gp[i]);
                double m = slot.m[static_cast<size_t>(i)] =
                    cfg.beta1 * slot.m[static_cast<size_t>(i)] + (1.0 - cfg.beta1) * g;
                double v = slot.v[static_cast<size_t>(i)] =
                    cfg.beta2 * slot.v[static_cast<size_t>(i)] + (1.0 - cfg.beta2) * g * g;
                double update = (m / bc1) / (std::sqrt(v / bc2) + cfg.adam_eps);
                double w = static_cast<double>(wp[i]);
                wp[i] = static_cast<std::remove_reference_t<decltype(wp[0])>>(
                    w - lr * (update + cfg.weight_decay * w));
            }
        };
        if (ws.prec() == Prec::f32)
            run(ws.f32(), gs.f32());
        else
            run(ws.f64(), gs.f64());
    }
}

}  // namespace

TrainLog run_stage(const StageConfig& cfg, const std::vector<synth::Sample>& corpus, ModelState& state,
                   const std::string& checkpoint_dir) {
    cfg.validate();
    check(!corpus.empty(), ErrKind::contract, "run_stage: empty corpus");
    check(state.completed_stage == cfg.stage - 1, ErrKind::contract,
          msg("stage ", cfg.stage, " requires a model that completed stage ", cfg.stage - 1,
              ", got stage ", state.completed_stage, "; stages must run in order"));

    state.bb.cfg.merge.enabled = cfg.merge_enabled;
    state.pe.set_requires_grad(true);
    state.bb.set_requires_grad(true);
    for (auto& [n, t] : state.head.named_params()) t.set_requires_grad(true);

    std::vector<Prepared> prep;
    prep.reserve(corpus.size());
    for (const auto& s : corpus) prep.push_back(prepare_sample(s, cfg, state.gcfg));

    auto params = state.named_params();
    std::vector<AdamSlot> slots(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
        size_t n = static_cast<size_t>(params[i].second.numel());
        slots[i].m.assign(n, 0.0);
        slots[i].v.assign(n, 0.0);
    }

    int64_t n = static_cast<int64_t>(corpus.size());
    int64_t steps_per_epoch = (n + cfg.batch - 1) / cfg.batch;
    int64_t total = cfg.steps_override > 0 ? cfg.steps_override
                                           : static_cast<int64_t>(cfg.epochs) * steps_per_epoch;
    check(total > 0, ErrKind::contract, "run_stage: zero training steps");

    TrainLog log;
    log.stage = cfg.stage;
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    int64_t cursor = n;  // forces a shuffle before the first batch
    int64_t epoch = 0;

    for (int64_t step = 0; step < total; ++step) {
        auto t0 = std::chrono::steady_clock::now();
        std::vector<int64_t> batch_idx;
        for (int b = 0; b < cfg.batch; ++b) {
            if (cursor >= n) {
                Rng shuffle_rng(cfg.seed ^ (0x5851f42d4c957f2dull + static_cast<uint64_t>(epoch)));
                for (int64_t i = n - 1; i > 0; --i)
                    std::swap(order[static_cast<size_t>(i)],
                              order[static_cast<size_t>(shuffle_rng.uniform_int(0, i))]);
                cursor = 0;
                ++epoch;
            }
            batch_idx.push_back(order[static_cast<size_t>(cursor++)]);
        }

        double lr = lr_at(step, total, cfg);
        for (auto& [nm, t] : params) t.zero_grad();

        guidance::LossBreakdown loss;
        int64_t tokens = 0;
        {
            Tape tape;
            std::vector<guidance::GuidanceSample> batch;
            for (int64_t idx : batch_idx) {
                const Prepared& p = prep[static_cast<size_t>(idx)];
                embed::FeatureSeq seq = embed::embed(p.stream, state.pe);
                seq = embed::marker_cross_attend(seq, state.pe);
                backbone::ForwardTrace trace = backbone::forward(seq, p.text_ids, state.bb);
                tokens += trace.rows_per_layer.empty() ? 0 : trace.rows_per_layer.front();
                batch.push_back({std::move(trace), p.teacher, p.target_rows, p.target_ids});
            }
            loss = guidance::total_loss(batch, state.head, state.gcfg, cfg.gen_only);
            check(std::isfinite(loss.l_total), ErrKind::numeric,
                  msg("stage ", cfg.stage, " step ", step, ": non-finite loss ", loss.l_total));
            tape.backward(loss.total);
        }
        adam_step(params, slots, cfg, lr, step + 1);

        auto t1 = std::chrono::steady_clock::now();
        StepRecord rec;
        rec.step = step;
        rec.lr = lr;
        rec.l_gen = loss.l_gen;
        rec.l_mse = loss.l_mse;
        rec.l_con = loss.l_con;
        rec.l_total = loss.l_total;
        rec.step_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
        rec.tokens = tokens;
        log.steps.push_back(rec);
    }

    state.completed_stage = cfg.stage;
    if (!checkpoint_dir.empty()) {
        state.save(checkpoint_dir);
        log.checkpoint_dir = checkpoint_dir;
    }
    return log;
}

double evaluate_qa(const ModelState& state, const std::vector<synth::Sample>& corpus) {
    check(!corpus.empty(), ErrKind::contract, "evaluate_qa: empty corpus");
    NoGradGuard ng;
    int hits = 0, total = 0;
    for (const auto& s : corpus) {
        check(!s.answer.empty(), ErrKind::contract,
              msg("evaluate_qa: sample ", s.id, " has no question/answer pair"));
        auto [clip, caption] = synth::generate(s.spec);
        (void)caption;
        tok::TokenStream stream = tok::tokenize(clip, video::ResolutionPolicy::defaults());
        embed::FeatureSeq seq = embed::embed(stream, state.pe);
        seq = embed::marker_cross_attend(seq, state.pe);
        std::vector<int> prompt;
        prompt.push_back(tok::kBos);
        std::vector<int> q = tok::encode_text(s.question);
        prompt.insert(prompt.end(), q.begin(), q.end());
        prompt.push_back(tok::kSep);
        std::vector<int> out = backbone::greedy_generate(seq, prompt, state.bb, 24, tok::kEos);
        if (tok::decode_text(out) == s.answer) ++hits;
        ++total;
    }
    return static_cast<double>(hits) / static_cast<double>(total);
}

PipelineResult run_toy_pipeline(const std::string& workdir, uint64_t seed) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(workdir, ec);
    check(!ec, ErrKind::io, msg("cannot create ", workdir, ": ", ec.message()));

    StageConfig c1 = StageConfig::toy(1);
    StageConfig c2 = StageConfig::toy(2);
    StageConfig c3 = StageConfig::toy(3);
    c1.seed = seed + 101;
    c2.seed = seed + 202;
    c3.seed = seed + 303;

    auto corpus1 = synth::make_corpus(64, 1, seed + 11, (fs::path(workdir) / "stage1").string(),
                                      c1.frames);
    auto corpus2 = synth::make_corpus(32, 2, seed + 22, (fs::path(workdir) / "stage2").string(),
                                      c2.frames);
    auto corpus3 = synth::make_corpus(16, 3, seed + 33, (fs::path(workdir) / "stage3").string(),
                                      c3.frames);

    PipelineResult res;
    res.state = toy_model(seed);
    res.qa_before = evaluate_qa(res.state, corpus3);
    res.checkpoint_dir = (fs::path(workdir) / "ckpt").string();

    res.logs.push_back(run_stage(c1, corpus1, res.state));
    res.logs.push_back(run_stage(c2, corpus2, res.state));
    res.logs.push_back(run_stage(c3, corpus3, res.state, res.checkpoint_dir));
    for (size_t i = 0; i < res.logs.size(); ++i)
        res.logs[i].to_jsonl((fs::path(workdir) / msg("stage", i + 1, "_log.jsonl")).string());

    res.qa_after = evaluate_qa(res.state, corpus3);
    return res;
}

}  // namespace evlm::train
