#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "evlm/synth.hpp"
#include "evlm/trainer.hpp"

using namespace evlm;

namespace {

double centroid_x(const video::VideoClip& clip, int t) {
    double sum = 0.0, weight = 0.0;
    for (int y = 0; y < clip.height; ++y)
        for (int x = 0; x < clip.width; ++x) {
            // Luma distance from the dark background singles out the shape.
            double lum = clip.at(t, 0, y, x) + clip.at(t, 1, y, x) + clip.at(t, 2, y, x);
            double w = std::abs(lum - 3 * 0.08);
            sum += w * x;
            weight += w;
        }
    return weight > 0.0 ? sum / weight : -1.0;
}

int64_t lit_pixels(const video::VideoClip& clip, int t) {
    int64_t n = 0;
    for (int y = 0; y < clip.height; ++y)
        for (int x = 0; x < clip.width; ++x)
            if (std::abs(clip.at(t, 0, y, x) - 0.08f) > 1e-4f ||
                std::abs(clip.at(t, 1, y, x) - 0.08f) > 1e-4f ||
                std::abs(clip.at(t, 2, y, x) - 0.08f) > 1e-4f)
                ++n;
    return n;
}

}  // namespace

TEST_SUITE("synth_trainer") {

TEST_CASE("clip generation is deterministic in the spec") {
    synth::SynthSpec spec;
    spec.seed = 42;
    spec.frames = 4;
    spec.shape = synth::ShapeKind::circle;
    spec.color = 3;
    spec.motion = synth::MotionKind::right;

    auto [a, cap_a] = synth::generate(spec);
    auto [b, cap_b] = synth::generate(spec);
    CHECK(a.pixels == b.pixels);
    CHECK(cap_a == cap_b);
    CHECK(a.frames == 4);
    CHECK(a.fps == 4.0);

    spec.seed = 43;
    auto [c, cap_c] = synth::generate(spec);
    CHECK(a.pixels != c.pixels);  // placement differs with the seed
}

TEST_CASE("motion is visible in the pixels, not just the caption") {
    synth::SynthSpec spec;
    spec.seed = 7;
    spec.frames = 6;
    spec.shape = synth::ShapeKind::square;
    spec.color = 1;

    SUBCASE("rightward drift shifts the centroid") {
        spec.motion = synth::MotionKind::right;
        auto [clip, cap] = synth::generate(spec);
        double x0 = centroid_x(clip, 0), x5 = centroid_x(clip, 5);
        CHECK(x5 > x0 + 5.0);
    }
    SUBCASE("leftward drift shifts it the other way") {
        spec.motion = synth::MotionKind::left;
        auto [clip, cap] = synth::generate(spec);
        CHECK(centroid_x(clip, 5) < centroid_x(clip, 0) - 5.0);
    }
    SUBCASE("a still clip repeats its first frame exactly") {
        spec.motion = synth::MotionKind::still;
        auto [clip, cap] = synth::generate(spec);
        for (int t = 1; t < 6; ++t)
            for (int y = 0; y < clip.height; ++y)
                for (int x = 0; x < clip.width; ++x)
                    CHECK(clip.at(t, 0, y, x) == clip.at(0, 0, y, x));
    }
}

TEST_CASE("every motion keeps the shape inside the frame") {
    using M = synth::MotionKind;
    for (M m : {M::still, M::right, M::left, M::up, M::down, M::bounce}) {
        synth::SynthSpec spec;
        spec.seed = 11;
        spec.frames = 8;
        spec.motion = m;
        auto [clip, cap] = synth::generate(spec);
        for (int t = 0; t < clip.frames; ++t) {
            INFO("motion ", synth::motion_name(m), " frame ", t);
            CHECK(lit_pixels(clip, t) >= 25);  // shape never vanishes off-screen
        }
    }
}

TEST_CASE("captions and questions follow the fixed templates") {
    synth::SynthSpec spec;
    spec.seed = 1;
    spec.frames = 1;
    spec.shape = synth::ShapeKind::square;
    spec.color = 0;
    CHECK(synth::caption_for(spec) == "a red square");

    spec.frames = 4;
    spec.motion = synth::MotionKind::right;
    CHECK(synth::caption_for(spec) == "a red square moves right");

    spec.shape_count = 2;
    spec.shape2 = synth::ShapeKind::circle;
    spec.color2 = 1;
    std::string cap = synth::caption_for(spec);
    CHECK(cap.find("near a") != std::string::npos);
    CHECK(cap.find(synth::color_name(1)) != std::string::npos);
    spec.shape_count = 1;

    auto qa_static = synth::qa_for([&] {
        synth::SynthSpec s = spec;
        s.frames = 1;
        s.motion = synth::MotionKind::still;
        return s;
    }());
    REQUIRE(qa_static.size() == 2);  // no motion question on a single frame
    CHECK(qa_static[0].question == "what color is the square");
    CHECK(qa_static[0].answer == "red");
    CHECK(qa_static[1].answer == "square");

    auto qa_moving = synth::qa_for(spec);
    REQUIRE(qa_moving.size() == 3);
    CHECK(qa_moving[2].question == "how does the square move");
    CHECK(qa_moving[2].answer == synth::motion_name(synth::MotionKind::right));
}

TEST_CASE("corpus files round trip and clips regenerate from their specs") {
    namespace fs = std::filesystem;
    std::string dir = "/tmp/evlm_test_corpus";
    fs::remove_all(dir);
    auto made = synth::make_corpus(6, 3, 77, dir, 2, 24);
    auto loaded = synth::load_corpus(dir);
    REQUIRE(loaded.size() == 6);

    for (size_t i = 0; i < loaded.size(); ++i) {
        const auto& s = loaded[i];
        CHECK(s.id == made[i].id);
        CHECK(s.spec.seed == made[i].spec.seed);
        CHECK(!s.question.empty());  // stage 3 carries QA pairs
        CHECK(!s.answer.empty());

        // The stored clip equals a fresh render of the spec: training can
        // regenerate instead of trusting the file.
        video::VideoClip stored = video::clip_from_elvt(s.clip_path);
        auto [fresh, cap] = synth::generate(s.spec);
        CHECK(stored.pixels == fresh.pixels);
    }
    fs::remove_all(dir);
}

TEST_CASE("stage-1 and stage-2 corpora carry captions instead of questions") {
    namespace fs = std::filesystem;
    std::string dir = "/tmp/evlm_test_corpus1";
    fs::remove_all(dir);
    synth::make_corpus(3, 1, 5, dir, 1, 24);
    auto loaded = synth::load_corpus(dir);
    REQUIRE(loaded.size() == 3);
    for (const auto& s : loaded) {
        CHECK(s.question.empty());
        CHECK(s.caption == synth::caption_for(s.spec));
        CHECK(s.spec.frames == 1);
        CHECK(s.spec.motion == synth::MotionKind::still);
    }
    fs::remove_all(dir);
}

TEST_CASE("the learning-rate schedule warms up linearly and decays to zero") {
    train::StageConfig cfg = train::StageConfig::toy(1);
    cfg.lr = 0.02;
    cfg.warmup_ratio = 0.03;
    int64_t total = 100;  // warmup = ceil(3) = 3 steps

    CHECK(train::lr_at(0, total, cfg) == 0.0);
    CHECK(train::lr_at(1, total, cfg) == doctest::Approx(0.02 / 3.0).epsilon(1e-12));
    CHECK(train::lr_at(3, total, cfg) == doctest::Approx(0.02).epsilon(1e-12));
    // Midpoint of the cosine leg: (3 + 99) / 2 = 51 -> half the peak.
    CHECK(train::lr_at(51, total, cfg) == doctest::Approx(0.01).epsilon(1e-9));
    CHECK(train::lr_at(99, total, cfg) == doctest::Approx(0.0).epsilon(1e-15));

    // Never negative, never above peak, single maximum at the warmup end.
    double prev = -1.0;
    for (int64_t s = 0; s <= 3; ++s) {
        double v = train::lr_at(s, total, cfg);
        CHECK(v >= prev);
        prev = v;
    }
    for (int64_t s = 3; s < total; ++s) {
        double v = train::lr_at(s, total, cfg);
        CHECK(v <= prev + 1e-15);
        prev = v;
    }
}

TEST_CASE("stage configs validate their invariants and survive files") {
    namespace fs = std::filesystem;
    train::StageConfig s1 = train::StageConfig::toy(1);
    CHECK_NOTHROW(s1.validate());
    CHECK(s1.frames == 1);
    CHECK_FALSE(s1.merge_enabled);
    CHECK_FALSE(s1.gen_only);

    train::StageConfig s3 = train::StageConfig::toy(3);
    CHECK(s3.merge_enabled);
    CHECK(s3.gen_only);
    CHECK(s3.frames > 1);

    train::StageConfig bad = train::StageConfig::toy(1);
    bad.frames = 4;  // single-frame stage cannot see multi-frame clips
    CHECK_THROWS_AS(bad.validate(), Error);

    bad = train::StageConfig::toy(2);
    bad.merge_enabled = true;  // merging only arrives in stage 3
    CHECK_THROWS_AS(bad.validate(), Error);

    bad = train::StageConfig::toy(3);
    bad.gen_only = false;  // stage 3 drops the guidance terms
    CHECK_THROWS_AS(bad.validate(), Error);

    std::string path = "/tmp/evlm_test_stage.cfg";
    train::StageConfig out = train::StageConfig::toy(2);
    out.lr = 0.0123;
    out.seed = 99;
    out.to_file(path);
    train::StageConfig in = train::StageConfig::from_file(path);
    fs::remove(path);
    CHECK(in.stage == out.stage);
    CHECK(in.lr == out.lr);
    CHECK(in.seed == out.seed);
    CHECK(in.frames == out.frames);

    std::ofstream(path) << "stage=1\nnot_a_key=2\n";
    CHECK_THROWS_AS(train::StageConfig::from_file(path), Error);
    fs::remove(path);
}

TEST_CASE("paper-scale presets pin the published schedule") {
    auto s1 = train::StageConfig::paper_defaults(1);
    auto s2 = train::StageConfig::paper_defaults(2);
    auto s3 = train::StageConfig::paper_defaults(3);
    CHECK(s1.frames == 1);
    CHECK(s2.frames == 16);
    CHECK(s3.frames == 32);
    CHECK(s1.lr == 4e-5);
    CHECK(s2.lr == 4e-5);
    CHECK(s3.lr == 2e-5);
    CHECK(s1.warmup_ratio == 0.03);
    CHECK(s2.warmup_ratio == 0.01);
    CHECK(s1.batch == 256);
    CHECK(s3.batch == 128);
    CHECK(s2.epochs == 2);
    CHECK_FALSE(s2.merge_enabled);
    CHECK(s3.merge_enabled);
    CHECK(s3.gen_only);
}

TEST_CASE("stages must run in order") {
    namespace fs = std::filesystem;
    std::string dir = "/tmp/evlm_test_order";
    fs::remove_all(dir);
    synth::make_corpus(4, 2, 13, dir, 2, 24);
    auto corpus = synth::load_corpus(dir);

    train::ModelState state = train::toy_model(3);
    train::StageConfig cfg = train::StageConfig::toy(2);
    cfg.steps_override = 1;
    CHECK_THROWS_WITH_AS(train::run_stage(cfg, corpus, state),
                         doctest::Contains("stages must run in order"), Error);
    fs::remove_all(dir);
}

TEST_CASE("a short stage-1 run is finite, logged, and seed-reproducible") {
    namespace fs = std::filesystem;
    std::string dir = "/tmp/evlm_test_run1";
    fs::remove_all(dir);
    synth::make_corpus(8, 1, 21, dir, 1, 56);
    auto corpus = synth::load_corpus(dir);

    train::StageConfig cfg = train::StageConfig::toy(1);
    cfg.batch = 4;
    cfg.steps_override = 5;

    train::ModelState a = train::toy_model(9);
    uint64_t before = a.param_hash();
    train::TrainLog log = train::run_stage(cfg, corpus, a);

    REQUIRE(log.steps.size() == 5);
    for (const auto& rec : log.steps) {
        CHECK(std::isfinite(rec.l_total));
        CHECK(rec.l_gen > 0.0);
        CHECK(rec.tokens > 0);
    }
    CHECK(log.steps[0].lr == train::lr_at(0, 5, cfg));
    CHECK(log.steps[3].lr == train::lr_at(3, 5, cfg));
    CHECK(a.param_hash() != before);
    CHECK(a.completed_stage == 1);

    // Same seed, fresh model: identical trajectory and final weights.
    train::ModelState b = train::toy_model(9);
    train::TrainLog log_b = train::run_stage(cfg, corpus, b);
    CHECK(a.param_hash() == b.param_hash());
    CHECK(log.steps.back().l_total == log_b.steps.back().l_total);

    // A different data order changes the outcome.
    train::ModelState c = train::toy_model(9);
    train::StageConfig cfg2 = cfg;
    cfg2.seed = cfg.seed + 1;
    train::run_stage(cfg2, corpus, c);
    CHECK(a.param_hash() != c.param_hash());
    fs::remove_all(dir);
}

TEST_CASE("model state checkpoints reload to the same hash") {
    namespace fs = std::filesystem;
    train::ModelState state = train::toy_model(17);
    std::string dir = "/tmp/evlm_test_state";
    fs::remove_all(dir);
    state.save(dir);
    train::ModelState back = train::ModelState::load(dir);
    fs::remove_all(dir);
    CHECK(back.param_hash() == state.param_hash());
    CHECK(back.completed_stage == state.completed_stage);
    CHECK(back.gcfg.geometry.rows == state.gcfg.geometry.rows);
}

TEST_CASE("an untrained model answers almost nothing") {
    namespace fs = std::filesystem;
    std::string dir = "/tmp/evlm_test_eval";
    fs::remove_all(dir);
    synth::make_corpus(10, 3, 55, dir, 2, 56);
    auto corpus = synth::load_corpus(dir);
    train::ModelState state = train::toy_model(1);
    double acc = train::evaluate_qa(state, corpus);
    CHECK(acc <= 0.05);
    fs::remove_all(dir);
}

}  // TEST_SUITE
