#pragma once

// Procedural video/caption generator: colored shapes with simple motions on a
// flat background, captions from fixed templates. Identical specs produce
// bit-identical clips and captions, and every caption/answer is recoverable
// from the spec alone, which makes exact-match evaluation possible.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "evlm/common.hpp"
#include "evlm/video.hpp"

namespace evlm::synth {

enum class ShapeKind { square, circle, triangle, diamond };
enum class MotionKind { still, right, left, up, down, bounce };

const char* shape_name(ShapeKind k);
const char* motion_name(MotionKind k);
const char* motion_phrase(MotionKind k);
const char* color_name(int palette_index);
constexpr int kPaletteSize = 10;

struct SynthSpec {
    uint64_t seed = 0;
    int frames = 1;
    int height = 56;
    int width = 56;
    int shape_count = 1;
    ShapeKind shape = ShapeKind::square;
    ShapeKind shape2 = ShapeKind::circle;
    int color = 0;
    int color2 = 1;
    MotionKind motion = MotionKind::still;
    int size = 14;

    void validate() const;
    nlohmann::json to_json() const;
    static SynthSpec from_json(const nlohmann::json& j);
};

// Renders the clip and its caption. Shapes follow analytically known paths
// (drift at a fixed velocity, reflecting off frame borders).
std::pair<video::VideoClip, std::string> generate(const SynthSpec& spec);

// Caption text alone, without rendering.
std::string caption_for(const SynthSpec& spec);

struct QaPair {
    std::string question;
    std::string answer;
};

// Attribute questions with template-derived ground truth. Motion questions
// are only posed for multi-frame clips.
std::vector<QaPair> qa_for(const SynthSpec& spec);

struct Sample {
    std::string id;
    SynthSpec spec;
    std::string clip_path;
    std::string caption_path;
    std::string caption;   // stages 1-2
    std::string question;  // stage 3
    std::string answer;    // stage 3
};

// Writes clips/<id>.elvt, caps/<id>.txt and manifest.jsonl under out_dir.
// Stage 1 forces single-frame clips; stage 3 emits question/answer pairs.
std::vector<Sample> make_corpus(int n, int stage, uint64_t seed, const std::string& out_dir,
                                int frames = 1, int edge = 56);

std::vector<Sample> load_corpus(const std::string& out_dir);

}  // namespace evlm::synth
