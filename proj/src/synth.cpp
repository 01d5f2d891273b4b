#include "evlm/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace evlm::synth {

namespace {

struct Rgb {
    float r, g, b;
};

constexpr Rgb kPalette[kPaletteSize] = {
    {0.90f, 0.10f, 0.10f},  // red
    {0.10f, 0.75f, 0.20f},  // green
    {0.15f, 0.25f, 0.90f},  // blue
    {0.95f, 0.85f, 0.10f},  // yellow
    {0.10f, 0.80f, 0.85f},  // cyan
    {0.85f, 0.15f, 0.80f},  // magenta
    {0.95f, 0.55f, 0.10f},  // orange
    {0.55f, 0.20f, 0.80f},  // purple
    {0.95f, 0.95f, 0.95f},  // white
    {0.50f, 0.50f, 0.50f},  // gray
};

constexpr const char* kColorNames[kPaletteSize] = {"red",     "green",  "blue",   "yellow", "cyan",
                                                   "magenta", "orange", "purple", "white",  "gray"};

constexpr float kBackground = 0.08f;
constexpr int kDriftSpeed = 3;
constexpr int kBounceSpeed = 9;

// Position after t steps of velocity v from x0, reflecting off [0, limit].
int reflect_pos(int x0, int v, int t, int limit) {
    if (limit <= 0) return 0;
    int64_t raw = static_cast<int64_t>(x0) + static_cast<int64_t>(v) * t;
    int64_t period = 2ll * limit;
    int64_t m = ((raw % period) + period) % period;
    return static_cast<int>(m <= limit ? m : period - m);
}

bool inside_shape(ShapeKind kind, int size, int dx, int dy) {
    double c = (size - 1) / 2.0;
    switch (kind) {
        case ShapeKind::square:
            return true;
        case ShapeKind::circle: {
            double rx = dx - c, ry = dy - c;
            return rx * rx + ry * ry <= c * c + 0.25;
        }
        case ShapeKind::triangle: {
            // Upward-pointing: row y spans the middle (y+1)/size fraction.
            double half = c * (dy + 1) / static_cast<double>(size);
            return std::abs(dx - c) <= half + 0.25;
        }
        case ShapeKind::diamond:
            return std::abs(dx - c) + std::abs(dy - c) <= c + 0.25;
    }
    raise(ErrKind::contract, "unknown shape kind");
}

void draw_shape(video::VideoClip& clip, int t, ShapeKind kind, int size, int x, int y, const Rgb& rgb) {
    const float chan[3] = {rgb.r, rgb.g, rgb.b};
    for (int dy = 0; dy < size; ++dy) {
        int py = y + dy;
        if (py < 0 || py >= clip.height) continue;
        for (int dx = 0; dx < size; ++dx) {
            int px = x + dx;
            if (px < 0 || px >= clip.width) continue;
            if (!inside_shape(kind, size, dx, dy)) continue;
            for (int c = 0; c < 3; ++c) clip.at(t, c, py, px) = chan[c];
        }
    }
}

void velocity_for(MotionKind m, int& vx, int& vy) {
    vx = 0;
    vy = 0;
    switch (m) {
        case MotionKind::still: break;
        case MotionKind::right: vx = kDriftSpeed; break;
        case MotionKind::left: vx = -kDriftSpeed; break;
        case MotionKind::up: vy = -kDriftSpeed; break;
        case MotionKind::down: vy = kDriftSpeed; break;
        case MotionKind::bounce: vx = kBounceSpeed; break;
    }
}

// Start position leaving room to drift for `frames` steps without reflecting
// when the frame allows it; bounce starts wherever and reflects freely.
int start_coord(Rng& rng, int limit, int v, int frames) {
    if (limit <= 0) return 0;
    int travel = std::abs(v) * (frames - 1);
    int lo = 0, hi = limit;
    if (v > 0 && v != kBounceSpeed)
        hi = std::max(0, limit - travel);
    else if (v < 0)
        lo = std::min(limit, travel);
    if (lo > hi) std::swap(lo, hi);
    return static_cast<int>(rng.uniform_int(lo, hi));
}

}  // namespace

const char* shape_name(ShapeKind k) {
    switch (k) {
        case ShapeKind::square: return "square";
        case ShapeKind::circle: return "circle";
        case ShapeKind::triangle: return "triangle";
        case ShapeKind::diamond: return "diamond";
    }
    raise(ErrKind::contract, "unknown shape kind");
}

const char* motion_name(MotionKind k) {
    switch (k) {
        case MotionKind::still: return "still";
        case MotionKind::right: return "right";
        case MotionKind::left: return "left";
        case MotionKind::up: return "up";
        case MotionKind::down: return "down";
        case MotionKind::bounce: return "bounce";
    }
    raise(ErrKind::contract, "unknown motion kind");
}

const char* motion_phrase(MotionKind k) {
    switch (k) {
        case MotionKind::still: return "stays still";
        case MotionKind::right: return "moves right";
        case MotionKind::left: return "moves left";
        case MotionKind::up: return "moves up";
        case MotionKind::down: return "moves down";
        case MotionKind::bounce: return "bounces side to side";
    }
    raise(ErrKind::contract, "unknown motion kind");
}

const char* color_name(int palette_index) {
    check(palette_index >= 0 && palette_index < kPaletteSize, ErrKind::index,
          msg("palette index ", palette_index, " out of range"));
    return kColorNames[palette_index];
}

void SynthSpec::validate() const {
    check(frames >= 1, ErrKind::contract, "spec: frames must be positive");
    check(height >= 1 && width >= 1, ErrKind::contract, "spec: empty frame");
    check(shape_count == 1 || shape_count == 2, ErrKind::contract, "spec: shape count must be 1 or 2");
    check(color >= 0 && color < kPaletteSize && color2 >= 0 && color2 < kPaletteSize, ErrKind::contract,
          "spec: palette index out of range");
    check(size >= 3, ErrKind::contract, "spec: shape size below 3 px");
    check(size <= height && size <= width, ErrKind::contract,
          msg("spec: shape size ", size, " exceeds frame ", height, "x", width));
}

nlohmann::json SynthSpec::to_json() const {
    return {{"seed", seed},
            {"frames", frames},
            {"height", height},
            {"width", width},
            {"shape_count", shape_count},
            {"shape", shape_name(shape)},
            {"shape2", shape_name(shape2)},
            {"color", color},
            {"color2", color2},
            {"motion", motion_name(motion)},
            {"size", size}};
}

namespace {

ShapeKind shape_from_name(const std::string& s) {
    for (auto k : {ShapeKind::square, ShapeKind::circle, ShapeKind::triangle, ShapeKind::diamond})
        if (s == shape_name(k)) return k;
    raise(ErrKind::contract, msg("unknown shape name: ", s));
}

MotionKind motion_from_name(const std::string& s) {
    for (auto k : {MotionKind::still, MotionKind::right, MotionKind::left, MotionKind::up,
                   MotionKind::down, MotionKind::bounce})
        if (s == motion_name(k)) return k;
    raise(ErrKind::contract, msg("unknown motion name: ", s));
}

}  // namespace

SynthSpec SynthSpec::from_json(const nlohmann::json& j) {
    SynthSpec s;
    s.seed = j.at("seed").get<uint64_t>();
    s.frames = j.at("frames").get<int>();
    s.height = j.at("height").get<int>();
    s.width = j.at("width").get<int>();
    s.shape_count = j.at("shape_count").get<int>();
    s.shape = shape_from_name(j.at("shape").get<std::string>());
    s.shape2 = shape_from_name(j.at("shape2").get<std::string>());
    s.color = j.at("color").get<int>();
    s.color2 = j.at("color2").get<int>();
    s.motion = motion_from_name(j.at("motion").get<std::string>());
    s.size = j.at("size").get<int>();
    s.validate();
    return s;
}

std::string caption_for(const SynthSpec& spec) {
    spec.validate();
    std::string cap = msg("a ", color_name(spec.color), " ", shape_name(spec.shape));
    if (spec.frames > 1) cap += msg(" ", motion_phrase(spec.motion));
    if (spec.shape_count == 2)
        cap += msg(" near a ", color_name(spec.color2), " ", shape_name(spec.shape2));
    return cap;
}

std::pair<video::VideoClip, std::string> generate(const SynthSpec& spec) {
    spec.validate();
    video::VideoClip clip;
    clip.frames = spec.frames;
    clip.height = spec.height;
    clip.width = spec.width;
    clip.fps = 4.0;
    clip.source_id = msg("synth-", hex64(spec.seed));
    clip.pixels.assign(static_cast<size_t>(spec.frames) * clip.frame_stride(), kBackground);

    Rng rng(spec.seed * 0x9e3779b97f4a7c15ull + 1);
    int vx = 0, vy = 0;
    velocity_for(spec.motion, vx, vy);
    int xlim = spec.width - spec.size;
    int ylim = spec.height - spec.size;
    int x0 = start_coord(rng, xlim, vx, spec.frames);
    int y0 = start_coord(rng, ylim, vy, spec.frames);
    int x2 = 0, y2 = 0;
    if (spec.shape_count == 2) {
        x2 = static_cast<int>(rng.uniform_int(0, std::max(0, xlim)));
        y2 = static_cast<int>(rng.uniform_int(0, std::max(0, ylim)));
    }

    for (int t = 0; t < spec.frames; ++t) {
        if (spec.shape_count == 2)
            draw_shape(clip, t, spec.shape2, spec.size, x2, y2, kPalette[spec.color2]);
        int x = reflect_pos(x0, vx, t, xlim);
        int y = reflect_pos(y0, vy, t, ylim);
        draw_shape(clip, t, spec.shape, spec.size, x, y, kPalette[spec.color]);
    }
    clip.validate();
    return {std::move(clip), caption_for(spec)};
}

std::vector<QaPair> qa_for(const SynthSpec& spec) {
    spec.validate();
    std::vector<QaPair> out;
    out.push_back({msg("what color is the ", shape_name(spec.shape)), color_name(spec.color)});
    out.push_back({"what shape is shown", shape_name(spec.shape)});
    if (spec.frames > 1)
        out.push_back({msg("how does the ", shape_name(spec.shape), " move"), motion_name(spec.motion)});
    return out;
}

std::vector<Sample> make_corpus(int n, int stage, uint64_t seed, const std::string& out_dir, int frames,
                                int edge) {
    check(n >= 1, ErrKind::contract, "corpus: need at least one sample");
    check(stage >= 1 && stage <= 3, ErrKind::contract, msg("corpus: invalid stage ", stage));
    check(frames >= 1, ErrKind::contract, "corpus: frames must be positive");

    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(fs::path(out_dir) / "clips", ec);
    check(!ec, ErrKind::io, msg("corpus: cannot create ", out_dir, "/clips: ", ec.message()));
    fs::create_directories(fs::path(out_dir) / "caps", ec);
    check(!ec, ErrKind::io, msg("corpus: cannot create ", out_dir, "/caps: ", ec.message()));

    Rng rng(seed);
    std::vector<Sample> samples;
    std::ofstream manifest(fs::path(out_dir) / "manifest.jsonl", std::ios::trunc);
    check(manifest.good(), ErrKind::io, msg("corpus: cannot write ", out_dir, "/manifest.jsonl"));

    for (int i = 0; i < n; ++i) {
        SynthSpec spec;
        spec.seed = static_cast<uint64_t>(rng.uniform_int(0, (1ll << 62) - 1));
        spec.frames = stage == 1 ? 1 : frames;
        spec.height = edge;
        spec.width = edge;
        spec.shape = static_cast<ShapeKind>(rng.uniform_int(0, 3));
        spec.color = static_cast<int>(rng.uniform_int(0, kPaletteSize - 1));
        spec.motion =
            spec.frames == 1 ? MotionKind::still : static_cast<MotionKind>(rng.uniform_int(0, 5));
        spec.validate();

        auto [clip, caption] = generate(spec);
        Sample s;
        std::ostringstream id;
        id << "s" << stage << "-" << std::setw(4) << std::setfill('0') << i;
        s.id = id.str();
        s.spec = spec;
        s.clip_path = (fs::path(out_dir) / "clips" / (s.id + ".elvt")).string();
        s.caption_path = (fs::path(out_dir) / "caps" / (s.id + ".txt")).string();
        video::clip_to_elvt(clip, s.clip_path);

        nlohmann::json rec = {{"id", s.id},
                              {"spec", spec.to_json()},
                              {"clip_path", s.clip_path},
                              {"caption_path", s.caption_path}};
        std::string cap_file;
        if (stage == 3) {
            auto qas = qa_for(spec);
            const QaPair& qa = qas[static_cast<size_t>(
                rng.uniform_int(0, static_cast<int64_t>(qas.size()) - 1))];
            s.question = qa.question;
            s.answer = qa.answer;
            rec["question"] = s.question;
            rec["answer"] = s.answer;
            cap_file = s.question + "\n" + s.answer;
        } else {
            s.caption = caption;
            cap_file = caption;
        }
        std::ofstream cf(s.caption_path, std::ios::trunc);
        check(cf.good(), ErrKind::io, msg("corpus: cannot write ", s.caption_path));
        cf << cap_file;
        manifest << rec.dump() << "\n";
        samples.push_back(std::move(s));
    }
    check(manifest.good(), ErrKind::io, msg("corpus: write failed for ", out_dir, "/manifest.jsonl"));
    return samples;
}

std::vector<Sample> load_corpus(const std::string& out_dir) {
    namespace fs = std::filesystem;
    std::string path = (fs::path(out_dir) / "manifest.jsonl").string();
    std::ifstream in(path);
    check(in.good(), ErrKind::io, msg("corpus: cannot open ", path));
    std::vector<Sample> samples;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json rec = nlohmann::json::parse(line);
        Sample s;
        s.id = rec.at("id").get<std::string>();
        s.spec = SynthSpec::from_json(rec.at("spec"));
        s.clip_path = rec.at("clip_path").get<std::string>();
        s.caption_path = rec.at("caption_path").get<std::string>();
        if (rec.contains("question")) {
            s.question = rec.at("question").get<std::string>();
            s.answer = rec.at("answer").get<std::string>();
        } else {
            s.caption = caption_for(s.spec);
        }
        samples.push_back(std::move(s));
    }
    check(!samples.empty(), ErrKind::io, msg("corpus: empty manifest at ", path));
    return samples;
}

}  // namespace evlm::synth
