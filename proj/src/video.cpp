#include "evlm/video.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "evlm/elvt.hpp"

namespace evlm::video {

const char* tier_name(Tier tier) { return tier == Tier::high ? "high" : "low"; }

void ResolutionPolicy::validate() const {
    check(patch >= 1, ErrKind::contract, "policy: patch size must be positive");
    check(max_edge_high >= patch && max_edge_low >= patch, ErrKind::contract,
          "policy: max edges must be at least one patch");
}

VideoClip VideoClip::empty(int frames, int height, int width, std::string source_id) {
    check(frames >= 1 && height >= 1 && width >= 1, ErrKind::contract,
          msg("clip: degenerate shape ", frames, "x", height, "x", width));
    VideoClip c;
    c.frames = frames;
    c.height = height;
    c.width = width;
    c.source_id = std::move(source_id);
    c.pixels.assign(static_cast<size_t>(frames) * 3 * height * width, 0.0f);
    return c;
}

void VideoClip::validate() const {
    check(frames >= 1 && height >= 1 && width >= 1, ErrKind::contract,
          msg("clip: degenerate shape ", frames, "x", height, "x", width));
    check(pixels.size() == static_cast<size_t>(frames) * 3 * height * width, ErrKind::dimension,
          msg("clip: ", pixels.size(), " pixels for shape ", frames, "x3x", height, "x", width));
    check(fps >= 0.0, ErrKind::contract, "clip: negative fps");
    for (float v : pixels)
        check(v >= 0.0f && v <= 1.0f, ErrKind::contract, msg("clip: pixel ", v, " outside [0,1]"));
}

std::pair<int, int> resized_dims(int h, int w, int max_edge, int patch) {
    check(h >= 1 && w >= 1, ErrKind::contract, msg("resize: degenerate frame ", h, "x", w));
    check(max_edge >= patch && patch >= 1, ErrKind::contract, "resize: bad policy edges");
    double scale = std::min(1.0, static_cast<double>(max_edge) / std::max(h, w));
    auto snap = [&](int edge) {
        long long k = std::llround(edge * scale / patch);
        return static_cast<int>(std::max(1ll, k)) * patch;
    };
    return {snap(h), snap(w)};
}

std::vector<float> resize_frame(const float* src, int src_h, int src_w, int dst_h, int dst_w) {
    std::vector<float> out(static_cast<size_t>(3) * dst_h * dst_w);
    double sy_scale = static_cast<double>(src_h) / dst_h;
    double sx_scale = static_cast<double>(src_w) / dst_w;
    for (int c = 0; c < 3; ++c) {
        const float* plane = src + static_cast<int64_t>(c) * src_h * src_w;
        float* dst = out.data() + static_cast<int64_t>(c) * dst_h * dst_w;
        for (int y = 0; y < dst_h; ++y) {
            double sy = std::clamp((y + 0.5) * sy_scale - 0.5, 0.0, static_cast<double>(src_h - 1));
            int y0 = static_cast<int>(sy);
            int y1 = std::min(y0 + 1, src_h - 1);
            double fy = sy - y0;
            for (int x = 0; x < dst_w; ++x) {
                double sx = std::clamp((x + 0.5) * sx_scale - 0.5, 0.0, static_cast<double>(src_w - 1));
                int x0 = static_cast<int>(sx);
                int x1 = std::min(x0 + 1, src_w - 1);
                double fx = sx - x0;
                double top = plane[y0 * src_w + x0] * (1.0 - fx) + plane[y0 * src_w + x1] * fx;
                double bot = plane[y1 * src_w + x0] * (1.0 - fx) + plane[y1 * src_w + x1] * fx;
                double v = top * (1.0 - fy) + bot * fy;
                dst[y * dst_w + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }
    }
    return out;
}

VideoClip resize_to_policy(const VideoClip& clip, const ResolutionPolicy& policy, Tier tier) {
    clip.validate();
    policy.validate();
    auto [nh, nw] = resized_dims(clip.height, clip.width, policy.edge_for(tier), policy.patch);
    VideoClip out = VideoClip::empty(clip.frames, nh, nw, clip.source_id);
    out.fps = clip.fps;
    if (nh == clip.height && nw == clip.width) {
        out.pixels = clip.pixels;
        return out;
    }
    for (int t = 0; t < clip.frames; ++t) {
        std::vector<float> frame =
            resize_frame(clip.pixels.data() + t * clip.frame_stride(), clip.height, clip.width, nh, nw);
        std::copy(frame.begin(), frame.end(), out.pixels.begin() + t * out.frame_stride());
    }
    return out;
}

VideoClip clip_from_elvt(const std::string& path, const std::string& source_id) {
    Tensor t = elvt::load(path);
    check(t.rank() == 4, ErrKind::dimension, msg("clip: ", path, " has rank ", t.rank(), ", want 4"));
    check(t.dim(1) == 3, ErrKind::dimension, msg("clip: ", path, " has ", t.dim(1), " channels, want 3"));
    VideoClip c = VideoClip::empty(static_cast<int>(t.dim(0)), static_cast<int>(t.dim(2)),
                                   static_cast<int>(t.dim(3)),
                                   source_id.empty() ? std::filesystem::path(path).stem().string() : source_id);
    for (int64_t i = 0; i < t.numel(); ++i) c.pixels[static_cast<size_t>(i)] = static_cast<float>(t.at(i));
    c.validate();
    return c;
}

void clip_to_elvt(const VideoClip& clip, const std::string& path) {
    clip.validate();
    Tensor t = Tensor::zeros({clip.frames, 3, clip.height, clip.width});
    for (size_t i = 0; i < clip.pixels.size(); ++i)
        t.set(static_cast<int64_t>(i), static_cast<double>(clip.pixels[i]));
    elvt::save(path, t);
}

namespace {

int ppm_token(std::istream& is, const std::string& path) {
    // Skip whitespace and '#' comment lines, then read one integer.
    int ch = is.get();
    while (ch != EOF) {
        if (ch == '#') {
            while (ch != EOF && ch != '\n') ch = is.get();
        } else if (!std::isspace(ch)) {
            break;
        }
        ch = is.get();
    }
    check(ch != EOF && std::isdigit(ch), ErrKind::io, msg("ppm: malformed header in ", path));
    int v = 0;
    while (ch != EOF && std::isdigit(ch)) {
        v = v * 10 + (ch - '0');
        check(v <= 1 << 20, ErrKind::io, msg("ppm: absurd header value in ", path));
        ch = is.get();
    }
    if (ch != EOF) is.unget();
    return v;
}

void read_ppm(const std::string& path, int& h, int& w, std::vector<float>& rgb) {
    std::ifstream is(path, std::ios::binary);
    check(is.good(), ErrKind::io, msg("ppm: cannot open ", path));
    char m0 = static_cast<char>(is.get()), m1 = static_cast<char>(is.get());
    check(m0 == 'P' && m1 == '6', ErrKind::io, msg("ppm: ", path, " is not P6"));
    w = ppm_token(is, path);
    h = ppm_token(is, path);
    int maxval = ppm_token(is, path);
    check(maxval == 255, ErrKind::io, msg("ppm: ", path, " maxval ", maxval, ", want 255"));
    is.get();  // single whitespace byte before payload
    std::vector<unsigned char> raw(static_cast<size_t>(h) * w * 3);
    is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    check(is.gcount() == static_cast<std::streamsize>(raw.size()), ErrKind::io,
          msg("ppm: ", path, " truncated payload"));
    rgb.resize(raw.size());
    // Interleaved RGB -> channels-first planes.
    for (int c = 0; c < 3; ++c)
        for (int64_t i = 0; i < static_cast<int64_t>(h) * w; ++i)
            rgb[static_cast<size_t>(c * static_cast<int64_t>(h) * w + i)] =
                static_cast<float>(raw[static_cast<size_t>(i * 3 + c)]) / 255.0f;
}

}  // namespace

VideoClip clip_from_ppm_dir(const std::string& dir) {
    std::vector<std::string> files;
    check(std::filesystem::is_directory(dir), ErrKind::io, msg("ppm dir: ", dir, " is not a directory"));
    for (const auto& e : std::filesystem::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path().string());
    check(!files.empty(), ErrKind::io, msg("ppm dir: no .ppm frames in ", dir));
    std::sort(files.begin(), files.end());
    int h = 0, w = 0;
    std::vector<std::vector<float>> frames;
    for (const auto& f : files) {
        int fh = 0, fw = 0;
        std::vector<float> rgb;
        read_ppm(f, fh, fw, rgb);
        if (frames.empty()) {
            h = fh;
            w = fw;
        }
        check(fh == h && fw == w, ErrKind::structure,
              msg("ppm dir: ", f, " is ", fh, "x", fw, ", first frame was ", h, "x", w));
        frames.push_back(std::move(rgb));
    }
    VideoClip c = VideoClip::empty(static_cast<int>(frames.size()), h, w,
                                   std::filesystem::path(dir).filename().string());
    for (size_t t = 0; t < frames.size(); ++t)
        std::copy(frames[t].begin(), frames[t].end(),
                  c.pixels.begin() + static_cast<int64_t>(t) * c.frame_stride());
    c.validate();
    return c;
}

void frame_to_ppm(const VideoClip& clip, int t, const std::string& path) {
    clip.validate();
    check(t >= 0 && t < clip.frames, ErrKind::index, msg("ppm: frame ", t, " of ", clip.frames));
    std::ofstream os(path, std::ios::binary);
    check(os.good(), ErrKind::io, msg("ppm: cannot write ", path));
    os << "P6\n" << clip.width << " " << clip.height << "\n255\n";
    std::vector<unsigned char> raw(static_cast<size_t>(clip.height) * clip.width * 3);
    for (int y = 0; y < clip.height; ++y)
        for (int x = 0; x < clip.width; ++x)
            for (int c = 0; c < 3; ++c) {
                long v = std::lround(static_cast<double>(clip.at(t, c, y, x)) * 255.0);
                raw[static_cast<size_t>((static_cast<int64_t>(y) * clip.width + x) * 3 + c)] =
                    static_cast<unsigned char>(std::clamp(v, 0l, 255l));
            }
    os.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    check(os.good(), ErrKind::io, msg("ppm: write failed for ", path));
}

}  // namespace evlm::video
