#include "evlm/tokenize.hpp"

#include <fstream>

#include "json.hpp"

namespace evlm::tok {

std::vector<int> encode_text(const std::string& text) {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(static_cast<int>(c));
    return ids;
}

std::string decode_text(const std::vector<int>& ids) {
    std::string out;
    for (int id : ids)
        if (id >= 0 && id < 256) out.push_back(static_cast<char>(id));
    return out;
}

const char* kind_name(TokKind kind) {
    switch (kind) {
        case TokKind::frame_mark: return "frame";
        case TokKind::line_mark: return "line";
        case TokKind::patch: return "patch";
        case TokKind::text: return "text";
    }
    raise(ErrKind::contract, "unknown token kind");
}

TokKind kind_from_name(const std::string& name) {
    if (name == "frame") return TokKind::frame_mark;
    if (name == "line") return TokKind::line_mark;
    if (name == "patch") return TokKind::patch;
    if (name == "text") return TokKind::text;
    raise(ErrKind::structure, msg("unknown token kind '", name, "'"));
}

TokenRecord TokenRecord::frame(int t) {
    TokenRecord r;
    r.kind = TokKind::frame_mark;
    r.t = t;
    return r;
}

TokenRecord TokenRecord::line(int t, int row) {
    TokenRecord r;
    r.kind = TokKind::line_mark;
    r.t = t;
    r.row = row;
    return r;
}

TokenRecord TokenRecord::patch_tok(int t, int row, int col, std::vector<float> payload) {
    TokenRecord r;
    r.kind = TokKind::patch;
    r.t = t;
    r.row = row;
    r.col = col;
    r.payload = std::move(payload);
    return r;
}

TokenRecord TokenRecord::text_tok(int vocab_id) {
    TokenRecord r;
    r.kind = TokKind::text;
    r.vocab_id = vocab_id;
    return r;
}

int64_t frame_token_count(int rows, int cols) {
    check(rows >= 1 && cols >= 1, ErrKind::contract, msg("frame grid ", rows, "x", cols));
    return static_cast<int64_t>(rows) * cols + rows + 1;
}

TokenCounts TokenStream::counts() const {
    TokenCounts c;
    for (const auto& r : records) {
        switch (r.kind) {
            case TokKind::frame_mark: ++c.frame_marks; break;
            case TokKind::line_mark: ++c.line_marks; break;
            case TokKind::patch: ++c.patches; break;
            case TokKind::text: ++c.text; break;
        }
    }
    return c;
}

void TokenStream::validate() const {
    check(patch >= 1, ErrKind::contract, "stream: patch size must be positive");
    size_t payload_len = static_cast<size_t>(3) * patch * patch;
    size_t i = 0;
    int frame = 0;
    while (i < records.size() && records[i].kind != TokKind::text) {
        check(records[i].kind == TokKind::frame_mark, ErrKind::structure,
              msg("stream: record ", i, " should start frame ", frame));
        check(records[i].t == frame, ErrKind::structure,
              msg("stream: frame marker has t=", records[i].t, ", want ", frame));
        ++i;
        int row = 0, cols = -1;
        while (i < records.size() && records[i].kind != TokKind::frame_mark &&
               records[i].kind != TokKind::text) {
            int col = 0;
            while (i < records.size() && records[i].kind == TokKind::patch) {
                const auto& r = records[i];
                check(r.t == frame && r.row == row && r.col == col, ErrKind::structure,
                      msg("stream: patch at record ", i, " is (", r.t, ",", r.row, ",", r.col,
                          "), want (", frame, ",", row, ",", col, ")"));
                check(r.payload.size() == payload_len, ErrKind::dimension,
                      msg("stream: patch payload ", r.payload.size(), ", want ", payload_len));
                ++col;
                ++i;
            }
            check(i < records.size() && records[i].kind == TokKind::line_mark, ErrKind::structure,
                  msg("stream: row ", row, " of frame ", frame, " not closed by a line marker"));
            check(col >= 1, ErrKind::structure, msg("stream: empty row ", row, " in frame ", frame));
            check(records[i].t == frame && records[i].row == row, ErrKind::structure,
                  msg("stream: line marker mismatch at record ", i));
            if (cols < 0)
                cols = col;
            else
                check(col == cols, ErrKind::structure,
                      msg("stream: ragged frame ", frame, ": row ", row, " has ", col, " cols, want ", cols));
            ++row;
            ++i;
        }
        check(row >= 1, ErrKind::structure, msg("stream: frame ", frame, " has no rows"));
        ++frame;
    }
    for (; i < records.size(); ++i) {
        check(records[i].kind == TokKind::text, ErrKind::structure,
              msg("stream: visual record ", i, " after text began"));
        check(records[i].vocab_id >= 0, ErrKind::structure, msg("stream: negative vocab id at ", i));
    }
}

void tokenize_frame(const float* frame, int h, int w, int patch, int frame_index,
                    std::vector<TokenRecord>& out) {
    check(patch >= 1, ErrKind::contract, "tokenize: patch size must be positive");
    check(h % patch == 0 && w % patch == 0, ErrKind::contract,
          msg("tokenize: frame ", h, "x", w, " not a multiple of patch ", patch, "; resize first"));
    int rows = h / patch, cols = w / patch;
    out.push_back(TokenRecord::frame(frame_index));
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            std::vector<float> payload(static_cast<size_t>(3) * patch * patch);
            for (int ch = 0; ch < 3; ++ch)
                for (int y = 0; y < patch; ++y)
                    for (int x = 0; x < patch; ++x)
                        payload[static_cast<size_t>((ch * patch + y) * patch + x)] =
                            frame[(static_cast<int64_t>(ch) * h + r * patch + y) * w + c * patch + x];
            out.push_back(TokenRecord::patch_tok(frame_index, r, c, std::move(payload)));
        }
        out.push_back(TokenRecord::line(frame_index, r));
    }
}

TokenStream tokenize(const video::VideoClip& clip, const video::ResolutionPolicy& policy) {
    clip.validate();
    policy.validate();
    TokenStream s;
    s.patch = policy.patch;
    s.source_id = clip.source_id;
    for (int t = 0; t < clip.frames; ++t)
        tokenize_frame(clip.pixels.data() + t * clip.frame_stride(), clip.height, clip.width,
                       policy.patch, t, s.records);
    return s;
}

std::vector<std::pair<int, int>> detokenize_layout(const TokenStream& stream) {
    stream.validate();
    std::vector<std::pair<int, int>> layout;
    for (const auto& r : stream.records) {
        if (r.kind == TokKind::frame_mark) layout.emplace_back(0, 0);
        if (r.kind == TokKind::line_mark) ++layout.back().first;
        if (r.kind == TokKind::patch && r.row == 0) ++layout.back().second;
    }
    return layout;
}

void stream_to_jsonl(const TokenStream& stream, const std::string& path) {
    stream.validate();
    std::ofstream os(path);
    check(os.good(), ErrKind::io, msg("stream: cannot write ", path));
    nlohmann::json header = {{"patch", stream.patch}, {"source", stream.source_id}};
    os << header.dump() << "\n";
    for (const auto& r : stream.records) {
        nlohmann::json j;
        j["kind"] = kind_name(r.kind);
        switch (r.kind) {
            case TokKind::frame_mark: j["t"] = r.t; break;
            case TokKind::line_mark:
                j["t"] = r.t;
                j["row"] = r.row;
                break;
            case TokKind::patch:
                j["t"] = r.t;
                j["row"] = r.row;
                j["col"] = r.col;
                j["payload"] = r.payload;
                break;
            case TokKind::text: j["id"] = r.vocab_id; break;
        }
        os << j.dump() << "\n";
    }
    check(os.good(), ErrKind::io, msg("stream: write failed for ", path));
}

TokenStream stream_from_jsonl(const std::string& path) {
    std::ifstream is(path);
    check(is.good(), ErrKind::io, msg("stream: cannot open ", path));
    std::string line;
    check(static_cast<bool>(std::getline(is, line)), ErrKind::io, msg("stream: ", path, " is empty"));
    nlohmann::json header = nlohmann::json::parse(line, nullptr, false);
    check(!header.is_discarded() && header.contains("patch"), ErrKind::io,
          msg("stream: ", path, " has a malformed header"));
    TokenStream s;
    s.patch = header.at("patch").get<int>();
    s.source_id = header.value("source", "");
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        check(!j.is_discarded(), ErrKind::io, msg("stream: malformed record in ", path));
        TokKind kind = kind_from_name(j.at("kind").get<std::string>());
        switch (kind) {
            case TokKind::frame_mark:
                s.records.push_back(TokenRecord::frame(j.at("t").get<int>()));
                break;
            case TokKind::line_mark:
                s.records.push_back(TokenRecord::line(j.at("t").get<int>(), j.at("row").get<int>()));
                break;
            case TokKind::patch:
                s.records.push_back(TokenRecord::patch_tok(j.at("t").get<int>(), j.at("row").get<int>(),
                                                           j.at("col").get<int>(),
                                                           j.at("payload").get<std::vector<float>>()));
                break;
            case TokKind::text:
                s.records.push_back(TokenRecord::text_tok(j.at("id").get<int>()));
                break;
        }
    }
    s.validate();
    return s;
}

}  // namespace evlm::tok
