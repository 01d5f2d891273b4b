#pragma once

#include <string>
#include <utility>
#include <vector>

#include "evlm/video.hpp"

namespace evlm::tok {

// Byte-level text vocabulary: raw bytes 0..255 plus specials.
constexpr int kBos = 256;
constexpr int kEos = 257;
constexpr int kSep = 258;
constexpr int kTextVocabFloor = 259;  // model vocab must be at least this

std::vector<int> encode_text(const std::string& text);
std::string decode_text(const std::vector<int>& ids);  // specials dropped

enum class TokKind { frame_mark, line_mark, patch, text };

const char* kind_name(TokKind kind);
TokKind kind_from_name(const std::string& name);

struct TokenRecord {
    TokKind kind = TokKind::text;
    int t = -1;    // frame index (visual kinds)
    int row = -1;  // patch-grid row (patch, line_mark)
    int col = -1;  // patch-grid col (patch only)
    std::vector<float> payload;  // patch kind: 3*P*P, channel-major (c, y, x)
    int vocab_id = -1;           // text kind

    static TokenRecord frame(int t);
    static TokenRecord line(int t, int row);
    static TokenRecord patch_tok(int t, int row, int col, std::vector<float> payload);
    static TokenRecord text_tok(int vocab_id);
};

struct TokenCounts {
    int64_t frame_marks = 0;
    int64_t line_marks = 0;
    int64_t patches = 0;
    int64_t text = 0;
    int64_t total() const { return frame_marks + line_marks + patches + text; }
};

// One frame contributes rows*cols patches + rows line markers + 1 frame marker.
int64_t frame_token_count(int rows, int cols);

struct TokenStream {
    int patch = 28;
    std::string source_id;
    std::vector<TokenRecord> records;

    TokenCounts counts() const;
    // Enforces raster order: per frame a FRAME marker, then each row's patches
    // left-to-right closed by a LINE marker; rectangular grids; text only after
    // all visual tokens.
    void validate() const;
};

// Appends the raster-order tokens of one 3xHxW frame (frame index as given).
void tokenize_frame(const float* frame, int h, int w, int patch, int frame_index,
                    std::vector<TokenRecord>& out);

// Whole-clip tokenization. The clip must already satisfy the policy's patch
// grid (resize first); a non-multiple edge is a contract error.
TokenStream tokenize(const video::VideoClip& clip, const video::ResolutionPolicy& policy);

// Per-frame (rows, cols) recovered from marker positions.
std::vector<std::pair<int, int>> detokenize_layout(const TokenStream& stream);

void stream_to_jsonl(const TokenStream& stream, const std::string& path);
TokenStream stream_from_jsonl(const std::string& path);

}  // namespace evlm::tok
