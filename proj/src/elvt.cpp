#include "evlm/elvt.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

namespace evlm::elvt {

namespace {

constexpr char kMagic[4] = {'E', 'L', 'V', 'T'};
constexpr uint16_t kVersion = 1;
constexpr int64_t kMaxElements = 1ll << 31;

void put_u16(std::ofstream& os, uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>(v >> 8)};
    os.write(reinterpret_cast<const char*>(b), 2);
}

void put_u32(std::ofstream& os, uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint16_t get_u16(const unsigned char* p) { return static_cast<uint16_t>(p[0] | (p[1] << 8)); }

uint32_t get_u32(const unsigned char* p) {
    return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
           (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

}  // namespace

void save(const std::string& path, const Tensor& t) {
    check(t.defined(), ErrKind::contract, "elvt::save: undefined tensor");
    check(t.rank() >= 1, ErrKind::dimension, "elvt::save: rank must be >= 1");
    for (int64_t d : t.shape())
        check(d <= 0xffffffffll, ErrKind::capacity, msg("elvt::save: extent ", d, " exceeds u32"));
    std::ofstream os(path, std::ios::binary);
    check(os.good(), ErrKind::io, msg("elvt::save: cannot open ", path));
    os.write(kMagic, 4);
    put_u16(os, kVersion);
    put_u16(os, static_cast<uint16_t>(t.rank()));
    for (int64_t d : t.shape()) put_u32(os, static_cast<uint32_t>(d));
    std::vector<float> payload(static_cast<size_t>(t.numel()));
    for (int64_t i = 0; i < t.numel(); ++i) payload[static_cast<size_t>(i)] = static_cast<float>(t.at(i));
    os.write(reinterpret_cast<const char*>(payload.data()),
             static_cast<std::streamsize>(payload.size() * sizeof(float)));
    check(os.good(), ErrKind::io, msg("elvt::save: write failed for ", path));
}

Tensor load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    check(is.good(), ErrKind::io, msg("elvt::load: cannot open ", path));
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    check(bytes.size() >= 8, ErrKind::io, msg("elvt::load: ", path, " truncated header"));
    check(std::memcmp(bytes.data(), kMagic, 4) == 0, ErrKind::io, msg("elvt::load: ", path, " bad magic"));
    uint16_t version = get_u16(bytes.data() + 4);
    check(version == kVersion, ErrKind::io, msg("elvt::load: ", path, " unsupported version ", version));
    uint16_t rank = get_u16(bytes.data() + 6);
    check(rank >= 1, ErrKind::io, msg("elvt::load: ", path, " rank 0"));
    size_t off = 8;
    check(bytes.size() >= off + 4u * rank, ErrKind::io, msg("elvt::load: ", path, " truncated extents"));
    std::vector<int64_t> shape(rank);
    int64_t n = 1;
    for (uint16_t i = 0; i < rank; ++i) {
        shape[i] = static_cast<int64_t>(get_u32(bytes.data() + off));
        off += 4;
        n *= shape[i];
        check(n <= kMaxElements, ErrKind::capacity, msg("elvt::load: ", path, " too many elements"));
    }
    check(bytes.size() == off + static_cast<size_t>(n) * sizeof(float), ErrKind::io,
          msg("elvt::load: ", path, " payload size mismatch (", bytes.size() - off, " bytes for ", n, " floats)"));
    Tensor t = Tensor::zeros(shape);
    for (int64_t i = 0; i < n; ++i) {
        float v;
        std::memcpy(&v, bytes.data() + off + static_cast<size_t>(i) * sizeof(float), sizeof(float));
        t.set(i, static_cast<double>(v));
    }
    return t;
}

void save_named(const std::string& dir, const std::vector<std::pair<std::string, Tensor>>& tensors,
                const nlohmann::json& meta) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["meta"] = meta;
    nlohmann::json entries = nlohmann::json::object();
    for (const auto& [name, t] : tensors) {
        std::string file = name + ".elvt";
        save(dir + "/" + file, t);
        entries[name] = {{"file", file}, {"shape", t.shape()}};
    }
    manifest["tensors"] = entries;
    std::ofstream os(dir + "/manifest.json");
    check(os.good(), ErrKind::io, msg("save_named: cannot write manifest in ", dir));
    os << manifest.dump(2) << "\n";
}

std::pair<std::map<std::string, Tensor>, nlohmann::json> load_named(const std::string& dir) {
    std::ifstream is(dir + "/manifest.json");
    check(is.good(), ErrKind::io, msg("load_named: missing manifest in ", dir));
    nlohmann::json manifest = nlohmann::json::parse(is, nullptr, false);
    check(!manifest.is_discarded(), ErrKind::io, msg("load_named: malformed manifest in ", dir));
    std::map<std::string, Tensor> out;
    for (auto& [name, entry] : manifest.at("tensors").items()) {
        Tensor t = load(dir + "/" + entry.at("file").get<std::string>());
        std::vector<int64_t> want = entry.at("shape").get<std::vector<int64_t>>();
        check(t.shape() == want, ErrKind::io, msg("load_named: shape mismatch for ", name));
        out.emplace(name, t);
    }
    return {std::move(out), manifest.at("meta")};
}

}  // namespace evlm::elvt
