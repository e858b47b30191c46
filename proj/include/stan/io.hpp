#pragma once
// On-disk formats: TensorFile, checkpoint archive, dataset manifest, score CSV.
// Every multi-byte field is little-endian and assembled byte by byte, so the
// files are identical on every host.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "stan/head.hpp"
#include "stan/nn.hpp"
#include "stan/tensor.hpp"
#include "stan/train.hpp"

namespace stan {

namespace fs = std::filesystem;

inline constexpr std::array<char, 4> kTensorMagic{'S', 'T', 'A', 'N'};
inline constexpr std::uint16_t kTensorVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 0;

// ---------------------------------------------------------------- raw files

inline std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) throw IoError("read failed: " + path.string());
    return ss.str();
}

/// Writes to a sibling temp file, then renames over the target.
inline void atomic_write(const fs::path& path, std::string_view bytes) {
    if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
        if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
    }
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) throw IoError("write failed: " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp, ec);
        throw IoError("cannot rename onto " + path.string());
    }
}

// ---------------------------------------------------------------- little-endian

namespace le {

inline void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }
inline void put_u16(std::string& out, std::uint16_t v) {
    for (int i = 0; i < 2; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

/// Bounds-checked cursor over a byte buffer.
class Reader {
public:
    Reader(std::string_view bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) throw DataError(what_ + ": truncated at byte " + std::to_string(pos_));
    }
    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(bytes_[pos_++]);
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = 0;
        for (int i = 0; i < 2; ++i) v |= static_cast<std::uint16_t>(static_cast<std::uint8_t>(bytes_[pos_++]) << (8 * i));
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes_[pos_++])) << (8 * i);
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    std::string_view take(std::size_t n) {
        need(n);
        auto s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::size_t pos() const { return pos_; }
    std::size_t remaining() const { return bytes_.size() - pos_; }
    const std::string& what() const { return what_; }

private:
    std::string_view bytes_;
    std::string what_;
    std::size_t pos_ = 0;
};

}  // namespace le

// ---------------------------------------------------------------- TensorFile

/// Serializes as f32 regardless of T.
template <class T>
void encode_tensor(std::string& out, const Tensor<T>& t) {
    if (t.rank() == 0 || t.rank() > 255) throw ShapeError("TensorFile needs rank 1..255");
    out.append(kTensorMagic.data(), 4);
    le::put_u16(out, kTensorVersion);
    le::put_u8(out, kDtypeF32);
    le::put_u8(out, static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) {
        if (d > 0xFFFFFFFFull) throw ShapeError("dimension too large for TensorFile");
        le::put_u32(out, static_cast<std::uint32_t>(d));
    }
    for (T v : t.data()) le::put_f32(out, static_cast<float>(v));
}

template <class T>
std::string encode_tensor(const Tensor<T>& t) {
    std::string out;
    encode_tensor(out, t);
    return out;
}

inline Tensor<float> decode_tensor(le::Reader& r) {
    auto magic = r.take(4);
    if (std::memcmp(magic.data(), kTensorMagic.data(), 4) != 0) throw DataError(r.what() + ": bad magic");
    const auto version = r.u16();
    if (version != kTensorVersion) throw DataError(r.what() + ": unsupported version " + std::to_string(version));
    const auto dtype = r.u8();
    if (dtype != kDtypeF32) throw DataError(r.what() + ": unsupported dtype code " + std::to_string(dtype));
    const auto rank = r.u8();
    if (rank == 0) throw DataError(r.what() + ": rank 0 tensor");
    Shape shape(rank);
    std::size_t n = 1;
    for (auto& d : shape) {
        d = r.u32();
        if (d == 0) throw DataError(r.what() + ": zero dimension");
        if (n > (std::size_t{1} << 40) / d) throw DataError(r.what() + ": tensor too large");
        n *= d;
    }
    r.need(4 * n);
    std::vector<float> data(n);
    for (auto& v : data) v = r.f32();
    return Tensor<float>(std::move(shape), std::move(data));
}

inline Tensor<float> decode_tensor(std::string_view bytes, const std::string& what = "tensor") {
    le::Reader r(bytes, what);
    auto t = decode_tensor(r);
    if (r.remaining() != 0) throw DataError(what + ": " + std::to_string(r.remaining()) + " trailing bytes");
    return t;
}

template <class T>
void write_tensor(const fs::path& path, const Tensor<T>& t) {
    atomic_write(path, encode_tensor(t));
}

inline Tensor<float> read_tensor(const fs::path& path) { return decode_tensor(read_file(path), path.string()); }

// ---------------------------------------------------------------- checkpoint

/// Named tensors plus a JSON trailer (config, config hash, seed, ...).
/// Layout: records of (u32 name length, name bytes, TensorFile), closed by a
/// record whose name length is 0, then the UTF-8 JSON trailer up to EOF.
struct Checkpoint {
    std::vector<std::pair<std::string, Tensor<float>>> tensors;
    nlohmann::json trailer = nlohmann::json::object();
};

inline std::string encode_checkpoint(const Checkpoint& ck) {
    std::set<std::string> seen;
    std::string out;
    for (const auto& [name, t] : ck.tensors) {
        if (name.empty()) throw DataError("checkpoint tensor with empty name");
        if (!seen.insert(name).second) throw DataError("duplicate checkpoint tensor " + name);
        le::put_u32(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        encode_tensor(out, t);
    }
    le::put_u32(out, 0);
    out += ck.trailer.dump(2);
    out += '\n';
    return out;
}

inline Checkpoint decode_checkpoint(std::string_view bytes, const std::string& what = "checkpoint") {
    le::Reader r(bytes, what);
    Checkpoint ck;
    std::set<std::string> seen;
    for (;;) {
        const std::uint32_t len = r.u32();
        if (len == 0) break;
        std::string name(r.take(len));
        if (!seen.insert(name).second) throw DataError(what + ": duplicate tensor " + name);
        ck.tensors.emplace_back(name, decode_tensor(r));
    }
    auto rest = r.take(r.remaining());
    try {
        ck.trailer = nlohmann::json::parse(rest);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(what + ": bad JSON trailer: " + e.what());
    }
    if (!ck.trailer.is_object()) throw DataError(what + ": trailer is not a JSON object");
    return ck;
}

inline void save_checkpoint(const fs::path& path, const Checkpoint& ck) { atomic_write(path, encode_checkpoint(ck)); }
inline Checkpoint load_checkpoint(const fs::path& path) { return decode_checkpoint(read_file(path), path.string()); }

template <class T>
Checkpoint checkpoint_from(const ParameterSet<T>& ps, nlohmann::json trailer) {
    Checkpoint ck;
    for (const auto& [name, t] : ps.entries()) ck.tensors.emplace_back(name, cast<float>(t));
    ck.trailer = std::move(trailer);
    return ck;
}

/// Copies checkpoint tensors into `ps`; names and shapes must match exactly.
template <class T>
void load_parameters(ParameterSet<T>& ps, const Checkpoint& ck) {
    if (ck.tensors.size() != ps.entries().size())
        throw ConfigError("checkpoint has " + std::to_string(ck.tensors.size()) + " tensors, model expects " +
                          std::to_string(ps.entries().size()));
    for (const auto& [name, src] : ck.tensors) {
        Tensor<T>* dst = ps.find(name);
        if (!dst) throw ConfigError("checkpoint tensor " + name + " not in model");
        if (dst->shape() != src.shape())
            throw ConfigError("checkpoint tensor " + name + " has shape " + shape_str(src.shape()) + ", model expects " +
                              shape_str(dst->shape()));
        auto out = dst->mutable_data();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(src.data()[i]);
    }
}

// ---------------------------------------------------------------- manifest

enum class Split { train, val, test };

inline const char* split_name(Split s) { return s == Split::train ? "train" : s == Split::val ? "val" : "test"; }

inline Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw DataError("unknown split '" + s + "'");
}

struct ManifestEntry {
    std::string path;  // relative to the manifest directory unless absolute
    int label = UNKNOWN;
    Split split = Split::test;
    bool known = true;
};

struct DatasetManifest {
    std::string name;
    std::array<std::size_t, 3> image_shape{3, 32, 32};
    std::size_t num_known_classes = 0;
    std::vector<ManifestEntry> entries;
    fs::path base_dir;  // not serialized

    void validate() const {
        if (image_shape[0] != 3 || image_shape[1] == 0 || image_shape[2] == 0)
            throw DataError("manifest image_shape must be [3,H,W]");
        if (num_known_classes < 2) throw DataError("manifest needs at least 2 known classes");
        for (const auto& e : entries) {
            if (e.path.empty()) throw DataError("manifest entry with empty path");
            if (e.known) {
                if (e.label < 0 || e.label >= static_cast<int>(num_known_classes))
                    throw DataError("known entry " + e.path + " has label " + std::to_string(e.label) + " outside [0," +
                                    std::to_string(num_known_classes) + ")");
            } else {
                if (e.label != UNKNOWN) throw DataError("unknown entry " + e.path + " must have label -1");
                if (e.split != Split::test)
                    throw DataError("unknown-class entry " + e.path + " in " + split_name(e.split) +
                                    " split (only test may hold unknown classes)");
            }
        }
    }

    fs::path resolve(const ManifestEntry& e) const {
        fs::path p(e.path);
        return p.is_absolute() ? p : base_dir / p;
    }
};

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : m.entries)
        entries.push_back({{"path", e.path},
                           {"label", e.label},
                           {"split", split_name(e.split)},
                           {"openness", e.known ? "known" : "unknown"}});
    return {{"name", m.name},
            {"image_shape", m.image_shape},
            {"num_known_classes", m.num_known_classes},
            {"entries", entries}};
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j, const fs::path& base_dir) {
    DatasetManifest m;
    m.base_dir = base_dir;
    try {
        static const std::set<std::string> keys{"name", "image_shape", "num_known_classes", "entries"};
        for (auto it = j.begin(); it != j.end(); ++it)
            if (!keys.count(it.key())) throw DataError("manifest: unknown key '" + it.key() + "'");
        m.name = j.value("name", std::string{});
        auto shape = j.at("image_shape").get<std::vector<std::size_t>>();
        if (shape.size() != 3) throw DataError("manifest image_shape must have 3 entries");
        m.image_shape = {shape[0], shape[1], shape[2]};
        int max_label = -1;
        for (const auto& je : j.at("entries")) {
            ManifestEntry e;
            e.path = je.at("path").get<std::string>();
            e.label = je.at("label").get<int>();
            e.split = parse_split(je.at("split").get<std::string>());
            const auto open = je.at("openness").get<std::string>();
            if (open != "known" && open != "unknown") throw DataError("openness must be known or unknown");
            e.known = open == "known";
            if (e.known) max_label = std::max(max_label, e.label);
            m.entries.push_back(std::move(e));
        }
        m.num_known_classes = j.contains("num_known_classes") ? j.at("num_known_classes").get<std::size_t>()
                                                               : static_cast<std::size_t>(max_label + 1);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("manifest: ") + e.what());
    }
    m.validate();
    return m;
}

inline DatasetManifest load_manifest(const fs::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw DataError("manifest " + path.string() + ": " + e.what());
    }
    return manifest_from_json(j, path.parent_path());
}

inline void save_manifest(const fs::path& path, const DatasetManifest& m) {
    m.validate();
    atomic_write(path, manifest_to_json(m).dump(2) + "\n");
}

/// Loads the images of the selected entries, checking each against image_shape.
template <class T>
std::vector<Sample<T>> load_samples(const DatasetManifest& m, Split split, bool known, bool unknown) {
    std::vector<Sample<T>> out;
    const Shape want{m.image_shape[0], m.image_shape[1], m.image_shape[2]};
    for (const auto& e : m.entries) {
        if (e.split != split || (e.known ? !known : !unknown)) continue;
        Tensor<float> img = read_tensor(m.resolve(e));
        if (img.shape() != want)
            throw DataError(e.path + " has shape " + shape_str(img.shape()) + ", manifest says " + shape_str(want));
        out.push_back({e.path, cast<T>(img), e.label});
    }
    return out;
}

// ---------------------------------------------------------------- score CSV

inline std::string format_score(double v) {
    if (v == 0.0) v = 0.0;  // folds -0 into 0
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

namespace detail {

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) {
        if (c == '"') q += '"';
        q += c;
    }
    return q + '"';
}

inline std::vector<std::string> csv_split(const std::string& line, std::size_t lineno) {
    std::vector<std::string> out(1);
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                out.back() += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                out.back() += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.emplace_back();
        } else {
            out.back() += c;
        }
    }
    if (quoted) throw DataError("score csv line " + std::to_string(lineno) + ": unterminated quote");
    return out;
}

}  // namespace detail

inline const char* kScoreHeader = "path,true_label,pred_label,score";

inline std::string format_scores(const std::vector<ScoredSample>& rows) {
    std::string out = std::string(kScoreHeader) + "\n";
    for (const auto& r : rows) {
        if (r.path.find_first_of("\n\r") != std::string::npos) throw DataError("sample path contains a newline");
        out += detail::csv_field(r.path) + "," + std::to_string(r.true_label) + "," + std::to_string(r.pred_label) + "," +
               format_score(r.score) + "\n";
    }
    return out;
}

inline std::vector<ScoredSample> parse_scores(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != kScoreHeader) throw DataError("score csv: missing header");
    std::vector<ScoredSample> rows;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto f = detail::csv_split(line, lineno);
        if (f.size() != 4) throw DataError("score csv line " + std::to_string(lineno) + ": expected 4 fields");
        try {
            std::size_t used = 0;
            ScoredSample s;
            s.path = f[0];
            s.true_label = std::stoi(f[1]);
            s.pred_label = std::stoi(f[2]);
            s.score = std::stod(f[3], &used);
            if (used != f[3].size()) throw std::invalid_argument("trailing characters");
            rows.push_back(std::move(s));
        } catch (const std::logic_error&) {
            throw DataError("score csv line " + std::to_string(lineno) + ": bad number");
        }
    }
    return rows;
}

inline void write_scores(const fs::path& path, const std::vector<ScoredSample>& rows) {
    atomic_write(path, format_scores(rows));
}

inline std::vector<ScoredSample> read_scores(const fs::path& path) { return parse_scores(read_file(path)); }

}  // namespace stan
