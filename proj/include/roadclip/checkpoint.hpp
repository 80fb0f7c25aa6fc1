#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "roadclip/errors.hpp"

namespace roadclip {

// Versioned binary checkpoint container: fixed magic, little-endian framing,
// a JSON text header describing every tensor, then raw values back-to-back.
// The header embeds the full run configuration text, so a checkpoint is
// self-describing.  Serialization is canonical: save(load(save(x))) is
// byte-identical.

inline constexpr char kCheckpointMagic[8] = {'R', 'D', 'C', 'L', 'C', 'K', 'P', 'T'};
inline constexpr uint32_t kCheckpointVersion = 1;

template <typename T>
struct NamedBuffer {
    std::string name;
    std::vector<int> shape;
    std::vector<T> values;
};

template <typename T>
struct CheckpointData {
    int64_t epoch = 0;
    int64_t adam_t = 0;
    std::string config_text;
    std::vector<NamedBuffer<T>> tensors;

    const NamedBuffer<T>* find(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t;
        return nullptr;
    }
};

namespace ckptdetail {

template <typename T>
struct WireTraits;
template <>
struct WireTraits<float> {
    using bits = uint32_t;
    static constexpr const char* dtype = "f32";
};
template <>
struct WireTraits<double> {
    using bits = uint64_t;
    static constexpr const char* dtype = "f64";
};

template <typename U>
void put_le(std::string& out, U v) {
    for (size_t i = 0; i < sizeof(U); ++i)
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename U>
U get_le(const unsigned char* p) {
    U v = 0;
    for (size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
    return v;
}

inline int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
        if (d <= 0) return -1;
        n *= d;
    }
    return n;
}

}  // namespace ckptdetail

template <typename T>
std::string serialize_checkpoint(const CheckpointData<T>& data) {
    using traits = ckptdetail::WireTraits<T>;
    nlohmann::json tensors = nlohmann::json::array();
    int64_t offset = 0;
    for (const auto& t : data.tensors) {
        int64_t n = ckptdetail::shape_numel(t.shape);
        if (n < 0 || n != static_cast<int64_t>(t.values.size()))
            throw ValidationError("checkpoint: tensor '" + t.name + "' shape disagrees with " +
                                  std::to_string(t.values.size()) + " values");
        tensors.push_back({{"name", t.name},
                           {"shape", t.shape},
                           {"offset", offset},
                           {"count", n}});
        offset += n * static_cast<int64_t>(sizeof(T));
    }
    nlohmann::json header = {{"epoch", data.epoch},
                             {"adam_t", data.adam_t},
                             {"dtype", traits::dtype},
                             {"config", data.config_text},
                             {"tensors", tensors}};
    std::string header_text = header.dump();

    std::string out;
    out.reserve(20 + header_text.size() + static_cast<size_t>(offset));
    out.append(kCheckpointMagic, sizeof kCheckpointMagic);
    ckptdetail::put_le<uint32_t>(out, kCheckpointVersion);
    ckptdetail::put_le<uint64_t>(out, header_text.size());
    out += header_text;
    for (const auto& t : data.tensors)
        for (T v : t.values)
            ckptdetail::put_le(out, std::bit_cast<typename traits::bits>(v));
    return out;
}

template <typename T>
CheckpointData<T> parse_checkpoint(const std::string& bytes, const std::string& origin) {
    using traits = ckptdetail::WireTraits<T>;
    if (bytes.size() < 20 || bytes.compare(0, sizeof kCheckpointMagic, kCheckpointMagic,
                                           sizeof kCheckpointMagic) != 0)
        throw ValidationError("checkpoint: bad magic in " + origin);
    const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
    uint32_t version = ckptdetail::get_le<uint32_t>(raw + 8);
    if (version != kCheckpointVersion)
        throw ValidationError("checkpoint: version " + std::to_string(version) +
                              " unsupported, expected " + std::to_string(kCheckpointVersion) +
                              " in " + origin);
    uint64_t header_len = ckptdetail::get_le<uint64_t>(raw + 12);
    if (20 + header_len > bytes.size())
        throw IoError("checkpoint: truncated header in " + origin);

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(20, header_len));
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("checkpoint: bad header in " + origin + ": " + e.what());
    }

    CheckpointData<T> data;
    try {
        data.epoch = header.at("epoch").get<int64_t>();
        data.adam_t = header.at("adam_t").get<int64_t>();
        std::string dtype = header.at("dtype").get<std::string>();
        if (dtype != traits::dtype)
            throw ValidationError("checkpoint: dtype " + dtype + " does not match build " +
                                  traits::dtype + " in " + origin);
        data.config_text = header.at("config").get<std::string>();
        size_t base = 20 + header_len;
        int64_t expect_offset = 0;
        for (const auto& jt : header.at("tensors")) {
            NamedBuffer<T> t;
            t.name = jt.at("name").get<std::string>();
            t.shape = jt.at("shape").get<std::vector<int>>();
            int64_t count = jt.at("count").get<int64_t>();
            int64_t offset = jt.at("offset").get<int64_t>();
            if (t.name.empty())
                throw ValidationError("checkpoint: unnamed tensor in " + origin);
            if (ckptdetail::shape_numel(t.shape) != count)
                throw ValidationError("checkpoint: tensor '" + t.name +
                                      "' count disagrees with shape in " + origin);
            if (offset != expect_offset)
                throw ValidationError("checkpoint: tensor '" + t.name +
                                      "' offset out of order in " + origin);
            size_t start = base + static_cast<size_t>(offset);
            size_t len = static_cast<size_t>(count) * sizeof(T);
            if (start + len > bytes.size())
                throw IoError("checkpoint: truncated data for tensor '" + t.name + "' in " +
                              origin);
            t.values.resize(static_cast<size_t>(count));
            const auto* p = reinterpret_cast<const unsigned char*>(bytes.data()) + start;
            for (int64_t i = 0; i < count; ++i)
                t.values[static_cast<size_t>(i)] = std::bit_cast<T>(
                    ckptdetail::get_le<typename traits::bits>(p + static_cast<size_t>(i) *
                                                                      sizeof(T)));
            expect_offset += static_cast<int64_t>(len);
            data.tensors.push_back(std::move(t));
        }
        size_t expect_size = base + static_cast<size_t>(expect_offset);
        if (bytes.size() != expect_size)
            throw ValidationError("checkpoint: " + std::to_string(bytes.size() - expect_size) +
                                  " trailing bytes in " + origin);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("checkpoint: bad header in " + origin + ": " + e.what());
    }
    return data;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const CheckpointData<T>& data) {
    std::string bytes = serialize_checkpoint(data);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("save_checkpoint: cannot open " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("save_checkpoint: write failed for " + path.string());
}

template <typename T>
CheckpointData<T> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_checkpoint: cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_checkpoint<T>(ss.str(), path.string());
}

}  // namespace roadclip
