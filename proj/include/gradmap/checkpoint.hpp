#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "gradmap/model.hpp"

namespace gradmap {

// Layout (all integers little-endian):
//   "GMAP" | u32 version | u32 metadata_len | metadata JSON
//   | u32 tensor_count | { u16 name_len | name | u8 dtype | u8 rank | u32 dims[rank] | payload }
inline constexpr char kCheckpointMagic[4] = {'G', 'M', 'A', 'P'};
inline constexpr std::uint32_t kFormatVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace detail {

class ByteWriter {
public:
    template <typename T>
    void put(T v) {
        char buf[sizeof(T)];
        std::memcpy(buf, &v, sizeof(T));
        bytes_.insert(bytes_.end(), buf, buf + sizeof(T));
    }
    void put_bytes(const void* p, std::size_t n) {
        const char* c = static_cast<const char*>(p);
        bytes_.insert(bytes_.end(), c, c + n);
    }
    std::vector<char> take() { return std::move(bytes_); }

private:
    std::vector<char> bytes_;
};

class ByteReader {
public:
    explicit ByteReader(const std::vector<char>& bytes) : bytes_(bytes) {}

    template <typename T>
    T get(const char* what) {
        need(sizeof(T), what);
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string get_string(std::size_t n, const char* what) {
        need(n, what);
        std::string s(bytes_.data() + pos_, n);
        pos_ += n;
        return s;
    }
    const char* take(std::size_t n, const char* what) {
        need(n, what);
        const char* p = bytes_.data() + pos_;
        pos_ += n;
        return p;
    }
    std::size_t offset() const noexcept { return pos_; }
    bool at_end() const noexcept { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n, const char* what) const {
        if (bytes_.size() - pos_ < n) {
            throw FormatError(std::string("truncated checkpoint while reading ") + what, pos_);
        }
    }
    const std::vector<char>& bytes_;
    std::size_t pos_ = 0;
};

inline nlohmann::json config_to_json(const ModelConfig& c) {
    return {{"n_layers", c.n_layers},     {"d_model", c.d_model}, {"n_heads", c.n_heads},
            {"d_ffn", c.d_ffn},           {"vocab_size", c.vocab_size},
            {"max_seq", c.max_seq},       {"precision", c.precision == Precision::f32 ? "f32" : "f64"}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.d_ffn = j.at("d_ffn").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.max_seq = j.at("max_seq").get<std::size_t>();
    const std::string p = j.at("precision").get<std::string>();
    if (p != "f32" && p != "f64") throw InputError("unknown precision '" + p + "'");
    c.precision = p == "f32" ? Precision::f32 : Precision::f64;
    return c;
}

} // namespace detail

inline std::vector<char> serialize_checkpoint(const TransformerModel& model) {
    const ModelConfig& c = model.config();
    nlohmann::json meta;
    meta["config"] = detail::config_to_json(c);
    meta["removed"] = model.removed();
    meta["original_indices"] = model.retained_indices();
    meta["provenance"] = model.provenance();
    const std::string meta_text = meta.dump();

    detail::ByteWriter w;
    w.put_bytes(kCheckpointMagic, 4);
    w.put<std::uint32_t>(kFormatVersion);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(meta_text.size()));
    w.put_bytes(meta_text.data(), meta_text.size());

    std::uint32_t count = 0;
    model.for_each_parameter([&](const std::string&, const Tensor&) { ++count; });
    w.put<std::uint32_t>(count);

    const bool f32 = c.precision == Precision::f32;
    model.for_each_parameter([&](const std::string& name, const Tensor& t) {
        w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
        w.put_bytes(name.data(), name.size());
        w.put<std::uint8_t>(f32 ? 0 : 1);
        w.put<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
        for (std::size_t d : t.dims()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
        for (double v : t.data()) {
            if (f32) {
                w.put<float>(static_cast<float>(v));
            } else {
                w.put<double>(v);
            }
        }
    });
    return w.take();
}

inline TransformerModel deserialize_checkpoint(const std::vector<char>& bytes) {
    detail::ByteReader r(bytes);
    const std::string magic = r.get_string(4, "magic");
    if (magic != std::string(kCheckpointMagic, 4)) {
        throw FormatError("bad magic: expected 'GMAP'", 0);
    }
    const std::size_t version_offset = r.offset();
    const auto version = r.get<std::uint32_t>("format version");
    if (version != kFormatVersion) {
        throw FormatError("unsupported format version " + std::to_string(version) + " (expected " +
                              std::to_string(kFormatVersion) + ")",
                          version_offset);
    }
    const auto meta_len = r.get<std::uint32_t>("metadata length");
    const std::size_t meta_offset = r.offset();
    nlohmann::json meta;
    ModelConfig config;
    std::vector<int> indices;
    std::string provenance;
    try {
        meta = nlohmann::json::parse(r.get_string(meta_len, "metadata"));
        config = detail::config_from_json(meta.at("config"));
        indices = meta.at("original_indices").get<std::vector<int>>();
        provenance = meta.at("provenance").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("invalid metadata: ") + e.what(), meta_offset);
    }

    std::map<std::string, Tensor> tensors;
    const auto count = r.get<std::uint32_t>("tensor count");
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::size_t entry_offset = r.offset();
        const auto name_len = r.get<std::uint16_t>("tensor name length");
        std::string name = r.get_string(name_len, "tensor name");
        const auto dtype = r.get<std::uint8_t>("dtype");
        if (dtype > 1) throw FormatError("unknown dtype " + std::to_string(dtype), r.offset() - 1);
        const auto rank = r.get<std::uint8_t>("rank");
        Dims dims(rank);
        for (auto& d : dims) d = r.get<std::uint32_t>("dims");
        const std::size_t n = dims_product(dims);
        const std::size_t width = dtype == 0 ? sizeof(float) : sizeof(double);
        if (n > (bytes.size() - r.offset()) / width) {
            throw FormatError("truncated tensor payload for " + name, r.offset());
        }
        const char* payload = r.take(n * width, "tensor payload");
        std::vector<double> data(n);
        for (std::size_t k = 0; k < n; ++k) {
            if (dtype == 0) {
                float f;
                std::memcpy(&f, payload + k * width, width);
                data[k] = f;
            } else {
                std::memcpy(&data[k], payload + k * width, width);
            }
            if (!std::isfinite(data[k])) throw FormatError("non-finite value in " + name, entry_offset);
        }
        if (!tensors.emplace(name, Tensor(std::move(dims), std::move(data))).second) {
            throw FormatError("duplicate tensor " + name, entry_offset);
        }
    }
    if (!r.at_end()) throw FormatError("trailing bytes after tensor table", r.offset());

    auto take = [&](const std::string& name) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw FormatError("missing tensor " + name, r.offset());
        Tensor t = std::move(it->second);
        tensors.erase(it);
        return t;
    };
    try {
        std::vector<IndexedLayer> layers;
        for (int idx : indices) {
            DecoderLayer l;
            for (LayerWeight w : kLayerWeights) l.weight(w) = take(layer_param_name(idx, w));
            layers.push_back({idx, std::move(l)});
        }
        Tensor embedding = take("embedding");
        Tensor position = take("position_embedding");
        Tensor final_norm = take("final_norm");
        Tensor lm_head = take("lm_head");
        if (!tensors.empty()) throw FormatError("unexpected tensor " + tensors.begin()->first, r.offset());
        TransformerModel model(config, std::move(embedding), std::move(position), std::move(final_norm),
                               std::move(lm_head), std::move(layers), provenance);
        std::vector<int> removed = meta.at("removed").get<std::vector<int>>();
        if (std::set<int>(removed.begin(), removed.end()) != model.removed()) {
            throw FormatError("removed set inconsistent with layer indices", meta_offset);
        }
        return model;
    } catch (const FormatError&) {
        throw;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("invalid metadata: ") + e.what(), meta_offset);
    } catch (const InputError& e) {
        throw FormatError(std::string("inconsistent checkpoint: ") + e.what(), meta_offset);
    }
}

inline std::vector<char> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open " + path.string());
    return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file_bytes(const std::filesystem::path& path, const std::vector<char>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw InputError("write failed for " + path.string());
}

inline void save_checkpoint(const TransformerModel& model, const std::filesystem::path& path) {
    write_file_bytes(path, serialize_checkpoint(model));
}

inline TransformerModel load_checkpoint(const std::filesystem::path& path) {
    return deserialize_checkpoint(read_file_bytes(path));
}

} // namespace gradmap
