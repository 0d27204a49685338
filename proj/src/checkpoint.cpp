#include "saeforge/checkpoint.hpp"

#include "saeforge/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

namespace saeforge {

namespace {

constexpr std::uint64_t kHeaderBytes = 8 + 4 + 8;

void put_le(std::vector<char>& out, std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
}

std::uint64_t get_le(const std::vector<char>& in, std::uint64_t at, int bytes) {
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) {
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + static_cast<std::uint64_t>(i)])) << (8 * i);
    }
    return v;
}

std::vector<char> read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw std::runtime_error("cannot open " + path.string());
    }
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

std::vector<char> encode_checkpoint(const NamedTensors& tensors, const nlohmann::json& run) {
    nlohmann::json entries = nlohmann::json::array();
    std::set<std::string> names;
    std::uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        if (!names.insert(name).second) {
            throw std::invalid_argument("checkpoint: duplicate tensor name '" + name + "'");
        }
        const std::uint64_t nbytes = t.numel() * sizeof(float);
        entries.push_back({{"name", name}, {"dtype", "f32"}, {"shape", t.shape()}, {"offset", offset},
                           {"nbytes", nbytes}});
        offset += nbytes;
    }
    const nlohmann::json meta = {{"tensors", entries}, {"run", run.is_null() ? nlohmann::json::object() : run}};
    const std::string text = meta.dump();

    std::vector<char> out(kCheckpointMagic, kCheckpointMagic + 8);
    put_le(out, kCheckpointVersion, 4);
    put_le(out, text.size(), 8);
    out.insert(out.end(), text.begin(), text.end());
    out.reserve(out.size() + offset);
    for (const auto& [name, t] : tensors) {
        for (float v : t.data()) {
            put_le(out, std::bit_cast<std::uint32_t>(v), 4);
        }
    }
    return out;
}

Checkpoint decode_checkpoint(const std::vector<char>& bytes) {
    const std::uint64_t size = bytes.size();
    if (size < 8 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
        throw CheckpointError("checkpoint: bad magic, expected SAEFORGE", 0);
    }
    if (size < 12) {
        throw CheckpointError("checkpoint: truncated before version", size);
    }
    const auto version = static_cast<std::uint32_t>(get_le(bytes, 8, 4));
    if (version != kCheckpointVersion) {
        throw CheckpointError("checkpoint: unsupported version " + std::to_string(version), 8);
    }
    if (size < kHeaderBytes) {
        throw CheckpointError("checkpoint: truncated before metadata length", size);
    }
    const std::uint64_t meta_len = get_le(bytes, 12, 8);
    if (meta_len > size - kHeaderBytes) {
        throw CheckpointError("checkpoint: metadata length " + std::to_string(meta_len) + " runs past end of file",
                              size);
    }
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(bytes.begin() + kHeaderBytes,
                                     bytes.begin() + static_cast<std::ptrdiff_t>(kHeaderBytes + meta_len));
    } catch (const nlohmann::json::parse_error& e) {
        throw CheckpointError(std::string("checkpoint: metadata is not valid JSON: ") + e.what(),
                              kHeaderBytes + e.byte);
    }
    const std::uint64_t payload = kHeaderBytes + meta_len;
    if (!meta.is_object() || !meta.contains("tensors") || !meta["tensors"].is_array()) {
        throw CheckpointError("checkpoint: metadata lacks a tensor list", kHeaderBytes);
    }

    Checkpoint ckpt;
    ckpt.run = meta.value("run", nlohmann::json::object());
    std::uint64_t expected = 0;
    for (const auto& e : meta["tensors"]) {
        std::string name;
        Shape shape;
        std::uint64_t offset = 0, nbytes = 0;
        try {
            name = e.at("name").get<std::string>();
            shape = e.at("shape").get<Shape>();
            offset = e.at("offset").get<std::uint64_t>();
            nbytes = e.at("nbytes").get<std::uint64_t>();
            if (e.at("dtype").get<std::string>() != "f32") {
                throw CheckpointError("checkpoint: tensor '" + name + "' has unsupported dtype", kHeaderBytes);
            }
        } catch (const nlohmann::json::exception& ex) {
            throw CheckpointError(std::string("checkpoint: malformed tensor entry: ") + ex.what(), kHeaderBytes);
        }
        if (offset != expected || nbytes != shape_numel(shape) * sizeof(float)) {
            throw CheckpointError("checkpoint: tensor '" + name + "' has inconsistent offset or size",
                                  payload + offset);
        }
        if (payload + offset + nbytes > size) {
            throw CheckpointError("checkpoint: file truncated inside tensor '" + name + "'", size);
        }
        Tensor<float> t(shape);
        auto dst = t.data();
        for (std::size_t i = 0; i < dst.size(); ++i) {
            dst[i] = std::bit_cast<float>(static_cast<std::uint32_t>(get_le(bytes, payload + offset + 4 * i, 4)));
        }
        ckpt.tensors.emplace_back(std::move(name), std::move(t));
        expected += nbytes;
    }
    if (payload + expected != size) {
        throw CheckpointError("checkpoint: " + std::to_string(size - payload - expected) +
                                  " trailing bytes after payload",
                              payload + expected);
    }
    return ckpt;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) {
            throw std::runtime_error("cannot open " + tmp.string() + " for writing");
        }
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f.flush()) {
            throw std::runtime_error("write to " + tmp.string() + " failed");
        }
    }
    std::filesystem::rename(tmp, path);
}

void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors, const nlohmann::json& run) {
    const auto bytes = encode_checkpoint(tensors, run);
    write_file_atomic(path, std::string(bytes.begin(), bytes.end()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(read_file(path));
}

void save_sae(const std::filesystem::path& path, const SparseAutoencoder<float>& sae, nlohmann::json run) {
    sae.validate();
    run["kind"] = "sae";
    run["d_model"] = sae.d_model();
    run["n_dict"] = sae.n_dict();
    run["placement_layer"] = sae.placement_layer;
    NamedTensors tensors;
    for (const auto& [name, t] : sae.named()) {
        tensors.emplace_back(name, *t);
    }
    save_checkpoint(path, tensors, run);
}

SparseAutoencoder<float> sae_from_checkpoint(const Checkpoint& ckpt) {
    if (ckpt.run.value("kind", "") != "sae") {
        throw std::invalid_argument("checkpoint does not hold an SAE");
    }
    SparseAutoencoder<float> sae;
    sae.placement_layer = ckpt.run.at("placement_layer").get<std::size_t>();
    for (auto& [name, dst] : sae.named()) {
        bool found = false;
        for (const auto& [n, t] : ckpt.tensors) {
            if (n == name) {
                *dst = t;
                found = true;
            }
        }
        if (!found) {
            throw std::invalid_argument("SAE checkpoint is missing '" + name + "'");
        }
    }
    sae.validate();
    return sae;
}

SparseAutoencoder<float> load_sae(const std::filesystem::path& path) {
    return sae_from_checkpoint(load_checkpoint(path));
}

void save_transformer(const std::filesystem::path& path, const TransformerParams<float>& params, nlohmann::json run) {
    const auto& c = params.config;
    run["kind"] = "transformer";
    run["model"] = c;
    NamedTensors tensors;
    for (const auto& [name, t] : params.named()) {
        tensors.emplace_back(name, *t);
    }
    save_checkpoint(path, tensors, run);
}

TransformerParams<float> transformer_from_checkpoint(const Checkpoint& ckpt) {
    if (ckpt.run.value("kind", "") != "transformer") {
        throw std::invalid_argument("checkpoint does not hold a transformer");
    }
    const auto& m = ckpt.run.at("model");
    const auto c = m.get<TransformerConfig>();
    return transformer_from_named(c, ckpt.tensors);
}

TransformerParams<float> load_transformer(const std::filesystem::path& path) {
    return transformer_from_checkpoint(load_checkpoint(path));
}

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t seed) {
    std::uint64_t h = seed;
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t fnv1a64(const std::string& s) {
    return fnv1a64(s.data(), s.size());
}

std::string hex64(std::uint64_t v) {
    std::ostringstream s;
    s << std::hex << std::setw(16) << std::setfill('0') << v;
    return s.str();
}

namespace {

template <typename P>
std::uint64_t hash_named(const P& p) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [name, t] : p.named()) {
        h = fnv1a64(name.data(), name.size(), h);
        h = fnv1a64(t->data().data(), t->numel() * sizeof(float), h);
    }
    return h;
}

}  // namespace

std::uint64_t parameter_hash(const TransformerParams<float>& params) {
    return hash_named(params);
}

std::uint64_t parameter_hash(const SparseAutoencoder<float>& sae) {
    return hash_named(sae);
}

}  // namespace saeforge
