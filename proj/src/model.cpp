#include "mialab/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

namespace mialab {

// checkpoint payload is little-endian float32 written via raw memory
static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

using nlohmann::json;

const char* norm_kind_name(NormKind k) { return k == NormKind::layernorm ? "layernorm" : "nonorm"; }

NormKind norm_kind_from_name(const std::string& s) {
    if (s == "layernorm") return NormKind::layernorm;
    if (s == "nonorm") return NormKind::nonorm;
    throw ValidationError("unknown norm kind: " + s);
}

void ModelConfig::validate() const {
    if (vocab < 2) throw ValidationError("config: vocab must be >= 2");
    if (hidden < 1 || layers < 1 || heads < 1 || ffn < 1)
        throw ValidationError("config: dimensions must be positive");
    if (hidden % heads != 0) throw ValidationError("config: hidden must be divisible by heads");
    if (bottleneck && (*bottleneck < 1 || *bottleneck > ffn))
        throw ValidationError("config: bottleneck must satisfy 1 <= B <= ffn");
    if (max_seq < 2) throw ValidationError("config: max_seq must be >= 2");
}

static json config_to_json(const ModelConfig& c) {
    json j;
    j["vocab"] = c.vocab;
    j["hidden"] = c.hidden;
    j["layers"] = c.layers;
    j["heads"] = c.heads;
    j["ffn"] = c.ffn;
    if (c.bottleneck)
        j["bottleneck"] = *c.bottleneck;
    else
        j["bottleneck"] = nullptr;
    j["norm"] = norm_kind_name(c.norm);
    j["max_seq"] = c.max_seq;
    j["seed"] = c.seed;
    return j;
}

static ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.vocab = j.at("vocab").get<int>();
    c.hidden = j.at("hidden").get<int>();
    c.layers = j.at("layers").get<int>();
    c.heads = j.at("heads").get<int>();
    c.ffn = j.at("ffn").get<int>();
    if (j.contains("bottleneck") && !j.at("bottleneck").is_null())
        c.bottleneck = j.at("bottleneck").get<int>();
    c.norm = norm_kind_from_name(j.at("norm").get<std::string>());
    c.max_seq = j.at("max_seq").get<int>();
    c.seed = j.value("seed", uint64_t{0});
    c.validate();
    return c;
}

std::string ModelConfig::to_json_string() const { return config_to_json(*this).dump(); }

ModelConfig ModelConfig::from_json_string(const std::string& s) {
    try {
        return config_from_json(json::parse(s));
    } catch (const json::exception& e) {
        throw ValidationError("model config parse error: " + std::string(e.what()));
    }
}

int64_t ffn_up_path_weights(int hidden, int ffn, std::optional<int> bottleneck) {
    if (bottleneck)
        return static_cast<int64_t>(hidden) * *bottleneck + static_cast<int64_t>(*bottleneck) * ffn;
    return static_cast<int64_t>(hidden) * ffn;
}

int64_t param_count(const ModelConfig& cfg) {
    cfg.validate();
    const int64_t V = cfg.vocab, H = cfg.hidden, I = cfg.ffn, S = cfg.max_seq;
    int64_t n = V * H + S * H;  // embeddings
    const int64_t per_layer = 2 * H                             // norm1
                              + 4 * (H * H + H)                 // q,k,v,o projections
                              + 2 * H                           // norm2
                              + ffn_up_path_weights(cfg.hidden, cfg.ffn, cfg.bottleneck) + I  // up path + b_up
                              + I * H + H;                      // down projection
    n += cfg.layers * per_layer;
    n += 2 * H;      // final norm
    n += H * V + V;  // head
    return n;
}

ModelD widen(const ModelF& m) {
    ModelD out(m.config());
    auto& dst = out.parameter_tensors();
    const auto& src = m.parameter_tensors();
    for (size_t i = 0; i < src.size(); ++i) dst[i] = cast_tensor<double>(src[i]);
    return out;
}

double SequenceLogProbs::total_nll() const {
    double s = 0.0;
    for (double lp : target_logprob) s -= lp;
    return s;
}

double SequenceLogProbs::mean_logprob() const {
    if (target_logprob.empty()) throw ValidationError("no scored positions");
    double s = 0.0;
    for (double lp : target_logprob) s += lp;
    return s / static_cast<double>(target_logprob.size());
}

SequenceLogProbs forward_logprobs(const ModelD& m, std::span<const int> tokens, int prefix_len) {
    const int len = static_cast<int>(tokens.size());
    if (len < 2) throw ValidationError("forward_logprobs: need at least 2 tokens");
    if (prefix_len < 0) throw ValidationError("forward_logprobs: negative prefix_len");
    if (prefix_len >= len) throw ValidationError("forward_logprobs: empty target region");

    GraphD g;
    auto logits = m.build_logits(g, tokens, /*trainable=*/false);
    auto logprobs = g.log_softmax(logits, 1);
    const TensorD& rows = g.value(logprobs);

    SequenceLogProbs out;
    out.vocab = m.config().vocab;
    out.first_target = std::max(1, prefix_len);
    const int n_scored = len - out.first_target;
    out.rows = TensorD::zeros({n_scored, m.config().vocab});
    out.target_logprob.resize(static_cast<size_t>(n_scored));
    for (int r = 0; r < n_scored; ++r) {
        const int t = out.first_target + r;  // predicting tokens[t] from row t-1
        for (int z = 0; z < m.config().vocab; ++z) out.rows.at(r, z) = rows.at(t - 1, z);
        out.target_logprob[static_cast<size_t>(r)] = rows.at(t - 1, tokens[static_cast<size_t>(t)]);
    }
    return out;
}

// ---- checkpoint io ----

void save_checkpoint(const ModelF& m, const std::string& path) {
    json header;
    header["version"] = kCheckpointVersion;
    header["config"] = json::parse(m.config().to_json_string());
    json tensors = json::array();
    uint64_t offset = 0;
    const auto& names = m.parameter_names();
    const auto& ts = m.parameter_tensors();
    for (size_t i = 0; i < ts.size(); ++i) {
        json t;
        t["name"] = names[i];
        t["shape"] = ts[i].shape;
        t["offset"] = offset;
        tensors.push_back(std::move(t));
        offset += ts[i].data.size() * sizeof(float);
    }
    header["tensors"] = std::move(tensors);

    const std::string hs = header.dump();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw RuntimeFailure("cannot open checkpoint for write: " + path);
    const uint64_t hlen = hs.size();
    char lenbuf[8];
    for (int i = 0; i < 8; ++i) lenbuf[i] = static_cast<char>((hlen >> (8 * i)) & 0xff);
    out.write(lenbuf, 8);
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& t : ts)
        out.write(reinterpret_cast<const char*>(t.data.data()),
                  static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    if (!out.good()) throw RuntimeFailure("checkpoint write failed: " + path);
}

ModelF load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open checkpoint: " + path);

    char lenbuf[8];
    in.read(lenbuf, 8);
    if (in.gcount() != 8) throw ValidationError("corrupt checkpoint (truncated length prefix): " + path);
    uint64_t hlen = 0;
    for (int i = 0; i < 8; ++i) hlen |= static_cast<uint64_t>(static_cast<unsigned char>(lenbuf[i])) << (8 * i);
    if (hlen == 0 || hlen > (1ull << 24)) throw ValidationError("corrupt checkpoint (bad header length)");

    std::string hs(hlen, '\0');
    in.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (static_cast<uint64_t>(in.gcount()) != hlen)
        throw ValidationError("corrupt checkpoint (truncated header): " + path);

    json header;
    try {
        header = json::parse(hs);
    } catch (const json::exception& e) {
        throw ValidationError("corrupt checkpoint header: " + std::string(e.what()));
    }
    const uint32_t version = header.at("version").get<uint32_t>();
    if (version != kCheckpointVersion)
        throw ValidationError("checkpoint version mismatch: have " + std::to_string(version) + ", expect " +
                              std::to_string(kCheckpointVersion));

    ModelF m(config_from_json(header.at("config")));
    const auto& names = m.parameter_names();
    auto& ts = m.parameter_tensors();
    const auto& manifest = header.at("tensors");
    if (manifest.size() != ts.size())
        throw ValidationError("checkpoint tensor manifest does not match config (count mismatch)");

    for (size_t i = 0; i < ts.size(); ++i) {
        const auto& entry = manifest[i];
        if (entry.at("name").get<std::string>() != names[i])
            throw ValidationError("checkpoint tensor name mismatch at index " + std::to_string(i));
        const auto shape = entry.at("shape").get<std::vector<int64_t>>();
        if (shape != ts[i].shape)
            throw ValidationError("checkpoint shape mismatch for " + names[i] + ": file " +
                                  shape_str(shape) + " vs config " + shape_str(ts[i].shape));
    }

    const std::streampos payload_start = in.tellg();
    for (size_t i = 0; i < ts.size(); ++i) {
        const uint64_t offset = manifest[i].at("offset").get<uint64_t>();
        in.seekg(payload_start + static_cast<std::streamoff>(offset));
        in.read(reinterpret_cast<char*>(ts[i].data.data()),
                static_cast<std::streamsize>(ts[i].data.size() * sizeof(float)));
        if (static_cast<size_t>(in.gcount()) != ts[i].data.size() * sizeof(float))
            throw ValidationError("corrupt checkpoint (truncated payload at " + names[i] + ")");
    }
    return m;
}

}  // namespace mialab
