#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mialab/graph.hpp"
#include "mialab/rng.hpp"
#include "mialab/tensor.hpp"

namespace mialab {

enum class NormKind { layernorm, nonorm };

const char* norm_kind_name(NormKind k);
NormKind norm_kind_from_name(const std::string& s);

// Decoder-only causal transformer configuration. `bottleneck`, when set,
// splits the FFN up-projection H->I into H->B (linear) -> B->I, with the
// single nonlinearity applied after the I projection. `norm` selects standard
// layer normalization or the element-wise affine replacement at every
// normalization site (pre-attention, pre-FFN, final).
struct ModelConfig {
    int vocab = 256;
    int hidden = 64;
    int layers = 2;
    int heads = 2;
    int ffn = 256;
    std::optional<int> bottleneck;
    NormKind norm = NormKind::layernorm;
    int max_seq = 128;
    uint64_t seed = 0;

    void validate() const;
    std::string to_json_string() const;
    static ModelConfig from_json_string(const std::string& s);
    bool operator==(const ModelConfig&) const = default;
};

// Exact trainable-scalar count implied by the config; must match the
// instantiated model.
int64_t param_count(const ModelConfig& cfg);

// Weight count of the FFN up-path alone (excluding biases): H*I standard,
// H*B + B*I with a bottleneck.
int64_t ffn_up_path_weights(int hidden, int ffn, std::optional<int> bottleneck);

// True iff the bottleneck variant has fewer total parameters than the
// standard FFN at these dimensions.
inline bool bottleneck_saves_params(int hidden, int ffn, int bottleneck) {
    return static_cast<int64_t>(bottleneck) * (hidden + ffn) <
           static_cast<int64_t>(hidden) * ffn;
}

template <typename T>
class Model {
public:
    using NodeId = typename Graph<T>::NodeId;

    explicit Model(ModelConfig cfg);

    // Seeded initialization: weights and embeddings N(0, 0.02), biases and
    // norm shifts zero, norm gains one.
    void init_parameters();

    const ModelConfig& config() const { return cfg_; }

    std::vector<Tensor<T>*> parameters();
    const std::vector<std::string>& parameter_names() const { return names_; }
    const std::vector<Tensor<T>>& parameter_tensors() const { return tensors_; }
    std::vector<Tensor<T>>& parameter_tensors() { return tensors_; }

    // Builds the forward graph and returns the logits node [len(tokens), V].
    // Row t holds the next-token logits after consuming tokens[0..t].
    // With trainable=false the parameters enter the graph as constants, so no
    // gradient can flow into them (frozen-teacher contract).
    NodeId build_logits(Graph<T>& g, std::span<const int> tokens, bool trainable,
                        std::vector<NodeId>* param_nodes = nullptr) const;

    // Same forward, but over externally created parameter leaves (one per
    // tensor, in parameter order). Used by the finite-difference harness.
    NodeId build_logits_from(Graph<T>& g, const std::vector<NodeId>& param_ids,
                             std::span<const int> tokens) const;

private:
    struct LayerIdx {
        int norm1_g, norm1_b;
        int wq, bq, wk, bk, wv, bv, wo, bo;
        int norm2_g, norm2_b;
        int w_in;  // -1 without bottleneck
        int w_up, b_up, w_down, b_down;
    };

    int add_tensor(const std::string& name, std::vector<int64_t> shape);
    NodeId apply_norm(Graph<T>& g, NodeId x, NodeId gain, NodeId shift) const;

    ModelConfig cfg_;
    std::vector<std::string> names_;
    std::vector<Tensor<T>> tensors_;
    int tok_embed_, pos_embed_;
    std::vector<LayerIdx> layers_;
    int final_g_, final_b_, head_w_, head_b_;
};

using ModelF = Model<float>;
using ModelD = Model<double>;

ModelD widen(const ModelF& m);

// Single normalization site applied to a batch of hidden vectors [N, W] (or
// one vector [W]). layernorm: per-row statistics then affine. nonorm: the
// element-wise affine gain*h + shift with no statistics computed.
template <typename T>
Tensor<T> norm_apply(const Tensor<T>& h, const Tensor<T>& gain, const Tensor<T>& shift, NormKind kind) {
    Tensor<T> input = h;
    if (input.ndim() == 1) input.shape = {1, input.shape[0]};
    if (input.ndim() != 2) throw ValidationError("norm_apply: want [N,W] or [W]");
    Graph<T> g;
    auto x = g.constant(std::move(input));
    if (kind == NormKind::layernorm) x = g.layernorm_rows(x, 1e-5);
    auto y = g.row_add(g.row_mul(x, g.constant(gain)), g.constant(shift));
    Tensor<T> out = g.value(y);
    out.shape = h.shape;
    return out;
}

// Per-position next-token log-probabilities for one sequence, in 64-bit mode.
// Row r is the full log-distribution conditioning on tokens[0..first_target+r)
// and predicts tokens[first_target + r]. Positions before first_target
// contribute context only.
struct SequenceLogProbs {
    int vocab = 0;
    int first_target = 1;
    TensorD rows;                        // [n_scored, V]
    std::vector<double> target_logprob;  // log p(tokens[first_target + r])

    int n_scored() const { return static_cast<int>(target_logprob.size()); }
    double total_nll() const;
    double mean_logprob() const;
};

SequenceLogProbs forward_logprobs(const ModelD& m, std::span<const int> tokens, int prefix_len = 0);

// ---- checkpoint file format ----
// [u64 little-endian header length][UTF-8 JSON header][raw float32 payload]
// Header: {"version": 1, "config": {...}, "tensors": [{name, shape, offset}]}
// with offsets in bytes from the start of the payload. Round-trips bit-exactly.

inline constexpr uint32_t kCheckpointVersion = 1;

void save_checkpoint(const ModelF& m, const std::string& path);
ModelF load_checkpoint(const std::string& path);

// ---- template implementation ----

template <typename T>
Model<T>::Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const int64_t V = cfg_.vocab, H = cfg_.hidden, I = cfg_.ffn, S = cfg_.max_seq;
    tok_embed_ = add_tensor("tok_embed", {V, H});
    pos_embed_ = add_tensor("pos_embed", {S, H});
    for (int l = 0; l < cfg_.layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        LayerIdx li{};
        li.norm1_g = add_tensor(p + "norm1.gain", {H});
        li.norm1_b = add_tensor(p + "norm1.shift", {H});
        li.wq = add_tensor(p + "attn.wq", {H, H});
        li.bq = add_tensor(p + "attn.bq", {H});
        li.wk = add_tensor(p + "attn.wk", {H, H});
        li.bk = add_tensor(p + "attn.bk", {H});
        li.wv = add_tensor(p + "attn.wv", {H, H});
        li.bv = add_tensor(p + "attn.bv", {H});
        li.wo = add_tensor(p + "attn.wo", {H, H});
        li.bo = add_tensor(p + "attn.bo", {H});
        li.norm2_g = add_tensor(p + "norm2.gain", {H});
        li.norm2_b = add_tensor(p + "norm2.shift", {H});
        if (cfg_.bottleneck) {
            li.w_in = add_tensor(p + "ffn.w_in", {H, *cfg_.bottleneck});
            li.w_up = add_tensor(p + "ffn.w_up", {*cfg_.bottleneck, I});
        } else {
            li.w_in = -1;
            li.w_up = add_tensor(p + "ffn.w_up", {H, I});
        }
        li.b_up = add_tensor(p + "ffn.b_up", {I});
        li.w_down = add_tensor(p + "ffn.w_down", {I, H});
        li.b_down = add_tensor(p + "ffn.b_down", {H});
        layers_.push_back(li);
    }
    final_g_ = add_tensor("final_norm.gain", {H});
    final_b_ = add_tensor("final_norm.shift", {H});
    head_w_ = add_tensor("head.w", {H, V});
    head_b_ = add_tensor("head.b", {V});
}

template <typename T>
int Model<T>::add_tensor(const std::string& name, std::vector<int64_t> shape) {
    names_.push_back(name);
    tensors_.push_back(Tensor<T>::zeros(std::move(shape)));
    return static_cast<int>(tensors_.size() - 1);
}

template <typename T>
void Model<T>::init_parameters() {
    Rng rng(mix_seed(cfg_.seed, "model-init"));
    for (size_t i = 0; i < tensors_.size(); ++i) {
        const std::string& name = names_[i];
        const bool is_gain = name.ends_with(".gain");
        const bool is_bias = name.ends_with(".shift") || name[name.find_last_of('.') + 1] == 'b';
        if (is_gain) {
            for (auto& v : tensors_[i].data) v = T(1);
        } else if (is_bias) {
            for (auto& v : tensors_[i].data) v = T(0);
        } else {
            for (auto& v : tensors_[i].data) v = static_cast<T>(rng.normal(0.0, 0.02));
        }
    }
}

template <typename T>
std::vector<Tensor<T>*> Model<T>::parameters() {
    std::vector<Tensor<T>*> out;
    out.reserve(tensors_.size());
    for (auto& t : tensors_) out.push_back(&t);
    return out;
}

template <typename T>
typename Model<T>::NodeId Model<T>::apply_norm(Graph<T>& g, NodeId x, NodeId gain, NodeId shift) const {
    NodeId h = x;
    if (cfg_.norm == NormKind::layernorm) h = g.layernorm_rows(h, 1e-5);
    // nonorm: element-wise gain*h + shift with no statistics computed
    return g.row_add(g.row_mul(h, gain), shift);
}

template <typename T>
typename Model<T>::NodeId Model<T>::build_logits(Graph<T>& g, std::span<const int> tokens, bool trainable,
                                                 std::vector<NodeId>* param_nodes) const {
    std::vector<NodeId> pn;
    pn.reserve(tensors_.size());
    for (const auto& t : tensors_) pn.push_back(trainable ? g.param(t) : g.constant(t));
    if (param_nodes) *param_nodes = pn;
    return build_logits_from(g, pn, tokens);
}

template <typename T>
typename Model<T>::NodeId Model<T>::build_logits_from(Graph<T>& g, const std::vector<NodeId>& pn,
                                                      std::span<const int> tokens) const {
    const int len = static_cast<int>(tokens.size());
    if (len < 1) throw ValidationError("forward: empty token sequence");
    if (len > cfg_.max_seq)
        throw ValidationError("forward: sequence length " + std::to_string(len) + " exceeds max_seq " +
                              std::to_string(cfg_.max_seq));
    if (pn.size() != tensors_.size()) throw ValidationError("forward: wrong parameter node count");
    for (int t : tokens)
        if (t < 0 || t >= cfg_.vocab) throw ValidationError("forward: token id out of vocabulary");

    std::vector<int> tok_idx(tokens.begin(), tokens.end());
    std::vector<int> pos_idx(static_cast<size_t>(len));
    for (int i = 0; i < len; ++i) pos_idx[static_cast<size_t>(i)] = i;

    NodeId x = g.add(g.gather_rows(pn[static_cast<size_t>(tok_embed_)], tok_idx),
                     g.gather_rows(pn[static_cast<size_t>(pos_embed_)], pos_idx));

    const int hd = cfg_.hidden / cfg_.heads;
    std::vector<uint8_t> causal(static_cast<size_t>(len) * static_cast<size_t>(len), 0);
    for (int i = 0; i < len; ++i)
        for (int j = i + 1; j < len; ++j) causal[static_cast<size_t>(i) * len + j] = 1;

    for (const auto& li : layers_) {
        NodeId xn = apply_norm(g, x, pn[static_cast<size_t>(li.norm1_g)], pn[static_cast<size_t>(li.norm1_b)]);
        NodeId q = g.row_add(g.matmul(xn, pn[static_cast<size_t>(li.wq)]), pn[static_cast<size_t>(li.bq)]);
        NodeId k = g.row_add(g.matmul(xn, pn[static_cast<size_t>(li.wk)]), pn[static_cast<size_t>(li.bk)]);
        NodeId v = g.row_add(g.matmul(xn, pn[static_cast<size_t>(li.wv)]), pn[static_cast<size_t>(li.bv)]);

        std::vector<NodeId> heads;
        heads.reserve(static_cast<size_t>(cfg_.heads));
        for (int h = 0; h < cfg_.heads; ++h) {
            NodeId qh = g.slice_cols(q, static_cast<int64_t>(h) * hd, hd);
            NodeId kh = g.slice_cols(k, static_cast<int64_t>(h) * hd, hd);
            NodeId vh = g.slice_cols(v, static_cast<int64_t>(h) * hd, hd);
            NodeId scores = g.scale(g.matmul(qh, g.transpose(kh)), 1.0 / std::sqrt(static_cast<double>(hd)));
            NodeId masked = g.mask_fill(scores, causal, static_cast<T>(-1e30));
            NodeId probs = g.softmax(masked, 1);
            heads.push_back(g.matmul(probs, vh));
        }
        NodeId attn = g.row_add(g.matmul(g.concat_cols(heads), pn[static_cast<size_t>(li.wo)]),
                                pn[static_cast<size_t>(li.bo)]);
        x = g.add(x, attn);

        NodeId fn = apply_norm(g, x, pn[static_cast<size_t>(li.norm2_g)], pn[static_cast<size_t>(li.norm2_b)]);
        NodeId up = li.w_in >= 0
                        ? g.matmul(g.matmul(fn, pn[static_cast<size_t>(li.w_in)]), pn[static_cast<size_t>(li.w_up)])
                        : g.matmul(fn, pn[static_cast<size_t>(li.w_up)]);
        NodeId act = g.gelu(g.row_add(up, pn[static_cast<size_t>(li.b_up)]));
        NodeId down = g.row_add(g.matmul(act, pn[static_cast<size_t>(li.w_down)]),
                                pn[static_cast<size_t>(li.b_down)]);
        x = g.add(x, down);
    }

    NodeId xf = apply_norm(g, x, pn[static_cast<size_t>(final_g_)], pn[static_cast<size_t>(final_b_)]);
    return g.row_add(g.matmul(xf, pn[static_cast<size_t>(head_w_)]), pn[static_cast<size_t>(head_b_)]);
}

}  // namespace mialab
