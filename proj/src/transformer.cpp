#include "saeforge/transformer.hpp"

#include <cmath>
#include <map>
#include <random>
#include <stdexcept>

#include "saeforge/optim.hpp"

namespace saeforge {

void TransformerConfig::validate() const {
    if (n_layers == 0 || d_model == 0 || n_heads == 0 || d_mlp == 0 || vocab_size == 0 || context_len == 0) {
        throw std::invalid_argument("TransformerConfig: all counts must be >= 1");
    }
    if (d_model % n_heads != 0) {
        throw std::invalid_argument("TransformerConfig: d_model (" + std::to_string(d_model) +
                                    ") must be divisible by n_heads (" + std::to_string(n_heads) + ")");
    }
    if (!(ln_epsilon > 0.0)) {
        throw std::invalid_argument("TransformerConfig: ln_epsilon must be positive");
    }
}

namespace {

template <typename P, typename Out>
void list_params(P& p, Out& out) {
    out.emplace_back("token_embed", &p.token_embed);
    out.emplace_back("pos_embed", &p.pos_embed);
    for (std::size_t l = 0; l < p.blocks.size(); ++l) {
        auto& b = p.blocks[l];
        const std::string pre = "blocks." + std::to_string(l) + ".";
        out.emplace_back(pre + "ln1.gain", &b.ln1_gain);
        out.emplace_back(pre + "ln1.bias", &b.ln1_bias);
        out.emplace_back(pre + "attn.w_q", &b.w_q);
        out.emplace_back(pre + "attn.b_q", &b.b_q);
        out.emplace_back(pre + "attn.w_k", &b.w_k);
        out.emplace_back(pre + "attn.b_k", &b.b_k);
        out.emplace_back(pre + "attn.w_v", &b.w_v);
        out.emplace_back(pre + "attn.b_v", &b.b_v);
        out.emplace_back(pre + "attn.w_o", &b.w_o);
        out.emplace_back(pre + "attn.b_o", &b.b_o);
        out.emplace_back(pre + "ln2.gain", &b.ln2_gain);
        out.emplace_back(pre + "ln2.bias", &b.ln2_bias);
        out.emplace_back(pre + "mlp.w_in", &b.w_in);
        out.emplace_back(pre + "mlp.b_in", &b.b_in);
        out.emplace_back(pre + "mlp.w_out", &b.w_out);
        out.emplace_back(pre + "mlp.b_out", &b.b_out);
    }
    out.emplace_back("final_ln.gain", &p.final_ln_gain);
    out.emplace_back("final_ln.bias", &p.final_ln_bias);
    out.emplace_back("unembed", &p.unembed);
}

// Zero-filled params with every tensor at its configured shape.
template <typename T>
TransformerParams<T> shaped_params(const TransformerConfig& c) {
    c.validate();
    TransformerParams<T> p;
    p.config = c;
    const std::size_t d = c.d_model;
    p.token_embed = Tensor<T>({c.vocab_size, d});
    p.pos_embed = Tensor<T>({c.context_len, d});
    p.blocks.resize(c.n_layers);
    for (auto& b : p.blocks) {
        b.ln1_gain = Tensor<T>::full({d}, T{1});
        b.ln1_bias = Tensor<T>({d});
        b.w_q = Tensor<T>({d, d});
        b.b_q = Tensor<T>({d});
        b.w_k = Tensor<T>({d, d});
        b.b_k = Tensor<T>({d});
        b.w_v = Tensor<T>({d, d});
        b.b_v = Tensor<T>({d});
        b.w_o = Tensor<T>({d, d});
        b.b_o = Tensor<T>({d});
        b.ln2_gain = Tensor<T>::full({d}, T{1});
        b.ln2_bias = Tensor<T>({d});
        b.w_in = Tensor<T>({d, c.d_mlp});
        b.b_in = Tensor<T>({c.d_mlp});
        b.w_out = Tensor<T>({c.d_mlp, d});
        b.b_out = Tensor<T>({d});
    }
    p.final_ln_gain = Tensor<T>::full({d}, T{1});
    p.final_ln_bias = Tensor<T>({d});
    p.unembed = Tensor<T>({d, c.vocab_size});
    return p;
}

template <typename T>
BoundBlock<T> bind_block(Tape<T>& tape, const BlockParams<T>& b, bool trainable) {
    auto bind = [&](const Tensor<T>& t) { return trainable ? tape.parameter(t) : tape.constant(t); };
    BoundBlock<T> out;
    out.ln1_gain = bind(b.ln1_gain);
    out.ln1_bias = bind(b.ln1_bias);
    out.w_q = bind(b.w_q);
    out.b_q = bind(b.b_q);
    out.w_k = bind(b.w_k);
    out.b_k = bind(b.b_k);
    out.w_v = bind(b.w_v);
    out.b_v = bind(b.b_v);
    out.w_o = bind(b.w_o);
    out.b_o = bind(b.b_o);
    out.ln2_gain = bind(b.ln2_gain);
    out.ln2_bias = bind(b.ln2_bias);
    out.w_in = bind(b.w_in);
    out.b_in = bind(b.b_in);
    out.w_out = bind(b.w_out);
    out.b_out = bind(b.b_out);
    return out;
}

template <typename T>
Var<T> block_forward(const TransformerConfig& c, const BoundBlock<T>& b, const Var<T>& x) {
    using namespace ops;
    const auto& s = x.shape();
    const std::size_t batch = s[0];
    const std::size_t pos = s[1];
    const std::size_t h = c.n_heads;
    const std::size_t hd = c.d_head();

    auto heads = [&](const Var<T>& t) { return permute(reshape(t, Shape{batch, pos, h, hd}), {0, 2, 1, 3}); };

    auto ln1 = layer_norm(x, b.ln1_gain, b.ln1_bias, c.ln_epsilon);
    auto q = heads(add(matmul(ln1, b.w_q), b.b_q));
    auto k = heads(add(matmul(ln1, b.w_k), b.b_k));
    auto v = heads(add(matmul(ln1, b.w_v), b.b_v));
    auto scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(hd)));
    auto pattern = softmax(causal_mask(scores));
    auto ctx = reshape(permute(matmul(pattern, v), {0, 2, 1, 3}), Shape{batch, pos, c.d_model});
    auto attn_out = add(matmul(ctx, b.w_o), b.b_o);
    auto mid = add(x, attn_out);

    auto ln2 = layer_norm(mid, b.ln2_gain, b.ln2_bias, c.ln_epsilon);
    auto hidden = gelu(add(matmul(ln2, b.w_in), b.b_in));
    auto mlp_out = add(matmul(hidden, b.w_out), b.b_out);
    return add(mid, mlp_out);
}

template <typename T>
Var<T> unembed_forward(const BoundTransformer<T>& m, const Var<T>& x) {
    auto ln = ops::layer_norm(x, m.final_ln_gain, m.final_ln_bias, m.config.ln_epsilon);
    return ops::matmul(ln, m.unembed);
}

void check_tokens(const TransformerConfig& c, const TokenDataset& tokens) {
    if (tokens.seq_len == 0 || tokens.n_sequences == 0) {
        throw std::invalid_argument("transformer: empty token batch");
    }
    if (tokens.seq_len > c.context_len) {
        throw std::invalid_argument("transformer: sequence length " + std::to_string(tokens.seq_len) +
                                    " exceeds context_len " + std::to_string(c.context_len));
    }
    if (tokens.tokens.size() != tokens.n_sequences * tokens.seq_len) {
        throw std::invalid_argument("transformer: token buffer does not match its shape");
    }
    for (auto t : tokens.tokens) {
        if (t < 0 || static_cast<std::size_t>(t) >= c.vocab_size) {
            throw std::out_of_range("transformer: token id " + std::to_string(t) + " outside vocab of size " +
                                    std::to_string(c.vocab_size));
        }
    }
}

template <typename T>
Var<T> embed(const BoundTransformer<T>& m, const TokenDataset& tokens) {
    const Shape idx{tokens.n_sequences, tokens.seq_len};
    auto tok = ops::embedding(m.token_embed, tokens.tokens, idx);
    auto pos = ops::slice(m.pos_embed, 0, 0, tokens.seq_len);
    return ops::add(tok, pos);
}

}  // namespace

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> TransformerParams<T>::named() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    list_params(*this, out);
    return out;
}

template <typename T>
std::vector<std::pair<std::string, const Tensor<T>*>> TransformerParams<T>::named() const {
    std::vector<std::pair<std::string, const Tensor<T>*>> out;
    list_params(*this, out);
    return out;
}

template <typename T>
template <typename U>
TransformerParams<U> TransformerParams<T>::cast() const {
    auto out = shaped_params<U>(config);
    auto dst = out.named();
    auto src = named();
    for (std::size_t i = 0; i < src.size(); ++i) {
        *dst[i].second = src[i].second->template cast<U>();
    }
    return out;
}

template <typename T>
TransformerParams<T> transformer_from_named(const TransformerConfig& config,
                                            const std::vector<std::pair<std::string, Tensor<T>>>& tensors) {
    auto p = shaped_params<T>(config);
    std::map<std::string, const Tensor<T>*> by_name;
    for (const auto& [name, t] : tensors) {
        by_name[name] = &t;
    }
    for (auto& [name, dst] : p.named()) {
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw std::invalid_argument("transformer: missing tensor '" + name + "'");
        }
        if (it->second->shape() != dst->shape()) {
            throw std::invalid_argument("transformer: tensor '" + name + "' has shape " +
                                        shape_str(it->second->shape()) + ", expected " + shape_str(dst->shape()));
        }
        *dst = *it->second;
    }
    return p;
}

TransformerParams<float> init_transformer(const TransformerConfig& config, std::uint64_t seed) {
    auto p = shaped_params<float>(config);
    std::mt19937_64 rng(mix_seed(seed, 0x7f));
    const double base_std = 0.02;
    const double resid_std = base_std / std::sqrt(2.0 * static_cast<double>(config.n_layers));
    auto fill = [&](Tensor<float>& t, double stddev) {
        std::normal_distribution<double> dist(0.0, stddev);
        for (auto& v : t.data()) {
            v = static_cast<float>(dist(rng));
        }
    };
    fill(p.token_embed, base_std);
    fill(p.pos_embed, base_std);
    for (auto& b : p.blocks) {
        fill(b.w_q, base_std);
        fill(b.w_k, base_std);
        fill(b.w_v, base_std);
        fill(b.w_o, resid_std);
        fill(b.w_in, base_std);
        fill(b.w_out, resid_std);
    }
    fill(p.unembed, base_std);
    return p;
}

template <typename T>
std::vector<Var<T>> BoundTransformer<T>::handles() const {
    std::vector<Var<T>> out{token_embed, pos_embed};
    for (const auto& b : blocks) {
        for (const auto& v : {b.ln1_gain, b.ln1_bias, b.w_q, b.b_q, b.w_k, b.b_k, b.w_v, b.b_v, b.w_o, b.b_o,
                              b.ln2_gain, b.ln2_bias, b.w_in, b.b_in, b.w_out, b.b_out}) {
            out.push_back(v);
        }
    }
    out.push_back(final_ln_gain);
    out.push_back(final_ln_bias);
    out.push_back(unembed);
    return out;
}

template <typename T>
BoundTransformer<T> bind_transformer(Tape<T>& tape, const TransformerParams<T>& params, bool trainable) {
    params.config.validate();
    auto bind = [&](const Tensor<T>& t) { return trainable ? tape.parameter(t) : tape.constant(t); };
    BoundTransformer<T> m;
    m.config = params.config;
    m.token_embed = bind(params.token_embed);
    m.pos_embed = bind(params.pos_embed);
    for (const auto& b : params.blocks) {
        m.blocks.push_back(bind_block(tape, b, trainable));
    }
    m.final_ln_gain = bind(params.final_ln_gain);
    m.final_ln_bias = bind(params.final_ln_bias);
    m.unembed = bind(params.unembed);
    return m;
}

template <typename T>
TapedResiduals<T> taped_forward(Tape<T>&, const BoundTransformer<T>& model, const TokenDataset& tokens) {
    check_tokens(model.config, tokens);
    TapedResiduals<T> out;
    Var<T> x = embed(model, tokens);
    for (std::size_t l = 0; l < model.config.n_layers; ++l) {
        out.residuals.push_back(x);
        x = block_forward(model.config, model.blocks[l], x);
    }
    out.logits = unembed_forward(model, x);
    return out;
}

template <typename T>
TapedResiduals<T> taped_forward_from_layer(Tape<T>&, const BoundTransformer<T>& model, const Var<T>& stream,
                                           std::size_t start_layer) {
    const auto& c = model.config;
    if (start_layer >= c.n_layers) {
        throw std::invalid_argument("forward_from_layer: start_layer " + std::to_string(start_layer) +
                                    " must be < n_layers " + std::to_string(c.n_layers));
    }
    const auto& s = stream.shape();
    if (s.size() != 3 || s[2] != c.d_model || s[1] == 0 || s[1] > c.context_len) {
        throw ShapeError("forward_from_layer: stream shape " + shape_str(s) + " is not (batch, positions<=" +
                         std::to_string(c.context_len) + ", " + std::to_string(c.d_model) + ")");
    }
    TapedResiduals<T> out;
    out.start_layer = start_layer;
    Var<T> x = stream;
    for (std::size_t l = start_layer; l < c.n_layers; ++l) {
        out.residuals.push_back(x);
        x = block_forward(c, model.blocks[l], x);
    }
    out.logits = unembed_forward(model, x);
    return out;
}

template <typename T>
ResidualCache<T> forward_with_cache(const TransformerParams<T>& params, const TokenDataset& tokens) {
    Tape<T> tape;
    auto model = bind_transformer(tape, params, false);
    auto run = taped_forward(tape, model, tokens);
    ResidualCache<T> cache;
    for (const auto& r : run.residuals) {
        cache.residuals.push_back(r.value());
    }
    cache.logits = run.logits.value();
    return cache;
}

template <typename T>
ResidualCache<T> forward_from_layer(const TransformerParams<T>& params, const Tensor<T>& stream,
                                    std::size_t start_layer) {
    Tape<T> tape;
    auto model = bind_transformer(tape, params, false);
    auto run = taped_forward_from_layer(tape, model, tape.constant(stream), start_layer);
    ResidualCache<T> cache;
    cache.start_layer = start_layer;
    for (const auto& r : run.residuals) {
        cache.residuals.push_back(r.value());
    }
    cache.logits = run.logits.value();
    return cache;
}

template <typename T>
Tensor<T> residual_at(const TransformerParams<T>& params, const TokenDataset& tokens, std::size_t layer) {
    if (layer >= params.config.n_layers) {
        throw std::invalid_argument("residual_at: layer " + std::to_string(layer) + " out of range");
    }
    check_tokens(params.config, tokens);
    Tape<T> tape;
    auto model = bind_transformer(tape, params, false);
    Var<T> x = embed(model, tokens);
    for (std::size_t l = 0; l < layer; ++l) {
        x = block_forward(params.config, model.blocks[l], x);
    }
    return x.value();
}

template <typename T>
double next_token_cross_entropy(const Tensor<T>& logits, const TokenDataset& tokens) {
    const auto& s = logits.shape();
    if (s.size() != 3 || s[0] != tokens.n_sequences || s[1] != tokens.seq_len) {
        throw ShapeError("next_token_cross_entropy: logits " + shape_str(s) + " do not match tokens");
    }
    if (tokens.seq_len < 2) {
        throw std::invalid_argument("next_token_cross_entropy: sequences need at least 2 tokens");
    }
    const std::size_t v = s[2];
    double total = 0.0;
    std::size_t count = 0;
    auto data = logits.data();
    for (std::size_t b = 0; b < s[0]; ++b) {
        for (std::size_t p = 0; p + 1 < s[1]; ++p) {
            const T* row = data.data() + (b * s[1] + p) * v;
            double mx = row[0];
            for (std::size_t j = 1; j < v; ++j) {
                mx = std::max<double>(mx, row[j]);
            }
            double z = 0.0;
            for (std::size_t j = 0; j < v; ++j) {
                z += std::exp(static_cast<double>(row[j]) - mx);
            }
            const auto target = static_cast<std::size_t>(tokens.tokens[b * s[1] + p + 1]);
            total += mx + std::log(z) - static_cast<double>(row[target]);
            ++count;
        }
    }
    return total / static_cast<double>(count);
}

template <typename T>
double evaluate_cross_entropy(const TransformerParams<T>& params, const TokenDataset& data, std::size_t batch_size) {
    if (data.n_sequences == 0) {
        throw std::invalid_argument("evaluate_cross_entropy: empty dataset");
    }
    double weighted = 0.0;
    for (std::size_t b = 0; b < data.n_sequences; b += batch_size) {
        const std::size_t n = std::min(batch_size, data.n_sequences - b);
        auto batch = data.rows(b, n);
        auto cache = forward_with_cache(params, batch);
        weighted += next_token_cross_entropy(cache.logits, batch) * static_cast<double>(n);
    }
    return weighted / static_cast<double>(data.n_sequences);
}

BaseTrainResult train_base_model(const TransformerConfig& config, const TokenDataset& corpus,
                                 const BaseTrainOptions& options,
                                 const std::function<void(std::size_t, double)>& progress) {
    config.validate();
    if (corpus.n_sequences == 0 || corpus.seq_len < 2) {
        throw std::invalid_argument("train_base_model: corpus needs rows of at least 2 tokens");
    }
    if (options.batch_size == 0 || !(options.lr > 0.0)) {
        throw std::invalid_argument("train_base_model: batch_size and lr must be positive");
    }
    BaseTrainResult result;
    result.params = init_transformer(config, options.seed);
    Adam<float> adam;
    std::mt19937_64 rng(mix_seed(options.seed, 0xba5e));
    std::uniform_int_distribution<std::size_t> pick(0, corpus.n_sequences - 1);
    const std::size_t seq_len = corpus.seq_len;
    const std::size_t v = config.vocab_size;

    for (std::size_t step = 0; step < options.steps; ++step) {
        std::vector<std::size_t> idx(options.batch_size);
        for (auto& i : idx) {
            i = pick(rng);
        }
        const TokenDataset batch = corpus.gather(idx);

        Tensor<float> onehot({batch.n_sequences, seq_len - 1, v});
        for (std::size_t b = 0; b < batch.n_sequences; ++b) {
            for (std::size_t p = 0; p + 1 < seq_len; ++p) {
                const auto target = static_cast<std::size_t>(batch.tokens[b * seq_len + p + 1]);
                onehot[(b * (seq_len - 1) + p) * v + target] = 1.0f;
            }
        }

        Tape<float> tape;
        auto model = bind_transformer(tape, result.params, true);
        auto run = taped_forward(tape, model, batch);
        auto logp = ops::log_softmax(ops::slice(run.logits, 1, 0, seq_len - 1));
        auto nll = ops::scale(ops::sum(ops::mul(logp, tape.constant(std::move(onehot)))),
                              -1.0 / static_cast<double>(batch.n_sequences * (seq_len - 1)));
        const double loss = nll.value().item();
        if (!std::isfinite(loss)) {
            throw TrainingDiverged("train_base_model: loss became non-finite at step " + std::to_string(step));
        }
        result.loss_history.push_back(loss);

        auto grads = tape.backward(nll);
        std::vector<Tensor<float>> flat;
        for (const auto& h : model.handles()) {
            flat.push_back(std::move(grads.at(h.id())));
        }
        clip_gradients(flat, options.grad_clip);

        double lr = options.lr;
        if (step < options.warmup_steps) {
            lr *= static_cast<double>(step + 1) / static_cast<double>(options.warmup_steps);
        } else if (options.steps > options.warmup_steps) {
            const double t = static_cast<double>(step - options.warmup_steps) /
                             static_cast<double>(options.steps - options.warmup_steps);
            lr *= 0.1 + 0.9 * 0.5 * (1.0 + std::cos(M_PI * t));
        }
        std::vector<Tensor<float>*> ptrs;
        for (auto& [name, t] : result.params.named()) {
            ptrs.push_back(t);
        }
        adam.step(ptrs, flat, lr);

        if (progress && options.log_every > 0 && (step % options.log_every == 0 || step + 1 == options.steps)) {
            progress(step, loss);
        }
    }
    return result;
}

#define SAEFORGE_INSTANTIATE(T)                                                                                     \
    template struct TransformerParams<T>;                                                                           \
    template struct BoundTransformer<T>;                                                                            \
    template TransformerParams<T> transformer_from_named(const TransformerConfig&,                                  \
                                                         const std::vector<std::pair<std::string, Tensor<T>>>&);    \
    template BoundTransformer<T> bind_transformer(Tape<T>&, const TransformerParams<T>&, bool);                     \
    template TapedResiduals<T> taped_forward(Tape<T>&, const BoundTransformer<T>&, const TokenDataset&);            \
    template TapedResiduals<T> taped_forward_from_layer(Tape<T>&, const BoundTransformer<T>&, const Var<T>&,        \
                                                        std::size_t);                                               \
    template ResidualCache<T> forward_with_cache(const TransformerParams<T>&, const TokenDataset&);                 \
    template ResidualCache<T> forward_from_layer(const TransformerParams<T>&, const Tensor<T>&, std::size_t);       \
    template Tensor<T> residual_at(const TransformerParams<T>&, const TokenDataset&, std::size_t);                  \
    template double next_token_cross_entropy(const Tensor<T>&, const TokenDataset&);                                \
    template double evaluate_cross_entropy(const TransformerParams<T>&, const TokenDataset&, std::size_t);

SAEFORGE_INSTANTIATE(float)
SAEFORGE_INSTANTIATE(double)
#undef SAEFORGE_INSTANTIATE

template TransformerParams<double> TransformerParams<float>::cast<double>() const;
template TransformerParams<float> TransformerParams<double>::cast<float>() const;
template TransformerParams<float> TransformerParams<float>::cast<float>() const;
template TransformerParams<double> TransformerParams<double>::cast<double>() const;

}  // namespace saeforge
