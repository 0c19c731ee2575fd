#include "pesqdnn/model.hpp"

#include <cmath>
#include <random>

#include "json.hpp"

namespace pesqdnn {

using nlohmann::json;

std::string to_string(Embedding e) {
    switch (e) {
    case Embedding::STAT: return "stat";
    case Embedding::FLE: return "fle";
    case Embedding::BLE: return "ble";
    }
    return "?";
}
std::string to_string(Pooling p) { return p == Pooling::AV ? "av" : "at"; }

Embedding embedding_from_string(const std::string& s) {
    if (s == "stat") return Embedding::STAT;
    if (s == "fle") return Embedding::FLE;
    if (s == "ble") return Embedding::BLE;
    throw ValidationError("unknown embedding mode '" + s + "' (expected stat|fle|ble)");
}
Pooling pooling_from_string(const std::string& s) {
    if (s == "av") return Pooling::AV;
    if (s == "at") return Pooling::AT;
    throw ValidationError("unknown pooling '" + s + "' (expected av|at)");
}

double gate_value(double x) { return kGateScale / (1.0 + std::exp(-x)) + kPesqMin; }

std::size_t ModelConfig::pooled_bins() const {
    std::size_t h = input_bins;
    for (const auto& l : encoder)
        if (l.pool != PoolKind::None) h /= 2;
    return h;
}

std::size_t ModelConfig::pooled_frames() const {
    std::size_t t = block_frames;
    for (const auto& l : encoder)
        if (l.pool == PoolKind::P2x2) t /= 2;
    return t;
}

void ModelConfig::validate() const {
    if (input_channels != 1 && input_channels != 2)
        throw ValidationError("input_channels must be 1 or 2");
    if (encoder.empty()) throw ValidationError("encoder must have at least one conv layer");
    std::size_t h = input_bins, t = block_frames;
    for (const auto& l : encoder) {
        if (l.kh % 2 == 0 || l.kw % 2 == 0)
            throw ValidationError("encoder kernels must be odd for symmetric same-padding");
        if (l.maps == 0) throw ValidationError("encoder layer with zero feature maps");
        if (l.pool == PoolKind::P2x1) {
            if (h % 2 != 0) throw ValidationError("2x1 pool on odd frequency extent");
            h /= 2;
        } else if (l.pool == PoolKind::P2x2) {
            if (h % 2 != 0 || t % 2 != 0)
                throw ValidationError("2x2 pool on odd frequency/time extent");
            h /= 2;
            t /= 2;
        }
    }
    if (multiwidth_widths.empty()) throw ValidationError("multiwidth_widths empty");
    for (std::size_t i = 0; i < multiwidth_widths.size(); ++i) {
        if (multiwidth_widths[i] != (std::size_t{1} << i))
            throw ValidationError("multiwidth widths must satisfy w_i = 2^(i-1)");
        if (multiwidth_widths[i] > t)
            throw ValidationError("multiwidth kernel width " +
                                  std::to_string(multiwidth_widths[i]) +
                                  " exceeds pooled time extent " + std::to_string(t));
    }
    if (multiwidth_maps == 0 || blstm_hidden == 0)
        throw ValidationError("zero-sized multiwidth/blstm layer");
    if (embedding != Embedding::STAT && head_hidden.empty())
        throw ValidationError("FLE/BLE head needs at least one hidden FC layer");
    if (embedding == Embedding::STAT && stat_head_hidden.empty())
        throw ValidationError("STAT head needs at least one FC layer");
}

ModelConfig toy_config(std::size_t input_bins, std::size_t block_frames,
                       std::size_t input_channels) {
    ModelConfig cfg;
    cfg.input_bins = input_bins;
    cfg.block_frames = block_frames;
    cfg.input_channels = input_channels;
    cfg.encoder = {
        {3, 3, 2, PoolKind::P2x1},
        {3, 3, 2, PoolKind::P2x2},
        {3, 3, 4, PoolKind::None},
    };
    cfg.multiwidth_widths = {1, 2, 4};
    cfg.multiwidth_maps = 4;
    cfg.blstm_hidden = 4;
    cfg.head_hidden = {8};
    cfg.stat_head_hidden = {8, 8};
    cfg.attention_hidden = 4;
    return cfg;
}

ModelConfig halved_config(std::size_t input_channels) {
    ModelConfig cfg;
    cfg.input_channels = input_channels;
    cfg.encoder = {
        {3, 3, 16, PoolKind::P2x1},
        {3, 3, 16, PoolKind::P2x2},
        {3, 3, 32, PoolKind::None},
    };
    cfg.multiwidth_maps = 32;
    cfg.blstm_hidden = 64;
    cfg.head_hidden = {64};
    cfg.stat_head_hidden = {64, 32};
    cfg.attention_hidden = 32;
    return cfg;
}

// ---------------------------------------------------------------------------
// config JSON
// ---------------------------------------------------------------------------

namespace {
PoolKind pool_from_string(const std::string& s) {
    if (s == "none") return PoolKind::None;
    if (s == "2x1") return PoolKind::P2x1;
    if (s == "2x2") return PoolKind::P2x2;
    throw ValidationError("unknown pool kind '" + s + "'");
}
std::string pool_to_string(PoolKind p) {
    switch (p) {
    case PoolKind::None: return "none";
    case PoolKind::P2x1: return "2x1";
    case PoolKind::P2x2: return "2x2";
    }
    return "?";
}
} // namespace

std::string ModelConfig::to_json() const {
    json j;
    j["input_bins"] = input_bins;
    j["block_frames"] = block_frames;
    j["input_channels"] = input_channels;
    json enc = json::array();
    for (const auto& l : encoder)
        enc.push_back({{"kh", l.kh}, {"kw", l.kw}, {"maps", l.maps},
                       {"pool", pool_to_string(l.pool)}});
    j["encoder"] = enc;
    j["multiwidth_widths"] = multiwidth_widths;
    j["multiwidth_maps"] = multiwidth_maps;
    j["blstm_hidden"] = blstm_hidden;
    j["embedding"] = to_string(embedding);
    j["pooling"] = to_string(pooling);
    j["head_hidden"] = head_hidden;
    j["stat_head_hidden"] = stat_head_hidden;
    j["attention_hidden"] = attention_hidden;
    j["leaky_slope"] = leaky_slope;
    j["rng_seed"] = rng_seed;
    return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    json j = json::parse(text);
    static const char* known[] = {
        "input_bins", "block_frames", "input_channels", "encoder", "multiwidth_widths",
        "multiwidth_maps", "blstm_hidden", "embedding", "pooling", "head_hidden",
        "stat_head_hidden", "attention_hidden", "leaky_slope", "rng_seed"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : known) ok = ok || it.key() == k;
        if (!ok) throw ValidationError("unknown model config key '" + it.key() + "'");
    }
    ModelConfig cfg;
    if (j.contains("input_bins")) cfg.input_bins = j["input_bins"].get<std::size_t>();
    if (j.contains("block_frames")) cfg.block_frames = j["block_frames"].get<std::size_t>();
    if (j.contains("input_channels"))
        cfg.input_channels = j["input_channels"].get<std::size_t>();
    if (j.contains("encoder")) {
        cfg.encoder.clear();
        for (const auto& l : j["encoder"])
            cfg.encoder.push_back({l.at("kh").get<std::size_t>(), l.at("kw").get<std::size_t>(),
                                   l.at("maps").get<std::size_t>(),
                                   pool_from_string(l.at("pool").get<std::string>())});
    }
    if (j.contains("multiwidth_widths"))
        cfg.multiwidth_widths = j["multiwidth_widths"].get<std::vector<std::size_t>>();
    if (j.contains("multiwidth_maps"))
        cfg.multiwidth_maps = j["multiwidth_maps"].get<std::size_t>();
    if (j.contains("blstm_hidden")) cfg.blstm_hidden = j["blstm_hidden"].get<std::size_t>();
    if (j.contains("embedding"))
        cfg.embedding = embedding_from_string(j["embedding"].get<std::string>());
    if (j.contains("pooling")) cfg.pooling = pooling_from_string(j["pooling"].get<std::string>());
    if (j.contains("head_hidden"))
        cfg.head_hidden = j["head_hidden"].get<std::vector<std::size_t>>();
    if (j.contains("stat_head_hidden"))
        cfg.stat_head_hidden = j["stat_head_hidden"].get<std::vector<std::size_t>>();
    if (j.contains("attention_hidden"))
        cfg.attention_hidden = j["attention_hidden"].get<std::size_t>();
    if (j.contains("leaky_slope")) cfg.leaky_slope = j["leaky_slope"].get<double>();
    if (j.contains("rng_seed")) cfg.rng_seed = j["rng_seed"].get<std::uint64_t>();
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------------------
// weights
// ---------------------------------------------------------------------------

Tensor ModelWeights::find(const std::string& name) const {
    for (const auto& [n, t] : params)
        if (n == name) return t;
    throw ContractError("unknown parameter '" + name + "'");
}

void ModelWeights::set_requires_grad(bool rg) {
    for (auto& [n, t] : params) {
        t->requires_grad = rg;
        t->flows_grad = rg;
    }
}

void ModelWeights::zero_grads() {
    for (auto& [n, t] : params) t->zero_grad();
}

std::size_t ModelWeights::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params) n += t->size();
    return n;
}

ModelWeights ModelWeights::clone() const {
    ModelWeights out;
    out.params.reserve(params.size());
    for (const auto& [n, t] : params) {
        auto c = std::make_shared<TensorData>(*t);
        c->grad.clear();
        out.params.emplace_back(n, c);
    }
    return out;
}

namespace {

Tensor glorot(std::mt19937_64& rng, std::vector<std::size_t> shape, std::size_t fan_in,
              std::size_t fan_out) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor t = make_tensor(std::move(shape), true);
    for (double& v : t->value) v = dist(rng);
    return t;
}

Tensor zeros(std::vector<std::size_t> shape) { return make_tensor(std::move(shape), true); }

void add_fc(ModelWeights& w, std::mt19937_64& rng, const std::string& name, std::size_t in,
            std::size_t out) {
    w.params.emplace_back(name + ".w", glorot(rng, {in, out}, in, out));
    w.params.emplace_back(name + ".b", zeros({out}));
}

void add_lstm_dir(ModelWeights& w, std::mt19937_64& rng, const std::string& name,
                  std::size_t in, std::size_t hidden) {
    w.params.emplace_back(name + ".wx", glorot(rng, {in, 4 * hidden}, in, 4 * hidden));
    w.params.emplace_back(name + ".wh", glorot(rng, {hidden, 4 * hidden}, hidden, 4 * hidden));
    Tensor b = zeros({4 * hidden});
    // forget gate bias +1, gate order [i, f, g, o]
    for (std::size_t i = hidden; i < 2 * hidden; ++i) b->value[i] = 1.0;
    w.params.emplace_back(name + ".b", b);
}

} // namespace

ModelWeights init_weights(const ModelConfig& cfg) {
    cfg.validate();
    std::mt19937_64 rng(cfg.rng_seed);
    ModelWeights w;

    std::size_t cin = cfg.input_channels;
    for (std::size_t i = 0; i < cfg.encoder.size(); ++i) {
        const auto& l = cfg.encoder[i];
        const std::string name = "enc" + std::to_string(i);
        w.params.emplace_back(name + ".kernel",
                              glorot(rng, {l.kh, l.kw, cin, l.maps}, l.kh * l.kw * cin,
                                     l.kh * l.kw * l.maps));
        w.params.emplace_back(name + ".bias", zeros({l.maps}));
        cin = l.maps;
    }

    const std::size_t hp = cfg.pooled_bins();
    for (std::size_t i = 0; i < cfg.multiwidth_widths.size(); ++i) {
        const std::size_t wd = cfg.multiwidth_widths[i];
        const std::string name = "mw" + std::to_string(i);
        w.params.emplace_back(name + ".kernel",
                              glorot(rng, {hp, wd, cin, cfg.multiwidth_maps}, hp * wd * cin,
                                     hp * wd * cfg.multiwidth_maps));
        w.params.emplace_back(name + ".bias", zeros({cfg.multiwidth_maps}));
    }

    const std::size_t enc_dim = cfg.encoder_dim();
    add_lstm_dir(w, rng, "lstm.fw", enc_dim, cfg.blstm_hidden);
    add_lstm_dir(w, rng, "lstm.bw", enc_dim, cfg.blstm_hidden);

    const std::size_t hidden_dim = 2 * cfg.blstm_hidden;
    if (cfg.embedding == Embedding::STAT) {
        std::size_t in = 4 * hidden_dim;
        for (std::size_t i = 0; i < cfg.stat_head_hidden.size(); ++i) {
            add_fc(w, rng, "stat" + std::to_string(i), in, cfg.stat_head_hidden[i]);
            in = cfg.stat_head_hidden[i];
        }
        add_fc(w, rng, "out", in, 1);
        for (double& v : w.params.back().second->value) v = kOutputBiasInit;
    } else {
        std::size_t in = hidden_dim;
        for (std::size_t i = 0; i < cfg.head_hidden.size(); ++i) {
            add_fc(w, rng, "head" + std::to_string(i), in, cfg.head_hidden[i]);
            in = cfg.head_hidden[i];
        }
        add_fc(w, rng, "head_out", in, cfg.head_out());
        for (double& v : w.params.back().second->value) v = kOutputBiasInit;
        if (cfg.pooling == Pooling::AT) {
            add_fc(w, rng, "att0", hidden_dim, cfg.attention_hidden);
            add_fc(w, rng, "att1", cfg.attention_hidden, 1);
        }
        add_fc(w, rng, "out", cfg.head_out(), 1);
    }
    return w;
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

namespace {

Tensor gate_op(Graph& g, const Tensor& x) {
    return g.add_const(g.scale(g.sigmoid(x), kGateScale), kPesqMin);
}

Tensor fc(Graph& g, const Tensor& x, const ModelWeights& w, const std::string& name) {
    return g.add_row(g.matmul(x, w.find(name + ".w")), w.find(name + ".b"));
}

} // namespace

std::vector<Tensor> lstm_pass(Graph& g, const std::vector<Tensor>& steps,
                              const ModelWeights& w, const std::string& name,
                              std::size_t hidden, bool reverse) {
    const Tensor wx = w.find(name + ".wx");
    const Tensor wh = w.find(name + ".wh");
    const Tensor b = w.find(name + ".b");
    Tensor h = make_tensor({1, hidden});
    Tensor c = make_tensor({1, hidden});
    std::vector<Tensor> out(steps.size());
    for (std::size_t s = 0; s < steps.size(); ++s) {
        const std::size_t idx = reverse ? steps.size() - 1 - s : s;
        Tensor z = g.add_row(g.add(g.matmul(steps[idx], wx), g.matmul(h, wh)), b);
        Tensor gi = g.sigmoid(g.slice_cols(z, 0, hidden));
        Tensor gf = g.sigmoid(g.slice_cols(z, hidden, hidden));
        Tensor gc = g.tanh(g.slice_cols(z, 2 * hidden, hidden));
        Tensor go = g.sigmoid(g.slice_cols(z, 3 * hidden, hidden));
        c = g.add(g.mul(gf, c), g.mul(gi, gc));
        h = g.mul(go, g.tanh(c));
        out[idx] = h;
    }
    return out;
}

ForwardResult forward(Graph& g, const double* blocks, std::size_t block_count,
                      const ModelWeights& w, const ModelConfig& cfg) {
    if (block_count == 0) throw DimensionError("forward on zero blocks");
    const std::size_t block_size = cfg.input_bins * cfg.block_frames * cfg.input_channels;
    const std::size_t hp = cfg.pooled_bins();

    std::vector<Tensor> encodings(block_count);
    for (std::size_t b = 0; b < block_count; ++b) {
        Tensor x = make_tensor({cfg.input_bins, cfg.block_frames, cfg.input_channels},
                               std::vector<double>(blocks + b * block_size,
                                                   blocks + (b + 1) * block_size));
        for (std::size_t i = 0; i < cfg.encoder.size(); ++i) {
            const auto& l = cfg.encoder[i];
            const std::string name = "enc" + std::to_string(i);
            x = g.conv2d(x, w.find(name + ".kernel"), w.find(name + ".bias"), (l.kh - 1) / 2,
                         (l.kw - 1) / 2);
            x = g.leaky_relu(x, cfg.leaky_slope);
            if (l.pool == PoolKind::P2x1) x = g.maxpool2d(x, 2, 1);
            else if (l.pool == PoolKind::P2x2) x = g.maxpool2d(x, 2, 2);
        }
        // multi-width stage: full-height kernels, valid in time, max over time
        std::vector<Tensor> branches;
        branches.reserve(cfg.multiwidth_widths.size());
        const std::size_t tp = x->shape[1];
        for (std::size_t j = 0; j < cfg.multiwidth_widths.size(); ++j) {
            const std::string name = "mw" + std::to_string(j);
            Tensor m = g.conv2d(x, w.find(name + ".kernel"), w.find(name + ".bias"), 0, 0);
            m = g.leaky_relu(m, cfg.leaky_slope);
            const std::size_t to = tp - cfg.multiwidth_widths[j] + 1;
            m = g.reshape(m, {to, cfg.multiwidth_maps});
            m = g.reduce_rows(m, Reduce::Max);
            branches.push_back(m);
        }
        encodings[b] = g.reshape(g.concat_flat(branches), {1, cfg.encoder_dim()});
        (void)hp;
    }

    auto hf = lstm_pass(g, encodings, w, "lstm.fw", cfg.blstm_hidden, false);
    auto hb = lstm_pass(g, encodings, w, "lstm.bw", cfg.blstm_hidden, true);
    std::vector<Tensor> hrows(block_count);
    for (std::size_t b = 0; b < block_count; ++b)
        hrows[b] = g.reshape(g.concat_flat({hf[b], hb[b]}), {1, 2 * cfg.blstm_hidden});
    Tensor hidden = g.stack_rows(hrows); // [B x 2H]

    ForwardResult res;
    if (cfg.embedding == Embedding::STAT) {
        Tensor stats = g.concat_flat({g.reduce_rows(hidden, Reduce::Mean),
                                      g.reduce_rows(hidden, Reduce::Std),
                                      g.reduce_rows(hidden, Reduce::Min),
                                      g.reduce_rows(hidden, Reduce::Max)});
        Tensor x = g.reshape(stats, {1, 8 * cfg.blstm_hidden});
        for (std::size_t i = 0; i < cfg.stat_head_hidden.size(); ++i)
            x = g.leaky_relu(fc(g, x, w, "stat" + std::to_string(i)), cfg.leaky_slope);
        Tensor z = g.reshape(fc(g, x, w, "out"), {1});
        res.pesq_hat = gate_op(g, z);
        return res;
    }

    // FLE/BLE per-block head, weights shared across blocks
    Tensor x = hidden;
    for (std::size_t i = 0; i < cfg.head_hidden.size(); ++i)
        x = g.leaky_relu(fc(g, x, w, "head" + std::to_string(i)), cfg.leaky_slope);
    Tensor q = gate_op(g, fc(g, x, w, "head_out")); // [B x N]
    res.q = q;

    Tensor pooled;
    if (cfg.pooling == Pooling::AV) {
        pooled = g.reduce_rows(q, Reduce::Mean);
    } else {
        Tensor a = g.leaky_relu(fc(g, hidden, w, "att0"), cfg.leaky_slope);
        a = fc(g, a, w, "att1");                       // [B x 1]
        a = g.softmax(g.reshape(a, {block_count}));    // simplex over blocks
        res.attention = a;
        pooled = g.matmul(g.reshape(a, {1, block_count}), q); // [1 x N]
    }
    Tensor z = g.reshape(fc(g, pooled, w, "out"), {1});
    res.pesq_hat = gate_op(g, z);
    return res;
}

UtterancePrediction predict(const FeatureBlockSequence& blocks, const ModelWeights& w,
                            const ModelConfig& cfg, Precision prec) {
    if (!blocks.normalization_applied)
        throw ContractError("predict requires normalized feature blocks");
    if (blocks.bins != cfg.input_bins || blocks.block_frames != cfg.block_frames ||
        blocks.channels != cfg.input_channels)
        throw DimensionError("feature blocks " + std::to_string(blocks.bins) + "x" +
                             std::to_string(blocks.block_frames) + "x" +
                             std::to_string(blocks.channels) + " do not match model config");
    Graph g(prec, /*record=*/false);
    ForwardResult r = forward(g, blocks.data.data(), blocks.block_count, w, cfg);
    UtterancePrediction p;
    p.pesq_hat = r.pesq_hat->value[0];
    if (r.q) {
        const std::size_t n = r.q->shape[1];
        p.block_scores.resize(blocks.block_count);
        for (std::size_t b = 0; b < blocks.block_count; ++b)
            p.block_scores[b].assign(r.q->value.begin() + b * n,
                                     r.q->value.begin() + (b + 1) * n);
    }
    if (r.attention) p.attention = r.attention->value;
    return p;
}

} // namespace pesqdnn
