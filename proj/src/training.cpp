#include "pesqdnn/training.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

namespace pesqdnn {

// ---------------------------------------------------------------------------
// schedule
// ---------------------------------------------------------------------------

ScheduleEvent ScheduleState::update(double dev_loss, const ScheduleConfig& cfg) {
    ++epoch;
    ScheduleEvent ev;
    if (dev_loss < best) {
        best = dev_loss;
        best_epoch = epoch;
        epochs_since_improvement = 0;
        epochs_since_decay_reset = 0;
        ev.improved = true;
        return ev;
    }
    ++epochs_since_improvement;
    ++epochs_since_decay_reset;
    if (epochs_since_improvement >= cfg.stop_patience) {
        ev.stop = true;
        return ev;
    }
    if (epochs_since_decay_reset >= cfg.decay_patience) {
        current_lr *= cfg.decay_factor;
        ++decay_count;
        epochs_since_decay_reset = 0;
        ev.decayed = true;
    }
    return ev;
}

TrainState TrainState::init(const ModelConfig& cfg, const ScheduleConfig& sched,
                            const AdamConfig& adam) {
    TrainState st;
    st.config = cfg;
    st.weights = init_weights(cfg);
    st.weights.set_requires_grad(true);
    st.adam = adam;
    st.schedule.current_lr = sched.initial_lr;
    st.adam_m.resize(st.weights.params.size());
    st.adam_v.resize(st.weights.params.size());
    for (std::size_t i = 0; i < st.weights.params.size(); ++i) {
        st.adam_m[i].assign(st.weights.params[i].second->size(), 0.0);
        st.adam_v[i].assign(st.weights.params[i].second->size(), 0.0);
    }
    return st;
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

void adam_step(TrainState& state, double lr) {
    ++state.step;
    const double b1 = state.adam.beta1, b2 = state.adam.beta2, eps = state.adam.epsilon;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    for (std::size_t p = 0; p < state.weights.params.size(); ++p) {
        auto& [name, t] = state.weights.params[p];
        auto& m = state.adam_m[p];
        auto& v = state.adam_v[p];
        for (std::size_t i = 0; i < t->size(); ++i) {
            const double g = t->grad.empty() ? 0.0 : t->grad[i];
            if (!std::isfinite(g))
                throw ValidationError("non-finite gradient in parameter '" + name + "'");
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            t->value[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
        t->zero_grad();
    }
}

// ---------------------------------------------------------------------------
// per-utterance step / evaluation
// ---------------------------------------------------------------------------

namespace {

void check_example(const FeatureBlockSequence& blocks, double pesq_u) {
    if (!blocks.normalization_applied)
        throw ContractError("training requires normalized feature blocks");
    if (pesq_u < kPesqMin || pesq_u > kPesqMax)
        throw ValidationError("PESQ target " + std::to_string(pesq_u) + " out of range");
}

} // namespace

double train_utterance(TrainState& state, const FeatureBlockSequence& blocks, double pesq_u,
                       const LossConfig& loss_cfg, double lr) {
    check_example(blocks, pesq_u);
    Graph g(Precision::f64);
    ForwardResult fr = forward(g, blocks.data.data(), blocks.block_count, state.weights,
                               state.config);
    Tensor loss = loss_tensor(g, fr.pesq_hat, fr.q, pesq_u, loss_cfg);
    g.backward(loss);
    adam_step(state, lr);
    return loss->value[0];
}

double eval_loss(const ModelWeights& w, const ModelConfig& cfg,
                 const FeatureBlockSequence& blocks, double pesq_u,
                 const LossConfig& loss_cfg) {
    check_example(blocks, pesq_u);
    Graph g(Precision::f64, /*record=*/false);
    ForwardResult fr = forward(g, blocks.data.data(), blocks.block_count, w, cfg);
    Tensor loss = loss_tensor(g, fr.pesq_hat, fr.q, pesq_u, loss_cfg);
    return loss->value[0];
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

TrainingResult run_training(const ModelConfig& cfg,
                            const std::vector<TrainingExample>& train,
                            const std::vector<TrainingExample>& dev,
                            const RunTrainingOptions& opts) {
    if (train.empty()) throw DataError("run_training: empty training set");
    if (dev.empty()) throw DataError("run_training: empty development set");

    TrainState state = TrainState::init(cfg, opts.schedule, opts.adam);
    std::mt19937_64 shuffle_rng(opts.shuffle_seed);

    TrainingResult result;
    result.best_dev_loss = std::numeric_limits<double>::infinity();

    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (std::size_t epoch = 1; epoch <= opts.schedule.max_epochs; ++epoch) {
        // seeded Fisher-Yates; std::shuffle is implementation-defined
        for (std::size_t i = order.size(); i > 1; --i) {
            const std::size_t j = shuffle_rng() % i;
            std::swap(order[i - 1], order[j]);
        }
        double train_loss = 0.0;
        for (std::size_t idx : order)
            train_loss += train_utterance(state, *train[idx].blocks, train[idx].pesq_u,
                                          opts.loss, state.schedule.current_lr);
        train_loss /= static_cast<double>(train.size());

        double dev_loss = 0.0;
        for (const auto& ex : dev)
            dev_loss += eval_loss(state.weights, cfg, *ex.blocks, ex.pesq_u, opts.loss);
        dev_loss /= static_cast<double>(dev.size());

        const ScheduleEvent ev = state.schedule.update(dev_loss, opts.schedule);
        if (ev.improved) {
            result.best_weights = state.weights.clone();
            result.best_dev_loss = dev_loss;
            result.best_epoch = epoch;
        }

        EpochLog log;
        log.epoch = epoch;
        log.train_loss = train_loss;
        log.dev_loss = dev_loss;
        log.lr = state.schedule.current_lr;
        log.decayed = ev.decayed;
        log.stopped = ev.stop;
        log.improved = ev.improved;
        result.log.push_back(log);
        if (opts.on_epoch) opts.on_epoch(log);

        if (ev.stop) break;
        if (opts.train_loss_floor && train_loss < *opts.train_loss_floor) break;
    }
    if (result.best_weights.params.empty()) {
        // no improving epoch recorded (cannot happen with finite losses)
        result.best_weights = state.weights.clone();
    }
    return result;
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kCkptMagic[4] = {'P', 'D', 'N', 'C'};
constexpr std::uint32_t kCkptVersion = 1;

void put_bytes(std::string& buf, const void* p, std::size_t n) {
    buf.append(static_cast<const char*>(p), n);
}
void put_u32(std::string& buf, std::uint32_t v) { put_bytes(buf, &v, 4); }
void put_str(std::string& buf, const std::string& s) {
    put_u32(buf, static_cast<std::uint32_t>(s.size()));
    buf.append(s);
}

struct Reader {
    const std::string& buf;
    std::size_t pos = 0;
    explicit Reader(const std::string& b) : buf(b) {}
    void need(std::size_t n) const {
        if (pos + n > buf.size()) throw IntegrityError("truncated checkpoint");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v;
        std::memcpy(&v, buf.data() + pos, 4);
        pos += 4;
        return v;
    }
    std::string str() {
        const std::uint32_t n = u32();
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

std::uint64_t fnv1a64(const std::string& buf) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : buf) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

} // namespace

void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                     const ModelWeights& weights, const std::string& norm_stats_json) {
    std::string buf;
    put_bytes(buf, kCkptMagic, 4);
    put_u32(buf, kCkptVersion);
    put_str(buf, cfg.to_json());
    put_str(buf, norm_stats_json);
    put_u32(buf, static_cast<std::uint32_t>(weights.params.size()));
    for (const auto& [name, t] : weights.params) {
        put_str(buf, name);
        put_u32(buf, static_cast<std::uint32_t>(t->shape.size()));
        for (std::size_t d : t->shape) put_u32(buf, static_cast<std::uint32_t>(d));
        for (double v : t->value) {
            const float f = static_cast<float>(v);
            put_bytes(buf, &f, 4);
        }
    }
    const std::uint64_t hash = fnv1a64(buf);
    put_bytes(buf, &hash, 8);

    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw DataError("cannot write checkpoint: " + path);
        f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (!f) throw DataError("short write to checkpoint: " + path);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw DataError("cannot finalize checkpoint " + path + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot read checkpoint: " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (buf.size() < 12 || std::memcmp(buf.data(), kCkptMagic, 4) != 0)
        throw IntegrityError("not a checkpoint file: " + path);
    std::uint64_t stored_hash;
    std::memcpy(&stored_hash, buf.data() + buf.size() - 8, 8);
    std::string payload = buf.substr(0, buf.size() - 8);
    if (fnv1a64(payload) != stored_hash)
        throw IntegrityError("checkpoint hash mismatch (corrupt file): " + path);

    Reader rd(payload);
    rd.pos = 4;
    const std::uint32_t version = rd.u32();
    if (version != kCkptVersion)
        throw IntegrityError("unsupported checkpoint version " + std::to_string(version) +
                             " (expected " + std::to_string(kCkptVersion) + "): " + path);
    Checkpoint ck;
    ck.config = ModelConfig::from_json(rd.str());
    ck.norm_stats_json = rd.str();
    const std::uint32_t nparams = rd.u32();
    for (std::uint32_t p = 0; p < nparams; ++p) {
        const std::string name = rd.str();
        const std::uint32_t ndims = rd.u32();
        std::vector<std::size_t> shape(ndims);
        for (auto& d : shape) d = rd.u32();
        const std::size_t n = shape_product(shape);
        rd.need(n * 4);
        std::vector<double> vals(n);
        for (std::size_t i = 0; i < n; ++i) {
            float v;
            std::memcpy(&v, rd.buf.data() + rd.pos + i * 4, 4);
            vals[i] = static_cast<double>(v);
        }
        rd.pos += n * 4;
        ck.weights.params.emplace_back(name, make_tensor(std::move(shape), std::move(vals), true));
    }
    return ck;
}

} // namespace pesqdnn
