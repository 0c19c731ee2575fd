// Acceptance gate: prints one PASS/FAIL line per release criterion and exits
// non-zero if any criterion fails. Run via ctest (target "acceptance") or
// directly; it is self-contained and writes only under a temp directory.

#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "pesqdnn/channel.hpp"
#include "pesqdnn/features.hpp"
#include "pesqdnn/losses.hpp"
#include "pesqdnn/model.hpp"
#include "pesqdnn/tensor.hpp"
#include "pesqdnn/training.hpp"
#include "pesqdnn/wav.hpp"

namespace fs = std::filesystem;
using namespace pesqdnn;

namespace {

int g_failures = 0;

void report(int n, const std::string& name, bool pass, const std::string& detail) {
    std::printf("%s  criterion %2d  %-28s %s\n", pass ? "PASS" : "FAIL", n, name.c_str(),
                detail.c_str());
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

double now_minus(const std::chrono::steady_clock::time_point& t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, ...) {
    char buf[256];
    va_list ap;
    va_start(ap, f);
    std::vsnprintf(buf, sizeof(buf), f, ap);
    va_end(ap);
    return buf;
}

// The small model geometry used wherever a criterion says "toy": the
// test-scale topology with encoder feature maps halved, instantiated either
// at reduced input geometry (gradient check) or at the real 260x16 feature
// geometry (training-based criteria).
ModelConfig overfit_config(std::size_t channels) {
    ModelConfig cfg = toy_config(kInputBins, kBlockFrames, channels);
    for (auto& l : cfg.encoder) l.maps /= 2;
    return cfg;
}

// ---------------------------------------------------------------------------
// 1. full-model gradient check
// ---------------------------------------------------------------------------

void criterion_gradcheck() {
    const auto t0 = std::chrono::steady_clock::now();
    ModelConfig cfg = toy_config(); // 20 bins x 8 frames, exercises every op
    cfg.embedding = Embedding::FLE;
    cfg.pooling = Pooling::AT;
    ModelWeights w = init_weights(cfg);
    w.set_requires_grad(true);
    std::mt19937_64 rng(5);
    std::normal_distribution<double> nd(0.0, 1.0);
    const std::size_t B = 2;
    std::vector<double> blocks(B * cfg.input_bins * cfg.block_frames * cfg.input_channels);
    for (double& v : blocks) v = nd(rng);
    LossConfig lc;
    lc.kind = LossKind::FLE;
    const double target = 3.2;

    auto eval = [&]() {
        Graph g(Precision::f64, false);
        ForwardResult fr = forward(g, blocks.data(), B, w, cfg);
        return loss_tensor(g, fr.pesq_hat, fr.q, target, lc)->value[0];
    };
    w.zero_grads();
    {
        Graph g;
        ForwardResult fr = forward(g, blocks.data(), B, w, cfg);
        g.backward(loss_tensor(g, fr.pesq_hat, fr.q, target, lc));
    }
    // Central differences at step 1e-5. Parameters whose true gradient is at
    // round-off scale are compared absolutely (1e-9 floor) instead of
    // relatively, since (f(x+h)-f(x-h))/2h carries ~1e-11 absolute noise.
    const double h = 1e-5;
    double worst_rel = 0.0;
    std::size_t checked = 0, failed = 0;
    for (auto& [name, t] : w.params) {
        for (std::size_t i = 0; i < t->size(); ++i) {
            const double orig = t->value[i];
            t->value[i] = orig + h;
            const double fp = eval();
            t->value[i] = orig - h;
            const double fm = eval();
            t->value[i] = orig;
            const double fd = (fp - fm) / (2.0 * h);
            const double an = t->grad.empty() ? 0.0 : t->grad[i];
            const double abs_err = std::abs(fd - an);
            const double rel = abs_err / std::max({std::abs(fd), std::abs(an), 1e-6});
            ++checked;
            if (rel > 1e-4 && abs_err > 1e-9) ++failed;
            if (abs_err > 1e-9 && rel > worst_rel) worst_rel = rel;
        }
    }
    const double secs = now_minus(t0);
    const bool pass = failed == 0 && secs < 120.0;
    report(1, "gradient check",
           pass,
           fmt("%zu params, %zu mismatches, worst rel %.2e, %.1fs", checked, failed,
               worst_rel, secs));
}

// ---------------------------------------------------------------------------
// 2. range invariants
// ---------------------------------------------------------------------------

void criterion_ranges() {
    const Embedding embs[] = {Embedding::STAT, Embedding::FLE, Embedding::BLE};
    const Pooling pools[] = {Pooling::AV, Pooling::AT};
    std::mt19937_64 rng(17);
    std::normal_distribution<double> nd(0.0, 1.0);
    std::size_t ok = 0, total = 0, att_ok = 0, att_total = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        ModelConfig cfg = toy_config();
        cfg.embedding = embs[trial % 3];
        cfg.pooling = pools[(trial / 3) % 2];
        cfg.rng_seed = 1000 + static_cast<std::uint64_t>(trial);
        ModelWeights w = init_weights(cfg);
        // perturb weights to arbitrary magnitudes beyond the init scheme
        const double scale = std::exp(nd(rng));
        for (auto& [name, t] : w.params)
            for (double& v : t->value) v = scale * nd(rng);
        const std::size_t B = 1 + static_cast<std::size_t>(trial % 3);
        std::vector<double> blocks(B * cfg.input_bins * cfg.block_frames * cfg.input_channels);
        for (double& v : blocks) v = 2.0 * nd(rng);
        Graph g(Precision::f64, false);
        ForwardResult fr = forward(g, blocks.data(), B, w, cfg);
        ++total;
        bool in_range = fr.pesq_hat->value[0] > kPesqMin && fr.pesq_hat->value[0] < kPesqMax;
        if (fr.q)
            for (double v : fr.q->value) in_range = in_range && v > kPesqMin && v < kPesqMax;
        ok += in_range;
        if (fr.attention) {
            ++att_total;
            double s = 0.0;
            for (double v : fr.attention->value) s += v;
            att_ok += std::abs(s - 1.0) <= 1e-9;
        }
    }
    report(2, "range invariants", ok == total && att_ok == att_total,
           fmt("%zu/%zu in (1.04,4.64), %zu/%zu attention simplex", ok, total, att_ok,
               att_total));
}

// ---------------------------------------------------------------------------
// 3. loss identities
// ---------------------------------------------------------------------------

void criterion_loss_identities() {
    bool pass = true;
    std::string why;
    if (alpha(4.64) != 1.0) { pass = false; why += "alpha(4.64)!=1 "; }
    if (alpha(3.64) != 0.9) { pass = false; why += "alpha(3.64)!=0.9 "; }

    std::mt19937_64 rng(23);
    std::uniform_real_distribution<double> u(kPesqMin, kPesqMax);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t B = 1 + rng() % 5, W = 1 + rng() % 16;
        const double hat = u(rng), t = u(rng);
        std::vector<double> q(B * W);
        for (double& v : q) v = u(rng);
        LossConfig cfg;
        // alpha-zero hook: embedding losses collapse to the utterance loss
        cfg.alpha_override = 0.0;
        if (loss_fle(hat, q, B, W, t, cfg) != loss_utterance(hat, t)) pass = false;
        std::vector<double> qb(q.begin(), q.begin() + static_cast<long>(B));
        if (loss_ble(hat, qb, B, t, cfg) != loss_utterance(hat, t)) pass = false;
        // brute-force oracle for the weighted forms
        LossConfig full;
        full.kind = LossKind::FLE;
        const double a = std::pow(0.9, kPesqMax - t);
        double sum = 0.0;
        for (double v : q) sum += (v - t) * (v - t);
        const double oracle = (hat - t) * (hat - t) + a * sum / static_cast<double>(B * W);
        worst = std::max(worst, std::abs(loss_fle(hat, q, B, W, t, full) - oracle));
        double sum_b = 0.0;
        for (double v : qb) sum_b += (v - t) * (v - t);
        const double oracle_b = (hat - t) * (hat - t) + a * sum_b / static_cast<double>(B);
        worst = std::max(worst, std::abs(loss_ble(hat, qb, B, t, full) - oracle_b));
    }
    if (worst > 1e-12) { pass = false; why += "oracle gap "; }
    report(3, "loss identities", pass,
           fmt("alpha exact, 100 bitwise alpha-zero trials, oracle gap %.1e%s%s", worst,
               why.empty() ? "" : " | ", why.c_str()));
}

// ---------------------------------------------------------------------------
// 4. metric oracles
// ---------------------------------------------------------------------------

void criterion_metrics() {
    std::mt19937_64 rng(31);
    std::normal_distribution<double> nd(0.0, 1.0);
    double worst = 0.0;
    bool invariants = true;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 2 + rng() % 40;
        std::vector<double> est(n), tgt(n);
        for (std::size_t i = 0; i < n; ++i) { est[i] = 3.0 + nd(rng); tgt[i] = 3.0 + nd(rng); }
        // two-pass brute-force oracles
        double m = 0.0;
        for (std::size_t i = 0; i < n; ++i) m += std::abs(est[i] - tgt[i]);
        m /= static_cast<double>(n);
        double me = 0.0, mt = 0.0;
        for (std::size_t i = 0; i < n; ++i) { me += est[i]; mt += tgt[i]; }
        me /= static_cast<double>(n);
        mt /= static_cast<double>(n);
        double sxy = 0.0, sxx = 0.0, syy = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            sxy += (est[i] - me) * (tgt[i] - mt);
            sxx += (est[i] - me) * (est[i] - me);
            syy += (tgt[i] - mt) * (tgt[i] - mt);
        }
        const double r = sxy / std::sqrt(sxx * syy);
        worst = std::max(worst, std::abs(mae(est, tgt) - m));
        worst = std::max(worst, std::abs(lcc(est, tgt) - r));
        // invariances: LCC under positive affine maps, MAE under joint shift
        const double a = 0.1 + std::abs(nd(rng)), b = nd(rng), s = nd(rng);
        std::vector<double> est_aff(n), est_sh(n), tgt_sh(n);
        for (std::size_t i = 0; i < n; ++i) {
            est_aff[i] = a * est[i] + b;
            est_sh[i] = est[i] + s;
            tgt_sh[i] = tgt[i] + s;
        }
        if (std::abs(lcc(est_aff, tgt) - lcc(est, tgt)) > 1e-9) invariants = false;
        if (std::abs(mae(est_sh, tgt_sh) - mae(est, tgt)) > 1e-12) invariants = false;
    }
    report(4, "metric oracles", worst <= 1e-12 && invariants,
           fmt("oracle gap %.1e, invariances %s", worst, invariants ? "hold" : "VIOLATED"));
}

// ---------------------------------------------------------------------------
// shared synthetic corpus for the training-based criteria
// ---------------------------------------------------------------------------

struct Corpus {
    fs::path dir;
    Manifest manifest;
    std::vector<FeatureBlockSequence> amp, cpx; // per record, both spectra
    std::vector<double> targets;
};

Corpus build_corpus() {
    Corpus c;
    c.dir = fs::temp_directory_path() / "pesqdnn_acceptance";
    fs::remove_all(c.dir);
    fs::create_directories(c.dir);
    SynthDatasetConfig scfg; // count 20, seed 7
    c.manifest = synth_dataset(c.dir.string(), scfg);
    for (SpectrumMode mode : {SpectrumMode::Amplitude, SpectrumMode::Complex}) {
        std::vector<FeatureMatrix> mats;
        for (const auto& rec : c.manifest.records) {
            WavData wav = read_wav(rec.audio_path);
            mats.push_back(to_channels(stft(wav.samples), mode));
        }
        std::vector<const FeatureMatrix*> ptrs;
        for (const auto& fm : mats) ptrs.push_back(&fm);
        NormStats stats = compute_norm_stats(ptrs);
        auto& out = mode == SpectrumMode::Amplitude ? c.amp : c.cpx;
        for (std::size_t i = 0; i < mats.size(); ++i) {
            normalize(mats[i], stats);
            FeatureBlockSequence seq = block(mats[i], c.manifest.records[i].id);
            seq.normalization_applied = true;
            out.push_back(std::move(seq));
        }
    }
    for (const auto& rec : c.manifest.records) c.targets.push_back(*rec.pesq_target);
    return c;
}

// ---------------------------------------------------------------------------
// 5. overfit
// ---------------------------------------------------------------------------

void criterion_overfit(const Corpus& corpus) {
    const auto t0 = std::chrono::steady_clock::now();

    // Regimen (tuned once, then frozen): per-utterance Adam with epoch-wise
    // shuffling, plateau decay (patience 25, factor 0.6) on the running epoch
    // loss, plus two fixed late lr halvings to settle the SGD noise.
    const std::uint64_t kSeed = 4;
    const double kLr0 = 3e-3;
    const int kMaxEpochs = 500, kCut1 = 420, kCut2 = 465;

    ModelConfig cfg = overfit_config(1);
    cfg.embedding = Embedding::FLE;
    cfg.pooling = Pooling::AV;
    cfg.rng_seed = kSeed;

    TrainState st = TrainState::init(cfg, ScheduleConfig{});
    ScheduleConfig sc;
    sc.initial_lr = kLr0;
    sc.decay_patience = 25;
    sc.stop_patience = 1000000; // run to the loss floor or the epoch cap
    st.schedule.current_lr = kLr0;
    LossConfig lc;
    lc.kind = LossKind::FLE;

    std::mt19937_64 shuffle_rng(kSeed);
    std::vector<std::size_t> order(corpus.amp.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    double final_train = std::numeric_limits<double>::infinity();
    int epochs = 0;
    for (int e = 1; e <= kMaxEpochs; ++e) {
        if (e == kCut1 || e == kCut2) st.schedule.current_lr *= 0.5;
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng() % i]);
        double tot = 0.0;
        for (std::size_t k = 0; k < order.size(); ++k)
            tot += train_utterance(st, corpus.amp[order[k]], corpus.targets[order[k]], lc,
                                   st.schedule.current_lr);
        final_train = tot / static_cast<double>(order.size());
        epochs = e;
        if (final_train < 1e-2) break;
        if (e < kCut1) st.schedule.update(final_train, sc);
    }
    const double secs = now_minus(t0);
    report(5, "overfit 20 utterances", final_train < 1e-2 && epochs <= 500 && secs < 600.0,
           fmt("train loss %.4g after %d epochs, %.0fs", final_train, epochs, secs));
}

// ---------------------------------------------------------------------------
// 6. schedule semantics
// ---------------------------------------------------------------------------

struct ScheduleOracle {
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_epoch = 0, since_improve = 0, since_decay = 0, decays = 0, epoch = 0;
    double lr;
    bool stopped = false;
    void feed(double loss, const ScheduleConfig& cfg) {
        ++epoch;
        if (loss < best) {
            best = loss;
            best_epoch = epoch;
            since_improve = since_decay = 0;
            return;
        }
        ++since_improve;
        ++since_decay;
        if (since_improve >= cfg.stop_patience) { stopped = true; return; }
        if (since_decay >= cfg.decay_patience) {
            lr *= cfg.decay_factor;
            ++decays;
            since_decay = 0;
        }
    }
};

void criterion_schedule() {
    std::mt19937_64 rng(47);
    std::size_t mismatches = 0;
    for (int trial = 0; trial < 50; ++trial) {
        ScheduleConfig cfg;
        cfg.initial_lr = 1e-3;
        ScheduleState st;
        st.current_lr = cfg.initial_lr;
        ScheduleOracle sim;
        sim.lr = cfg.initial_lr;
        std::uniform_int_distribution<int> pick(0, 4); // repeated values force plateaus
        for (int e = 0; e < 40 && !sim.stopped; ++e) {
            const double loss = 0.1 * pick(rng);
            const ScheduleEvent ev = st.update(loss, cfg);
            sim.feed(loss, cfg);
            if (ev.stop != sim.stopped || st.current_lr != sim.lr ||
                st.decay_count != sim.decays || st.best_epoch != sim.best_epoch)
                ++mismatches;
        }
    }
    report(6, "schedule semantics", mismatches == 0,
           fmt("50 scripted sequences, %zu state mismatches", mismatches));
}

// ---------------------------------------------------------------------------
// 7. erasure statistics
// ---------------------------------------------------------------------------

void criterion_erasures() {
    const std::size_t N = 1000000;
    bool pass = true;
    std::string why;

    ErasurePattern r = gen_erasures_random(N, 0.03, 12345);
    const double rate_r = r.empirical_rate();
    if (std::abs(rate_r - 0.03) > 0.002) { pass = false; why += "random-rate "; }

    ErasurePattern b = gen_erasures_burst(N, 0.06, 4.0, 999);
    const double rate_b = b.empirical_rate();
    double runs = 0.0, lost = 0.0;
    for (std::size_t i = 0; i < b.bits.size(); ++i) {
        lost += b.bits[i];
        runs += b.bits[i] && (i == 0 || !b.bits[i - 1]);
    }
    const double mean_run = lost / runs;
    if (std::abs(rate_b - 0.06) > 0.003) { pass = false; why += "burst-rate "; }
    if (std::abs(mean_run - 4.0) > 0.2) { pass = false; why += "burst-run "; }

    double stat_err = 0.0;
    for (double fer : {0.01, 0.05, 0.1, 0.3})
        for (double gamma : {0.0, 0.3, 0.8}) {
            double p = 0.0, q = 0.0;
            gilbert_rates(fer, gamma, p, q);
            stat_err = std::max(stat_err, std::abs(p / (p + q) - fer));
        }
    if (stat_err > 1e-12) { pass = false; why += "gilbert-stationarity "; }
    report(7, "erasure statistics", pass,
           fmt("rate %.4f/%.4f, mean run %.2f, stationarity err %.1e %s", rate_r, rate_b,
               mean_run, stat_err, why.c_str()));
}

// ---------------------------------------------------------------------------
// 8. feature pipeline
// ---------------------------------------------------------------------------

void criterion_features(const Corpus& corpus) {
    bool pass = true;
    std::string why;

    // 8 s @ 16 kHz -> 499 frames -> 31 full blocks
    std::vector<double> wave(8 * kSampleRate);
    std::mt19937_64 rng(3);
    std::normal_distribution<double> nd(0.0, 0.05);
    for (double& v : wave) v = nd(rng);
    Spectrogram sp = stft(wave);
    FeatureMatrix fm = to_channels(sp, SpectrumMode::Amplitude);
    std::vector<const FeatureMatrix*> one{&fm};
    NormStats st1 = compute_norm_stats(one);
    FeatureMatrix norm = fm;
    normalize(norm, st1);
    FeatureBlockSequence seq = block(norm, "acc8s");
    if (sp.frames != 499) { pass = false; why += fmt("L=%zu ", sp.frames); }
    if (seq.block_count != 31) { pass = false; why += fmt("B=%zu ", seq.block_count); }

    // block round-trip: concatenating blocks reproduces the leading frames
    double rt_err = 0.0;
    for (std::size_t b = 0; b < seq.block_count; ++b)
        for (std::size_t w = 0; w < kBlockFrames; ++w)
            for (std::size_t k = 0; k < kInputBins; ++k) {
                const double orig = norm.at(b * kBlockFrames + w, k, 0);
                const double blocked = seq.block(b)[(k * kBlockFrames + w)];
                rt_err = std::max(rt_err, std::abs(orig - blocked));
            }
    if (rt_err != 0.0) { pass = false; why += "round-trip "; }

    // normalized training features: per-bin mean 0 / std 1 (skip floored bins)
    std::vector<FeatureMatrix> mats;
    for (const auto& rec : corpus.manifest.records) {
        WavData wav = read_wav(rec.audio_path);
        mats.push_back(to_channels(stft(wav.samples), SpectrumMode::Amplitude));
    }
    std::vector<const FeatureMatrix*> ptrs;
    for (const auto& m : mats) ptrs.push_back(&m);
    NormStats stats = compute_norm_stats(ptrs);
    for (auto& m : mats) normalize(m, stats);
    double worst_mean = 0.0, worst_std = 0.0;
    std::size_t frames = 0;
    for (const auto& m : mats) frames += m.frames;
    for (std::size_t k = 0; k < kInputBins; ++k) {
        if (stats.stddev[k] <= kNormStdFloor) continue; // degenerate padded bin
        double mu = 0.0;
        for (const auto& m : mats)
            for (std::size_t l = 0; l < m.frames; ++l) mu += m.at(l, k, 0);
        mu /= static_cast<double>(frames);
        double var = 0.0;
        for (const auto& m : mats)
            for (std::size_t l = 0; l < m.frames; ++l) {
                const double d = m.at(l, k, 0) - mu;
                var += d * d;
            }
        var /= static_cast<double>(frames);
        worst_mean = std::max(worst_mean, std::abs(mu));
        worst_std = std::max(worst_std, std::abs(std::sqrt(var) - 1.0));
    }
    if (worst_mean > 1e-9 || worst_std > 1e-9) { pass = false; why += "normalization "; }
    report(8, "feature pipeline", pass,
           fmt("L=499 B=31, |mean|<=%.1e, |std-1|<=%.1e %s", worst_mean, worst_std,
               why.c_str()));
}

// ---------------------------------------------------------------------------
// 9. determinism and persistence
// ---------------------------------------------------------------------------

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void criterion_determinism(const Corpus& corpus) {
    bool pass = true;
    std::string why;
    const fs::path dir = corpus.dir / "ckpt";
    fs::create_directories(dir);

    std::vector<TrainingExample> train;
    for (std::size_t i = 0; i < 4; ++i) train.push_back({&corpus.amp[i], corpus.targets[i]});

    ModelConfig cfg = overfit_config(1);
    cfg.embedding = Embedding::FLE;
    cfg.pooling = Pooling::AT;
    cfg.rng_seed = 42;
    RunTrainingOptions opts;
    opts.loss.kind = LossKind::FLE;
    opts.schedule.initial_lr = 1e-3;
    opts.schedule.max_epochs = 2;
    opts.shuffle_seed = 42;

    std::string blobs[2];
    for (int run = 0; run < 2; ++run) {
        TrainingResult r = run_training(cfg, train, train, opts);
        const fs::path p = dir / ("run" + std::to_string(run) + ".ckpt");
        save_checkpoint(p.string(), cfg, r.best_weights, "{}");
        blobs[run] = slurp(p);
    }
    if (blobs[0].empty() || blobs[0] != blobs[1]) { pass = false; why += "nondeterministic "; }

    // save -> load -> predict bit-exact at f32
    Checkpoint ck = load_checkpoint((dir / "run0.ckpt").string());
    UtterancePrediction before = predict(corpus.amp[0], ck.weights, ck.config, Precision::f32);
    const fs::path resaved = dir / "resaved.ckpt";
    save_checkpoint(resaved.string(), ck.config, ck.weights, ck.norm_stats_json);
    Checkpoint ck2 = load_checkpoint(resaved.string());
    UtterancePrediction after = predict(corpus.amp[0], ck2.weights, ck2.config, Precision::f32);
    if (before.pesq_hat != after.pesq_hat || before.block_scores != after.block_scores)
        { pass = false; why += "reload-drift "; }

    // corruption must be rejected
    std::string bad = blobs[0];
    bad[bad.size() / 2] ^= 0x40;
    const fs::path badp = dir / "bad.ckpt";
    { std::ofstream f(badp, std::ios::binary); f << bad; }
    bool rejected = false;
    try {
        load_checkpoint(badp.string());
    } catch (const IntegrityError&) {
        rejected = true;
    }
    if (!rejected) { pass = false; why += "corruption-accepted "; }
    report(9, "determinism/persistence", pass,
           why.empty() ? "byte-identical runs, f32 reload exact, corruption rejected" : why);
}

// ---------------------------------------------------------------------------
// 10. ablation smoke matrix
// ---------------------------------------------------------------------------

void criterion_ablation(const Corpus& corpus) {
    const auto t0 = std::chrono::steady_clock::now();
    std::size_t ran = 0, ok = 0;
    std::string why;
    for (SpectrumMode mode : {SpectrumMode::Amplitude, SpectrumMode::Complex}) {
        const auto& feats = mode == SpectrumMode::Amplitude ? corpus.amp : corpus.cpx;
        std::vector<TrainingExample> train;
        for (std::size_t i = 0; i < feats.size(); ++i)
            train.push_back({&feats[i], corpus.targets[i]});
        for (Embedding emb : {Embedding::STAT, Embedding::FLE, Embedding::BLE}) {
            for (Pooling pool : {Pooling::AV, Pooling::AT}) {
                ModelConfig cfg = overfit_config(channels_for(mode));
                cfg.embedding = emb;
                cfg.pooling = pool;
                cfg.rng_seed = 7;
                RunTrainingOptions opts;
                opts.loss.kind = emb == Embedding::STAT  ? LossKind::Utterance
                                 : emb == Embedding::FLE ? LossKind::FLE
                                                         : LossKind::BLE;
                opts.schedule.initial_lr = 1e-3;
                opts.schedule.max_epochs = 3;
                opts.shuffle_seed = 7;
                bool finite = true;
                opts.on_epoch = [&](const EpochLog& e) {
                    // losses must stay finite and inside the bound implied by
                    // the gated output range: (4.64-1.04)^2 * (1 + alpha) < 26
                    finite = finite && std::isfinite(e.train_loss) &&
                             std::isfinite(e.dev_loss) && e.train_loss >= 0.0 &&
                             e.train_loss < 26.0 && e.dev_loss >= 0.0 && e.dev_loss < 26.0;
                };
                ++ran;
                try {
                    run_training(cfg, train, train, opts);
                    if (finite) ++ok;
                    else why += fmt("[%s nonfinite] ", to_string(emb).c_str());
                } catch (const std::exception& e) {
                    why += fmt("[%s/%s: %s] ", to_string(emb).c_str(),
                               to_string(pool).c_str(), e.what());
                }
            }
        }
    }
    report(10, "ablation smoke matrix", ran == 12 && ok == 12,
           fmt("%zu/%zu combos trained 3 epochs, %.0fs %s", ok, ran, now_minus(t0),
               why.c_str()));
}

} // namespace

int main() {
    criterion_gradcheck();
    criterion_ranges();
    criterion_loss_identities();
    criterion_metrics();
    Corpus corpus = build_corpus();
    criterion_overfit(corpus);
    criterion_schedule();
    criterion_erasures();
    criterion_features(corpus);
    criterion_determinism(corpus);
    criterion_ablation(corpus);
    if (g_failures == 0) std::printf("ALL CRITERIA PASSED\n");
    else std::printf("%d CRITERIA FAILED\n", g_failures);
    return g_failures == 0 ? 0 : 1;
}
