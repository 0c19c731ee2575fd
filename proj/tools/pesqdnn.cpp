// pesqdnn: operator surface for the coded-speech quality estimator.
// Subcommands: synth, featurize, train, evaluate, predict, simulate-eid.

#include <atomic>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"

#include "pesqdnn/channel.hpp"
#include "pesqdnn/features.hpp"
#include "pesqdnn/losses.hpp"
#include "pesqdnn/model.hpp"
#include "pesqdnn/training.hpp"
#include "pesqdnn/wav.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pesqdnn;

namespace {

void write_atomic(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw DataError("cannot write " + path);
        f << content;
    }
    fs::rename(tmp, path);
}

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    std::exception_ptr err;
    std::mutex err_mu;
    for (std::size_t w = 0; w < std::min(workers, n); ++w)
        pool.emplace_back([&]() {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lk(err_mu);
                    if (!err) err = std::current_exception();
                }
            }
        });
    for (auto& t : pool) t.join();
    if (err) std::rethrow_exception(err);
}

SpectrumMode mode_from_string(const std::string& s) {
    if (s == "amplitude") return SpectrumMode::Amplitude;
    if (s == "complex") return SpectrumMode::Complex;
    throw ValidationError("unknown mode '" + s + "' (expected amplitude|complex)");
}

// ---------------------------------------------------------------------------
// feature store
// ---------------------------------------------------------------------------

struct StoreIndex {
    std::string mode;
    std::vector<std::pair<std::string, std::size_t>> entries; // id -> block count
};

void save_index(const std::string& dir, const StoreIndex& idx) {
    json j;
    j["schema_version"] = 1;
    j["mode"] = idx.mode;
    json items = json::array();
    for (const auto& [id, blocks] : idx.entries)
        items.push_back({{"id", id}, {"blocks", blocks}});
    j["utterances"] = items;
    write_atomic((fs::path(dir) / "index.json").string(), j.dump(2) + "\n");
}

StoreIndex load_index(const std::string& dir) {
    std::ifstream f(fs::path(dir) / "index.json");
    if (!f) throw DataError("feature store has no index.json: " + dir);
    json j = json::parse(f);
    if (j.value("schema_version", 0) != 1)
        throw IntegrityError("unsupported feature store schema version");
    StoreIndex idx;
    idx.mode = j.at("mode").get<std::string>();
    for (const auto& it : j.at("utterances"))
        idx.entries.emplace_back(it.at("id").get<std::string>(),
                                 it.at("blocks").get<std::size_t>());
    return idx;
}

// ---------------------------------------------------------------------------
// subcommands
// ---------------------------------------------------------------------------

int cmd_synth(const std::string& out_dir, std::size_t count, std::uint64_t seed) {
    SynthDatasetConfig cfg;
    cfg.count = count;
    cfg.seed = seed;
    Manifest m = synth_dataset(out_dir, cfg);
    std::cout << "wrote " << m.records.size() << " utterances to " << out_dir << "\n";
    return 0;
}

int cmd_featurize(const std::string& manifest_path, const std::string& features_dir,
                  const std::string& mode_str, std::size_t workers) {
    const SpectrumMode mode = mode_from_string(mode_str);
    Manifest manifest = Manifest::load(manifest_path);
    if (manifest.records.empty()) throw DataError("manifest is empty: " + manifest_path);
    fs::create_directories(features_dir);

    std::vector<FeatureMatrix> mats(manifest.records.size());
    std::vector<std::string> failures(manifest.records.size());
    parallel_for(manifest.records.size(), workers, [&](std::size_t i) {
        const auto& rec = manifest.records[i];
        try {
            WavData wav = read_wav(rec.audio_path);
            if (wav.sample_rate != kSampleRate)
                throw DataError("sample rate " + std::to_string(wav.sample_rate) +
                                " != 16000 in " + rec.audio_path);
            mats[i] = to_channels(stft(wav.samples), mode);
        } catch (const std::exception& e) {
            failures[i] = e.what();
        }
    });
    bool any_fail = false;
    for (std::size_t i = 0; i < failures.size(); ++i)
        if (!failures[i].empty()) {
            std::cerr << "featurize failed for " << manifest.records[i].id << ": "
                      << failures[i] << "\n";
            any_fail = true;
        }
    if (any_fail) throw DataError("feature extraction failed for some utterances");

    // statistics from the train split only
    std::vector<const FeatureMatrix*> train_mats;
    for (std::size_t i = 0; i < mats.size(); ++i)
        if (manifest.records[i].split == "train") train_mats.push_back(&mats[i]);
    if (train_mats.empty())
        throw DataError("manifest has no train-split utterances for normalization stats");
    NormStats stats = compute_norm_stats(train_mats);
    stats.save((fs::path(features_dir) / "norm_stats.json").string());

    StoreIndex idx;
    idx.mode = mode_str;
    idx.entries.resize(manifest.records.size());
    parallel_for(manifest.records.size(), workers, [&](std::size_t i) {
        FeatureMatrix fm = std::move(mats[i]);
        normalize(fm, stats);
        FeatureBlockSequence seq = block(fm, manifest.records[i].id);
        seq.normalization_applied = true;
        seq.save((fs::path(features_dir) / (seq.utterance_id + ".fbs")).string());
        idx.entries[i] = {seq.utterance_id, seq.block_count};
    });
    save_index(features_dir, idx);
    std::cout << "featurized " << manifest.records.size() << " utterances ("
              << train_mats.size() << " train) into " << features_dir << "\n";
    return 0;
}

ModelConfig build_model_config(const std::string& config_path, const std::string& embedding,
                               const std::string& pooling, std::size_t input_channels,
                               std::uint64_t seed) {
    ModelConfig cfg;
    if (!config_path.empty()) {
        std::ifstream f(config_path);
        if (!f) throw DataError("cannot read config: " + config_path);
        std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        cfg = ModelConfig::from_json(text);
    }
    if (!embedding.empty()) cfg.embedding = embedding_from_string(embedding);
    if (!pooling.empty()) cfg.pooling = pooling_from_string(pooling);
    cfg.input_channels = input_channels;
    if (seed != 0) cfg.rng_seed = seed;
    cfg.validate();
    return cfg;
}

int cmd_train(const std::string& train_manifest, const std::string& dev_manifest,
              const std::string& features_dir, const std::string& checkpoint_path,
              const std::string& config_path, const std::string& embedding,
              const std::string& pooling, const std::string& loss_str, std::uint64_t seed,
              double lr, std::size_t max_epochs, const std::string& log_path,
              bool print_config) {
    StoreIndex idx = load_index(features_dir);
    const std::size_t channels = channels_for(mode_from_string(idx.mode));
    ModelConfig cfg = build_model_config(config_path, embedding, pooling, channels, seed);
    if (print_config) {
        std::cout << cfg.to_json() << "\n";
        return 0;
    }

    LossConfig loss_cfg;
    loss_cfg.kind = loss_from_string(loss_str);
    if (loss_cfg.kind == LossKind::FLE && cfg.embedding != Embedding::FLE)
        throw ValidationError("fle loss requires --embedding fle");
    if (loss_cfg.kind == LossKind::BLE && cfg.embedding != Embedding::BLE)
        throw ValidationError("ble loss requires --embedding ble");
    if (loss_cfg.kind != LossKind::Utterance && cfg.embedding == Embedding::STAT)
        throw ValidationError("stat embedding supports only the utt loss");

    auto load_split = [&](const std::string& manifest_path, const std::string& split,
                          std::vector<FeatureBlockSequence>& storage) {
        Manifest m = Manifest::load(manifest_path);
        std::vector<const UtteranceRecord*> sel;
        for (const auto& rec : m.records)
            if (rec.split == split) sel.push_back(&rec);
        if (sel.empty())
            throw DataError("no '" + split + "'-split utterances in " + manifest_path);
        std::vector<TrainingExample> out;
        storage.reserve(storage.size() + sel.size());
        for (const auto* rec : sel) {
            if (!rec->pesq_target)
                throw DataError("utterance " + rec->id + " has no pesq_target");
            storage.push_back(FeatureBlockSequence::load(
                (fs::path(features_dir) / (rec->id + ".fbs")).string()));
            out.push_back({&storage.back(), *rec->pesq_target});
        }
        return out;
    };
    std::vector<FeatureBlockSequence> train_storage, dev_storage;
    train_storage.reserve(1024);
    dev_storage.reserve(1024);
    auto train_set = load_split(train_manifest, "train", train_storage);
    auto dev_set = load_split(dev_manifest, "dev", dev_storage);

    RunTrainingOptions opts;
    opts.loss = loss_cfg;
    opts.schedule.initial_lr = lr;
    opts.schedule.max_epochs = max_epochs;
    opts.shuffle_seed = cfg.rng_seed;

    std::ofstream log;
    if (!log_path.empty()) {
        log.open(log_path, std::ios::trunc);
        if (!log) throw DataError("cannot write training log: " + log_path);
    }
    opts.on_epoch = [&](const EpochLog& e) {
        json j;
        j["epoch"] = e.epoch;
        j["train_loss"] = e.train_loss;
        j["dev_loss"] = e.dev_loss;
        j["lr"] = e.lr;
        if (e.decayed) j["event"] = "lr_decay";
        if (e.stopped) j["event"] = "early_stop";
        if (log.is_open()) log << j.dump() << "\n";
        std::cout << "epoch " << e.epoch << " train " << e.train_loss << " dev " << e.dev_loss
                  << " lr " << e.lr << (e.improved ? " *" : "") << "\n";
    };

    TrainingResult result = run_training(cfg, train_set, dev_set, opts);
    NormStats stats = NormStats::load((fs::path(features_dir) / "norm_stats.json").string());
    save_checkpoint(checkpoint_path, cfg, result.best_weights, stats.to_json());
    std::cout << "best dev loss " << result.best_dev_loss << " (epoch " << result.best_epoch
              << "), checkpoint: " << checkpoint_path << "\n";
    return 0;
}

FeatureBlockSequence featurize_from_checkpoint(const Checkpoint& ck, const std::string& wav_path,
                                               const std::string& id) {
    WavData wav = read_wav(wav_path);
    if (wav.sample_rate != kSampleRate)
        throw DataError("sample rate " + std::to_string(wav.sample_rate) +
                        " != 16000 (no resampling): " + wav_path);
    if (ck.norm_stats_json.empty())
        throw DataError("checkpoint carries no normalization stats");
    NormStats stats = NormStats::from_json(ck.norm_stats_json);
    const SpectrumMode mode =
        ck.config.input_channels == 1 ? SpectrumMode::Amplitude : SpectrumMode::Complex;
    return featurize(wav.samples, mode, stats, id);
}

int cmd_evaluate(const std::string& checkpoint_path, const std::string& manifest_path,
                 const std::string& report_dir, const std::string& precision,
                 const std::string& split, std::size_t workers) {
    const Precision prec = precision == "f32" ? Precision::f32 : Precision::f64;
    Checkpoint ck = load_checkpoint(checkpoint_path);
    Manifest manifest = Manifest::load(manifest_path);
    if (!split.empty()) {
        std::vector<UtteranceRecord> kept;
        for (auto& rec : manifest.records)
            if (rec.split == split) kept.push_back(std::move(rec));
        if (kept.empty())
            throw DataError("no '" + split + "'-split utterances in " + manifest_path);
        manifest.records = std::move(kept);
    }
    std::vector<std::string> missing;
    for (const auto& rec : manifest.records)
        if (!rec.pesq_target) missing.push_back(rec.id);
    if (!missing.empty()) {
        std::string ids;
        for (const auto& id : missing) ids += (ids.empty() ? "" : ", ") + id;
        throw DataError("utterances without pesq_target: " + ids);
    }

    std::vector<EvalRow> rows(manifest.records.size());
    parallel_for(manifest.records.size(), workers, [&](std::size_t i) {
        const auto& rec = manifest.records[i];
        FeatureBlockSequence seq = featurize_from_checkpoint(ck, rec.audio_path, rec.id);
        UtterancePrediction p = predict(seq, ck.weights, ck.config, prec);
        EvalRow row;
        row.id = rec.id;
        row.estimate = p.pesq_hat;
        row.target = *rec.pesq_target;
        row.codec = rec.codec;
        row.bitrate_kbps = rec.bitrate_kbps;
        row.fer = rec.fer;
        row.snr_db = rec.snr_db;
        row.tandem = rec.tandem;
        rows[i] = row;
    });

    ConditionReport report = condition_report(rows);
    fs::create_directories(report_dir);
    write_atomic((fs::path(report_dir) / "report.csv").string(), report.to_csv());
    write_atomic((fs::path(report_dir) / "report.txt").string(), report.to_text());
    std::string scatter = "id,estimate,target\n";
    for (const auto& r : rows) {
        char buf[128];
        std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f\n", r.id.c_str(), r.estimate, r.target);
        scatter += buf;
    }
    write_atomic((fs::path(report_dir) / "scatter.csv").string(), scatter);
    std::cout << report.to_text();
    return 0;
}

int cmd_predict(const std::string& checkpoint_path, const std::vector<std::string>& wavs,
                const std::string& precision, const std::string& dump_json) {
    const Precision prec = precision == "f32" ? Precision::f32 : Precision::f64;
    Checkpoint ck = load_checkpoint(checkpoint_path);
    json dump = json::array();
    for (const auto& path : wavs) {
        const std::string id = fs::path(path).stem().string();
        FeatureBlockSequence seq = featurize_from_checkpoint(ck, path, id);
        UtterancePrediction p = predict(seq, ck.weights, ck.config, prec);
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.3f", p.pesq_hat);
        std::cout << id << " " << buf << "\n";
        if (!dump_json.empty()) {
            json j;
            j["id"] = id;
            j["pesq_hat"] = p.pesq_hat;
            j["block_scores"] = p.block_scores;
            j["attention"] = p.attention;
            dump.push_back(j);
        }
    }
    if (!dump_json.empty()) write_atomic(dump_json, dump.dump(2) + "\n");
    return 0;
}

int cmd_simulate_eid(std::size_t frames, double fer, const std::string& kind,
                     std::uint64_t seed, const std::string& out, double gamma,
                     double mean_burst) {
    ErasurePattern pat;
    if (kind == "random") pat = gen_erasures_random(frames, fer, seed, gamma);
    else if (kind == "burst") pat = gen_erasures_burst(frames, fer, mean_burst, seed);
    else throw ValidationError("unknown erasure kind '" + kind + "' (expected random|burst)");
    pat.save(out);
    std::cout << "empirical rate " << pat.empirical_rate() << " over " << frames
              << " frames -> " << out << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Non-intrusive coded-speech quality estimator"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "Generate a synthetic desk-scale dataset");
    std::string synth_dir = "synth_data";
    std::size_t synth_count = 20;
    std::uint64_t synth_seed = 7;
    synth->add_option("--out", synth_dir, "Output directory");
    synth->add_option("--count", synth_count, "Number of utterances");
    synth->add_option("--seed", synth_seed, "Generator seed");

    // featurize
    auto* feat = app.add_subcommand("featurize", "Extract normalized feature blocks");
    std::string feat_manifest, feat_dir = "features";
    std::string feat_mode = "complex";
    std::size_t feat_workers = 1;
    feat->add_option("--manifest", feat_manifest, "Manifest (JSON-lines)")->required();
    feat->add_option("--features", feat_dir, "Feature store directory");
    feat->add_option("--mode", feat_mode, "Spectrum input: amplitude|complex");
    feat->add_option("--workers", feat_workers, "Parallel workers");

    // train
    auto* train = app.add_subcommand("train", "Train on a featurized dataset");
    std::string tr_train_manifest, tr_dev_manifest, tr_features = "features";
    std::string tr_checkpoint = "model.ckpt", tr_config, tr_embedding, tr_pooling;
    std::string tr_loss = "utt", tr_log;
    std::uint64_t tr_seed = 0;
    double tr_lr = 1e-4;
    std::size_t tr_max_epochs = 10000;
    bool tr_print_config = false;
    train->add_option("--train-manifest", tr_train_manifest, "Training manifest")->required();
    train->add_option("--dev-manifest", tr_dev_manifest, "Development manifest")->required();
    train->add_option("--features", tr_features, "Feature store directory");
    train->add_option("--checkpoint", tr_checkpoint, "Output checkpoint path");
    train->add_option("--config", tr_config, "Model config JSON file");
    train->add_option("--embedding", tr_embedding, "Embedding head: stat|fle|ble");
    train->add_option("--pooling", tr_pooling, "Score pooling: av|at");
    train->add_option("--loss", tr_loss, "Training loss: utt|fle|ble");
    train->add_option("--seed", tr_seed, "Weight init / shuffle seed (0 = config default)");
    train->add_option("--lr", tr_lr, "Initial learning rate");
    train->add_option("--max-epochs", tr_max_epochs, "Epoch safety cap");
    train->add_option("--log", tr_log, "Training log (JSON-lines)");
    train->add_flag("--print-config", tr_print_config,
                    "Print canonical effective model config and exit");

    // evaluate
    auto* eval = app.add_subcommand("evaluate", "Per-condition MAE/LCC report");
    std::string ev_checkpoint, ev_manifest, ev_report = "reports";
    std::string ev_precision = "f64", ev_split;
    std::size_t ev_workers = 1;
    eval->add_option("--checkpoint", ev_checkpoint, "Checkpoint path")->required();
    eval->add_option("--manifest", ev_manifest, "Manifest with targets")->required();
    eval->add_option("--reports", ev_report, "Report output directory");
    eval->add_option("--precision", ev_precision, "Inference precision: f32|f64");
    eval->add_option("--split", ev_split, "Only evaluate this manifest split");
    eval->add_option("--workers", ev_workers, "Parallel workers");

    // predict
    auto* pred = app.add_subcommand("predict", "Estimate PESQ for WAV files");
    std::string pr_checkpoint, pr_precision = "f64", pr_dump;
    std::vector<std::string> pr_wavs;
    pred->add_option("--checkpoint", pr_checkpoint, "Checkpoint path")->required();
    pred->add_option("--precision", pr_precision, "Inference precision: f32|f64");
    pred->add_option("--dump-json", pr_dump, "Dump block scores / attention to JSON");
    pred->add_option("wavs", pr_wavs, "Input WAV files (16 kHz mono)")->required();

    // simulate-eid
    auto* eid = app.add_subcommand("simulate-eid", "Generate a frame-erasure sidecar");
    std::size_t eid_frames = 0;
    double eid_fer = 0.0, eid_gamma = 0.0, eid_mean_burst = 4.0;
    std::string eid_kind = "random", eid_out = "erasures.txt";
    std::uint64_t eid_seed = 1;
    eid->add_option("--frames", eid_frames, "Number of transmitted frames")->required();
    eid->add_option("--fer", eid_fer, "Target frame error rate")->required();
    eid->add_option("--kind", eid_kind, "random|burst");
    eid->add_option("--seed", eid_seed, "Generator seed");
    eid->add_option("--out", eid_out, "Sidecar output path");
    eid->add_option("--gamma", eid_gamma, "Gilbert burstiness (random kind)");
    eid->add_option("--mean-burst", eid_mean_burst, "Mean burst length (burst kind)");

    try {
        app.parse(argc, argv);
        if (*synth) return cmd_synth(synth_dir, synth_count, synth_seed);
        if (*feat) return cmd_featurize(feat_manifest, feat_dir, feat_mode, feat_workers);
        if (*train)
            return cmd_train(tr_train_manifest, tr_dev_manifest, tr_features, tr_checkpoint,
                             tr_config, tr_embedding, tr_pooling, tr_loss, tr_seed, tr_lr,
                             tr_max_epochs, tr_log, tr_print_config);
        if (*eval) return cmd_evaluate(ev_checkpoint, ev_manifest, ev_report, ev_precision,
                                       ev_split, ev_workers);
        if (*pred) return cmd_predict(pr_checkpoint, pr_wavs, pr_precision, pr_dump);
        if (*eid)
            return cmd_simulate_eid(eid_frames, eid_fer, eid_kind, eid_seed, eid_out,
                                    eid_gamma, eid_mean_burst);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const ExternalToolError& e) {
        std::cerr << "external tool error: " << e.what() << "\n";
        return 3;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
