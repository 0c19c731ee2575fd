#include "pesqdnn/channel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "json.hpp"

namespace pesqdnn {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(ErasureKind k) {
    switch (k) {
    case ErasureKind::None: return "none";
    case ErasureKind::Random: return "random";
    case ErasureKind::Burst: return "burst";
    }
    return "?";
}

ErasureKind erasure_kind_from_string(const std::string& s) {
    if (s == "none") return ErasureKind::None;
    if (s == "random") return ErasureKind::Random;
    if (s == "burst") return ErasureKind::Burst;
    throw ValidationError("unknown erasure kind '" + s + "'");
}

// ---------------------------------------------------------------------------
// manifest
// ---------------------------------------------------------------------------

void UtteranceRecord::validate() const {
    if (id.empty()) throw ValidationError("utterance record without id");
    if (fer < 0.0 || fer > 1.0)
        throw ValidationError("fer out of [0,1] for utterance " + id);
    if (fer > 0.0 && erasure_kind == ErasureKind::None)
        throw ValidationError("fer > 0 requires an erasure kind for utterance " + id);
    if (pesq_target && (*pesq_target < 1.04 || *pesq_target > 4.64))
        throw ValidationError("pesq_target out of [1.04, 4.64] for utterance " + id);
    if ((split == "train" || split == "dev") && !pesq_target)
        throw ValidationError("train/dev utterance " + id + " without pesq_target");
}

namespace {

json record_to_json(const UtteranceRecord& r) {
    json j;
    j["v"] = 1;
    j["id"] = r.id;
    j["audio"] = r.audio_path;
    j["speaker"] = r.speaker;
    j["language"] = r.language;
    j["split"] = r.split;
    j["level_dbov"] = r.level_dbov;
    if (std::isinf(r.snr_db)) j["snr_db"] = "inf";
    else j["snr_db"] = r.snr_db;
    j["codec"] = r.codec;
    j["bitrate_kbps"] = r.bitrate_kbps;
    j["fer"] = r.fer;
    j["erasure_kind"] = to_string(r.erasure_kind);
    j["tandem"] = r.tandem;
    if (r.pesq_target) j["pesq_target"] = *r.pesq_target;
    if (!r.notes.empty()) j["notes"] = r.notes;
    return j;
}

UtteranceRecord record_from_json(const json& j) {
    if (!j.contains("v") || j["v"].get<int>() != 1)
        throw IntegrityError("unsupported manifest schema version");
    UtteranceRecord r;
    r.id = j.at("id").get<std::string>();
    r.audio_path = j.value("audio", "");
    r.speaker = j.value("speaker", "");
    r.language = j.value("language", "");
    r.split = j.value("split", "");
    r.level_dbov = j.value("level_dbov", -26.0);
    if (j.contains("snr_db")) {
        if (j["snr_db"].is_string()) r.snr_db = std::numeric_limits<double>::infinity();
        else r.snr_db = j["snr_db"].get<double>();
    }
    r.codec = j.value("codec", "");
    r.bitrate_kbps = j.value("bitrate_kbps", 0.0);
    r.fer = j.value("fer", 0.0);
    r.erasure_kind = erasure_kind_from_string(j.value("erasure_kind", "none"));
    r.tandem = j.value("tandem", "");
    if (j.contains("pesq_target")) r.pesq_target = j["pesq_target"].get<double>();
    if (j.contains("notes"))
        r.notes = j["notes"].get<std::map<std::string, std::string>>();
    r.validate();
    return r;
}

} // namespace

void Manifest::save(const std::string& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw DataError("cannot write manifest: " + path);
    for (const auto& r : records) f << record_to_json(r).dump() << '\n';
}

Manifest Manifest::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot read manifest: " + path);
    Manifest m;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            m.records.push_back(record_from_json(json::parse(line)));
        } catch (const json::exception& e) {
            throw DataError("manifest " + path + " line " + std::to_string(lineno) + ": " +
                            e.what());
        }
    }
    return m;
}

const UtteranceRecord& Manifest::find(const std::string& id) const {
    for (const auto& r : records)
        if (r.id == id) return r;
    throw DataError("utterance id '" + id + "' not in manifest");
}

// ---------------------------------------------------------------------------
// level / mixing
// ---------------------------------------------------------------------------

namespace {
constexpr std::size_t kActiveFrame = 256; // 16 ms at 16 kHz
constexpr double kActiveThresholdDb = 40.0;
} // namespace

double active_rms(const std::vector<double>& waveform) {
    if (waveform.empty()) throw DataError("active_rms on empty waveform");
    const std::size_t nframes = (waveform.size() + kActiveFrame - 1) / kActiveFrame;
    std::vector<double> energy(nframes, 0.0);
    std::vector<std::size_t> count(nframes, 0);
    double peak = 0.0;
    for (std::size_t i = 0; i < nframes; ++i) {
        const std::size_t lo = i * kActiveFrame;
        const std::size_t hi = std::min(waveform.size(), lo + kActiveFrame);
        for (std::size_t n = lo; n < hi; ++n) energy[i] += waveform[n] * waveform[n];
        count[i] = hi - lo;
        peak = std::max(peak, energy[i] / static_cast<double>(count[i]));
    }
    if (peak <= 0.0) throw DataError("all-silent input, active level undefined");
    const double thresh = peak * std::pow(10.0, -kActiveThresholdDb / 10.0);
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < nframes; ++i) {
        if (energy[i] / static_cast<double>(count[i]) >= thresh) {
            sum += energy[i];
            n += count[i];
        }
    }
    return std::sqrt(sum / static_cast<double>(n));
}

std::vector<double> adjust_level(const std::vector<double>& waveform, double target_dbov) {
    const double rms = active_rms(waveform);
    const double target = std::pow(10.0, target_dbov / 20.0); // 0 dBov = RMS 1.0
    const double gain = target / rms;
    std::vector<double> out(waveform.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = waveform[i] * gain;
    return out;
}

std::vector<double> mix_snr(const std::vector<double>& speech,
                            const std::vector<double>& noise, double snr_db,
                            std::uint64_t seed) {
    if (std::isinf(snr_db) && snr_db > 0.0) return speech;
    if (noise.empty()) throw DataError("mix_snr: empty noise");
    std::vector<double> d(speech.size());
    if (noise.size() >= speech.size()) {
        std::copy(noise.begin(), noise.begin() + static_cast<std::ptrdiff_t>(speech.size()),
                  d.begin());
    } else {
        // tile with a seeded circular offset
        std::mt19937_64 rng(seed);
        const std::size_t off = rng() % noise.size();
        for (std::size_t i = 0; i < speech.size(); ++i)
            d[i] = noise[(off + i) % noise.size()];
    }
    double nrg = 0.0;
    for (double v : d) nrg += v * v;
    if (nrg <= 0.0) throw DataError("mix_snr: zero-energy noise with finite SNR");
    const double noise_rms = std::sqrt(nrg / static_cast<double>(d.size()));
    const double speech_rms = active_rms(speech);
    const double g = speech_rms / (noise_rms * std::pow(10.0, snr_db / 20.0));
    std::vector<double> out(speech.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = speech[i] + g * d[i];
    return out;
}

std::vector<double> highpass_50hz(const std::vector<double>& waveform) {
    // two cascaded RBJ high-pass biquads (Butterworth Q pair), fc = 50 Hz
    const double fs = 16000.0;
    const double w0 = 2.0 * std::numbers::pi * 50.0 / fs;
    const double qs[2] = {0.5411961, 1.3065630};
    std::vector<double> x = waveform;
    for (double q : qs) {
        const double alpha = std::sin(w0) / (2.0 * q);
        const double cw = std::cos(w0);
        const double a0 = 1.0 + alpha;
        const double b0 = (1.0 + cw) / 2.0 / a0;
        const double b1 = -(1.0 + cw) / a0;
        const double b2 = b0;
        const double a1 = -2.0 * cw / a0;
        const double a2 = (1.0 - alpha) / a0;
        double x1 = 0, x2 = 0, y1 = 0, y2 = 0;
        for (double& v : x) {
            const double in = v;
            v = b0 * in + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
            x2 = x1;
            x1 = in;
            y2 = y1;
            y1 = v;
        }
    }
    return x;
}

// ---------------------------------------------------------------------------
// erasure patterns
// ---------------------------------------------------------------------------

double ErasurePattern::empirical_rate() const {
    if (bits.empty()) return 0.0;
    std::size_t n = 0;
    for (std::uint8_t b : bits) n += b;
    return static_cast<double>(n) / static_cast<double>(bits.size());
}

void gilbert_rates(double fer, double gamma, double& p, double& q) {
    if (fer < 0.0 || fer > 0.5) throw ValidationError("fer must be in [0, 0.5]");
    if (gamma < 0.0 || gamma >= 1.0)
        throw ValidationError("Gilbert gamma must be in [0, 1)");
    p = fer * (1.0 - gamma);
    q = (1.0 - fer) * (1.0 - gamma);
}

ErasurePattern gen_erasures_random(std::size_t frame_count, double fer, std::uint64_t seed,
                                   double gamma) {
    if (frame_count == 0) throw ValidationError("frame_count must be >= 1");
    ErasurePattern pat;
    pat.bits.assign(frame_count, 0);
    pat.target_fer = fer;
    pat.kind = ErasureKind::Random;
    pat.seed = seed;
    pat.gamma = gamma;
    if (fer == 0.0) return pat;
    double p, q;
    gilbert_rates(fer, gamma, p, q);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    bool bad = uni(rng) < fer; // stationary start
    for (std::size_t i = 0; i < frame_count; ++i) {
        pat.bits[i] = bad ? 1 : 0;
        const double u = uni(rng);
        bad = bad ? (u >= q) : (u < p);
    }
    return pat;
}

ErasurePattern gen_erasures_burst(std::size_t frame_count, double fer,
                                  double mean_burst_len, std::uint64_t seed) {
    if (frame_count == 0) throw ValidationError("frame_count must be >= 1");
    if (mean_burst_len < 1.0) throw ValidationError("mean_burst_len must be >= 1");
    if (fer < 0.0 || fer > 0.5) throw ValidationError("fer must be in [0, 0.5]");
    ErasurePattern pat;
    pat.bits.assign(frame_count, 0);
    pat.target_fer = fer;
    pat.kind = ErasureKind::Burst;
    pat.seed = seed;
    pat.mean_burst_len = mean_burst_len;
    if (fer == 0.0) return pat;
    const double mean_gap = mean_burst_len * (1.0 - fer) / fer;
    if (mean_gap < 1.0)
        throw ValidationError("infeasible (fer, mean_burst_len): implied gap below one frame");
    // geometric run lengths on {1, 2, ...}
    const double cont_burst = 1.0 - 1.0 / mean_burst_len;
    const double cont_gap = 1.0 - 1.0 / mean_gap;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    bool in_burst = uni(rng) < fer;
    std::size_t i = 0;
    while (i < frame_count) {
        pat.bits[i] = in_burst ? 1 : 0;
        const double cont = in_burst ? cont_burst : cont_gap;
        if (uni(rng) >= cont) in_burst = !in_burst;
        ++i;
    }
    return pat;
}

void ErasurePattern::save(const std::string& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw DataError("cannot write erasure pattern: " + path);
    f << "# kind=" << pesqdnn::to_string(kind) << " fer=" << target_fer << " seed=" << seed
      << " frames=" << bits.size() << '\n';
    for (std::uint8_t b : bits) f << (b ? '1' : '0');
    f << '\n';
}

ErasurePattern ErasurePattern::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot read erasure pattern: " + path);
    std::string header, body;
    if (!std::getline(f, header) || header.empty() || header[0] != '#')
        throw IntegrityError("erasure sidecar missing header line: " + path);
    if (!std::getline(f, body)) throw IntegrityError("erasure sidecar missing bits: " + path);
    ErasurePattern pat;
    std::istringstream hs(header.substr(1));
    std::string tok;
    while (hs >> tok) {
        const auto eq = tok.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
        if (key == "kind") pat.kind = erasure_kind_from_string(val);
        else if (key == "fer") pat.target_fer = std::stod(val);
        else if (key == "seed") pat.seed = std::stoull(val);
    }
    pat.bits.reserve(body.size());
    for (char c : body) {
        if (c != '0' && c != '1')
            throw IntegrityError("erasure sidecar has non-binary character: " + path);
        pat.bits.push_back(c == '1' ? 1 : 0);
    }
    return pat;
}

// ---------------------------------------------------------------------------
// synthetic dataset
// ---------------------------------------------------------------------------

double synth_pesq_target(double fer, double snr_db, double tilt) {
    const double snr_term = std::isinf(snr_db) ? 0.0 : 2.0 * std::pow(10.0, -snr_db / 20.0);
    const double t = 1.04 + 3.6 * std::exp(-(4.0 * fer + snr_term + 0.3 * tilt));
    return std::min(std::max(t, 1.04), 4.64);
}

namespace {

// Filtered noise with a syllable-rate envelope; a stand-in speech signal.
std::vector<double> synth_voice(std::mt19937_64& rng, std::size_t samples, double tilt) {
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const double syl_hz = 2.0 + 2.0 * uni(rng);
    const double phase = 2.0 * std::numbers::pi * uni(rng);
    const double lp = 0.3 + 0.6 * tilt; // one-pole coefficient, more tilt = darker
    std::vector<double> x(samples);
    double state = 0.0;
    for (std::size_t n = 0; n < samples; ++n) {
        state = (1.0 - lp) * gauss(rng) + lp * state;
        const double t = static_cast<double>(n) / 16000.0;
        const double env =
            0.05 + 0.95 * std::pow(0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * syl_hz * t +
                                                         phase)),
                                   1.5);
        x[n] = state * env;
    }
    return x;
}

void apply_erasures(std::vector<double>& x, const ErasurePattern& pat) {
    constexpr std::size_t kCodecFrame = 320; // 20 ms
    for (std::size_t f = 0; f < pat.bits.size(); ++f) {
        if (!pat.bits[f]) continue;
        const std::size_t lo = f * kCodecFrame;
        const std::size_t hi = std::min(x.size(), lo + kCodecFrame);
        for (std::size_t n = lo; n < hi; ++n) x[n] = 0.0;
    }
}

} // namespace

Manifest synth_dataset(const std::string& dir, const SynthDatasetConfig& cfg) {
    if (cfg.count == 0) throw ValidationError("synth_dataset: count must be >= 1");
    fs::create_directories(dir);
    std::mt19937_64 rng(cfg.seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    Manifest manifest;
    const double levels[3] = {-36.0, -26.0, -16.0};
    for (std::size_t i = 0; i < cfg.count; ++i) {
        const double seconds = cfg.min_seconds + (cfg.max_seconds - cfg.min_seconds) * uni(rng);
        const std::size_t samples = static_cast<std::size_t>(seconds * 16000.0);
        // degradation draws
        const double tilt = (i == 0) ? 0.0 : 0.8 * uni(rng); // keep one pristine endpoint
        double snr = std::numeric_limits<double>::infinity();
        const double usnr = uni(rng);
        if (i != 0 && usnr < 0.1) snr = 15.0;
        else if (i != 0 && usnr < 0.2) snr = 20.0;
        double fer = 0.0;
        ErasureKind kind = ErasureKind::None;
        const double ufer = uni(rng);
        if (i != 0 && ufer < 0.25) {
            fer = ufer < 0.125 ? 0.03 : 0.1;
            kind = uni(rng) < 0.5 ? ErasureKind::Random : ErasureKind::Burst;
        }
        const double level = levels[rng() % 3];
        const std::uint64_t utt_seed = rng();

        std::mt19937_64 vrng(utt_seed);
        std::vector<double> x = synth_voice(vrng, samples, tilt);
        x = adjust_level(x, level);
        if (!std::isinf(snr)) {
            std::mt19937_64 nrng(utt_seed + 1);
            std::normal_distribution<double> gauss(0.0, 0.01);
            std::vector<double> noise(samples);
            for (double& v : noise) v = gauss(nrng);
            x = mix_snr(x, noise, snr, utt_seed + 2);
        }
        if (fer > 0.0) {
            const std::size_t frames = (samples + 319) / 320;
            ErasurePattern pat = kind == ErasureKind::Random
                                     ? gen_erasures_random(frames, fer, utt_seed + 3)
                                     : gen_erasures_burst(frames, fer, 4.0, utt_seed + 3);
            apply_erasures(x, pat);
        }

        char idbuf[32];
        std::snprintf(idbuf, sizeof(idbuf), "synth%04zu", i);
        UtteranceRecord rec;
        rec.id = idbuf;
        rec.audio_path = (fs::path(dir) / (rec.id + ".wav")).string();
        rec.speaker = "synthetic";
        rec.language = "none";
        // deterministic 3/1/1 rotation; i == 0 stays in train as the clean anchor
        rec.split = (i % 5 == 3) ? "dev" : (i % 5 == 4) ? "test" : "train";
        rec.level_dbov = level;
        rec.snr_db = snr;
        rec.codec = "none";
        rec.fer = fer;
        rec.erasure_kind = kind;
        rec.pesq_target = synth_pesq_target(fer, snr, tilt);
        rec.notes["level_measure"] = "simplified-active-rms";
        rec.notes["synthetic"] = "1";

        WavData wav;
        wav.sample_rate = 16000;
        wav.samples = std::move(x);
        write_wav(rec.audio_path, wav);
        manifest.records.push_back(std::move(rec));
    }
    manifest.save((fs::path(dir) / "manifest.jsonl").string());
    return manifest;
}

// ---------------------------------------------------------------------------
// external tool orchestration
// ---------------------------------------------------------------------------

std::string file_hash(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot hash missing file: " + path);
    std::uint64_t h = 1469598103934665603ull;
    char buf[4096];
    while (f.read(buf, sizeof(buf)) || f.gcount() > 0) {
        for (std::streamsize i = 0; i < f.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 1099511628211ull;
        }
        if (!f) break;
    }
    char out[17];
    std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(h));
    return out;
}

namespace {

const std::vector<std::string> kPlaceholders = {"in", "out", "bitrate", "pattern", "fer"};

void check_template(const std::string& name, const std::string& tmpl) {
    if (tmpl.empty()) return;
    bool has_in = false, has_out = false;
    for (std::size_t i = 0; i < tmpl.size(); ++i) {
        if (tmpl[i] != '{') continue;
        const auto end = tmpl.find('}', i);
        if (end == std::string::npos)
            throw ValidationError(name + " template has unterminated placeholder");
        const std::string key = tmpl.substr(i + 1, end - i - 1);
        if (std::find(kPlaceholders.begin(), kPlaceholders.end(), key) == kPlaceholders.end())
            throw ValidationError(name + " template has unknown placeholder {" + key + "}");
        if (key == "in") has_in = true;
        if (key == "out") has_out = true;
        i = end;
    }
    if (!has_in || !has_out)
        throw ValidationError(name + " template must use both {in} and {out}");
}

std::string substitute(std::string tmpl,
                       const std::vector<std::pair<std::string, std::string>>& vars) {
    for (const auto& [key, val] : vars) {
        const std::string tok = "{" + key + "}";
        std::size_t pos = 0;
        while ((pos = tmpl.find(tok, pos)) != std::string::npos) {
            tmpl.replace(pos, tok.size(), val);
            pos += val.size();
        }
    }
    return tmpl;
}

int run_stage(const std::string& stage, const std::string& cmd, const std::string& out_path,
              ExternalChainResult& result) {
    const int rc = std::system(cmd.c_str());
    const int exit_code = rc < 0 ? rc : (rc & 0xff00) >> 8;
    result.stage_exit_codes.emplace_back(stage, exit_code);
    if (rc != 0)
        throw ExternalToolError("stage '" + stage + "' failed (exit " +
                                std::to_string(exit_code) + "): " + cmd);
    if (!fs::exists(out_path))
        throw ExternalToolError("stage '" + stage + "' produced no output: " + out_path);
    result.output_hashes.emplace_back(stage, file_hash(out_path));
    return exit_code;
}

} // namespace

void validate_chain_templates(const ExternalChainConfig& cfg, bool with_eid) {
    check_template("encode", cfg.encode);
    check_template("decode", cfg.decode);
    if (with_eid) {
        if (cfg.eid.empty()) throw ValidationError("record needs EID but no eid template given");
        check_template("eid", cfg.eid);
    }
    if (!cfg.pesq.empty()) check_template("pesq", cfg.pesq);
    if (cfg.encode.empty() || cfg.decode.empty())
        throw ValidationError("encode and decode templates are required");
}

ExternalChainResult run_external_chain(const UtteranceRecord& record,
                                       const ExternalChainConfig& cfg,
                                       const std::string& erasure_sidecar) {
    const bool with_eid = record.fer > 0.0;
    validate_chain_templates(cfg, with_eid);
    const fs::path work = cfg.workdir.empty() ? fs::temp_directory_path() : fs::path(cfg.workdir);
    fs::create_directories(work);

    ExternalChainResult result;
    auto vars = [&](const std::string& in, const std::string& out) {
        std::vector<std::pair<std::string, std::string>> v = {
            {"in", in},
            {"out", out},
            {"bitrate", std::to_string(record.bitrate_kbps)},
            {"pattern", erasure_sidecar},
            {"fer", std::to_string(record.fer)},
        };
        return v;
    };

    std::string cur = record.audio_path;
    const std::string base = (work / record.id).string();

    // pass 1: ENC -> (EID) -> DEC
    std::string enc_out = base + ".enc";
    run_stage("encode", substitute(cfg.encode, vars(cur, enc_out)), enc_out, result);
    cur = enc_out;
    if (with_eid) {
        std::string eid_out = base + ".eid";
        run_stage("eid", substitute(cfg.eid, vars(cur, eid_out)), eid_out, result);
        cur = eid_out;
    }
    std::string dec_out = base + ".dec.wav";
    run_stage("decode", substitute(cfg.decode, vars(cur, dec_out)), dec_out, result);
    cur = dec_out;

    // tandem: DEC output re-encoded and decoded by the second codec hook
    if (!record.tandem.empty()) {
        std::string enc2 = base + ".tdm.enc";
        run_stage("tandem-encode", substitute(cfg.encode, vars(cur, enc2)), enc2, result);
        std::string dec2 = base + ".tdm.wav";
        run_stage("tandem-decode", substitute(cfg.decode, vars(enc2, dec2)), dec2, result);
        cur = dec2;
    }
    result.coded_audio_path = cur;

    if (!cfg.pesq.empty()) {
        std::string pesq_out = base + ".pesq.txt";
        run_stage("pesq", substitute(cfg.pesq, vars(cur, pesq_out)), pesq_out, result);
        std::ifstream pf(pesq_out);
        double score;
        if (pf >> score) result.reference_pesq = score;
    }
    return result;
}

} // namespace pesqdnn
