#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pesqdnn/errors.hpp"
#include "pesqdnn/wav.hpp"

namespace pesqdnn {

enum class ErasureKind { None, Random, Burst };

std::string to_string(ErasureKind k);
ErasureKind erasure_kind_from_string(const std::string& s);

// One coded-speech utterance plus its condition metadata.
struct UtteranceRecord {
    std::string id;
    std::string audio_path;
    std::string speaker;
    std::string language;
    std::string split; // train | dev | test
    double level_dbov = -26.0;
    double snr_db = std::numeric_limits<double>::infinity(); // +inf = clean
    std::string codec;    // AMR-WB | EVS | G.722 | none
    double bitrate_kbps = 0.0;
    double fer = 0.0;
    ErasureKind erasure_kind = ErasureKind::None;
    std::string tandem; // e.g. "G.722>EVS", empty = none
    std::optional<double> pesq_target;
    std::map<std::string, std::string> notes; // e.g. level-measure simplification tag

    void validate() const;
};

struct Manifest {
    std::vector<UtteranceRecord> records;

    void save(const std::string& path) const; // JSON-lines, schema-versioned
    static Manifest load(const std::string& path);
    const UtteranceRecord& find(const std::string& id) const;
};

// --- level / mixing --------------------------------------------------------

// Active-speech RMS: 16 ms frames, threshold 40 dB below the peak frame
// energy. Simplified stand-in for the P.56 active level measure.
double active_rms(const std::vector<double>& waveform);

// Scale so the active RMS hits target_dbov (0 dBov = RMS 1.0 full-scale).
std::vector<double> adjust_level(const std::vector<double>& waveform, double target_dbov);

// y = s + g*d with g set from the active-speech/noise RMS ratio. Noise shorter
// than speech is tiled with a seeded circular offset.
std::vector<double> mix_snr(const std::vector<double>& speech,
                            const std::vector<double>& noise, double snr_db,
                            std::uint64_t seed = 0);

// 4th-order Butterworth high-pass at 50 Hz (MSIN stand-in for dataset prep).
std::vector<double> highpass_50hz(const std::vector<double>& waveform);

// --- erasure patterns ------------------------------------------------------

struct ErasurePattern {
    std::vector<std::uint8_t> bits; // 1 = frame lost
    double target_fer = 0.0;
    ErasureKind kind = ErasureKind::None;
    std::uint64_t seed = 0;
    double gamma = 0.0;          // Gilbert burstiness (Random kind)
    double mean_burst_len = 1.0; // Bellcore mean burst length (Burst kind)

    double empirical_rate() const;
    void save(const std::string& path) const; // '0'/'1' sidecar with header line
    static ErasurePattern load(const std::string& path);
};

// Gilbert two-state chain, loss probability 1 in the bad state. gamma = 0
// degenerates to i.i.d. Bernoulli(fer). Transition rates: p = fer*(1-gamma),
// q = (1-fer)*(1-gamma), stationary loss p/(p+q) = fer.
ErasurePattern gen_erasures_random(std::size_t frame_count, double fer, std::uint64_t seed,
                                   double gamma = 0.0);
// Solved Gilbert rates, exposed for the stationarity identity check.
void gilbert_rates(double fer, double gamma, double& p, double& q);

// Bellcore-style renewal process: geometric burst lengths with the given
// mean, geometric gaps sized so the expected rate hits fer.
ErasurePattern gen_erasures_burst(std::size_t frame_count, double fer,
                                  double mean_burst_len, std::uint64_t seed);

// --- synthetic desk-scale dataset ------------------------------------------

struct SynthDatasetConfig {
    std::size_t count = 20;
    std::uint64_t seed = 7;
    double min_seconds = 2.0;
    double max_seconds = 8.0;
};

// Writes WAVs plus a manifest with deterministic pseudo-PESQ targets.
// Returns the manifest (also saved to <dir>/manifest.jsonl).
Manifest synth_dataset(const std::string& dir, const SynthDatasetConfig& cfg);

// The documented degradation -> pseudo-PESQ mapping used by synth_dataset:
// 1.04 + 3.6 * exp(-(4*fer + snr_term + 0.3*tilt)), snr_term = 0 for clean.
double synth_pesq_target(double fer, double snr_db, double tilt);

// --- external tool orchestration -------------------------------------------

// Command templates with {in}/{out}/{bitrate}/{pattern} placeholders for the
// ENC / DEC / EID / PESQ hook stages. Codecs and PESQ are external binaries;
// this kit only sequences them.
struct ExternalChainConfig {
    std::string encode;  // required for coded records
    std::string decode;
    std::string eid;     // optional; applied between ENC and DEC
    std::string pesq;    // optional reference-PESQ hook
    std::string workdir; // intermediate files
    bool convert_16to14 = false; // informational flag slot recorded in results
};

struct ExternalChainResult {
    std::string coded_audio_path;
    std::optional<double> reference_pesq;
    std::vector<std::pair<std::string, int>> stage_exit_codes;
    std::vector<std::pair<std::string, std::string>> output_hashes; // stage -> fnv1a64 hex
};

// Validates placeholder coverage (dry run) without executing anything.
void validate_chain_templates(const ExternalChainConfig& cfg, bool with_eid);

ExternalChainResult run_external_chain(const UtteranceRecord& record,
                                       const ExternalChainConfig& cfg,
                                       const std::string& erasure_sidecar = "");

// FNV-1a 64-bit of a file's contents, hex-encoded.
std::string file_hash(const std::string& path);

} // namespace pesqdnn
