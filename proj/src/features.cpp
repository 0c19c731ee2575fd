#include "pesqdnn/features.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "json.hpp"

namespace pesqdnn {

namespace {

// Iterative radix-2 FFT, in place. n must be a power of two.
void fft(std::vector<std::complex<double>>& a) {
    const std::size_t n = a.size();
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = -2.0 * std::numbers::pi / static_cast<double>(len);
        const std::complex<double> wl(std::cos(ang), std::sin(ang));
        for (std::size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (std::size_t j = 0; j < len / 2; ++j) {
                const std::complex<double> u = a[i + j];
                const std::complex<double> v = a[i + j + len / 2] * w;
                a[i + j] = u + v;
                a[i + j + len / 2] = u - v;
                w *= wl;
            }
        }
    }
}

const std::vector<double>& hann_window() {
    static const std::vector<double> w = [] {
        std::vector<double> v(kFrameLen);
        for (std::size_t n = 0; n < kFrameLen; ++n)
            v[n] = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * static_cast<double>(n) /
                                         static_cast<double>(kFrameLen)));
        return v;
    }();
    return w;
}

} // namespace

Spectrogram stft(const std::vector<double>& waveform) {
    if (waveform.size() < kFrameLen)
        throw DataError("input too short for one STFT frame: " +
                        std::to_string(waveform.size()) + " < " + std::to_string(kFrameLen) +
                        " samples");
    const std::size_t L = (waveform.size() - kFrameLen) / kHop + 1;
    const auto& win = hann_window();
    Spectrogram spec;
    spec.frames = L;
    spec.data.resize(L * kBins);
    std::vector<std::complex<double>> buf(kFrameLen);
    for (std::size_t l = 0; l < L; ++l) {
        const double* x = waveform.data() + l * kHop;
        for (std::size_t n = 0; n < kFrameLen; ++n) buf[n] = {x[n] * win[n], 0.0};
        fft(buf);
        for (std::size_t k = 0; k < kBins; ++k) spec.data[l * kBins + k] = buf[k];
    }
    return spec;
}

FeatureMatrix to_channels(const Spectrogram& spec, SpectrumMode mode) {
    FeatureMatrix fm;
    fm.frames = spec.frames;
    fm.channels = channels_for(mode);
    fm.data.assign(fm.frames * kInputBins * fm.channels, 0.0);
    for (std::size_t l = 0; l < spec.frames; ++l) {
        for (std::size_t k = 0; k < kBins; ++k) {
            const std::complex<double> y = spec.at(l, k);
            if (mode == SpectrumMode::Amplitude) {
                fm.at(l, k, 0) = std::abs(y);
            } else {
                fm.at(l, k, 0) = y.real();
                fm.at(l, k, 1) = y.imag();
            }
        }
        // bins kBins..kInputBins-1 stay zero
    }
    return fm;
}

NormStats compute_norm_stats(const std::vector<const FeatureMatrix*>& training) {
    if (training.empty()) throw DataError("compute_norm_stats: empty training set");
    const std::size_t C = training.front()->channels;
    const std::size_t n = kInputBins * C;
    NormStats st;
    st.channels = C;
    st.mean.assign(n, 0.0);
    st.stddev.assign(n, 0.0);
    st.source_utterance_count = training.size();
    std::size_t total_frames = 0;
    for (const FeatureMatrix* fm : training) {
        if (fm->channels != C)
            throw DimensionError("compute_norm_stats: mixed channel counts");
        total_frames += fm->frames;
        for (std::size_t l = 0; l < fm->frames; ++l)
            for (std::size_t i = 0; i < n; ++i)
                st.mean[i] += fm->data[l * n + i];
    }
    if (total_frames == 0) throw DataError("compute_norm_stats: zero frames");
    for (double& m : st.mean) m /= static_cast<double>(total_frames);
    for (const FeatureMatrix* fm : training)
        for (std::size_t l = 0; l < fm->frames; ++l)
            for (std::size_t i = 0; i < n; ++i) {
                const double d = fm->data[l * n + i] - st.mean[i];
                st.stddev[i] += d * d;
            }
    for (double& s : st.stddev)
        s = std::max(std::sqrt(s / static_cast<double>(total_frames)), kNormStdFloor);
    return st;
}

void normalize(FeatureMatrix& features, const NormStats& stats) {
    if (features.channels != stats.channels)
        throw DimensionError("normalize: feature channels " +
                             std::to_string(features.channels) + " vs stats channels " +
                             std::to_string(stats.channels));
    const std::size_t n = kInputBins * features.channels;
    for (std::size_t l = 0; l < features.frames; ++l)
        for (std::size_t i = 0; i < n; ++i) {
            double& v = features.data[l * n + i];
            v = (v - stats.mean[i]) / stats.stddev[i];
        }
}

FeatureBlockSequence block(const FeatureMatrix& f, const std::string& utterance_id) {
    if (f.frames < kBlockFrames)
        throw DataError("utterance '" + utterance_id + "' too short to block: " +
                        std::to_string(f.frames) + " < " + std::to_string(kBlockFrames) +
                        " frames");
    FeatureBlockSequence seq;
    seq.utterance_id = utterance_id;
    seq.channels = f.channels;
    seq.block_count = f.frames / kBlockFrames;
    seq.data.resize(seq.block_count * seq.block_size());
    const std::size_t W = kBlockFrames, C = f.channels;
    for (std::size_t b = 0; b < seq.block_count; ++b) {
        double* blk = seq.data.data() + b * seq.block_size();
        for (std::size_t k = 0; k < kInputBins; ++k)
            for (std::size_t w = 0; w < W; ++w)
                for (std::size_t c = 0; c < C; ++c)
                    blk[(k * W + w) * C + c] = f.at(b * W + w, k, c);
    }
    return seq;
}

FeatureBlockSequence featurize(const std::vector<double>& waveform, SpectrumMode mode,
                               const NormStats& stats, const std::string& utterance_id) {
    FeatureMatrix fm = to_channels(stft(waveform), mode);
    normalize(fm, stats);
    FeatureBlockSequence seq = block(fm, utterance_id);
    seq.normalization_applied = true;
    return seq;
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

std::string NormStats::to_json() const {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["channels"] = channels;
    j["bins"] = kInputBins;
    j["source_utterance_count"] = source_utterance_count;
    j["mean"] = mean;
    j["stddev"] = stddev;
    return j.dump(2);
}

NormStats NormStats::from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    if (!j.contains("schema_version") || j["schema_version"].get<int>() != 1)
        throw IntegrityError("unsupported NormStats schema version");
    NormStats st;
    st.channels = j.at("channels").get<std::size_t>();
    st.source_utterance_count = j.at("source_utterance_count").get<std::size_t>();
    st.mean = j.at("mean").get<std::vector<double>>();
    st.stddev = j.at("stddev").get<std::vector<double>>();
    const std::size_t n = kInputBins * st.channels;
    if (st.mean.size() != n || st.stddev.size() != n)
        throw IntegrityError("NormStats array size mismatch");
    return st;
}

void NormStats::save(const std::string& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw DataError("cannot write NormStats: " + path);
    f << to_json() << '\n';
}

NormStats NormStats::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot read NormStats: " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return from_json(text);
}

namespace {
constexpr char kFbsMagic[4] = {'P', 'D', 'F', 'B'};
constexpr std::uint32_t kFbsVersion = 1;

template <typename T>
void put(std::ofstream& f, T v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T get(std::ifstream& f) {
    T v{};
    f.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!f) throw IntegrityError("truncated feature block file");
    return v;
}
} // namespace

void FeatureBlockSequence::save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot write feature blocks: " + path);
    f.write(kFbsMagic, 4);
    put<std::uint32_t>(f, kFbsVersion);
    put<std::uint32_t>(f, static_cast<std::uint32_t>(bins));
    put<std::uint32_t>(f, static_cast<std::uint32_t>(block_frames));
    put<std::uint32_t>(f, static_cast<std::uint32_t>(channels));
    put<std::uint32_t>(f, static_cast<std::uint32_t>(block_count));
    put<std::uint8_t>(f, normalization_applied ? 1 : 0);
    put<std::uint32_t>(f, static_cast<std::uint32_t>(utterance_id.size()));
    f.write(utterance_id.data(), static_cast<std::streamsize>(utterance_id.size()));
    f.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!f) throw DataError("short write to feature block file: " + path);
}

FeatureBlockSequence FeatureBlockSequence::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot read feature blocks: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kFbsMagic, 4) != 0)
        throw IntegrityError("bad feature block magic: " + path);
    if (get<std::uint32_t>(f) != kFbsVersion)
        throw IntegrityError("unsupported feature block version: " + path);
    FeatureBlockSequence seq;
    seq.bins = get<std::uint32_t>(f);
    seq.block_frames = get<std::uint32_t>(f);
    seq.channels = get<std::uint32_t>(f);
    seq.block_count = get<std::uint32_t>(f);
    seq.normalization_applied = get<std::uint8_t>(f) != 0;
    const std::uint32_t idlen = get<std::uint32_t>(f);
    seq.utterance_id.resize(idlen);
    f.read(seq.utterance_id.data(), idlen);
    seq.data.resize(seq.block_count * seq.block_size());
    f.read(reinterpret_cast<char*>(seq.data.data()),
           static_cast<std::streamsize>(seq.data.size() * sizeof(double)));
    if (!f) throw IntegrityError("truncated feature block file: " + path);
    return seq;
}

} // namespace pesqdnn
