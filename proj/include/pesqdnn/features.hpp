#pragma once

#include <complex>
#include <cstdint>
#include <string>
#include <vector>

#include "pesqdnn/errors.hpp"

namespace pesqdnn {

inline constexpr std::size_t kSampleRate = 16000;
inline constexpr std::size_t kFrameLen = 512;
inline constexpr std::size_t kHop = 256;
inline constexpr std::size_t kBins = kFrameLen / 2 + 1; // 257
inline constexpr std::size_t kInputBins = 260;          // K_in, top 3 bins zero-padded
inline constexpr std::size_t kBlockFrames = 16;         // W
inline constexpr double kNormStdFloor = 1e-8;

enum class SpectrumMode { Amplitude, Complex };

inline std::size_t channels_for(SpectrumMode m) {
    return m == SpectrumMode::Amplitude ? 1u : 2u;
}

// L_u x 257 complex STFT frames (periodic Hann, 50% overlap).
struct Spectrogram {
    std::size_t frames = 0;
    std::vector<std::complex<double>> data; // frames * kBins, frame-major

    std::complex<double> at(std::size_t l, std::size_t k) const {
        return data[l * kBins + k];
    }
};

Spectrogram stft(const std::vector<double>& waveform);

// Per-frame features: frames x K_in x C, row-major (l, k, c).
struct FeatureMatrix {
    std::size_t frames = 0;
    std::size_t channels = 1;
    std::vector<double> data;

    double& at(std::size_t l, std::size_t k, std::size_t c) {
        return data[(l * kInputBins + k) * channels + c];
    }
    double at(std::size_t l, std::size_t k, std::size_t c) const {
        return data[(l * kInputBins + k) * channels + c];
    }
};

FeatureMatrix to_channels(const Spectrogram& spec, SpectrumMode mode);

// Per-(bin, channel) normalization statistics, training split only.
struct NormStats {
    std::size_t channels = 1;
    std::vector<double> mean;   // kInputBins * channels
    std::vector<double> stddev; // floored at kNormStdFloor
    std::size_t source_utterance_count = 0;

    std::string to_json() const;
    static NormStats from_json(const std::string& text);
    void save(const std::string& path) const;
    static NormStats load(const std::string& path);
};

NormStats compute_norm_stats(const std::vector<const FeatureMatrix*>& training);

// Normalize a feature matrix in place with training statistics.
void normalize(FeatureMatrix& features, const NormStats& stats);

// B_u blocks of K_in x W x C, normalized, trailing remainder discarded.
struct FeatureBlockSequence {
    std::string utterance_id;
    std::size_t bins = kInputBins;
    std::size_t block_frames = kBlockFrames;
    std::size_t channels = 1;
    std::size_t block_count = 0;
    bool normalization_applied = false;
    std::vector<double> data; // block-major, each block [K][W][C] row-major

    std::size_t block_size() const { return bins * block_frames * channels; }
    const double* block(std::size_t b) const { return data.data() + b * block_size(); }

    void save(const std::string& path) const;
    static FeatureBlockSequence load(const std::string& path);
};

FeatureBlockSequence block(const FeatureMatrix& normalized_features,
                           const std::string& utterance_id);

// Full front-end for one utterance: stft -> channels -> normalize -> block.
FeatureBlockSequence featurize(const std::vector<double>& waveform, SpectrumMode mode,
                               const NormStats& stats, const std::string& utterance_id);

} // namespace pesqdnn
