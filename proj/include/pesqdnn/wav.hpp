#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace pesqdnn {

// Mono RIFF/WAV. Readers accept 16-bit PCM (scaled by 1/32768) and 32-bit
// float; the writer emits 16-bit PCM with saturation.
struct WavData {
    std::uint32_t sample_rate = 16000;
    std::vector<double> samples;
};

WavData read_wav(const std::string& path);
void write_wav(const std::string& path, const WavData& wav);

} // namespace pesqdnn
