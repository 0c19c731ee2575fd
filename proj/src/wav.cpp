#include "pesqdnn/wav.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "pesqdnn/errors.hpp"

namespace pesqdnn {

namespace {

std::uint32_t rd_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
std::uint16_t rd_u16(const unsigned char* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}
void wr_u32(std::vector<unsigned char>& out, std::uint32_t v) {
    out.push_back(static_cast<unsigned char>(v & 0xff));
    out.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
    out.push_back(static_cast<unsigned char>((v >> 16) & 0xff));
    out.push_back(static_cast<unsigned char>((v >> 24) & 0xff));
}
void wr_u16(std::vector<unsigned char>& out, std::uint16_t v) {
    out.push_back(static_cast<unsigned char>(v & 0xff));
    out.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
}

} // namespace

WavData read_wav(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open WAV file: " + path);
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
    if (buf.size() < 44 || std::memcmp(buf.data(), "RIFF", 4) != 0 ||
        std::memcmp(buf.data() + 8, "WAVE", 4) != 0)
        throw DataError("not a RIFF/WAVE file: " + path);

    std::uint16_t format = 0, channels = 0, bits = 0;
    std::uint32_t rate = 0;
    std::size_t data_off = 0, data_len = 0;
    std::size_t pos = 12;
    while (pos + 8 <= buf.size()) {
        const std::uint32_t len = rd_u32(buf.data() + pos + 4);
        if (std::memcmp(buf.data() + pos, "fmt ", 4) == 0) {
            if (pos + 8 + 16 > buf.size()) throw DataError("truncated fmt chunk: " + path);
            const unsigned char* p = buf.data() + pos + 8;
            format = rd_u16(p);
            channels = rd_u16(p + 2);
            rate = rd_u32(p + 4);
            bits = rd_u16(p + 14);
        } else if (std::memcmp(buf.data() + pos, "data", 4) == 0) {
            data_off = pos + 8;
            data_len = std::min<std::size_t>(len, buf.size() - data_off);
        }
        pos += 8 + len + (len & 1);
    }
    if (channels != 1) throw DataError("WAV must be mono, got " + std::to_string(channels) +
                                       " channels: " + path);
    if (data_off == 0) throw DataError("WAV has no data chunk: " + path);

    WavData wav;
    wav.sample_rate = rate;
    const unsigned char* d = buf.data() + data_off;
    if (format == 1 && bits == 16) {
        wav.samples.resize(data_len / 2);
        for (std::size_t i = 0; i < wav.samples.size(); ++i) {
            const std::int16_t s = static_cast<std::int16_t>(rd_u16(d + 2 * i));
            wav.samples[i] = static_cast<double>(s) / 32768.0;
        }
    } else if (format == 3 && bits == 32) {
        wav.samples.resize(data_len / 4);
        for (std::size_t i = 0; i < wav.samples.size(); ++i) {
            std::uint32_t u = rd_u32(d + 4 * i);
            float v;
            std::memcpy(&v, &u, 4);
            wav.samples[i] = static_cast<double>(v);
        }
    } else {
        throw DataError("unsupported WAV format (need 16-bit PCM or 32-bit float): " + path);
    }
    return wav;
}

void write_wav(const std::string& path, const WavData& wav) {
    std::vector<unsigned char> out;
    const std::uint32_t nbytes = static_cast<std::uint32_t>(wav.samples.size() * 2);
    out.insert(out.end(), {'R', 'I', 'F', 'F'});
    wr_u32(out, 36 + nbytes);
    out.insert(out.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
    wr_u32(out, 16);
    wr_u16(out, 1); // PCM
    wr_u16(out, 1); // mono
    wr_u32(out, wav.sample_rate);
    wr_u32(out, wav.sample_rate * 2);
    wr_u16(out, 2);
    wr_u16(out, 16);
    out.insert(out.end(), {'d', 'a', 't', 'a'});
    wr_u32(out, nbytes);
    for (double s : wav.samples) {
        double v = std::round(s * 32768.0);
        v = std::clamp(v, -32768.0, 32767.0);
        wr_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(v)));
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot write WAV file: " + path);
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw DataError("short write to WAV file: " + path);
}

} // namespace pesqdnn
