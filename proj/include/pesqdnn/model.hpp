#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pesqdnn/features.hpp"
#include "pesqdnn/tensor.hpp"

namespace pesqdnn {

// PESQ range per ITU-T P.862.2; the gate maps the real line into it.
inline constexpr double kPesqMin = 1.04;
inline constexpr double kPesqMax = 4.64;
inline constexpr double kGateScale = kPesqMax - kPesqMin; // 3.6
// Initial bias of the gated score layers. gate(1.35) ~= 3.9, near the center
// of mass of coded-speech quality targets; a zero bias would start every
// score at 2.84 and leave high-quality targets deep in the sigmoid tail,
// where gradients are small and early training is slow.
inline constexpr double kOutputBiasInit = 1.35;

enum class Embedding { STAT, FLE, BLE };
enum class Pooling { AV, AT };

std::string to_string(Embedding e);
std::string to_string(Pooling p);
Embedding embedding_from_string(const std::string& s);
Pooling pooling_from_string(const std::string& s);

enum class PoolKind { None, P2x1, P2x2 };

struct ConvSpec {
    std::size_t kh = 3;
    std::size_t kw = 3;
    std::size_t maps = 32;
    PoolKind pool = PoolKind::None;
};

struct ModelConfig {
    std::size_t input_bins = kInputBins;     // K_in
    std::size_t block_frames = kBlockFrames; // W
    std::size_t input_channels = 2;          // C
    std::vector<ConvSpec> encoder = {
        {3, 3, 32, PoolKind::P2x1},
        {3, 3, 32, PoolKind::P2x2},
        {3, 3, 64, PoolKind::None},
    };
    std::vector<std::size_t> multiwidth_widths = {1, 2, 4, 8};
    std::size_t multiwidth_maps = 64;
    std::size_t blstm_hidden = 128;
    Embedding embedding = Embedding::BLE;
    Pooling pooling = Pooling::AV;
    std::vector<std::size_t> head_hidden = {128};        // FLE/BLE per-block head
    std::vector<std::size_t> stat_head_hidden = {128, 64}; // STAT head FC sizes
    std::size_t attention_hidden = 64;
    double leaky_slope = 0.01;
    std::uint64_t rng_seed = 42;

    // N: per-block score width (W for FLE, 1 for BLE, none for STAT).
    std::size_t head_out() const { return embedding == Embedding::FLE ? block_frames : 1; }
    // frequency / time extents after the encoder pools
    std::size_t pooled_bins() const;
    std::size_t pooled_frames() const;
    // fixed encoder vector length fed to the BLSTM
    std::size_t encoder_dim() const { return multiwidth_widths.size() * multiwidth_maps; }

    void validate() const;

    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);
};

// Small toy configurations used by tests and the acceptance suite.
ModelConfig toy_config(std::size_t input_bins = 20, std::size_t block_frames = 8,
                       std::size_t input_channels = 1);
// Default topology with all feature-map counts halved.
ModelConfig halved_config(std::size_t input_channels = 1);

struct ModelWeights {
    // name -> tensor, in a stable order; names are the checkpoint directory keys
    std::vector<std::pair<std::string, Tensor>> params;

    Tensor find(const std::string& name) const;
    void set_requires_grad(bool rg);
    void zero_grads();
    std::size_t parameter_count() const;
    ModelWeights clone() const;
};

ModelWeights init_weights(const ModelConfig& cfg);

struct UtterancePrediction {
    double pesq_hat = 0.0;
    std::vector<std::vector<double>> block_scores; // B_u x N (FLE/BLE only)
    std::vector<double> attention;                 // B_u (AT only)
};

// Forward pass as graph tensors; used for both inference and training.
struct ForwardResult {
    Tensor pesq_hat;  // scalar
    Tensor q;         // [B_u x N] or nullptr (STAT)
    Tensor attention; // [B_u] or nullptr (AV / STAT)
};

// blocks: pointer to B contiguous [K x W x C] blocks (FeatureBlockSequence data)
ForwardResult forward(Graph& g, const double* blocks, std::size_t block_count,
                      const ModelWeights& w, const ModelConfig& cfg);

// One LSTM direction over [1 x D] encoding rows, gate order [i, f, g, o];
// weights under "<name>.wx/.wh/.b". Exposed for recurrence oracle tests.
std::vector<Tensor> lstm_pass(Graph& g, const std::vector<Tensor>& steps,
                              const ModelWeights& w, const std::string& name,
                              std::size_t hidden, bool reverse);

UtterancePrediction predict(const FeatureBlockSequence& blocks, const ModelWeights& w,
                            const ModelConfig& cfg, Precision prec = Precision::f64);

// Eq.-style gate: kGateScale * sigmoid(x) + kPesqMin.
double gate_value(double x);

} // namespace pesqdnn
