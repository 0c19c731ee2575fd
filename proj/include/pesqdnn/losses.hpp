#pragma once

#include <optional>
#include <string>
#include <vector>

#include "pesqdnn/errors.hpp"
#include "pesqdnn/model.hpp"
#include "pesqdnn/tensor.hpp"

namespace pesqdnn {

enum class LossKind { Utterance, FLE, BLE };

std::string to_string(LossKind k);
LossKind loss_from_string(const std::string& s);

struct LossConfig {
    LossKind kind = LossKind::Utterance;
    double pesq_max = kPesqMax; // 4.64, fixed
    double alpha_base = 0.9;
    // Test hook: when set, overrides the alpha(pesq_u) weighting factor.
    std::optional<double> alpha_override;

    double effective_alpha(double pesq_u) const;
};

// Utterance-wise weighting factor alpha_base^{|pesq_u - pesq_max|}.
double alpha(double pesq_u, double alpha_base = 0.9, double pesq_max = kPesqMax);

// Scalar loss values (evaluation / oracles). q is B_u x N row-major.
double loss_utterance(double pesq_hat, double pesq_u);
double loss_fle(double pesq_hat, const std::vector<double>& q, std::size_t block_count,
                std::size_t frames_per_block, double pesq_u, const LossConfig& cfg);
double loss_ble(double pesq_hat, const std::vector<double>& q, std::size_t block_count,
                double pesq_u, const LossConfig& cfg);

// Differentiable loss on a forward result. q may be null for Utterance kind.
Tensor loss_tensor(Graph& g, const Tensor& pesq_hat, const Tensor& q, double pesq_u,
                   const LossConfig& cfg);

// Evaluation metrics.
double mae(const std::vector<double>& estimates, const std::vector<double>& targets);
double lcc(const std::vector<double>& estimates, const std::vector<double>& targets);

// One evaluated utterance joined to its condition metadata.
struct EvalRow {
    std::string id;
    double estimate = 0.0;
    double target = 0.0;
    // grouping keys
    std::string codec;
    double bitrate_kbps = 0.0;
    double fer = 0.0;
    double snr_db = 0.0; // +inf encoded as a large sentinel by the caller's key string
    std::string tandem;
};

struct ReportCell {
    std::string group;   // e.g. "codec=EVS"
    std::size_t count = 0;
    double mae = 0.0;
    bool lcc_defined = false;
    double lcc = 0.0;
};

struct ConditionReport {
    std::vector<ReportCell> cells; // per-group cells followed by the pooled Total

    std::string to_csv() const;
    std::string to_text() const;
};

ConditionReport condition_report(const std::vector<EvalRow>& rows);

} // namespace pesqdnn
