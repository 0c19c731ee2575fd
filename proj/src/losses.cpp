#include "pesqdnn/losses.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

namespace pesqdnn {

std::string to_string(LossKind k) {
    switch (k) {
    case LossKind::Utterance: return "utt";
    case LossKind::FLE: return "fle";
    case LossKind::BLE: return "ble";
    }
    return "?";
}

LossKind loss_from_string(const std::string& s) {
    if (s == "utt") return LossKind::Utterance;
    if (s == "fle") return LossKind::FLE;
    if (s == "ble") return LossKind::BLE;
    throw ValidationError("unknown loss kind '" + s + "' (expected utt|fle|ble)");
}

double alpha(double pesq_u, double alpha_base, double pesq_max) {
    if (pesq_u < kPesqMin || pesq_u > kPesqMax)
        throw ValidationError("PESQ target " + std::to_string(pesq_u) + " outside [" +
                              std::to_string(kPesqMin) + ", " + std::to_string(kPesqMax) + "]");
    return std::pow(alpha_base, std::abs(pesq_u - pesq_max));
}

double LossConfig::effective_alpha(double pesq_u) const {
    if (alpha_override) return *alpha_override;
    return alpha(pesq_u, alpha_base, pesq_max);
}

double loss_utterance(double pesq_hat, double pesq_u) {
    const double d = pesq_hat - pesq_u;
    return d * d;
}

double loss_fle(double pesq_hat, const std::vector<double>& q, std::size_t block_count,
                std::size_t frames_per_block, double pesq_u, const LossConfig& cfg) {
    if (block_count == 0 || frames_per_block == 0 ||
        q.size() != block_count * frames_per_block)
        throw DimensionError("loss_fle: q size " + std::to_string(q.size()) +
                             " does not match " + std::to_string(block_count) + "x" +
                             std::to_string(frames_per_block));
    const double a = cfg.effective_alpha(pesq_u);
    if (a == 0.0) return loss_utterance(pesq_hat, pesq_u);
    double sum = 0.0;
    for (double v : q) {
        const double d = v - pesq_u;
        sum += d * d;
    }
    return loss_utterance(pesq_hat, pesq_u) +
           a / static_cast<double>(block_count * frames_per_block) * sum;
}

double loss_ble(double pesq_hat, const std::vector<double>& q, std::size_t block_count,
                double pesq_u, const LossConfig& cfg) {
    return loss_fle(pesq_hat, q, block_count, 1, pesq_u, cfg);
}

Tensor loss_tensor(Graph& g, const Tensor& pesq_hat, const Tensor& q, double pesq_u,
                   const LossConfig& cfg) {
    Tensor err = g.add_const(pesq_hat, -pesq_u);
    Tensor loss = g.mul(err, err);
    if (cfg.kind == LossKind::Utterance) return loss;
    if (!q) throw ContractError("FLE/BLE loss needs per-block scores");
    const double a = cfg.effective_alpha(pesq_u);
    if (a == 0.0) return loss;
    Tensor qerr = g.add_const(q, -pesq_u);
    Tensor term = g.scale(g.mean_all(g.mul(qerr, qerr)), a);
    return g.add(loss, term);
}

double mae(const std::vector<double>& estimates, const std::vector<double>& targets) {
    if (estimates.empty() || estimates.size() != targets.size())
        throw ValidationError("mae: need equal nonzero lengths, got " +
                              std::to_string(estimates.size()) + " and " +
                              std::to_string(targets.size()));
    double s = 0.0;
    for (std::size_t i = 0; i < estimates.size(); ++i) s += std::abs(estimates[i] - targets[i]);
    return s / static_cast<double>(estimates.size());
}

double lcc(const std::vector<double>& estimates, const std::vector<double>& targets) {
    if (estimates.size() != targets.size() || estimates.size() < 2)
        throw ValidationError("lcc: need equal lengths >= 2");
    const double n = static_cast<double>(estimates.size());
    double me = 0.0, mt = 0.0;
    for (std::size_t i = 0; i < estimates.size(); ++i) {
        me += estimates[i];
        mt += targets[i];
    }
    me /= n;
    mt /= n;
    double num = 0.0, de = 0.0, dt = 0.0;
    for (std::size_t i = 0; i < estimates.size(); ++i) {
        const double a = estimates[i] - me;
        const double b = targets[i] - mt;
        num += a * b;
        de += a * a;
        dt += b * b;
    }
    if (de == 0.0 || dt == 0.0)
        throw ValidationError("lcc undefined: constant input vector");
    return num / (std::sqrt(de) * std::sqrt(dt));
}

// ---------------------------------------------------------------------------
// condition report
// ---------------------------------------------------------------------------

namespace {

ReportCell make_cell(const std::string& group, const std::vector<const EvalRow*>& rows) {
    ReportCell cell;
    cell.group = group;
    cell.count = rows.size();
    std::vector<double> est, tgt;
    est.reserve(rows.size());
    tgt.reserve(rows.size());
    for (const EvalRow* r : rows) {
        est.push_back(r->estimate);
        tgt.push_back(r->target);
    }
    cell.mae = mae(est, tgt);
    if (rows.size() >= 2) {
        try {
            cell.lcc = lcc(est, tgt);
            cell.lcc_defined = true;
        } catch (const ValidationError&) {
            cell.lcc_defined = false;
        }
    }
    return cell;
}

std::string fmt_num(double v) {
    std::ostringstream os;
    os.precision(6);
    os << v;
    return os.str();
}

} // namespace

ConditionReport condition_report(const std::vector<EvalRow>& rows) {
    if (rows.empty()) throw DataError("condition_report: no rows");
    ConditionReport rep;
    // one grouping pass per condition axis; std::map keeps groups ordered
    auto group_by = [&](const std::string& axis,
                        auto key_fn) {
        std::map<std::string, std::vector<const EvalRow*>> groups;
        for (const EvalRow& r : rows) groups[key_fn(r)].push_back(&r);
        for (const auto& [key, grp] : groups)
            rep.cells.push_back(make_cell(axis + "=" + key, grp));
    };
    group_by("codec", [](const EvalRow& r) { return r.codec.empty() ? "none" : r.codec; });
    group_by("bitrate", [](const EvalRow& r) { return fmt_num(r.bitrate_kbps); });
    group_by("fer", [](const EvalRow& r) { return fmt_num(r.fer); });
    group_by("snr", [](const EvalRow& r) {
        return std::isinf(r.snr_db) ? std::string("inf") : fmt_num(r.snr_db);
    });
    group_by("tandem", [](const EvalRow& r) { return r.tandem.empty() ? "none" : r.tandem; });
    // pooled over all rows, not an average of per-group metrics
    std::vector<const EvalRow*> all;
    all.reserve(rows.size());
    for (const EvalRow& r : rows) all.push_back(&r);
    rep.cells.push_back(make_cell("Total", all));
    return rep;
}

std::string ConditionReport::to_csv() const {
    std::ostringstream os;
    os << "group,count,mae,lcc\n";
    for (const auto& c : cells) {
        os << c.group << ',' << c.count << ',' << fmt_num(c.mae) << ',';
        if (c.lcc_defined) os << fmt_num(c.lcc);
        else os << "undefined";
        os << '\n';
    }
    return os.str();
}

std::string ConditionReport::to_text() const {
    std::size_t w = 12;
    for (const auto& c : cells) w = std::max(w, c.group.size() + 2);
    std::ostringstream os;
    os << std::left;
    os.width(static_cast<std::streamsize>(w));
    os << "group";
    os << "  count      mae      lcc\n";
    for (const auto& c : cells) {
        os.width(static_cast<std::streamsize>(w));
        os << c.group;
        char buf[64];
        std::snprintf(buf, sizeof(buf), "  %5zu  %7.4f  ", c.count, c.mae);
        os << buf;
        if (c.lcc_defined) {
            std::snprintf(buf, sizeof(buf), "%7.4f", c.lcc);
            os << buf;
        } else {
            os << "   n/a ";
        }
        os << '\n';
    }
    return os.str();
}

} // namespace pesqdnn
