#include "fastslow/trainer.hpp"

#include <charconv>
#include <cmath>

#include "fastslow/fileio.hpp"

namespace fastslow {

double lr_at_step(const OptimConfig& cfg, int step) {
    if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
        return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
    if (cfg.total_steps <= cfg.warmup_steps) return cfg.lr;
    double progress = static_cast<double>(step - cfg.warmup_steps) /
                      static_cast<double>(cfg.total_steps - cfg.warmup_steps);
    if (progress > 1.0) progress = 1.0;
    return cfg.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

void Adam::step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
                const OptimConfig& cfg, int step_index) {
    if (params.size() != grads.size())
        throw UsageError("Adam::step: parameter/gradient count mismatch");
    if (m_.empty()) {
        for (const Tensor* p : params) {
            m_.push_back(Tensor::zeros(p->shape));
            v_.push_back(Tensor::zeros(p->shape));
        }
    }
    if (m_.size() != params.size())
        throw UsageError("Adam::step: parameter list changed between steps");

    double clip_scale = 1.0;
    if (cfg.grad_clip > 0.0) {
        double sq = 0.0;
        for (const Tensor* g : grads)
            for (double v : g->data) sq += v * v;
        double norm = std::sqrt(sq);
        if (norm > cfg.grad_clip) clip_scale = cfg.grad_clip / norm;
    }

    double t = static_cast<double>(step_index + 1);
    double bc1 = 1.0 - std::pow(cfg.beta1, t);
    double bc2 = 1.0 - std::pow(cfg.beta2, t);
    double lr_t = lr_at_step(cfg, step_index);

    for (size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        const Tensor& g = *grads[i];
        if (p.shape != g.shape || p.shape != m_[i].shape)
            throw UsageError("Adam::step: shape mismatch at parameter " + std::to_string(i));
        for (size_t e = 0; e < p.data.size(); ++e) {
            double gv = g.data[e] * clip_scale;
            m_[i].data[e] = cfg.beta1 * m_[i].data[e] + (1.0 - cfg.beta1) * gv;
            v_[i].data[e] = cfg.beta2 * v_[i].data[e] + (1.0 - cfg.beta2) * gv * gv;
            double mhat = m_[i].data[e] / bc1;
            double vhat = v_[i].data[e] / bc2;
            p.data[e] -= lr_t * mhat / (std::sqrt(vhat) + cfg.eps);
            if (!std::isfinite(p.data[e]))
                throw NumericError("Adam::step: non-finite parameter after update");
        }
    }
}

CsvLog::CsvLog(std::vector<std::string> columns) : columns_(std::move(columns)) {
    if (columns_.empty()) throw UsageError("CsvLog: no columns");
}

void CsvLog::add_row(const std::vector<std::string>& cells) {
    if (cells.size() != columns_.size())
        throw UsageError("CsvLog: row has " + std::to_string(cells.size()) + " cells, want " +
                         std::to_string(columns_.size()));
    rows_.push_back(cells);
}

std::string CsvLog::dump() const {
    std::string out;
    for (size_t i = 0; i < columns_.size(); ++i) {
        if (i) out += ',';
        out += columns_[i];
    }
    out += '\n';
    for (const auto& row : rows_) {
        for (size_t i = 0; i < row.size(); ++i) {
            if (i) out += ',';
            out += row[i];
        }
        out += '\n';
    }
    return out;
}

void CsvLog::write(const std::string& path) const { atomic_write_text(path, dump()); }

std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

std::vector<int> non_decreasing_windows(const std::vector<double>& losses, int window) {
    std::vector<int> bad;
    if (window <= 0) throw UsageError("non_decreasing_windows: window must be positive");
    int full = static_cast<int>(losses.size()) / window;
    double prev = 0.0;
    for (int w = 0; w < full; ++w) {
        double mean = 0.0;
        for (int i = 0; i < window; ++i) mean += losses[static_cast<size_t>(w * window + i)];
        mean /= window;
        if (w > 0 && mean >= prev) bad.push_back(w);
        prev = mean;
    }
    return bad;
}

}  // namespace fastslow
