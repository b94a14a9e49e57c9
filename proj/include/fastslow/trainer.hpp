#pragma once

#include <string>
#include <vector>

#include "fastslow/tensor.hpp"

namespace fastslow {

struct OptimConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int warmup_steps = 0;
    int total_steps = 0;    // horizon of the cosine decay; <= warmup disables it
    double grad_clip = 0.0;  // global L2 norm cap; 0 disables clipping

    bool operator==(const OptimConfig&) const = default;
};

// Linear warm-up to the base rate, then cosine decay to zero at total_steps.
double lr_at_step(const OptimConfig& cfg, int step);

// Adam with bias correction. Slot state is lazily shaped on the first call
// and must then be reused with the same parameter list.
class Adam {
  public:
    void step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
              const OptimConfig& cfg, int step_index);

  private:
    std::vector<Tensor> m_, v_;
};

// Column-typed CSV accumulator; cells are preformatted so callers control
// numeric formatting. write() is atomic.
class CsvLog {
  public:
    explicit CsvLog(std::vector<std::string> columns);
    void add_row(const std::vector<std::string>& cells);
    size_t rows() const { return rows_.size(); }
    std::string dump() const;
    void write(const std::string& path) const;

  private:
    std::vector<std::string> columns_;
    std::vector<std::vector<std::string>> rows_;
};

// Shortest round-trip decimal form; identical output for identical doubles.
std::string format_double(double v);

// Means of consecutive windows must strictly decrease; returns the indices
// of windows that failed (empty when the check passes or there are fewer
// than two full windows).
std::vector<int> non_decreasing_windows(const std::vector<double>& losses, int window);

}  // namespace fastslow
