#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fastslow/dataset.hpp"
#include "fastslow/encoders.hpp"
#include "fastslow/fast_model.hpp"
#include "fastslow/slow_model.hpp"
#include "fastslow/tensor.hpp"
#include "fastslow/trainer.hpp"

namespace fastslow {

// One anchor's candidate set: the batch's images, all paired with the
// anchor's caption. Exactly one candidate (row `anchor`) is the matched
// image. Teacher scores enter as constants; student scores may be taped.
struct DistillBatch {
    int64_t anchor = 0;
    Tensor teacher_scores;  // cross-attention scores, one per candidate
    Tensor student_scores;  // dual-encoder scores, aligned with the above
};

// Temperature-softened distribution exp(s/tau) / sum, max-subtracted.
// The teacher flavor detaches its input so no gradient ever reaches it.
Tensor teacher_dist(const DistillBatch& b, double tau);
Tensor student_dist(const DistillBatch& b, double tau);

// -sum p log q. Components of q that vanish where p > 0 are clamped at
// 1e-300 with a warning on stderr; finite scores cannot reach that path.
Tensor cross_entropy(const Tensor& p, const Tensor& q);

// Sum over anchors of H(teacher_dist, student_dist).
Tensor distill_loss(const std::vector<DistillBatch>& batches, double tau);

// distill_loss + alpha * contrastive loss over the same batch's matched
// embedding pairs. alpha == 0 returns the distillation node untouched.
Tensor combined_objective(const std::vector<DistillBatch>& batches,
                          const std::vector<Tensor>& image_embeds,
                          const std::vector<Tensor>& text_embeds, double alpha,
                          double tau);

struct TrainDistillConfig {
    ImageEncoderConfig enc;  // student encoder
    int embed_dim = 64;
    double tau = 10.0;
    double alpha_over_tau2 = 0.001;
    int steps = 2000;
    int batch = 8;
    OptimConfig optim{.lr = 1e-3, .warmup_steps = 100, .total_steps = 0};
    uint64_t seed = 0;
    std::string csv_path;  // logs loss and both components per step
    std::string ckpt_path;

    double alpha() const { return alpha_over_tau2 * tau * tau; }
};

// Trains a fresh dual encoder against a frozen cross-attention teacher.
// Teacher pair scores are computed on demand and memoized by
// (image scene id, caption scene id, caption index).
DualEncoderParams train_distilled(const Dataset& ds, const SlowParams& teacher,
                                  const TrainDistillConfig& cfg);

// Trains one student per cell of the temperature/weight grid
// tau in {1,10} x alpha/tau^2 in {0,0.1,1,10} and writes
// tau,alpha_over_tau2,R1_val,R5_val rows in that nesting order.
void sweep_distill(const Dataset& ds, const SlowParams& teacher,
                   const TrainDistillConfig& base, const std::string& csv_path);

}  // namespace fastslow
