#pragma once

#include <span>

#include "milcl/numerics.hpp"

namespace milcl {

struct LossBreakdown {
    double ce = 0.0;
    double attn_kl = 0.0;
    double logits_kl = 0.0;
    double total = 0.0;
    double alpha = 0.0;
    double beta = 0.0;
    bool is_replay = false;
};

// -log softmax(logits)[label]
double cross_entropy(std::span<const double> logits, std::size_t label);

// D_KL( softmax(teacher/tau) || softmax(student/tau) ), computed in log space.
double kl_from_logits(std::span<const double> teacher_logits,
                      std::span<const double> student_logits,
                      double temperature);

// Attention distillation term: KL over a shared K-patch score support.
// Both vectors must cover the same stored patches in the same order.
double attn_kl(std::span<const double> teacher_scores,
               std::span<const double> student_scores,
               double temperature);

LossBreakdown combined_loss(double ce, double attn_kl_val, double logits_kl_val,
                            double alpha, double beta, bool is_replay);

}  // namespace milcl
