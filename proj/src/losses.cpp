#include "milcl/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace milcl {

namespace {

// log softmax(x)[i] = x[i] - max - log(sum exp(x - max))
Vec log_softmax(std::span<const double> x) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : x) mx = std::max(mx, v);
    double sum = 0.0;
    for (double v : x) sum += std::exp(v - mx);
    const double lse = mx + std::log(sum);
    Vec out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - lse;
    return out;
}

}  // namespace

double cross_entropy(std::span<const double> logits, std::size_t label) {
    if (logits.empty() || label >= logits.size())
        throw std::invalid_argument("cross_entropy: label out of range");
    return -log_softmax(logits)[label];
}

double kl_from_logits(std::span<const double> teacher_logits,
                      std::span<const double> student_logits,
                      double temperature) {
    if (teacher_logits.empty() || teacher_logits.size() != student_logits.size())
        throw std::invalid_argument("kl_from_logits: length mismatch");
    if (!(temperature > 0.0))
        throw std::invalid_argument("kl_from_logits: temperature must be > 0");
    Vec t(teacher_logits.size()), s(student_logits.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
        t[i] = teacher_logits[i] / temperature;
        s[i] = student_logits[i] / temperature;
    }
    const Vec log_p = log_softmax(t);
    const Vec log_q = log_softmax(s);
    double kl = 0.0;
    for (std::size_t i = 0; i < log_p.size(); ++i)
        kl += std::exp(log_p[i]) * (log_p[i] - log_q[i]);
    return std::max(kl, 0.0);
}

double attn_kl(std::span<const double> teacher_scores,
               std::span<const double> student_scores,
               double temperature) {
    if (teacher_scores.size() != student_scores.size())
        throw std::invalid_argument("attn_kl: support mismatch");
    return kl_from_logits(teacher_scores, student_scores, temperature);
}

LossBreakdown combined_loss(double ce, double attn_kl_val, double logits_kl_val,
                            double alpha, double beta, bool is_replay) {
    if (alpha < 0.0 || beta < 0.0)
        throw std::invalid_argument("combined_loss: negative weights");
    LossBreakdown out;
    out.ce = ce;
    out.alpha = alpha;
    out.beta = beta;
    out.is_replay = is_replay;
    if (is_replay) {
        out.attn_kl = attn_kl_val;
        out.logits_kl = logits_kl_val;
        out.total = ce + alpha * attn_kl_val + beta * logits_kl_val;
    } else {
        out.attn_kl = 0.0;
        out.logits_kl = 0.0;
        out.total = ce;
    }
    return out;
}

}  // namespace milcl
