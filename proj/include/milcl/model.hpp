#pragma once

#include <optional>
#include <string>

#include "milcl/losses.hpp"
#include "milcl/numerics.hpp"

namespace milcl {

// A variable-length sequence of patch feature vectors with a bag label.
struct Bag {
    Mat features;  // N x d
    int label = -1;
    int task = -1;
    std::string bag_id;

    std::size_t patch_count() const { return features.rows; }
    std::size_t dim() const { return features.cols; }
};

struct GatedAttentionParams {
    Mat v1;  // D x d
    Mat v2;  // D x d
    Vec w;   // D
};

struct ClassifierParams {
    Mat weight;  // C x d
    Vec bias;    // C

    std::size_t num_classes() const { return bias.size(); }
};

struct MilModel {
    GatedAttentionParams theta;
    ClassifierParams phi;

    std::size_t input_dim() const { return theta.v1.cols; }
    std::size_t hidden_dim() const { return theta.v1.rows; }
    std::size_t num_classes() const { return phi.num_classes(); }
};

// Fresh model with uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights and
// zero biases, drawn from `rng`.
MilModel init_model(std::size_t input_dim, std::size_t hidden_dim,
                    std::size_t num_classes, Rng& rng);

struct AttentionOutputs {
    Vec raw_scores;   // N, pre-softmax
    Vec attention;    // N, softmax of raw_scores
    Vec bag_feature;  // d, H^T attention
};

// Gated attention scores and bag feature (attention-weighted patch sum).
AttentionOutputs forward_attention(const Mat& features,
                                   const GatedAttentionParams& theta);

// logits = weight z + bias
Vec forward_classifier(std::span<const double> z, const ClassifierParams& phi);

// argmax of logits; ties break toward the lowest class id.
int predict(const Bag& bag, const MilModel& model);
int argmax_class(std::span<const double> logits);

struct MilGradients {
    Mat d_v1;
    Mat d_v2;
    Vec d_w;
    Mat d_weight;
    Vec d_bias;
};

// Frozen teacher payload for replayed pseudo-bags. The attention logits are
// raw (pre-softmax) scores restricted to the stored patches, in row order.
struct DistillTargets {
    const Vec* attn_logits = nullptr;   // same length as features.rows
    const Vec* class_logits = nullptr;  // length = classes at storage time
    double alpha = 1.0;
    double beta = 1.0;
    double temperature = 1.0;
};

struct BackwardResult {
    LossBreakdown loss;
    MilGradients grads;
    AttentionOutputs attn;
    Vec logits;
};

// Softmax cross-entropy loss and its exact analytic gradients through the
// gated attention pathway. When `targets` is given, the sample is treated
// as replay and the attention/logits distillation terms are added; their
// gradients flow through the same backward pass. Teacher class logits are
// compared against the first C-at-storage student logits only.
BackwardResult backward(const Mat& features, int label, const MilModel& model,
                        const DistillTargets* targets = nullptr);

// Binary analysis model f = phi^T H^T a with loss log(1 + exp(-y f)).
// Returns the analytic squared gradients and the closed-form right sides.
struct BinaryGradIdentities {
    Vec grad_phi_sq;  // per j: (dL/dphi_j)^2
    Vec rhs_phi;      // per j: y^2 sigma^2(-yf) z_j^2
    Vec grad_a_sq;    // per i: (dL/da_i)^2
    Vec rhs_a;        // per i: y^2 sigma^2(-yf) (phi^T h_i)^2
    Vec grad_phi;     // per j: dL/dphi_j
    Vec grad_a;       // per i: dL/da_i
    double f = 0.0;
};

BinaryGradIdentities binary_grad_identities(const Mat& h, const Vec& a,
                                            const Vec& phi, int y);

// Append `new_class_count` zero-initialized rows to the head. Logits for
// previously seen classes are preserved bit-exactly. Expanding by 0 is the
// identity.
ClassifierParams expand_head(const ClassifierParams& phi,
                             std::size_t new_class_count);

// Checkpoint: "MILM" magic, u32 version, u32 d/D/C, then little-endian f64
// blocks in order V1, V2, w, weight, bias. The sidecar JSON goes next to it.
void save_model(const MilModel& model, const std::string& path);
MilModel load_model(const std::string& path);

}  // namespace milcl
