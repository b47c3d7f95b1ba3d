#include "milcl/model.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "io_util.hpp"

namespace milcl {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void fill_uniform(std::span<double> out, double bound, Rng& rng) {
    for (double& v : out) v = bound * (2.0 * rng.uniform01() - 1.0);
}

}  // namespace

MilModel init_model(std::size_t input_dim, std::size_t hidden_dim,
                    std::size_t num_classes, Rng& rng) {
    MilModel m;
    m.theta.v1 = Mat(hidden_dim, input_dim);
    m.theta.v2 = Mat(hidden_dim, input_dim);
    m.theta.w.assign(hidden_dim, 0.0);
    m.phi.weight = Mat(num_classes, input_dim);
    m.phi.bias.assign(num_classes, 0.0);

    const double attn_bound = 1.0 / std::sqrt(static_cast<double>(input_dim));
    const double w_bound = 1.0 / std::sqrt(static_cast<double>(hidden_dim));
    fill_uniform(m.theta.v1.data, attn_bound, rng);
    fill_uniform(m.theta.v2.data, attn_bound, rng);
    fill_uniform(m.theta.w, w_bound, rng);
    fill_uniform(m.phi.weight.data, attn_bound, rng);
    return m;
}

AttentionOutputs forward_attention(const Mat& features,
                                   const GatedAttentionParams& theta) {
    if (features.rows == 0)
        throw std::invalid_argument("forward_attention: empty bag");
    if (features.cols != theta.v1.cols || theta.v1.rows != theta.v2.rows ||
        theta.v1.cols != theta.v2.cols || theta.w.size() != theta.v1.rows)
        throw std::invalid_argument("forward_attention: dimension mismatch");

    const std::size_t n = features.rows;
    const std::size_t hidden = theta.v1.rows;

    AttentionOutputs out;
    out.raw_scores.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const Vec u = matvec(theta.v1, features.row(i));
        const Vec v = matvec(theta.v2, features.row(i));
        double score = 0.0;
        for (std::size_t k = 0; k < hidden; ++k)
            score += theta.w[k] * std::tanh(u[k]) * sigmoid(v[k]);
        out.raw_scores[i] = score;
    }
    out.attention = stable_softmax(out.raw_scores);
    out.bag_feature = matvec_t(features, out.attention);
    return out;
}

Vec forward_classifier(std::span<const double> z, const ClassifierParams& phi) {
    if (z.size() != phi.weight.cols)
        throw std::invalid_argument("forward_classifier: dimension mismatch");
    Vec logits = matvec(phi.weight, z);
    for (std::size_t c = 0; c < logits.size(); ++c) logits[c] += phi.bias[c];
    return logits;
}

int argmax_class(std::span<const double> logits) {
    int best = 0;
    for (std::size_t c = 1; c < logits.size(); ++c)
        if (logits[c] > logits[best]) best = static_cast<int>(c);
    return best;
}

int predict(const Bag& bag, const MilModel& model) {
    const AttentionOutputs attn = forward_attention(bag.features, model.theta);
    const Vec logits = forward_classifier(attn.bag_feature, model.phi);
    return argmax_class(logits);
}

BackwardResult backward(const Mat& features, int label, const MilModel& model,
                        const DistillTargets* targets) {
    const std::size_t num_classes = model.num_classes();
    if (label < 0 || static_cast<std::size_t>(label) >= num_classes)
        throw std::invalid_argument("backward: label out of range");

    const std::size_t n = features.rows;
    const std::size_t d = features.cols;
    const std::size_t hidden = model.hidden_dim();

    // Forward, keeping per-patch activations for the backward pass.
    std::vector<Vec> tanh_act(n), sig_act(n);
    Vec raw_scores(n);
    for (std::size_t i = 0; i < n; ++i) {
        Vec u = matvec(model.theta.v1, features.row(i));
        Vec v = matvec(model.theta.v2, features.row(i));
        double score = 0.0;
        for (std::size_t k = 0; k < hidden; ++k) {
            u[k] = std::tanh(u[k]);
            v[k] = sigmoid(v[k]);
            score += model.theta.w[k] * u[k] * v[k];
        }
        raw_scores[i] = score;
        tanh_act[i] = std::move(u);
        sig_act[i] = std::move(v);
    }

    BackwardResult res;
    res.attn.raw_scores = raw_scores;
    res.attn.attention = stable_softmax(raw_scores);
    res.attn.bag_feature = matvec_t(features, res.attn.attention);
    res.logits = forward_classifier(res.attn.bag_feature, model.phi);

    const Vec& attention = res.attn.attention;
    const Vec& logits = res.logits;

    const double ce = cross_entropy(logits, static_cast<std::size_t>(label));
    double attn_kl_val = 0.0;
    double logits_kl_val = 0.0;

    // Gradient w.r.t. logits: CE softmax-minus-onehot, plus the logits
    // distillation term over the first C-at-storage entries.
    Vec d_logits = stable_softmax(logits);
    d_logits[static_cast<std::size_t>(label)] -= 1.0;

    // Gradient w.r.t. raw attention scores contributed directly by the
    // attention distillation term (it bypasses the bag-feature path).
    Vec d_raw_extra(n, 0.0);

    double alpha = 0.0, beta = 0.0;
    if (targets != nullptr) {
        alpha = targets->alpha;
        beta = targets->beta;
        const double tau = targets->temperature;

        if (targets->attn_logits != nullptr) {
            const Vec& teacher = *targets->attn_logits;
            attn_kl_val = attn_kl(teacher, raw_scores, tau);
            Vec t_scaled(n), s_scaled(n);
            for (std::size_t i = 0; i < n; ++i) {
                t_scaled[i] = teacher[i] / tau;
                s_scaled[i] = raw_scores[i] / tau;
            }
            const Vec p = stable_softmax(t_scaled);
            const Vec q = stable_softmax(s_scaled);
            for (std::size_t i = 0; i < n; ++i)
                d_raw_extra[i] = alpha * (q[i] - p[i]) / tau;
        }
        if (targets->class_logits != nullptr) {
            const Vec& teacher = *targets->class_logits;
            const std::size_t cs = teacher.size();
            if (cs > logits.size())
                throw std::invalid_argument(
                    "backward: teacher class logits wider than head");
            const std::span<const double> student_head{logits.data(), cs};
            const double tau = targets->temperature;
            logits_kl_val = kl_from_logits(teacher, student_head, tau);
            Vec t_scaled(cs), s_scaled(cs);
            for (std::size_t c = 0; c < cs; ++c) {
                t_scaled[c] = teacher[c] / tau;
                s_scaled[c] = logits[c] / tau;
            }
            const Vec p = stable_softmax(t_scaled);
            const Vec q = stable_softmax(s_scaled);
            for (std::size_t c = 0; c < cs; ++c)
                d_logits[c] += beta * (q[c] - p[c]) / tau;
        }
    }

    res.loss = combined_loss(ce, attn_kl_val, logits_kl_val, alpha, beta,
                             targets != nullptr);

    MilGradients& g = res.grads;
    g.d_weight = Mat(num_classes, d);
    g.d_bias.assign(num_classes, 0.0);
    for (std::size_t c = 0; c < num_classes; ++c) {
        g.d_bias[c] = d_logits[c];
        for (std::size_t j = 0; j < d; ++j)
            g.d_weight.at(c, j) = d_logits[c] * res.attn.bag_feature[j];
    }

    const Vec d_z = matvec_t(model.phi.weight, d_logits);

    // d attention_i = h_i . d_z, then project through the softmax Jacobian.
    Vec d_attention(n);
    double dot_a_da = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        d_attention[i] = dot(features.row(i), d_z);
        dot_a_da += attention[i] * d_attention[i];
    }
    Vec d_raw(n);
    for (std::size_t i = 0; i < n; ++i)
        d_raw[i] = attention[i] * (d_attention[i] - dot_a_da) + d_raw_extra[i];

    g.d_v1 = Mat(hidden, d);
    g.d_v2 = Mat(hidden, d);
    g.d_w.assign(hidden, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const double dr = d_raw[i];
        if (dr == 0.0) continue;
        const Vec& t = tanh_act[i];
        const Vec& s = sig_act[i];
        const auto h = features.row(i);
        for (std::size_t k = 0; k < hidden; ++k) {
            g.d_w[k] += dr * t[k] * s[k];
            const double du = dr * model.theta.w[k] * s[k] * (1.0 - t[k] * t[k]);
            const double dv = dr * model.theta.w[k] * t[k] * s[k] * (1.0 - s[k]);
            double* row1 = g.d_v1.data.data() + k * d;
            double* row2 = g.d_v2.data.data() + k * d;
            for (std::size_t j = 0; j < d; ++j) {
                row1[j] += du * h[j];
                row2[j] += dv * h[j];
            }
        }
    }
    return res;
}

BinaryGradIdentities binary_grad_identities(const Mat& h, const Vec& a,
                                            const Vec& phi, int y) {
    if (a.size() != h.rows || phi.size() != h.cols)
        throw std::invalid_argument("binary_grad_identities: dimension mismatch");
    double sum = 0.0;
    for (double v : a) sum += v;
    if (std::abs(sum - 1.0) > 1e-9)
        throw std::invalid_argument("binary_grad_identities: a not normalized");

    const Vec z = matvec_t(h, a);  // d
    const double f = dot(phi, z);
    const double s = sigmoid(-static_cast<double>(y) * f);

    BinaryGradIdentities out;
    out.f = f;
    const std::size_t d = h.cols;
    out.grad_phi.resize(d);
    out.grad_phi_sq.resize(d);
    out.rhs_phi.resize(d);
    for (std::size_t j = 0; j < d; ++j) {
        out.grad_phi[j] = s * (-static_cast<double>(y) * z[j]);
        out.grad_phi_sq[j] = out.grad_phi[j] * out.grad_phi[j];
        out.rhs_phi[j] = static_cast<double>(y * y) * s * s * z[j] * z[j];
    }
    out.grad_a.resize(h.rows);
    out.grad_a_sq.resize(h.rows);
    out.rhs_a.resize(h.rows);
    for (std::size_t i = 0; i < h.rows; ++i) {
        const double phi_h = dot(phi, h.row(i));
        out.grad_a[i] = s * (-static_cast<double>(y) * phi_h);
        out.grad_a_sq[i] = out.grad_a[i] * out.grad_a[i];
        out.rhs_a[i] = static_cast<double>(y * y) * s * s * phi_h * phi_h;
    }
    return out;
}

ClassifierParams expand_head(const ClassifierParams& phi,
                             std::size_t new_class_count) {
    if (new_class_count == 0) return phi;
    const std::size_t old_c = phi.num_classes();
    const std::size_t d = phi.weight.cols;
    ClassifierParams out;
    out.weight = Mat(old_c + new_class_count, d);
    std::copy(phi.weight.data.begin(), phi.weight.data.end(),
              out.weight.data.begin());
    out.bias = phi.bias;
    out.bias.resize(old_c + new_class_count, 0.0);
    return out;
}

void save_model(const MilModel& model, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("save_model: cannot open " + path);
    io::write_bytes(os, "MILM", 4);
    io::write_u32(os, 1);
    io::write_u32(os, static_cast<std::uint32_t>(model.input_dim()));
    io::write_u32(os, static_cast<std::uint32_t>(model.hidden_dim()));
    io::write_u32(os, static_cast<std::uint32_t>(model.num_classes()));
    for (double v : model.theta.v1.data) io::write_f64(os, v);
    for (double v : model.theta.v2.data) io::write_f64(os, v);
    for (double v : model.theta.w) io::write_f64(os, v);
    for (double v : model.phi.weight.data) io::write_f64(os, v);
    for (double v : model.phi.bias) io::write_f64(os, v);
    if (!os) throw FormatError("save_model: write failed for " + path);
}

MilModel load_model(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("load_model: cannot open " + path);
    io::expect_magic(is, "MILM", "load_model");
    const std::uint32_t version = io::read_u32(is, "load_model");
    if (version != 1)
        throw FormatError("load_model: unsupported version " +
                          std::to_string(version) + " at offset 4");
    const std::uint32_t d = io::read_u32(is, "load_model");
    const std::uint32_t hidden = io::read_u32(is, "load_model");
    const std::uint32_t c = io::read_u32(is, "load_model");
    MilModel m;
    m.theta.v1 = Mat(hidden, d);
    m.theta.v2 = Mat(hidden, d);
    m.theta.w.assign(hidden, 0.0);
    m.phi.weight = Mat(c, d);
    m.phi.bias.assign(c, 0.0);
    for (double& v : m.theta.v1.data) v = io::read_f64(is, "load_model");
    for (double& v : m.theta.v2.data) v = io::read_f64(is, "load_model");
    for (double& v : m.theta.w) v = io::read_f64(is, "load_model");
    for (double& v : m.phi.weight.data) v = io::read_f64(is, "load_model");
    for (double& v : m.phi.bias) v = io::read_f64(is, "load_model");
    return m;
}

}  // namespace milcl
