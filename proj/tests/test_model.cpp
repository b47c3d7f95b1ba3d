#include <cmath>
#include <stdexcept>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "fd_oracle.hpp"
#include "milcl/errors.hpp"
#include "milcl/model.hpp"

using namespace milcl;
using namespace milcl::testing;

namespace {

Bag random_bag(std::size_t n, std::size_t d, int label, Rng& rng) {
    Bag bag;
    bag.features = random_matrix(n, d, rng);
    bag.label = label;
    bag.task = 0;
    bag.bag_id = "test";
    return bag;
}

}  // namespace

TEST_CASE("zero attention parameters give uniform attention and column means") {
    Rng rng(3);
    const Mat h = random_matrix(5, 4, rng);
    GatedAttentionParams theta;
    theta.v1 = Mat(3, 4);
    theta.v2 = Mat(3, 4);
    theta.w.assign(3, 0.0);

    const AttentionOutputs out = forward_attention(h, theta);
    for (double a : out.attention) CHECK(a == doctest::Approx(0.2).epsilon(1e-14));
    for (std::size_t j = 0; j < 4; ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < 5; ++i) mean += h.at(i, j);
        mean /= 5.0;
        CHECK(out.bag_feature[j] == doctest::Approx(mean).epsilon(1e-12));
    }
}

TEST_CASE("single-patch bag is its own bag feature") {
    Rng rng(4);
    const Mat h = random_matrix(1, 6, rng);
    GatedAttentionParams theta;
    theta.v1 = random_matrix(2, 6, rng);
    theta.v2 = random_matrix(2, 6, rng);
    theta.w = random_vector(2, rng);

    const AttentionOutputs out = forward_attention(h, theta);
    CHECK(out.attention.size() == 1);
    CHECK(out.attention[0] == doctest::Approx(1.0));
    for (std::size_t j = 0; j < 6; ++j)
        CHECK(out.bag_feature[j] == doctest::Approx(h.at(0, j)));
}

TEST_CASE("gated attention matches a straight-line re-evaluation") {
    // Fixed 2-patch, d=3, D=2 instance with hand-set parameters.
    const Mat h(2, 3, {0.5, -1.0, 2.0, 1.5, 0.25, -0.75});
    GatedAttentionParams theta;
    theta.v1 = Mat(2, 3, {0.1, -0.2, 0.3, 0.4, 0.5, -0.6});
    theta.v2 = Mat(2, 3, {-0.3, 0.2, 0.1, 0.7, -0.1, 0.2});
    theta.w = Vec{0.9, -1.1};

    // Term-by-term evaluation, independent of the production loops.
    auto sigmoid = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
    Vec raw(2);
    for (int n = 0; n < 2; ++n) {
        double score = 0.0;
        for (int k = 0; k < 2; ++k) {
            double u = 0.0, v = 0.0;
            for (int j = 0; j < 3; ++j) {
                u += theta.v1.at(k, j) * h.at(n, j);
                v += theta.v2.at(k, j) * h.at(n, j);
            }
            score += theta.w[k] * std::tanh(u) * sigmoid(v);
        }
        raw[n] = score;
    }
    const double e0 = std::exp(raw[0]), e1 = std::exp(raw[1]);
    const Vec attn{e0 / (e0 + e1), e1 / (e0 + e1)};
    Vec z(3, 0.0);
    for (int n = 0; n < 2; ++n)
        for (int j = 0; j < 3; ++j) z[j] += attn[n] * h.at(n, j);

    const AttentionOutputs out = forward_attention(h, theta);
    for (int n = 0; n < 2; ++n) {
        CHECK(out.raw_scores[n] == doctest::Approx(raw[n]).epsilon(1e-13));
        CHECK(out.attention[n] == doctest::Approx(attn[n]).epsilon(1e-13));
    }
    for (int j = 0; j < 3; ++j)
        CHECK(out.bag_feature[j] == doctest::Approx(z[j]).epsilon(1e-13));

    double sum = 0.0;
    for (double a : out.attention) sum += a;
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("forward_attention rejects dimension mismatch") {
    GatedAttentionParams theta;
    theta.v1 = Mat(2, 3);
    theta.v2 = Mat(2, 3);
    theta.w.assign(2, 0.0);
    CHECK_THROWS_AS(forward_attention(Mat(4, 5), theta), std::invalid_argument);
}

TEST_CASE("classifier logits") {
    ClassifierParams phi;
    phi.weight = Mat(3, 2);
    phi.bias = Vec{0.1, -0.2, 0.3};
    SUBCASE("zero weight returns the bias") {
        CHECK(forward_classifier(Vec{1.0, 2.0}, phi) == phi.bias);
    }
    SUBCASE("basis vector picks a weight column") {
        phi.weight = Mat(3, 2, {1, 2, 3, 4, 5, 6});
        phi.bias.assign(3, 0.0);
        CHECK(forward_classifier(Vec{1.0, 0.0}, phi) == Vec{1, 3, 5});
    }
    SUBCASE("random instance matches a matrix-vector oracle") {
        Rng rng(11);
        phi.weight = random_matrix(3, 2, rng);
        phi.bias = random_vector(3, rng);
        const Vec z = random_vector(2, rng);
        const Vec logits = forward_classifier(z, phi);
        for (int c = 0; c < 3; ++c) {
            const double want =
                phi.weight.at(c, 0) * z[0] + phi.weight.at(c, 1) * z[1] +
                phi.bias[c];
            CHECK(logits[c] == doctest::Approx(want).epsilon(1e-14));
        }
    }
    SUBCASE("dimension mismatch") {
        CHECK_THROWS_AS(forward_classifier(Vec{1.0}, phi),
                        std::invalid_argument);
    }
}

TEST_CASE("backward loss at uniform logits is ln C") {
    Rng rng(8);
    MilModel model = random_model(4, 3, 3, rng);
    model.phi.weight = Mat(3, 4);
    model.phi.bias.assign(3, 0.0);
    const Bag bag = random_bag(5, 4, 1, rng);
    const BackwardResult res = backward(bag.features, bag.label, model);
    CHECK(res.loss.total == doctest::Approx(std::log(3.0)).epsilon(1e-12));
}

TEST_CASE("identical patches give equal per-patch logit contributions") {
    Rng rng(9);
    MilModel model = random_model(4, 3, 2, rng);
    Mat h(6, 4);
    const Vec patch = random_vector(4, rng);
    for (std::size_t i = 0; i < 6; ++i)
        std::copy(patch.begin(), patch.end(), h.row(i).begin());
    const BackwardResult res = backward(h, 0, model);
    // All patches identical: uniform attention, and the raw-score gradient
    // vanishes after the softmax Jacobian projection.
    for (double a : res.attn.attention)
        CHECK(a == doctest::Approx(1.0 / 6.0).epsilon(1e-12));
    CHECK(std::sqrt(l2_norm_sq(res.grads.d_w)) < 1e-12);
}

TEST_CASE("backward rejects out-of-range labels") {
    Rng rng(10);
    MilModel model = random_model(3, 2, 2, rng);
    const Bag bag = random_bag(4, 3, 0, rng);
    CHECK_THROWS_AS(backward(bag.features, 2, model), std::invalid_argument);
    CHECK_THROWS_AS(backward(bag.features, -1, model), std::invalid_argument);
}

TEST_CASE("analytic gradients match central finite differences") {
    Rng rng(12);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t n = 1 + rng.index_below(6);
        const std::size_t d = 1 + rng.index_below(5);
        const std::size_t hidden = 1 + rng.index_below(4);
        const std::size_t classes = 1 + rng.index_below(3);
        MilModel model = random_model(d, hidden, classes, rng);
        const Bag bag = random_bag(n, d,
                                   static_cast<int>(rng.index_below(classes)),
                                   rng);

        const MilGradients analytic =
            backward(bag.features, bag.label, model).grads;
        const NumericGradients numeric = numeric_gradients(
            model,
            [&](const MilModel& m) {
                return backward(bag.features, bag.label, m).loss.total;
            });

        CHECK(max_rel_error(analytic.d_v1.data, numeric.d_v1.data) < 1e-4);
        CHECK(max_rel_error(analytic.d_v2.data, numeric.d_v2.data) < 1e-4);
        CHECK(max_rel_error(analytic.d_w, numeric.d_w) < 1e-4);
        CHECK(max_rel_error(analytic.d_weight.data, numeric.d_weight.data) < 1e-4);
        CHECK(max_rel_error(analytic.d_bias, numeric.d_bias) < 1e-4);
    }
}

TEST_CASE("replay gradients (attention and logits KL) match finite differences") {
    Rng rng(13);
    for (int trial = 0; trial < 15; ++trial) {
        const std::size_t n = 2 + rng.index_below(5);
        const std::size_t d = 1 + rng.index_below(4);
        const std::size_t classes = 2 + rng.index_below(2);
        MilModel model = random_model(d, 3, classes, rng);
        const Bag bag = random_bag(n, d, 0, rng);
        const Vec teacher_attn = random_vector(n, rng);
        const Vec teacher_logits = random_vector(classes, rng);

        DistillTargets targets;
        targets.attn_logits = &teacher_attn;
        targets.class_logits = &teacher_logits;
        targets.alpha = 0.8;
        targets.beta = 1.3;
        targets.temperature = 1.5;

        const MilGradients analytic =
            backward(bag.features, bag.label, model, &targets).grads;
        const NumericGradients numeric = numeric_gradients(
            model,
            [&](const MilModel& m) {
                return backward(bag.features, bag.label, m, &targets)
                    .loss.total;
            });

        CHECK(max_rel_error(analytic.d_v1.data, numeric.d_v1.data) < 1e-4);
        CHECK(max_rel_error(analytic.d_v2.data, numeric.d_v2.data) < 1e-4);
        CHECK(max_rel_error(analytic.d_w, numeric.d_w) < 1e-4);
        CHECK(max_rel_error(analytic.d_weight.data, numeric.d_weight.data) < 1e-4);
        CHECK(max_rel_error(analytic.d_bias, numeric.d_bias) < 1e-4);
    }
}

TEST_CASE("binary gradient identities") {
    Rng rng(14);

    SUBCASE("f = 0 gives grad-phi-sq = z^2 / 4") {
        // One patch, uniform attention, phi orthogonal to z is overkill;
        // simplest: z nonzero but phi = 0 so f = 0.
        const Mat h(2, 3, {1.0, 2.0, -1.0, 0.5, -0.5, 1.5});
        const Vec a{0.5, 0.5};
        const Vec phi(3, 0.0);
        const auto out = binary_grad_identities(h, a, phi, 1);
        CHECK(out.f == doctest::Approx(0.0));
        const Vec z = matvec_t(h, a);
        for (int j = 0; j < 3; ++j)
            CHECK(out.grad_phi_sq[j] ==
                  doctest::Approx(z[j] * z[j] / 4.0).epsilon(1e-13));
    }

    SUBCASE("analytic equals closed form and finite differences") {
        for (int trial = 0; trial < 60; ++trial) {
            const std::size_t n = 1 + rng.index_below(6);
            const std::size_t d = 1 + rng.index_below(5);
            const Mat h = random_matrix(n, d, rng);
            Vec a(n);
            double sum = 0.0;
            for (double& v : a) {
                v = 0.05 + rng.uniform01();
                sum += v;
            }
            for (double& v : a) v /= sum;
            Vec phi = random_vector(d, rng);
            const int y = rng.uniform01() < 0.5 ? 1 : -1;

            const auto out = binary_grad_identities(h, a, phi, y);
            for (std::size_t j = 0; j < d; ++j)
                CHECK(std::abs(out.grad_phi_sq[j] - out.rhs_phi[j]) < 1e-10);
            for (std::size_t i = 0; i < n; ++i)
                CHECK(std::abs(out.grad_a_sq[i] - out.rhs_a[i]) < 1e-10);

            // Finite differences on L = log(1 + exp(-y phi^T H^T a)).
            auto loss = [&](const Vec& phi_v, const Vec& a_v) {
                const Vec z = matvec_t(h, a_v);
                return std::log1p(std::exp(-y * dot(phi_v, z)));
            };
            const double step = 1e-6;
            for (std::size_t j = 0; j < d; ++j) {
                Vec up = phi, down = phi;
                up[j] += step;
                down[j] -= step;
                const double fd = (loss(up, a) - loss(down, a)) / (2 * step);
                CHECK(rel_error(out.grad_phi[j], fd) < 1e-6);
            }
            for (std::size_t i = 0; i < n; ++i) {
                Vec up = a, down = a;
                up[i] += step;
                down[i] -= step;
                const double fd = (loss(phi, up) - loss(phi, down)) / (2 * step);
                CHECK(rel_error(out.grad_a[i], fd) < 1e-6);
            }
        }
    }

    SUBCASE("rejects unnormalized attention") {
        const Mat h(2, 2, {1, 0, 0, 1});
        CHECK_THROWS_AS(binary_grad_identities(h, Vec{0.9, 0.9}, Vec{1, 1}, 1),
                        std::invalid_argument);
    }
}

TEST_CASE("classifier gradient bounded while attention gradient scales with phi") {
    // Misclassified instance: y = +1 but f < 0, kept misclassified as
    // phi is scaled up.
    const Mat h(3, 2, {1.0, 0.5, -2.0, 1.0, 0.25, -0.5});
    const Vec a{0.2, 0.5, 0.3};
    const Vec phi_base{1.0, -0.5};
    const int y = 1;

    double max_h_col = 0.0;
    for (std::size_t i = 0; i < h.rows; ++i)
        for (std::size_t j = 0; j < h.cols; ++j)
            max_h_col = std::max(max_h_col, std::abs(h.at(i, j)));

    Vec max_grad_a_by_scale;
    for (const double c : {1.0, 10.0, 100.0}) {
        Vec phi = phi_base;
        for (double& v : phi) v *= c;
        const auto out = binary_grad_identities(h, a, phi, y);
        CHECK(out.f < 0.0);  // stays misclassified

        double max_grad_phi = 0.0;
        for (std::size_t j = 0; j < h.cols; ++j) {
            max_grad_phi = std::max(max_grad_phi, std::abs(out.grad_phi[j]));
            // |dL/dphi_j| <= max_n |H_nj|
            double col_max = 0.0;
            for (std::size_t i = 0; i < h.rows; ++i)
                col_max = std::max(col_max, std::abs(h.at(i, j)));
            CHECK(std::abs(out.grad_phi[j]) <= col_max + 1e-12);
        }
        double max_grad_a = 0.0;
        for (double g : out.grad_a_sq) max_grad_a = std::max(max_grad_a, g);
        max_grad_a_by_scale.push_back(max_grad_a);
    }
    CHECK(max_grad_a_by_scale[2] >= 10.0 * max_grad_a_by_scale[0]);
    CHECK(max_grad_a_by_scale[1] > max_grad_a_by_scale[0]);
}

TEST_CASE("expand_head preserves old logits and composes") {
    Rng rng(15);
    ClassifierParams phi;
    phi.weight = random_matrix(2, 3, rng);
    phi.bias = random_vector(2, rng);
    const Vec z = random_vector(3, rng);
    const Vec old_logits = forward_classifier(z, phi);

    const ClassifierParams grown = expand_head(phi, 2);
    CHECK(grown.num_classes() == 4);
    const Vec new_logits = forward_classifier(z, grown);
    for (int c = 0; c < 2; ++c) CHECK(new_logits[c] == old_logits[c]);
    for (int c = 2; c < 4; ++c) CHECK(new_logits[c] == 0.0);

    // expand by 0 is the identity
    const ClassifierParams same = expand_head(phi, 0);
    CHECK(same.weight == phi.weight);
    CHECK(same.bias == phi.bias);

    // two expansions by 1 equal one expansion by 2
    const ClassifierParams twice = expand_head(expand_head(phi, 1), 1);
    CHECK(forward_classifier(z, twice) == forward_classifier(z, grown));
}

TEST_CASE("predict is the argmax with low-index tie break") {
    CHECK(argmax_class(Vec{0.1, 0.9, 0.2}) == 1);
    CHECK(argmax_class(Vec{0.5, 0.5}) == 0);

    Rng rng(16);
    for (int trial = 0; trial < 20; ++trial) {
        MilModel model = random_model(4, 3, 3, rng);
        const Bag bag = random_bag(5, 4, 0, rng);
        const AttentionOutputs out = forward_attention(bag.features, model.theta);
        const Vec logits = forward_classifier(out.bag_feature, model.phi);
        CHECK(predict(bag, model) == argmax_class(logits));
    }
}

TEST_CASE("model checkpoint round trip") {
    Rng rng(17);
    const MilModel model = random_model(5, 4, 3, rng);
    const std::string path =
        (std::filesystem::temp_directory_path() / "milcl_model_test.milm")
            .string();
    save_model(model, path);
    const MilModel loaded = load_model(path);
    CHECK(loaded.theta.v1 == model.theta.v1);
    CHECK(loaded.theta.v2 == model.theta.v2);
    CHECK(loaded.theta.w == model.theta.w);
    CHECK(loaded.phi.weight == model.phi.weight);
    CHECK(loaded.phi.bias == model.phi.bias);

    SUBCASE("bad magic is a format error") {
        std::ofstream os(path, std::ios::binary);
        os << "XXXXjunkjunkjunk";
        os.close();
        CHECK_THROWS_AS(load_model(path), FormatError);
    }
    SUBCASE("truncated file is a format error") {
        std::ifstream is(path, std::ios::binary);
        std::string content((std::istreambuf_iterator<char>(is)),
                            std::istreambuf_iterator<char>());
        is.close();
        std::ofstream os(path, std::ios::binary);
        os.write(content.data(),
                 static_cast<std::streamsize>(content.size() / 2));
        os.close();
        CHECK_THROWS_AS(load_model(path), FormatError);
    }
    std::remove(path.c_str());
}
