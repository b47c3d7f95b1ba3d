#include "milcl/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>

#include "milcl/errors.hpp"

namespace milcl {

double quantile(Vec values, double p) {
    if (values.empty()) throw std::invalid_argument("quantile: empty sample");
    if (!(p >= 0.0 && p <= 1.0))
        throw std::invalid_argument("quantile: p must be in [0,1]");
    std::sort(values.begin(), values.end());
    const double pos = p * static_cast<double>(values.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = static_cast<std::size_t>(std::ceil(pos));
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

DecoupleGrid decouple_grid(const std::vector<MilModel>& session_models,
                           const std::vector<Bag>& task1_test) {
    if (session_models.empty())
        throw std::invalid_argument("decouple_grid: no checkpoints");
    if (task1_test.empty())
        throw std::invalid_argument("decouple_grid: no test bags");
    const std::size_t t_count = session_models.size();
    const std::size_t dim = session_models.front().input_dim();
    const std::size_t final_c = session_models.back().num_classes();
    for (const MilModel& m : session_models) {
        if (m.input_dim() != dim)
            throw std::invalid_argument("decouple_grid: incompatible dimensions");
        if (m.num_classes() > final_c)
            throw std::invalid_argument("decouple_grid: head sizes not monotone");
    }

    // Align all heads to the final class count.
    std::vector<ClassifierParams> heads;
    heads.reserve(t_count);
    for (const MilModel& m : session_models)
        heads.push_back(expand_head(m.phi, final_c - m.num_classes()));

    // Cache each attention network's bag features over the test set.
    std::vector<std::vector<Vec>> bag_features(t_count);
    for (std::size_t col = 0; col < t_count; ++col) {
        bag_features[col].reserve(task1_test.size());
        for (const Bag& bag : task1_test)
            bag_features[col].push_back(
                forward_attention(bag.features, session_models[col].theta)
                    .bag_feature);
    }

    DecoupleGrid grid;
    grid.cells.assign(t_count, Vec(t_count, 0.0));
    for (std::size_t row = 0; row < t_count; ++row) {
        for (std::size_t col = 0; col < t_count; ++col) {
            std::map<int, std::pair<std::size_t, std::size_t>> per_class;
            for (std::size_t b = 0; b < task1_test.size(); ++b) {
                const Vec logits =
                    forward_classifier(bag_features[col][b], heads[row]);
                auto& [correct, total] = per_class[task1_test[b].label];
                ++total;
                if (argmax_class(logits) == task1_test[b].label) ++correct;
            }
            double sum = 0.0;
            for (const auto& [label, counts] : per_class)
                sum += static_cast<double>(counts.first) /
                       static_cast<double>(counts.second);
            grid.cells[row][col] = sum / static_cast<double>(per_class.size());
        }
    }
    return grid;
}

GradTrace grad_trace(const std::vector<StepRecord>& steps, std::size_t window) {
    if (window == 0) throw std::invalid_argument("grad_trace: window must be >= 1");
    if (steps.empty()) return {};

    GradTrace trace;
    for (std::size_t start = 0; start < steps.size(); start += window) {
        const std::size_t end = std::min(start + window, steps.size());
        const bool partial = (end - start) < window;
        for (const bool attention : {true, false}) {
            Vec values;
            values.reserve(end - start);
            for (std::size_t i = start; i < end; ++i)
                values.push_back(attention ? steps[i].attn_grad_norm
                                           : steps[i].classifier_grad_norm);
            GradTraceRecord rec;
            rec.window = start / window;
            rec.block = attention ? "attention" : "classifier";
            rec.min = quantile(values, 0.0);
            rec.q1 = quantile(values, 0.25);
            rec.median = quantile(values, 0.5);
            rec.q3 = quantile(values, 0.75);
            rec.max = quantile(values, 1.0);
            rec.partial = partial;
            trace.push_back(rec);
        }
    }
    return trace;
}

GradTrace grad_trace(const SessionLog& log, std::size_t window) {
    return grad_trace(log.steps, window);
}

DriftMap attention_drift(const GatedAttentionParams& theta_ref,
                         const GatedAttentionParams& theta_t, const Bag& bag) {
    DriftMap out;
    out.bag_id = bag.bag_id;
    out.attention_ref = forward_attention(bag.features, theta_ref).attention;
    out.attention_t = forward_attention(bag.features, theta_t).attention;
    out.delta.resize(bag.patch_count());
    for (std::size_t i = 0; i < out.delta.size(); ++i)
        out.delta[i] = out.attention_t[i] - out.attention_ref[i];
    return out;
}

void write_decouple_csv(const DecoupleGrid& grid, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw FormatError("cannot open " + path);
    os << "row,col,accuracy\n";
    os.precision(17);
    for (std::size_t r = 0; r < grid.cells.size(); ++r)
        for (std::size_t c = 0; c < grid.cells[r].size(); ++c)
            os << r << ',' << c << ',' << grid.cells[r][c] << '\n';
}

void write_gradtrace_csv(const GradTrace& trace, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw FormatError("cannot open " + path);
    os << "window,block,min,q1,median,q3,max\n";
    os.precision(17);
    for (const GradTraceRecord& r : trace)
        os << r.window << ',' << r.block << ',' << r.min << ',' << r.q1 << ','
           << r.median << ',' << r.q3 << ',' << r.max << '\n';
}

void write_drift_csv(const DriftMap& drift, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw FormatError("cannot open " + path);
    os << "patch,a_ref,a_t,delta\n";
    os.precision(17);
    for (std::size_t i = 0; i < drift.delta.size(); ++i)
        os << i << ',' << drift.attention_ref[i] << ',' << drift.attention_t[i]
           << ',' << drift.delta[i] << '\n';
}

}  // namespace milcl
