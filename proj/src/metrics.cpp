#include "milcl/metrics.hpp"

#include <stdexcept>

namespace milcl {

namespace {

void check_shape(const AccuracyMatrix& m) {
    if (m.task_count == 0 || m.rows.size() != m.task_count)
        throw std::invalid_argument("AccuracyMatrix: incomplete rows");
    for (std::size_t t = 0; t < m.task_count; ++t)
        if (m.rows[t].size() != t + 1)
            throw std::invalid_argument("AccuracyMatrix: row " +
                                        std::to_string(t) + " incomplete");
}

}  // namespace

double aacc(const AccuracyMatrix& m) {
    check_shape(m);
    const Vec& last = m.rows.back();
    double sum = 0.0;
    for (double v : last) sum += v;
    return sum / static_cast<double>(m.task_count);
}

double bwt(const AccuracyMatrix& m) {
    check_shape(m);
    if (m.task_count < 2) return 0.0;  // nothing earlier to forget
    const std::size_t t_final = m.task_count - 1;
    double sum = 0.0;
    for (std::size_t j = 0; j < t_final; ++j)
        sum += m.rows[t_final][j] - m.rows[j][j];
    return sum / static_cast<double>(t_final);
}

Vec im_per_task(const AccuracyMatrix& m) {
    check_shape(m);
    if (!m.joint_baseline || m.joint_baseline->size() != m.task_count)
        throw std::invalid_argument("im: joint baseline missing");
    Vec out(m.task_count);
    for (std::size_t j = 0; j < m.task_count; ++j)
        out[j] = (*m.joint_baseline)[j] - m.rows[j][j];
    return out;
}

double im(const AccuracyMatrix& m) {
    const Vec per_task = im_per_task(m);
    double sum = 0.0;
    for (double v : per_task) sum += v;
    return sum / static_cast<double>(per_task.size());
}

}  // namespace milcl
