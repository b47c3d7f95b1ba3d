#pragma once

#include <optional>
#include <vector>

#include "milcl/numerics.hpp"

namespace milcl {

// Lower-triangular grid a_{t,j}: balanced accuracy on task j after
// session t (0-based indices internally), plus an optional joint-training
// baseline a*_j.
struct AccuracyMatrix {
    std::size_t task_count = 0;
    std::vector<Vec> rows;  // rows[t] has t+1 entries
    std::optional<Vec> joint_baseline;

    double at(std::size_t t, std::size_t j) const { return rows[t][j]; }
};

// Mean of the final row.
double aacc(const AccuracyMatrix& m);

// Mean over j < T of a_{T,j} - a_{j,j}; negative means forgetting.
double bwt(const AccuracyMatrix& m);

// Mean over tasks of a*_j - a_{j,j}.
double im(const AccuracyMatrix& m);
Vec im_per_task(const AccuracyMatrix& m);

}  // namespace milcl
