#pragma once

#include "trv/tensor.hpp"

#include <utility>
#include <vector>

namespace trv {

struct GridPos {
    int row = 0;
    int col = 0;
};

// Axial 2D rotary embedding table. The first head_dim/2 channels carry the
// row axis, the second half the column axis. Within a half, consecutive
// channel pairs (2j, 2j+1) rotate together by angle
//   coord * base^(-2j / (head_dim/2)).
class RopeTable {
public:
    RopeTable(int grid_h, int grid_w, int head_dim, double base = 10000.0);

    int grid_h() const { return grid_h_; }
    int grid_w() const { return grid_w_; }
    int head_dim() const { return head_dim_; }
    double base() const { return base_; }
    int pairs_per_axis() const { return head_dim_ / 4; }

    double cos_row(int r, int j) const { return cos_row_[idx(r, j)]; }
    double sin_row(int r, int j) const { return sin_row_[idx(r, j)]; }
    double cos_col(int c, int j) const { return cos_col_[idx(c, j)]; }
    double sin_col(int c, int j) const { return sin_col_[idx(c, j)]; }

    void check_pos(GridPos p) const;

    // Rotate one head vector (length head_dim) in place. direction=-1 applies
    // the inverse rotation (used by the backward pass).
    void rotate(double* v, GridPos p, int direction = +1) const;

private:
    size_t idx(int coord, int j) const { return static_cast<size_t>(coord) * pairs_per_axis() + j; }

    int grid_h_, grid_w_, head_dim_;
    double base_;
    std::vector<double> cos_row_, sin_row_, cos_col_, sin_col_;
};

RopeTable build_rope_table(int grid_h, int grid_w, int head_dim, double base = 10000.0);

// v: [tokens, heads, head_dim] or [tokens, head_dim]; positions per token.
Tensor apply_rope(const Tensor& v, const RopeTable& table, const std::vector<GridPos>& positions);

// Row-major positions for a full grid, token t at (t / grid_w, t % grid_w).
std::vector<GridPos> grid_positions(int grid_h, int grid_w);

}  // namespace trv
