#include "trv/rope.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace trv {

RopeTable::RopeTable(int grid_h, int grid_w, int head_dim, double base)
    : grid_h_(grid_h), grid_w_(grid_w), head_dim_(head_dim), base_(base) {
    if (head_dim <= 0 || head_dim % 4 != 0)
        throw std::invalid_argument("RopeTable: head_dim " + std::to_string(head_dim) +
                                    " must be a positive multiple of 4");
    if (grid_h < 1 || grid_w < 1)
        throw std::invalid_argument("RopeTable: grid extents must be >= 1");

    const int np = pairs_per_axis();
    const double half = head_dim / 2.0;
    std::vector<double> freq(np);
    for (int j = 0; j < np; ++j) freq[j] = std::pow(base, -2.0 * j / half);

    cos_row_.resize(static_cast<size_t>(grid_h) * np);
    sin_row_.resize(static_cast<size_t>(grid_h) * np);
    for (int r = 0; r < grid_h; ++r)
        for (int j = 0; j < np; ++j) {
            double a = r * freq[j];
            cos_row_[idx(r, j)] = std::cos(a);
            sin_row_[idx(r, j)] = std::sin(a);
        }

    cos_col_.resize(static_cast<size_t>(grid_w) * np);
    sin_col_.resize(static_cast<size_t>(grid_w) * np);
    for (int c = 0; c < grid_w; ++c)
        for (int j = 0; j < np; ++j) {
            double a = c * freq[j];
            cos_col_[idx(c, j)] = std::cos(a);
            sin_col_[idx(c, j)] = std::sin(a);
        }
}

void RopeTable::check_pos(GridPos p) const {
    if (p.row < 0 || p.row >= grid_h_ || p.col < 0 || p.col >= grid_w_)
        throw std::out_of_range("RopeTable: position (" + std::to_string(p.row) + "," +
                                std::to_string(p.col) + ") outside " + std::to_string(grid_h_) +
                                "x" + std::to_string(grid_w_) + " grid");
}

void RopeTable::rotate(double* v, GridPos p, int direction) const {
    check_pos(p);
    const int np = pairs_per_axis();
    const int half = head_dim_ / 2;
    for (int j = 0; j < np; ++j) {
        double c = cos_row(p.row, j);
        double s = sin_row(p.row, j) * direction;
        double x0 = v[2 * j], x1 = v[2 * j + 1];
        v[2 * j] = x0 * c - x1 * s;
        v[2 * j + 1] = x0 * s + x1 * c;
    }
    for (int j = 0; j < np; ++j) {
        double c = cos_col(p.col, j);
        double s = sin_col(p.col, j) * direction;
        double x0 = v[half + 2 * j], x1 = v[half + 2 * j + 1];
        v[half + 2 * j] = x0 * c - x1 * s;
        v[half + 2 * j + 1] = x0 * s + x1 * c;
    }
}

RopeTable build_rope_table(int grid_h, int grid_w, int head_dim, double base) {
    return RopeTable(grid_h, grid_w, head_dim, base);
}

Tensor apply_rope(const Tensor& v, const RopeTable& table, const std::vector<GridPos>& positions) {
    if (v.ndim() != 2 && v.ndim() != 3)
        throw std::invalid_argument("apply_rope: expected [tokens, head_dim] or [tokens, heads, head_dim]");
    const long tokens = v.dim(0);
    const long hd = v.dim(v.ndim() - 1);
    const long heads = v.ndim() == 3 ? v.dim(1) : 1;
    if (hd != table.head_dim())
        throw std::invalid_argument("apply_rope: last dim " + std::to_string(hd) +
                                    " != table head_dim " + std::to_string(table.head_dim()));
    if (static_cast<long>(positions.size()) != tokens)
        throw std::invalid_argument("apply_rope: positions length != token count");

    Tensor out = v;
    for (long t = 0; t < tokens; ++t)
        for (long h = 0; h < heads; ++h)
            table.rotate(out.data() + (t * heads + h) * hd, positions[static_cast<size_t>(t)]);
    return out;
}

std::vector<GridPos> grid_positions(int grid_h, int grid_w) {
    std::vector<GridPos> pos;
    pos.reserve(static_cast<size_t>(grid_h) * grid_w);
    for (int r = 0; r < grid_h; ++r)
        for (int c = 0; c < grid_w; ++c) pos.push_back({r, c});
    return pos;
}

}  // namespace trv
