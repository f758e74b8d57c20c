#pragma once

// Symmetry estimation from feature maps and the symmetry-control blend.

#include "core/autograd.hpp"
#include "core/geometry.hpp"

#include <array>
#include <string>

namespace spheregen {

// Intensities in [0,1] ordered as symmetry_registry().
struct SymmetryParams {
    std::array<double, k_num_symmetries> s{};

    void validate() const;
    std::string to_string() const;
    friend bool operator==(const SymmetryParams&, const SymmetryParams&) = default;
};

// s_i = sigmoid(zeta * ||T_i(f_s) - f_s||_1 + eta), per batch item.
// f_s: [N x C x H x W]; zeta, eta: one-element Vars. Returns [N x 5].
ag::Var estimate_symmetry(const ag::Var& f_s, const ag::Var& zeta, const ag::Var& eta);
SymmetryParams estimate_symmetry(const Tensor& f_s, double zeta, double eta);

// H(f, s) = (w.f + sum_i s_i T_i(w.f)) / (w + sum_i s_i T_i(w)).
// f: [N x C x H x W], s: [N x 5], w: [N x 1 x H x W] strictly positive.
ag::Var symmetry_control(const ag::Var& f, const ag::Var& s, const ag::Var& w);
Tensor symmetry_control(const Tensor& f, const SymmetryParams& s, const Tensor& w);

// Initial zeta so sigmoid starts near 0.5 regardless of feature scale.
double default_zeta(std::size_t feature_numel);

} // namespace spheregen
