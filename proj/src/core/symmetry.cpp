#include "core/symmetry.hpp"

#include "core/errors.hpp"

#include <cmath>
#include <sstream>

namespace spheregen {

void SymmetryParams::validate() const
{
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (!(s[i] >= 0.0 && s[i] <= 1.0)) {
            domain_fail("symmetry intensity s[" + std::to_string(i) + "] = " + std::to_string(s[i]) +
                        " outside [0, 1]");
        }
    }
}

std::string SymmetryParams::to_string() const
{
    std::ostringstream os;
    for (std::size_t i = 0; i < s.size(); ++i) {
        os << (i ? "," : "") << s[i];
    }
    return os.str();
}

ag::Var estimate_symmetry(const ag::Var& f_s, const ag::Var& zeta, const ag::Var& eta)
{
    require(f_s.shape().size() == 4, "estimate_symmetry expects N x C x H x W features");
    if (!registry_compatible(f_s.shape()[3])) {
        domain_fail("estimate_symmetry: feature width " + std::to_string(f_s.shape()[3]) +
                    " does not admit every registry transform");
    }
    std::vector<ag::Var> cols;
    cols.reserve(k_num_symmetries);
    for (const auto& t : symmetry_registry()) {
        ag::Var l1 = ag::sum_per_item(ag::abs(ag::sub(symmetry_transform(f_s, t), f_s)));
        cols.push_back(ag::sigmoid(ag::add_scalar_var(ag::mul_by_scalar_var(l1, zeta), eta)));
    }
    return ag::stack_columns(cols);
}

SymmetryParams estimate_symmetry(const Tensor& f_s, double zeta, double eta)
{
    require(f_s.rank() == 3, "estimate_symmetry expects a C x H x W feature map");
    ag::NoGradGuard guard;
    const Shape s = f_s.shape();
    ag::Var out = estimate_symmetry(ag::constant(f_s.reshaped({1, s[0], s[1], s[2]})), ag::constant(Tensor({1}, zeta)),
                                    ag::constant(Tensor({1}, eta)));
    SymmetryParams p;
    for (std::size_t i = 0; i < k_num_symmetries; ++i) {
        p.s[i] = out.value()[i];
    }
    return p;
}

ag::Var symmetry_control(const ag::Var& f, const ag::Var& s, const ag::Var& w)
{
    require(f.shape().size() == 4 && w.shape().size() == 4, "symmetry_control expects 4-D tensors");
    require(s.shape() == Shape{f.shape()[0], k_num_symmetries}, "symmetry_control: s must be [N x 5]");
    for (double v : w.value().values()) {
        if (!(v > 0.0)) {
            domain_fail("symmetry_control: weight map must be strictly positive");
        }
    }
    if (!registry_compatible(f.shape()[3])) {
        domain_fail("symmetry_control: feature width " + std::to_string(f.shape()[3]) +
                    " does not admit every registry transform");
    }
    const ag::Var wf = ag::mul_channel_bcast(f, w);
    ag::Var num = wf;
    ag::Var den = w;
    const auto& reg = symmetry_registry();
    for (std::size_t i = 0; i < reg.size(); ++i) {
        num = ag::add(num, ag::scale_items(symmetry_transform(wf, reg[i]), s, i));
        den = ag::add(den, ag::scale_items(symmetry_transform(w, reg[i]), s, i));
    }
    return ag::div_channel_bcast(num, den);
}

Tensor symmetry_control(const Tensor& f, const SymmetryParams& s, const Tensor& w)
{
    require(f.rank() == 3 && w.rank() == 2 && w.dim(0) == f.dim(1) && w.dim(1) == f.dim(2),
            "symmetry_control: expects f [C x H x W] and w [H x W]");
    s.validate();
    ag::NoGradGuard guard;
    Tensor st({1, k_num_symmetries});
    for (std::size_t i = 0; i < k_num_symmetries; ++i) {
        st[i] = s.s[i];
    }
    const Shape fs = f.shape();
    ag::Var out = symmetry_control(ag::constant(f.reshaped({1, fs[0], fs[1], fs[2]})), ag::constant(st),
                                   ag::constant(w.reshaped({1, 1, fs[1], fs[2]})));
    return out.value().reshaped(fs);
}

double default_zeta(std::size_t feature_numel)
{
    require(feature_numel > 0, "default_zeta: empty feature map");
    return -1.0 / static_cast<double>(feature_numel);
}

} // namespace spheregen
