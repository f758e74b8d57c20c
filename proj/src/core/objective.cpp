#include "core/objective.hpp"

#include "core/errors.hpp"

#include <cmath>
#include <numbers>

namespace spheregen {

namespace {

double per_item_count(const ag::Var& x) { return static_cast<double>(x.numel() / x.shape()[0]); }

void check_same(const ag::Var& a, const ag::Var& b, const char* op)
{
    if (a.shape() != b.shape()) {
        domain_fail(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    }
}

} // namespace

ObjectiveWeights ObjectiveWeights::from(const ModelConfig& cfg)
{
    return {cfg.alpha, cfg.beta, cfg.gamma, cfg.reduction, cfg.square_rec_adversarial};
}

void ObjectiveWeights::validate() const
{
    require(alpha <= 0.0 && beta <= 0.0, "objective weights alpha, beta must be <= 0");
    require(gamma >= 0.0 && gamma <= 1.0, "objective mixture gamma must lie in [0, 1]");
}

ag::Var l1_norm(const ag::Var& x, Reduction r)
{
    ag::Var s = ag::sum_per_item(ag::abs(x));
    return r == Reduction::mean ? ag::mul_scalar(s, 1.0 / per_item_count(x)) : s;
}

ag::Var l2_norm_squared(const ag::Var& x, Reduction r)
{
    ag::Var s = ag::sum_per_item(ag::square(x));
    return r == Reduction::mean ? ag::mul_scalar(s, 1.0 / per_item_count(x)) : s;
}

ag::Var l2_norm(const ag::Var& x, Reduction r) { return ag::sqrt(l2_norm_squared(x, r)); }

ag::Var gaussian_kl(const LatentGaussian& q, const LatentGaussian& p)
{
    check_same(q.mu, p.mu, "gaussian_kl");
    check_same(q.logvar, p.logvar, "gaussian_kl");
    check_same(q.mu, q.logvar, "gaussian_kl");
    // 0.5 * (lv_p - lv_q + (exp(lv_q) + (mu_q - mu_p)^2) / exp(lv_p) - 1)
    ag::Var diff = ag::sub(q.mu, p.mu);
    ag::Var ratio = ag::div(ag::add(ag::exp(q.logvar), ag::square(diff)), ag::exp(p.logvar));
    ag::Var term = ag::add_scalar(ag::add(ag::sub(p.logvar, q.logvar), ratio), -1.0);
    return ag::mul_scalar(ag::sum_per_item(term), 0.5);
}

double gaussian_kl(const Tensor& mu_q, const Tensor& sigma_q, const Tensor& mu_p, const Tensor& sigma_p)
{
    require(mu_q.same_shape(sigma_q) && mu_q.same_shape(mu_p) && mu_q.same_shape(sigma_p), "gaussian_kl: shape mismatch");
    double kl = 0.0;
    for (std::size_t i = 0; i < mu_q.numel(); ++i) {
        if (!(sigma_q[i] > 0.0) || !(sigma_p[i] > 0.0)) {
            domain_fail("gaussian_kl: standard deviations must be strictly positive");
        }
        const double d = mu_q[i] - mu_p[i];
        kl += std::log(sigma_p[i] / sigma_q[i]) + (sigma_q[i] * sigma_q[i] + d * d) / (2.0 * sigma_p[i] * sigma_p[i]) - 0.5;
    }
    return kl;
}

ag::Var reparameterize(const LatentGaussian& g, const Tensor& eps)
{
    if (eps.shape() != g.mu.shape()) {
        domain_fail("reparameterize: noise " + shape_string(eps.shape()) + " does not match latent " +
                    shape_string(g.mu.shape()));
    }
    return ag::add(g.mu, ag::mul(g.sigma(), ag::constant(eps)));
}

ag::Var symmetry_log_prior(const ag::Var& s, const SymmetryPrior& prior)
{
    require(prior.sigma > 0.0, "symmetry prior sigma must be positive");
    const double var = prior.sigma * prior.sigma;
    const double log_norm = -0.5 * std::log(2.0 * std::numbers::pi * var);
    // sum_i [log_norm - (s_i - mu)^2 / (2 var)]
    ag::Var sq = ag::square(ag::add_scalar(s, -prior.mu));
    ag::Var per = ag::add_scalar(ag::mul_scalar(sq, -0.5 / var), log_norm);
    return ag::sum_per_item(per);
}

ag::Var rec_likelihood(const ag::Var& x_g, const ag::Var& x_hat, const ag::Var& d_real, const ag::Var& d_fake,
                       const ObjectiveWeights& w)
{
    check_same(x_g, x_hat, "rec_likelihood");
    check_same(d_real, d_fake, "rec_likelihood");
    ag::Var d = ag::sub(d_real, d_fake);
    ag::Var adv = w.square_rec_adversarial ? l2_norm_squared(d, w.reduction) : l2_norm(d, w.reduction);
    ag::Var rec = l1_norm(ag::sub(x_g, x_hat), w.reduction);
    return ag::add(ag::mul_scalar(adv, w.alpha), ag::mul_scalar(rec, w.beta));
}

ag::Var gen_likelihood(const ag::Var& x_l, const ag::Var& mask, const ag::Var& x_tilde, const ag::Var& d_fake,
                       const ObjectiveWeights& w)
{
    check_same(x_l, x_tilde, "gen_likelihood");
    ag::Var adv = l2_norm_squared(ag::add_scalar(ag::mul_scalar(d_fake, -1.0), 1.0), w.reduction);
    ag::Var diff = ag::mul_channel_bcast(ag::sub(x_l, x_tilde), mask);
    ag::Var rec = l1_norm(diff, w.reduction);
    return ag::add(ag::mul_scalar(adv, w.alpha), ag::mul_scalar(rec, w.beta));
}

ag::Var combined_objective(const ag::Var& l_rec, const ag::Var& l_gen, double gamma)
{
    require(gamma >= 0.0 && gamma <= 1.0, "gamma must lie in [0, 1]");
    return ag::add(ag::mul_scalar(l_rec, gamma), ag::mul_scalar(l_gen, 1.0 - gamma));
}

double combined_objective(double l_rec, double l_gen, double gamma)
{
    require(gamma >= 0.0 && gamma <= 1.0, "gamma must lie in [0, 1]");
    return gamma * l_rec + (1.0 - gamma) * l_gen;
}

ag::Var discriminator_loss(const ag::Var& d_real, const ag::Var& d_fake)
{
    check_same(d_real, d_fake, "discriminator_loss");
    ag::Var real = ag::square(ag::add_scalar(ag::mul_scalar(d_real, -1.0), 1.0));
    return ag::add(ag::mean_all(real), ag::mean_all(ag::square(d_fake)));
}

} // namespace spheregen
