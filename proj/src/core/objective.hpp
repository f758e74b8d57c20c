#pragma once

// Objective terms of the symmetry-conditioned CVAE-GAN.
//
// The lower bound on log p(x_g | x_l) with latent (z, s) is approximated two
// ways. With q(z, s | x_g, x_l) = q(z | x_g) q(s | x_g):
//
//   L_rec = -KL(q(z|x_g) || p(z|x_l)) - KL(q(s|x_g) || p(s)) + E[l_rec]
//
// and with q(z, s | x_g, x_l) = q(z | x_l) q(s), where both KL terms attain
// their minimum 0 at q = p and therefore drop out:
//
//   L_gen = E_{p(z|x_l) p(s)}[l_gen]
//
// The generator maximizes gamma * L_rec + (1 - gamma) * L_gen. q(s | x_g) is
// a delta at the estimated s, so its KL against p(s) reduces (up to the
// parameter-independent entropy of the delta) to -log p(s_est).

#include "core/autograd.hpp"
#include "core/nn.hpp"

namespace spheregen {

struct ObjectiveWeights {
    double alpha = -1.0;
    double beta = -20.0;
    double gamma = 0.5;
    Reduction reduction = Reduction::mean;
    bool square_rec_adversarial = false;

    static ObjectiveWeights from(const ModelConfig& cfg);
    void validate() const;
};

struct SymmetryPrior {
    double mu = 0.50;
    double sigma = 0.33;
};

// Closed-form KL(q || p) of diagonal Gaussians, summed per item -> [N].
ag::Var gaussian_kl(const LatentGaussian& q, const LatentGaussian& p);
// Scalar version on explicit sigmas; sigma <= 0 is a domain error.
double gaussian_kl(const Tensor& mu_q, const Tensor& sigma_q, const Tensor& mu_p, const Tensor& sigma_p);

// z = mu + sigma * eps.
ag::Var reparameterize(const LatentGaussian& g, const Tensor& eps);

// sum_i log N(s_i | mu_s, sigma_s^2) per item -> [N].
ag::Var symmetry_log_prior(const ag::Var& s, const SymmetryPrior& prior);

// alpha * ||D(x_g) - D(x_hat)||_2 + beta * ||x_g - x_hat||_1 per item -> [N].
ag::Var rec_likelihood(const ag::Var& x_g, const ag::Var& x_hat, const ag::Var& d_real, const ag::Var& d_fake,
                       const ObjectiveWeights& w);

// alpha * ||1 - D(x_tilde)||_2^2 + beta * ||M(x_l) - M(x_tilde)||_1 per item -> [N].
// mask: [N x 1 x H x W].
ag::Var gen_likelihood(const ag::Var& x_l, const ag::Var& mask, const ag::Var& x_tilde, const ag::Var& d_fake,
                       const ObjectiveWeights& w);

ag::Var combined_objective(const ag::Var& l_rec, const ag::Var& l_gen, double gamma);
double combined_objective(double l_rec, double l_gen, double gamma);

// LSGAN discriminator loss: mean over batch and patches of (1 - d_real)^2 + d_fake^2.
ag::Var discriminator_loss(const ag::Var& d_real, const ag::Var& d_fake);

// Per-item norms under a reduction mode (mean divides by the element count).
ag::Var l1_norm(const ag::Var& x, Reduction r);
ag::Var l2_norm(const ag::Var& x, Reduction r);
ag::Var l2_norm_squared(const ag::Var& x, Reduction r);

} // namespace spheregen
