#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "rcd/common.hpp"
#include "rcd/embedspace.hpp"

namespace rcd {

enum class ScheduleKind {
    LinearMask,  ///< masking ramp plus a small uniform-resampling ramp
    MaskOnly,    ///< pure absorbing chain, no uniform moves
};

ScheduleKind parse_schedule_kind(const std::string& name);
std::string to_string(ScheduleKind kind);

inline constexpr int kDefaultDiffusionSteps = 100;
inline constexpr double kDefaultMaskSlack = 1e-4;
inline constexpr double kDefaultUniformRamp = 0.1;

/// Mask-absorbing transition schedule over V tokens plus MASK (id V).
/// Per-step values are indexed 1..N; cumulative values 0..N with
/// alpha_bar[0] = 1.
struct DiscreteSchedule {
    int steps = 0;
    int vocab = 0;
    ScheduleKind kind = ScheduleKind::LinearMask;
    Vec alpha, beta, gamma;
    Vec alpha_bar, beta_bar, gamma_bar;

    int mask() const { return vocab; }
    int symbols() const { return vocab + 1; }
    /// Q_n[to | from].
    double transition(int n, int from, int to) const;
};

/// The linear-mask kind: the unmasked mass falls linearly to `slack` at
/// n = N, and the fraction of unmasked tokens that were uniformly
/// resampled rises linearly to `uniform_ramp`.
DiscreteSchedule make_schedule(int steps, int vocab, ScheduleKind kind = ScheduleKind::LinearMask,
                               double slack = kDefaultMaskSlack,
                               double uniform_ramp = kDefaultUniformRamp);

/// One row per step: n, alpha, beta, gamma and the cumulatives, 12 significant digits.
std::string dump_schedule(const DiscreteSchedule& s);

/// q(x_n | x_0) over V+1 symbols, n in [0, N].
Vec q_marginal(const DiscreteSchedule& s, int x0, int n);

TokenGrid sample_forward(const DiscreteSchedule& s, const TokenGrid& x0, int n, Rng& rng);

/// q(x_{n-1} | x_n, x_0) over V+1 symbols. Throws InvalidArgument for pairs
/// with zero joint probability.
Vec q_posterior(const DiscreteSchedule& s, int xn, int x0, int n);

/// Per-position categorical log-probabilities.
struct GridDist {
    int positions = 0;
    int symbols = 0;
    Vec logp;  // positions x symbols

    GridDist() = default;
    GridDist(int positions, int symbols, Vec logp);

    /// log-softmax of token logits (positions x V) with MASK at -inf.
    static GridDist from_token_logits(int positions, int vocab, std::span<const double> logits);
    /// Point mass on each token of `grid`.
    static GridDist point_mass(const TokenGrid& grid, int symbols);

    std::span<const double> row(int i) const {
        return std::span<const double>(logp).subspan(static_cast<std::size_t>(i * symbols),
                                                     static_cast<std::size_t>(symbols));
    }
    double prob(int i, int k) const;
    /// Throws InvalidArgument unless every row log-sum-exps to 0 within tol.
    void check_normalized(double tol = 1e-6) const;
    int argmax(int i) const;
};

/// p_theta(x_{n-1} | x_n) = sum_k p(x0_hat = k) q(x_{n-1} | x_n, k).
GridDist p_theta_step(const DiscreteSchedule& s, const GridDist& x0_dist, const TokenGrid& xn, int n);

struct VlbTerms {
    double loss = 0.0;  ///< main + xi * aux
    double main = 0.0;  ///< L_0 at n = 1, summed KL otherwise
    double aux = 0.0;   ///< cross-entropy of the x0 prediction (0 at n = 1)
};

/// Loss terms summed over positions. When `grad_logits` is given, x0_dist
/// must come from token logits and the gradient of `loss` with respect to
/// those logits (positions x V) is written there.
VlbTerms vlb_terms(const DiscreteSchedule& s, const GridDist& x0_dist, const TokenGrid& x0,
                   const TokenGrid& xn, int n, double xi, Vec* grad_logits = nullptr);

/// KL(q(x_N | x_0) || prior) for one position; the prior keeps the chain's
/// terminal mask mass and spreads the rest uniformly over tokens.
double prior_kl_per_position(const DiscreteSchedule& s);

/// Per position: uncond + lambda * (cond - uncond), renormalized.
GridDist cfg_combine(const GridDist& cond, const GridDist& uncond, double lambda);

/// x0 predictor: (x_n, n, conditional) -> distribution over x_0.
using X0Model = std::function<GridDist(const TokenGrid& xn, int n, bool conditional)>;

struct SampleResult {
    TokenGrid grid;
    int residual_masks = 0;
};

/// Ancestral sampling from all-MASK with classifier-free guidance. The
/// unconditional branch is skipped when lambda == 1 and the conditional one
/// when lambda == 0.
SampleResult sample_loop(const X0Model& model, const DiscreteSchedule& s, int height, int width,
                         double lambda, Rng& rng);

}  // namespace rcd
