#include "rcd/ddm_discrete.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace rcd {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void check_step(const DiscreteSchedule& s, int n, int lo) {
    if (n < lo || n > s.steps) {
        throw InvalidArgument("step " + std::to_string(n) + " outside [" + std::to_string(lo) + ", " +
                              std::to_string(s.steps) + "]");
    }
}

// Fills out[0..V] with q(x_{n-1} | x_n, x_0); returns false when the pair
// has zero joint probability.
bool posterior_into(const DiscreteSchedule& s, int xn, int x0, int n, double* out) {
    const int mask = s.mask();
    const double ab = s.alpha_bar[static_cast<std::size_t>(n)];
    const double bb = s.beta_bar[static_cast<std::size_t>(n)];
    const double gb = s.gamma_bar[static_cast<std::size_t>(n)];
    const double joint = xn == mask ? gb : (xn == x0 ? ab + bb : bb);
    if (!(joint > 0.0)) return false;
    if (n == 1) {
        std::fill(out, out + s.symbols(), 0.0);
        out[x0] = 1.0;
        return true;
    }
    const double pab = s.alpha_bar[static_cast<std::size_t>(n - 1)];
    const double pbb = s.beta_bar[static_cast<std::size_t>(n - 1)];
    const double pgb = s.gamma_bar[static_cast<std::size_t>(n - 1)];
    double total = 0.0;
    for (int j = 0; j < s.symbols(); ++j) {
        const double prior = j == mask ? pgb : (j == x0 ? pab + pbb : pbb);
        const double w = s.transition(n, j, xn) * prior;
        out[j] = w;
        total += w;
    }
    if (!(total > 0.0)) return false;
    for (int j = 0; j < s.symbols(); ++j) out[j] /= total;
    return true;
}

double log_sum_exp(std::span<const double> v) {
    double mx = kNegInf;
    for (double x : v) mx = std::max(mx, x);
    if (mx == kNegInf) return kNegInf;
    double s = 0.0;
    for (double x : v) s += std::exp(x - mx);
    return mx + std::log(s);
}

void check_grid_dist(const GridDist& d, int positions, int symbols) {
    if (d.positions != positions || d.symbols != symbols) {
        throw InvalidArgument("distribution shape mismatch");
    }
}

}  // namespace

ScheduleKind parse_schedule_kind(const std::string& name) {
    if (name == "linear-mask") return ScheduleKind::LinearMask;
    if (name == "mask-only") return ScheduleKind::MaskOnly;
    throw InvalidArgument("unknown schedule kind '" + name + "'");
}

std::string to_string(ScheduleKind kind) {
    return kind == ScheduleKind::LinearMask ? "linear-mask" : "mask-only";
}

double DiscreteSchedule::transition(int n, int from, int to) const {
    const auto i = static_cast<std::size_t>(n);
    if (from == mask()) return to == mask() ? 1.0 : 0.0;
    if (to == mask()) return gamma[i];
    return to == from ? alpha[i] + beta[i] : beta[i];
}

DiscreteSchedule make_schedule(int steps, int vocab, ScheduleKind kind, double slack, double uniform_ramp) {
    if (steps < 1) throw InvalidArgument("schedule needs at least one step");
    if (vocab < 1) throw InvalidArgument("schedule needs a non-empty vocabulary");
    if (!(slack > 0.0 && slack <= 1e-4)) {
        throw InvalidArgument("terminal mask slack must lie in (0, 1e-4]");
    }
    if (kind == ScheduleKind::MaskOnly) uniform_ramp = 0.0;
    if (!(uniform_ramp >= 0.0 && uniform_ramp < 1.0)) {
        throw InvalidArgument("uniform ramp must lie in [0, 1): keep probabilities would turn negative");
    }
    DiscreteSchedule s;
    s.steps = steps;
    s.vocab = vocab;
    s.kind = kind;
    const auto n1 = static_cast<std::size_t>(steps) + 1;
    s.alpha.assign(n1, 0.0);
    s.beta.assign(n1, 0.0);
    s.gamma.assign(n1, 0.0);
    s.alpha_bar.assign(n1, 0.0);
    s.beta_bar.assign(n1, 0.0);
    s.gamma_bar.assign(n1, 0.0);
    s.alpha[0] = 1.0;
    std::vector<double> unmasked(n1), kept(n1);
    for (std::size_t n = 0; n < n1; ++n) {
        const double t = static_cast<double>(n) / steps;
        unmasked[n] = 1.0 - t * (1.0 - slack);
        kept[n] = 1.0 - uniform_ramp * t;
        s.alpha_bar[n] = unmasked[n] * kept[n];
        s.beta_bar[n] = unmasked[n] * (1.0 - kept[n]) / vocab;
        s.gamma_bar[n] = 1.0 - unmasked[n];
    }
    for (std::size_t n = 1; n < n1; ++n) {
        s.alpha[n] = s.alpha_bar[n] / s.alpha_bar[n - 1];
        s.gamma[n] = 1.0 - unmasked[n] / unmasked[n - 1];
        double b = (1.0 - s.alpha[n] - s.gamma[n]) / vocab;
        if (b < 0.0) {
            if (b < -1e-15) throw InvalidArgument("infeasible schedule: negative uniform probability");
            b = 0.0;
        }
        s.beta[n] = b;
        if (s.alpha[n] < 0.0 || s.gamma[n] < 0.0) throw InvalidArgument("infeasible schedule");
    }
    return s;
}

std::string dump_schedule(const DiscreteSchedule& s) {
    std::ostringstream out;
    out << "# kind=" << to_string(s.kind) << " N=" << s.steps << " V=" << s.vocab << "\n";
    out << "n alpha beta gamma alpha_bar beta_bar gamma_bar\n";
    char buf[256];
    for (int n = 0; n <= s.steps; ++n) {
        const auto i = static_cast<std::size_t>(n);
        std::snprintf(buf, sizeof buf, "%d %.12g %.12g %.12g %.12g %.12g %.12g\n", n, s.alpha[i], s.beta[i],
                      s.gamma[i], s.alpha_bar[i], s.beta_bar[i], s.gamma_bar[i]);
        out << buf;
    }
    return out.str();
}

Vec q_marginal(const DiscreteSchedule& s, int x0, int n) {
    if (x0 < 0 || x0 >= s.vocab) throw InvalidArgument("x0 must be a data token");
    check_step(s, n, 0);
    const auto i = static_cast<std::size_t>(n);
    Vec out(static_cast<std::size_t>(s.symbols()), s.beta_bar[i]);
    out[static_cast<std::size_t>(x0)] += s.alpha_bar[i];
    out[static_cast<std::size_t>(s.mask())] = s.gamma_bar[i];
    return out;
}

TokenGrid sample_forward(const DiscreteSchedule& s, const TokenGrid& x0, int n, Rng& rng) {
    x0.check_data(s.vocab);
    check_step(s, n, 0);
    TokenGrid out = x0;
    const auto i = static_cast<std::size_t>(n);
    const double ab = s.alpha_bar[i];
    const double gb = s.gamma_bar[i];
    for (auto& t : out.tokens) {
        // Mask, keep, or resample uniformly (the resample may land on x0).
        const double u = rng.uniform();
        if (u < gb) {
            t = s.mask();
        } else if (u >= gb + ab) {
            t = static_cast<int>(rng.below(static_cast<std::uint64_t>(s.vocab)));
        }
    }
    return out;
}

Vec q_posterior(const DiscreteSchedule& s, int xn, int x0, int n) {
    if (x0 < 0 || x0 >= s.vocab) throw InvalidArgument("x0 must be a data token");
    if (xn < 0 || xn > s.mask()) throw InvalidArgument("x_n out of range");
    check_step(s, n, 1);
    Vec out(static_cast<std::size_t>(s.symbols()));
    if (!posterior_into(s, xn, x0, n, out.data())) {
        throw InvalidArgument("impossible state: x_n=" + std::to_string(xn) + " cannot follow x_0=" +
                              std::to_string(x0) + " at step " + std::to_string(n));
    }
    return out;
}

// ---------------------------------------------------------------------------
// GridDist

GridDist::GridDist(int p, int sym, Vec lp) : positions(p), symbols(sym), logp(std::move(lp)) {
    if (p < 0 || sym < 1 || logp.size() != static_cast<std::size_t>(p) * static_cast<std::size_t>(sym)) {
        throw InvalidArgument("GridDist shape mismatch");
    }
}

GridDist GridDist::from_token_logits(int positions, int vocab, std::span<const double> logits) {
    if (logits.size() != static_cast<std::size_t>(positions) * static_cast<std::size_t>(vocab)) {
        throw InvalidArgument("logit count mismatch");
    }
    GridDist d(positions, vocab + 1, Vec(static_cast<std::size_t>(positions) * (vocab + 1), kNegInf));
    for (int i = 0; i < positions; ++i) {
        const auto row = logits.subspan(static_cast<std::size_t>(i * vocab), static_cast<std::size_t>(vocab));
        const double lse = log_sum_exp(row);
        for (int k = 0; k < vocab; ++k) {
            d.logp[static_cast<std::size_t>(i * (vocab + 1) + k)] = row[static_cast<std::size_t>(k)] - lse;
        }
    }
    return d;
}

GridDist GridDist::point_mass(const TokenGrid& grid, int symbols) {
    GridDist d(grid.size(), symbols, Vec(static_cast<std::size_t>(grid.size() * symbols), kNegInf));
    for (int i = 0; i < grid.size(); ++i) {
        const int t = grid.tokens[static_cast<std::size_t>(i)];
        if (t < 0 || t >= symbols) throw InvalidArgument("token outside distribution support");
        d.logp[static_cast<std::size_t>(i * symbols + t)] = 0.0;
    }
    return d;
}

double GridDist::prob(int i, int k) const {
    return std::exp(logp[static_cast<std::size_t>(i * symbols + k)]);
}

void GridDist::check_normalized(double tol) const {
    for (int i = 0; i < positions; ++i) {
        const double lse = log_sum_exp(row(i));
        if (!(std::abs(lse) <= tol)) {
            throw InvalidArgument("distribution at position " + std::to_string(i) + " is not normalized");
        }
    }
}

int GridDist::argmax(int i) const {
    const auto r = row(i);
    return static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
}

// ---------------------------------------------------------------------------
// Reverse step and losses

namespace {

// Mixture sum_k p_k post(k) over the x0 candidates compatible with x_n.
// Returns the normalizer Z = sum of compatible p_k (0 if none).
double mixture_into(const DiscreteSchedule& s, const GridDist& x0_dist, int i, int xn, int n,
                    double* mix, std::vector<double>& post_all, std::vector<char>& possible) {
    const int sym = s.symbols();
    std::fill(mix, mix + sym, 0.0);
    double z = 0.0;
    for (int k = 0; k < s.vocab; ++k) {
        double* post = post_all.data() + static_cast<std::size_t>(k * sym);
        possible[static_cast<std::size_t>(k)] = posterior_into(s, xn, k, n, post) ? 1 : 0;
        const double pk = x0_dist.prob(i, k);
        if (!possible[static_cast<std::size_t>(k)] || pk == 0.0) continue;
        z += pk;
        for (int j = 0; j < sym; ++j) mix[j] += pk * post[j];
    }
    return z;
}

void check_x0_dist(const DiscreteSchedule& s, const GridDist& x0_dist, int positions) {
    check_grid_dist(x0_dist, positions, s.symbols());
    x0_dist.check_normalized();
    for (int i = 0; i < positions; ++i) {
        if (x0_dist.prob(i, s.mask()) > 1e-12) throw InvalidArgument("x0 prediction puts mass on MASK");
    }
}

}  // namespace

GridDist p_theta_step(const DiscreteSchedule& s, const GridDist& x0_dist, const TokenGrid& xn, int n) {
    check_step(s, n, 1);
    xn.check_state(s.vocab);
    check_x0_dist(s, x0_dist, xn.size());
    const int sym = s.symbols();
    GridDist out(xn.size(), sym, Vec(static_cast<std::size_t>(xn.size() * sym)));
    std::vector<double> post(static_cast<std::size_t>(s.vocab * sym));
    std::vector<char> possible(static_cast<std::size_t>(s.vocab));
    Vec mix(static_cast<std::size_t>(sym));
    for (int i = 0; i < xn.size(); ++i) {
        const double z = mixture_into(s, x0_dist, i, xn.tokens[static_cast<std::size_t>(i)], n, mix.data(),
                                      post, possible);
        if (!(z > 0.0)) {
            throw InvalidArgument("impossible state at position " + std::to_string(i) +
                                  ": no predicted x0 is compatible with x_n");
        }
        for (int j = 0; j < sym; ++j) {
            out.logp[static_cast<std::size_t>(i * sym + j)] = std::log(mix[static_cast<std::size_t>(j)] / z);
        }
    }
    return out;
}

VlbTerms vlb_terms(const DiscreteSchedule& s, const GridDist& x0_dist, const TokenGrid& x0,
                   const TokenGrid& xn, int n, double xi, Vec* grad_logits) {
    check_step(s, n, 1);
    x0.check_data(s.vocab);
    xn.check_state(s.vocab);
    if (!x0.same_shape(xn)) throw InvalidArgument("x0 and x_n shapes differ");
    check_x0_dist(s, x0_dist, x0.size());
    if (!(xi >= 0.0)) throw InvalidArgument("xi must be non-negative");

    const int sym = s.symbols();
    const int V = s.vocab;
    const int P = x0.size();
    if (grad_logits) grad_logits->assign(static_cast<std::size_t>(P * V), 0.0);

    std::vector<double> post(static_cast<std::size_t>(V * sym));
    std::vector<char> possible(static_cast<std::size_t>(V));
    Vec mix(static_cast<std::size_t>(sym)), q(static_cast<std::size_t>(sym)), g(static_cast<std::size_t>(V));
    VlbTerms t;
    for (int i = 0; i < P; ++i) {
        const int truth = x0.tokens[static_cast<std::size_t>(i)];
        const int cur = xn.tokens[static_cast<std::size_t>(i)];
        if (!posterior_into(s, cur, truth, n, q.data())) {
            throw InvalidArgument("impossible state: x_n does not follow x_0 at position " + std::to_string(i));
        }
        const double z = mixture_into(s, x0_dist, i, cur, n, mix.data(), post, possible);
        // KL(q || mix / z); q is supported only where mix is, unless the
        // prediction gives zero mass to the truth.
        double kl = 0.0;
        for (int j = 0; j < sym; ++j) {
            const double qj = q[static_cast<std::size_t>(j)];
            if (qj <= 0.0) continue;
            const double pj = mix[static_cast<std::size_t>(j)] / z;
            kl += qj * (std::log(qj) - std::log(pj));
        }
        t.main += kl;
        if (n > 1) t.aux -= x0_dist.logp[static_cast<std::size_t>(i * sym + truth)];

        if (grad_logits) {
            // d KL / d p_k = -sum_j q_j post_j(k) / mix_j + 1 / z for compatible k.
            for (int k = 0; k < V; ++k) {
                double gk = 0.0;
                if (possible[static_cast<std::size_t>(k)]) {
                    const double* pk = post.data() + static_cast<std::size_t>(k * sym);
                    for (int j = 0; j < sym; ++j) {
                        const double qj = q[static_cast<std::size_t>(j)];
                        if (qj > 0.0) gk -= qj * pk[j] / mix[static_cast<std::size_t>(j)];
                    }
                    gk += 1.0 / z;
                }
                g[static_cast<std::size_t>(k)] = gk;
            }
            double pg = 0.0;
            for (int k = 0; k < V; ++k) pg += x0_dist.prob(i, k) * g[static_cast<std::size_t>(k)];
            for (int k = 0; k < V; ++k) {
                const double pk = x0_dist.prob(i, k);
                double d = pk * (g[static_cast<std::size_t>(k)] - pg);
                if (n > 1) d += xi * (pk - (k == truth ? 1.0 : 0.0));
                (*grad_logits)[static_cast<std::size_t>(i * V + k)] = d;
            }
        }
    }
    t.loss = t.main + xi * t.aux;
    return t;
}

double prior_kl_per_position(const DiscreteSchedule& s) {
    const auto N = static_cast<std::size_t>(s.steps);
    const double gb = s.gamma_bar[N];
    const double token_prior = (1.0 - gb) / s.vocab;
    const double own = s.alpha_bar[N] + s.beta_bar[N];
    const double other = s.beta_bar[N];
    double kl = 0.0;
    if (own > 0.0) kl += own * std::log(own / token_prior);
    if (other > 0.0) kl += (s.vocab - 1) * other * std::log(other / token_prior);
    return kl;  // the mask terms match exactly
}

GridDist cfg_combine(const GridDist& cond, const GridDist& uncond, double lambda) {
    if (cond.positions != uncond.positions || cond.symbols != uncond.symbols) {
        throw InvalidArgument("cfg_combine: shape mismatch");
    }
    if (!std::isfinite(lambda)) throw InvalidArgument("cfg_combine: guidance scale must be finite");
    if (lambda == 1.0) return cond;
    GridDist out(cond.positions, cond.symbols, Vec(cond.logp.size()));
    for (std::size_t e = 0; e < cond.logp.size(); ++e) {
        const double c = cond.logp[e];
        const double u = uncond.logp[e];
        // A symbol excluded by either branch stays excluded.
        out.logp[e] = (c == kNegInf || u == kNegInf) ? kNegInf : u + lambda * (c - u);
    }
    for (int i = 0; i < out.positions; ++i) {
        const double lse = log_sum_exp(out.row(i));
        if (!std::isfinite(lse)) throw InvalidArgument("cfg_combine: empty support");
        for (int k = 0; k < out.symbols; ++k) out.logp[static_cast<std::size_t>(i * out.symbols + k)] -= lse;
    }
    return out;
}

SampleResult sample_loop(const X0Model& model, const DiscreteSchedule& s, int height, int width,
                         double lambda, Rng& rng) {
    SampleResult res;
    TokenGrid x = TokenGrid::filled(height, width, s.mask());
    GridDist last;
    Vec probs(static_cast<std::size_t>(s.symbols()));
    for (int n = s.steps; n >= 1; --n) {
        GridDist g;
        if (lambda == 0.0) {
            g = model(x, n, false);
        } else if (lambda == 1.0) {
            g = model(x, n, true);
        } else {
            g = cfg_combine(model(x, n, true), model(x, n, false), lambda);
        }
        const GridDist step = p_theta_step(s, g, x, n);
        for (int i = 0; i < x.size(); ++i) {
            const auto row = step.row(i);
            for (int j = 0; j < s.symbols(); ++j) probs[static_cast<std::size_t>(j)] = std::exp(row[static_cast<std::size_t>(j)]);
            x.tokens[static_cast<std::size_t>(i)] = static_cast<int>(rng.categorical(probs));
        }
        last = std::move(g);
    }
    for (int i = 0; i < x.size(); ++i) {
        auto& t = x.tokens[static_cast<std::size_t>(i)];
        if (t == s.mask()) {
            t = last.argmax(i);
            ++res.residual_masks;
        }
    }
    res.grid = std::move(x);
    return res;
}

}  // namespace rcd
