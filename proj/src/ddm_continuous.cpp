#include "rcd/ddm_continuous.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

namespace rcd {

ContinuousSchedule make_continuous_schedule(int steps, double beta_start, double beta_end) {
    if (steps < 1) throw InvalidArgument("continuous schedule: steps must be >= 1");
    if (!(beta_start > 0.0 && beta_end >= beta_start)) {
        throw InvalidArgument("continuous schedule: need 0 < beta_start <= beta_end");
    }
    const double scale = static_cast<double>(kBetaReferenceSteps) / steps;
    const double b0 = beta_start * scale;
    const double b1 = beta_end * scale;
    if (!(b1 < 1.0)) throw InvalidArgument("continuous schedule: scaled beta_end must be < 1");

    ContinuousSchedule s;
    s.steps = steps;
    const auto size = static_cast<std::size_t>(steps + 1);
    s.beta.assign(size, 0.0);
    s.alpha.assign(size, 1.0);
    s.alpha_bar.assign(size, 1.0);
    s.posterior_var.assign(size, 0.0);
    for (int n = 1; n <= steps; ++n) {
        const auto i = static_cast<std::size_t>(n);
        const double t = steps == 1 ? 1.0 : static_cast<double>(n - 1) / (steps - 1);
        s.beta[i] = b0 + t * (b1 - b0);
        s.alpha[i] = 1.0 - s.beta[i];
        s.alpha_bar[i] = s.alpha_bar[i - 1] * s.alpha[i];
        s.posterior_var[i] = s.beta[i] * (1.0 - s.alpha_bar[i - 1]) / (1.0 - s.alpha_bar[i]);
    }
    if (s.alpha_bar[size - 1] > 1e-3) {
        throw InvalidArgument("continuous schedule: terminal alpha_bar " +
                              std::to_string(s.alpha_bar[size - 1]) + " exceeds 1e-3");
    }
    return s;
}

void PointBatch::check_finite() const {
    if (labels.size() != points.size()) throw DataError("point batch: label count mismatch");
    for (const auto& p : points) {
        if (!std::isfinite(p[0]) || !std::isfinite(p[1])) throw DataError("point batch: non-finite value");
    }
}

static void check_step(const ContinuousSchedule& s, int n, int lo) {
    if (n < lo || n > s.steps) {
        throw InvalidArgument("step " + std::to_string(n) + " outside [" + std::to_string(lo) + ", " +
                              std::to_string(s.steps) + "]");
    }
}

Point forward_noise(const ContinuousSchedule& s, const Point& x0, int n, const Point& eps) {
    check_step(s, n, 0);
    const double a = std::sqrt(s.alpha_bar[static_cast<std::size_t>(n)]);
    const double b = std::sqrt(1.0 - s.alpha_bar[static_cast<std::size_t>(n)]);
    return {a * x0[0] + b * eps[0], a * x0[1] + b * eps[1]};
}

Point forward_step(const ContinuousSchedule& s, const Point& x_prev, int n, const Point& eps) {
    check_step(s, n, 1);
    const double a = std::sqrt(s.alpha[static_cast<std::size_t>(n)]);
    const double b = std::sqrt(s.beta[static_cast<std::size_t>(n)]);
    return {a * x_prev[0] + b * eps[0], a * x_prev[1] + b * eps[1]};
}

Point standard_normal_point(Rng& rng) {
    const double a = rng.normal();
    const double b = rng.normal();
    return {a, b};
}

NoisingDraw draw_noising(const ContinuousSchedule& s, const Point& x0, Rng& rng) {
    NoisingDraw d;
    d.n = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(s.steps)));
    d.eps = standard_normal_point(rng);
    d.xn = forward_noise(s, x0, d.n, d.eps);
    return d;
}

double eps_loss(const EpsModel& model, const ContinuousSchedule& s, const PointBatch& x0, Rng& rng) {
    if (x0.size() == 0) return 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < x0.size(); ++i) {
        const auto d = draw_noising(s, x0.points[i], rng);
        const Point e = model(d.xn, d.n, i, true);
        total += (d.eps[0] - e[0]) * (d.eps[0] - e[0]) + (d.eps[1] - e[1]) * (d.eps[1] - e[1]);
    }
    return total / static_cast<double>(x0.size());
}

Point cfg_combine_eps(const Point& cond, const Point& uncond, double lambda) {
    if (lambda == 1.0) return cond;
    return {uncond[0] + lambda * (cond[0] - uncond[0]), uncond[1] + lambda * (cond[1] - uncond[1])};
}

PointBatch sample_loop_cont(const EpsModel& model, const ContinuousSchedule& s, std::span<const int> labels,
                            double lambda, Rng& rng) {
    PointBatch out;
    out.labels.assign(labels.begin(), labels.end());
    out.points.resize(labels.size());
    for (auto& p : out.points) p = standard_normal_point(rng);
    for (int n = s.steps; n >= 1; --n) {
        const auto i = static_cast<std::size_t>(n);
        const double coef = s.beta[i] / std::sqrt(1.0 - s.alpha_bar[i]);
        const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha[i]);
        const double sd = std::sqrt(s.posterior_var[i]);
        for (std::size_t item = 0; item < out.points.size(); ++item) {
            Point& x = out.points[item];
            const Point c = lambda == 0.0 ? Point{0.0, 0.0} : model(x, n, item, true);
            const Point u = lambda == 1.0 ? c : model(x, n, item, false);
            const Point e = cfg_combine_eps(c, u, lambda);
            Point mean{inv_sqrt_alpha * (x[0] - coef * e[0]), inv_sqrt_alpha * (x[1] - coef * e[1])};
            if (n > 1) {
                const Point z = standard_normal_point(rng);
                mean[0] += sd * z[0];
                mean[1] += sd * z[1];
            }
            x = mean;
        }
    }
    return out;
}

void write_points_csv(const PointBatch& batch, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write " + path);
    f << "x,y,label\n";
    char buf[96];
    for (std::size_t i = 0; i < batch.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,%d\n", batch.points[i][0], batch.points[i][1],
                      batch.labels[i]);
        f << buf;
    }
    if (!f) throw DataError("write failed: " + path);
}

std::vector<std::size_t> PointWorld::train_indices(int train_per_component) const {
    if (train_per_component < 1 || train_per_component > per_component) {
        throw InvalidArgument("train_per_component out of range");
    }
    std::vector<std::size_t> out;
    for (int c = 0; c < components(); ++c) {
        for (int i = 0; i < train_per_component; ++i) {
            out.push_back(static_cast<std::size_t>(c * per_component + i));
        }
    }
    return out;
}

PointWorld gen_point_world(const PointWorldSpec& spec) {
    if (spec.components < 1 || spec.per_component < 1) throw InvalidArgument("point world: empty spec");
    if (!(spec.sigma > 0.0) || !(spec.radius >= 0.0)) throw InvalidArgument("point world: bad geometry");
    PointWorld w;
    w.sigma = spec.sigma;
    w.per_component = spec.per_component;
    for (int c = 0; c < spec.components; ++c) {
        const double a = 2.0 * std::numbers::pi * c / spec.components + std::numbers::pi / 4.0;
        w.centers.push_back({spec.radius * std::cos(a), spec.radius * std::sin(a)});
    }
    Rng rng(spec.seed);
    for (int c = 0; c < spec.components; ++c) {
        const auto& m = w.centers[static_cast<std::size_t>(c)];
        for (int i = 0; i < spec.per_component; ++i) {
            const Point z = standard_normal_point(rng);
            w.data.points.push_back({m[0] + spec.sigma * z[0], m[1] + spec.sigma * z[1]});
            w.data.labels.push_back(c);
        }
    }
    return w;
}

PointEncoder::PointEncoder(int dim, std::uint64_t seed, double bandwidth) : dim_(dim) {
    if (dim < 1) throw InvalidArgument("point encoder: dim must be positive");
    if (!(bandwidth > 0.0)) throw InvalidArgument("point encoder: bandwidth must be positive");
    Rng rng(derive_seed(seed, 0x9017));
    freq_.resize(static_cast<std::size_t>(2 * dim));
    phase_.resize(static_cast<std::size_t>(dim));
    for (auto& f : freq_) f = rng.normal() / bandwidth;
    for (auto& p : phase_) p = 2.0 * std::numbers::pi * rng.uniform();
}

Embedding PointEncoder::embed(const Point& p) const {
    Vec v(static_cast<std::size_t>(dim_));
    for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = std::cos(freq_[2 * i] * p[0] + freq_[2 * i + 1] * p[1] + phase_[i]);
    }
    return Embedding::normalized(std::move(v));
}

}  // namespace rcd
