#pragma once

#include <array>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "rcd/common.hpp"
#include "rcd/embedspace.hpp"

namespace rcd {

inline constexpr int kDefaultContinuousSteps = 100;
/// Linear beta endpoints quoted for a 1000-step chain; shorter chains scale
/// them by 1000 / N so the terminal signal level stays comparable.
inline constexpr double kBetaStartRef = 1e-4;
inline constexpr double kBetaEndRef = 0.02;
inline constexpr int kBetaReferenceSteps = 1000;

/// Gaussian chain q(x_n | x_{n-1}) = N(sqrt(alpha_n) x_{n-1}, beta_n I).
/// Per-step vectors are indexed 1..N; alpha_bar[0] = 1.
struct ContinuousSchedule {
    int steps = 0;
    Vec beta, alpha, alpha_bar;
    Vec posterior_var;  ///< beta_tilde_n = beta_n (1 - alpha_bar_{n-1}) / (1 - alpha_bar_n)
};

/// `beta_start`/`beta_end` are the reference-chain endpoints (see above).
ContinuousSchedule make_continuous_schedule(int steps = kDefaultContinuousSteps,
                                            double beta_start = kBetaStartRef,
                                            double beta_end = kBetaEndRef);

using Point = std::array<double, 2>;

struct PointBatch {
    std::vector<Point> points;
    std::vector<int> labels;

    std::size_t size() const { return points.size(); }
    void check_finite() const;
};

/// sqrt(alpha_bar_n) x0 + sqrt(1 - alpha_bar_n) eps.
Point forward_noise(const ContinuousSchedule& s, const Point& x0, int n, const Point& eps);
/// One kernel step: sqrt(alpha_n) x_prev + sqrt(beta_n) eps.
Point forward_step(const ContinuousSchedule& s, const Point& x_prev, int n, const Point& eps);

Point standard_normal_point(Rng& rng);

/// One training draw for a clean point: n ~ Uniform{1..N}, eps ~ N(0, I).
struct NoisingDraw {
    int n = 0;
    Point eps{};
    Point xn{};
};
NoisingDraw draw_noising(const ContinuousSchedule& s, const Point& x0, Rng& rng);

/// eps predictor for batch element `item`: (x_n, n, item, conditional) -> eps_hat.
using EpsModel = std::function<Point(const Point& xn, int n, std::size_t item, bool conditional)>;

/// Monte-Carlo mean of |eps - eps_hat|^2 over the batch, one draw per element.
double eps_loss(const EpsModel& model, const ContinuousSchedule& s, const PointBatch& x0, Rng& rng);

/// uncond + lambda (cond - uncond); exactly `cond` when lambda == 1.
Point cfg_combine_eps(const Point& cond, const Point& uncond, double lambda);

/// Ancestral sampling with fixed posterior variance. Item i is conditioned
/// through the model's `item` argument and labelled labels[i].
PointBatch sample_loop_cont(const EpsModel& model, const ContinuousSchedule& s,
                            std::span<const int> labels, double lambda, Rng& rng);

void write_points_csv(const PointBatch& batch, const std::string& path);

/// Gaussian-mixture stand-in for a continuous dataset: C isotropic
/// components with centers on a circle.
struct PointWorldSpec {
    std::uint64_t seed = 0;
    int components = 4;
    int per_component = 250;
    double radius = 1.0;
    double sigma = 0.1;
};

struct PointWorld {
    std::vector<Point> centers;
    double sigma = 0.0;
    PointBatch data;
    int per_component = 0;

    int components() const { return static_cast<int>(centers.size()); }
    /// First `train_per_component` points of each component.
    std::vector<std::size_t> train_indices(int train_per_component) const;
};

PointWorld gen_point_world(const PointWorldSpec& spec);

/// Fixed random Fourier features of a point, L2-normalized.
class PointEncoder {
  public:
    explicit PointEncoder(int dim = kDefaultDim, std::uint64_t seed = kDefaultEncoderSeed,
                          double bandwidth = 0.5);
    int dim() const { return dim_; }
    Embedding embed(const Point& p) const;

  private:
    int dim_;
    Vec freq_;   // dim x 2
    Vec phase_;  // dim
};

}  // namespace rcd
