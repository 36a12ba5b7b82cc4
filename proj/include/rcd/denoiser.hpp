#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "rcd/common.hpp"
#include "rcd/ddm_continuous.hpp"
#include "rcd/ddm_discrete.hpp"
#include "rcd/embedspace.hpp"
#include "rcd/vecindex.hpp"

namespace rcd {

/// How the query and its neighbors become the cross-attention context.
enum class FusionVariant {
    SelfAttnK1,     ///< self-attention over query + K neighbors, K+1 context rows
    CrossAttnPool,  ///< one learned pooling query attends over them, 1 row
    ConcatLinear,   ///< linear map of the concatenation, 1 row
};

FusionVariant parse_fusion_variant(const std::string& name);
std::string to_string(FusionVariant v);
inline constexpr FusionVariant kFusionVariants[] = {FusionVariant::SelfAttnK1, FusionVariant::CrossAttnPool,
                                                    FusionVariant::ConcatLinear};

enum class DenoiserHead { Discrete, Continuous };

/// Query embedding plus exactly K neighbor slots. Slots past `available`
/// are zero vectors (the store held fewer than K items).
struct ConditionSet {
    Vec query;
    std::vector<Vec> neighbors;
    int available = 0;
    bool is_null = false;

    int k() const { return static_cast<int>(neighbors.size()); }
    int dim() const { return static_cast<int>(query.size()); }
    bool truncated() const { return available < k(); }

    /// Copies `found` (at most k) and zero-pads up to k slots.
    static ConditionSet make(const Embedding& query, std::span<const Embedding> found, int k);
    /// All-zero condition used for the unconditional branch.
    static ConditionSet null_condition(int dim, int k);
    /// Same shape with every vector zeroed and the null flag set.
    ConditionSet nulled() const;
};

struct DenoiserConfig {
    DenoiserHead head = DenoiserHead::Discrete;
    FusionVariant fusion = FusionVariant::SelfAttnK1;
    int vocab = 10;
    int height = 8;
    int width = 8;
    int embed_dim = kDefaultDim;
    int model_dim = 32;
    int ffn_dim = 128;
    int layers = 1;
    int time_features = 8;
    int steps = 100;  ///< diffusion steps, scales the timestep code
    int k = 10;       ///< neighbor slots; fixes the concat-linear input width
    bool manip_context = false;

    int positions() const { return height * width; }
    /// Throws InvalidArgument on bad sizes or when embed_dim != space_dim.
    void validate(int space_dim = kDefaultDim) const;
    friend bool operator==(const DenoiserConfig&, const DenoiserConfig&) = default;
};

struct ParamBlock {
    std::string name;
    std::size_t offset = 0;
    int rows = 0;
    int cols = 0;
    std::size_t size() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
};

/// Conditional x0 predictor (discrete head) or eps predictor (continuous
/// head). Parameters live in one flat vector; `blocks()` names the slices.
class Denoiser {
  public:
    static Denoiser init(const DenoiserConfig& config, std::uint64_t seed, int space_dim = kDefaultDim);

    const DenoiserConfig& config() const { return cfg_; }
    const Vec& params() const { return params_; }
    Vec& params() { return params_; }
    std::size_t param_count() const { return params_.size(); }
    const std::vector<ParamBlock>& blocks() const { return blocks_; }
    const ParamBlock& block(const std::string& name) const;

    /// Cross-attention context (rows x model_dim). Null conditions give zeros.
    RowMatrix fuse_condition(const ConditionSet& cond) const;

    /// Token logits (positions x V) before normalization; MASK is not an output.
    Vec logits(const TokenGrid& xn, int n, const RowMatrix& context, const TokenGrid* manip = nullptr) const;
    GridDist forward(const TokenGrid& xn, int n, const ConditionSet& cond,
                     const TokenGrid* manip = nullptr) const;

    Point forward_eps(const Point& xn, int n, const RowMatrix& context) const;
    Point forward_eps(const Point& xn, int n, const ConditionSet& cond) const;

    /// loss(logits) with d loss / d logits written to the second argument.
    using LogitLoss = std::function<double(std::span<const double>, Vec&)>;
    using EpsLossFn = std::function<double(const Point&, Point&)>;

    /// Adds the exact parameter gradient of the loss into `grad` (resized to
    /// param_count() when empty) and returns the loss. Throws
    /// DivergenceError (step -1) on a non-finite loss.
    double grad(const TokenGrid& xn, int n, const ConditionSet& cond, const TokenGrid* manip,
                const LogitLoss& loss, Vec& grad) const;
    double grad_eps(const Point& xn, int n, const ConditionSet& cond, const EpsLossFn& loss, Vec& grad) const;

    void save(const std::string& path) const;
    static Denoiser load(const std::string& path);

    friend bool operator==(const Denoiser& a, const Denoiser& b) {
        return a.cfg_ == b.cfg_ && a.params_ == b.params_;
    }

    struct LayerOffsets {
        std::size_t gs, bs, gc, bc, gf, bf, sq, sk, sv, so, cq, ck, cv, co, w1, b1, w2, b2;
    };
    struct Layout {
        std::size_t win = 0, role = 0, fq = 0, fk = 0, fv = 0, fo = 0, pq = 0, wcat = 0;
        std::size_t tok = 0, pos = 0, ctok = 0;
        std::vector<LayerOffsets> layers;
        std::size_t go = 0, bo = 0, wout = 0, bout = 0;
        std::size_t wx = 0, wt = 0, bx = 0, ccq = 0, cck = 0, ccv = 0, cco = 0;
        std::size_t cw1 = 0, cb1 = 0, cw2 = 0, cb2 = 0, cw3 = 0, cb3 = 0, weps = 0, beps = 0;
    };

  private:
    Denoiser(DenoiserConfig cfg);
    std::size_t add_block(const std::string& name, int rows, int cols);
    void build_layout();
    RowMatrix context_input(const ConditionSet& cond) const;

    DenoiserConfig cfg_;
    std::vector<ParamBlock> blocks_;
    Layout lay_;
    Vec params_;
};

/// Sinusoidal code of step n: sin/cos(pi (n/N) 2^j), j < T/2.
Vec timestep_features(int n, int steps, int count);

}  // namespace rcd
