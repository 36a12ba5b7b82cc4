#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rcd/denoiser.hpp"
#include "rcd/embedspace.hpp"
#include "rcd/trainer.hpp"
#include "rcd/vecindex.hpp"

namespace rcd {

/// Axis-aligned rectangle of grid cells.
struct RegionMask {
    int top = 0;
    int left = 0;
    int height = 0;
    int width = 0;

    int area() const { return height * width; }
    bool contains(int row, int col) const {
        return row >= top && row < top + height && col >= left && col < left + width;
    }
    /// Row-major cell flags for an H x W grid.
    std::vector<bool> cells(int grid_height, int grid_width) const;
    /// Throws InvalidArgument unless inside the grid with 1 <= area <= half the cells.
    void validate(int grid_height, int grid_width) const;

    friend bool operator==(const RegionMask&, const RegionMask&) = default;
};

/// Uniform over rectangles covering 10% to 50% of the cells (size drawn
/// first, rejection-sampled, then position).
RegionMask random_region(int grid_height, int grid_width, Rng& rng);

struct Shift {
    int dy = 0;
    int dx = 0;
    friend bool operator==(const Shift&, const Shift&) = default;
};

inline constexpr int kDefaultAlignRadius = 2;

struct Alignment {
    Shift shift;
    double score = 0.0;  ///< Pearson correlation at the chosen shift
    bool degenerate = false;
};

/// src(r, c) moved by `s`: out(r, c) = src(r - dy, c - dx); cells with no
/// source take `fill`.
TokenGrid shift_grid(const TokenGrid& src, Shift s, int fill);

/// Exhaustive integer-translation search. Returns the shift s maximizing the
/// Pearson correlation between one-hot indicators of src and
/// shift_grid(ref, s) over their overlap, so src = shift_grid(ref, s) gives
/// s. Ties go to smaller |dy| + |dx|, then smaller (dy, dx)
/// lexicographically. A constant grid gives (0, 0) flagged degenerate.
Alignment ecc_align(const TokenGrid& src, const TokenGrid& ref, int radius = kDefaultAlignRadius, int vocab = 0);

/// src brought back onto ref's frame after ecc_align(src, ref) = s:
/// out(r, c) = src(r + dy, c + dx), coordinates clamped at the border.
TokenGrid align_to(const TokenGrid& src, Shift s);

struct ManipPair {
    TokenGrid grid;
    TokenGrid manip;
    RegionMask region;  ///< area 0 when region masking is disabled
    Embedding cond;
    std::int64_t neighbor = -1;
    Shift shift;
    bool degenerate = false;

    friend bool operator==(const ManipPair&, const ManipPair&) = default;
};

/// Replaces a random region of `grid` with the aligned content of its
/// nearest stored neighbor (`store[id]` is the grid behind index id); cond
/// embeds only the region's cells. With `empty_region` nothing is replaced
/// and cond embeds the full grid. Throws DataError when no neighbor is left.
ManipPair make_manip_pair(const TokenGrid& grid, const RetrievalIndex& index, std::span<const TokenGrid> store,
                          const GridEncoder& encoder, Rng& rng, std::optional<std::int64_t> exclude = std::nullopt,
                          bool empty_region = false);

/// "RDMANIP1", version (u32), count (u64), H, W, dim (u32); per record grid
/// and manip tokens (u8), region top/left/h/w (u32), neighbor (i64), shift
/// dy/dx (i32), degenerate (u8), cond (f64).
void save_pairs(const std::vector<ManipPair>& pairs, const std::string& path);
std::vector<ManipPair> load_pairs(const std::string& path);

struct ManipConfig {
    bool empty_region = false;             ///< test hook: reconstruction only
    const Denoiser* warm_start = nullptr;  ///< copy same-named blocks from this model
};

/// Manipulation condition: the region (or query) embedding plus its kNN.
ConditionSet manip_condition(const RetrievalIndex& index, const Embedding& query, int k);

/// Trains a manipulation-context denoiser to recover grids from their
/// manipulated versions, drawing fresh pairs from the training split.
TrainResult train_manip(const Experiment& exp, const RetrievalIndex& index, const TrainConfig& cfg,
                        const ManipConfig& mcfg = {});

struct ManipResult {
    TokenGrid edited;
    std::vector<bool> changed;  ///< per cell, edited != input
    int changed_count = 0;
};

/// Samples a grid with `grid` as per-position context and `cond` as condition.
ManipResult apply_manip(const Denoiser& model, const DiscreteSchedule& s, const TokenGrid& grid,
                        const ConditionSet& cond, double lambda, Rng& rng);

}  // namespace rcd
