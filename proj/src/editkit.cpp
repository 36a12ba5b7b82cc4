#include "rcd/editkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <memory>

#include "rcd/binary_io.hpp"

namespace rcd {

namespace {

constexpr char kPairsMagic[9] = "RDMANIP1";
constexpr std::uint32_t kPairsVersion = 1;
constexpr std::uint64_t kManipTag = 0x3A1B;

bool constant(const TokenGrid& g) {
    return std::all_of(g.tokens.begin(), g.tokens.end(), [&](int t) { return t == g.tokens.front(); });
}

}  // namespace

std::vector<bool> RegionMask::cells(int grid_height, int grid_width) const {
    std::vector<bool> out(static_cast<std::size_t>(grid_height * grid_width), false);
    for (int r = 0; r < grid_height; ++r) {
        for (int c = 0; c < grid_width; ++c) out[static_cast<std::size_t>(r * grid_width + c)] = contains(r, c);
    }
    return out;
}

void RegionMask::validate(int grid_height, int grid_width) const {
    if (top < 0 || left < 0 || height < 1 || width < 1 || top + height > grid_height || left + width > grid_width) {
        throw InvalidArgument("region outside the grid");
    }
    if (2 * area() > grid_height * grid_width) throw InvalidArgument("region covers more than half the grid");
}

RegionMask random_region(int grid_height, int grid_width, Rng& rng) {
    const int cells = grid_height * grid_width;
    if (cells < 2) throw InvalidArgument("random_region: grid too small");
    const int lo = std::max(1, static_cast<int>(std::ceil(0.1 * cells - 1e-9)));
    const int hi = cells / 2;
    for (;;) {
        const int h = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(grid_height)));
        const int w = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(grid_width)));
        if (h * w < lo || h * w > hi) continue;
        RegionMask m;
        m.height = h;
        m.width = w;
        m.top = static_cast<int>(rng.below(static_cast<std::uint64_t>(grid_height - h + 1)));
        m.left = static_cast<int>(rng.below(static_cast<std::uint64_t>(grid_width - w + 1)));
        return m;
    }
}

TokenGrid shift_grid(const TokenGrid& src, Shift s, int fill) {
    TokenGrid out = TokenGrid::filled(src.height, src.width, fill);
    for (int r = 0; r < src.height; ++r) {
        for (int c = 0; c < src.width; ++c) {
            const int sr = r - s.dy, sc = c - s.dx;
            if (sr >= 0 && sr < src.height && sc >= 0 && sc < src.width) out.at(r, c) = src.at(sr, sc);
        }
    }
    return out;
}

TokenGrid align_to(const TokenGrid& src, Shift s) {
    TokenGrid out = src;
    for (int r = 0; r < src.height; ++r) {
        for (int c = 0; c < src.width; ++c) {
            const int sr = std::clamp(r + s.dy, 0, src.height - 1);
            const int sc = std::clamp(c + s.dx, 0, src.width - 1);
            out.at(r, c) = src.at(sr, sc);
        }
    }
    return out;
}

Alignment ecc_align(const TokenGrid& src, const TokenGrid& ref, int radius, int vocab) {
    if (!src.same_shape(ref)) throw InvalidArgument("ecc_align: grids differ in shape");
    if (radius < 0) throw InvalidArgument("ecc_align: radius must be >= 0");
    if (vocab <= 0) {
        for (int t : src.tokens) vocab = std::max(vocab, t + 1);
        for (int t : ref.tokens) vocab = std::max(vocab, t + 1);
    }
    src.check_data(vocab);
    ref.check_data(vocab);
    Alignment best;
    if (constant(src) || constant(ref)) {
        best.degenerate = true;
        return best;
    }
    best.score = -std::numeric_limits<double>::infinity();
    bool found = false;
    for (int dy = -radius; dy <= radius; ++dy) {
        for (int dx = -radius; dx <= radius; ++dx) {
            // Indicator vectors over overlap cells x tokens.
            double n = 0, sa = 0, sb = 0, sab = 0, saa = 0, sbb = 0;
            for (int r = 0; r < ref.height; ++r) {
                for (int c = 0; c < ref.width; ++c) {
                    const int rr = r - dy, rc = c - dx;
                    if (rr < 0 || rr >= ref.height || rc < 0 || rc >= ref.width) continue;
                    const int a = src.at(r, c), b = ref.at(rr, rc);
                    for (int k = 0; k < vocab; ++k) {
                        const double ia = a == k ? 1.0 : 0.0;
                        const double ib = b == k ? 1.0 : 0.0;
                        n += 1;
                        sa += ia;
                        sb += ib;
                        sab += ia * ib;
                        saa += ia * ia;
                        sbb += ib * ib;
                    }
                }
            }
            if (n == 0) continue;
            const double cov = sab / n - (sa / n) * (sb / n);
            const double va = saa / n - (sa / n) * (sa / n);
            const double vb = sbb / n - (sb / n) * (sb / n);
            if (va <= 0 || vb <= 0) continue;
            const double score = cov / std::sqrt(va * vb);
            const Shift s{dy, dx};
            const auto cost = [](Shift t) { return std::abs(t.dy) + std::abs(t.dx); };
            bool better = !found || score > best.score;
            if (found && score == best.score) {
                const int c0 = cost(s), c1 = cost(best.shift);
                better = c0 < c1 || (c0 == c1 && std::pair(dy, dx) < std::pair(best.shift.dy, best.shift.dx));
            }
            if (better) {
                best.shift = s;
                best.score = score;
                found = true;
            }
        }
    }
    if (!found) return Alignment{{0, 0}, 0.0, true};
    return best;
}

ManipPair make_manip_pair(const TokenGrid& grid, const RetrievalIndex& index, std::span<const TokenGrid> store,
                          const GridEncoder& encoder, Rng& rng, std::optional<std::int64_t> exclude,
                          bool empty_region) {
    const Embedding e = encoder.embed(grid);
    const auto hits = index.search(e.values(), exclude ? 2 : 1).hits;
    std::int64_t nn = -1;
    for (const auto& h : hits) {
        if (exclude && h.id == *exclude) continue;
        nn = h.id;
        break;
    }
    if (nn < 0) throw DataError("make_manip_pair: no neighbor in the index");
    if (static_cast<std::size_t>(nn) >= store.size()) throw DataError("make_manip_pair: neighbor id outside the grid store");
    const TokenGrid& other = store[static_cast<std::size_t>(nn)];
    if (!other.same_shape(grid)) throw DataError("make_manip_pair: neighbor grid shape differs");

    ManipPair p{grid, grid, RegionMask{}, e, nn, Shift{}, false};
    if (empty_region) return p;
    const Alignment al = ecc_align(other, grid, kDefaultAlignRadius, encoder.vocab());
    p.shift = al.shift;
    p.degenerate = al.degenerate;
    const TokenGrid aligned = align_to(other, al.shift);
    p.region = random_region(grid.height, grid.width, rng);
    const auto keep = p.region.cells(grid.height, grid.width);
    for (std::size_t i = 0; i < keep.size(); ++i) {
        if (keep[i]) p.manip.tokens[i] = aligned.tokens[i];
    }
    std::unique_ptr<bool[]> mask(new bool[keep.size()]);
    for (std::size_t i = 0; i < keep.size(); ++i) mask[i] = keep[i];
    p.cond = encoder.embed_region(grid, std::span<const bool>(mask.get(), keep.size()));
    return p;
}

void save_pairs(const std::vector<ManipPair>& pairs, const std::string& path) {
    BinaryWriter out(path);
    out.magic(kPairsMagic);
    out.put(kPairsVersion);
    out.put(static_cast<std::uint64_t>(pairs.size()));
    const int h = pairs.empty() ? 0 : pairs[0].grid.height;
    const int w = pairs.empty() ? 0 : pairs[0].grid.width;
    const auto dim = pairs.empty() ? 0 : pairs[0].cond.dim();
    out.put(static_cast<std::uint32_t>(h));
    out.put(static_cast<std::uint32_t>(w));
    out.put(static_cast<std::uint32_t>(dim));
    for (const auto& p : pairs) {
        if (p.grid.height != h || p.grid.width != w || !p.manip.same_shape(p.grid) || p.cond.dim() != dim) {
            throw InvalidArgument("save_pairs: records differ in shape");
        }
        for (int t : p.grid.tokens) out.put(static_cast<std::uint8_t>(t));
        for (int t : p.manip.tokens) out.put(static_cast<std::uint8_t>(t));
        out.put(static_cast<std::uint32_t>(p.region.top));
        out.put(static_cast<std::uint32_t>(p.region.left));
        out.put(static_cast<std::uint32_t>(p.region.height));
        out.put(static_cast<std::uint32_t>(p.region.width));
        out.put(static_cast<std::int64_t>(p.neighbor));
        out.put(static_cast<std::int32_t>(p.shift.dy));
        out.put(static_cast<std::int32_t>(p.shift.dx));
        out.put(static_cast<std::uint8_t>(p.degenerate ? 1 : 0));
        for (double v : p.cond.values()) out.put(v);
    }
    out.finish();
}

std::vector<ManipPair> load_pairs(const std::string& path) {
    BinaryReader in(path);
    in.expect_magic(kPairsMagic);
    if (in.get<std::uint32_t>() != kPairsVersion) throw DataError("unsupported pair file version in " + path);
    const auto count = in.get<std::uint64_t>();
    const int h = static_cast<int>(in.get<std::uint32_t>());
    const int w = static_cast<int>(in.get<std::uint32_t>());
    const auto dim = in.get<std::uint32_t>();
    if (h < 0 || w < 0 || h * w > (1 << 20) || dim > (1u << 16)) throw DataError("implausible pair header in " + path);
    const std::size_t record = 2 * static_cast<std::size_t>(h * w) + 16 + 8 + 8 + 1 + 8 * static_cast<std::size_t>(dim);
    in.require(count, record);
    std::vector<ManipPair> out;
    out.reserve(count);
    auto grid = [&] {
        std::vector<int> t(static_cast<std::size_t>(h * w));
        for (auto& v : t) v = in.get<std::uint8_t>();
        return TokenGrid(h, w, std::move(t));
    };
    for (std::uint64_t i = 0; i < count; ++i) {
        ManipPair p;
        p.grid = grid();
        p.manip = grid();
        p.region.top = static_cast<int>(in.get<std::uint32_t>());
        p.region.left = static_cast<int>(in.get<std::uint32_t>());
        p.region.height = static_cast<int>(in.get<std::uint32_t>());
        p.region.width = static_cast<int>(in.get<std::uint32_t>());
        p.neighbor = in.get<std::int64_t>();
        p.shift.dy = in.get<std::int32_t>();
        p.shift.dx = in.get<std::int32_t>();
        p.degenerate = in.get<std::uint8_t>() != 0;
        Vec v = in.get_all<double>(dim);
        try {
            p.cond = Embedding::from_unit(std::move(v));
        } catch (const InvalidArgument&) {
            throw DataError("pair file holds a non-unit condition: " + path);
        }
        out.push_back(std::move(p));
    }
    in.expect_end();
    return out;
}

ConditionSet manip_condition(const RetrievalIndex& index, const Embedding& query, int k) {
    return retrieve_condition(index, query, k);
}

TrainResult train_manip(const Experiment& exp, const RetrievalIndex& index, const TrainConfig& cfg,
                        const ManipConfig& mcfg) {
    cfg.validate();
    const auto& w = exp.world;
    DenoiserConfig mc = cfg.denoiser_config(DenoiserHead::Discrete, w.vocab, w.height, w.width, exp.encoder.dim());
    mc.manip_context = true;
    Denoiser model = Denoiser::init(mc, derive_seed(cfg.seed, kManipTag), exp.encoder.dim());
    if (mcfg.warm_start != nullptr) {
        for (const auto& b : model.blocks()) {
            for (const auto& src : mcfg.warm_start->blocks()) {
                if (src.name != b.name || src.rows != b.rows || src.cols != b.cols) continue;
                std::copy_n(mcfg.warm_start->params().begin() + static_cast<std::ptrdiff_t>(src.offset), b.size(),
                            model.params().begin() + static_cast<std::ptrdiff_t>(b.offset));
            }
        }
    }
    ExampleSource source = [&](Rng& rng) {
        const std::size_t item = exp.train[static_cast<std::size_t>(rng.below(exp.train.size()))];
        ManipPair p = make_manip_pair(w.samples[item], index, w.samples, exp.encoder, rng,
                                      static_cast<std::int64_t>(item), mcfg.empty_region);
        return TrainExample{item, std::move(p.grid), manip_condition(index, p.cond, cfg.k), std::move(p.manip)};
    };
    return train_loop(std::move(model), exp.schedule(cfg.diffusion_steps), source, cfg);
}

ManipResult apply_manip(const Denoiser& model, const DiscreteSchedule& s, const TokenGrid& grid,
                        const ConditionSet& cond, double lambda, Rng& rng) {
    if (!model.config().manip_context) throw InvalidArgument("apply_manip: model has no manipulation context");
    ManipResult r;
    r.edited = sample_grid(model, s, cond, lambda, rng, &grid);
    r.changed.resize(grid.tokens.size());
    for (std::size_t i = 0; i < grid.tokens.size(); ++i) {
        r.changed[i] = r.edited.tokens[i] != grid.tokens[i];
        r.changed_count += r.changed[i] ? 1 : 0;
    }
    return r;
}

}  // namespace rcd
