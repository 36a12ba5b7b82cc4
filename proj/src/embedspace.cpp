#include "rcd/embedspace.hpp"

#include <algorithm>
#include <cmath>

#include "rcd/binary_io.hpp"

namespace rcd {

Embedding Embedding::normalized(Vec raw) {
    const double n = norm(raw);
    if (!std::isfinite(n) || n <= 0.0) {
        throw InvalidArgument("cannot normalize a zero or non-finite vector");
    }
    for (double& v : raw) v /= n;
    return Embedding(std::move(raw));
}

Embedding Embedding::from_unit(Vec values) {
    const double n = norm(values);
    if (!(std::abs(n - 1.0) <= 1e-9)) {
        throw InvalidArgument("embedding is not unit norm (|v| = " + std::to_string(n) + ")");
    }
    return Embedding(std::move(values));
}

double cosine_distance(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw InvalidArgument("cosine_distance: dimension mismatch");
    return std::clamp(1.0 - dot(a, b), 0.0, 2.0);
}

double cosine_distance(const Embedding& a, const Embedding& b) {
    return cosine_distance(a.values(), b.values());
}

TokenGrid::TokenGrid(int h, int w, std::vector<int> t) : height(h), width(w), tokens(std::move(t)) {
    if (h <= 0 || w <= 0) throw InvalidArgument("grid dimensions must be positive");
    if (tokens.size() != static_cast<std::size_t>(h) * static_cast<std::size_t>(w)) {
        throw InvalidArgument("grid token count does not match its shape");
    }
}

TokenGrid TokenGrid::filled(int h, int w, int token) {
    return TokenGrid(h, w, std::vector<int>(static_cast<std::size_t>(h * w), token));
}

void TokenGrid::check_data(int vocab) const {
    for (int t : tokens) {
        if (t == vocab) throw InvalidArgument("MASK token in a data grid");
        if (t < 0 || t > vocab) throw InvalidArgument("token out of range: " + std::to_string(t));
    }
}

void TokenGrid::check_state(int vocab) const {
    for (int t : tokens) {
        if (t < 0 || t > vocab) throw InvalidArgument("token out of range: " + std::to_string(t));
    }
}

std::vector<std::size_t> ConceptWorld::train_indices(int train_per_concept) const {
    if (train_per_concept < 1 || train_per_concept > per_concept) {
        throw InvalidArgument("train split must hold between 1 and n samples per concept");
    }
    std::vector<std::size_t> out;
    for (int c = 0; c < concepts; ++c) {
        for (int i = 0; i < train_per_concept; ++i) {
            out.push_back(static_cast<std::size_t>(c * per_concept + i));
        }
    }
    return out;
}

std::vector<std::size_t> ConceptWorld::heldout_indices(int train_per_concept) const {
    if (train_per_concept < 0 || train_per_concept > per_concept) {
        throw InvalidArgument("train split out of range");
    }
    std::vector<std::size_t> out;
    for (int c = 0; c < concepts; ++c) {
        for (int i = train_per_concept; i < per_concept; ++i) {
            out.push_back(static_cast<std::size_t>(c * per_concept + i));
        }
    }
    return out;
}

ConceptWorld gen_world(const WorldSpec& spec) {
    if (spec.concepts < 1) throw InvalidArgument("gen_world: need at least one concept");
    if (spec.per_concept < 1) throw InvalidArgument("gen_world: need at least one sample per concept");
    if (!(spec.rho >= 0.0 && spec.rho < 0.5)) {
        throw InvalidArgument("gen_world: corruption rate must lie in [0, 0.5)");
    }
    if (spec.vocab < 2 || spec.vocab > 255) throw InvalidArgument("gen_world: vocab must be in [2, 255]");
    if (spec.height < 1 || spec.width < 1) throw InvalidArgument("gen_world: bad grid shape");

    Rng rng(spec.seed);
    ConceptWorld w;
    w.concepts = spec.concepts;
    w.vocab = spec.vocab;
    w.height = spec.height;
    w.width = spec.width;
    w.per_concept = spec.per_concept;
    const auto cells = static_cast<std::size_t>(spec.height * spec.width);
    const auto vocab = static_cast<std::uint64_t>(spec.vocab);

    for (int c = 0; c < spec.concepts; ++c) {
        std::vector<int> t(cells);
        for (auto& v : t) v = static_cast<int>(rng.below(vocab));
        w.templates.emplace_back(spec.height, spec.width, std::move(t));
    }
    for (int c = 0; c < spec.concepts; ++c) {
        for (int i = 0; i < spec.per_concept; ++i) {
            std::vector<int> g = w.templates[static_cast<std::size_t>(c)].tokens;
            for (auto& v : g) {
                if (rng.uniform() < spec.rho) v = static_cast<int>(rng.below(vocab));
            }
            w.samples.emplace_back(spec.height, spec.width, std::move(g));
            w.labels.push_back(c);
        }
    }
    return w;
}

namespace {
constexpr char kWorldMagic[9] = "RDWORLD1";

void put_grid(BinaryWriter& out, const TokenGrid& g) {
    for (int t : g.tokens) out.put(static_cast<std::uint8_t>(t));
}

TokenGrid get_grid(BinaryReader& in, int h, int w) {
    std::vector<int> t(static_cast<std::size_t>(h * w));
    for (auto& v : t) v = in.get<std::uint8_t>();
    return TokenGrid(h, w, std::move(t));
}
}  // namespace

void save_world(const ConceptWorld& world, const std::string& path) {
    BinaryWriter out(path);
    out.magic(kWorldMagic);
    out.put(static_cast<std::uint32_t>(world.concepts));
    out.put(static_cast<std::uint32_t>(world.vocab));
    out.put(static_cast<std::uint32_t>(world.height));
    out.put(static_cast<std::uint32_t>(world.width));
    out.put(static_cast<std::uint32_t>(world.per_concept));
    for (const auto& t : world.templates) put_grid(out, t);
    for (int l : world.labels) out.put(static_cast<std::uint32_t>(l));
    for (const auto& s : world.samples) put_grid(out, s);
    out.finish();
}

ConceptWorld load_world(const std::string& path) {
    BinaryReader in(path);
    in.expect_magic(kWorldMagic);
    ConceptWorld w;
    w.concepts = static_cast<int>(in.get<std::uint32_t>());
    w.vocab = static_cast<int>(in.get<std::uint32_t>());
    w.height = static_cast<int>(in.get<std::uint32_t>());
    w.width = static_cast<int>(in.get<std::uint32_t>());
    w.per_concept = static_cast<int>(in.get<std::uint32_t>());
    if (w.concepts < 1 || w.vocab < 2 || w.vocab > 255 || w.height < 1 || w.width < 1 ||
        w.per_concept < 1 || w.height * w.width > (1 << 20)) {
        throw DataError("implausible world header in " + path);
    }
    for (int c = 0; c < w.concepts; ++c) w.templates.push_back(get_grid(in, w.height, w.width));
    const auto n = static_cast<std::size_t>(w.concepts) * static_cast<std::size_t>(w.per_concept);
    for (std::size_t i = 0; i < n; ++i) w.labels.push_back(static_cast<int>(in.get<std::uint32_t>()));
    for (std::size_t i = 0; i < n; ++i) w.samples.push_back(get_grid(in, w.height, w.width));
    in.expect_end();
    try {
        for (const auto& g : w.templates) g.check_data(w.vocab);
        for (const auto& g : w.samples) g.check_data(w.vocab);
    } catch (const InvalidArgument& e) {
        throw DataError(std::string("corrupt world file: ") + e.what());
    }
    return w;
}

GridEncoder::GridEncoder(int vocab, int height, int width, int dim, std::uint64_t seed)
    : vocab_(vocab), height_(height), width_(width), dim_(dim) {
    if (vocab < 1 || height < 1 || width < 1 || dim < 1) {
        throw InvalidArgument("GridEncoder: dimensions must be positive");
    }
    Rng rng(seed);
    projection_.resize(static_cast<std::size_t>(feature_dim() * dim_));
    const double scale = 1.0 / std::sqrt(static_cast<double>(dim_));
    for (double& v : projection_) v = rng.normal() * scale;
}

Vec GridEncoder::features(const TokenGrid& grid, std::span<const bool> keep) const {
    if (grid.height != height_ || grid.width != width_) {
        throw InvalidArgument("GridEncoder: grid shape does not match the encoder");
    }
    grid.check_data(vocab_);
    if (!keep.empty() && keep.size() != grid.tokens.size()) {
        throw InvalidArgument("GridEncoder: mask size does not match the grid");
    }
    const int h0 = height_ / 2;
    const int w0 = width_ / 2;
    // Quadrant cell counts for normalization; zero-sized quadrants (1-wide grids) stay zero.
    const double total = static_cast<double>(height_ * width_);
    const double quad_cells[4] = {
        static_cast<double>(h0 * w0), static_cast<double>(h0 * (width_ - w0)),
        static_cast<double>((height_ - h0) * w0), static_cast<double>((height_ - h0) * (width_ - w0))};

    Vec f(static_cast<std::size_t>(feature_dim()), 0.0);
    for (int r = 0; r < height_; ++r) {
        for (int c = 0; c < width_; ++c) {
            const auto cell = static_cast<std::size_t>(r * width_ + c);
            if (!keep.empty() && !keep[cell]) continue;
            const int t = grid.tokens[cell];
            const int q = (r < h0 ? 0 : 2) + (c < w0 ? 0 : 1);
            f[static_cast<std::size_t>(t)] += 1.0 / total;
            f[static_cast<std::size_t>(vocab_ * (1 + q) + t)] += 1.0 / quad_cells[q];
        }
    }
    return f;
}

Embedding GridEncoder::embed(const TokenGrid& grid) const {
    return embed_region(grid, {});
}

Embedding GridEncoder::embed_region(const TokenGrid& grid, std::span<const bool> keep) const {
    const Vec f = features(grid, keep);
    Vec e(static_cast<std::size_t>(dim_), 0.0);
    for (std::size_t i = 0; i < f.size(); ++i) {
        if (f[i] == 0.0) continue;
        const double* row = projection_.data() + i * static_cast<std::size_t>(dim_);
        for (int j = 0; j < dim_; ++j) e[static_cast<std::size_t>(j)] += f[i] * row[j];
    }
    if (norm(e) == 0.0) throw InvalidArgument("GridEncoder: empty region has no embedding");
    return Embedding::normalized(std::move(e));
}

QueryEncoder::QueryEncoder(std::span<const Embedding> train_embeddings,
                           std::span<const int> train_labels, int concepts) {
    if (train_embeddings.size() != train_labels.size()) {
        throw InvalidArgument("QueryEncoder: embeddings and labels differ in length");
    }
    if (train_embeddings.empty()) throw InvalidArgument("QueryEncoder: no training embeddings");
    const std::size_t d = train_embeddings.front().dim();
    std::vector<Vec> sums(static_cast<std::size_t>(concepts), Vec(d, 0.0));
    std::vector<int> counts(static_cast<std::size_t>(concepts), 0);
    for (std::size_t i = 0; i < train_embeddings.size(); ++i) {
        const int c = train_labels[i];
        if (c < 0 || c >= concepts) throw InvalidArgument("QueryEncoder: label out of range");
        for (std::size_t j = 0; j < d; ++j) sums[static_cast<std::size_t>(c)][j] += train_embeddings[i][j];
        ++counts[static_cast<std::size_t>(c)];
    }
    for (int c = 0; c < concepts; ++c) {
        if (counts[static_cast<std::size_t>(c)] == 0) {
            throw InvalidArgument("QueryEncoder: concept " + std::to_string(c) + " has no images");
        }
        means_.push_back(Embedding::normalized(sums[static_cast<std::size_t>(c)]));
    }
}

const Embedding& QueryEncoder::concept_mean(int concept_id) const {
    if (concept_id < 0 || concept_id >= concepts()) {
        throw InvalidArgument("unknown concept id " + std::to_string(concept_id));
    }
    return means_[static_cast<std::size_t>(concept_id)];
}

Embedding QueryEncoder::embed_query(int concept_id, double gap, std::uint64_t seed) const {
    if (!(gap >= 0.0)) throw InvalidArgument("embed_query: gap must be non-negative");
    const Embedding& mean = concept_mean(concept_id);
    if (gap == 0.0) return mean;
    Rng rng(seed);
    Vec v = mean.vec();
    const double sigma = gap * kGapCoordinateScale;
    for (double& x : v) x += sigma * rng.normal();
    return Embedding::normalized(std::move(v));
}

Embedding embed_query(int concept_id, const ConceptWorld& world, const GridEncoder& encoder,
                      int train_per_concept, double gap, std::uint64_t seed) {
    std::vector<Embedding> embs;
    std::vector<int> labels;
    for (std::size_t i : world.train_indices(train_per_concept)) {
        embs.push_back(encoder.embed(world.samples[i]));
        labels.push_back(world.labels[i]);
    }
    return QueryEncoder(embs, labels, world.concepts).embed_query(concept_id, gap, seed);
}

Scorer::Scorer(int dim, std::uint64_t seed) {
    Rng rng(seed);
    Vec v(static_cast<std::size_t>(dim));
    for (double& x : v) x = rng.normal();
    direction_ = Embedding::normalized(std::move(v));
}

double Scorer::score(const Embedding& e) const { return score(e.values()); }

double Scorer::score(std::span<const double> e) const {
    if (e.size() != direction_.dim()) throw InvalidArgument("Scorer: dimension mismatch");
    return dot(direction_.values(), e);
}

}  // namespace rcd
