#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rcd/common.hpp"

namespace rcd {

inline constexpr int kDefaultDim = 32;
inline constexpr int kDefaultVocab = 10;
inline constexpr int kDefaultGridSide = 8;
inline constexpr std::uint64_t kDefaultEncoderSeed = 0x5eedc0de;

/// Unit-norm vector in the joint embedding space.
class Embedding {
  public:
    Embedding() = default;

    /// L2-normalizes `raw`. Throws InvalidArgument on zero or non-finite input.
    static Embedding normalized(Vec raw);
    /// Wraps values that are already unit norm (checked to 1e-9).
    static Embedding from_unit(Vec values);

    std::span<const double> values() const { return values_; }
    const Vec& vec() const { return values_; }
    std::size_t dim() const { return values_.size(); }
    double operator[](std::size_t i) const { return values_[i]; }

    friend bool operator==(const Embedding&, const Embedding&) = default;

  private:
    explicit Embedding(Vec v) : values_(std::move(v)) {}
    Vec values_;
};

/// 1 - <a, b>, clamped to [0, 2].
double cosine_distance(const Embedding& a, const Embedding& b);
double cosine_distance(std::span<const double> a, std::span<const double> b);

/// H x W token grid. Data grids hold tokens in [0, V); the id V is MASK and
/// only appears inside diffusion states.
struct TokenGrid {
    int height = 0;
    int width = 0;
    std::vector<int> tokens;

    TokenGrid() = default;
    TokenGrid(int h, int w, std::vector<int> t);
    static TokenGrid filled(int h, int w, int token);

    int size() const { return height * width; }
    int at(int row, int col) const { return tokens[static_cast<std::size_t>(row * width + col)]; }
    int& at(int row, int col) { return tokens[static_cast<std::size_t>(row * width + col)]; }
    bool same_shape(const TokenGrid& o) const { return height == o.height && width == o.width; }

    /// Throws InvalidArgument unless every token is in [0, vocab).
    void check_data(int vocab) const;
    /// Throws InvalidArgument unless every token is in [0, vocab] (MASK allowed).
    void check_state(int vocab) const;

    friend bool operator==(const TokenGrid&, const TokenGrid&) = default;
};

struct WorldSpec {
    std::uint64_t seed = 0;
    int concepts = 4;
    int per_concept = 100;
    double rho = 0.1;
    int vocab = kDefaultVocab;
    int height = kDefaultGridSide;
    int width = kDefaultGridSide;
};

/// Synthetic concept world: C templates, n corrupted samples per concept,
/// stored concept-major (sample i has label i / n).
struct ConceptWorld {
    int concepts = 0;
    int vocab = 0;
    int height = 0;
    int width = 0;
    int per_concept = 0;
    std::vector<TokenGrid> templates;
    std::vector<TokenGrid> samples;
    std::vector<int> labels;

    std::size_t size() const { return samples.size(); }
    /// Sample indices of the first `train_per_concept` samples of each concept.
    std::vector<std::size_t> train_indices(int train_per_concept) const;
    /// The remaining samples of each concept.
    std::vector<std::size_t> heldout_indices(int train_per_concept) const;

    friend bool operator==(const ConceptWorld&, const ConceptWorld&) = default;
};

ConceptWorld gen_world(const WorldSpec& spec);

/// "RDWORLD1" little-endian: C, V, H, W, n (u32), templates (u8), labels
/// (u32), sample tokens (u8).
void save_world(const ConceptWorld& world, const std::string& path);
ConceptWorld load_world(const std::string& path);

/// Stand-in image encoder: global + per-quadrant token histograms through a
/// fixed seeded Gaussian projection, then L2-normalized.
class GridEncoder {
  public:
    GridEncoder(int vocab, int height, int width, int dim = kDefaultDim,
                std::uint64_t seed = kDefaultEncoderSeed);

    int vocab() const { return vocab_; }
    int dim() const { return dim_; }
    int feature_dim() const { return 5 * vocab_; }

    Embedding embed(const TokenGrid& grid) const;

    /// Embeds only the cells where `keep` is true; the rest act as a
    /// background symbol whose features are zero.
    Embedding embed_region(const TokenGrid& grid, std::span<const bool> keep) const;

    Vec features(const TokenGrid& grid, std::span<const bool> keep = {}) const;

  private:
    int vocab_;
    int height_;
    int width_;
    int dim_;
    Vec projection_;  // feature_dim x dim, row-major
};

/// Stand-in text encoder. A query for concept c is the normalized mean of
/// the concept's training-image embeddings plus an isotropic Gaussian
/// perturbation with per-coordinate standard deviation gap * kGapCoordinateScale.
class QueryEncoder {
  public:
    static constexpr double kGapCoordinateScale = 0.4;

    QueryEncoder(std::span<const Embedding> train_embeddings, std::span<const int> train_labels,
                 int concepts);

    int concepts() const { return static_cast<int>(means_.size()); }
    const Embedding& concept_mean(int concept_id) const;

    Embedding embed_query(int concept_id, double gap, std::uint64_t seed) const;

  private:
    std::vector<Embedding> means_;
};

/// Convenience wrapper: embeds the world's training split and builds the query encoder.
Embedding embed_query(int concept_id, const ConceptWorld& world, const GridEncoder& encoder,
                      int train_per_concept, double gap, std::uint64_t seed);

/// Linear stand-in for an aesthetics classifier.
class Scorer {
  public:
    Scorer(int dim, std::uint64_t seed);
    explicit Scorer(Embedding direction) : direction_(std::move(direction)) {}

    const Embedding& direction() const { return direction_; }
    double score(const Embedding& e) const;
    double score(std::span<const double> e) const;

  private:
    Embedding direction_;
};

}  // namespace rcd
