#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "rcd/common.hpp"
#include "rcd/embedspace.hpp"

namespace rcd {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Hit {
    std::int64_t id = 0;
    double distance = 0.0;

    friend bool operator==(const Hit&, const Hit&) = default;
};

/// Hits sorted by distance, ties broken by lower id.
struct SearchResult {
    std::vector<Hit> hits;

    std::vector<std::int64_t> ids() const;
    friend bool operator==(const SearchResult&, const SearchResult&) = default;
};

/// Keeps the `k` best (distance, id) pairs in canonical order.
void finalize_hits(std::vector<Hit>& hits, std::size_t k);

// ---------------------------------------------------------------------------
// Exact index

class FlatIndex {
  public:
    explicit FlatIndex(int dim = kDefaultDim);

    static FlatIndex build(int dim, std::span<const std::pair<std::int64_t, Embedding>> pairs);

    void add(std::int64_t id, const Embedding& e);
    /// Exact k smallest cosine distances; k > size returns everything.
    SearchResult search(std::span<const double> query, std::size_t k) const;

    int dim() const { return dim_; }
    std::size_t size() const { return ids_.size(); }
    bool contains(std::int64_t id) const { return slot_.contains(id); }
    std::int64_t id_at(std::size_t i) const { return ids_[i]; }
    std::span<const double> vector_at(std::size_t i) const;
    /// Throws InvalidArgument for unknown ids.
    std::span<const double> vector_of(std::int64_t id) const;

    /// "RDFLAT01": dim (u32), count (u64), ids (i64), vectors (f64).
    void save(const std::string& path) const;
    static FlatIndex load(const std::string& path);

    friend bool operator==(const FlatIndex& a, const FlatIndex& b) {
        return a.dim_ == b.dim_ && a.ids_ == b.ids_ && a.data_ == b.data_;
    }

  private:
    int dim_;
    std::vector<std::int64_t> ids_;
    Vec data_;
    std::unordered_map<std::int64_t, std::size_t> slot_;
};

// ---------------------------------------------------------------------------
// k-means

struct KMeansOptions {
    int iterations = 25;
    std::uint64_t seed = 0;
    bool spherical = false;  ///< renormalize centroids after every update
};

struct KMeansResult {
    RowMatrix centroids;
    std::vector<int> assignment;
    double inertia = 0.0;  ///< sum of squared distances to assigned centroids
};

/// Nearest centroid per row (squared L2, ties to the lower index).
std::vector<int> assign_nearest(const RowMatrix& data, const RowMatrix& centroids,
                                std::vector<double>* sq_dist = nullptr);

/// Lloyd iterations from k-means++ seeding. Empty clusters are re-seeded to
/// the point farthest from its centroid.
KMeansResult kmeans(const RowMatrix& data, int k, const KMeansOptions& options);

/// Lloyd iterations continuing from `centroids`; never increases inertia.
KMeansResult kmeans_refine(const RowMatrix& data, RowMatrix centroids, int iterations,
                           bool spherical = false);

// ---------------------------------------------------------------------------
// Product quantizer

class ProductQuantizer {
  public:
    ProductQuantizer() = default;
    ProductQuantizer(int dim, int m, int bits);

    int dim() const { return dim_; }
    int m() const { return m_; }
    int bits() const { return bits_; }
    int ksub() const { return 1 << bits_; }
    int dsub() const { return dim_ / m_; }

    void train(const RowMatrix& x, const KMeansOptions& options);
    /// Warm-started Lloyd iterations on every sub-codebook.
    void refine(const RowMatrix& x, int iterations);

    std::vector<std::uint16_t> encode(const RowMatrix& x) const;  // n * m codes
    RowMatrix decode(std::span<const std::uint16_t> codes, std::size_t n) const;

    /// m * ksub table of squared distances |query_sub - centroid|^2.
    Vec l2_table(std::span<const double> query) const;
    /// m * ksub table of <query_sub, centroid>.
    Vec inner_product_table(std::span<const double> query) const;

    const RowMatrix& codebook(int sub) const { return codebooks_[static_cast<std::size_t>(sub)]; }
    RowMatrix& codebook(int sub) { return codebooks_[static_cast<std::size_t>(sub)]; }

  private:
    int dim_ = 0;
    int m_ = 0;
    int bits_ = 0;
    std::vector<RowMatrix> codebooks_;  // m of (ksub x dsub)
};

// ---------------------------------------------------------------------------
// IVF + PQ approximate index

inline constexpr int kDefaultNprobe = 20;

struct IvfPqParams {
    int n_cells = 0;  ///< 0 selects ceil(sqrt(N))
    int m = 8;
    int bits = 8;
    bool use_opq = false;
    std::uint64_t seed = 0;
    int kmeans_iterations = 25;
    int opq_rounds = 8;
    int opq_refine_iterations = 4;
};

class IvfPqIndex {
  public:
    IvfPqIndex() = default;

    /// Trains the coarse quantizer, the residual PQ (and rotation when
    /// use_opq) on `vectors`, then adds them with the given ids.
    static IvfPqIndex train(const RowMatrix& vectors, std::span<const std::int64_t> ids,
                            const IvfPqParams& params);
    /// Same codebooks and centroids, no stored vectors.
    IvfPqIndex empty_copy() const;

    void add(std::int64_t id, std::span<const double> v);
    /// Probes the nprobe nearest cells and ranks by asymmetric squared L2
    /// distance to the reconstructions; the reported distance is half of it,
    /// which equals 1 - <q, x> for exact unit-norm reconstructions.
    SearchResult search(std::span<const double> query, std::size_t k,
                        int nprobe = kDefaultNprobe) const;

    /// Mean squared L2 error of encoding + decoding `vectors`.
    double reconstruction_mse(const RowMatrix& vectors) const;
    Vec reconstruct(std::span<const double> v) const;

    int dim() const { return dim_; }
    int n_cells() const { return static_cast<int>(centroids_.rows()); }
    int m() const { return pq_.m(); }
    int bits() const { return pq_.bits(); }
    bool has_rotation() const { return has_rotation_; }
    const RowMatrix& rotation() const { return rotation_; }
    const RowMatrix& centroids() const { return centroids_; }
    const ProductQuantizer& quantizer() const { return pq_; }
    std::size_t size() const { return ids_.size(); }
    bool contains(std::int64_t id) const { return ids_.contains(id); }
    const std::vector<std::int64_t>& list_ids(int cell) const {
        return list_ids_[static_cast<std::size_t>(cell)];
    }

    /// "RDIVFPQ1", version (u32), dim, n_cells, m, bits, opq flag (u32), then
    /// centroids, rotation (when flagged), codebooks (f64) and per-cell lists
    /// (count u64, ids i64, codes u16).
    void save(const std::string& path) const;
    static IvfPqIndex load(const std::string& path);

    friend bool operator==(const IvfPqIndex& a, const IvfPqIndex& b);

  private:
    std::vector<std::uint16_t> encode_one(std::span<const double> v, int cell) const;
    int nearest_cell(std::span<const double> v) const;

    int dim_ = 0;
    RowMatrix centroids_;
    bool has_rotation_ = false;
    RowMatrix rotation_;  // residual r maps to r * rotation_
    ProductQuantizer pq_;
    std::vector<std::vector<std::int64_t>> list_ids_;
    std::vector<std::vector<std::uint16_t>> list_codes_;
    std::unordered_map<std::int64_t, int> ids_;
};

inline constexpr std::uint32_t kIvfPqVersion = 1;

// ---------------------------------------------------------------------------
// Retrieval store: raw embeddings plus an optional IVF-PQ shortlist.

class RetrievalIndex {
  public:
    struct Options {
        int nprobe = kDefaultNprobe;
        std::size_t min_shortlist = 64;
        std::size_t shortlist_factor = 8;
    };

    explicit RetrievalIndex(FlatIndex raw);
    RetrievalIndex(FlatIndex raw, IvfPqIndex ann);
    RetrievalIndex(FlatIndex raw, IvfPqIndex ann, Options options);

    /// Builds the IVF-PQ over the stored vectors when there are at least
    /// 2^bits of them; smaller stores stay exact.
    static RetrievalIndex build(FlatIndex raw, const IvfPqParams& params);

    /// Shortlist from the ANN index (when present), re-ranked with exact distances.
    SearchResult search(std::span<const double> query, std::size_t k) const;

    /// A nested sub-store over `ids` reusing the trained quantizers.
    RetrievalIndex subset(std::span<const std::int64_t> ids) const;

    void add(std::int64_t id, const Embedding& e);

    const FlatIndex& raw() const { return raw_; }
    const std::optional<IvfPqIndex>& ann() const { return ann_; }
    std::size_t size() const { return raw_.size(); }
    int dim() const { return raw_.dim(); }
    const Options& options() const { return options_; }

    /// Writes `path` (IVF-PQ, or flat when exact) and `path + ".raw"` (flat).
    void save(const std::string& path) const;
    static RetrievalIndex load(const std::string& path);

  private:
    FlatIndex raw_;
    std::optional<IvfPqIndex> ann_;
    Options options_;
};

/// Row-stacks embeddings into an N x d matrix.
RowMatrix to_matrix(std::span<const Embedding> embeddings);

}  // namespace rcd
