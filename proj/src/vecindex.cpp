#include "rcd/vecindex.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <unordered_set>

#include "rcd/binary_io.hpp"

namespace rcd {

namespace {

bool hit_less(const Hit& a, const Hit& b) {
    if (a.distance != b.distance) return a.distance < b.distance;
    return a.id < b.id;
}

void check_query_dim(std::span<const double> q, int dim) {
    if (static_cast<int>(q.size()) != dim) {
        throw InvalidArgument("query dimension " + std::to_string(q.size()) + " != index dimension " +
                              std::to_string(dim));
    }
}

// Lloyd loop shared by kmeans and kmeans_refine.
KMeansResult lloyd(const RowMatrix& data, RowMatrix centroids, int iterations, bool spherical) {
    const Eigen::Index n = data.rows();
    const Eigen::Index k = centroids.rows();
    const Eigen::Index d = data.cols();
    KMeansResult out;
    std::vector<double> sq;
    std::vector<int> prev;
    for (int it = 0; it < iterations; ++it) {
        auto assign = assign_nearest(data, centroids, &sq);
        if (assign == prev) break;
        RowMatrix sums = RowMatrix::Zero(k, d);
        std::vector<Eigen::Index> counts(static_cast<std::size_t>(k), 0);
        for (Eigen::Index i = 0; i < n; ++i) {
            const auto c = assign[static_cast<std::size_t>(i)];
            sums.row(c) += data.row(i);
            ++counts[static_cast<std::size_t>(c)];
        }
        // Empty clusters take the points currently worst served.
        std::vector<Eigen::Index> order;
        std::size_t next_far = 0;
        for (Eigen::Index c = 0; c < k; ++c) {
            if (counts[static_cast<std::size_t>(c)] > 0) {
                centroids.row(c) = sums.row(c) / static_cast<double>(counts[static_cast<std::size_t>(c)]);
            } else {
                if (order.empty()) {
                    order.resize(static_cast<std::size_t>(n));
                    std::iota(order.begin(), order.end(), Eigen::Index{0});
                    std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
                        return sq[static_cast<std::size_t>(a)] > sq[static_cast<std::size_t>(b)];
                    });
                }
                centroids.row(c) = data.row(order[next_far % order.size()]);
                ++next_far;
            }
            if (spherical) {
                const double nrm = centroids.row(c).norm();
                if (nrm > 0.0) centroids.row(c) /= nrm;
            }
        }
        prev = std::move(assign);
    }
    out.assignment = assign_nearest(data, centroids, &sq);
    out.inertia = std::accumulate(sq.begin(), sq.end(), 0.0);
    out.centroids = std::move(centroids);
    return out;
}

RowMatrix sub_block(const RowMatrix& x, int sub, int dsub) {
    return x.middleCols(static_cast<Eigen::Index>(sub) * dsub, dsub);
}

}  // namespace

std::vector<std::int64_t> SearchResult::ids() const {
    std::vector<std::int64_t> out;
    out.reserve(hits.size());
    for (const auto& h : hits) out.push_back(h.id);
    return out;
}

void finalize_hits(std::vector<Hit>& hits, std::size_t k) {
    const std::size_t keep = std::min(k, hits.size());
    std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(keep), hits.end(),
                      hit_less);
    hits.resize(keep);
}

// ---------------------------------------------------------------------------
// FlatIndex

FlatIndex::FlatIndex(int dim) : dim_(dim) {
    if (dim <= 0) throw InvalidArgument("index dimension must be positive");
}

FlatIndex FlatIndex::build(int dim, std::span<const std::pair<std::int64_t, Embedding>> pairs) {
    FlatIndex index(dim);
    for (const auto& [id, e] : pairs) index.add(id, e);
    return index;
}

void FlatIndex::add(std::int64_t id, const Embedding& e) {
    if (static_cast<int>(e.dim()) != dim_) throw InvalidArgument("embedding dimension mismatch");
    if (slot_.contains(id)) throw InvalidArgument("duplicate id " + std::to_string(id));
    slot_.emplace(id, ids_.size());
    ids_.push_back(id);
    data_.insert(data_.end(), e.vec().begin(), e.vec().end());
}

std::span<const double> FlatIndex::vector_at(std::size_t i) const {
    return std::span<const double>(data_).subspan(i * static_cast<std::size_t>(dim_),
                                                  static_cast<std::size_t>(dim_));
}

std::span<const double> FlatIndex::vector_of(std::int64_t id) const {
    auto it = slot_.find(id);
    if (it == slot_.end()) throw InvalidArgument("unknown id " + std::to_string(id));
    return vector_at(it->second);
}

SearchResult FlatIndex::search(std::span<const double> query, std::size_t k) const {
    check_query_dim(query, dim_);
    SearchResult out;
    if (k == 0 || ids_.empty()) return out;
    out.hits.reserve(ids_.size());
    for (std::size_t i = 0; i < ids_.size(); ++i) {
        out.hits.push_back({ids_[i], cosine_distance(query, vector_at(i))});
    }
    finalize_hits(out.hits, k);
    return out;
}

void FlatIndex::save(const std::string& path) const {
    BinaryWriter w(path);
    w.magic("RDFLAT01");
    w.put<std::uint32_t>(static_cast<std::uint32_t>(dim_));
    w.put<std::uint64_t>(ids_.size());
    w.put_all(ids_);
    w.put_all(data_);
    w.finish();
}

FlatIndex FlatIndex::load(const std::string& path) {
    BinaryReader r(path);
    r.expect_magic("RDFLAT01");
    const auto dim = r.get<std::uint32_t>();
    const auto count = r.get<std::uint64_t>();
    if (dim == 0 || dim > (1u << 16)) throw DataError("bad dimension in " + path);
    r.require(count, sizeof(std::int64_t) + sizeof(double) * dim);
    const auto ids = r.get_all<std::int64_t>(count);
    const auto data = r.get_all<double>(count * dim);
    r.expect_end();
    FlatIndex index(static_cast<int>(dim));
    for (std::size_t i = 0; i < count; ++i) {
        Vec v(data.begin() + static_cast<std::ptrdiff_t>(i * dim),
              data.begin() + static_cast<std::ptrdiff_t>((i + 1) * dim));
        if (index.contains(ids[i])) throw DataError("duplicate id in " + path);
        const double nrm = norm(v);
        if (!std::isfinite(nrm) || std::abs(nrm - 1.0) > 1e-6) {
            throw DataError("non-unit vector in " + path);
        }
        // Stored bits are kept verbatim so that save/load is exact.
        index.slot_.emplace(ids[i], index.ids_.size());
        index.ids_.push_back(ids[i]);
        index.data_.insert(index.data_.end(), v.begin(), v.end());
    }
    return index;
}

// ---------------------------------------------------------------------------
// k-means

std::vector<int> assign_nearest(const RowMatrix& data, const RowMatrix& centroids,
                                std::vector<double>* sq_dist) {
    const Eigen::Index n = data.rows();
    const Eigen::Index k = centroids.rows();
    std::vector<int> out(static_cast<std::size_t>(n), 0);
    if (sq_dist) sq_dist->assign(static_cast<std::size_t>(n), 0.0);
    if (k == 0) return out;
    const Eigen::VectorXd cn = centroids.rowwise().squaredNorm();
    constexpr Eigen::Index kBlock = 2048;
    RowMatrix prod;
    for (Eigen::Index start = 0; start < n; start += kBlock) {
        const Eigen::Index rows = std::min(kBlock, n - start);
        prod.noalias() = data.middleRows(start, rows) * centroids.transpose();
        for (Eigen::Index i = 0; i < rows; ++i) {
            const double xn = data.row(start + i).squaredNorm();
            double best = std::numeric_limits<double>::infinity();
            int arg = 0;
            for (Eigen::Index c = 0; c < k; ++c) {
                const double dist = xn - 2.0 * prod(i, c) + cn[c];
                if (dist < best) {
                    best = dist;
                    arg = static_cast<int>(c);
                }
            }
            out[static_cast<std::size_t>(start + i)] = arg;
            if (sq_dist) (*sq_dist)[static_cast<std::size_t>(start + i)] = std::max(best, 0.0);
        }
    }
    return out;
}

KMeansResult kmeans(const RowMatrix& data, int k, const KMeansOptions& options) {
    const Eigen::Index n = data.rows();
    if (k <= 0) throw InvalidArgument("k-means needs k > 0");
    if (n < k) throw InvalidArgument("k-means needs at least k points");
    Rng rng(options.seed);
    RowMatrix centroids(k, data.cols());
    std::vector<double> d2(static_cast<std::size_t>(n));
    auto first = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n)));
    centroids.row(0) = data.row(first);
    for (Eigen::Index i = 0; i < n; ++i) {
        d2[static_cast<std::size_t>(i)] = (data.row(i) - centroids.row(0)).squaredNorm();
    }
    for (int c = 1; c < k; ++c) {
        const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
        const auto pick = total > 0.0 ? static_cast<Eigen::Index>(rng.categorical(d2))
                                      : static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n)));
        centroids.row(c) = data.row(pick);
        for (Eigen::Index i = 0; i < n; ++i) {
            auto& cur = d2[static_cast<std::size_t>(i)];
            cur = std::min(cur, (data.row(i) - centroids.row(c)).squaredNorm());
        }
    }
    if (options.spherical) {
        for (Eigen::Index c = 0; c < k; ++c) {
            const double nrm = centroids.row(c).norm();
            if (nrm > 0.0) centroids.row(c) /= nrm;
        }
    }
    return lloyd(data, std::move(centroids), options.iterations, options.spherical);
}

KMeansResult kmeans_refine(const RowMatrix& data, RowMatrix centroids, int iterations,
                           bool spherical) {
    if (centroids.cols() != data.cols()) throw InvalidArgument("centroid dimension mismatch");
    return lloyd(data, std::move(centroids), iterations, spherical);
}

// ---------------------------------------------------------------------------
// ProductQuantizer

ProductQuantizer::ProductQuantizer(int dim, int m, int bits) : dim_(dim), m_(m), bits_(bits) {
    if (dim <= 0 || m <= 0 || dim % m != 0) {
        throw InvalidArgument("PQ needs m > 0 dividing d (d=" + std::to_string(dim) +
                              ", m=" + std::to_string(m) + ")");
    }
    if (bits < 1 || bits > 16) throw InvalidArgument("PQ bits must be in [1, 16]");
    codebooks_.assign(static_cast<std::size_t>(m), RowMatrix::Zero(ksub(), dsub()));
}

void ProductQuantizer::train(const RowMatrix& x, const KMeansOptions& options) {
    if (x.cols() != dim_) throw InvalidArgument("PQ training dimension mismatch");
    if (x.rows() < ksub()) throw InvalidArgument("insufficient training vectors for PQ");
    for (int j = 0; j < m_; ++j) {
        KMeansOptions o = options;
        o.seed = derive_seed(options.seed, static_cast<std::uint64_t>(j));
        o.spherical = false;
        codebook(j) = kmeans(sub_block(x, j, dsub()), ksub(), o).centroids;
    }
}

void ProductQuantizer::refine(const RowMatrix& x, int iterations) {
    for (int j = 0; j < m_; ++j) {
        codebook(j) = kmeans_refine(sub_block(x, j, dsub()), codebook(j), iterations).centroids;
    }
}

std::vector<std::uint16_t> ProductQuantizer::encode(const RowMatrix& x) const {
    if (x.cols() != dim_) throw InvalidArgument("PQ encode dimension mismatch");
    const auto n = static_cast<std::size_t>(x.rows());
    std::vector<std::uint16_t> codes(n * static_cast<std::size_t>(m_));
    for (int j = 0; j < m_; ++j) {
        const auto a = assign_nearest(sub_block(x, j, dsub()), codebook(j));
        for (std::size_t i = 0; i < n; ++i) {
            codes[i * static_cast<std::size_t>(m_) + static_cast<std::size_t>(j)] =
                static_cast<std::uint16_t>(a[i]);
        }
    }
    return codes;
}

RowMatrix ProductQuantizer::decode(std::span<const std::uint16_t> codes, std::size_t n) const {
    RowMatrix out(static_cast<Eigen::Index>(n), dim_);
    const int ds = dsub();
    for (std::size_t i = 0; i < n; ++i) {
        for (int j = 0; j < m_; ++j) {
            const auto c = codes[i * static_cast<std::size_t>(m_) + static_cast<std::size_t>(j)];
            out.block(static_cast<Eigen::Index>(i), j * ds, 1, ds) = codebook(j).row(c);
        }
    }
    return out;
}

Vec ProductQuantizer::l2_table(std::span<const double> query) const {
    const int ks = ksub();
    const int ds = dsub();
    Vec table(static_cast<std::size_t>(m_) * static_cast<std::size_t>(ks));
    for (int j = 0; j < m_; ++j) {
        Eigen::Map<const Eigen::RowVectorXd> qs(query.data() + j * ds, ds);
        Eigen::Map<Eigen::VectorXd> out(table.data() + static_cast<std::ptrdiff_t>(j) * ks, ks);
        out.noalias() = (codebook(j).rowwise() - qs).rowwise().squaredNorm();
    }
    return table;
}

Vec ProductQuantizer::inner_product_table(std::span<const double> query) const {
    const int ks = ksub();
    const int ds = dsub();
    Vec table(static_cast<std::size_t>(m_) * static_cast<std::size_t>(ks));
    for (int j = 0; j < m_; ++j) {
        Eigen::Map<const Eigen::VectorXd> qs(query.data() + j * ds, ds);
        Eigen::Map<Eigen::VectorXd> out(table.data() + static_cast<std::ptrdiff_t>(j) * ks, ks);
        out.noalias() = codebook(j) * qs;
    }
    return table;
}

// ---------------------------------------------------------------------------
// IvfPqIndex

namespace {

double mse_rows(const RowMatrix& a, const RowMatrix& b) {
    if (a.rows() == 0) return 0.0;
    return (a - b).rowwise().squaredNorm().mean();
}

double pq_mse(const ProductQuantizer& pq, const RowMatrix& x) {
    const auto codes = pq.encode(x);
    return mse_rows(x, pq.decode(codes, static_cast<std::size_t>(x.rows())));
}

}  // namespace

IvfPqIndex IvfPqIndex::train(const RowMatrix& vectors, std::span<const std::int64_t> ids,
                             const IvfPqParams& params) {
    const Eigen::Index n = vectors.rows();
    const int d = static_cast<int>(vectors.cols());
    if (static_cast<Eigen::Index>(ids.size()) != n) throw InvalidArgument("ids/vectors length mismatch");
    IvfPqIndex index;
    index.dim_ = d;
    index.pq_ = ProductQuantizer(d, params.m, params.bits);
    const int n_cells = params.n_cells > 0
                            ? params.n_cells
                            : static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
    if (n < n_cells || n < index.pq_.ksub() || n == 0) {
        throw InvalidArgument("insufficient training vectors: " + std::to_string(n) + " for " +
                              std::to_string(n_cells) + " cells and " +
                              std::to_string(index.pq_.ksub()) + " codewords");
    }

    KMeansOptions coarse_opts{params.kmeans_iterations, derive_seed(params.seed, 1), true};
    auto coarse = kmeans(vectors, n_cells, coarse_opts);
    index.centroids_ = std::move(coarse.centroids);

    RowMatrix residual(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        residual.row(i) = vectors.row(i) - index.centroids_.row(coarse.assignment[static_cast<std::size_t>(i)]);
    }

    KMeansOptions pq_opts{params.kmeans_iterations, derive_seed(params.seed, 2), false};
    index.pq_.train(residual, pq_opts);

    if (params.use_opq) {
        // Alternate Procrustes rotation updates with warm-started codebook
        // updates; keep the best state seen (round 0 is the unrotated PQ).
        RowMatrix rot = RowMatrix::Identity(d, d);
        ProductQuantizer pq = index.pq_;
        RowMatrix best_rot = rot;
        ProductQuantizer best_pq = pq;
        double best = pq_mse(pq, residual);
        for (int round = 0; round < params.opq_rounds; ++round) {
            RowMatrix rotated = residual * rot;
            const auto codes = pq.encode(rotated);
            const RowMatrix recon = pq.decode(codes, static_cast<std::size_t>(n));
            const Eigen::MatrixXd cross = residual.transpose() * recon;
            Eigen::JacobiSVD<Eigen::MatrixXd> svd(cross, Eigen::ComputeFullU | Eigen::ComputeFullV);
            rot = svd.matrixU() * svd.matrixV().transpose();
            rotated = residual * rot;
            pq.refine(rotated, params.opq_refine_iterations);
            const double err = pq_mse(pq, rotated);
            if (err < best) {
                best = err;
                best_rot = rot;
                best_pq = pq;
            }
        }
        index.has_rotation_ = true;
        index.rotation_ = std::move(best_rot);
        index.pq_ = std::move(best_pq);
    }

    index.list_ids_.assign(static_cast<std::size_t>(n_cells), {});
    index.list_codes_.assign(static_cast<std::size_t>(n_cells), {});
    const RowMatrix coded = index.has_rotation_ ? RowMatrix(residual * index.rotation_) : residual;
    const auto codes = index.pq_.encode(coded);
    const auto m = static_cast<std::size_t>(index.pq_.m());
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto id = ids[static_cast<std::size_t>(i)];
        const int cell = coarse.assignment[static_cast<std::size_t>(i)];
        if (!index.ids_.emplace(id, cell).second) throw InvalidArgument("duplicate id " + std::to_string(id));
        index.list_ids_[static_cast<std::size_t>(cell)].push_back(id);
        auto& lc = index.list_codes_[static_cast<std::size_t>(cell)];
        lc.insert(lc.end(), codes.begin() + static_cast<std::ptrdiff_t>(i * m),
                  codes.begin() + static_cast<std::ptrdiff_t>((i + 1) * m));
    }
    return index;
}

IvfPqIndex IvfPqIndex::empty_copy() const {
    IvfPqIndex out;
    out.dim_ = dim_;
    out.centroids_ = centroids_;
    out.has_rotation_ = has_rotation_;
    out.rotation_ = rotation_;
    out.pq_ = pq_;
    out.list_ids_.assign(list_ids_.size(), {});
    out.list_codes_.assign(list_codes_.size(), {});
    return out;
}

int IvfPqIndex::nearest_cell(std::span<const double> v) const {
    Eigen::Map<const Eigen::VectorXd> x(v.data(), dim_);
    const Eigen::VectorXd dist = (centroids_.rowwise() - x.transpose()).rowwise().squaredNorm();
    Eigen::Index arg = 0;
    dist.minCoeff(&arg);
    return static_cast<int>(arg);
}

std::vector<std::uint16_t> IvfPqIndex::encode_one(std::span<const double> v, int cell) const {
    Eigen::Map<const Eigen::RowVectorXd> x(v.data(), dim_);
    RowMatrix r = x - centroids_.row(cell);
    if (has_rotation_) r = r * rotation_;
    return pq_.encode(r);
}

void IvfPqIndex::add(std::int64_t id, std::span<const double> v) {
    check_query_dim(v, dim_);
    if (ids_.contains(id)) throw InvalidArgument("duplicate id " + std::to_string(id));
    const int cell = nearest_cell(v);
    const auto codes = encode_one(v, cell);
    ids_.emplace(id, cell);
    list_ids_[static_cast<std::size_t>(cell)].push_back(id);
    auto& lc = list_codes_[static_cast<std::size_t>(cell)];
    lc.insert(lc.end(), codes.begin(), codes.end());
}

SearchResult IvfPqIndex::search(std::span<const double> query, std::size_t k, int nprobe) const {
    check_query_dim(query, dim_);
    SearchResult out;
    if (k == 0 || ids_.empty()) return out;
    const int cells = n_cells();
    const int probe = std::clamp(nprobe, 1, cells);

    Eigen::Map<const Eigen::VectorXd> q(query.data(), dim_);
    const Eigen::VectorXd cdist = (centroids_.rowwise() - q.transpose()).rowwise().squaredNorm();
    std::vector<int> order(static_cast<std::size_t>(cells));
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + probe, order.end(), [&](int a, int b) {
        if (cdist[a] != cdist[b]) return cdist[a] < cdist[b];
        return a < b;
    });

    // Squared L2 to the reconstruction, split per subspace of the rotated
    // residual. For unit vectors half of it is 1 - <q, x>.
    const auto m = static_cast<std::size_t>(pq_.m());
    const auto ks = static_cast<std::size_t>(pq_.ksub());
    Eigen::RowVectorXd res(dim_);
    for (int p = 0; p < probe; ++p) {
        const auto cell = static_cast<std::size_t>(order[static_cast<std::size_t>(p)]);
        const auto& lid = list_ids_[cell];
        if (lid.empty()) continue;
        res = q.transpose() - centroids_.row(static_cast<Eigen::Index>(cell));
        if (has_rotation_) res = res * rotation_;
        const Vec table = pq_.l2_table(std::span<const double>(res.data(), static_cast<std::size_t>(dim_)));
        const auto& lc = list_codes_[cell];
        for (std::size_t e = 0; e < lid.size(); ++e) {
            double s = 0.0;
            const std::uint16_t* code = lc.data() + e * m;
            for (std::size_t j = 0; j < m; ++j) s += table[j * ks + code[j]];
            out.hits.push_back({lid[e], 0.5 * s});
        }
    }
    finalize_hits(out.hits, k);
    return out;
}

Vec IvfPqIndex::reconstruct(std::span<const double> v) const {
    check_query_dim(v, dim_);
    const int cell = nearest_cell(v);
    const auto codes = encode_one(v, cell);
    RowMatrix y = pq_.decode(codes, 1);
    if (has_rotation_) y = y * rotation_.transpose();
    y += centroids_.row(cell);
    return Vec(y.data(), y.data() + dim_);
}

double IvfPqIndex::reconstruction_mse(const RowMatrix& vectors) const {
    if (vectors.cols() != dim_) throw InvalidArgument("dimension mismatch");
    const Eigen::Index n = vectors.rows();
    if (n == 0) return 0.0;
    const auto assign = assign_nearest(vectors, centroids_);
    RowMatrix residual(n, dim_);
    for (Eigen::Index i = 0; i < n; ++i) {
        residual.row(i) = vectors.row(i) - centroids_.row(assign[static_cast<std::size_t>(i)]);
    }
    // Rotations preserve the error, so it is measured in the coded space.
    if (has_rotation_) residual = residual * rotation_;
    return pq_mse(pq_, residual);
}

void IvfPqIndex::save(const std::string& path) const {
    BinaryWriter w(path);
    w.magic("RDIVFPQ1");
    w.put<std::uint32_t>(kIvfPqVersion);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(dim_));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(n_cells()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(pq_.m()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(pq_.bits()));
    w.put<std::uint32_t>(has_rotation_ ? 1u : 0u);
    for (Eigen::Index i = 0; i < centroids_.size(); ++i) w.put(centroids_.data()[i]);
    if (has_rotation_) {
        for (Eigen::Index i = 0; i < rotation_.size(); ++i) w.put(rotation_.data()[i]);
    }
    for (int j = 0; j < pq_.m(); ++j) {
        const auto& cb = pq_.codebook(j);
        for (Eigen::Index i = 0; i < cb.size(); ++i) w.put(cb.data()[i]);
    }
    for (std::size_t c = 0; c < list_ids_.size(); ++c) {
        w.put<std::uint64_t>(list_ids_[c].size());
        w.put_all(list_ids_[c]);
        w.put_all(list_codes_[c]);
    }
    w.finish();
}

IvfPqIndex IvfPqIndex::load(const std::string& path) {
    BinaryReader r(path);
    r.expect_magic("RDIVFPQ1");
    const auto version = r.get<std::uint32_t>();
    if (version != kIvfPqVersion) {
        throw DataError("unsupported index version " + std::to_string(version) + " in " + path);
    }
    const auto dim = r.get<std::uint32_t>();
    const auto cells = r.get<std::uint32_t>();
    const auto m = r.get<std::uint32_t>();
    const auto bits = r.get<std::uint32_t>();
    const auto flag = r.get<std::uint32_t>();
    if (dim == 0 || dim > (1u << 16) || cells == 0 || m == 0 || dim % m != 0 || bits < 1 ||
        bits > 16 || flag > 1) {
        throw DataError("bad index header in " + path);
    }
    IvfPqIndex index;
    index.dim_ = static_cast<int>(dim);
    index.pq_ = ProductQuantizer(static_cast<int>(dim), static_cast<int>(m), static_cast<int>(bits));
    r.require(static_cast<std::uint64_t>(cells) * dim, sizeof(double));
    index.centroids_.resize(cells, dim);
    for (Eigen::Index i = 0; i < index.centroids_.size(); ++i) index.centroids_.data()[i] = r.get<double>();
    index.has_rotation_ = flag == 1;
    if (index.has_rotation_) {
        index.rotation_.resize(dim, dim);
        for (Eigen::Index i = 0; i < index.rotation_.size(); ++i) index.rotation_.data()[i] = r.get<double>();
    }
    for (std::uint32_t j = 0; j < m; ++j) {
        auto& cb = index.pq_.codebook(static_cast<int>(j));
        for (Eigen::Index i = 0; i < cb.size(); ++i) cb.data()[i] = r.get<double>();
    }
    index.list_ids_.resize(cells);
    index.list_codes_.resize(cells);
    const auto ks = static_cast<std::uint32_t>(index.pq_.ksub());
    for (std::uint32_t c = 0; c < cells; ++c) {
        const auto count = r.get<std::uint64_t>();
        r.require(count, sizeof(std::int64_t) + sizeof(std::uint16_t) * m);
        index.list_ids_[c] = r.get_all<std::int64_t>(count);
        index.list_codes_[c] = r.get_all<std::uint16_t>(count * m);
        for (auto id : index.list_ids_[c]) {
            if (!index.ids_.emplace(id, static_cast<int>(c)).second) {
                throw DataError("duplicate id in " + path);
            }
        }
        for (auto code : index.list_codes_[c]) {
            if (code >= ks) throw DataError("code out of range in " + path);
        }
    }
    r.expect_end();
    return index;
}

bool operator==(const IvfPqIndex& a, const IvfPqIndex& b) {
    if (a.dim_ != b.dim_ || a.has_rotation_ != b.has_rotation_ || a.pq_.m() != b.pq_.m() ||
        a.pq_.bits() != b.pq_.bits() || a.centroids_ != b.centroids_ ||
        a.list_ids_ != b.list_ids_ || a.list_codes_ != b.list_codes_) {
        return false;
    }
    if (a.has_rotation_ && a.rotation_ != b.rotation_) return false;
    for (int j = 0; j < a.pq_.m(); ++j) {
        if (a.pq_.codebook(j) != b.pq_.codebook(j)) return false;
    }
    return true;
}

// ---------------------------------------------------------------------------
// RetrievalIndex

RetrievalIndex::RetrievalIndex(FlatIndex raw) : raw_(std::move(raw)) {}

RetrievalIndex::RetrievalIndex(FlatIndex raw, IvfPqIndex ann)
    : RetrievalIndex(std::move(raw), std::move(ann), Options{}) {}

RetrievalIndex::RetrievalIndex(FlatIndex raw, IvfPqIndex ann, Options options)
    : raw_(std::move(raw)), ann_(std::move(ann)), options_(options) {
    if (ann_->dim() != raw_.dim() || ann_->size() != raw_.size()) {
        throw DataError("ANN index does not match the raw store");
    }
    for (std::size_t i = 0; i < raw_.size(); ++i) {
        if (!ann_->contains(raw_.id_at(i))) throw DataError("ANN index does not match the raw store");
    }
}

RetrievalIndex RetrievalIndex::build(FlatIndex raw, const IvfPqParams& params) {
    const std::size_t n = raw.size();
    const int cells = params.n_cells > 0 ? params.n_cells
                                         : static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
    if (n == 0 || n < (std::size_t{1} << params.bits) || n < static_cast<std::size_t>(cells)) {
        return RetrievalIndex(std::move(raw));
    }
    RowMatrix x(static_cast<Eigen::Index>(n), raw.dim());
    std::vector<std::int64_t> ids(n);
    for (std::size_t i = 0; i < n; ++i) {
        ids[i] = raw.id_at(i);
        const auto v = raw.vector_at(i);
        std::copy(v.begin(), v.end(), x.row(static_cast<Eigen::Index>(i)).data());
    }
    auto ann = IvfPqIndex::train(x, ids, params);
    return RetrievalIndex(std::move(raw), std::move(ann));
}

SearchResult RetrievalIndex::search(std::span<const double> query, std::size_t k) const {
    if (!ann_) return raw_.search(query, k);
    SearchResult out;
    if (k == 0) return out;
    const std::size_t pool = std::max(options_.min_shortlist, options_.shortlist_factor * k);
    const auto shortlist = ann_->search(query, pool, options_.nprobe);
    out.hits.reserve(shortlist.hits.size());
    for (const auto& h : shortlist.hits) {
        out.hits.push_back({h.id, cosine_distance(query, raw_.vector_of(h.id))});
    }
    finalize_hits(out.hits, k);
    return out;
}

RetrievalIndex RetrievalIndex::subset(std::span<const std::int64_t> ids) const {
    FlatIndex raw(raw_.dim());
    for (auto id : ids) {
        const auto v = raw_.vector_of(id);
        raw.add(id, Embedding::from_unit(Vec(v.begin(), v.end())));
    }
    if (!ann_) return RetrievalIndex(std::move(raw));
    IvfPqIndex ann = ann_->empty_copy();
    for (auto id : ids) ann.add(id, raw.vector_of(id));
    return RetrievalIndex(std::move(raw), std::move(ann), options_);
}

void RetrievalIndex::add(std::int64_t id, const Embedding& e) {
    if (raw_.contains(id)) throw InvalidArgument("duplicate id " + std::to_string(id));
    if (ann_) ann_->add(id, e.values());
    raw_.add(id, e);
}

void RetrievalIndex::save(const std::string& path) const {
    if (ann_) {
        ann_->save(path);
        raw_.save(path + ".raw");
    } else {
        raw_.save(path);
    }
}

RetrievalIndex RetrievalIndex::load(const std::string& path) {
    char magic[8] = {};
    {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw DataError("cannot open: " + path);
        in.read(magic, 8);
    }
    if (std::string(magic, 8) == "RDFLAT01") return RetrievalIndex(FlatIndex::load(path));
    auto ann = IvfPqIndex::load(path);
    auto raw = FlatIndex::load(path + ".raw");
    return RetrievalIndex(std::move(raw), std::move(ann));
}

RowMatrix to_matrix(std::span<const Embedding> embeddings) {
    if (embeddings.empty()) return RowMatrix(0, 0);
    const auto d = static_cast<Eigen::Index>(embeddings.front().dim());
    RowMatrix x(static_cast<Eigen::Index>(embeddings.size()), d);
    for (std::size_t i = 0; i < embeddings.size(); ++i) {
        if (static_cast<Eigen::Index>(embeddings[i].dim()) != d) throw InvalidArgument("mixed dimensions");
        std::copy(embeddings[i].vec().begin(), embeddings[i].vec().end(),
                  x.row(static_cast<Eigen::Index>(i)).data());
    }
    return x;
}

}  // namespace rcd
