#include "rcd/denoiser.hpp"

#include <cmath>
#include <numbers>

#include "rcd/binary_io.hpp"

namespace rcd {

namespace {

using Mat = RowMatrix;
using RowVec = Eigen::RowVectorXd;
using CMap = Eigen::Map<const Mat>;
using GMap = Eigen::Map<Mat>;

constexpr double kLnEps = 1e-5;
constexpr char kCkptMagic[9] = "RDCKPT01";
constexpr std::uint32_t kCkptVersion = 1;

void softmax_rows(Mat& s) {
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        const double m = s.row(i).maxCoeff();
        s.row(i) = (s.row(i).array() - m).exp().matrix();
        s.row(i) /= s.row(i).sum();
    }
}

// O = softmax(Q K^T / sqrt(D)) V, with K = X Wk and V = X Wv.
struct Attn {
    Mat q, k, v, a, o;
};

void attn_forward(Mat q, const Mat& x, const CMap& wk, const CMap& wv, Attn& c) {
    c.q = std::move(q);
    c.k = x * wk;
    c.v = x * wv;
    c.a = (c.q * c.k.transpose()) / std::sqrt(static_cast<double>(c.q.cols()));
    softmax_rows(c.a);
    c.o = c.a * c.v;
}

// Takes dO, returns dQ; accumulates into dWk, dWv and dX.
Mat attn_backward(const Attn& c, const Mat& d_o, const Mat& x, const CMap& wk, const CMap& wv, GMap dwk,
                  GMap dwv, Mat& dx) {
    const Mat da = d_o * c.v.transpose();
    const Mat dv = c.a.transpose() * d_o;
    const Eigen::VectorXd rs = (da.array() * c.a.array()).rowwise().sum();
    const Mat ds = (c.a.array() * (da.array().colwise() - rs.array())).matrix() /
                   std::sqrt(static_cast<double>(c.q.cols()));
    const Mat dk = ds.transpose() * c.q;
    dwk.noalias() += x.transpose() * dk;
    dwv.noalias() += x.transpose() * dv;
    dx.noalias() += dk * wk.transpose();
    dx.noalias() += dv * wv.transpose();
    return ds * c.k;
}

// Layer norm without affine terms, then a step-dependent gain and bias.
struct Ada {
    Mat xhat;
    Eigen::VectorXd inv;
    RowVec g;
};

Mat ada_forward(const Mat& h, const RowVec& phi, const CMap& gw, const CMap& bw, Ada& c) {
    const auto d = static_cast<double>(h.cols());
    c.xhat.resize(h.rows(), h.cols());
    c.inv.resize(h.rows());
    for (Eigen::Index i = 0; i < h.rows(); ++i) {
        const double mu = h.row(i).sum() / d;
        const RowVec centered = h.row(i).array() - mu;
        const double var = centered.squaredNorm() / d;
        c.inv(i) = 1.0 / std::sqrt(var + kLnEps);
        c.xhat.row(i) = centered * c.inv(i);
    }
    c.g = (phi * gw).array() + 1.0;
    const RowVec b = phi * bw;
    Mat out = c.xhat.array().rowwise() * c.g.array();
    out.rowwise() += b;
    return out;
}

Mat ada_backward(const Ada& c, const Mat& da, const RowVec& phi, GMap dg_w, GMap db_w) {
    const RowVec dg = (da.array() * c.xhat.array()).colwise().sum();
    const RowVec db = da.colwise().sum();
    dg_w.noalias() += phi.transpose() * dg;
    db_w.noalias() += phi.transpose() * db;
    const Mat dxhat = da.array().rowwise() * c.g.array();
    Mat dx(dxhat.rows(), dxhat.cols());
    const auto d = static_cast<double>(dxhat.cols());
    for (Eigen::Index i = 0; i < dxhat.rows(); ++i) {
        const double m1 = dxhat.row(i).sum() / d;
        const double m2 = dxhat.row(i).dot(c.xhat.row(i)) / d;
        dx.row(i) = c.inv(i) * (dxhat.row(i).array() - m1 - c.xhat.row(i).array() * m2).matrix();
    }
    return dx;
}

struct FuseTape {
    Mat e, ep0, ep;
    Attn att;
};

struct LayerTape {
    Ada ls, lc, lf;
    Mat as, ac, af, zpre, z;
    Attn self, cross;
};

struct GridTape {
    RowVec phi;
    FuseTape fuse;
    Mat ctx;
    std::vector<LayerTape> layers;
    Ada lo;
    Mat ao;
};

struct EpsTape {
    RowVec phi, x;
    FuseTape fuse;
    Mat ctx, h0, h1, h2, zp1, z1, zp3, z3;
    Attn cross;
};

// Read-only parameter view.
struct Net {
    const DenoiserConfig& cfg;
    const Denoiser::Layout& L;
    const double* p;
    CMap m(std::size_t off, Eigen::Index r, Eigen::Index c) const { return CMap(p + off, r, c); }
};

// Gradient view over the same layout.
struct Grad {
    double* g;
    GMap m(std::size_t off, Eigen::Index r, Eigen::Index c) const { return GMap(g + off, r, c); }
};

// GELU, tanh form.
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)

Mat gelu(const Mat& x) {
    return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::tanh(kGeluC * (v + 0.044715 * v * v * v))); });
}

Mat gelu_backward(const Mat& pre, const Mat& dz) {
    const Mat slope = pre.unaryExpr([](double v) {
        const double t = std::tanh(kGeluC * (v + 0.044715 * v * v * v));
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kGeluC * (1.0 + 3 * 0.044715 * v * v);
    });
    return dz.cwiseProduct(slope);
}

Mat role_gain(const Net& n, Eigen::Index rows) {
    const Eigen::Index D = n.cfg.model_dim;
    const CMap role = n.m(n.L.role, 2, D);
    Mat r(rows, D);
    for (Eigen::Index i = 0; i < rows; ++i) r.row(i) = role.row(i == 0 ? 0 : 1).array() + 1.0;
    return r;
}

Mat fuse_forward(const Net& n, const Mat& e, FuseTape& t) {
    const Eigen::Index D = n.cfg.model_dim, d = n.cfg.embed_dim;
    t.e = e;
    if (n.cfg.fusion == FusionVariant::ConcatLinear) {
        const CMap x(e.data(), 1, e.size());
        return x * n.m(n.L.wcat, e.size(), D);
    }
    t.ep0 = e * n.m(n.L.win, d, D);
    t.ep = t.ep0.cwiseProduct(role_gain(n, e.rows()));
    if (n.cfg.fusion == FusionVariant::SelfAttnK1) {
        attn_forward(t.ep * n.m(n.L.fq, D, D), t.ep, n.m(n.L.fk, D, D), n.m(n.L.fv, D, D), t.att);
        return t.ep + t.att.o * n.m(n.L.fo, D, D);
    }
    attn_forward(Mat(n.m(n.L.pq, 1, D)), t.ep, n.m(n.L.fk, D, D), n.m(n.L.fv, D, D), t.att);
    return t.att.o * n.m(n.L.fo, D, D);
}

void fuse_backward(const Net& n, const FuseTape& t, const Mat& dctx, const Grad& g) {
    const Eigen::Index D = n.cfg.model_dim, d = n.cfg.embed_dim;
    if (n.cfg.fusion == FusionVariant::ConcatLinear) {
        const CMap x(t.e.data(), 1, t.e.size());
        g.m(n.L.wcat, t.e.size(), D).noalias() += x.transpose() * dctx;
        return;
    }
    const CMap fo = n.m(n.L.fo, D, D);
    g.m(n.L.fo, D, D).noalias() += t.att.o.transpose() * dctx;
    const Mat d_o = dctx * fo.transpose();
    Mat dep = Mat::Zero(t.ep.rows(), D);
    if (n.cfg.fusion == FusionVariant::SelfAttnK1) dep = dctx;
    const Mat dq = attn_backward(t.att, d_o, t.ep, n.m(n.L.fk, D, D), n.m(n.L.fv, D, D), g.m(n.L.fk, D, D),
                                 g.m(n.L.fv, D, D), dep);
    if (n.cfg.fusion == FusionVariant::SelfAttnK1) {
        g.m(n.L.fq, D, D).noalias() += t.ep.transpose() * dq;
        dep.noalias() += dq * n.m(n.L.fq, D, D).transpose();
    } else {
        g.m(n.L.pq, 1, D) += dq;
    }
    const Mat dr = dep.cwiseProduct(t.ep0);
    GMap drole = g.m(n.L.role, 2, D);
    for (Eigen::Index i = 0; i < dr.rows(); ++i) drole.row(i == 0 ? 0 : 1) += dr.row(i);
    const Mat dep0 = dep.cwiseProduct(role_gain(n, t.ep.rows()));
    g.m(n.L.win, d, D).noalias() += t.e.transpose() * dep0;
}

Mat grid_forward(const Net& n, const TokenGrid& xn, int step, const Mat& ctx, const TokenGrid* manip,
                 GridTape& t) {
    const auto& c = n.cfg;
    const Eigen::Index D = c.model_dim, F = c.ffn_dim, T = c.time_features, P = c.positions();
    const Vec phi = timestep_features(step, c.steps, c.time_features);
    t.phi = Eigen::Map<const RowVec>(phi.data(), T);
    const CMap tok = n.m(n.L.tok, c.vocab + 1, D);
    Mat h = n.m(n.L.pos, P, D);
    for (Eigen::Index i = 0; i < P; ++i) h.row(i) += tok.row(xn.tokens[static_cast<std::size_t>(i)]);
    if (c.manip_context) {
        const CMap ctok = n.m(n.L.ctok, c.vocab, D);
        for (Eigen::Index i = 0; i < P; ++i) h.row(i) += ctok.row(manip->tokens[static_cast<std::size_t>(i)]);
    }
    t.layers.resize(n.L.layers.size());
    for (std::size_t l = 0; l < n.L.layers.size(); ++l) {
        const auto& o = n.L.layers[l];
        auto& lt = t.layers[l];
        lt.as = ada_forward(h, t.phi, n.m(o.gs, T, D), n.m(o.bs, T, D), lt.ls);
        attn_forward(lt.as * n.m(o.sq, D, D), lt.as, n.m(o.sk, D, D), n.m(o.sv, D, D), lt.self);
        h.noalias() += lt.self.o * n.m(o.so, D, D);
        lt.ac = ada_forward(h, t.phi, n.m(o.gc, T, D), n.m(o.bc, T, D), lt.lc);
        attn_forward(lt.ac * n.m(o.cq, D, D), ctx, n.m(o.ck, D, D), n.m(o.cv, D, D), lt.cross);
        h.noalias() += lt.cross.o * n.m(o.co, D, D);
        lt.af = ada_forward(h, t.phi, n.m(o.gf, T, D), n.m(o.bf, T, D), lt.lf);
        lt.zpre = lt.af * n.m(o.w1, D, F);
        lt.zpre.rowwise() += RowVec(n.m(o.b1, 1, F));
        lt.z = gelu(lt.zpre);
        h.noalias() += lt.z * n.m(o.w2, F, D);
        h.rowwise() += RowVec(n.m(o.b2, 1, D));
    }
    t.ao = ada_forward(h, t.phi, n.m(n.L.go, T, D), n.m(n.L.bo, T, D), t.lo);
    Mat out = t.ao * n.m(n.L.wout, D, c.vocab);
    out.rowwise() += RowVec(n.m(n.L.bout, 1, c.vocab));
    return out;
}

// Returns d loss / d context.
Mat grid_backward(const Net& n, const TokenGrid& xn, const TokenGrid* manip, const GridTape& t,
                  const Mat& dlogits, const Grad& g) {
    const auto& c = n.cfg;
    const Eigen::Index D = c.model_dim, F = c.ffn_dim, T = c.time_features, P = c.positions();
    g.m(n.L.wout, D, c.vocab).noalias() += t.ao.transpose() * dlogits;
    g.m(n.L.bout, 1, c.vocab) += dlogits.colwise().sum();
    Mat dh = ada_backward(t.lo, dlogits * n.m(n.L.wout, D, c.vocab).transpose(), t.phi, g.m(n.L.go, T, D),
                          g.m(n.L.bo, T, D));
    Mat dctx = Mat::Zero(t.ctx.rows(), D);
    for (std::size_t l = n.L.layers.size(); l-- > 0;) {
        const auto& o = n.L.layers[l];
        const auto& lt = t.layers[l];
        // feed-forward
        g.m(o.w2, F, D).noalias() += lt.z.transpose() * dh;
        g.m(o.b2, 1, D) += dh.colwise().sum();
        const Mat dzpre = gelu_backward(lt.zpre, dh * n.m(o.w2, F, D).transpose());
        g.m(o.w1, D, F).noalias() += lt.af.transpose() * dzpre;
        g.m(o.b1, 1, F) += dzpre.colwise().sum();
        dh += ada_backward(lt.lf, dzpre * n.m(o.w1, D, F).transpose(), t.phi, g.m(o.gf, T, D), g.m(o.bf, T, D));
        // cross-attention to the context
        g.m(o.co, D, D).noalias() += lt.cross.o.transpose() * dh;
        Mat dq = attn_backward(lt.cross, dh * n.m(o.co, D, D).transpose(), t.ctx, n.m(o.ck, D, D),
                               n.m(o.cv, D, D), g.m(o.ck, D, D), g.m(o.cv, D, D), dctx);
        g.m(o.cq, D, D).noalias() += lt.ac.transpose() * dq;
        dh += ada_backward(lt.lc, dq * n.m(o.cq, D, D).transpose(), t.phi, g.m(o.gc, T, D), g.m(o.bc, T, D));
        // self-attention over positions
        g.m(o.so, D, D).noalias() += lt.self.o.transpose() * dh;
        Mat das = Mat::Zero(P, D);
        dq = attn_backward(lt.self, dh * n.m(o.so, D, D).transpose(), lt.as, n.m(o.sk, D, D), n.m(o.sv, D, D),
                           g.m(o.sk, D, D), g.m(o.sv, D, D), das);
        g.m(o.sq, D, D).noalias() += lt.as.transpose() * dq;
        das.noalias() += dq * n.m(o.sq, D, D).transpose();
        dh += ada_backward(lt.ls, das, t.phi, g.m(o.gs, T, D), g.m(o.bs, T, D));
    }
    g.m(n.L.pos, P, D) += dh;
    GMap dtok = g.m(n.L.tok, c.vocab + 1, D);
    for (Eigen::Index i = 0; i < P; ++i) dtok.row(xn.tokens[static_cast<std::size_t>(i)]) += dh.row(i);
    if (c.manip_context) {
        GMap dctok = g.m(n.L.ctok, c.vocab, D);
        for (Eigen::Index i = 0; i < P; ++i) dctok.row(manip->tokens[static_cast<std::size_t>(i)]) += dh.row(i);
    }
    return dctx;
}

Point eps_forward(const Net& n, const Point& x, int step, const Mat& ctx, EpsTape& t) {
    const auto& c = n.cfg;
    const Eigen::Index D = c.model_dim, F = c.ffn_dim, T = c.time_features;
    const Vec phi = timestep_features(step, c.steps, c.time_features);
    t.phi = Eigen::Map<const RowVec>(phi.data(), T);
    t.x = RowVec(2);
    t.x << x[0], x[1];
    t.h0 = t.x * n.m(n.L.wx, 2, D) + t.phi * n.m(n.L.wt, T, D) + n.m(n.L.bx, 1, D);
    attn_forward(t.h0 * n.m(n.L.ccq, D, D), ctx, n.m(n.L.cck, D, D), n.m(n.L.ccv, D, D), t.cross);
    t.h1 = t.h0 + t.cross.o * n.m(n.L.cco, D, D);
    t.zp1 = t.h1 * n.m(n.L.cw1, D, F) + n.m(n.L.cb1, 1, F);
    t.z1 = gelu(t.zp1);
    t.h2 = t.h1 + t.z1 * n.m(n.L.cw2, F, D) + n.m(n.L.cb2, 1, D);
    t.zp3 = t.h2 * n.m(n.L.cw3, D, F) + n.m(n.L.cb3, 1, F);
    t.z3 = gelu(t.zp3);
    const Mat e = t.z3 * n.m(n.L.weps, F, 2) + n.m(n.L.beps, 1, 2);
    return {e(0, 0), e(0, 1)};
}

Mat eps_backward(const Net& n, const EpsTape& t, const Point& de, const Grad& g) {
    const auto& c = n.cfg;
    const Eigen::Index D = c.model_dim, F = c.ffn_dim, T = c.time_features;
    RowVec dout(2);
    dout << de[0], de[1];
    g.m(n.L.weps, F, 2).noalias() += t.z3.transpose() * dout;
    g.m(n.L.beps, 1, 2) += dout;
    const Mat dzp3 = gelu_backward(t.zp3, dout * n.m(n.L.weps, F, 2).transpose());
    g.m(n.L.cw3, D, F).noalias() += t.h2.transpose() * dzp3;
    g.m(n.L.cb3, 1, F) += dzp3;
    Mat dh = dzp3 * n.m(n.L.cw3, D, F).transpose();
    g.m(n.L.cw2, F, D).noalias() += t.z1.transpose() * dh;
    g.m(n.L.cb2, 1, D) += dh;
    const Mat dzp1 = gelu_backward(t.zp1, dh * n.m(n.L.cw2, F, D).transpose());
    g.m(n.L.cw1, D, F).noalias() += t.h1.transpose() * dzp1;
    g.m(n.L.cb1, 1, F) += dzp1;
    dh += dzp1 * n.m(n.L.cw1, D, F).transpose();
    g.m(n.L.cco, D, D).noalias() += t.cross.o.transpose() * dh;
    Mat dctx = Mat::Zero(t.ctx.rows(), D);
    const Mat dq = attn_backward(t.cross, dh * n.m(n.L.cco, D, D).transpose(), t.ctx, n.m(n.L.cck, D, D),
                                 n.m(n.L.ccv, D, D), g.m(n.L.cck, D, D), g.m(n.L.ccv, D, D), dctx);
    g.m(n.L.ccq, D, D).noalias() += t.h0.transpose() * dq;
    dh += dq * n.m(n.L.ccq, D, D).transpose();
    g.m(n.L.wx, 2, D).noalias() += t.x.transpose() * dh;
    g.m(n.L.wt, T, D).noalias() += t.phi.transpose() * dh;
    g.m(n.L.bx, 1, D) += dh;
    return dctx;
}

}  // namespace

Vec timestep_features(int n, int steps, int count) {
    const double t = static_cast<double>(n) / steps;
    Vec out(static_cast<std::size_t>(count));
    for (int j = 0; j < count / 2; ++j) {
        const double w = std::numbers::pi * t * std::ldexp(1.0, j);
        out[static_cast<std::size_t>(2 * j)] = std::sin(w);
        out[static_cast<std::size_t>(2 * j + 1)] = std::cos(w);
    }
    return out;
}

FusionVariant parse_fusion_variant(const std::string& name) {
    if (name == "self-attn") return FusionVariant::SelfAttnK1;
    if (name == "cross-attn-pool") return FusionVariant::CrossAttnPool;
    if (name == "concat-linear") return FusionVariant::ConcatLinear;
    throw InvalidArgument("unknown fusion variant '" + name + "' (self-attn, cross-attn-pool, concat-linear)");
}

std::string to_string(FusionVariant v) {
    switch (v) {
        case FusionVariant::SelfAttnK1: return "self-attn";
        case FusionVariant::CrossAttnPool: return "cross-attn-pool";
        case FusionVariant::ConcatLinear: return "concat-linear";
    }
    return "?";
}

ConditionSet ConditionSet::make(const Embedding& query, std::span<const Embedding> found, int k) {
    if (k < 0) throw InvalidArgument("condition: k must be >= 0");
    ConditionSet c;
    c.query = query.vec();
    c.available = static_cast<int>(std::min<std::size_t>(found.size(), static_cast<std::size_t>(k)));
    for (int i = 0; i < k; ++i) {
        c.neighbors.push_back(i < c.available ? found[static_cast<std::size_t>(i)].vec()
                                              : Vec(query.dim(), 0.0));
    }
    return c;
}

ConditionSet ConditionSet::null_condition(int dim, int k) {
    ConditionSet c;
    c.query.assign(static_cast<std::size_t>(dim), 0.0);
    c.neighbors.assign(static_cast<std::size_t>(k), Vec(static_cast<std::size_t>(dim), 0.0));
    c.available = k;
    c.is_null = true;
    return c;
}

ConditionSet ConditionSet::nulled() const {
    ConditionSet c = null_condition(dim(), k());
    c.available = available;
    return c;
}

void DenoiserConfig::validate(int space_dim) const {
    if (vocab < 2) throw InvalidArgument("denoiser: vocab must be >= 2");
    if (height < 1 || width < 1) throw InvalidArgument("denoiser: bad grid shape");
    if (embed_dim != space_dim) {
        throw InvalidArgument("denoiser: embed_dim " + std::to_string(embed_dim) +
                              " does not match the embedding space dimension " + std::to_string(space_dim));
    }
    if (model_dim < 1 || ffn_dim < 1) throw InvalidArgument("denoiser: model and ffn dims must be positive");
    if (layers < 0) throw InvalidArgument("denoiser: layers must be >= 0");
    if (time_features < 2 || time_features % 2 != 0) {
        throw InvalidArgument("denoiser: time_features must be even and >= 2");
    }
    if (steps < 1) throw InvalidArgument("denoiser: steps must be >= 1");
    if (k < 0) throw InvalidArgument("denoiser: k must be >= 0");
    if (manip_context && head != DenoiserHead::Discrete) {
        throw InvalidArgument("denoiser: manipulation context needs the discrete head");
    }
}

Denoiser::Denoiser(DenoiserConfig cfg) : cfg_(std::move(cfg)) { build_layout(); }

std::size_t Denoiser::add_block(const std::string& name, int rows, int cols) {
    ParamBlock b{name, params_.size(), rows, cols};
    params_.resize(params_.size() + b.size(), 0.0);
    blocks_.push_back(b);
    return b.offset;
}

void Denoiser::build_layout() {
    const int D = cfg_.model_dim, F = cfg_.ffn_dim, T = cfg_.time_features, d = cfg_.embed_dim;
    if (cfg_.fusion == FusionVariant::ConcatLinear) {
        lay_.wcat = add_block("fuse.wcat", (cfg_.k + 1) * d, D);
    } else {
        lay_.win = add_block("fuse.win", d, D);
        lay_.role = add_block("fuse.role", 2, D);
        if (cfg_.fusion == FusionVariant::SelfAttnK1) {
            lay_.fq = add_block("fuse.wq", D, D);
        } else {
            lay_.pq = add_block("fuse.pool_query", 1, D);
        }
        lay_.fk = add_block("fuse.wk", D, D);
        lay_.fv = add_block("fuse.wv", D, D);
        lay_.fo = add_block("fuse.wo", D, D);
    }
    if (cfg_.head == DenoiserHead::Continuous) {
        lay_.wx = add_block("eps.wx", 2, D);
        lay_.wt = add_block("eps.wt", T, D);
        lay_.bx = add_block("eps.bx", 1, D);
        lay_.ccq = add_block("eps.cross.wq", D, D);
        lay_.cck = add_block("eps.cross.wk", D, D);
        lay_.ccv = add_block("eps.cross.wv", D, D);
        lay_.cco = add_block("eps.cross.wo", D, D);
        lay_.cw1 = add_block("eps.w1", D, F);
        lay_.cb1 = add_block("eps.b1", 1, F);
        lay_.cw2 = add_block("eps.w2", F, D);
        lay_.cb2 = add_block("eps.b2", 1, D);
        lay_.cw3 = add_block("eps.w3", D, F);
        lay_.cb3 = add_block("eps.b3", 1, F);
        lay_.weps = add_block("eps.wout", F, 2);
        lay_.beps = add_block("eps.bout", 1, 2);
        return;
    }
    lay_.tok = add_block("tok", cfg_.vocab + 1, D);
    lay_.pos = add_block("pos", cfg_.positions(), D);
    if (cfg_.manip_context) lay_.ctok = add_block("manip_tok", cfg_.vocab, D);
    for (int l = 0; l < cfg_.layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        LayerOffsets o{};
        o.gs = add_block(p + "self.ada_gain", T, D);
        o.bs = add_block(p + "self.ada_bias", T, D);
        o.sq = add_block(p + "self.wq", D, D);
        o.sk = add_block(p + "self.wk", D, D);
        o.sv = add_block(p + "self.wv", D, D);
        o.so = add_block(p + "self.wo", D, D);
        o.gc = add_block(p + "cross.ada_gain", T, D);
        o.bc = add_block(p + "cross.ada_bias", T, D);
        o.cq = add_block(p + "cross.wq", D, D);
        o.ck = add_block(p + "cross.wk", D, D);
        o.cv = add_block(p + "cross.wv", D, D);
        o.co = add_block(p + "cross.wo", D, D);
        o.gf = add_block(p + "ffn.ada_gain", T, D);
        o.bf = add_block(p + "ffn.ada_bias", T, D);
        o.w1 = add_block(p + "ffn.w1", D, F);
        o.b1 = add_block(p + "ffn.b1", 1, F);
        o.w2 = add_block(p + "ffn.w2", F, D);
        o.b2 = add_block(p + "ffn.b2", 1, D);
        lay_.layers.push_back(o);
    }
    lay_.go = add_block("out.ada_gain", T, D);
    lay_.bo = add_block("out.ada_bias", T, D);
    lay_.wout = add_block("out.w", D, cfg_.vocab);
    lay_.bout = add_block("out.b", 1, cfg_.vocab);
}

const ParamBlock& Denoiser::block(const std::string& name) const {
    for (const auto& b : blocks_) {
        if (b.name == name) return b;
    }
    throw InvalidArgument("no parameter block named " + name);
}

Denoiser Denoiser::init(const DenoiserConfig& config, std::uint64_t seed, int space_dim) {
    config.validate(space_dim);
    Denoiser m(config);
    if (m.params_.size() > 1000000) throw InvalidArgument("denoiser: more than 1e6 parameters");
    Rng rng(seed);
    for (const auto& b : m.blocks_) {
        const auto ends = [&](const char* suffix) {
            const std::string s(suffix);
            return b.name.size() >= s.size() && b.name.compare(b.name.size() - s.size(), s.size(), s) == 0;
        };
        double scale;
        if (ends("ada_gain") || ends("ada_bias") || ends(".b1") || ends(".b2") || ends(".b3") || ends(".b") ||
            ends(".bx") || ends(".bout") || ends("role")) {
            scale = 0.0;
        } else if (b.name == "tok" || b.name == "pos" || b.name == "manip_tok" || ends("pool_query")) {
            scale = 0.5;
        } else {
            scale = 1.0 / std::sqrt(static_cast<double>(b.rows));
        }
        for (std::size_t i = 0; i < b.size(); ++i) {
            const double z = rng.normal();
            m.params_[b.offset + i] = scale * z;
        }
    }
    return m;
}

RowMatrix Denoiser::context_input(const ConditionSet& cond) const {
    const int d = cfg_.embed_dim;
    if (cond.dim() != d) {
        throw InvalidArgument("condition dimension " + std::to_string(cond.dim()) + " != " + std::to_string(d));
    }
    for (const auto& v : cond.neighbors) {
        if (static_cast<int>(v.size()) != d) throw InvalidArgument("condition: neighbor dimension mismatch");
    }
    const bool concat = cfg_.fusion == FusionVariant::ConcatLinear;
    const int used = concat ? cfg_.k : std::min(cond.available, cond.k());
    Mat e = Mat::Zero(used + 1, d);
    if (cond.is_null) return e;
    for (int j = 0; j < d; ++j) e(0, j) = cond.query[static_cast<std::size_t>(j)];
    const int copy = std::min({used, cond.available, cond.k()});
    for (int i = 0; i < copy; ++i) {
        for (int j = 0; j < d; ++j) e(i + 1, j) = cond.neighbors[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    }
    return e;
}

RowMatrix Denoiser::fuse_condition(const ConditionSet& cond) const {
    FuseTape t;
    return fuse_forward(Net{cfg_, lay_, params_.data()}, context_input(cond), t);
}

Vec Denoiser::logits(const TokenGrid& xn, int n, const RowMatrix& context, const TokenGrid* manip) const {
    if (cfg_.head != DenoiserHead::Discrete) throw InvalidArgument("logits: continuous-head model");
    if (xn.height != cfg_.height || xn.width != cfg_.width) throw InvalidArgument("denoiser: grid shape mismatch");
    xn.check_state(cfg_.vocab);
    if (n < 1 || n > cfg_.steps) throw InvalidArgument("denoiser: step out of range");
    if (cfg_.manip_context) {
        if (manip == nullptr || !manip->same_shape(xn)) throw InvalidArgument("denoiser: missing manipulation grid");
        manip->check_data(cfg_.vocab);
    }
    if (context.cols() != cfg_.model_dim) throw InvalidArgument("denoiser: context width mismatch");
    GridTape t;
    t.ctx = context;
    const Mat out = grid_forward(Net{cfg_, lay_, params_.data()}, xn, n, t.ctx, manip, t);
    return Vec(out.data(), out.data() + out.size());
}

GridDist Denoiser::forward(const TokenGrid& xn, int n, const ConditionSet& cond, const TokenGrid* manip) const {
    const Vec z = logits(xn, n, fuse_condition(cond), manip);
    return GridDist::from_token_logits(cfg_.positions(), cfg_.vocab, z);
}

Point Denoiser::forward_eps(const Point& xn, int n, const RowMatrix& context) const {
    if (cfg_.head != DenoiserHead::Continuous) throw InvalidArgument("forward_eps: discrete-head model");
    if (n < 1 || n > cfg_.steps) throw InvalidArgument("denoiser: step out of range");
    if (context.cols() != cfg_.model_dim) throw InvalidArgument("denoiser: context width mismatch");
    EpsTape t;
    t.ctx = context;
    return eps_forward(Net{cfg_, lay_, params_.data()}, xn, n, t.ctx, t);
}

Point Denoiser::forward_eps(const Point& xn, int n, const ConditionSet& cond) const {
    return forward_eps(xn, n, fuse_condition(cond));
}

double Denoiser::grad(const TokenGrid& xn, int n, const ConditionSet& cond, const TokenGrid* manip,
                      const LogitLoss& loss, Vec& grad) const {
    if (cfg_.head != DenoiserHead::Discrete) throw InvalidArgument("grad: continuous-head model");
    if (grad.empty()) grad.assign(params_.size(), 0.0);
    if (grad.size() != params_.size()) throw InvalidArgument("grad: buffer size mismatch");
    if (xn.height != cfg_.height || xn.width != cfg_.width) throw InvalidArgument("denoiser: grid shape mismatch");
    xn.check_state(cfg_.vocab);
    if (n < 1 || n > cfg_.steps) throw InvalidArgument("denoiser: step out of range");
    if (cfg_.manip_context && (manip == nullptr || !manip->same_shape(xn))) {
        throw InvalidArgument("denoiser: missing manipulation grid");
    }
    const Net net{cfg_, lay_, params_.data()};
    GridTape t;
    t.ctx = fuse_forward(net, context_input(cond), t.fuse);
    const Mat z = grid_forward(net, xn, n, t.ctx, manip, t);
    Vec dz(static_cast<std::size_t>(z.size()), 0.0);
    const double l = loss(std::span<const double>(z.data(), static_cast<std::size_t>(z.size())), dz);
    if (!std::isfinite(l)) throw DivergenceError("non-finite loss", -1);
    if (dz.size() != static_cast<std::size_t>(z.size())) throw InvalidArgument("grad: loss gradient size mismatch");
    const Mat dlogits = CMap(dz.data(), z.rows(), z.cols());
    const Grad g{grad.data()};
    const Mat dctx = grid_backward(net, xn, manip, t, dlogits, g);
    fuse_backward(net, t.fuse, dctx, g);
    return l;
}

double Denoiser::grad_eps(const Point& xn, int n, const ConditionSet& cond, const EpsLossFn& loss,
                          Vec& grad) const {
    if (cfg_.head != DenoiserHead::Continuous) throw InvalidArgument("grad_eps: discrete-head model");
    if (grad.empty()) grad.assign(params_.size(), 0.0);
    if (grad.size() != params_.size()) throw InvalidArgument("grad: buffer size mismatch");
    if (n < 1 || n > cfg_.steps) throw InvalidArgument("denoiser: step out of range");
    const Net net{cfg_, lay_, params_.data()};
    EpsTape t;
    t.ctx = fuse_forward(net, context_input(cond), t.fuse);
    const Point e = eps_forward(net, xn, n, t.ctx, t);
    Point de{0.0, 0.0};
    const double l = loss(e, de);
    if (!std::isfinite(l)) throw DivergenceError("non-finite loss", -1);
    const Grad g{grad.data()};
    const Mat dctx = eps_backward(net, t, de, g);
    fuse_backward(net, t.fuse, dctx, g);
    return l;
}

void Denoiser::save(const std::string& path) const {
    BinaryWriter w(path);
    w.magic(kCkptMagic);
    w.put<std::uint32_t>(kCkptVersion);
    w.put<std::uint8_t>(cfg_.head == DenoiserHead::Discrete ? 0 : 1);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(cfg_.fusion));
    w.put<std::uint8_t>(cfg_.manip_context ? 1 : 0);
    for (int v : {cfg_.vocab, cfg_.height, cfg_.width, cfg_.embed_dim, cfg_.model_dim, cfg_.ffn_dim, cfg_.layers,
                  cfg_.time_features, cfg_.steps, cfg_.k}) {
        w.put<std::int32_t>(v);
    }
    w.put<std::uint64_t>(params_.size());
    w.put_all(params_);
    w.finish();
}

Denoiser Denoiser::load(const std::string& path) {
    BinaryReader r(path);
    r.expect_magic(kCkptMagic);
    const auto version = r.get<std::uint32_t>();
    if (version != kCkptVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
    DenoiserConfig c;
    const auto head = r.get<std::uint8_t>();
    const auto fusion = r.get<std::uint8_t>();
    const auto manip = r.get<std::uint8_t>();
    if (head > 1 || fusion > 2 || manip > 1) throw DataError("corrupt checkpoint header: " + path);
    c.head = head == 0 ? DenoiserHead::Discrete : DenoiserHead::Continuous;
    c.fusion = static_cast<FusionVariant>(fusion);
    c.manip_context = manip == 1;
    for (int* v : {&c.vocab, &c.height, &c.width, &c.embed_dim, &c.model_dim, &c.ffn_dim, &c.layers,
                   &c.time_features, &c.steps, &c.k}) {
        *v = r.get<std::int32_t>();
    }
    try {
        c.validate(c.embed_dim);
        if (c.vocab > 255 || c.positions() > 4096 || c.model_dim > 1024 || c.ffn_dim > 4096 || c.layers > 16 ||
            c.time_features > 64 || c.k > 4096 || c.embed_dim > 4096) {
            throw InvalidArgument("sizes out of range");
        }
    } catch (const InvalidArgument& e) {
        throw DataError(std::string("corrupt checkpoint config: ") + e.what());
    }
    Denoiser m(c);
    const auto count = r.get<std::uint64_t>();
    if (count != m.params_.size()) {
        throw DataError("checkpoint parameter count " + std::to_string(count) + " does not match its config (" +
                        std::to_string(m.params_.size()) + ")");
    }
    r.require(count, sizeof(double));
    m.params_ = r.get_all<double>(count);
    for (double v : m.params_) {
        if (!std::isfinite(v)) throw DataError("non-finite parameter in checkpoint: " + path);
    }
    r.expect_end();
    return m;
}

}  // namespace rcd
