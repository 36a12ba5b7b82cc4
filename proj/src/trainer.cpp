#include "rcd/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>

namespace rcd {

namespace {

constexpr std::uint64_t kInitTag = 0x1417;
constexpr std::uint64_t kTrainTag = 0x7241;
constexpr std::uint64_t kQueryTag = 0x71;
constexpr std::uint64_t kChainTag = 0x73;
constexpr std::uint64_t kVlbTag = 0x76;
constexpr std::uint64_t kFractionTag = 0xF4AC;

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void require(bool ok, const char* what) {
    if (!ok) throw InvalidArgument(std::string("train config: ") + what);
}

}  // namespace

void TrainConfig::validate() const {
    require(k >= 0, "K must be >= 0");
    require(null_dropout >= 0.0 && null_dropout <= 1.0, "null_dropout must be in [0, 1]");
    require(index_fraction > 0.0 && index_fraction <= 1.0, "index_fraction must be in (0, 1]");
    require(steps >= 0, "steps must be >= 0");
    require(std::isfinite(learning_rate) && learning_rate > 0.0, "learning_rate must be positive");
    require(batch_size >= 1, "batch_size must be >= 1");
    require(log_every >= 1, "log_every must be >= 1");
    require(eval_samples >= 1, "eval_samples must be >= 1");
    require(diffusion_steps >= 1, "diffusion_steps must be >= 1");
    require(train_per_concept >= 1, "train_per_concept must be >= 1");
    require(xi >= 0.0 && std::isfinite(xi), "xi must be >= 0");
    require(gap >= 0.0 && std::isfinite(gap), "gap must be >= 0");
    require(std::isfinite(lambda_cfg), "lambda_cfg must be finite");
}

DenoiserConfig TrainConfig::denoiser_config(DenoiserHead head, int vocab, int height, int width, int dim) const {
    DenoiserConfig c;
    c.head = head;
    c.fusion = fusion;
    c.vocab = vocab;
    c.height = height;
    c.width = width;
    c.embed_dim = dim;
    c.model_dim = model_dim;
    c.ffn_dim = ffn_dim;
    c.layers = layers;
    c.steps = diffusion_steps;
    c.k = k;
    return c;
}

// ---------------------------------------------------------------------------
// Experiment

Experiment Experiment::make(ConceptWorld world, int train_per_concept) {
    if (train_per_concept < 1 || train_per_concept > world.per_concept) {
        throw InvalidArgument("train_per_concept out of range");
    }
    GridEncoder encoder(world.vocab, world.height, world.width);
    std::vector<Embedding> emb;
    emb.reserve(world.size());
    for (const auto& g : world.samples) emb.push_back(encoder.embed(g));
    std::vector<Embedding> tmpl;
    for (const auto& t : world.templates) tmpl.push_back(encoder.embed(t));
    auto train = world.train_indices(train_per_concept);
    auto heldout = world.heldout_indices(train_per_concept);
    std::vector<Embedding> train_emb;
    std::vector<int> train_labels;
    for (auto i : train) {
        train_emb.push_back(emb[i]);
        train_labels.push_back(world.labels[i]);
    }
    QueryEncoder queries(train_emb, train_labels, world.concepts);
    return Experiment{std::move(world), std::move(encoder), train_per_concept, std::move(train),
                      std::move(heldout),  std::move(emb),     std::move(tmpl),   std::move(queries)};
}

RetrievalIndex Experiment::build_index(double fraction, std::uint64_t seed) const {
    std::vector<std::int64_t> ids(train.begin(), train.end());
    if (fraction < 1.0) ids = nested_subset(ids, fraction, seed);
    FlatIndex flat(encoder.dim());
    for (auto id : ids) flat.add(id, embeddings[static_cast<std::size_t>(id)]);
    IvfPqParams params;
    params.seed = seed;
    return RetrievalIndex::build(std::move(flat), params);
}

int Experiment::classify(const TokenGrid& grid) const {
    const Embedding e = encoder.embed(grid);
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < template_embeddings.size(); ++c) {
        const double d = cosine_distance(e, template_embeddings[c]);
        if (d < best_d) {
            best_d = d;
            best = static_cast<int>(c);
        }
    }
    return best;
}

DiscreteSchedule Experiment::schedule(int steps) const { return make_schedule(steps, world.vocab); }

std::vector<std::int64_t> nested_subset(std::span<const std::int64_t> ids, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw InvalidArgument("subset fraction must be in (0, 1]");
    std::vector<std::int64_t> perm(ids.begin(), ids.end());
    Rng rng(seed);
    for (std::size_t i = perm.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng.below(i));
        std::swap(perm[i - 1], perm[j]);
    }
    const double want = std::ceil(fraction * static_cast<double>(perm.size()) - 1e-9);
    const auto count = std::clamp<std::size_t>(static_cast<std::size_t>(want), 1, std::max<std::size_t>(perm.size(), 1));
    perm.resize(std::min(count, perm.size()));
    std::sort(perm.begin(), perm.end());
    return perm;
}

// ---------------------------------------------------------------------------
// Conditions

ConditionSet retrieve_condition(const RetrievalIndex& index, const Embedding& emb, int k,
                                std::optional<std::int64_t> exclude) {
    if (k < 0) throw InvalidArgument("retrieve_condition: K must be >= 0");
    std::vector<Embedding> found;
    if (k > 0 && index.size() > 0) {
        const auto want = static_cast<std::size_t>(k) + (exclude ? 1 : 0);
        const auto res = index.search(emb.values(), want);
        for (const auto& hit : res.hits) {
            if (exclude && hit.id == *exclude) continue;
            if (found.size() == static_cast<std::size_t>(k)) break;
            const auto v = index.raw().vector_of(hit.id);
            found.push_back(Embedding::from_unit(Vec(v.begin(), v.end())));
        }
    }
    return ConditionSet::make(emb, found, k);
}

std::vector<ConditionSet> training_conditions(const Experiment& exp, const RetrievalIndex& index,
                                              const TrainConfig& cfg) {
    std::vector<ConditionSet> out;
    out.reserve(exp.train.size());
    for (auto i : exp.train) {
        std::optional<std::int64_t> self;
        if (cfg.exclude_self) self = static_cast<std::int64_t>(i);
        out.push_back(retrieve_condition(index, exp.embeddings[i], cfg.k, self));
    }
    return out;
}

Embedding eval_query(const Experiment& exp, const TrainConfig& cfg, int concept_id, int m) {
    const auto seed = derive_seed(derive_seed(cfg.eval_seed, kQueryTag), static_cast<std::uint64_t>(concept_id),
                                  static_cast<std::uint64_t>(m));
    return exp.queries.embed_query(concept_id, cfg.gap, seed);
}

ConditionSet eval_condition(const Experiment& exp, const RetrievalIndex& index, const TrainConfig& cfg,
                            int concept_id, int m) {
    return retrieve_condition(index, eval_query(exp, cfg, concept_id, m), cfg.k);
}

// ---------------------------------------------------------------------------
// Log

double TrainLog::head_mean(std::size_t window) const {
    const std::size_t w = std::min(window, step_loss.size());
    if (w == 0) return 0.0;
    return std::accumulate(step_loss.begin(), step_loss.begin() + static_cast<std::ptrdiff_t>(w), 0.0) /
           static_cast<double>(w);
}

double TrainLog::tail_mean(std::size_t window) const {
    const std::size_t w = std::min(window, step_loss.size());
    if (w == 0) return 0.0;
    return std::accumulate(step_loss.end() - static_cast<std::ptrdiff_t>(w), step_loss.end(), 0.0) /
           static_cast<double>(w);
}

double TrainLog::reduction(std::size_t window) const {
    const double h = head_mean(window);
    return h > 0.0 ? 1.0 - tail_mean(window) / h : 0.0;
}

std::string TrainLog::to_text() const {
    std::string out;
    char buf[128];
    for (const auto& e : entries) {
        std::snprintf(buf, sizeof buf, "%ld %.9g %.9g %.9g\n", e.step, e.loss, e.kl, e.aux);
        out += buf;
    }
    return out;
}

void TrainLog::write(const std::string& path) const {
    std::ofstream f(path, std::ios::app);
    if (!f) throw DataError("cannot write " + path);
    f << to_text();
    if (!f) throw DataError("write failed: " + path);
}

// ---------------------------------------------------------------------------
// Training

TrainResult train_loop(Denoiser model, const DiscreteSchedule& s, const ExampleSource& source,
                       const TrainConfig& cfg, const TraceHook& hook) {
    cfg.validate();
    const DenoiserConfig& mc = model.config();
    if (mc.steps != s.steps || mc.vocab != s.vocab) throw InvalidArgument("train: model and schedule disagree");
    const int positions = mc.positions();
    const int vocab = mc.vocab;
    Rng rng(derive_seed(cfg.seed, kTrainTag));
    TrainLog log;
    Vec grad(model.param_count(), 0.0);
    double acc_loss = 0.0, acc_kl = 0.0, acc_aux = 0.0;
    int acc_count = 0;
    const double inv_batch = 1.0 / cfg.batch_size;

    for (long step = 1; step <= cfg.steps; ++step) {
        std::fill(grad.begin(), grad.end(), 0.0);
        double batch_loss = 0.0, batch_kl = 0.0, batch_aux = 0.0;
        for (int slot = 0; slot < cfg.batch_size; ++slot) {
            TrainExample ex = source(rng);
            const bool nulled = rng.uniform() < cfg.null_dropout;
            const ConditionSet cond = nulled ? ex.cond.nulled() : std::move(ex.cond);
            const int n = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(s.steps)));
            const TokenGrid xn = sample_forward(s, ex.x0, n, rng);
            VlbTerms terms;
            Denoiser::LogitLoss loss = [&](std::span<const double> z, Vec& dz) {
                for (double v : z) {
                    if (!std::isfinite(v)) return std::numeric_limits<double>::quiet_NaN();
                }
                terms = vlb_terms(s, GridDist::from_token_logits(positions, vocab, z), ex.x0, xn, n, cfg.xi, &dz);
                return terms.loss;
            };
            double l = 0.0;
            try {
                l = model.grad(xn, n, cond, ex.manip ? &*ex.manip : nullptr, loss, grad);
            } catch (const DivergenceError&) {
                throw DivergenceError("training diverged: non-finite loss at step " + std::to_string(step), step);
            }
            batch_loss += l;
            batch_kl += terms.main;
            batch_aux += terms.aux;
            if (hook) hook(StepTrace{step, slot, ex.item, n, nulled, terms.main, terms.aux, l});
        }
        auto& p = model.params();
        for (std::size_t i = 0; i < p.size(); ++i) {
            if (!std::isfinite(grad[i])) {
                throw DivergenceError("training diverged: non-finite gradient at step " + std::to_string(step), step);
            }
            p[i] -= cfg.learning_rate * inv_batch * grad[i];
        }
        log.step_loss.push_back(batch_loss * inv_batch);
        acc_loss += batch_loss * inv_batch;
        acc_kl += batch_kl * inv_batch;
        acc_aux += batch_aux * inv_batch;
        ++acc_count;
        if (step % cfg.log_every == 0 || step == cfg.steps) {
            log.entries.push_back({step, acc_loss / acc_count, acc_kl / acc_count, acc_aux / acc_count});
            acc_loss = acc_kl = acc_aux = 0.0;
            acc_count = 0;
        }
    }
    return TrainResult{std::move(model), std::move(log)};
}

TrainResult train(const Experiment& exp, const RetrievalIndex& index, const TrainConfig& cfg,
                  const TraceHook& hook) {
    cfg.validate();
    const auto conds = training_conditions(exp, index, cfg);
    const auto& w = exp.world;
    const auto mc = cfg.denoiser_config(DenoiserHead::Discrete, w.vocab, w.height, w.width, exp.encoder.dim());
    Denoiser model = Denoiser::init(mc, derive_seed(cfg.seed, kInitTag), exp.encoder.dim());
    ExampleSource source = [&](Rng& rng) {
        const auto j = static_cast<std::size_t>(rng.below(exp.train.size()));
        const std::size_t item = exp.train[j];
        return TrainExample{item, w.samples[item], conds[j], std::nullopt};
    };
    return train_loop(std::move(model), exp.schedule(cfg.diffusion_steps), source, cfg, hook);
}

// ---------------------------------------------------------------------------
// Sampling and evaluation

TokenGrid sample_grid(const Denoiser& model, const DiscreteSchedule& s, const ConditionSet& cond, double lambda,
                      Rng& rng, const TokenGrid* manip) {
    const DenoiserConfig& mc = model.config();
    const RowMatrix cctx = model.fuse_condition(cond);
    const RowMatrix uctx = model.fuse_condition(cond.nulled());
    X0Model x0 = [&](const TokenGrid& xn, int n, bool conditional) {
        const Vec z = model.logits(xn, n, conditional ? cctx : uctx, manip);
        return GridDist::from_token_logits(mc.positions(), mc.vocab, z);
    };
    auto res = sample_loop(x0, s, mc.height, mc.width, lambda, rng);
    if (res.residual_masks != 0) throw DataError("sampler left MASK tokens in the output");
    return std::move(res.grid);
}

GridSampler make_sampler(const Denoiser& model, const DiscreteSchedule& s, double lambda) {
    return [&model, &s, lambda](const ConditionSet& cond, Rng& rng) {
        return sample_grid(model, s, cond, lambda, rng);
    };
}

EvalReport evaluate_sampler(const GridSampler& sampler, const Experiment& exp, const RetrievalIndex& index,
                            const TrainConfig& cfg) {
    cfg.validate();
    EvalReport r;
    double nn_sum = 0.0;
    int nn_count = 0;
    for (int c = 0; c < exp.world.concepts; ++c) {
        for (int m = 0; m < cfg.eval_samples; ++m) {
            const Embedding q = eval_query(exp, cfg, c, m);
            const ConditionSet cond = retrieve_condition(index, q, cfg.k);
            if (cfg.k > 0 && cond.truncated()) r.truncated = true;
            const auto nn = index.search(q.values(), 1);
            if (!nn.hits.empty()) {
                nn_sum += nn.hits[0].distance;
                ++nn_count;
            }
            Rng rng(derive_seed(derive_seed(cfg.eval_seed, kChainTag), static_cast<std::uint64_t>(c),
                                static_cast<std::uint64_t>(m)));
            const int pred = exp.classify(sampler(cond, rng));
            r.predictions.push_back(pred);
            r.correct += pred == c ? 1 : 0;
            ++r.samples;
        }
    }
    r.accuracy = r.samples > 0 ? static_cast<double>(r.correct) / r.samples : 0.0;
    r.mean_nn_distance = nn_count > 0 ? nn_sum / nn_count : 0.0;
    return r;
}

double heldout_vlb(const Denoiser& model, const Experiment& exp, const RetrievalIndex& index,
                   const TrainConfig& cfg, int draws_per_grid) {
    if (draws_per_grid < 1) throw InvalidArgument("heldout_vlb: draws_per_grid must be >= 1");
    if (exp.heldout.empty()) return 0.0;
    const DiscreteSchedule s = exp.schedule(cfg.diffusion_steps);
    const DenoiserConfig& mc = model.config();
    const double prior = prior_kl_per_position(s) * mc.positions();
    double total = 0.0;
    for (auto i : exp.heldout) {
        const ConditionSet cond = retrieve_condition(index, exp.embeddings[i], cfg.k);
        const RowMatrix ctx = model.fuse_condition(cond);
        Rng rng(derive_seed(derive_seed(cfg.eval_seed, kVlbTag), static_cast<std::uint64_t>(i)));
        const TokenGrid& x0 = exp.world.samples[i];
        double sum = 0.0;
        for (int d = 0; d < draws_per_grid; ++d) {
            const int n = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(s.steps)));
            const TokenGrid xn = sample_forward(s, x0, n, rng);
            const auto dist = GridDist::from_token_logits(mc.positions(), mc.vocab, model.logits(xn, n, ctx));
            sum += vlb_terms(s, dist, x0, xn, n, 0.0).main;
        }
        total += s.steps * sum / draws_per_grid + prior;
    }
    return total / static_cast<double>(exp.heldout.size());
}

EvalReport evaluate(const Denoiser& model, const Experiment& exp, const RetrievalIndex& index,
                    const TrainConfig& cfg) {
    const DiscreteSchedule s = exp.schedule(cfg.diffusion_steps);
    EvalReport r = evaluate_sampler(make_sampler(model, s, cfg.lambda_cfg), exp, index, cfg);
    r.heldout_vlb = heldout_vlb(model, exp, index, cfg);
    return r;
}

// ---------------------------------------------------------------------------
// Ablations

std::string AblationTable::to_csv() const {
    std::string out = "label,value,accuracy,heldout_vlb,mean_nn_distance,truncated,loss_reduction,samples\n";
    for (const auto& r : rows) {
        out += r.label + "," + fmt(r.value) + "," + fmt(r.report.accuracy) + "," + fmt(r.report.heldout_vlb) + "," +
               fmt(r.report.mean_nn_distance) + "," + (r.report.truncated ? "1" : "0") + "," +
               fmt(r.loss_reduction) + "," + std::to_string(r.report.samples) + "\n";
    }
    return out;
}

void AblationTable::write_csv(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write " + path);
    f << to_csv();
    if (!f) throw DataError("write failed: " + path);
}

AblationTable ablate_k(const Denoiser& model, const Experiment& exp, const RetrievalIndex& index,
                       const TrainConfig& cfg, std::span<const int> ks) {
    AblationTable t{"k", {}};
    for (int k : ks) {
        if (k < 1) throw InvalidArgument("ablate_k: K values must be >= 1 (no-kNN is added separately)");
        TrainConfig c = cfg;
        c.k = k;
        t.rows.push_back({"K=" + std::to_string(k), static_cast<double>(k), evaluate(model, exp, index, c), 0.0});
    }
    TrainConfig c = cfg;
    c.k = 0;
    t.rows.push_back({"no-kNN", 0.0, evaluate(model, exp, index, c), 0.0});
    return t;
}

AblationTable ablate_index_fraction(const Denoiser& model, const Experiment& exp, const RetrievalIndex& index,
                                    const TrainConfig& cfg, std::span<const double> fractions) {
    AblationTable t{"index-fraction", {}};
    std::vector<std::int64_t> ids;
    for (std::size_t i = 0; i < index.size(); ++i) ids.push_back(index.raw().id_at(i));
    const auto seed = derive_seed(cfg.seed, kFractionTag);
    for (double f : fractions) {
        if (!(f > 0.0 && f <= 1.0)) throw InvalidArgument("ablate_index_fraction: fraction must be in (0, 1]");
        char label[32];
        std::snprintf(label, sizeof label, "fraction=%g", f);
        if (f == 1.0) {
            t.rows.push_back({label, f, evaluate(model, exp, index, cfg), 0.0});
            continue;
        }
        const RetrievalIndex sub = index.subset(nested_subset(ids, f, seed));
        t.rows.push_back({label, f, evaluate(model, exp, sub, cfg), 0.0});
    }
    return t;
}

AblationTable ablate_fusion(const Experiment& exp, const RetrievalIndex& index, const TrainConfig& cfg) {
    AblationTable t{"fusion", {}};
    const std::size_t window = std::max<std::size_t>(1, std::min<std::size_t>(100, static_cast<std::size_t>(cfg.steps) / 4));
    int ordinal = 1;
    for (FusionVariant v : kFusionVariants) {
        TrainConfig c = cfg;
        c.fusion = v;
        TrainResult r = train(exp, index, c);
        AblationRow row{to_string(v), static_cast<double>(ordinal++), evaluate(r.model, exp, index, c),
                        r.log.reduction(window)};
        t.rows.push_back(std::move(row));
    }
    return t;
}

// ---------------------------------------------------------------------------
// Continuous branch

PointExperiment PointExperiment::make(PointWorld world, int train_per_component) {
    PointEncoder encoder;
    auto train = world.train_indices(train_per_component);
    std::vector<Embedding> emb;
    emb.reserve(world.data.size());
    for (const auto& p : world.data.points) emb.push_back(encoder.embed(p));
    std::vector<Embedding> train_emb;
    std::vector<int> train_labels;
    for (auto i : train) {
        train_emb.push_back(emb[i]);
        train_labels.push_back(world.data.labels[i]);
    }
    QueryEncoder queries(train_emb, train_labels, world.components());
    return PointExperiment{std::move(world), encoder, train_per_component, std::move(train), std::move(emb),
                           std::move(queries)};
}

RetrievalIndex PointExperiment::build_index() const {
    FlatIndex flat(encoder.dim());
    for (auto i : train) flat.add(static_cast<std::int64_t>(i), embeddings[i]);
    return RetrievalIndex::build(std::move(flat), IvfPqParams{});
}

TrainResult train_continuous(const PointExperiment& exp, const RetrievalIndex& index, const TrainConfig& cfg) {
    cfg.validate();
    const ContinuousSchedule s = make_continuous_schedule(cfg.diffusion_steps);
    const int dim = exp.encoder.dim();
    Denoiser model = Denoiser::init(cfg.denoiser_config(DenoiserHead::Continuous, kDefaultVocab, kDefaultGridSide,
                                                        kDefaultGridSide, dim),
                                    derive_seed(cfg.seed, kInitTag), dim);
    std::vector<ConditionSet> conds;
    for (auto i : exp.train) {
        std::optional<std::int64_t> self;
        if (cfg.exclude_self) self = static_cast<std::int64_t>(i);
        conds.push_back(retrieve_condition(index, exp.embeddings[i], cfg.k, self));
    }
    Rng rng(derive_seed(cfg.seed, kTrainTag));
    TrainLog log;
    Vec grad(model.param_count(), 0.0);
    const double inv_batch = 1.0 / cfg.batch_size;
    double acc = 0.0;
    int acc_count = 0;
    for (long step = 1; step <= cfg.steps; ++step) {
        std::fill(grad.begin(), grad.end(), 0.0);
        double batch_loss = 0.0;
        for (int slot = 0; slot < cfg.batch_size; ++slot) {
            const auto j = static_cast<std::size_t>(rng.below(exp.train.size()));
            const bool nulled = rng.uniform() < cfg.null_dropout;
            const ConditionSet cond = nulled ? conds[j].nulled() : conds[j];
            const auto d = draw_noising(s, exp.world.data.points[exp.train[j]], rng);
            Denoiser::EpsLossFn loss = [&](const Point& e, Point& de) {
                const double a = e[0] - d.eps[0];
                const double b = e[1] - d.eps[1];
                de = {2.0 * a, 2.0 * b};
                return a * a + b * b;
            };
            try {
                batch_loss += model.grad_eps(d.xn, d.n, cond, loss, grad);
            } catch (const DivergenceError&) {
                throw DivergenceError("training diverged: non-finite loss at step " + std::to_string(step), step);
            }
        }
        auto& p = model.params();
        for (std::size_t i = 0; i < p.size(); ++i) {
            if (!std::isfinite(grad[i])) {
                throw DivergenceError("training diverged: non-finite gradient at step " + std::to_string(step), step);
            }
            p[i] -= cfg.learning_rate * inv_batch * grad[i];
        }
        log.step_loss.push_back(batch_loss * inv_batch);
        acc += batch_loss * inv_batch;
        ++acc_count;
        if (step % cfg.log_every == 0 || step == cfg.steps) {
            log.entries.push_back({step, acc / acc_count, acc / acc_count, 0.0});
            acc = 0.0;
            acc_count = 0;
        }
    }
    return TrainResult{std::move(model), std::move(log)};
}

ContinuousEval evaluate_continuous(const Denoiser& model, const PointExperiment& exp, const RetrievalIndex& index,
                                   const TrainConfig& cfg, int per_component) {
    if (per_component < 1) throw InvalidArgument("evaluate_continuous: per_component must be >= 1");
    const ContinuousSchedule s = make_continuous_schedule(cfg.diffusion_steps);
    std::vector<int> labels;
    std::vector<RowMatrix> cctx;
    RowMatrix uctx;
    for (int c = 0; c < exp.world.components(); ++c) {
        for (int m = 0; m < per_component; ++m) {
            const auto seed = derive_seed(derive_seed(cfg.eval_seed, kQueryTag), static_cast<std::uint64_t>(c),
                                          static_cast<std::uint64_t>(m));
            const ConditionSet cond = retrieve_condition(index, exp.queries.embed_query(c, cfg.gap, seed), cfg.k);
            if (cctx.empty()) uctx = model.fuse_condition(cond.nulled());
            cctx.push_back(model.fuse_condition(cond));
            labels.push_back(c);
        }
    }
    EpsModel eps = [&](const Point& x, int n, std::size_t item, bool conditional) {
        return model.forward_eps(x, n, conditional ? cctx[item] : uctx);
    };
    Rng rng(derive_seed(cfg.eval_seed, kChainTag));
    ContinuousEval out;
    out.samples = sample_loop_cont(eps, s, labels, cfg.lambda_cfg, rng);
    int inside = 0;
    for (std::size_t i = 0; i < out.samples.size(); ++i) {
        const auto& center = exp.world.centers[static_cast<std::size_t>(labels[i])];
        const auto& p = out.samples.points[i];
        if (std::hypot(p[0] - center[0], p[1] - center[1]) <= 3.0 * exp.world.sigma) ++inside;
    }
    out.within_3sigma = static_cast<double>(inside) / static_cast<double>(out.samples.size());
    return out;
}

}  // namespace rcd
