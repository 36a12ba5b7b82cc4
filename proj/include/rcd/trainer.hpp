#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rcd/common.hpp"
#include "rcd/ddm_continuous.hpp"
#include "rcd/ddm_discrete.hpp"
#include "rcd/denoiser.hpp"
#include "rcd/embedspace.hpp"
#include "rcd/vecindex.hpp"

namespace rcd {

struct TrainConfig {
    int k = 10;
    double lambda_cfg = 8.0;
    double xi = 5e-4;
    double null_dropout = 0.10;
    int steps = 2000;
    double learning_rate = 0.05;
    int batch_size = 16;
    FusionVariant fusion = FusionVariant::SelfAttnK1;
    double index_fraction = 1.0;
    double gap = 0.3;
    std::uint64_t seed = 0;       ///< model init and training stream
    std::uint64_t eval_seed = 1;  ///< query draws and sampling chains
    bool exclude_self = false;
    int log_every = 1;
    int eval_samples = 25;  ///< sampled grids per concept
    int diffusion_steps = kDefaultDiffusionSteps;
    int train_per_concept = 90;
    int model_dim = 32;
    int ffn_dim = 128;
    int layers = 1;

    /// Throws InvalidArgument when a field is out of range.
    void validate() const;
    DenoiserConfig denoiser_config(DenoiserHead head, int vocab, int height, int width, int dim) const;
};

/// A world with its embeddings, split and query encoder.
struct Experiment {
    ConceptWorld world;
    GridEncoder encoder;
    int train_per_concept = 0;
    std::vector<std::size_t> train;
    std::vector<std::size_t> heldout;
    std::vector<Embedding> embeddings;  ///< one per world sample
    std::vector<Embedding> template_embeddings;
    QueryEncoder queries;

    static Experiment make(ConceptWorld world, int train_per_concept);

    /// Index over the training split (ids are world sample indices). A
    /// fraction below 1 keeps a seeded prefix of a fixed permutation, so
    /// smaller fractions are subsets of larger ones.
    RetrievalIndex build_index(double fraction = 1.0, std::uint64_t seed = 0) const;
    /// Nearest concept template in embedding space (ties to the lower id).
    int classify(const TokenGrid& grid) const;
    DiscreteSchedule schedule(int steps) const;
};

/// Seeded permutation prefix of `ids` holding ceil(fraction * size) entries.
std::vector<std::int64_t> nested_subset(std::span<const std::int64_t> ids, double fraction, std::uint64_t seed);

/// Query plus the raw vectors of its top-K ids; zero-padded (and so flagged
/// as truncated) when the index holds fewer than K. K = 0 gives the query
/// alone. `exclude` drops one id from the results.
ConditionSet retrieve_condition(const RetrievalIndex& index, const Embedding& emb, int k,
                                std::optional<std::int64_t> exclude = std::nullopt);

/// Training-time conditions for every training sample, in `exp.train` order.
std::vector<ConditionSet> training_conditions(const Experiment& exp, const RetrievalIndex& index,
                                              const TrainConfig& cfg);

/// Query for sample `m` of concept `c` and its inference condition.
Embedding eval_query(const Experiment& exp, const TrainConfig& cfg, int concept_id, int m);
ConditionSet eval_condition(const Experiment& exp, const RetrievalIndex& index, const TrainConfig& cfg,
                            int concept_id, int m);

struct TrainLog {
    struct Entry {
        long step = 0;
        double loss = 0.0;
        double kl = 0.0;
        double aux = 0.0;
    };
    std::vector<Entry> entries;  ///< means over each log interval
    Vec step_loss;               ///< batch-mean loss of every step

    /// Mean of the first / last `window` step losses.
    double head_mean(std::size_t window = 100) const;
    double tail_mean(std::size_t window = 100) const;
    /// 1 - tail / head.
    double reduction(std::size_t window = 100) const;

    /// Lines "step loss part_kl part_aux".
    std::string to_text() const;
    void write(const std::string& path) const;
};

struct TrainResult {
    Denoiser model;
    TrainLog log;
};

/// One sampled training item.
struct StepTrace {
    long step = 0;
    int slot = 0;
    std::size_t item = 0;
    int n = 0;
    bool nulled = false;
    double main = 0.0;
    double aux = 0.0;
    double loss = 0.0;
};
using TraceHook = std::function<void(const StepTrace&)>;

struct TrainExample {
    std::size_t item = 0;
    TokenGrid x0;
    ConditionSet cond;
    std::optional<TokenGrid> manip;
};
/// Draws the next training item; called once per batch slot.
using ExampleSource = std::function<TrainExample(Rng& rng)>;

/// SGD over the discrete VLB: per slot draw an example, null its condition
/// with probability null_dropout, draw n ~ U{1..N} and x_n ~ q(x_n | x_0).
/// Throws DivergenceError carrying the 1-based step on a non-finite loss or
/// gradient.
TrainResult train_loop(Denoiser model, const DiscreteSchedule& s, const ExampleSource& source,
                       const TrainConfig& cfg, const TraceHook& hook = {});

/// Retrieval-conditioned training on the experiment's training split.
TrainResult train(const Experiment& exp, const RetrievalIndex& index, const TrainConfig& cfg,
                  const TraceHook& hook = {});

/// Draws one grid for a condition.
using GridSampler = std::function<TokenGrid(const ConditionSet& cond, Rng& rng)>;

/// Guided ancestral sampling; the condition is fused once per chain.
TokenGrid sample_grid(const Denoiser& model, const DiscreteSchedule& s, const ConditionSet& cond, double lambda,
                      Rng& rng, const TokenGrid* manip = nullptr);
GridSampler make_sampler(const Denoiser& model, const DiscreteSchedule& s, double lambda);

struct EvalReport {
    double accuracy = 0.0;
    double heldout_vlb = 0.0;  ///< nats per grid, Monte-Carlo over steps
    int samples = 0;
    int correct = 0;
    bool truncated = false;        ///< some condition had fewer than K neighbors
    double mean_nn_distance = 0.0;  ///< mean 1-NN cosine distance of the queries
    std::vector<int> predictions;   ///< concept-major, eval_samples per concept
};

/// Samples eval_samples grids per concept from kNN conditions built off
/// query embeddings, classifies them by nearest template, and (with a
/// model) estimates the held-out VLB.
EvalReport evaluate(const Denoiser& model, const Experiment& exp, const RetrievalIndex& index,
                    const TrainConfig& cfg);
EvalReport evaluate_sampler(const GridSampler& sampler, const Experiment& exp, const RetrievalIndex& index,
                            const TrainConfig& cfg);

/// N * E_n[L_{n-1}] + L_N per held-out grid, conditioned on its own kNN.
double heldout_vlb(const Denoiser& model, const Experiment& exp, const RetrievalIndex& index,
                   const TrainConfig& cfg, int draws_per_grid = 8);

struct AblationRow {
    std::string label;
    double value = 0.0;  ///< K, fraction or variant ordinal
    EvalReport report;
    double loss_reduction = 0.0;  ///< fusion rows only
};

struct AblationTable {
    std::string name;
    std::vector<AblationRow> rows;
    std::string to_csv() const;
    void write_csv(const std::string& path) const;
};

inline constexpr int kAblationKs[] = {1, 5, 10, 20, 100, 1000};
inline constexpr double kAblationFractions[] = {0.1, 0.3, 0.5, 0.7};

/// One row per K plus a final no-kNN row, all on the same model.
AblationTable ablate_k(const Denoiser& model, const Experiment& exp, const RetrievalIndex& index,
                       const TrainConfig& cfg, std::span<const int> ks = kAblationKs);
/// Nested seeded sub-indexes of `index`, one row per fraction.
AblationTable ablate_index_fraction(const Denoiser& model, const Experiment& exp, const RetrievalIndex& index,
                                    const TrainConfig& cfg, std::span<const double> fractions = kAblationFractions);
/// Trains each fusion variant with identical seeds and budget.
AblationTable ablate_fusion(const Experiment& exp, const RetrievalIndex& index, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Continuous branch

struct PointExperiment {
    PointWorld world;
    PointEncoder encoder;
    int train_per_component = 0;
    std::vector<std::size_t> train;
    std::vector<Embedding> embeddings;
    QueryEncoder queries;

    static PointExperiment make(PointWorld world, int train_per_component);
    RetrievalIndex build_index() const;
};

/// SGD on the eps-prediction MSE with retrieval conditions and null dropout.
TrainResult train_continuous(const PointExperiment& exp, const RetrievalIndex& index, const TrainConfig& cfg);

struct ContinuousEval {
    PointBatch samples;
    double within_3sigma = 0.0;  ///< fraction within 3 sigma of the conditioned center
};

/// `per_component` samples per component, conditioned on that component's
/// query (gap cfg.gap) and its kNN.
ContinuousEval evaluate_continuous(const Denoiser& model, const PointExperiment& exp, const RetrievalIndex& index,
                                   const TrainConfig& cfg, int per_component);

}  // namespace rcd
