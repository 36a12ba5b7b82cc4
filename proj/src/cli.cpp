#include "rcd/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>

#include "rcd/binary_io.hpp"
#include "rcd/editkit.hpp"

namespace rcd {

namespace fs = std::filesystem;

namespace {

constexpr ConfigKey kKeys[] = {
    {"world.seed", "0", "world generator seed"},
    {"world.concepts", "4", "number of concepts C"},
    {"world.per_concept", "100", "samples per concept"},
    {"world.rho", "0.1", "per-cell corruption probability"},
    {"world.vocab", "10", "token vocabulary V"},
    {"world.height", "8", "grid rows"},
    {"world.width", "8", "grid columns"},
    {"world.train_per_concept", "90", "training split size per concept (rest is held out)"},
    {"index.n_cells", "0", "IVF cells, 0 = ceil(sqrt(N))"},
    {"index.m", "8", "PQ sub-quantizers"},
    {"index.bits", "8", "bits per PQ code"},
    {"index.nprobe", "20", "IVF cells probed per query"},
    {"index.opq", "false", "learn an OPQ rotation"},
    {"index.seed", "0", "quantizer training seed"},
    {"schedule.steps", "100", "diffusion steps N"},
    {"model.fusion", "self-attn", "self-attn | cross-attn-pool | concat-linear"},
    {"model.dim", "32", "transformer width"},
    {"model.ffn", "128", "feed-forward width"},
    {"model.layers", "1", "transformer layers"},
    {"train.steps", "2000", "SGD steps"},
    {"train.lr", "0.05", "learning rate"},
    {"train.batch", "16", "batch size"},
    {"train.k", "10", "neighbors per condition"},
    {"train.null_dropout", "0.1", "probability of training on the null condition"},
    {"train.xi", "0.0005", "weight of the auxiliary x0 loss"},
    {"train.seed", "0", "model init and training stream seed"},
    {"train.log_every", "1", "steps per log line"},
    {"train.exclude_self", "false", "drop a training grid from its own neighbors"},
    {"train.gap", "0.3", "query gap used by ablation evaluation"},
    {"train.lambda", "8.0", "guidance scale used by ablation evaluation"},
    {"train.eval_samples", "25", "ablation evaluation grids per concept"},
    {"train.eval_seed", "1", "ablation evaluation seed"},
    {"sample.k", "10", "neighbors per condition, 0 = no kNN"},
    {"sample.cfg", "8.0", "guidance scale lambda"},
    {"sample.count", "16", "grids to sample"},
    {"sample.concept", "-1", "query concept, -1 cycles through all"},
    {"sample.gap", "0.3", "query gap"},
    {"sample.seed", "1", "query and sampling seed"},
    {"sample.pool", "10000", "candidate pool retrieved before score filtering"},
    {"sample.scorer_seed", "7", "seed of the linear score direction"},
    {"manip.k", "10", "neighbors added to the edit condition"},
    {"manip.lambda", "1.0", "guidance scale for edits"},
    {"manip.gap", "0.3", "query gap"},
    {"manip.seed", "1", "query and sampling seed"},
};

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

const char kTokenChars[] = "0123456789abcdefghijklmnopqrstuvwxyz";
constexpr int kMaxTextVocab = 36;

}  // namespace

std::span<const ConfigKey> config_keys() { return kKeys; }

// ---------------------------------------------------------------------------
// RunConfig

RunConfig::RunConfig() {
    for (const auto& k : kKeys) values_[k.name] = k.default_value;
}

void RunConfig::set(const std::string& key, const std::string& value) {
    auto it = values_.find(key);
    if (it == values_.end()) throw InvalidArgument("unknown config key '" + key + "'");
    const std::string old = it->second;
    it->second = value;
    // Type check against the default's shape.
    try {
        const std::string def = std::find_if(std::begin(kKeys), std::end(kKeys), [&](const ConfigKey& k) {
                                    return key == k.name;
                                })->default_value;
        if (def == "true" || def == "false") {
            get_bool(key);
        } else if (key == "model.fusion") {
            parse_fusion_variant(value);
        } else if (def.find('.') != std::string::npos) {
            get_double(key);
        } else {
            get_int(key);
        }
    } catch (...) {
        it->second = old;
        throw;
    }
}

void RunConfig::set(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw InvalidArgument("expected key=value, got '" + assignment + "'");
    set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

RunConfig RunConfig::parse(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw InvalidArgument("config line " + std::to_string(lineno) + ": bad section");
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw InvalidArgument("config line " + std::to_string(lineno) + ": expected key=value");
        }
        std::string key = trim(line.substr(0, eq));
        if (!section.empty() && key.find('.') == std::string::npos) key = section + "." + key;
        try {
            cfg.set(key, trim(line.substr(eq + 1)));
        } catch (const InvalidArgument& e) {
            throw InvalidArgument("config line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return cfg;
}

RunConfig RunConfig::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot read config: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
}

const std::string& RunConfig::get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw InvalidArgument("unknown config key '" + key + "'");
    return it->second;
}

long RunConfig::get_int(const std::string& key) const {
    const std::string& v = get(key);
    long out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) {
        throw InvalidArgument(key + ": expected an integer, got '" + v + "'");
    }
    return out;
}

std::uint64_t RunConfig::get_u64(const std::string& key) const {
    const long v = get_int(key);
    if (v < 0) throw InvalidArgument(key + ": must be >= 0");
    return static_cast<std::uint64_t>(v);
}

double RunConfig::get_double(const std::string& key) const {
    const std::string& v = get(key);
    errno = 0;
    char* end = nullptr;
    const double out = std::strtod(v.c_str(), &end);
    if (v.empty() || end != v.c_str() + v.size() || errno == ERANGE || !std::isfinite(out)) {
        throw InvalidArgument(key + ": expected a number, got '" + v + "'");
    }
    return out;
}

bool RunConfig::get_bool(const std::string& key) const {
    const std::string& v = get(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw InvalidArgument(key + ": expected true or false, got '" + v + "'");
}

std::string RunConfig::to_text() const {
    std::string out;
    for (const auto& k : kKeys) out += std::string(k.name) + "=" + values_.at(k.name) + "\n";
    return out;
}

WorldSpec RunConfig::world_spec() const {
    WorldSpec w;
    w.seed = get_u64("world.seed");
    w.concepts = static_cast<int>(get_int("world.concepts"));
    w.per_concept = static_cast<int>(get_int("world.per_concept"));
    w.rho = get_double("world.rho");
    w.vocab = static_cast<int>(get_int("world.vocab"));
    w.height = static_cast<int>(get_int("world.height"));
    w.width = static_cast<int>(get_int("world.width"));
    return w;
}

IvfPqParams RunConfig::index_params() const {
    IvfPqParams p;
    p.n_cells = static_cast<int>(get_int("index.n_cells"));
    p.m = static_cast<int>(get_int("index.m"));
    p.bits = static_cast<int>(get_int("index.bits"));
    p.use_opq = get_bool("index.opq");
    p.seed = get_u64("index.seed");
    return p;
}

TrainConfig RunConfig::train_config() const {
    TrainConfig c;
    c.k = static_cast<int>(get_int("train.k"));
    c.lambda_cfg = get_double("train.lambda");
    c.xi = get_double("train.xi");
    c.null_dropout = get_double("train.null_dropout");
    c.steps = static_cast<int>(get_int("train.steps"));
    c.learning_rate = get_double("train.lr");
    c.batch_size = static_cast<int>(get_int("train.batch"));
    c.fusion = parse_fusion_variant(get("model.fusion"));
    c.gap = get_double("train.gap");
    c.seed = get_u64("train.seed");
    c.eval_seed = get_u64("train.eval_seed");
    c.exclude_self = get_bool("train.exclude_self");
    c.log_every = static_cast<int>(get_int("train.log_every"));
    c.eval_samples = static_cast<int>(get_int("train.eval_samples"));
    c.diffusion_steps = static_cast<int>(get_int("schedule.steps"));
    c.train_per_concept = static_cast<int>(get_int("world.train_per_concept"));
    c.model_dim = static_cast<int>(get_int("model.dim"));
    c.ffn_dim = static_cast<int>(get_int("model.ffn"));
    c.layers = static_cast<int>(get_int("model.layers"));
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Grid files

std::string grid_to_text(const TokenGrid& grid) {
    std::string out;
    for (int r = 0; r < grid.height; ++r) {
        for (int c = 0; c < grid.width; ++c) {
            const int t = grid.at(r, c);
            if (t < 0 || t >= kMaxTextVocab) throw InvalidArgument("grid_to_text: token out of range");
            out += kTokenChars[t];
        }
        out += '\n';
    }
    return out;
}

std::string grids_to_text(std::span<const TokenGrid> grids) {
    std::string out;
    for (std::size_t i = 0; i < grids.size(); ++i) {
        if (i) out += '\n';
        out += grid_to_text(grids[i]);
    }
    return out;
}

std::vector<TokenGrid> grids_from_text(const std::string& text) {
    std::vector<TokenGrid> out;
    std::vector<std::string> rows;
    auto flush = [&] {
        if (rows.empty()) return;
        const int h = static_cast<int>(rows.size());
        const int w = static_cast<int>(rows[0].size());
        std::vector<int> tokens;
        for (const auto& row : rows) {
            if (static_cast<int>(row.size()) != w) throw DataError("grid text: ragged rows");
            for (char ch : row) {
                const char* p = std::strchr(kTokenChars, ch);
                if (ch == '\0' || p == nullptr) throw DataError(std::string("grid text: bad token '") + ch + "'");
                tokens.push_back(static_cast<int>(p - kTokenChars));
            }
        }
        out.emplace_back(h, w, std::move(tokens));
        rows.clear();
    };
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        line = trim(line);
        if (line.empty()) {
            flush();
        } else {
            rows.push_back(line);
        }
    }
    flush();
    return out;
}

void save_grids(std::span<const TokenGrid> grids, const std::string& path) {
    const int h = grids.empty() ? 0 : grids[0].height;
    const int w = grids.empty() ? 0 : grids[0].width;
    BinaryWriter out(path);
    out.magic("RDGRIDS1");
    out.put<std::uint64_t>(grids.size());
    out.put<std::uint32_t>(static_cast<std::uint32_t>(h));
    out.put<std::uint32_t>(static_cast<std::uint32_t>(w));
    for (const auto& g : grids) {
        if (g.height != h || g.width != w) throw InvalidArgument("save_grids: mixed grid shapes");
        for (int t : g.tokens) {
            if (t < 0 || t > 255) throw InvalidArgument("save_grids: token out of range");
            out.put<std::uint8_t>(static_cast<std::uint8_t>(t));
        }
    }
    out.finish();
}

std::vector<TokenGrid> load_grids(const std::string& path) {
    std::string head(8, '\0');
    {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw DataError("cannot open grid file: " + path);
        f.read(head.data(), 8);
        if (f.gcount() < 8 || head != "RDGRIDS1") {
            f.clear();
            f.seekg(0);
            std::stringstream ss;
            ss << f.rdbuf();
            return grids_from_text(ss.str());
        }
    }
    BinaryReader in(path);
    in.expect_magic("RDGRIDS1");
    const auto count = in.get<std::uint64_t>();
    const auto h = in.get<std::uint32_t>();
    const auto w = in.get<std::uint32_t>();
    if (count > 0 && (h == 0 || w == 0 || h > 4096 || w > 4096)) throw DataError("grid file: bad shape in " + path);
    in.require(count, static_cast<std::size_t>(h) * w);
    std::vector<TokenGrid> out;
    out.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        std::vector<int> tokens(static_cast<std::size_t>(h) * w);
        for (auto& t : tokens) t = in.get<std::uint8_t>();
        out.emplace_back(static_cast<int>(h), static_cast<int>(w), std::move(tokens));
    }
    in.expect_end();
    return out;
}

// ---------------------------------------------------------------------------
// Neighbor filtering

std::pair<double, double> parse_filter_range(const std::string& text) {
    const auto comma = text.find(',');
    if (comma == std::string::npos) throw InvalidArgument("filter: expected L,H, got '" + text + "'");
    auto num = [&](const std::string& s) {
        char* end = nullptr;
        const std::string t = trim(s);
        const double v = std::strtod(t.c_str(), &end);
        if (t.empty() || end != t.c_str() + t.size() || std::isnan(v)) {
            throw InvalidArgument("filter: bad number '" + t + "'");
        }
        return v;
    };
    const double lo = num(text.substr(0, comma));
    const double hi = num(text.substr(comma + 1));
    if (!(lo < hi)) throw InvalidArgument("filter: need L < H");
    return {lo, hi};
}

FilteredNeighbors filtered_condition(const RetrievalIndex& index, const Embedding& query, int k,
                                     const Scorer& scorer, const ScoreFilter& filter) {
    if (k < 0) throw InvalidArgument("filtered_condition: k must be >= 0");
    if (filter.quantile < 0 || filter.quantile > 5) throw InvalidArgument("quantile must be in 1..5");
    FilteredNeighbors out;
    if (k == 0) {
        out.cond = ConditionSet::make(query, {}, 0);
        return out;
    }
    const bool filtering = filter.range.has_value() || filter.quantile > 0;
    const std::size_t pool = filtering ? std::max(filter.pool, static_cast<std::size_t>(k)) : static_cast<std::size_t>(k);
    const auto hits = index.search(query.values(), pool).hits;
    out.pool_size = hits.size();

    struct Cand {
        std::size_t rank;
        double score;
    };
    std::vector<Cand> cands;
    for (std::size_t i = 0; i < hits.size(); ++i) {
        const double s = scorer.score(index.raw().vector_of(hits[i].id));
        if (filter.range && !(s >= filter.range->first && s < filter.range->second)) continue;
        cands.push_back({i, s});
    }
    if (filter.quantile > 0 && !cands.empty()) {
        // Fifths of the survivors in score order; the rank breaks score ties.
        std::vector<Cand> by_score = cands;
        std::sort(by_score.begin(), by_score.end(), [](const Cand& a, const Cand& b) {
            return a.score != b.score ? a.score < b.score : a.rank < b.rank;
        });
        const std::size_t n = by_score.size();
        const std::size_t lo = n * static_cast<std::size_t>(filter.quantile - 1) / 5;
        const std::size_t hi = n * static_cast<std::size_t>(filter.quantile) / 5;
        cands.assign(by_score.begin() + static_cast<std::ptrdiff_t>(lo), by_score.begin() + static_cast<std::ptrdiff_t>(hi));
        std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) { return a.rank < b.rank; });
    }
    out.survivors = cands.size();
    if (cands.empty()) {
        std::string what = "score filter";
        if (filter.range) what += " L=" + fmt_double(filter.range->first) + " H=" + fmt_double(filter.range->second);
        if (filter.quantile > 0) what += " quantile=" + std::to_string(filter.quantile);
        throw DataError(what + " left no candidates out of " + std::to_string(hits.size()));
    }
    if (cands.size() > static_cast<std::size_t>(k)) cands.resize(static_cast<std::size_t>(k));
    std::vector<Embedding> found;
    double sum = 0.0;
    for (const auto& c : cands) {
        const auto id = hits[c.rank].id;
        const auto v = index.raw().vector_of(id);
        found.push_back(Embedding::from_unit(Vec(v.begin(), v.end())));
        out.ids.push_back(id);
        sum += c.score;
    }
    out.mean_score = sum / static_cast<double>(cands.size());
    out.cond = ConditionSet::make(query, found, k);
    return out;
}

RetrievalIndex build_training_index(const Experiment& exp, const IvfPqParams& params, int nprobe) {
    FlatIndex flat(exp.encoder.dim());
    for (auto i : exp.train) flat.add(static_cast<std::int64_t>(i), exp.embeddings[i]);
    RetrievalIndex built = RetrievalIndex::build(std::move(flat), params);
    if (!built.ann()) return built;
    RetrievalIndex::Options opts = built.options();
    opts.nprobe = nprobe;
    return RetrievalIndex(built.raw(), *built.ann(), opts);
}

// ---------------------------------------------------------------------------
// Commands

namespace {

struct Common {
    std::string config_path;
    std::vector<std::string> sets;

    RunConfig load() const {
        RunConfig cfg = config_path.empty() ? RunConfig{} : RunConfig::load(config_path);
        for (const auto& s : sets) cfg.set(s);
        return cfg;
    }
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config_path, "key=value config file");
    cmd->add_option("--set", c.sets, "override one config key (key=value), repeatable");
}

void require_file(const std::string& path, const std::string& what) {
    if (!fs::is_regular_file(path)) throw DataError("missing " + what + ": " + path);
}

void ensure_parent(const std::string& path) {
    const fs::path p = fs::path(path).parent_path();
    if (!p.empty()) fs::create_directories(p);
}

void write_text(const std::string& path, const std::string& text) {
    ensure_parent(path);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f << text;
    if (!f) throw DataError("cannot write: " + path);
}

std::string join_path(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

Experiment load_experiment(const std::string& world_path, const RunConfig& cfg) {
    require_file(world_path, "world file");
    return Experiment::make(load_world(world_path), static_cast<int>(cfg.get_int("world.train_per_concept")));
}

RetrievalIndex open_index(const std::string& path, const Experiment& exp, const RunConfig& cfg) {
    if (path.empty()) {
        return build_training_index(exp, cfg.index_params(), static_cast<int>(cfg.get_int("index.nprobe")));
    }
    require_file(path, "index file");
    RetrievalIndex index = RetrievalIndex::load(path);
    if (index.dim() != exp.encoder.dim()) throw DataError("index dimension does not match the world: " + path);
    return index;
}

Denoiser open_model(const std::string& path, const Experiment& exp, bool manip) {
    require_file(path, "checkpoint");
    Denoiser model = Denoiser::load(path);
    const auto& c = model.config();
    if (c.head != DenoiserHead::Discrete) throw DataError("checkpoint is not a grid model: " + path);
    if (c.vocab != exp.world.vocab || c.height != exp.world.height || c.width != exp.world.width) {
        throw DataError("checkpoint grid shape does not match the world: " + path);
    }
    if (c.manip_context != manip) {
        throw DataError(std::string("checkpoint ") + (manip ? "is not" : "is") + " a manipulation model: " + path);
    }
    return model;
}

std::string counts_text(const std::vector<int>& counts) {
    std::string out;
    for (std::size_t i = 0; i < counts.size(); ++i) out += (i ? "," : "") + std::to_string(counts[i]);
    return out;
}

std::string config_lines(const RunConfig& cfg) {
    std::string out;
    std::istringstream in(cfg.to_text());
    std::string line;
    while (std::getline(in, line)) out += "config." + line + "\n";
    return out;
}

struct Cli {
    CLI::App app{"rcd: retrieval-conditioned diffusion on synthetic token grids"};
    std::function<void()> action;
    std::ostream& out;

    // Per-command state.
    Common common;
    std::string world, index, model, out_path, input, which, filter, warm_start;
    std::optional<std::int64_t> query_id;
    std::optional<int> k, count, concept_id, quantile, query_concept;
    std::optional<double> cfg_scale;
    std::optional<std::uint64_t> seed;

    explicit Cli(std::ostream& o) : out(o) {
        app.require_subcommand(1);
        std::string keys = "\nConfig keys (key=default):\n";
        for (const auto& k : config_keys()) {
            keys += "  " + std::string(k.name) + "=" + k.default_value + "  " + k.help + "\n";
        }
        keys += "\nExit codes: 0 ok, 1 usage, 2 data error, 3 divergence.\n";
        app.footer(keys);

        auto* gw = app.add_subcommand("gen-world", "generate a synthetic concept world");
        add_common(gw, common);
        gw->add_option("--out", out_path, "world file to write")->required();
        gw->callback([this] { action = [this] { gen_world_cmd(); }; });

        auto* bi = app.add_subcommand("build-index", "build an IVF-PQ index over a world's training split");
        add_common(bi, common);
        bi->add_option("--world", world, "world file")->required();
        bi->add_option("--out", out_path, "index file to write (plus <out>.raw)");
        bi->add_option("--index", index, "query an existing index instead of building one");
        bi->add_option("--query-id", query_id, "debug: search with the stored vector of this id and print its 1-NN");
        bi->callback([this] { action = [this] { build_index_cmd(); }; });

        auto* tr = app.add_subcommand("train", "train the retrieval-conditioned denoiser");
        add_common(tr, common);
        tr->add_option("--world", world, "world file")->required();
        tr->add_option("--index", index, "index file (default: built from the world)");
        tr->add_option("--out", out_path, "output directory (model.ckpt, train.log)")->required();
        tr->callback([this] { action = [this] { train_cmd(false); }; });

        auto* mt = app.add_subcommand("manip-train", "train the manipulation model");
        add_common(mt, common);
        mt->add_option("--world", world, "world file")->required();
        mt->add_option("--index", index, "index file (default: built from the world)");
        mt->add_option("--out", out_path, "output directory (manip.ckpt, train.log)")->required();
        mt->add_option("--warm-start", warm_start, "copy matching blocks from this checkpoint");
        mt->callback([this] { action = [this] { train_cmd(true); }; });

        auto* sa = app.add_subcommand("sample", "sample grids from kNN conditions");
        add_common(sa, common);
        sa->add_option("--model", model, "checkpoint")->required();
        sa->add_option("--world", world, "world whose query encoder and templates are used")->required();
        sa->add_option("--index", index, "index file, may come from another world (default: built from the world)");
        sa->add_option("--k", k, "neighbors, 0 = no kNN (sample.k)");
        sa->add_option("--cfg", cfg_scale, "guidance scale (sample.cfg)");
        sa->add_option("--filter", filter, "keep candidates with L <= score < H, given as L,H");
        sa->add_option("--quantile", quantile, "keep the Q-th fifth of candidates by score (1 = lowest)")
            ->check(CLI::Range(1, 5));
        sa->add_option("--count", count, "grids to sample (sample.count)");
        sa->add_option("--concept", concept_id, "query concept, -1 cycles (sample.concept)");
        sa->add_option("--seed", seed, "sampling seed (sample.seed)");
        sa->add_option("--out", out_path, "output directory (samples.txt, samples.bin, manifest.txt)")->required();
        sa->callback([this] { action = [this] { sample_cmd(); }; });

        auto* ab = app.add_subcommand("ablate", "run an ablation harness and write its CSV");
        add_common(ab, common);
        ab->add_option("--which", which, "k | index-fraction | fusion")
            ->required()
            ->check(CLI::IsMember({"k", "index-fraction", "fusion"}));
        ab->add_option("--world", world, "world file")->required();
        ab->add_option("--index", index, "index file (default: built from the world)");
        ab->add_option("--model", model, "trained checkpoint (k and index-fraction)");
        ab->add_option("--out", out_path, "CSV file to write")->required();
        ab->callback([this] { action = [this] { ablate_cmd(); }; });

        auto* ma = app.add_subcommand("manip", "edit grids towards a query concept");
        add_common(ma, common);
        ma->add_option("--model", model, "manipulation checkpoint")->required();
        ma->add_option("--world", world, "world file")->required();
        ma->add_option("--index", index, "index file (default: built from the world)");
        ma->add_option("--input", input, "grid file (binary or text art)")->required();
        ma->add_option("--query-concept", query_concept, "concept the edit is conditioned on")->required();
        ma->add_option("--seed", seed, "sampling seed (manip.seed)");
        ma->add_option("--out", out_path, "output directory (edited.txt, edited.bin, changes.txt, manifest.txt)")
            ->required();
        ma->callback([this] { action = [this] { manip_cmd(); }; });
    }

    void gen_world_cmd() {
        const RunConfig cfg = common.load();
        ensure_parent(out_path);
        save_world(gen_world(cfg.world_spec()), out_path);
        out << "wrote world " << out_path << "\n";
    }

    void build_index_cmd() {
        const RunConfig cfg = common.load();
        const Experiment exp = load_experiment(world, cfg);
        if (out_path.empty() && index.empty()) throw InvalidArgument("build-index needs --out or --index");
        RetrievalIndex idx = index.empty() ? open_index("", exp, cfg) : open_index(index, exp, cfg);
        if (index.empty()) {
            ensure_parent(out_path);
            idx.save(out_path);
            out << "wrote index " << out_path << " (" << idx.size() << " vectors)\n";
        }
        if (query_id) {
            if (!idx.raw().contains(*query_id)) throw DataError("id not in index: " + std::to_string(*query_id));
            const auto v = idx.raw().vector_of(*query_id);
            const auto hits = idx.search(v, 1).hits;
            out << "query=" << *query_id << " nearest=" << hits.at(0).id << " distance=" << fmt_double(hits[0].distance)
                << "\n";
        }
    }

    void train_cmd(bool manip) {
        const RunConfig cfg = common.load();
        const TrainConfig tc = cfg.train_config();
        const Experiment exp = load_experiment(world, cfg);
        const RetrievalIndex idx = open_index(index, exp, cfg);
        fs::create_directories(out_path);
        const std::string log_path = join_path(out_path, "train.log");
        write_text(log_path, "");
        TrainResult r = [&] {
            if (!manip) return train(exp, idx, tc);
            ManipConfig mc;
            std::optional<Denoiser> warm;
            if (!warm_start.empty()) {
                warm = open_model(warm_start, exp, false);
                mc.warm_start = &*warm;
            }
            return train_manip(exp, idx, tc, mc);
        }();
        const std::string ckpt = join_path(out_path, manip ? "manip.ckpt" : "model.ckpt");
        r.model.save(ckpt);
        r.log.write(log_path);
        out << "wrote " << ckpt << " steps=" << tc.steps;
        if (!r.log.step_loss.empty()) {
            const std::size_t w = std::min<std::size_t>(100, r.log.step_loss.size());
            out << " loss_first=" << fmt_double(r.log.head_mean(w)) << " loss_last=" << fmt_double(r.log.tail_mean(w));
        }
        out << "\n";
    }

    void sample_cmd() {
        RunConfig cfg = common.load();
        if (k) cfg.set("sample.k", std::to_string(*k));
        if (cfg_scale) cfg.set("sample.cfg", fmt_double(*cfg_scale));
        if (count) cfg.set("sample.count", std::to_string(*count));
        if (concept_id) cfg.set("sample.concept", std::to_string(*concept_id));
        if (seed) cfg.set("sample.seed", std::to_string(*seed));
        const int kk = static_cast<int>(cfg.get_int("sample.k"));
        const double lambda = cfg.get_double("sample.cfg");
        const long n = cfg.get_int("sample.count");
        const long which_concept = cfg.get_int("sample.concept");
        const double gap = cfg.get_double("sample.gap");
        const std::uint64_t sseed = cfg.get_u64("sample.seed");
        if (kk < 0) throw InvalidArgument("sample.k must be >= 0");
        if (n < 1) throw InvalidArgument("sample.count must be >= 1");
        if (gap < 0) throw InvalidArgument("sample.gap must be >= 0");

        const Experiment exp = load_experiment(world, cfg);
        if (which_concept < -1 || which_concept >= exp.world.concepts) throw InvalidArgument("sample.concept out of range");
        const Denoiser net = open_model(model, exp, false);
        const RetrievalIndex idx = open_index(index, exp, cfg);
        const Scorer scorer(idx.dim(), cfg.get_u64("sample.scorer_seed"));
        ScoreFilter sf;
        if (!filter.empty()) sf.range = parse_filter_range(filter);
        sf.quantile = quantile.value_or(0);
        const long pool = cfg.get_int("sample.pool");
        if (pool < 1) throw InvalidArgument("sample.pool must be >= 1");
        sf.pool = static_cast<std::size_t>(pool);

        const DiscreteSchedule s = exp.schedule(net.config().steps);
        std::vector<TokenGrid> grids;
        std::vector<int> counts(static_cast<std::size_t>(exp.world.concepts), 0);
        double score_sum = 0.0;
        long scored = 0, correct = 0;
        bool truncated = false;
        for (long m = 0; m < n; ++m) {
            const int c = which_concept >= 0 ? static_cast<int>(which_concept) : static_cast<int>(m % exp.world.concepts);
            const Embedding q = exp.queries.embed_query(c, gap, derive_seed(sseed, static_cast<std::uint64_t>(c),
                                                                             static_cast<std::uint64_t>(m)));
            const FilteredNeighbors fn = filtered_condition(idx, q, kk, scorer, sf);
            if (kk > 0) {
                score_sum += fn.mean_score;
                ++scored;
            }
            truncated = truncated || fn.cond.truncated();
            Rng rng(derive_seed(sseed, 0x5A3F, static_cast<std::uint64_t>(m)));
            grids.push_back(sample_grid(net, s, fn.cond, lambda, rng));
            const int pred = exp.classify(grids.back());
            ++counts[static_cast<std::size_t>(pred)];
            correct += pred == c;
        }
        fs::create_directories(out_path);
        write_text(join_path(out_path, "samples.txt"), grids_to_text(grids));
        save_grids(grids, join_path(out_path, "samples.bin"));
        std::ostringstream mf;
        mf << "command=sample\n"
           << "model=" << model << "\n"
           << "world=" << world << "\n"
           << "index=" << (index.empty() ? "(built from world)" : index) << "\n"
           << "k=" << kk << "\n"
           << "cfg=" << fmt_double(lambda) << "\n"
           << "filter=" << (sf.range ? fmt_double(sf.range->first) + "," + fmt_double(sf.range->second) : "none")
           << "\n"
           << "quantile=" << (sf.quantile ? std::to_string(sf.quantile) : "none") << "\n"
           << "count=" << n << "\n"
           << "concept=" << which_concept << "\n"
           << "seed=" << sseed << "\n"
           << "mean_neighbor_score=" << (scored ? fmt_double(score_sum / static_cast<double>(scored)) : "nan")
           << "\n"
           << "truncated=" << (truncated ? "true" : "false") << "\n"
           << "nearest_concept_counts=" << counts_text(counts) << "\n"
           << "concept_accuracy=" << fmt_double(static_cast<double>(correct) / static_cast<double>(n)) << "\n"
           << config_lines(cfg);
        write_text(join_path(out_path, "manifest.txt"), mf.str());
        out << "wrote " << n << " grids to " << out_path << "\n";
    }

    void ablate_cmd() {
        const RunConfig cfg = common.load();
        const TrainConfig tc = cfg.train_config();
        const Experiment exp = load_experiment(world, cfg);
        const RetrievalIndex idx = open_index(index, exp, cfg);
        AblationTable table;
        if (which == "fusion") {
            table = ablate_fusion(exp, idx, tc);
        } else {
            if (model.empty()) throw InvalidArgument("--which " + which + " needs --model");
            const Denoiser net = open_model(model, exp, false);
            table = which == "k" ? ablate_k(net, exp, idx, tc) : ablate_index_fraction(net, exp, idx, tc);
        }
        ensure_parent(out_path);
        table.write_csv(out_path);
        out << "wrote " << table.rows.size() << " rows to " << out_path << "\n";
    }

    void manip_cmd() {
        RunConfig cfg = common.load();
        if (seed) cfg.set("manip.seed", std::to_string(*seed));
        const Experiment exp = load_experiment(world, cfg);
        const Denoiser net = open_model(model, exp, true);
        const int c = *query_concept;
        if (c < 0 || c >= exp.world.concepts) throw InvalidArgument("--query-concept out of range");
        require_file(input, "input grid file");
        const auto grids = load_grids(input);
        if (grids.empty()) throw DataError("no grids in " + input);
        for (const auto& g : grids) {
            if (g.height != exp.world.height || g.width != exp.world.width) {
                throw DataError("input grid shape does not match the world: " + input);
            }
            try {
                g.check_data(exp.world.vocab);
            } catch (const InvalidArgument& e) {
                throw DataError(std::string("input grid: ") + e.what());
            }
        }
        const RetrievalIndex idx = open_index(index, exp, cfg);
        const std::uint64_t mseed = cfg.get_u64("manip.seed");
        const double gap = cfg.get_double("manip.gap");
        const int kk = static_cast<int>(cfg.get_int("manip.k"));
        const double lambda = cfg.get_double("manip.lambda");
        if (kk < 0 || gap < 0) throw InvalidArgument("manip.k and manip.gap must be >= 0");
        const Embedding q = exp.queries.embed_query(c, gap, derive_seed(mseed, 0x3C0E, static_cast<std::uint64_t>(c)));
        const ConditionSet cond = manip_condition(idx, q, kk);
        const DiscreteSchedule s = exp.schedule(net.config().steps);

        std::vector<TokenGrid> edited;
        std::string changes;
        long changed = 0;
        for (std::size_t i = 0; i < grids.size(); ++i) {
            Rng rng(derive_seed(mseed, 0x3D17, i));
            const ManipResult r = apply_manip(net, s, grids[i], cond, lambda, rng);
            edited.push_back(r.edited);
            changed += r.changed_count;
            if (i) changes += '\n';
            for (int row = 0; row < r.edited.height; ++row) {
                for (int col = 0; col < r.edited.width; ++col) {
                    changes += r.changed[static_cast<std::size_t>(row * r.edited.width + col)] ? 'x' : '.';
                }
                changes += '\n';
            }
        }
        fs::create_directories(out_path);
        write_text(join_path(out_path, "edited.txt"), grids_to_text(edited));
        save_grids(edited, join_path(out_path, "edited.bin"));
        write_text(join_path(out_path, "changes.txt"), changes);
        const double cells = static_cast<double>(grids.size()) * grids[0].size();
        std::ostringstream mf;
        mf << "command=manip\n"
           << "model=" << model << "\n"
           << "world=" << world << "\n"
           << "input=" << input << "\n"
           << "query_concept=" << c << "\n"
           << "grids=" << grids.size() << "\n"
           << "changed_cells=" << changed << "\n"
           << "unchanged_fraction=" << fmt_double(1.0 - static_cast<double>(changed) / cells) << "\n"
           << config_lines(cfg);
        write_text(join_path(out_path, "manifest.txt"), mf.str());
        out << "edited " << grids.size() << " grids, " << changed << " cells changed\n";
    }
};

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    Cli cli(out);
    try {
        cli.app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        cli.app.exit(e, out, err);
        return kExitOk;
    } catch (const CLI::CallForAllHelp& e) {
        cli.app.exit(e, out, err);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        cli.app.exit(e, out, err);
        return kExitUsage;
    }
    try {
        cli.action();
        return kExitOk;
    } catch (const DivergenceError& e) {
        err << "error: divergence: " << e.what() << "\n";
        return kExitDivergence;
    } catch (const DataError& e) {
        err << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const InvalidArgument& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const fs::filesystem_error& e) {
        err << "error: " << e.what() << "\n";
        return kExitData;
    }
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    std::vector<const char*> argv{"rcd"};
    for (const auto& a : args) argv.push_back(a.c_str());
    return run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace rcd
