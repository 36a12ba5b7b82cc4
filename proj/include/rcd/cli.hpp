#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "rcd/denoiser.hpp"
#include "rcd/embedspace.hpp"
#include "rcd/trainer.hpp"
#include "rcd/vecindex.hpp"

namespace rcd {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitDivergence = 3;

struct ConfigKey {
    const char* name;
    const char* default_value;
    const char* help;
};

/// Every accepted key with its default, in documentation order.
std::span<const ConfigKey> config_keys();

/// key=value settings, one per line. Keys are "section.name"; a "[section]"
/// line prefixes the bare names that follow. "#" starts a comment.
class RunConfig {
  public:
    RunConfig();  ///< all defaults

    /// Throws InvalidArgument on malformed lines, unknown keys or bad values.
    static RunConfig parse(const std::string& text);
    /// Throws DataError when the file cannot be read.
    static RunConfig load(const std::string& path);

    /// Accepts "key=value"; throws InvalidArgument for unknown keys.
    void set(const std::string& key, const std::string& value);
    void set(const std::string& assignment);

    const std::string& get(const std::string& key) const;
    long get_int(const std::string& key) const;
    std::uint64_t get_u64(const std::string& key) const;
    double get_double(const std::string& key) const;
    bool get_bool(const std::string& key) const;

    /// All effective values as "key=value" lines.
    std::string to_text() const;

    WorldSpec world_spec() const;
    IvfPqParams index_params() const;
    TrainConfig train_config() const;

  private:
    std::map<std::string, std::string> values_;
};

// Grid files. Text art uses one character per token ('0'-'9' then 'a'-'z'),
// rows on separate lines and a blank line between grids.
std::string grid_to_text(const TokenGrid& grid);
std::string grids_to_text(std::span<const TokenGrid> grids);
std::vector<TokenGrid> grids_from_text(const std::string& text);

/// "RDGRIDS1", count (u64), H, W (u32), tokens (u8).
void save_grids(std::span<const TokenGrid> grids, const std::string& path);
/// Reads the binary format, or text art when the magic is absent.
std::vector<TokenGrid> load_grids(const std::string& path);

struct ScoreFilter {
    std::optional<std::pair<double, double>> range;  ///< keep low <= score < high
    int quantile = 0;                                ///< 1..5, 0 = off
    std::size_t pool = 10000;
};

/// Parses "L,H".
std::pair<double, double> parse_filter_range(const std::string& text);

struct FilteredNeighbors {
    ConditionSet cond;
    std::vector<std::int64_t> ids;
    double mean_score = 0.0;  ///< over the kept neighbors
    std::size_t pool_size = 0;
    std::size_t survivors = 0;
};

/// Retrieves a candidate pool, keeps candidates inside the score range and
/// then inside the requested fifth of the pool's score order, and takes the
/// K nearest survivors. Throws DataError naming the thresholds when nothing
/// survives.
FilteredNeighbors filtered_condition(const RetrievalIndex& index, const Embedding& query, int k,
                                     const Scorer& scorer, const ScoreFilter& filter);

/// Index over the training split of `exp` with the given quantizer settings.
RetrievalIndex build_training_index(const Experiment& exp, const IvfPqParams& params, int nprobe);

/// Runs one command; returns the process exit code.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace rcd
