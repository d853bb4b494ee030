#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "livesketch/config.hpp"

namespace livesketch::eval {

// Metrics ---------------------------------------------------------------------

/// Relevance of one ranked list, judged from held labels only.
struct RankedJudgment {
  std::uint64_t query_id = 0;
  std::vector<std::uint64_t> ranked_ids;
  std::vector<bool> class_relevant;
  std::vector<bool> instance_relevant;
  /// Relevant items in the whole gallery, ranked or not.
  std::size_t class_total = 0;
  std::size_t instance_total = 0;
};

enum class Level { Class, Instance };
std::string_view level_name(Level level);

/// Mean of precision at each relevant rank, divided by `total_relevant`.
/// nullopt when nothing in the corpus is relevant.
std::optional<double> average_precision(const std::vector<bool>& relevant, std::size_t total_relevant);
/// Relevant items among the first k, over k. Throws ContractError for an
/// empty ranking or k = 0.
double precision_at_k(const std::vector<bool>& relevant, std::size_t k);
/// 0 for an empty list.
double mean_ap(const std::vector<double>& aps);

struct QueryAp {
  std::uint64_t query_id = 0;
  double ap = 0.0;
};

struct PrecisionPoint {
  std::size_t k = 0;
  double precision = 0.0;
};

struct LevelReport {
  Level level = Level::Class;
  std::vector<QueryAp> per_query;
  /// Queries without any relevant gallery item.
  std::vector<std::uint64_t> excluded;
  double map = 0.0;
  std::vector<PrecisionPoint> precision;
  /// Fraction of queries with a relevant item in the top 10.
  double hit_at_10 = 0.0;
  /// mAP of randomly shuffled rankings, averaged over trials.
  double chance_map = 0.0;
};

/// Scores judgments at one level. Excluded queries are listed and, when
/// `warn` is set, reported there.
LevelReport score(const std::vector<RankedJudgment>& judgments, Level level, const EvalConfig& config,
                  std::uint64_t seed, std::ostream* warn = nullptr);

/// Empirical chance mAP: every ranking shuffled `trials` times.
double empirical_chance_map(const std::vector<RankedJudgment>& judgments, Level level, std::size_t trials,
                            std::uint64_t seed);

// Experiments -------------------------------------------------------------------

struct ReportRow {
  std::string variant;
  LevelReport report;
};

struct ExperimentReport {
  std::string name;
  std::uint64_t seed = 0;
  nlohmann::json config;
  std::vector<ReportRow> rows;
  std::vector<std::string> notes;

  /// First row with this variant and level; throws std::out_of_range.
  const LevelReport& row(const std::string& variant, Level level) const;
};

nlohmann::json to_json(const ExperimentReport& report);
/// Plain-text table: variant, level, mAP, chance, hit@10 and P@k columns.
std::string format_table(const ExperimentReport& report);

/// Full gallery ranking per query row; ties by ascending id. Labels never
/// enter here.
std::vector<std::vector<std::uint64_t>> rank_all(const nn::Tensor& queries, const nn::Tensor& gallery,
                                                 const std::vector<std::uint64_t>& gallery_ids);

/// Class relevance from labels; instance relevance when ids coincide.
std::vector<RankedJudgment> judge(const std::vector<std::uint64_t>& query_ids, const std::vector<int>& query_labels,
                                  const std::vector<std::vector<std::uint64_t>>& rankings,
                                  const std::vector<std::uint64_t>& gallery_ids, const std::vector<int>& gallery_labels);

enum class Modality { VR, RV };
std::string_view modality_name(Modality m);

/// Test-split sketches as queries against the same sketches in the other
/// modality: V-R ranks F_V(V_E(Q)) against F_R(R_S(raster)), R-V the
/// reverse. `shuffle` permutes the strokes of the vector side.
std::vector<std::vector<std::uint64_t>> s2s_rankings(const Dataset& dataset, const SearchModels& models,
                                                     Modality modality, bool shuffle, std::size_t image_size,
                                                     std::uint64_t seed);
/// Class- and instance-level rows for one modality and shuffle setting.
ExperimentReport run_s2s(const Dataset& dataset, const SearchModels& models, Modality modality, bool shuffle,
                         const PipelineConfig& config, std::ostream* warn = nullptr);
/// V-R, R-V and both shuffle variants in one report.
ExperimentReport run_s2s_all(const Dataset& dataset, const SearchModels& models, const PipelineConfig& config,
                             std::ostream* warn = nullptr);

/// Test sketches against the augmented gallery images, class level:
///   LS      F_V(V_E(Q)) vs S_I
///   LS-R    F_R(R_S(raster Q)) vs S_I
///   LS-R-I  R_S(raster Q) vs R_I, ranked in the intermediate R space
ExperimentReport run_s2i(const Dataset& dataset, const SearchModels& models, const PipelineConfig& config,
                         std::ostream* warn = nullptr);

// Perturbation bench --------------------------------------------------------------

struct MethodSequence {
  /// linear, slerp, backprop, or sketchrnn-linear / sketchrnn-slerp for the
  /// baseline VAE.
  std::string label;
  std::vector<Sketch> frames;
  /// |F_V(v_t) - target S| for every frame. Baseline frames are re-encoded
  /// with the search VAE first; NaN where a frame does not decode.
  std::vector<double> s_distance;
  /// Frames that decode to a valid sketch, as a fraction.
  double valid_rate = 0.0;
};

struct BenchPair {
  std::uint64_t query_id = 0;
  std::uint64_t target_id = 0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double distance_before = 0.0;
  double distance_after = 0.0;
  std::vector<MethodSequence> sequences;
};

struct BenchReport {
  std::uint64_t seed = 0;
  std::vector<BenchPair> pairs;
  /// Pairs where backprop lowered L_AP strictly.
  double loss_decreased = 0.0;
  /// Pairs where backprop moved F_V strictly closer to the target.
  double distance_improved = 0.0;
  /// Pairs whose backprop sequence ends closer to the target than it starts.
  double sequence_improved = 0.0;
  nlohmann::json config;
};

/// Samples (query, target) pairs from the test split with targets of a
/// different class, runs f_backprop with weight 1 and emits a sequence of
/// `config.eval.bench_frames` frames per method. With a `baseline` VAE the
/// linear and SLERP sequences are repeated in its latent space.
BenchReport run_perturbation_bench(const Dataset& dataset, const SearchModels& models, const PipelineConfig& config,
                                   const Vae* baseline = nullptr);
nlohmann::json to_json(const BenchReport& report);

/// Grid of sketches: one row per labelled sequence, one cell per frame.
void write_contact_sheet_svg(std::ostream& out, const std::vector<std::pair<std::string, std::vector<Sketch>>>& rows,
                             double cell = 80.0);
/// Contact sheet of the first `pairs` bench pairs, every method a row.
void write_bench_svg(std::ostream& out, const BenchReport& report, std::size_t pairs = 3);

}  // namespace livesketch::eval
