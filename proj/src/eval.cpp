#include "livesketch/eval/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <set>
#include <stdexcept>

#include "livesketch/numerics/errors.hpp"

namespace livesketch::eval {

using nn::Tensor;

std::string_view level_name(Level level) { return level == Level::Class ? "class" : "instance"; }

std::string_view modality_name(Modality m) { return m == Modality::VR ? "V-R" : "R-V"; }

std::optional<double> average_precision(const std::vector<bool>& relevant, std::size_t total_relevant) {
  if (total_relevant == 0) return std::nullopt;
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < relevant.size(); ++i) {
    if (!relevant[i]) continue;
    ++hits;
    sum += double(hits) / double(i + 1);
  }
  return sum / double(total_relevant);
}

double precision_at_k(const std::vector<bool>& relevant, std::size_t k) {
  if (relevant.empty()) throw ContractError("precision@k of an empty ranking");
  if (k == 0) throw ContractError("precision@k needs k >= 1");
  const std::size_t n = std::min(k, relevant.size());
  return double(std::count(relevant.begin(), relevant.begin() + std::ptrdiff_t(n), true)) / double(k);
}

double mean_ap(const std::vector<double>& aps) {
  if (aps.empty()) return 0.0;
  return std::accumulate(aps.begin(), aps.end(), 0.0) / double(aps.size());
}

namespace {

const std::vector<bool>& flags(const RankedJudgment& j, Level level) {
  return level == Level::Class ? j.class_relevant : j.instance_relevant;
}

std::size_t total(const RankedJudgment& j, Level level) {
  return level == Level::Class ? j.class_total : j.instance_total;
}

}  // namespace

double empirical_chance_map(const std::vector<RankedJudgment>& judgments, Level level, std::size_t trials,
                            std::uint64_t seed) {
  if (trials == 0) return 0.0;
  std::mt19937_64 rng(seed);
  double acc = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    std::vector<double> aps;
    for (const auto& j : judgments) {
      std::vector<bool> shuffled = flags(j, level);
      std::shuffle(shuffled.begin(), shuffled.end(), rng);
      if (auto ap = average_precision(shuffled, total(j, level))) aps.push_back(*ap);
    }
    acc += mean_ap(aps);
  }
  return acc / double(trials);
}

LevelReport score(const std::vector<RankedJudgment>& judgments, Level level, const EvalConfig& config,
                  std::uint64_t seed, std::ostream* warn) {
  LevelReport r;
  r.level = level;
  std::vector<double> aps;
  std::vector<const RankedJudgment*> scored;
  for (const auto& j : judgments) {
    const auto ap = j.ranked_ids.empty() ? std::nullopt : average_precision(flags(j, level), total(j, level));
    if (!ap) {
      r.excluded.push_back(j.query_id);
      continue;
    }
    r.per_query.push_back({j.query_id, *ap});
    aps.push_back(*ap);
    scored.push_back(&j);
  }
  if (warn && !r.excluded.empty()) {
    *warn << "warning: " << r.excluded.size() << " queries have no " << level_name(level)
          << "-relevant gallery item and are excluded\n";
  }
  r.map = mean_ap(aps);
  for (std::size_t k : config.precision_ks) {
    double p = 0.0;
    for (const auto* j : scored) p += precision_at_k(flags(*j, level), k);
    r.precision.push_back({k, scored.empty() ? 0.0 : p / double(scored.size())});
  }
  std::size_t hits = 0;
  for (const auto* j : scored) hits += precision_at_k(flags(*j, level), 10) > 0.0 ? 1 : 0;
  r.hit_at_10 = scored.empty() ? 0.0 : double(hits) / double(scored.size());
  r.chance_map = empirical_chance_map(judgments, level, config.chance_trials, seed);
  return r;
}

const LevelReport& ExperimentReport::row(const std::string& variant, Level level) const {
  for (const auto& r : rows) {
    if (r.variant == variant && r.report.level == level) return r.report;
  }
  throw std::out_of_range("no report row " + variant + "/" + std::string(level_name(level)));
}

nlohmann::json to_json(const ExperimentReport& report) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : report.rows) {
    const auto& r = row.report;
    nlohmann::json per_query = nlohmann::json::array();
    for (const auto& q : r.per_query) per_query.push_back({{"query", q.query_id}, {"ap", q.ap}});
    nlohmann::json precision = nlohmann::json::array();
    for (const auto& p : r.precision) precision.push_back({{"k", p.k}, {"precision", p.precision}});
    rows.push_back({{"variant", row.variant},
                    {"level", level_name(r.level)},
                    {"map", r.map},
                    {"chance_map", r.chance_map},
                    {"hit_at_10", r.hit_at_10},
                    {"precision_at_k", precision},
                    {"per_query_ap", per_query},
                    {"excluded", r.excluded}});
  }
  return {{"experiment", report.name}, {"seed", report.seed}, {"config", report.config},
          {"rows", rows},              {"notes", report.notes}};
}

std::string format_table(const ExperimentReport& report) {
  std::string out = report.name + " (seed " + std::to_string(report.seed) + ")\n";
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-14s %-9s %8s %8s %8s", "variant", "level", "mAP", "chance", "hit@10");
  out += buf;
  if (!report.rows.empty()) {
    for (const auto& p : report.rows.front().report.precision) {
      std::snprintf(buf, sizeof buf, " %7s", ("P@" + std::to_string(p.k)).c_str());
      out += buf;
    }
  }
  out += "\n";
  for (const auto& row : report.rows) {
    const auto& r = row.report;
    std::snprintf(buf, sizeof buf, "%-14s %-9s %8.4f %8.4f %8.4f", row.variant.c_str(),
                  std::string(level_name(r.level)).c_str(), r.map, r.chance_map, r.hit_at_10);
    out += buf;
    for (const auto& p : r.precision) {
      std::snprintf(buf, sizeof buf, " %7.4f", p.precision);
      out += buf;
    }
    out += "\n";
  }
  for (const auto& n : report.notes) out += "note: " + n + "\n";
  return out;
}

std::vector<std::vector<std::uint64_t>> rank_all(const Tensor& queries, const Tensor& gallery,
                                                 const std::vector<std::uint64_t>& gallery_ids) {
  if (queries.cols() != gallery.cols()) throw DimensionError("query and gallery dimensions differ");
  std::vector<std::vector<std::uint64_t>> out(queries.rows());
  for (std::size_t i = 0; i < queries.rows(); ++i) {
    const auto ranked = brute_force(gallery, gallery_ids, queries.row_span(i), gallery.rows());
    out[i].reserve(ranked.size());
    for (const auto& n : ranked) out[i].push_back(n.id);
  }
  return out;
}

std::vector<RankedJudgment> judge(const std::vector<std::uint64_t>& query_ids, const std::vector<int>& query_labels,
                                  const std::vector<std::vector<std::uint64_t>>& rankings,
                                  const std::vector<std::uint64_t>& gallery_ids,
                                  const std::vector<int>& gallery_labels) {
  if (query_ids.size() != query_labels.size() || query_ids.size() != rankings.size()) {
    throw DimensionError("judge: queries, labels and rankings differ in count");
  }
  if (gallery_ids.size() != gallery_labels.size()) throw DimensionError("judge: gallery ids and labels differ");
  std::map<std::uint64_t, int> label_of;
  for (std::size_t i = 0; i < gallery_ids.size(); ++i) label_of[gallery_ids[i]] = gallery_labels[i];

  std::vector<RankedJudgment> out;
  out.reserve(query_ids.size());
  for (std::size_t q = 0; q < query_ids.size(); ++q) {
    RankedJudgment j;
    j.query_id = query_ids[q];
    j.ranked_ids = rankings[q];
    for (std::uint64_t id : j.ranked_ids) {
      j.class_relevant.push_back(label_of.at(id) == query_labels[q]);
      j.instance_relevant.push_back(id == j.query_id);
    }
    j.class_total = std::size_t(std::count(gallery_labels.begin(), gallery_labels.end(), query_labels[q]));
    j.instance_total = label_of.count(j.query_id);
    out.push_back(std::move(j));
  }
  return out;
}

namespace {

struct TestSide {
  std::vector<std::uint64_t> ids;
  std::vector<int> labels;
  std::vector<Sketch> sketches;
};

TestSide test_side(const Dataset& dataset) {
  TestSide t;
  for (const auto* item : dataset.split(Split::Test)) {
    t.ids.push_back(item->id);
    t.labels.push_back(item->label);
    t.sketches.push_back(item->sketch);
  }
  if (t.ids.empty()) throw ContractError("evaluation needs a non-empty test split");
  return t;
}

nlohmann::json config_echo(const PipelineConfig& config) {
  nlohmann::json j = config;
  return j;
}

const char* kScaleNote = "desk-scale toy corpus; absolute values are not comparable to web-scale benchmarks";

}  // namespace

std::vector<std::vector<std::uint64_t>> s2s_rankings(const Dataset& dataset, const SearchModels& models,
                                                     Modality modality, bool shuffle, std::size_t image_size,
                                                     std::uint64_t seed) {
  const TestSide t = test_side(dataset);
  std::vector<Sketch> vector_side = t.sketches;
  if (shuffle) {
    for (std::size_t i = 0; i < vector_side.size(); ++i) vector_side[i] = shuffle_strokes(vector_side[i], seed + t.ids[i]);
  }
  const Tensor v = models.s_q(vector_side);
  const Tensor r = models.s_r(rasterize_all(t.sketches, image_size));
  return modality == Modality::VR ? rank_all(v, r, t.ids) : rank_all(r, v, t.ids);
}

ExperimentReport run_s2s(const Dataset& dataset, const SearchModels& models, Modality modality, bool shuffle,
                         const PipelineConfig& config, std::ostream* warn) {
  const TestSide t = test_side(dataset);
  const auto rankings = s2s_rankings(dataset, models, modality, shuffle, config.image_size, config.seed);
  const auto judgments = judge(t.ids, t.labels, rankings, t.ids, t.labels);
  const std::string variant = std::string(modality_name(modality)) + (shuffle ? "-shuffle" : "");
  ExperimentReport report{"s2s", config.seed, config_echo(config), {}, {kScaleNote}};
  report.rows.push_back({variant, score(judgments, Level::Class, config.eval, config.seed, warn)});
  report.rows.push_back({variant, score(judgments, Level::Instance, config.eval, config.seed, warn)});
  return report;
}

ExperimentReport run_s2s_all(const Dataset& dataset, const SearchModels& models, const PipelineConfig& config,
                             std::ostream* warn) {
  ExperimentReport all{"s2s", config.seed, config_echo(config), {}, {kScaleNote}};
  for (Modality m : {Modality::VR, Modality::RV}) {
    for (bool shuffle : {false, true}) {
      auto part = run_s2s(dataset, models, m, shuffle, config, warn);
      for (auto& row : part.rows) all.rows.push_back(std::move(row));
    }
  }
  return all;
}

ExperimentReport run_s2i(const Dataset& dataset, const SearchModels& models, const PipelineConfig& config,
                         std::ostream* warn) {
  const TestSide t = test_side(dataset);
  const auto gallery = build_image_gallery(dataset, config.image_size, config.seed);
  if (gallery.empty()) throw ContractError("S2I needs gallery images");
  std::vector<RasterCanvas> canvases;
  std::vector<std::uint64_t> image_ids;
  std::vector<int> image_labels;
  for (const auto& g : gallery) {
    canvases.push_back(g.canvas);
    image_ids.push_back(g.id);
    image_labels.push_back(g.label);
  }
  const Tensor images = stack_rows(canvases);
  const Tensor query_rasters = rasterize_all(t.sketches, config.image_size);
  const Tensor s_images = models.s_i(images);

  ExperimentReport report{"s2i", config.seed, config_echo(config), {}, {kScaleNote}};
  const auto add = [&](const std::string& variant, const Tensor& queries, const Tensor& gallery_vectors) {
    const auto judgments = judge(t.ids, t.labels, rank_all(queries, gallery_vectors, image_ids), image_ids, image_labels);
    report.rows.push_back({variant, score(judgments, Level::Class, config.eval, config.seed, warn)});
  };
  add("LS", models.s_q(t.sketches), s_images);
  add("LS-R", models.s_r(query_rasters), s_images);
  add("LS-R-I", models.structure.embed(query_rasters, Branch::Sketch), models.structure.embed(images, Branch::Image));
  const double ls = report.row("LS", Level::Class).map;
  const double lsri = report.row("LS-R-I", Level::Class).map;
  report.notes.push_back(std::string("LS ") + (ls >= lsri ? ">=" : "<") + " LS-R-I on class-level mAP");
  return report;
}

BenchReport run_perturbation_bench(const Dataset& dataset, const SearchModels& models, const PipelineConfig& config,
                                   const Vae* baseline) {
  const TestSide t = test_side(dataset);
  if (std::set<int>(t.labels.begin(), t.labels.end()).size() < 2) {
    throw ContractError("perturbation bench needs test sketches of two classes");
  }
  const Tensor mu = models.vae.encode_mu(t.sketches);
  const Tensor s = models.joint.f_v(mu);
  const Tensor base_mu = baseline ? baseline->encode_mu(t.sketches) : Tensor();
  const auto row_vec = [](const Tensor& m, std::size_t r) {
    const auto span = m.row_span(r);
    return std::vector<double>(span.begin(), span.end());
  };

  BenchReport report;
  report.seed = config.seed;
  report.config = config_echo(config);
  nn::Rng rng(config.seed);
  std::size_t loss_down = 0, closer = 0, seq_closer = 0;
  for (std::size_t p = 0; p < config.eval.bench_pairs; ++p) {
    const std::size_t qi = rng.index(t.ids.size());
    std::size_t ti = rng.index(t.ids.size());
    while (t.labels[ti] == t.labels[qi]) ti = rng.index(t.ids.size());

    PerturbationRequest request;
    request.query_v = row_vec(mu, qi);
    request.targets = {{row_vec(mu, ti), row_vec(s, ti)}};
    request.weights = {1.0};
    request.config = config.perturb;

    BenchPair pair;
    pair.query_id = t.ids[qi];
    pair.target_id = t.ids[ti];
    const auto out = f_backprop(models.joint, request.query_v, request.targets, request.weights, config.perturb);
    pair.initial_loss = out.initial_loss;
    pair.final_loss = out.best_loss;
    pair.distance_before = target_distances(models.joint, request.query_v, request.targets)[0];
    pair.distance_after = target_distances(models.joint, out.v, request.targets)[0];
    loss_down += pair.final_loss < pair.initial_loss ? 1 : 0;
    closer += pair.distance_after < pair.distance_before ? 1 : 0;

    for (PerturbMethod method : {PerturbMethod::Linear, PerturbMethod::Slerp, PerturbMethod::Backprop}) {
      request.method = method;
      MethodSequence seq;
      seq.label = method_name(method);
      std::size_t valid = 0;
      for (auto& frame : interpolation_sequence(models.vae, models.joint, request, config.eval.bench_frames)) {
        seq.s_distance.push_back(target_distances(models.joint, frame.v, request.targets)[0]);
        valid += is_valid(frame.sketch) ? 1 : 0;
        seq.frames.push_back(std::move(frame.sketch));
      }
      seq.valid_rate = seq.frames.empty() ? 0.0 : double(valid) / double(seq.frames.size());
      if (method == PerturbMethod::Backprop && !seq.s_distance.empty()) {
        seq_closer += seq.s_distance.back() < seq.s_distance.front() ? 1 : 0;
      }
      pair.sequences.push_back(std::move(seq));
    }

    if (baseline) {
      PerturbationRequest base = request;
      base.query_v = row_vec(base_mu, qi);
      base.targets = {{row_vec(base_mu, ti), {}}};
      for (PerturbMethod method : {PerturbMethod::Linear, PerturbMethod::Slerp}) {
        base.method = method;
        MethodSequence seq;
        seq.label = "sketchrnn-" + std::string(method_name(method));
        std::size_t valid = 0;
        for (auto& frame : interpolation_sequence(*baseline, models.joint, base, config.eval.bench_frames)) {
          double d = std::numeric_limits<double>::quiet_NaN();
          if (is_valid(frame.sketch)) {
            ++valid;
            const Tensor v = models.vae.encode(frame.sketch, false).mu;
            d = target_distances(models.joint, row_vec(v, 0), request.targets)[0];
          }
          seq.s_distance.push_back(d);
          seq.frames.push_back(std::move(frame.sketch));
        }
        seq.valid_rate = seq.frames.empty() ? 0.0 : double(valid) / double(seq.frames.size());
        pair.sequences.push_back(std::move(seq));
      }
    }
    report.pairs.push_back(std::move(pair));
  }
  const double n = std::max<double>(1.0, double(report.pairs.size()));
  report.loss_decreased = double(loss_down) / n;
  report.distance_improved = double(closer) / n;
  report.sequence_improved = double(seq_closer) / n;
  return report;
}

nlohmann::json to_json(const BenchReport& report) {
  nlohmann::json pairs = nlohmann::json::array();
  for (const auto& p : report.pairs) {
    nlohmann::json seqs = nlohmann::json::array();
    for (const auto& s : p.sequences) {
      nlohmann::json frames = nlohmann::json::array();
      for (const auto& f : s.frames) frames.push_back(points_to_json(f.points));
      seqs.push_back({{"method", s.label},
                      {"s_distance", s.s_distance},
                      {"valid_rate", s.valid_rate},
                      {"frames", frames}});
    }
    pairs.push_back({{"query", p.query_id},
                     {"target", p.target_id},
                     {"initial_loss", p.initial_loss},
                     {"final_loss", p.final_loss},
                     {"distance_before", p.distance_before},
                     {"distance_after", p.distance_after},
                     {"sequences", seqs}});
  }
  return {{"experiment", "perturbation"},
          {"seed", report.seed},
          {"config", report.config},
          {"loss_decreased", report.loss_decreased},
          {"distance_improved", report.distance_improved},
          {"sequence_improved", report.sequence_improved},
          {"pairs", pairs}};
}

void write_contact_sheet_svg(std::ostream& out, const std::vector<std::pair<std::string, std::vector<Sketch>>>& rows,
                             double cell) {
  const double label_width = 2.0 * cell;
  std::size_t cols = 0;
  for (const auto& r : rows) cols = std::max(cols, r.second.size());
  const double width = label_width + double(cols) * cell;
  const double height = double(rows.size()) * cell;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const double y0 = double(r) * cell;
    out << "<text x=\"4\" y=\"" << y0 + cell / 2 << "\" font-family=\"monospace\" font-size=\"12\">"
        << rows[r].first << "</text>\n";
    for (std::size_t c = 0; c < rows[r].second.size(); ++c) {
      const double x0 = label_width + double(c) * cell;
      out << "<rect x=\"" << x0 << "\" y=\"" << y0 << "\" width=\"" << cell << "\" height=\"" << cell
          << "\" fill=\"none\" stroke=\"#ccc\"/>\n";
      const auto strokes = to_strokes(rows[r].second[c]);
      double lo_x = std::numeric_limits<double>::infinity(), lo_y = lo_x, hi_x = -lo_x, hi_y = -lo_x;
      for (const auto& line : strokes) {
        for (const auto& p : line) {
          lo_x = std::min(lo_x, p.x);
          hi_x = std::max(hi_x, p.x);
          lo_y = std::min(lo_y, p.y);
          hi_y = std::max(hi_y, p.y);
        }
      }
      if (!std::isfinite(lo_x)) continue;
      const double pad = 0.1 * cell;
      const double extent = std::max({hi_x - lo_x, hi_y - lo_y, 1e-9});
      const double k = (cell - 2 * pad) / extent;
      for (const auto& line : strokes) {
        out << "<polyline fill=\"none\" stroke=\"black\" stroke-width=\"1.5\" points=\"";
        for (const auto& p : line) out << x0 + pad + (p.x - lo_x) * k << "," << y0 + pad + (p.y - lo_y) * k << " ";
        out << "\"/>\n";
      }
    }
  }
  out << "</svg>\n";
}

void write_bench_svg(std::ostream& out, const BenchReport& report, std::size_t pairs) {
  std::vector<std::pair<std::string, std::vector<Sketch>>> rows;
  for (std::size_t i = 0; i < std::min(pairs, report.pairs.size()); ++i) {
    const auto& p = report.pairs[i];
    for (const auto& s : p.sequences) {
      rows.emplace_back(std::to_string(p.query_id) + "->" + std::to_string(p.target_id) + " " +
                            s.label,
                        s.frames);
    }
  }
  write_contact_sheet_svg(out, rows);
}

}  // namespace livesketch::eval
