#include <gtest/gtest.h>

#include <algorithm>
#include <set>
#include <sstream>

#include "livesketch/eval/eval.hpp"
#include "livesketch/numerics/errors.hpp"
#include "livesketch/pipeline.hpp"
#include "support/tiny_pipeline.hpp"

namespace ls = livesketch;
namespace ev = livesketch::eval;

TEST(Metrics, AveragePrecisionHandValues) {
  EXPECT_NEAR(*ev::average_precision({true, false, true}, 2), (1.0 + 2.0 / 3.0) / 2.0, 1e-12);
  EXPECT_DOUBLE_EQ(*ev::average_precision({true, true, true}, 3), 1.0);
  // A relevant item that was never ranked still counts in the denominator.
  EXPECT_NEAR(*ev::average_precision({false, true}, 2), 0.25, 1e-12);
  EXPECT_DOUBLE_EQ(*ev::average_precision({false, false}, 1), 0.0);
  EXPECT_FALSE(ev::average_precision({false, false}, 0).has_value());
}

TEST(Metrics, PrecisionAtK) {
  const std::vector<bool> r{true, false, true, true, false};
  EXPECT_DOUBLE_EQ(ev::precision_at_k(r, 1), 1.0);
  EXPECT_DOUBLE_EQ(ev::precision_at_k(r, 2), 0.5);
  EXPECT_DOUBLE_EQ(ev::precision_at_k(r, 4), 0.75);
  EXPECT_DOUBLE_EQ(ev::precision_at_k(r, 10), 0.3);
  for (std::size_t k = 1; k <= r.size(); ++k) {
    const auto hits = std::count(r.begin(), r.begin() + std::ptrdiff_t(k), true);
    EXPECT_DOUBLE_EQ(ev::precision_at_k(r, k) * double(k), double(hits));
  }
  EXPECT_THROW(ev::precision_at_k({}, 1), ls::ContractError);
  EXPECT_THROW(ev::precision_at_k(r, 0), ls::ContractError);
  EXPECT_DOUBLE_EQ(ev::mean_ap({0.5, 1.0, 0.0}), 0.5);
  EXPECT_DOUBLE_EQ(ev::mean_ap({}), 0.0);
}

TEST(Metrics, ChanceMatchesExactPermutationAverage) {
  std::vector<bool> r{true, true, false, false, false};
  double exact = 0.0;
  std::size_t count = 0;
  std::sort(r.begin(), r.end());
  do {
    exact += *ev::average_precision(r, 2);
    ++count;
  } while (std::next_permutation(r.begin(), r.end()));
  exact /= double(count);

  ev::RankedJudgment j;
  j.ranked_ids = {1, 2, 3, 4, 5};
  j.class_relevant = {true, true, false, false, false};
  j.instance_relevant = {false, false, false, false, false};
  j.class_total = 2;
  EXPECT_NEAR(ev::empirical_chance_map({j}, ev::Level::Class, 4000, 7), exact, 0.01);
  EXPECT_EQ(ev::empirical_chance_map({j}, ev::Level::Class, 50, 7),
            ev::empirical_chance_map({j}, ev::Level::Class, 50, 7));
}

TEST(Metrics, ScoreExcludesQueriesWithoutRelevantItems) {
  ev::RankedJudgment a{1, {10, 11}, {true, false}, {true, false}, 1, 1};
  ev::RankedJudgment b{2, {10, 11}, {false, true}, {false, false}, 1, 0};
  ls::EvalConfig config;
  config.precision_ks = {1, 2};
  std::ostringstream warn;
  const auto inst = ev::score({a, b}, ev::Level::Instance, config, 1, &warn);
  EXPECT_EQ(inst.excluded, std::vector<std::uint64_t>{2});
  EXPECT_DOUBLE_EQ(inst.map, 1.0);
  EXPECT_NE(warn.str().find("excluded"), std::string::npos);
  const auto cls = ev::score({a, b}, ev::Level::Class, config, 1);
  EXPECT_DOUBLE_EQ(cls.map, 0.75);
  EXPECT_DOUBLE_EQ(cls.precision[0].precision, 0.5);
  EXPECT_DOUBLE_EQ(cls.precision[1].precision, 0.5);
  EXPECT_DOUBLE_EQ(cls.hit_at_10, 1.0);
  double mean = 0.0;
  for (const auto& q : cls.per_query) mean += q.ap;
  EXPECT_DOUBLE_EQ(cls.map, mean / double(cls.per_query.size()));
}

TEST(Judge, RelevanceComesFromLabelsAndIds) {
  const auto js = ev::judge({5, 6}, {0, 1}, {{6, 5, 7}, {7, 6, 5}}, {5, 6, 7}, {0, 1, 1});
  ASSERT_EQ(js.size(), 2u);
  EXPECT_EQ(js[0].class_relevant, (std::vector<bool>{false, true, false}));
  EXPECT_EQ(js[0].instance_relevant, (std::vector<bool>{false, true, false}));
  EXPECT_EQ(js[0].class_total, 1u);
  EXPECT_EQ(js[1].class_relevant, (std::vector<bool>{true, true, false}));
  EXPECT_EQ(js[1].class_total, 2u);
  EXPECT_EQ(js[1].instance_total, 1u);
  EXPECT_THROW(ev::judge({1}, {0, 1}, {{1}}, {1}, {0}), ls::DimensionError);
}

TEST(RankAll, MatchesSortedDistances) {
  ls::nn::Rng rng(4);
  ls::nn::Tensor q({3, 4}), g({6, 4});
  for (auto& x : q.storage()) x = rng.normal();
  for (auto& x : g.storage()) x = rng.normal();
  const std::vector<std::uint64_t> ids{60, 50, 40, 30, 20, 10};
  const auto ranks = ev::rank_all(q, g, ids);
  for (std::size_t i = 0; i < 3; ++i) {
    ASSERT_EQ(ranks[i].size(), 6u);
    std::vector<std::pair<double, std::uint64_t>> oracle;
    for (std::size_t r = 0; r < 6; ++r) {
      double d = 0.0;
      for (std::size_t c = 0; c < 4; ++c) d += (q.at(i, c) - g.at(r, c)) * (q.at(i, c) - g.at(r, c));
      oracle.emplace_back(d, ids[r]);
    }
    std::sort(oracle.begin(), oracle.end());
    for (std::size_t r = 0; r < 6; ++r) EXPECT_EQ(ranks[i][r], oracle[r].second);
  }
}

TEST(ToyCorpus, CountsDeterminismAndDisjointSplits) {
  auto c = ls::testing::tiny_config();
  const auto a = ls::build_toy_corpus(c);
  const auto b = ls::build_toy_corpus(c);
  EXPECT_EQ(a.items.size(), b.items.size());
  for (std::size_t i = 0; i < a.items.size(); ++i) EXPECT_EQ(a.items[i].sketch, b.items[i].sketch);
  for (int label = 0; label < int(a.classes.size()); ++label) {
    const auto count = [&](ls::Split s) {
      const auto l = a.labels(s);
      return std::size_t(std::count(l.begin(), l.end(), label));
    };
    EXPECT_EQ(count(ls::Split::Train), c.ingest.split.train);
    EXPECT_EQ(count(ls::Split::Test), c.ingest.split.test);
    EXPECT_EQ(count(ls::Split::Gallery), c.ingest.split.gallery);
  }
  std::set<std::size_t> gallery_sources;
  for (const auto& g : ls::build_image_gallery(a, 16, 1)) gallery_sources.insert(g.source_sketch);
  for (ls::Split s : {ls::Split::Train, ls::Split::Test}) {
    for (const auto* item : a.split(s)) EXPECT_FALSE(gallery_sources.count(item->id));
  }
  c.synth.classes = 1;
  EXPECT_THROW(ls::build_toy_corpus(c), ls::ContractError);
}

class EvalPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    config_ = new ls::PipelineConfig(ls::testing::tiny_config());
    config_->eval.chance_trials = 10;
    config_->eval.bench_pairs = 4;
    config_->eval.bench_frames = 5;
    config_->perturb.steps = 20;
    dataset_ = new ls::Dataset(ls::testing::tiny_dataset(*config_));
    models_ = new ls::SearchModels(ls::testing::tiny_models(*config_));
  }
  static void TearDownTestSuite() {
    delete models_;
    delete dataset_;
    delete config_;
  }
  static ls::PipelineConfig* config_;
  static ls::Dataset* dataset_;
  static ls::SearchModels* models_;
};
ls::PipelineConfig* EvalPipeline::config_ = nullptr;
ls::Dataset* EvalPipeline::dataset_ = nullptr;
ls::SearchModels* EvalPipeline::models_ = nullptr;

TEST_F(EvalPipeline, S2sReportIsBoundedAndDeterministic) {
  const auto a = ev::run_s2s(*dataset_, *models_, ev::Modality::VR, false, *config_);
  const auto b = ev::run_s2s(*dataset_, *models_, ev::Modality::VR, false, *config_);
  EXPECT_EQ(ev::to_json(a), ev::to_json(b));
  ASSERT_EQ(a.rows.size(), 2u);
  for (const auto& row : a.rows) {
    EXPECT_EQ(row.variant, "V-R");
    EXPECT_EQ(row.report.per_query.size(), dataset_->split(ls::Split::Test).size());
    EXPECT_GE(row.report.map, 0.0);
    EXPECT_LE(row.report.map, 1.0);
    EXPECT_GT(row.report.chance_map, 0.0);
    for (const auto& p : row.report.precision) {
      EXPECT_GE(p.precision, 0.0);
      EXPECT_LE(p.precision, 1.0);
    }
  }
  EXPECT_EQ(ev::to_json(a)["config"]["seed"], config_->seed);
  const auto all = ev::run_s2s_all(*dataset_, *models_, *config_);
  std::set<std::string> variants;
  for (const auto& r : all.rows) variants.insert(r.variant);
  EXPECT_EQ(variants, (std::set<std::string>{"V-R", "V-R-shuffle", "R-V", "R-V-shuffle"}));
  EXPECT_NE(ev::format_table(all).find("R-V-shuffle"), std::string::npos);
}

TEST_F(EvalPipeline, BranchGapMatchesPerRasterDistances) {
  const auto sketches = dataset_->sketches(ls::Split::Test);
  const auto& structure = models_->structure;
  double want = 0.0;
  for (const auto& s : sketches) {
    const auto canvas = ls::rasterize(s, structure.config().input_size);
    const auto a = structure.r_s(canvas), b = structure.r_i(canvas);
    double d = 0.0;
    for (std::size_t c = 0; c < a.cols(); ++c) d += (a.at(0, c) - b.at(0, c)) * (a.at(0, c) - b.at(0, c));
    want += std::sqrt(d) / double(sketches.size());
  }
  EXPECT_NEAR(ls::branch_gap(structure, sketches), want, 1e-9);
  EXPECT_THROW(ls::branch_gap(structure, {}), ls::ContractError);
}

TEST_F(EvalPipeline, RankingsIgnoreLabels) {
  ls::Dataset permuted = *dataset_;
  for (auto& item : permuted.items) item.label = (item.label + 1) % int(permuted.classes.size());
  for (auto m : {ev::Modality::VR, ev::Modality::RV}) {
    EXPECT_EQ(ev::s2s_rankings(*dataset_, *models_, m, false, 16, 1),
              ev::s2s_rankings(permuted, *models_, m, false, 16, 1));
  }
}

TEST_F(EvalPipeline, S2iHasExactlyTheAblationRows) {
  const auto r = ev::run_s2i(*dataset_, *models_, *config_);
  ASSERT_EQ(r.rows.size(), 3u);
  EXPECT_EQ(r.rows[0].variant, "LS");
  EXPECT_EQ(r.rows[1].variant, "LS-R");
  EXPECT_EQ(r.rows[2].variant, "LS-R-I");
  for (const auto& row : r.rows) EXPECT_EQ(row.report.level, ev::Level::Class);
  EXPECT_FALSE(r.notes.empty());
}

TEST_F(EvalPipeline, BenchEmitsEveryMethodAndLinearEndsAtTarget) {
  const auto bench = ev::run_perturbation_bench(*dataset_, *models_, *config_);
  ASSERT_EQ(bench.pairs.size(), 4u);
  for (const auto& p : bench.pairs) {
    EXPECT_NE(dataset_->item(p.query_id).label, dataset_->item(p.target_id).label);
    EXPECT_LE(p.final_loss, p.initial_loss);
    ASSERT_EQ(p.sequences.size(), 3u);
    for (const auto& s : p.sequences) {
      EXPECT_EQ(s.frames.size(), 5u);
      EXPECT_EQ(s.s_distance.size(), 5u);
    }
    const auto& linear = p.sequences[0];
    EXPECT_EQ(linear.label, "linear");
    const auto target_mu = models_->vae.encode(dataset_->item(p.target_id).sketch, false).mu;
    // Batched and single encodes differ only by rounding.
    const auto dec = models_->vae.decode(target_mu).sketch;
    ASSERT_EQ(linear.frames.back().size(), dec.size());
    for (std::size_t i = 0; i < dec.size(); ++i) {
      EXPECT_NEAR(linear.frames.back().points[i].dx, dec.points[i].dx, 1e-9);
      EXPECT_NEAR(linear.frames.back().points[i].dy, dec.points[i].dy, 1e-9);
      EXPECT_EQ(linear.frames.back().points[i].lift, dec.points[i].lift);
    }
    EXPECT_NEAR(linear.s_distance.back(), 0.0, 1e-9);
  }
  EXPECT_EQ(ev::to_json(bench), ev::to_json(ev::run_perturbation_bench(*dataset_, *models_, *config_)));

  std::ostringstream svg;
  ev::write_bench_svg(svg, bench, 2);
  const std::string s = svg.str();
  EXPECT_EQ(s.rfind("<svg", 0), 0u);
  EXPECT_NE(s.find("</svg>"), std::string::npos);
  std::size_t cells = 0;
  for (std::size_t at = s.find("stroke=\"#ccc\""); at != std::string::npos; at = s.find("stroke=\"#ccc\"", at + 1)) {
    ++cells;
  }
  EXPECT_EQ(cells, 2u * 3u * 5u);
}

TEST_F(EvalPipeline, BaselineVaeAddsTwoSequencesPerPair) {
  const ls::Vae baseline = ls::train_baseline_vae_stage(*dataset_, *config_);
  // With classification weight 0 the classifier head never moves from its
  // initial values.
  ls::nn::Rng rng(config_->vae.seed);
  ls::VaeConfig vc = config_->vae;
  vc.classes = dataset_->classes.size();
  const ls::Vae fresh(vc, rng);
  EXPECT_EQ(baseline.store().find("vae.classifier.weight")->value.storage(),
            fresh.store().find("vae.classifier.weight")->value.storage());
  EXPECT_NE(baseline.store().find("vae.mu.weight")->value.storage(), fresh.store().find("vae.mu.weight")->value.storage());

  const auto bench = ev::run_perturbation_bench(*dataset_, *models_, *config_, &baseline);
  for (const auto& p : bench.pairs) {
    ASSERT_EQ(p.sequences.size(), 5u);
    EXPECT_EQ(p.sequences[3].label, "sketchrnn-linear");
    EXPECT_EQ(p.sequences[4].label, "sketchrnn-slerp");
    const auto& base = p.sequences[3];
    EXPECT_EQ(base.frames.size(), 5u);
    const auto dec = baseline.decode(baseline.encode(dataset_->item(p.target_id).sketch, false).mu).sketch;
    ASSERT_EQ(base.frames.back().size(), dec.size());
    for (std::size_t i = 0; i < dec.size(); ++i) EXPECT_NEAR(base.frames.back().points[i].dx, dec.points[i].dx, 1e-9);
  }
  std::ostringstream svg;
  ev::write_bench_svg(svg, bench, 2);
  const std::string s = svg.str();
  std::size_t cells = 0;
  for (std::size_t at = s.find("stroke=\"#ccc\""); at != std::string::npos; at = s.find("stroke=\"#ccc\"", at + 1)) {
    ++cells;
  }
  EXPECT_EQ(cells, 2u * 5u * 5u);
}
