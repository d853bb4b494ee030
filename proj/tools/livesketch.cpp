// Command-line front end: corpus preparation, training, indexing, serving
// and evaluation. Run `livesketch --help` for the subcommands.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

#include "livesketch/eval/eval.hpp"
#include "livesketch/numerics/errors.hpp"
#include "livesketch/pipeline.hpp"
#include "livesketch/service/service.hpp"

namespace ls = livesketch;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> config;

  ls::PipelineConfig load() const {
    return ls::load_config(config ? std::optional<fs::path>(*config) : std::nullopt, seed);
  }
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  for (std::string item; std::getline(in, item, ',');) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

void save_store(const ls::nn::ParameterStore& store, const fs::path& path) {
  fs::create_directories(path.parent_path());
  ls::nn::Checkpoint::from(store).save(path);
  std::cerr << "wrote " << path.string() << "\n";
}

ls::Vae load_vae(const fs::path& models, const ls::PipelineConfig& c) {
  return ls::Vae::from_checkpoint(ls::nn::Checkpoint::load(models / ls::model_files::kVae), c.vae.max_steps);
}

ls::StructureEncoder load_structure(const fs::path& models, const ls::PipelineConfig& c) {
  return ls::StructureEncoder::from_checkpoint(ls::nn::Checkpoint::load(models / ls::model_files::kStructure),
                                               c.raster.net);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"livesketch: sketch-based search with query suggestions"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "Seed for every stochastic stage (overrides config and LIVESKETCH_SEED)");
  app.add_option("--config", g.config, "JSON config file (default: $LIVESKETCH_CONFIG)");

  // synth
  auto* synth = app.add_subcommand("synth", "Write synthetic parametric sketches as QuickDraw ndjson");
  std::string synth_out;
  std::optional<std::size_t> synth_classes, synth_per_class;
  synth->add_option("--out", synth_out, "Output .ndjson")->required();
  synth->add_option("--classes", synth_classes, "Number of shape classes");
  synth->add_option("--per-class", synth_per_class, "Sketches per class");

  // ingest
  auto* ingest = app.add_subcommand("ingest", "Parse, simplify, normalize and split an ndjson corpus");
  std::string ingest_input, ingest_out, ingest_classes;
  std::optional<std::size_t> per_class;
  ingest->add_option("--input", ingest_input, "QuickDraw or internal ndjson")->required()->check(CLI::ExistingFile);
  ingest->add_option("--classes", ingest_classes, "Comma-separated classes to keep (default: all)");
  ingest->add_option("--per-class", per_class,
                     "Records per class, split train:test:gallery as configured (default 500:100:200)");
  ingest->add_option("--out", ingest_out, "Output dataset .json")->required();

  // training
  std::string dataset_path, models_dir = "models";
  auto* train_vae = app.add_subcommand("train-vae", "Train the sketch VAE");
  auto* train_raster = app.add_subcommand("train-raster", "Train the structure and semantic raster encoders");
  auto* train_joint = app.add_subcommand("train-joint", "Train the joint embedding on frozen VAE/raster features");
  for (auto* sub : {train_vae, train_raster, train_joint}) {
    sub->add_option("--dataset", dataset_path, "Dataset .json")->required()->check(CLI::ExistingFile);
    sub->add_option("--models", models_dir, "Model directory")->capture_default_str();
  }
  bool with_baseline = false;
  train_vae->add_flag("--baseline", with_baseline,
                      "Also train a plain sequence VAE (no classifier loss, no variance clamp) for the interpolation "
                      "benchmark");

  // index
  auto* index = app.add_subcommand("index", "Encode the gallery and sketch corpus into an index directory");
  std::string index_dir = "index";
  index->add_option("--dataset", dataset_path, "Dataset .json")->required()->check(CLI::ExistingFile);
  index->add_option("--models", models_dir, "Model directory")->capture_default_str();
  index->add_option("--out", index_dir, "Index directory")->capture_default_str();

  // serve
  auto* serve = app.add_subcommand("serve", "Serve the HTTP API");
  std::optional<std::string> host;
  std::optional<int> port;
  serve->add_option("--models", models_dir, "Model directory")->capture_default_str();
  serve->add_option("--index", index_dir, "Index directory")->capture_default_str();
  serve->add_option("--host", host, "Bind address");
  serve->add_option("--port", port, "Port; 0 picks a free one");

  // eval
  auto* eval = app.add_subcommand("eval", "Run an experiment: s2s, s2i, perturbation or all");
  std::string experiment, report_dir = "reports";
  eval->add_option("experiment", experiment, "Experiment name")
      ->required()
      ->check(CLI::IsMember({"s2s", "s2i", "perturbation", "all"}));
  eval->add_option("--dataset", dataset_path, "Dataset .json")->required()->check(CLI::ExistingFile);
  eval->add_option("--models", models_dir, "Model directory")->capture_default_str();
  eval->add_option("--out", report_dir, "Report directory")->capture_default_str();

  // perturb-demo
  auto* demo = app.add_subcommand("perturb-demo", "Perturb one test sketch toward another and write a contact sheet");
  std::size_t query_id = 0, target_id = 0;
  double weight = 1.0;
  std::string demo_out = "perturb-demo.svg";
  demo->add_option("--dataset", dataset_path, "Dataset .json")->required()->check(CLI::ExistingFile);
  demo->add_option("--models", models_dir, "Model directory")->capture_default_str();
  demo->add_option("--query", query_id, "Query sketch id")->required();
  demo->add_option("--target", target_id, "Target sketch id")->required();
  demo->add_option("--weight", weight, "Target weight in [0, 1]")->capture_default_str();
  demo->add_option("--out", demo_out, "SVG contact sheet")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    ls::PipelineConfig c = g.load();

    if (*synth) {
      if (synth_classes) c.synth.classes = *synth_classes;
      if (synth_per_class) c.synth.per_class = *synth_per_class;
      std::ofstream out(synth_out, std::ios::trunc);
      ls::write_quickdraw_ndjson(out, ls::synthesize_sketches(c.synth));
      if (!out) throw std::runtime_error("cannot write " + synth_out);
      std::cerr << "wrote " << c.synth.classes * c.synth.per_class << " sketches to " << synth_out << "\n";
    } else if (*ingest) {
      if (!ingest_classes.empty()) c.ingest.classes = split_list(ingest_classes);
      if (per_class) {
        const auto& s = c.ingest.split;
        const double t = double(s.total());
        ls::SplitCounts n;
        n.test = std::size_t(double(*per_class) * double(s.test) / t);
        n.gallery = std::size_t(double(*per_class) * double(s.gallery) / t);
        n.train = *per_class - n.test - n.gallery;
        c.ingest.split = n;
      }
      std::ifstream in(ingest_input);
      ls::IngestReport report;
      const auto dataset = ls::ingest(ls::parse_ndjson(in), c.ingest, &report);
      dataset.save(ingest_out);
      std::cerr << "records " << report.records << ", errors " << report.errors << ", warnings " << report.warnings
                << ", kept " << report.kept << " in " << dataset.classes.size() << " classes -> " << ingest_out << "\n";
    } else if (*train_vae) {
      const auto dataset = ls::Dataset::load(dataset_path);
      const auto vae = ls::train_vae_stage(dataset, c, &std::cerr);
      std::cerr << "test classification accuracy "
                << ls::classification_accuracy(vae, dataset.sketches(ls::Split::Test), dataset.labels(ls::Split::Test))
                << "\n";
      save_store(vae.store(), fs::path(models_dir) / ls::model_files::kVae);
      if (with_baseline) {
        const auto baseline = ls::train_baseline_vae_stage(dataset, c, &std::cerr);
        save_store(baseline.store(), fs::path(models_dir) / ls::model_files::kVaeBaseline);
      }
    } else if (*train_raster) {
      const auto dataset = ls::Dataset::load(dataset_path);
      const auto structure = ls::train_structure_stage(dataset, c, &std::cerr);
      save_store(structure.store(), fs::path(models_dir) / ls::model_files::kStructure);
      const auto semantic = ls::train_semantic_stage(dataset, c, &std::cerr);
      save_store(semantic.store(), fs::path(models_dir) / ls::model_files::kSemantic);
    } else if (*train_joint) {
      const auto dataset = ls::Dataset::load(dataset_path);
      const auto vae = load_vae(models_dir, c);
      const auto structure = load_structure(models_dir, c);
      const auto joint = ls::train_joint_stage(dataset, vae, structure, c, &std::cerr);
      save_store(joint.store(), fs::path(models_dir) / ls::model_files::kJoint);
    } else if (*index) {
      const auto dataset = ls::Dataset::load(dataset_path);
      const auto models = ls::load_models(models_dir, c);
      const auto s = ls::index_corpus(dataset, fs::absolute(dataset_path), models, c, index_dir);
      std::cerr << "indexed " << s.images << " images and " << s.sketches << " sketches (S dim " << s.s_dim
                << ", Z dim " << s.z_dim << ") into " << index_dir << "\n";
    } else if (*serve) {
      if (!fs::exists(fs::path(index_dir) / "manifest.json")) {
        std::cerr << "error: no index at '" << index_dir << "'; run `livesketch index` first\n";
        return 1;
      }
      if (host) c.service.host = *host;
      if (port) c.service.port = *port;
      auto engine = std::make_shared<const ls::SearchEngine>(ls::SearchEngine::open(models_dir, index_dir, c));
      ls::SearchService service(engine);
      ls::serve_http(service, c.service);
    } else if (*eval) {
      const auto dataset = ls::Dataset::load(dataset_path);
      const auto models = ls::load_models(models_dir, c);
      const fs::path out(report_dir);
      const auto emit = [&](const std::string& name, const ls::eval::ExperimentReport& r) {
        write_text(out / (name + ".json"), ls::eval::to_json(r).dump(2) + "\n");
        std::cout << ls::eval::format_table(r) << "\n";
      };
      if (experiment == "s2s" || experiment == "all") emit("s2s", ls::eval::run_s2s_all(dataset, models, c, &std::cerr));
      if (experiment == "s2i" || experiment == "all") emit("s2i", ls::eval::run_s2i(dataset, models, c, &std::cerr));
      if (experiment == "perturbation" || experiment == "all") {
        const auto baseline = ls::load_baseline_vae(models_dir, c);
        const auto bench = ls::eval::run_perturbation_bench(dataset, models, c, baseline ? &*baseline : nullptr);
        write_text(out / "perturbation.json", ls::eval::to_json(bench).dump(2) + "\n");
        std::ostringstream svg;
        ls::eval::write_bench_svg(svg, bench);
        write_text(out / "perturbation.svg", svg.str());
        std::cout << "perturbation (seed " << bench.seed << ", " << bench.pairs.size() << " pairs)\n"
                  << "  backprop lowers L_AP:            " << bench.loss_decreased << "\n"
                  << "  backprop moves closer in S:      " << bench.distance_improved << "\n"
                  << "  backprop sequence ends closer:   " << bench.sequence_improved << "\n";
      }
    } else if (*demo) {
      const auto dataset = ls::Dataset::load(dataset_path);
      const auto models = ls::load_models(models_dir, c);
      const auto& q = dataset.item(query_id).sketch;
      const auto& t = dataset.item(target_id).sketch;
      ls::PerturbationRequest request;
      request.query_v = models.vae.encode(q, false).mu.storage();
      request.targets = {{models.vae.encode(t, false).mu.storage(), models.s_q(t).storage()}};
      request.weights = {ls::clamp_weight(weight)};
      request.config = c.perturb;
      std::vector<std::pair<std::string, std::vector<ls::Sketch>>> rows;
      json results = json::array();
      for (auto method : {ls::PerturbMethod::Linear, ls::PerturbMethod::Slerp, ls::PerturbMethod::Backprop}) {
        request.method = method;
        results.push_back(ls::to_json(ls::perturb(models.vae, models.joint, request)));
        std::vector<ls::Sketch> frames;
        for (auto& f : ls::interpolation_sequence(models.vae, models.joint, request, c.eval.bench_frames)) {
          frames.push_back(std::move(f.sketch));
        }
        rows.emplace_back(std::string(ls::method_name(method)), std::move(frames));
      }
      std::ostringstream svg;
      ls::eval::write_contact_sheet_svg(svg, rows);
      write_text(demo_out, svg.str());
      std::cout << results.dump(2) << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
