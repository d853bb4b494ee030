#include "livesketch/config.hpp"

#include <cstdlib>
#include <fstream>
#include <stdexcept>

namespace livesketch {

void PipelineConfig::propagate_seed() {
  synth.seed = seed;
  vae.seed = seed;
  raster.train.seed = seed;
  raster.semantic.seed = seed + 1;
  joint.seed = seed;
  pq.seed = seed;
}

void validate(const PipelineConfig& c) {
  if (c.service.m < 1) throw std::runtime_error("config: service.m must be at least 1");
  if (c.service.k < c.service.m) throw std::runtime_error("config: service.k must be at least service.m");
  if (c.service.max_k < 1) throw std::runtime_error("config: service.max_k must be positive");
  if (c.image_size != c.raster.net.input_size) {
    throw std::runtime_error("config: image_size differs from raster.net.input_size");
  }
}

PipelineConfig load_config(const std::optional<std::filesystem::path>& path, std::optional<std::uint64_t> seed) {
  nlohmann::json j = nlohmann::json::object();
  std::optional<std::filesystem::path> file = path;
  if (!file) {
    if (const char* env = std::getenv("LIVESKETCH_CONFIG"); env && *env) file = env;
  }
  if (file) {
    std::ifstream in(*file);
    if (!in) throw std::runtime_error("cannot read config " + file->string());
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("malformed config " + file->string() + ": " + e.what());
    }
  }
  PipelineConfig c;
  try {
    c = j.get<PipelineConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("invalid config: ") + e.what());
  }
  bool seeded = j.contains("seed");
  if (const char* env = std::getenv("LIVESKETCH_SEED"); env && *env) {
    try {
      c.seed = std::stoull(env);
    } catch (const std::exception&) {
      throw std::runtime_error(std::string("LIVESKETCH_SEED is not an integer: ") + env);
    }
    seeded = true;
  }
  if (seed) {
    c.seed = *seed;
    seeded = true;
  }
  if (seeded) c.propagate_seed();
  validate(c);
  return c;
}

}  // namespace livesketch
