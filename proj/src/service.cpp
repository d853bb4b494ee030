#include "livesketch/service/service.hpp"

#include <httplib.h>

#include <condition_variable>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "livesketch/numerics/errors.hpp"

namespace livesketch {

namespace fs = std::filesystem;
using nlohmann::json;
using nn::Tensor;

namespace {

std::vector<double> flat(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

Sketch sketch_from_body(const json& body) {
  if (!body.is_object() || !body.contains("points")) throw ServiceError(400, "body must contain 'points'");
  Sketch s;
  try {
    s.points = points_from_json(body["points"]);
  } catch (const std::exception& e) {
    throw ServiceError(400, std::string("invalid points: ") + e.what());
  }
  if (!is_valid(s)) throw ServiceError(400, "invalid sketch: needs at least one point, finite offsets and a final lift");
  return s;
}

std::size_t positive_field(const json& body, const char* key, std::size_t fallback) {
  if (!body.contains(key) || body[key].is_null()) return fallback;
  if (!body[key].is_number_integer() || body[key].get<long long>() < 1) {
    throw ServiceError(400, std::string("'") + key + "' must be a positive integer");
  }
  return body[key].get<std::size_t>();
}

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::string thumb_url(std::uint64_t id) { return "/api/thumb/" + std::to_string(id) + ".png"; }

SearchEngine::SearchEngine(SearchModels models, CorpusIndex index, std::map<std::uint64_t, Sketch> h_sketches,
                           PipelineConfig config)
    : models_(std::move(models)), index_(std::move(index)), h_(std::move(h_sketches)), config_(std::move(config)) {
  if (index_.images.dim() != models_.joint.out_dim()) throw DimensionError("index dimension differs from the models");
  if (index_.z.cols() != models_.semantic.store().at("semantic.features.bias").value.cols()) {
    throw DimensionError("Z store dimension differs from the semantic encoder");
  }
  for (std::uint64_t id : index_.sketches.ids()) {
    if (!h_.count(id)) throw std::runtime_error("sketch " + std::to_string(id) + " of H is missing from the dataset");
  }
}

SearchEngine SearchEngine::open(const fs::path& models_dir, const fs::path& index_dir, const PipelineConfig& config) {
  CorpusIndex index = CorpusIndex::load(index_dir);
  fs::path dataset_path = index.manifest.at("dataset").get<std::string>();
  if (dataset_path.is_relative() && !fs::exists(dataset_path)) dataset_path = index_dir / dataset_path;
  const Dataset dataset = Dataset::load(dataset_path);
  std::map<std::uint64_t, Sketch> h;
  for (const auto* item : dataset.split(Split::Train)) h[item->id] = item->sketch;
  return SearchEngine(load_models(models_dir, config), std::move(index), std::move(h), config);
}

SearchOutcome SearchEngine::search(const Sketch& query, std::size_t k, std::size_t m) const {
  validate(query);
  SearchOutcome out;
  const LatentCode code = models_.vae.encode(query, false);
  out.query_v = flat(code.mu);
  out.query_s = flat(models_.joint.f_v(code.mu));
  out.results = index_.images.knn(out.query_s, k);
  if (out.results.empty()) return out;

  const std::size_t n = out.results.size(), dz = index_.z.cols(), ds = index_.images.dim();
  Tensor z({n, dz}), member_s({n, ds});
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t zr = index_.z_row(out.results[i].id);
    for (std::size_t j = 0; j < dz; ++j) z.at(i, j) = index_.z.at(zr, j);
    const auto s = index_.images.raw_vector(index_.image_row(out.results[i].id));
    for (std::size_t j = 0; j < ds; ++j) member_s.at(i, j) = s[j];
  }
  IntentConfig ic = config_.intent;
  ic.m = m;
  const Selection sel = cluster_rows(z, ic);
  for (const auto& rows : sel.clusters) {
    IntentCluster c;
    Tensor ms({rows.size(), ds});
    for (std::size_t r = 0; r < rows.size(); ++r) {
      c.members.push_back(out.results[rows[r]].id);
      for (std::size_t j = 0; j < ds; ++j) ms.at(r, j) = member_s.at(rows[r], j);
    }
    c.representative = representative_image(c.members, ms, out.query_s);
    const auto rep_s = index_.images.raw_vector(index_.image_row(c.representative));
    c.target_id = nearest_sketch_target(index_.sketches, rep_s);
    c.target_sketch = h_.at(c.target_id);
    const auto target_s = index_.sketches.raw_vector(index_.sketch_row(c.target_id));
    c.target_s = Tensor({1, target_s.size()}, target_s);
    c.target_v = models_.vae.encode(c.target_sketch, false).mu;
    out.clusters.push_back(std::move(c));
  }
  return out;
}

SuggestionOutcome SearchEngine::suggest(const Sketch& query, const std::vector<IntentCluster>& clusters,
                                        const std::vector<double>& weights, PerturbMethod method,
                                        std::size_t frames) const {
  PerturbationRequest req;
  req.query_v = flat(models_.vae.encode(query, false).mu);
  for (const auto& c : clusters) req.targets.push_back({flat(c.target_v), flat(c.target_s)});
  for (double w : weights) req.weights.push_back(clamp_weight(w));
  req.method = method;
  req.config = config_.perturb;
  SuggestionOutcome out;
  out.result = perturb(models_.vae, models_.joint, req);
  for (const auto& c : clusters) out.target_ids.push_back(c.target_id);
  if (frames >= 2) out.sequence = interpolation_sequence(models_.vae, models_.joint, req, frames);
  return out;
}

std::optional<std::string> SearchEngine::thumbnail(std::uint64_t id) const {
  const fs::path p = index_.thumbs / (std::to_string(id) + ".png");
  std::ifstream in(p, std::ios::binary);
  if (!in) return std::nullopt;
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

SessionManager::SessionManager(std::chrono::milliseconds idle_limit, std::uint64_t seed, Clock clock)
    : idle_limit_(idle_limit), seed_(seed), clock_(clock ? std::move(clock) : Clock([] {
                                                 return std::chrono::steady_clock::now();
                                               })) {}

std::string SessionManager::next_id() {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(mix(seed_ ^ mix(++counter_))));
  return buf;
}

std::string SessionManager::create() {
  std::lock_guard lock(mutex_);
  std::string id = next_id();
  while (sessions_.count(id)) id = next_id();
  auto e = std::make_shared<Entry>();
  e->last_used = clock_();
  sessions_[id] = e;
  return id;
}

void SessionManager::with_session(const std::string& id, bool create_missing,
                                  const std::function<void(SessionState&)>& fn) {
  std::shared_ptr<Entry> e;
  {
    std::lock_guard lock(mutex_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) {
      if (!create_missing) throw ServiceError(404, "unknown session " + id);
      if (id.empty() || id.size() > 64) throw ServiceError(400, "invalid session id");
      it = sessions_.emplace(id, std::make_shared<Entry>()).first;
    }
    e = it->second;
    e->last_used = clock_();
  }
  std::lock_guard session_lock(e->mutex);
  fn(e->state);
}

std::size_t SessionManager::expire_idle() {
  std::lock_guard lock(mutex_);
  const auto now = clock_();
  return std::erase_if(sessions_, [&](const auto& kv) { return now - kv.second->last_used > idle_limit_; });
}

std::size_t SessionManager::size() const {
  std::lock_guard lock(mutex_);
  return sessions_.size();
}

SearchService::SearchService(std::shared_ptr<const SearchEngine> engine)
    : engine_(std::move(engine)),
      sessions_(std::chrono::milliseconds(std::int64_t(engine_->config().service.session_idle_minutes * 60000.0)),
                engine_->config().seed) {}

json SearchService::create_session() {
  sessions_.expire_idle();
  return {{"session_id", sessions_.create()}};
}

json SearchService::search(const std::string& session_id, const json& body) {
  sessions_.expire_idle();
  const auto& sc = engine_->config().service;
  Sketch q = sketch_from_body(body);
  const std::size_t k = std::min(positive_field(body, "k", sc.k), sc.max_k);
  const std::size_t m = positive_field(body, "m", sc.m);
  if (m > k) throw ServiceError(400, "m must not exceed k");
  json out;
  sessions_.with_session(session_id, true, [&](SessionState& s) {
    SearchOutcome r = engine_->search(q, k, m);
    s.query = q;
    ++s.iteration;
    s.results = r.results;
    s.clusters = r.clusters;
    json results = json::array();
    for (const auto& n : r.results) {
      results.push_back({{"id", n.id}, {"distance", std::sqrt(n.distance)}, {"thumb_url", thumb_url(n.id)}});
    }
    json clusters = json::array();
    for (std::size_t i = 0; i < r.clusters.size(); ++i) {
      const auto& c = r.clusters[i];
      json thumbs = json::array();
      for (auto id : c.members) thumbs.push_back(thumb_url(id));
      clusters.push_back({{"index", i},
                          {"members", c.members},
                          {"member_thumb_urls", thumbs},
                          {"representative", c.representative},
                          {"representative_thumb_url", thumb_url(c.representative)},
                          {"target_id", c.target_id},
                          {"target_points", points_to_json(c.target_sketch.points)},
                          {"target_thumb_url", thumb_url(c.target_id)}});
    }
    out = {{"session_id", session_id}, {"iteration", s.iteration}, {"k", k},         {"m", m},
           {"query", points_to_json(q.points)}, {"results", results}, {"clusters", clusters}};
  });
  return out;
}

json SearchService::perturb(const std::string& session_id, const json& body) {
  sessions_.expire_idle();
  if (!body.is_object() || !body.contains("weights") || !body["weights"].is_array()) {
    throw ServiceError(400, "body must contain a 'weights' array");
  }
  std::vector<double> weights;
  for (const auto& w : body["weights"]) {
    if (!w.is_number()) throw ServiceError(400, "weights must be numbers");
    weights.push_back(w.get<double>());
  }
  PerturbMethod method = PerturbMethod::Backprop;
  if (body.contains("method")) {
    try {
      method = parse_method(body["method"].get<std::string>());
    } catch (const std::exception& e) {
      throw ServiceError(400, e.what());
    }
  }
  json out;
  sessions_.with_session(session_id, false, [&](SessionState& s) {
    if (!s.query || s.iteration == 0) throw ServiceError(409, "perturb needs a prior search in this session");
    if (weights.size() != s.clusters.size()) {
      throw ServiceError(400, std::to_string(weights.size()) + " weights for " + std::to_string(s.clusters.size()) +
                                  " clusters");
    }
    const auto r = engine_->suggest(*s.query, s.clusters, weights, method, engine_->config().service.sequence_frames);
    s.suggestion = r.result.suggestion;
    ++s.iteration;
    out = to_json(r.result);
    out["session_id"] = session_id;
    out["iteration"] = s.iteration;
    out["target_ids"] = r.target_ids;
    json seq = json::array();
    for (const auto& f : r.sequence) seq.push_back({{"points", points_to_json(f.sketch.points)}});
    out["sequence"] = seq;
  });
  return out;
}

json SearchService::accept(const std::string& session_id) {
  json out;
  sessions_.with_session(session_id, false, [&](SessionState& s) {
    if (!s.suggestion) throw ServiceError(409, "no suggestion to accept");
    s.query = *s.suggestion;
    s.suggestion.reset();
    out = {{"session_id", session_id}, {"iteration", s.iteration}, {"query", points_to_json(s.query->points)}};
  });
  return out;
}

json SearchService::replace_query(const std::string& session_id, const json& body) {
  Sketch q = sketch_from_body(body);
  json out;
  sessions_.with_session(session_id, false, [&](SessionState& s) {
    s.query = q;
    out = {{"session_id", session_id}, {"iteration", s.iteration}, {"query", points_to_json(q.points)}};
  });
  return out;
}

json SearchService::health() const {
  const auto& idx = engine_->index();
  return {{"status", "ok"},
          {"images", idx.images.size()},
          {"sketches", idx.sketches.size()},
          {"sessions", sessions_.size()},
          {"scale", idx.manifest.value("scale", 1.0)}};
}

namespace {

void reply(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

template <class F>
void guarded(httplib::Response& res, F&& f) {
  try {
    reply(res, 200, f());
  } catch (const ServiceError& e) {
    reply(res, e.status(), {{"error", e.what()}});
  } catch (const json::exception& e) {
    reply(res, 400, {{"error", std::string("bad request: ") + e.what()}});
  } catch (const ContractError& e) {
    reply(res, 400, {{"error", e.what()}});
  } catch (const std::invalid_argument& e) {
    reply(res, 400, {{"error", e.what()}});
  } catch (const std::exception& e) {
    reply(res, 500, {{"error", e.what()}});
  }
}

json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return json::object();
  try {
    return json::parse(req.body);
  } catch (const json::exception& e) {
    throw ServiceError(400, std::string("body is not JSON: ") + e.what());
  }
}

}  // namespace

void install_routes(httplib::Server& server, SearchService& service) {
  server.Post("/api/session", [&](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] { return service.create_session(); });
  });
  server.Post(R"(/api/session/([^/]+)/search)", [&](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { return service.search(req.matches[1], parse_body(req)); });
  });
  server.Post(R"(/api/session/([^/]+)/perturb)", [&](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { return service.perturb(req.matches[1], parse_body(req)); });
  });
  server.Post(R"(/api/session/([^/]+)/accept)", [&](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { return service.accept(req.matches[1]); });
  });
  server.Post(R"(/api/session/([^/]+)/query)", [&](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { return service.replace_query(req.matches[1], parse_body(req)); });
  });
  server.Get(R"(/api/thumb/(\d+)\.png)", [&](const httplib::Request& req, httplib::Response& res) {
    std::optional<std::string> png;
    try {
      png = service.thumbnail(std::stoull(req.matches[1]));
    } catch (const std::out_of_range&) {
    }
    if (!png) {
      reply(res, 404, {{"error", "no thumbnail for " + std::string(req.matches[1])}});
      return;
    }
    res.set_content(*png, "image/png");
  });
  server.Get("/api/health", [&](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] { return service.health(); });
  });
}

void serve_http(SearchService& service, const ServiceConfig& config) {
  httplib::Server server;
  const std::size_t threads = std::max<std::size_t>(1, config.threads);
  server.new_task_queue = [threads] { return new httplib::ThreadPool(threads); };
  install_routes(server, service);
  const int port = config.port == 0 ? server.bind_to_any_port(config.host) : config.port;
  if (config.port != 0 && !server.bind_to_port(config.host, config.port)) {
    throw std::runtime_error("cannot listen on " + config.host + ":" + std::to_string(config.port));
  }
  if (port < 0) throw std::runtime_error("cannot bind an ephemeral port on " + config.host);
  std::cout << "livesketch: serving on http://" << config.host << ":" << port << std::endl;

  std::mutex m;
  std::condition_variable cv;
  bool done = false;
  std::thread reaper([&] {
    std::unique_lock lock(m);
    while (!cv.wait_for(lock, std::chrono::seconds(30), [&] { return done; })) service.sessions().expire_idle();
  });
  const bool ok = server.listen_after_bind();
  {
    std::lock_guard lock(m);
    done = true;
  }
  cv.notify_all();
  reaper.join();
  if (!ok) throw std::runtime_error("server on port " + std::to_string(port) + " stopped with an error");
}

}  // namespace livesketch
