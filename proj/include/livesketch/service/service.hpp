#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "livesketch/config.hpp"
#include "livesketch/intent/intent.hpp"
#include "livesketch/perturb/perturbation.hpp"
#include "livesketch/service/artifacts.hpp"

namespace httplib {
class Server;
}

namespace livesketch {

/// Error carrying the HTTP status it maps to.
class ServiceError : public std::runtime_error {
 public:
  ServiceError(int status, const std::string& what) : std::runtime_error(what), status_(status) {}
  int status() const { return status_; }

 private:
  int status_;
};

struct SearchOutcome {
  std::vector<double> query_v;
  std::vector<double> query_s;
  ResultList results;
  std::vector<IntentCluster> clusters;
};

struct SuggestionOutcome {
  PerturbationResult result;
  std::vector<std::uint64_t> target_ids;
  std::vector<SequenceFrame> sequence;
};

/// Read-only search machinery shared by all sessions: models, indices and
/// the sketch corpus H. Every method is const and safe to call concurrently.
class SearchEngine {
 public:
  SearchEngine(SearchModels models, CorpusIndex index, std::map<std::uint64_t, Sketch> h_sketches,
               PipelineConfig config);
  /// Loads the index, its dataset (for H) and the models.
  static SearchEngine open(const std::filesystem::path& models_dir, const std::filesystem::path& index_dir,
                           const PipelineConfig& config);

  const PipelineConfig& config() const { return config_; }
  const CorpusIndex& index() const { return index_; }
  const SearchModels& models() const { return models_; }

  /// s_q(Q) -> knn(k) -> intent clusters over Z -> representatives ->
  /// targets in H. Depends only on (Q, k, m).
  SearchOutcome search(const Sketch& query, std::size_t k, std::size_t m) const;

  /// Perturbs `query` toward the cluster targets and decodes the suggestion
  /// plus an interpolation sequence of `frames` frames.
  SuggestionOutcome suggest(const Sketch& query, const std::vector<IntentCluster>& clusters,
                            const std::vector<double>& weights, PerturbMethod method, std::size_t frames) const;

  /// PNG bytes of a gallery image or H sketch; nullopt when unknown.
  std::optional<std::string> thumbnail(std::uint64_t id) const;

 private:
  SearchModels models_;
  CorpusIndex index_;
  std::map<std::uint64_t, Sketch> h_;
  PipelineConfig config_;
};

struct SessionState {
  std::optional<Sketch> query;
  std::size_t iteration = 0;
  ResultList results;
  std::vector<IntentCluster> clusters;
  std::optional<Sketch> suggestion;
};

/// In-memory sessions with idle expiry. Requests on one session are
/// serialized by its mutex; different sessions proceed in parallel.
class SessionManager {
 public:
  using Clock = std::function<std::chrono::steady_clock::time_point()>;

  explicit SessionManager(std::chrono::milliseconds idle_limit, std::uint64_t seed = 1, Clock clock = nullptr);

  std::string create();
  /// Runs `fn` under the session's lock. Unknown ids are created when
  /// `create_missing` is set, otherwise they raise ServiceError(404).
  void with_session(const std::string& id, bool create_missing, const std::function<void(SessionState&)>& fn);
  /// Drops sessions idle longer than the limit; returns how many.
  std::size_t expire_idle();
  std::size_t size() const;

 private:
  struct Entry {
    std::mutex mutex;
    SessionState state;
    std::chrono::steady_clock::time_point last_used;
  };
  std::string next_id();

  std::chrono::milliseconds idle_limit_;
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
  Clock clock_;
  mutable std::mutex mutex_;
  std::map<std::string, std::shared_ptr<Entry>> sessions_;
};

/// JSON request handlers of the HTTP API, independent of the transport.
class SearchService {
 public:
  explicit SearchService(std::shared_ptr<const SearchEngine> engine);

  nlohmann::json create_session();
  /// Body {points, k?, m?}.
  nlohmann::json search(const std::string& session_id, const nlohmann::json& body);
  /// Body {weights: [...], method?}.
  nlohmann::json perturb(const std::string& session_id, const nlohmann::json& body);
  nlohmann::json accept(const std::string& session_id);
  /// Body {points}.
  nlohmann::json replace_query(const std::string& session_id, const nlohmann::json& body);
  nlohmann::json health() const;
  std::optional<std::string> thumbnail(std::uint64_t id) const { return engine_->thumbnail(id); }

  SessionManager& sessions() { return sessions_; }

 private:
  std::shared_ptr<const SearchEngine> engine_;
  SessionManager sessions_;
};

std::string thumb_url(std::uint64_t id);

/// Registers every route of the API on `server`.
void install_routes(httplib::Server& server, SearchService& service);

/// Blocks serving HTTP until the process ends. Port 0 binds an ephemeral
/// port; the bound address is printed to stdout as
/// "livesketch: serving on http://host:port". Idle sessions are dropped
/// every 30 seconds.
void serve_http(SearchService& service, const ServiceConfig& config);

}  // namespace livesketch
