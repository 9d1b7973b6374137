#pragma once

// Batch service: synchronous text path and image matching, background image
// jobs redeemed through poll tokens, a content-addressed result cache, the
// prefetch cursor, filter storage and the preference-elicitation endpoints.

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <queue>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "modpipe/cascade.hpp"
#include "modpipe/core.hpp"
#include "modpipe/feed.hpp"
#include "modpipe/judge.hpp"
#include "modpipe/palette.hpp"

namespace modpipe {

// ---------------------------------------------------------------------------
// Cache

/// h(content) ^ h(filter_params) ^ h(sensitivity) with h = FNV-1a-64; the
/// sensitivity is hashed as its decimal text.
std::uint64_t cache_key(std::string_view content_canonical, std::string_view filter_params_canonical,
                        int sensitivity);

/// Key for one modality of a post against the filters covering it. Several
/// filters are folded into one canonical parameter list and the highest
/// sensitivity.
std::uint64_t cache_key(const ContentItem& content, std::span<const Filter> filters, Modality modality);

enum class CacheOutcome { NoMatch, Text, Image };

struct CacheEntry {
  CacheOutcome outcome = CacheOutcome::NoMatch;
  std::optional<TransformResult> result;
  std::int64_t created_at = 0;
  std::string fingerprint;  // judge/rubric configuration the result came from
};

json to_json(const CacheEntry& e);
CacheEntry cache_entry_from_json(const json& j);

/// Thread-safe in-memory cache. Entries carry no user identifier.
class ResultCache {
 public:
  std::optional<CacheEntry> get(std::uint64_t key, std::string_view fingerprint);
  void put(std::uint64_t key, CacheEntry entry);
  std::size_t size() const;
  std::uint64_t hits() const { return hits_; }
  std::uint64_t misses() const { return misses_; }

  json snapshot() const;
  void restore(const json& j);
  void save(const std::string& path) const;
  void load(const std::string& path);

 private:
  mutable std::mutex mu_;
  std::map<std::uint64_t, CacheEntry> entries_;
  std::atomic<std::uint64_t> hits_{0};
  std::atomic<std::uint64_t> misses_{0};
};

// ---------------------------------------------------------------------------
// Polling guidance and prefetch

struct BackoffConfig {
  double t0_ms = 4000.0;
  double decay = 0.5;
  double t_min_ms = 500.0;
  double jitter_max_ms = 0.0;
};

void validate(const BackoffConfig& c);
json to_json(const BackoffConfig& c);
BackoffConfig backoff_from_json(const json& j);

/// max(t_min, t0 * decay^attempt).
double backoff_base(int attempt, const BackoffConfig& cfg);
/// backoff_base plus uniform jitter in [0, jitter_max).
double backoff_schedule(int attempt, const BackoffConfig& cfg, std::mt19937_64& rng);

/// Next-page cursor once viewed_fraction >= threshold, else `current`.
std::string prefetch_cursor(const std::string& current, double viewed_fraction, double threshold = 0.4);

// ---------------------------------------------------------------------------
// Tokens

using Clock = std::function<double()>;  // seconds, monotonic

Clock steady_clock_seconds();

enum class PollStatus { Pending, Ready, Failed, Expired };

std::string_view to_string(PollStatus s);

struct PollResult {
  PollStatus status = PollStatus::Expired;
  std::shared_ptr<const TransformResult> result;
  std::string reason;
};

/// Unguessable 128-bit tokens with a TTL. Unknown tokens read as Expired.
class TokenTable {
 public:
  explicit TokenTable(double ttl_s = 900.0, Clock clock = steady_clock_seconds());

  std::string issue(int priority, const std::string& batch_id);
  void complete(const std::string& token, TransformResult result);
  void fail(const std::string& token, std::string reason);
  PollResult poll(const std::string& token) const;

  std::size_t issued() const;
  std::map<std::string, std::size_t> counts() const;

 private:
  struct Slot {
    int priority = 0;
    std::string batch_id;
    double issued_at = 0.0;
    PollStatus status = PollStatus::Pending;
    std::shared_ptr<const TransformResult> result;
    std::string reason;
  };

  std::string fresh_token();

  double ttl_s_;
  Clock clock_;
  mutable std::mutex mu_;
  std::map<std::string, Slot> slots_;
  std::mt19937_64 rng_;
  std::size_t issued_ = 0;
};

// ---------------------------------------------------------------------------
// Background workers

/// Fixed pool running jobs in (priority, submission order).
class WorkerPool {
 public:
  explicit WorkerPool(std::size_t workers);
  ~WorkerPool();
  WorkerPool(const WorkerPool&) = delete;
  WorkerPool& operator=(const WorkerPool&) = delete;

  void submit(int priority, std::function<void()> job);
  /// Blocks until the queue is empty and no job is running.
  void wait_idle();
  /// Jobs waiting in the queue, not counting running ones.
  std::size_t pending() const;

 private:
  struct Job {
    int priority;
    std::uint64_t seq;
    std::function<void()> fn;
    bool operator>(const Job& o) const { return priority != o.priority ? priority > o.priority : seq > o.seq; }
  };

  void run();

  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable idle_cv_;
  std::priority_queue<Job, std::vector<Job>, std::greater<Job>> queue_;
  std::uint64_t seq_ = 0;
  std::size_t running_ = 0;
  bool stop_ = false;
  std::vector<std::thread> threads_;
};

// ---------------------------------------------------------------------------
// Batch protocol

struct BatchRequest {
  std::string user_id;
  std::string cursor;
  std::optional<double> viewed_fraction;
  std::vector<ContentItem> posts;
  std::optional<std::vector<Filter>> filters;  // absent: the user's stored filters
};

BatchRequest batch_request_from_json(const json& j);
json to_json(const BatchRequest& r);

struct PostResult {
  std::string post_id;
  int position = 0;
  std::optional<TextInstruction> text_result;
  std::optional<InterventionKind> text_kind;
  std::optional<std::string> image_token;
  std::optional<TransformResult> image_result;
  bool cached = false;
};

struct BatchResponse {
  std::string batch_id;
  std::vector<PostResult> posts;
  std::string next_cursor;
  BackoffConfig backoff_hint;
  std::vector<std::string> warnings;
};

json to_json(const BatchResponse& r, PixelEncoding enc = PixelEncoding::Base64);

struct ServiceConfig {
  std::size_t k = 3;
  std::vector<InterventionKind> palette = all_kinds();
  std::size_t worker_count = 4;
  double token_ttl_s = 900.0;
  BackoffConfig backoff;
  double prefetch_threshold = 0.4;
  int fail_closed_threshold = 4;
  StyleScope style_scope = StyleScope::Region;
  LocalParams local;
  std::string cache_snapshot;  // empty: no snapshot
  std::string fingerprint = "simulated";
  std::uint64_t seed = 0;
};

/// Filters per user id.
class FilterStore {
 public:
  std::vector<Filter> list(const std::string& user) const;
  std::optional<Filter> get(const std::string& user, const std::string& id) const;
  /// Assigns an id when empty; replaces an existing filter with the same id.
  Filter put(const std::string& user, Filter f);
  bool erase(const std::string& user, const std::string& id);

 private:
  mutable std::mutex mu_;
  std::map<std::string, std::map<std::string, Filter>> filters_;
  std::uint64_t next_id_ = 1;
};

struct ServiceBackends {
  JudgeBackend* judge = nullptr;
  const Generator* generator = nullptr;
  const Transformer* transformer = nullptr;
};

class BatchService {
 public:
  BatchService(ServiceConfig config, ServiceBackends backends, Clock clock = steady_clock_seconds(),
               std::function<std::int64_t()> wall_clock = {});
  ~BatchService();

  BatchResponse process_batch(const BatchRequest& request);
  PollResult poll(const std::string& token) const;
  /// Waits for every background job submitted so far.
  void wait_idle();

  CallAccount calls() const;
  json metrics() const;

  FilterStore& filters() { return filters_; }
  ResultCache& cache() { return cache_; }
  const ServiceConfig& config() const { return config_; }

 private:
  struct TextOutcome {
    std::optional<TextInstruction> instruction;
    std::optional<InterventionKind> kind;
    bool cached = false;
    std::vector<std::string> warnings;
  };
  struct ImageOutcome {
    std::optional<std::string> token;
    std::optional<TransformResult> result;
    bool cached = false;
    std::vector<std::string> warnings;
  };

  TextOutcome text_path(const ContentItem& post, std::span<const Filter> filters);
  ImageOutcome image_path(const ContentItem& post, std::span<const Filter> filters, const std::string& batch_id);
  void account(const CallAccount& c);
  CascadeConfig cascade_config() const;

  ServiceConfig config_;
  ServiceBackends backends_;
  Clock clock_;
  std::function<std::int64_t()> wall_clock_;
  ResultCache cache_;
  TokenTable tokens_;
  FilterStore filters_;
  MockTransformer fallback_transformer_;
  mutable std::mutex calls_mu_;
  CallAccount calls_;
  std::atomic<std::uint64_t> batches_{0};
  std::atomic<std::uint64_t> jobs_done_{0};
  std::atomic<std::uint64_t> jobs_failed_{0};
  std::mutex rng_mu_;
  std::mt19937_64 batch_rng_;
  WorkerPool workers_;  // last: joined before the rest is torn down
};

// ---------------------------------------------------------------------------
// Preference elicitation

struct PreferenceOffer {
  std::string pair_id;
  ContentItem content;
  Modality modality = Modality::Image;
  TransformResult left;
  TransformResult right;
};

json to_json(const PreferenceOffer& o);

enum class ChoiceStatus { Recorded, UnknownPair, Duplicate };

struct HumanChoiceRecord {
  PreferencePair pair;
  std::string pair_id;
  std::string modality;
  std::string rationale;
  bool system_choice_favored = false;
  InterventionKind system_winner = InterventionKind::Occlusion;
};

json to_json(const HumanChoiceRecord& r);

/// Pairs the full-palette winner with a uniformly drawn rank-2..5
/// alternative, placed on a random side. Choices append to d_hp.json.
class PrefsService {
 public:
  PrefsService(FeedParams feed, ServiceBackends backends, std::string d_hp_path, std::uint64_t seed,
               ServiceConfig config = {});

  /// Uses the next feed post that matches `filter` (the feed filter when absent).
  PreferenceOffer next(const std::optional<Filter>& filter = std::nullopt);
  ChoiceStatus choose(const std::string& pair_id, bool chose_left, const std::string& modality,
                      const std::string& rationale);

  std::vector<HumanChoiceRecord> records() const;

  /// Ranked candidates for every applicable palette kind, best first.
  std::vector<std::pair<InterventionKind, TransformResult>> rank_all(const ContentItem& content,
                                                                     const UserContext& user, Modality modality);

 private:
  struct Pending {
    ContentItem content;
    Filter filter;
    Modality modality;
    InterventionKind left_kind;
    InterventionKind right_kind;
    InterventionKind system_winner;
    bool decided = false;
  };

  FeedParams feed_;
  ServiceBackends backends_;
  std::string d_hp_path_;
  ServiceConfig config_;
  mutable std::mutex mu_;
  std::mt19937_64 rng_;
  std::size_t cursor_ = 0;
  std::size_t page_ = 0;
  std::vector<ContentItem> buffer_;
  std::uint64_t next_pair_ = 1;
  std::map<std::string, Pending> pairs_;
  std::vector<HumanChoiceRecord> records_;
  json preloaded_ = json::array();  // records already in d_hp.json at startup
};

// ---------------------------------------------------------------------------
// HTTP

struct HttpConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string api_key;  // empty: no key required
  std::string d_hp_path = "d_hp.json";
  FeedParams feed;
};

/// Full server configuration file (JSON). Keys may be overridden by
/// MODPIPE_<KEY> environment variables.
struct ServerSettings {
  ServiceConfig service;
  HttpConfig http;
  std::string judge = "simulated";       // or an http(s) base URL
  std::string generator = "mock";        // or an http(s) URL
  std::string judge_model;
  double backend_timeout_s = 30.0;
  json simjudge;                         // table overrides
};

ServerSettings settings_from_json(json j, const std::map<std::string, std::string>& env = {});
std::map<std::string, std::string> modpipe_environment();

class HttpServer {
 public:
  HttpServer(BatchService& service, PrefsService& prefs, HttpConfig config);
  ~HttpServer();

  /// Binds and serves on a background thread. Returns the bound port.
  int start();
  void stop();
  int port() const { return port_; }

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::string host_;
  int requested_port_ = 0;
  int port_ = 0;
};

}  // namespace modpipe
