#include "modpipe/serving.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <future>

#include <httplib.h>

#include "modpipe/encoding.hpp"
#include "modpipe/selector.hpp"

extern char** environ;

namespace modpipe {

// ---------------------------------------------------------------------------
// Cache

std::uint64_t cache_key(std::string_view content_canonical, std::string_view filter_params_canonical,
                        int sensitivity) {
  return fnv1a64(content_canonical) ^ fnv1a64(filter_params_canonical) ^ fnv1a64(std::to_string(sensitivity));
}

std::uint64_t cache_key(const ContentItem& content, std::span<const Filter> filters, Modality modality) {
  std::vector<std::string> params;
  int sensitivity = 1;
  for (const auto& f : filters) {
    params.push_back(filter_params_canonical(f));
    sensitivity = std::max(sensitivity, f.sensitivity);
  }
  std::sort(params.begin(), params.end());
  const std::string joined = params.size() == 1 ? params.front() : json(params).dump();
  return cache_key(modality == Modality::Text ? text_canonical(content) : image_canonical(content), joined,
                   sensitivity);
}

namespace {

std::string_view outcome_name(CacheOutcome o) {
  switch (o) {
    case CacheOutcome::NoMatch: return "no_match";
    case CacheOutcome::Text: return "text";
    case CacheOutcome::Image: return "image";
  }
  return "no_match";
}

CacheOutcome outcome_from_name(std::string_view s) {
  if (s == "no_match") return CacheOutcome::NoMatch;
  if (s == "text") return CacheOutcome::Text;
  if (s == "image") return CacheOutcome::Image;
  throw ParseError("unknown cache outcome '" + std::string(s) + "'");
}

}  // namespace

json to_json(const CacheEntry& e) {
  json j{{"outcome", outcome_name(e.outcome)}, {"created_at", e.created_at}, {"fingerprint", e.fingerprint}};
  if (e.result) j["result"] = to_json(*e.result, PixelEncoding::Base64);
  return j;
}

CacheEntry cache_entry_from_json(const json& j) {
  CacheEntry e;
  try {
    e.outcome = outcome_from_name(j.at("outcome").get<std::string>());
    e.created_at = j.at("created_at").get<std::int64_t>();
    e.fingerprint = j.at("fingerprint").get<std::string>();
    if (j.contains("result")) e.result = transform_result_from_json(j.at("result"));
  } catch (const json::exception& ex) {
    throw ParseError(std::string("cache entry: ") + ex.what());
  }
  return e;
}

std::optional<CacheEntry> ResultCache::get(std::uint64_t key, std::string_view fingerprint) {
  std::lock_guard lock(mu_);
  auto it = entries_.find(key);
  if (it == entries_.end() || it->second.fingerprint != fingerprint) {
    ++misses_;
    return std::nullopt;
  }
  ++hits_;
  return it->second;
}

void ResultCache::put(std::uint64_t key, CacheEntry entry) {
  std::lock_guard lock(mu_);
  entries_.insert_or_assign(key, std::move(entry));
}

std::size_t ResultCache::size() const {
  std::lock_guard lock(mu_);
  return entries_.size();
}

json ResultCache::snapshot() const {
  std::lock_guard lock(mu_);
  json entries = json::object();
  for (const auto& [k, e] : entries_) entries[hex64(k)] = to_json(e);
  return json{{"version", 1}, {"entries", entries}};
}

void ResultCache::restore(const json& j) {
  std::map<std::uint64_t, CacheEntry> loaded;
  try {
    if (j.at("version").get<int>() != 1) throw ParseError("unsupported cache snapshot version");
    for (const auto& [k, v] : j.at("entries").items()) {
      std::size_t used = 0;
      const std::uint64_t key = std::stoull(k, &used, 16);
      if (used != k.size()) throw ParseError("bad cache key '" + k + "'");
      loaded.emplace(key, cache_entry_from_json(v));
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("cache snapshot: ") + e.what());
  } catch (const std::logic_error&) {
    throw ParseError("cache snapshot: malformed key");
  }
  std::lock_guard lock(mu_);
  entries_ = std::move(loaded);
}

void ResultCache::save(const std::string& path) const { write_text_file(path, snapshot().dump()); }

void ResultCache::load(const std::string& path) { restore(read_json_file(path)); }

// ---------------------------------------------------------------------------
// Backoff and prefetch

void validate(const BackoffConfig& c) {
  if (!(c.t_min_ms > 0.0)) throw ConfigError("backoff t_min must be > 0");
  if (!(c.t0_ms >= c.t_min_ms)) throw ConfigError("backoff t0 must be >= t_min");
  if (!(c.decay > 0.0 && c.decay < 1.0)) throw ConfigError("backoff decay must be in (0,1)");
  if (!(c.jitter_max_ms >= 0.0)) throw ConfigError("backoff jitter_max must be >= 0");
}

json to_json(const BackoffConfig& c) {
  return json{{"t0_ms", c.t0_ms}, {"decay", c.decay}, {"t_min_ms", c.t_min_ms}, {"jitter_max_ms", c.jitter_max_ms}};
}

BackoffConfig backoff_from_json(const json& j) {
  BackoffConfig c;
  try {
    c.t0_ms = j.value("t0_ms", c.t0_ms);
    c.decay = j.value("decay", c.decay);
    c.t_min_ms = j.value("t_min_ms", c.t_min_ms);
    c.jitter_max_ms = j.value("jitter_max_ms", c.jitter_max_ms);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("backoff: ") + e.what());
  }
  validate(c);
  return c;
}

double backoff_base(int attempt, const BackoffConfig& cfg) {
  validate(cfg);
  if (attempt < 0) throw ConfigError("backoff attempt must be >= 0");
  return std::max(cfg.t_min_ms, cfg.t0_ms * std::pow(cfg.decay, attempt));
}

double backoff_schedule(int attempt, const BackoffConfig& cfg, std::mt19937_64& rng) {
  const double base = backoff_base(attempt, cfg);
  if (cfg.jitter_max_ms == 0.0) return base;
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return base + u * cfg.jitter_max_ms;
}

std::string prefetch_cursor(const std::string& current, double viewed_fraction, double threshold) {
  if (viewed_fraction >= threshold) return page_cursor(cursor_page(current) + 1);
  return current;
}

// ---------------------------------------------------------------------------
// Tokens

Clock steady_clock_seconds() {
  return [] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
  };
}

std::string_view to_string(PollStatus s) {
  switch (s) {
    case PollStatus::Pending: return "pending";
    case PollStatus::Ready: return "ready";
    case PollStatus::Failed: return "failed";
    case PollStatus::Expired: return "expired";
  }
  return "expired";
}

namespace {

std::mt19937_64 seeded_from_device() {
  std::random_device rd;
  std::seed_seq seq{rd(), rd(), rd(), rd(), rd(), rd(), rd(), rd()};
  return std::mt19937_64(seq);
}

}  // namespace

TokenTable::TokenTable(double ttl_s, Clock clock) : ttl_s_(ttl_s), clock_(std::move(clock)), rng_(seeded_from_device()) {
  if (!(ttl_s > 0.0)) throw ConfigError("token TTL must be > 0");
}

std::string TokenTable::fresh_token() {
  for (;;) {
    std::string t = hex64(rng_()) + hex64(rng_());
    if (!slots_.count(t)) return t;
  }
}

std::string TokenTable::issue(int priority, const std::string& batch_id) {
  std::lock_guard lock(mu_);
  const double now = clock_();
  for (auto it = slots_.begin(); it != slots_.end();)
    it = now - it->second.issued_at >= ttl_s_ ? slots_.erase(it) : std::next(it);
  std::string t = fresh_token();
  slots_[t] = Slot{priority, batch_id, now, PollStatus::Pending, nullptr, {}};
  ++issued_;
  return t;
}

void TokenTable::complete(const std::string& token, TransformResult result) {
  auto shared = std::make_shared<const TransformResult>(std::move(result));
  std::lock_guard lock(mu_);
  auto it = slots_.find(token);
  if (it == slots_.end() || it->second.status != PollStatus::Pending) return;
  it->second.result = std::move(shared);
  it->second.status = PollStatus::Ready;
}

void TokenTable::fail(const std::string& token, std::string reason) {
  std::lock_guard lock(mu_);
  auto it = slots_.find(token);
  if (it == slots_.end() || it->second.status != PollStatus::Pending) return;
  it->second.reason = std::move(reason);
  it->second.status = PollStatus::Failed;
}

PollResult TokenTable::poll(const std::string& token) const {
  std::lock_guard lock(mu_);
  auto it = slots_.find(token);
  if (it == slots_.end() || clock_() - it->second.issued_at >= ttl_s_) return {PollStatus::Expired, nullptr, {}};
  return {it->second.status, it->second.result, it->second.reason};
}

std::size_t TokenTable::issued() const {
  std::lock_guard lock(mu_);
  return issued_;
}

std::map<std::string, std::size_t> TokenTable::counts() const {
  std::lock_guard lock(mu_);
  std::map<std::string, std::size_t> out{{"pending", 0}, {"ready", 0}, {"failed", 0}};
  for (const auto& [t, s] : slots_) ++out[std::string(to_string(s.status))];
  return out;
}

// ---------------------------------------------------------------------------
// Workers

WorkerPool::WorkerPool(std::size_t workers) {
  if (workers < 1) throw ConfigError("worker_count must be >= 1");
  for (std::size_t i = 0; i < workers; ++i) threads_.emplace_back([this] { run(); });
}

WorkerPool::~WorkerPool() {
  {
    std::lock_guard lock(mu_);
    stop_ = true;
  }
  cv_.notify_all();
  for (auto& t : threads_) t.join();
}

void WorkerPool::submit(int priority, std::function<void()> job) {
  {
    std::lock_guard lock(mu_);
    queue_.push(Job{priority, seq_++, std::move(job)});
  }
  cv_.notify_one();
}

void WorkerPool::wait_idle() {
  std::unique_lock lock(mu_);
  idle_cv_.wait(lock, [this] { return queue_.empty() && running_ == 0; });
}

std::size_t WorkerPool::pending() const {
  std::lock_guard lock(mu_);
  return queue_.size();
}

void WorkerPool::run() {
  for (;;) {
    std::function<void()> fn;
    {
      std::unique_lock lock(mu_);
      cv_.wait(lock, [this] { return stop_ || !queue_.empty(); });
      if (stop_) return;
      fn = std::move(const_cast<Job&>(queue_.top()).fn);
      queue_.pop();
      ++running_;
    }
    try {
      fn();
    } catch (...) {
    }
    {
      std::lock_guard lock(mu_);
      --running_;
      if (queue_.empty() && running_ == 0) idle_cv_.notify_all();
    }
  }
}

// ---------------------------------------------------------------------------
// Batch protocol

BatchRequest batch_request_from_json(const json& j) {
  if (!j.is_object()) throw ParseError("batch request must be a JSON object");
  BatchRequest r;
  try {
    r.user_id = j.value("user_id", std::string());
    r.cursor = j.value("cursor", std::string());
    if (j.contains("viewed_fraction") && !j.at("viewed_fraction").is_null()) {
      const double v = j.at("viewed_fraction").get<double>();
      if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("viewed_fraction", "must be in [0,1]");
      r.viewed_fraction = v;
    }
    if (!j.contains("posts") || !j.at("posts").is_array()) throw ValidationError("posts", "expected an array");
    for (const auto& p : j.at("posts")) r.posts.push_back(content_from_json(p));
    if (j.contains("filters") && !j.at("filters").is_null()) {
      std::vector<Filter> fs;
      for (const auto& f : j.at("filters")) fs.push_back(filter_from_json(f));
      r.filters = std::move(fs);
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("batch request: ") + e.what());
  }
  if (r.posts.empty()) throw ValidationError("posts", "at least one post required");
  std::vector<bool> seen(r.posts.size(), false);
  for (const auto& p : r.posts) {
    if (p.position < 0 || static_cast<std::size_t>(p.position) >= r.posts.size() || seen[p.position])
      throw ValidationError("position", "positions must be dense 0..N-1");
    seen[p.position] = true;
  }
  return r;
}

json to_json(const BatchRequest& r) {
  json posts = json::array();
  for (const auto& p : r.posts) posts.push_back(to_json(p, PixelEncoding::Base64));
  json j{{"user_id", r.user_id}, {"cursor", r.cursor}, {"posts", posts}};
  if (r.viewed_fraction) j["viewed_fraction"] = *r.viewed_fraction;
  if (r.filters) {
    json fs = json::array();
    for (const auto& f : *r.filters) fs.push_back(to_json(f));
    j["filters"] = fs;
  }
  return j;
}

json to_json(const BatchResponse& r, PixelEncoding enc) {
  json posts = json::array();
  for (const auto& p : r.posts) {
    json j{{"post_id", p.post_id}, {"position", p.position}, {"cached", p.cached}};
    if (p.text_result) j["text_result"] = to_json(*p.text_result);
    if (p.text_kind) j["text_kind"] = to_string(*p.text_kind);
    if (p.image_token) j["image_token"] = *p.image_token;
    if (p.image_result) j["image_result"] = to_json(*p.image_result, enc);
    posts.push_back(std::move(j));
  }
  return json{{"batch_id", r.batch_id},
              {"posts", posts},
              {"next_cursor", r.next_cursor},
              {"backoff_hint", to_json(r.backoff_hint)},
              {"warnings", r.warnings}};
}

std::vector<Filter> FilterStore::list(const std::string& user) const {
  std::lock_guard lock(mu_);
  std::vector<Filter> out;
  if (auto it = filters_.find(user); it != filters_.end())
    for (const auto& [id, f] : it->second) out.push_back(f);
  return out;
}

std::optional<Filter> FilterStore::get(const std::string& user, const std::string& id) const {
  std::lock_guard lock(mu_);
  auto it = filters_.find(user);
  if (it == filters_.end()) return std::nullopt;
  auto f = it->second.find(id);
  if (f == it->second.end()) return std::nullopt;
  return f->second;
}

Filter FilterStore::put(const std::string& user, Filter f) {
  validate(f);
  std::lock_guard lock(mu_);
  if (f.id.empty()) f.id = "f" + std::to_string(next_id_++);
  filters_[user].insert_or_assign(f.id, f);
  return f;
}

bool FilterStore::erase(const std::string& user, const std::string& id) {
  std::lock_guard lock(mu_);
  auto it = filters_.find(user);
  return it != filters_.end() && it->second.erase(id) > 0;
}

namespace {

std::int64_t unix_now() {
  return std::chrono::duration_cast<std::chrono::seconds>(std::chrono::system_clock::now().time_since_epoch()).count();
}

std::vector<Filter> covering(std::span<const Filter> filters, Modality m) {
  std::vector<Filter> out;
  for (const auto& f : filters)
    if (m == Modality::Text ? covers_text(f.modality) : covers_image(f.modality)) out.push_back(f);
  return out;
}

const Filter& most_sensitive(std::span<const Filter> filters) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < filters.size(); ++i)
    if (filters[i].sensitivity > filters[best].sensitivity) best = i;
  return filters[best];
}

bool is_backend_failure(const Error& e) { return e.code() == "BackendError" || e.code() == "MalformedVerdict"; }

}  // namespace

BatchService::BatchService(ServiceConfig config, ServiceBackends backends, Clock clock,
                           std::function<std::int64_t()> wall_clock)
    : config_(std::move(config)),
      backends_(backends),
      clock_(std::move(clock)),
      wall_clock_(wall_clock ? std::move(wall_clock) : std::function<std::int64_t()>(unix_now)),
      tokens_(config_.token_ttl_s, clock_),
      batch_rng_(seeded_from_device()),
      workers_(config_.worker_count) {
  if (!backends_.judge) throw ConfigError("a judge backend is required");
  validate(config_.backoff);
  if (!config_.cache_snapshot.empty() && std::filesystem::exists(config_.cache_snapshot))
    cache_.load(config_.cache_snapshot);
}

BatchService::~BatchService() {
  wait_idle();
  if (!config_.cache_snapshot.empty()) {
    try {
      cache_.save(config_.cache_snapshot);
    } catch (...) {
    }
  }
}

CascadeConfig BatchService::cascade_config() const {
  CascadeConfig c;
  c.k = config_.k;
  c.palette = config_.palette;
  c.judge = backends_.judge;
  c.generator = backends_.generator;
  c.transformer = backends_.transformer ? backends_.transformer : &fallback_transformer_;
  c.local = config_.local;
  c.style_scope = config_.style_scope;
  return c;
}

void BatchService::account(const CallAccount& c) {
  std::lock_guard lock(calls_mu_);
  calls_ += c;
}

CallAccount BatchService::calls() const {
  std::lock_guard lock(calls_mu_);
  return calls_;
}

BatchService::TextOutcome BatchService::text_path(const ContentItem& post, std::span<const Filter> filters) {
  TextOutcome out;
  const auto cover = covering(filters, Modality::Text);
  if (!post.text || cover.empty()) return out;

  const std::uint64_t key = cache_key(post, cover, Modality::Text);
  if (auto hit = cache_.get(key, config_.fingerprint)) {
    out.cached = true;
    if (hit->outcome == CacheOutcome::Text && hit->result) {
      out.instruction = hit->result->text_instruction;
      out.kind = hit->result->kind;
    }
    return out;
  }

  auto fail_closed = [&](const std::string& why) {
    out.warnings.push_back(post.id + ": text " + why);
    const Filter& f = most_sensitive(cover);
    if (f.sensitivity < config_.fail_closed_threshold) return;
    out.instruction = apply_text_intervention(*post.text, InterventionKind::TextOverlay, {}, f, fallback_transformer_);
    out.kind = InterventionKind::TextOverlay;
    out.warnings.back() += " (fail-closed overlay)";
  };

  CallAccount calls;
  ++calls.text_match;
  std::vector<TextMatch> matches;
  try {
    matches = backends_.judge->match_text(post, cover);
  } catch (const Error& e) {
    account(calls);
    if (!is_backend_failure(e)) throw;
    fail_closed(std::string("matching failed: ") + e.what());
    return out;
  }
  if (matches.empty()) {
    account(calls);
    cache_.put(key, CacheEntry{CacheOutcome::NoMatch, std::nullopt, wall_clock_(), config_.fingerprint});
    return out;
  }

  std::vector<Filter> matched;
  for (const auto& m : matches) matched.push_back(cover.at(m.filter_index));
  const UserContext user = make_user_context(most_sensitive(matched));
  try {
    auto sel = select_intervention(post, user, cascade_config(), Modality::Text);
    calls += sel.calls;
    account(calls);
    out.instruction = sel.winner.text_instruction;
    out.kind = sel.winner_kind;
    cache_.put(key, CacheEntry{CacheOutcome::Text, std::move(sel.winner), wall_clock_(), config_.fingerprint});
  } catch (const Error& e) {
    ++calls.text_select;
    account(calls);
    if (!is_backend_failure(e) && e.code() != "AllCandidatesFailed") throw;
    fail_closed(std::string("selection failed: ") + e.what());
  }
  return out;
}

BatchService::ImageOutcome BatchService::image_path(const ContentItem& post, std::span<const Filter> filters,
                                                    const std::string& batch_id) {
  ImageOutcome out;
  const auto cover = covering(filters, Modality::Image);
  if (!post.image || cover.empty()) return out;

  const std::uint64_t key = cache_key(post, cover, Modality::Image);
  if (auto hit = cache_.get(key, config_.fingerprint)) {
    out.cached = true;
    if (hit->outcome == CacheOutcome::Image) out.result = hit->result;
    return out;
  }

  std::vector<UserContext> users;
  for (const auto& f : cover) users.push_back(make_user_context(f));
  const auto palette = kinds_for(Modality::Image, config_.palette);

  CallAccount calls;
  ++calls.image_match;
  ImageAssessment assessment;
  try {
    assessment = backends_.judge->assess_image(post, users, palette);
  } catch (const Error& e) {
    account(calls);
    if (!is_backend_failure(e)) throw;
    out.warnings.push_back(post.id + ": image matching failed: " + e.what());
    const Filter& f = most_sensitive(cover);
    if (f.sensitivity >= config_.fail_closed_threshold) {
      const NormRect whole{0, 0, 1, 1};
      out.result = apply_local(*post.image, InterventionKind::WarningOverlay, std::span(&whole, 1), f, config_.local);
      out.warnings.back() += " (fail-closed overlay)";
    }
    return out;
  }
  account(calls);
  if (assessment.matches.empty()) {
    cache_.put(key, CacheEntry{CacheOutcome::NoMatch, std::nullopt, wall_clock_(), config_.fingerprint});
    return out;
  }

  const std::string token = tokens_.issue(post.position, batch_id);
  out.token = token;
  UserContext user = users.at(assessment.primary);
  workers_.submit(post.position, [this, post, user = std::move(user), ranking = std::move(assessment.ranking), key,
                                  token]() mutable {
    try {
      auto sel = select_intervention(post, user, cascade_config(), Modality::Image, std::move(ranking));
      account(sel.calls);
      cache_.put(key, CacheEntry{CacheOutcome::Image, sel.winner, wall_clock_(), config_.fingerprint});
      tokens_.complete(token, std::move(sel.winner));
      ++jobs_done_;
      if (!config_.cache_snapshot.empty()) cache_.save(config_.cache_snapshot);
    } catch (const std::exception& e) {
      ++jobs_failed_;
      tokens_.fail(token, e.what());
    }
  });
  return out;
}

BatchResponse BatchService::process_batch(const BatchRequest& request) {
  if (request.posts.empty()) throw ValidationError("posts", "at least one post required");
  for (const auto& p : request.posts) validate(p);

  std::vector<Filter> filters;
  const auto source = request.filters ? *request.filters : filters_.list(request.user_id);
  for (const auto& f : source) validate(f);
  filters = active_filters(source, wall_clock_());

  BatchResponse resp;
  {
    std::lock_guard lock(rng_mu_);
    resp.batch_id = hex64(batch_rng_());
  }
  resp.backoff_hint = config_.backoff;
  resp.next_cursor = request.viewed_fraction
                         ? prefetch_cursor(request.cursor, *request.viewed_fraction, config_.prefetch_threshold)
                         : request.cursor;

  struct Pending {
    std::future<TextOutcome> text;
    std::future<ImageOutcome> image;
  };
  std::vector<Pending> pending(request.posts.size());
  for (std::size_t i = 0; i < request.posts.size(); ++i) {
    const auto& post = request.posts[i];
    if (post.is_ad || filters.empty()) continue;
    pending[i].text = std::async(std::launch::async, [this, &post, &filters] { return text_path(post, filters); });
    pending[i].image = std::async(std::launch::async,
                                  [this, &post, &filters, &resp] { return image_path(post, filters, resp.batch_id); });
  }

  for (std::size_t i = 0; i < request.posts.size(); ++i) {
    const auto& post = request.posts[i];
    PostResult r;
    r.post_id = post.id;
    r.position = post.position;
    bool examined = false, all_cached = true;
    if (pending[i].text.valid()) {
      auto t = pending[i].text.get();
      if (post.text && !covering(filters, Modality::Text).empty()) {
        examined = true;
        all_cached = all_cached && t.cached;
      }
      r.text_result = std::move(t.instruction);
      r.text_kind = t.kind;
      resp.warnings.insert(resp.warnings.end(), t.warnings.begin(), t.warnings.end());
    }
    if (pending[i].image.valid()) {
      auto im = pending[i].image.get();
      if (post.image && !covering(filters, Modality::Image).empty()) {
        examined = true;
        all_cached = all_cached && im.cached;
      }
      r.image_token = std::move(im.token);
      r.image_result = std::move(im.result);
      resp.warnings.insert(resp.warnings.end(), im.warnings.begin(), im.warnings.end());
    }
    r.cached = examined && all_cached;
    resp.posts.push_back(std::move(r));
  }
  std::sort(resp.posts.begin(), resp.posts.end(), [](const auto& a, const auto& b) { return a.position < b.position; });
  ++batches_;
  return resp;
}

PollResult BatchService::poll(const std::string& token) const { return tokens_.poll(token); }

void BatchService::wait_idle() { workers_.wait_idle(); }

json BatchService::metrics() const {
  json tokens = json::object();
  for (const auto& [k, v] : tokens_.counts()) tokens[k] = v;
  tokens["issued"] = tokens_.issued();
  return json{{"calls", to_json(calls())},
              {"cache", {{"hits", cache_.hits()}, {"misses", cache_.misses()}, {"entries", cache_.size()}}},
              {"tokens", tokens},
              {"batches", batches_.load()},
              {"jobs", {{"done", jobs_done_.load()}, {"failed", jobs_failed_.load()}, {"queued", workers_.pending()}}}};
}

// ---------------------------------------------------------------------------
// Preferences

json to_json(const PreferenceOffer& o) {
  return json{{"pair_id", o.pair_id},
              {"content", to_json(o.content, PixelEncoding::Base64)},
              {"modality", o.modality == Modality::Text ? "text" : "image"},
              {"left", to_json(o.left, PixelEncoding::Base64)},
              {"right", to_json(o.right, PixelEncoding::Base64)}};
}

json to_json(const HumanChoiceRecord& r) {
  json j = to_json(r.pair);
  j["pair_id"] = r.pair_id;
  j["modality"] = r.modality;
  j["rationale"] = r.rationale;
  j["system_choice_favored"] = r.system_choice_favored;
  j["system_winner"] = to_string(r.system_winner);
  return j;
}

PrefsService::PrefsService(FeedParams feed, ServiceBackends backends, std::string d_hp_path, std::uint64_t seed,
                           ServiceConfig config)
    : feed_(std::move(feed)),
      backends_(backends),
      d_hp_path_(std::move(d_hp_path)),
      config_(std::move(config)),
      rng_(seed) {
  if (!backends_.judge) throw ConfigError("a judge backend is required");
  if (!d_hp_path_.empty() && std::filesystem::exists(d_hp_path_)) {
    preloaded_ = read_json_file(d_hp_path_);
    if (!preloaded_.is_array()) throw ParseError(d_hp_path_ + " is not a JSON array");
  }
}

std::vector<std::pair<InterventionKind, TransformResult>> PrefsService::rank_all(const ContentItem& content,
                                                                                 const UserContext& user,
                                                                                 Modality modality) {
  static const MockTransformer mock;
  CascadeConfig cfg;
  cfg.judge = backends_.judge;
  cfg.generator = backends_.generator;
  cfg.transformer = backends_.transformer ? backends_.transformer : &mock;
  cfg.local = config_.local;
  cfg.style_scope = config_.style_scope;

  struct Scored {
    InterventionKind kind;
    double total;
    TransformResult result;
  };
  std::vector<Scored> scored;
  for (auto kind : kinds_for(modality, config_.palette)) {
    if (modality == Modality::Image && !is_image_kind(kind)) continue;
    if (modality == Modality::Text && !is_text_kind(kind)) continue;
    try {
      auto result = render_candidate(content, kind, user.filter, cfg);
      const auto v = score(content, result, user, Rubric::Deployment4Dim, *backends_.judge);
      scored.push_back({kind, v.total, std::move(result)});
    } catch (const Error& e) {
      if (!is_backend_failure(e) && e.code() != "GeneratorUnavailable") throw;
    }
  }
  std::sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) {
    return a.total != b.total ? a.total > b.total : index_of(a.kind) < index_of(b.kind);
  });
  std::vector<std::pair<InterventionKind, TransformResult>> out;
  for (auto& s : scored) out.emplace_back(s.kind, std::move(s.result));
  return out;
}

PreferenceOffer PrefsService::next(const std::optional<Filter>& filter_opt) {
  std::lock_guard lock(mu_);
  const Filter filter = filter_opt ? *filter_opt : feed_.filter;
  validate(filter);

  for (std::size_t scanned = 0;; ++scanned) {
    if (scanned > 100 * feed_.posts) throw ValidationError("filter", "no feed post matches the filter");
    if (cursor_ >= buffer_.size()) {
      FeedParams p = feed_;
      p.page = page_++;
      buffer_ = generate_feed(p);
      cursor_ = 0;
    }
    ContentItem post = buffer_[cursor_++];
    if (post.is_ad || !post_matches(post, filter)) continue;
    const Modality modality =
        post.image && covers_image(filter.modality) ? Modality::Image : Modality::Text;
    if (modality == Modality::Text && !(post.text && covers_text(filter.modality))) continue;

    const UserContext user = make_user_context(filter);
    auto ranked = rank_all(post, user, modality);
    if (ranked.size() < 2) continue;

    const std::size_t top = std::min<std::size_t>(5, ranked.size());
    const auto u1 = static_cast<double>(rng_() >> 11) * 0x1.0p-53;
    const std::size_t alt = 1 + static_cast<std::size_t>(u1 * static_cast<double>(top - 1)) % (top - 1);
    const bool winner_left = (rng_() >> 63) != 0;

    PreferenceOffer offer;
    offer.pair_id = "pair-" + std::to_string(next_pair_++);
    offer.content = post;
    offer.modality = modality;
    auto& win = ranked[0];
    auto& other = ranked[alt];
    Pending p{post, filter, modality, winner_left ? win.first : other.first, winner_left ? other.first : win.first,
              win.first, false};
    offer.left = winner_left ? win.second : other.second;
    offer.right = winner_left ? other.second : win.second;
    pairs_.emplace(offer.pair_id, std::move(p));
    return offer;
  }
}

ChoiceStatus PrefsService::choose(const std::string& pair_id, bool chose_left, const std::string& modality,
                                  const std::string& rationale) {
  if (modality != "text" && modality != "image") throw ValidationError("modality", "expected text or image");
  std::lock_guard lock(mu_);
  auto it = pairs_.find(pair_id);
  if (it == pairs_.end()) return ChoiceStatus::UnknownPair;
  auto& p = it->second;
  if (p.decided) return ChoiceStatus::Duplicate;

  HumanChoiceRecord r;
  r.pair.context = featurize(p.content, p.filter, config_.palette);
  r.pair.winner = chose_left ? p.left_kind : p.right_kind;
  r.pair.loser = chose_left ? p.right_kind : p.left_kind;
  r.pair.source = PairSource::Human;
  r.pair_id = pair_id;
  r.modality = modality;
  r.rationale = rationale;
  r.system_winner = p.system_winner;
  r.system_choice_favored = r.pair.winner == p.system_winner;

  if (!d_hp_path_.empty()) {
    json out = preloaded_;
    for (const auto& rec : records_) out.push_back(to_json(rec));
    out.push_back(to_json(r));
    write_text_file(d_hp_path_, out.dump(2));
  }
  p.decided = true;
  records_.push_back(std::move(r));
  return ChoiceStatus::Recorded;
}

std::vector<HumanChoiceRecord> PrefsService::records() const {
  std::lock_guard lock(mu_);
  return records_;
}

// ---------------------------------------------------------------------------
// Settings

std::map<std::string, std::string> modpipe_environment() {
  std::map<std::string, std::string> out;
  for (char** e = environ; e && *e; ++e) {
    std::string_view kv(*e);
    if (kv.rfind("MODPIPE_", 0) != 0) continue;
    const auto eq = kv.find('=');
    if (eq == std::string_view::npos) continue;
    out.emplace(std::string(kv.substr(0, eq)), std::string(kv.substr(eq + 1)));
  }
  return out;
}

namespace {

const std::vector<std::string>& settings_keys() {
  static const std::vector<std::string> keys{
      "k",           "palette",          "worker_count",  "token_ttl_s", "backoff",     "prefetch_threshold",
      "fail_closed_threshold", "style_scope", "cache_snapshot", "seed",     "host",        "port",
      "api_key",     "d_hp_path",        "judge",         "generator",   "judge_model", "backend_timeout_s",
      "simjudge",    "feed",             "epsilon",       "weights"};
  return keys;
}

}  // namespace

ServerSettings settings_from_json(json j, const std::map<std::string, std::string>& env) {
  if (j.is_null()) j = json::object();
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  const auto& keys = settings_keys();
  for (const auto& [name, value] : env) {
    if (name.rfind("MODPIPE_", 0) != 0) continue;
    std::string key = name.substr(8);
    std::transform(key.begin(), key.end(), key.begin(), [](unsigned char c) { return std::tolower(c); });
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) continue;
    json parsed = json::parse(value, nullptr, false);
    j[key] = parsed.is_discarded() ? json(value) : parsed;
  }
  for (const auto& [key, v] : j.items())
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) throw ConfigError("unknown config key '" + key + "'");

  ServerSettings s;
  try {
    auto& svc = s.service;
    svc.k = j.value("k", svc.k);
    if (j.contains("palette")) {
      svc.palette.clear();
      for (const auto& name : j.at("palette")) svc.palette.push_back(kind_from_string(name.get<std::string>()));
    }
    svc.worker_count = j.value("worker_count", svc.worker_count);
    svc.token_ttl_s = j.value("token_ttl_s", svc.token_ttl_s);
    if (j.contains("backoff")) svc.backoff = backoff_from_json(j.at("backoff"));
    svc.prefetch_threshold = j.value("prefetch_threshold", svc.prefetch_threshold);
    svc.fail_closed_threshold = j.value("fail_closed_threshold", svc.fail_closed_threshold);
    if (j.contains("style_scope")) svc.style_scope = scope_from_string(j.at("style_scope").get<std::string>());
    svc.cache_snapshot = j.value("cache_snapshot", svc.cache_snapshot);
    svc.seed = j.value("seed", svc.seed);

    auto& http = s.http;
    http.host = j.value("host", http.host);
    http.port = j.value("port", http.port);
    http.api_key = j.value("api_key", http.api_key);
    http.d_hp_path = j.value("d_hp_path", http.d_hp_path);
    if (j.contains("feed")) {
      const auto& f = j.at("feed");
      http.feed.posts = f.value("posts", http.feed.posts);
      http.feed.match_rate = f.value("match_rate", http.feed.match_rate);
      http.feed.seed = f.value("seed", svc.seed);
      http.feed.ad_rate = f.value("ad_rate", http.feed.ad_rate);
      if (f.contains("filter")) http.feed.filter = filter_from_json(f.at("filter"));
    } else {
      http.feed.seed = svc.seed;
    }

    s.judge = j.value("judge", s.judge);
    s.generator = j.value("generator", s.generator);
    s.judge_model = j.value("judge_model", s.judge_model);
    s.backend_timeout_s = j.value("backend_timeout_s", s.backend_timeout_s);
    if (j.contains("simjudge")) s.simjudge = j.at("simjudge");
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (s.service.k < 1) throw ConfigError("k must be >= 1");
  if (s.service.worker_count < 1) throw ConfigError("worker_count must be >= 1");
  if (s.http.port < 0 || s.http.port > 65535) throw ConfigError("port out of range");
  if (!(s.backend_timeout_s > 0.0)) throw ConfigError("backend_timeout_s must be > 0");
  s.service.fingerprint = s.judge + "|" + s.judge_model + "|" + s.simjudge.dump() + "|k=" + std::to_string(s.service.k);
  return s;
}

// ---------------------------------------------------------------------------
// HTTP

namespace {

void reply(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

json error_body(const std::string& code, const std::string& message, const std::string& field = {}) {
  json e{{"code", code}, {"message", message}};
  if (!field.empty()) e["field"] = field;
  return json{{"error", e}};
}

std::string user_of(const httplib::Request& req) {
  if (req.has_header("X-User-Id")) return req.get_header_value("X-User-Id");
  if (req.has_param("user_id")) return req.get_param_value("user_id");
  return "anonymous";
}

template <typename F>
httplib::Server::Handler guarded(const std::string& api_key, F fn) {
  return [api_key, fn](const httplib::Request& req, httplib::Response& res) {
    if (!api_key.empty() && req.get_header_value("X-API-Key") != api_key) {
      reply(res, 401, error_body("Unauthorized", "missing or wrong API key"));
      return;
    }
    try {
      fn(req, res);
    } catch (const ValidationError& e) {
      reply(res, 400, error_body(e.code(), e.what(), e.field()));
    } catch (const ParseError& e) {
      reply(res, 400, error_body(e.code(), e.what()));
    } catch (const json::exception& e) {
      reply(res, 400, error_body("ParseError", e.what()));
    } catch (const Error& e) {
      reply(res, 500, error_body(e.code(), e.what()));
    } catch (const std::exception& e) {
      reply(res, 500, error_body("Internal", e.what()));
    }
  };
}

json poll_json(const PollResult& p) {
  json j{{"status", to_string(p.status)}};
  if (p.result) j["result"] = to_json(*p.result, PixelEncoding::Base64);
  if (!p.reason.empty()) j["reason"] = p.reason;
  return j;
}

}  // namespace

struct HttpServer::Impl {
  httplib::Server server;
  std::thread thread;
};

HttpServer::HttpServer(BatchService& service, PrefsService& prefs, HttpConfig config)
    : impl_(std::make_unique<Impl>()) {
  auto& s = impl_->server;
  const std::string key = config.api_key;
  auto http = std::make_shared<HttpConfig>(std::move(config));

  s.Get("/healthz", [](const httplib::Request&, httplib::Response& res) { reply(res, 200, {{"status", "ok"}}); });

  s.Get("/metrics", guarded(key, [&service](const httplib::Request&, httplib::Response& res) {
          reply(res, 200, service.metrics());
        }));

  s.Post("/batch", guarded(key, [&service](const httplib::Request& req, httplib::Response& res) {
           const auto request = batch_request_from_json(parse_json(req.body));
           reply(res, 200, to_json(service.process_batch(request)));
         }));

  s.Get(R"(/poll/([0-9a-f]+))", guarded(key, [&service](const httplib::Request& req, httplib::Response& res) {
          reply(res, 200, poll_json(service.poll(req.matches[1])));
        }));

  s.Get("/filters", guarded(key, [&service](const httplib::Request& req, httplib::Response& res) {
          json out = json::array();
          for (const auto& f : service.filters().list(user_of(req))) out.push_back(to_json(f));
          reply(res, 200, out);
        }));

  s.Post("/filters", guarded(key, [&service](const httplib::Request& req, httplib::Response& res) {
           json body = parse_json(req.body);
           if (body.is_object() && !body.contains("id")) body["id"] = "";
           if (body.is_object() && !body.contains("created_at")) body["created_at"] = unix_now();
           Filter f = service.filters().put(user_of(req), filter_from_json(body));
           reply(res, 201, to_json(f));
         }));

  s.Get(R"(/filters/([^/]+))", guarded(key, [&service](const httplib::Request& req, httplib::Response& res) {
          auto f = service.filters().get(user_of(req), req.matches[1]);
          if (!f) return reply(res, 404, error_body("NotFound", "no such filter"));
          reply(res, 200, to_json(*f));
        }));

  s.Put(R"(/filters/([^/]+))", guarded(key, [&service](const httplib::Request& req, httplib::Response& res) {
          json body = parse_json(req.body);
          if (!body.is_object()) throw ParseError("filter must be a JSON object");
          body["id"] = std::string(req.matches[1]);
          if (!body.contains("created_at")) body["created_at"] = unix_now();
          Filter f = service.filters().put(user_of(req), filter_from_json(body));
          reply(res, 200, to_json(f));
        }));

  s.Delete(R"(/filters/([^/]+))", guarded(key, [&service](const httplib::Request& req, httplib::Response& res) {
             if (!service.filters().erase(user_of(req), req.matches[1]))
               return reply(res, 404, error_body("NotFound", "no such filter"));
             res.status = 204;
           }));

  s.Get("/feed", guarded(key, [http](const httplib::Request& req, httplib::Response& res) {
          const std::string cursor = req.has_param("cursor") ? req.get_param_value("cursor") : page_cursor(0);
          FeedParams p = http->feed;
          p.page = cursor_page(cursor);
          json posts = json::array();
          for (const auto& c : generate_feed(p)) posts.push_back(to_json(c, PixelEncoding::Base64));
          reply(res, 200, {{"cursor", cursor}, {"next_cursor", page_cursor(p.page + 1)}, {"posts", posts}});
        }));

  s.Post("/prefs/next", guarded(key, [&prefs](const httplib::Request& req, httplib::Response& res) {
           std::optional<Filter> filter;
           if (!req.body.empty()) {
             const json body = parse_json(req.body);
             if (body.is_object() && body.contains("filter")) filter = filter_from_json(body.at("filter"));
           }
           reply(res, 200, to_json(prefs.next(filter)));
         }));

  s.Post("/prefs/choice", guarded(key, [&prefs](const httplib::Request& req, httplib::Response& res) {
           const json body = parse_json(req.body);
           if (!body.is_object()) throw ParseError("choice must be a JSON object");
           if (!body.contains("pair_id") || !body.at("pair_id").is_string())
             throw ValidationError("pair_id", "expected a string");
           const std::string chosen = body.value("chosen", std::string());
           if (chosen != "left" && chosen != "right") throw ValidationError("chosen", "expected left or right");
           const auto status = prefs.choose(body.at("pair_id").get<std::string>(), chosen == "left",
                                            body.value("modality", std::string()), body.value("rationale", std::string()));
           switch (status) {
             case ChoiceStatus::Recorded: return reply(res, 200, {{"recorded", true}});
             case ChoiceStatus::UnknownPair: return reply(res, 404, error_body("NotFound", "unknown pair_id"));
             case ChoiceStatus::Duplicate:
               return reply(res, 409, error_body("Conflict", "a choice was already recorded for this pair"));
           }
         }));

  impl_->server.set_payload_max_length(256 * 1024 * 1024);
  host_ = http->host;
  requested_port_ = http->port;
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::start() {
  auto& s = impl_->server;
  if (requested_port_ == 0) {
    port_ = s.bind_to_any_port(host_);
  } else {
    port_ = s.bind_to_port(host_, requested_port_) ? requested_port_ : -1;
  }
  if (port_ <= 0) throw ConfigError("cannot bind " + host_ + ":" + std::to_string(requested_port_));
  impl_->thread = std::thread([&s] { s.listen_after_bind(); });
  s.wait_until_ready();
  return port_;
}

void HttpServer::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace modpipe
