#include "modpipe/judge.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include <httplib.h>

#include "modpipe/encoding.hpp"

namespace modpipe {

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

using K = InterventionKind;

template <typename T>
void set(std::array<T, kKindCount>& a, std::initializer_list<K> kinds, T v) {
  for (K k : kinds) a[index_of(k)] = v;
}

constexpr std::initializer_list<K> kStyles = {K::StyleCubism, K::StyleGhibli, K::StyleImpressionism,
                                              K::StylePointillism};

}  // namespace

UserContext make_user_context(const Filter& filter, std::vector<std::string> history) {
  validate(filter);
  return UserContext{filter, filter.sensitivity, std::move(history)};
}

void validate(const UtilityWeights& w) {
  for (double v : {w.w_goal, w.w_coh, w.w_fact})
    if (!(std::isfinite(v) && v >= 0.0)) throw ValidationError("weights", "must be non-negative");
  if (w.w_goal <= 0.0 && w.w_coh <= 0.0 && w.w_fact <= 0.0)
    throw ValidationError("weights", "at least one weight must be positive");
}

double utility(const ScoreVector& s, const UtilityWeights& w) {
  if (s.rubric != Rubric::Training3Dim) throw RubricMismatch("utility needs the three-dimension training rubric");
  return w.w_goal * s.goal_alignment.value() + w.w_coh * s.coherence.value() +
         w.w_fact * s.factual_integrity.value();
}

double verdict_total(const ScoreVector& s) {
  double total = 0.0;
  for (const auto& v : {s.goal_alignment, s.coherence, s.factual_integrity, s.emotional_impact})
    if (v) total += *v;
  if (s.appropriateness_penalty) total -= *s.appropriateness_penalty;
  return total;
}

void sort_ranking(std::vector<RankedKind>& ranking) {
  std::stable_sort(ranking.begin(), ranking.end(), [](const RankedKind& a, const RankedKind& b) {
    if (a.predicted_total != b.predicted_total) return a.predicted_total > b.predicted_total;
    return index_of(a.kind) < index_of(b.kind);
  });
}

// ---------------------------------------------------------------------------
// Simulated judge

SimJudgeTables SimJudgeTables::defaults() {
  SimJudgeTables t;
  // How much of the trigger survives the transformation.
  set(t.residual_fidelity, {K::Occlusion, K::WarningOverlay, K::TextOverlay}, 0.0);
  set(t.residual_fidelity, {K::Inpainting, K::Replacement}, 0.05);
  set(t.residual_fidelity, kStyles, 0.3);
  set(t.residual_fidelity, {K::Shrink}, 0.4);
  set(t.residual_fidelity, {K::Blur, K::TextBlur}, 0.5);
  set(t.residual_fidelity, {K::TextRewrite}, 0.1);
  // Perceptual smoothness / textual coherence.
  set(t.smoothness, {K::Inpainting}, 0.95);
  set(t.smoothness, kStyles, 0.85);
  set(t.smoothness, {K::Blur, K::TextBlur}, 0.6);
  set(t.smoothness, {K::Shrink}, 0.7);
  set(t.smoothness, {K::Occlusion}, 0.3);
  set(t.smoothness, {K::WarningOverlay, K::TextOverlay}, 0.5);
  set(t.smoothness, {K::Replacement}, 0.8);
  set(t.smoothness, {K::TextRewrite}, 0.9);
  // Semantic alteration; factual integrity is 1 - alteration.
  set(t.alteration, {K::Occlusion, K::Blur, K::WarningOverlay, K::TextBlur, K::TextOverlay}, 0.0);
  set(t.alteration, kStyles, 0.2);
  set(t.alteration, {K::Shrink}, 0.3);
  set(t.alteration, {K::Inpainting}, 0.5);
  set(t.alteration, {K::Replacement, K::TextRewrite}, 0.6);
  t.appropriateness_penalty = 0.5;
  t.gravity_labels = {"war", "racial violence", "violence", "genocide", "funeral", "terrorism", "death"};
  return t;
}

json to_json(const SimJudgeTables& t) {
  auto table = [](const std::array<double, kKindCount>& a) {
    json j = json::object();
    for (std::size_t i = 0; i < kKindCount; ++i) j[std::string(to_string(kind_from_index(i)))] = a[i];
    return j;
  };
  return json{{"residual_fidelity", table(t.residual_fidelity)},
              {"smoothness", table(t.smoothness)},
              {"alteration", table(t.alteration)},
              {"appropriateness_penalty", t.appropriateness_penalty},
              {"gravity_labels", t.gravity_labels}};
}

SimJudgeTables sim_tables_from_json(const json& j) {
  SimJudgeTables t = SimJudgeTables::defaults();
  auto table = [&](const char* name, std::array<double, kKindCount>& a) {
    if (!j.contains(name)) return;
    for (const auto& [key, value] : j[name].items()) {
      if (!value.is_number()) throw ValidationError(name, "table values must be numbers");
      const double v = value.get<double>();
      if (!(v >= 0.0 && v <= 1.0)) throw ValidationError(name, "table values must be within [0,1]");
      a[index_of(kind_from_string(key))] = v;
    }
  };
  table("residual_fidelity", t.residual_fidelity);
  table("smoothness", t.smoothness);
  table("alteration", t.alteration);
  if (j.contains("appropriateness_penalty")) t.appropriateness_penalty = j["appropriateness_penalty"].get<double>();
  if (j.contains("gravity_labels")) t.gravity_labels = j["gravity_labels"].get<std::vector<std::string>>();
  return t;
}

double trigger_severity(const ContentItem& content, const Filter& filter) {
  double matched = -1.0, any = 0.0;
  for (const auto& a : content.annotations) {
    any = std::max(any, a.severity);
    if (annotation_matches(a, filter)) matched = std::max(matched, a.severity);
  }
  return matched >= 0.0 ? matched : any;
}

SimulatedJudge::SimulatedJudge(SimJudgeTables tables) : tables_(std::move(tables)) {}

bool SimulatedJudge::gravity(std::span<const TriggerAnnotation> annotations) const {
  for (const auto& a : annotations)
    for (const auto& g : tables_.gravity_labels)
      if (lower(a.label) == lower(g)) return true;
  return false;
}

ScoreVector SimulatedJudge::deployment_scores(InterventionKind kind, double severity, int sensitivity,
                                              std::span<const TriggerAnnotation> annotations) const {
  const std::size_t i = index_of(kind);
  const double r = tables_.residual_fidelity[i];
  const double emotional = clamp01(1.0 - r * severity * (0.5 + 0.1 * sensitivity));
  const double penalty = (is_style_kind(kind) && gravity(annotations)) ? tables_.appropriateness_penalty : 0.0;
  return ScoreVector::deployment(tables_.smoothness[i], 1.0 - tables_.alteration[i], emotional, penalty);
}

ScoreVector SimulatedJudge::training_scores(InterventionKind kind, double severity) const {
  const std::size_t i = index_of(kind);
  const double goal = clamp01(1.0 - tables_.residual_fidelity[i] * severity);
  return ScoreVector::training(goal, tables_.smoothness[i], 1.0 - tables_.alteration[i]);
}

std::vector<RankedKind> SimulatedJudge::rank(const ContentItem& content, const UserContext& user,
                                             std::span<const InterventionKind> palette) const {
  const double severity = trigger_severity(content, user.filter);
  std::vector<RankedKind> out;
  for (auto kind : palette)
    out.push_back({kind, verdict_total(deployment_scores(kind, severity, user.sensitivity, content.annotations))});
  sort_ranking(out);
  return out;
}

std::vector<TextMatch> SimulatedJudge::match_text(const ContentItem& content, std::span<const Filter> filters) {
  std::vector<TextMatch> out;
  if (!content.text) return out;
  for (std::size_t i = 0; i < filters.size(); ++i) {
    if (!covers_text(filters[i].modality)) continue;
    auto spans = trigger_spans(*content.text, content.annotations, filters[i]);
    if (!spans.empty()) out.push_back({i, std::move(spans)});
  }
  return out;
}

ImageAssessment SimulatedJudge::assess_image(const ContentItem& content, std::span<const UserContext> users,
                                             std::span<const InterventionKind> palette) {
  ImageAssessment out;
  if (content.image) {
    for (std::size_t i = 0; i < users.size(); ++i) {
      if (!covers_image(users[i].filter.modality)) continue;
      ImageMatch m{i, {}};
      for (const auto& a : content.annotations)
        if (annotation_matches(a, users[i].filter)) m.regions.push_back(a.region);
      if (!m.regions.empty()) out.matches.push_back(std::move(m));
    }
  }
  if (!out.matches.empty()) {
    out.primary = out.matches.front().filter_index;
    for (const auto& m : out.matches)
      if (users[m.filter_index].sensitivity > users[out.primary].sensitivity) out.primary = m.filter_index;
  }
  if (!users.empty()) out.ranking = rank(content, users[out.primary], palette);
  return out;
}

InterventionKind SimulatedJudge::select_text(const ContentItem& content, const UserContext& user,
                                             std::span<const InterventionKind> palette) {
  auto ranking = rank(content, user, palette);
  if (ranking.empty()) throw EmptyPalette("no text interventions to select from");
  return ranking.front().kind;
}

std::string SimulatedJudge::analyze(const ScoringRequest& req) {
  const std::size_t i = index_of(req.result.kind);
  const double severity = trigger_severity(req.original, req.user.filter);
  json trace{{"kind", to_string(req.result.kind)},
             {"rubric", to_string(req.rubric)},
             {"severity", severity},
             {"sensitivity", req.user.sensitivity},
             {"residual_fidelity", tables_.residual_fidelity[i]},
             {"smoothness", tables_.smoothness[i]},
             {"alteration", tables_.alteration[i]},
             {"gravity", is_style_kind(req.result.kind) && gravity(req.original.annotations)}};
  return trace.dump();
}

ScoreVector SimulatedJudge::score(const ScoringRequest& req, const std::string& analysis) {
  json trace;
  try {
    trace = json::parse(analysis);
  } catch (const json::parse_error&) {
    throw MalformedVerdict("simulated judge received an analysis it did not produce");
  }
  const K kind = kind_from_string(trace.at("kind").get<std::string>());
  if (kind != req.result.kind) throw MalformedVerdict("analysis refers to a different candidate");
  const double severity = trace.at("severity").get<double>();
  if (req.rubric == Rubric::Training3Dim) return training_scores(kind, severity);
  return deployment_scores(kind, severity, trace.at("sensitivity").get<int>(), req.original.annotations);
}

ScoreVector SimulatedJudge::rubric(const ContextVector& context, InterventionKind kind) {
  return training_scores(kind, context.sal() * context.scale());
}

// ---------------------------------------------------------------------------
// Counting wrapper

std::vector<TextMatch> CountingJudge::match_text(const ContentItem& c, std::span<const Filter> f) {
  ++match_text_calls;
  return inner_.match_text(c, f);
}

ImageAssessment CountingJudge::assess_image(const ContentItem& c, std::span<const UserContext> u,
                                            std::span<const InterventionKind> p) {
  ++assess_image_calls;
  return inner_.assess_image(c, u, p);
}

InterventionKind CountingJudge::select_text(const ContentItem& c, const UserContext& u,
                                            std::span<const InterventionKind> p) {
  ++select_text_calls;
  return inner_.select_text(c, u, p);
}

std::string CountingJudge::analyze(const ScoringRequest& r) {
  ++analyze_calls;
  return inner_.analyze(r);
}

ScoreVector CountingJudge::score(const ScoringRequest& r, const std::string& a) {
  ++score_calls;
  return inner_.score(r, a);
}

ScoreVector CountingJudge::rubric(const ContextVector& c, InterventionKind k) {
  ++rubric_calls;
  return inner_.rubric(c, k);
}

std::uint64_t CountingJudge::total() const {
  return match_text_calls + assess_image_calls + select_text_calls + analyze_calls + score_calls + rubric_calls;
}

void CountingJudge::reset() {
  match_text_calls = 0;
  assess_image_calls = 0;
  select_text_calls = 0;
  analyze_calls = 0;
  score_calls = 0;
  rubric_calls = 0;
}

// ---------------------------------------------------------------------------
// HTTP judge

json to_json(const UserContext& u) {
  return json{{"filter", to_json(u.filter)}, {"sensitivity", u.sensitivity}, {"history", u.history}};
}

HttpJudge::HttpJudge(std::string base_url, std::chrono::milliseconds timeout, std::string model)
    : timeout_(timeout), model_(std::move(model)) {
  const auto scheme = base_url.find("://");
  const auto path_start = base_url.find('/', scheme == std::string::npos ? 0 : scheme + 3);
  host_ = base_url.substr(0, path_start);
  prefix_ = path_start == std::string::npos ? "" : base_url.substr(path_start);
  while (!prefix_.empty() && prefix_.back() == '/') prefix_.pop_back();
}

json HttpJudge::post(const std::string& endpoint, const json& body) const {
  json payload = body;
  if (!model_.empty()) payload["model"] = model_;
  const std::string text = payload.dump();
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(timeout_);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(timeout_ - secs);
  for (int attempt = 0; attempt < 2; ++attempt) {
    httplib::Client client(host_);
    client.set_connection_timeout(secs.count(), usecs.count());
    client.set_read_timeout(secs.count(), usecs.count());
    auto res = client.Post(prefix_ + "/" + endpoint, text, "application/json");
    if (!res) {
      const auto err = res.error();
      if (attempt == 0 && (err == httplib::Error::Read || err == httplib::Error::ConnectionTimeout ||
                           err == httplib::Error::Connection))
        continue;
      throw BackendError("judge " + endpoint + " failed: " + httplib::to_string(err));
    }
    if (res->status != 200) throw BackendError("judge " + endpoint + " returned HTTP " + std::to_string(res->status));
    try {
      return json::parse(res->body);
    } catch (const json::parse_error&) {
      throw MalformedVerdict("judge " + endpoint + " returned invalid JSON");
    }
  }
  throw BackendError("judge " + endpoint + " timed out twice");
}

json HttpJudge::request_body(const ScoringRequest& req) const {
  return json{{"original", to_json(req.original, PixelEncoding::Base64)},
              {"result", to_json(req.result, PixelEncoding::Base64)},
              {"context", to_json(req.user)},
              {"rubric", to_string(req.rubric)}};
}

std::vector<TextMatch> HttpJudge::match_text(const ContentItem& content, std::span<const Filter> filters) {
  json fs = json::array();
  for (const auto& f : filters) fs.push_back(to_json(f));
  const json reply = post("match_text", {{"content", to_json(content, PixelEncoding::Base64)}, {"filters", fs}});
  std::vector<TextMatch> out;
  try {
    for (const auto& m : reply.at("matches")) {
      TextMatch t{m.at("filter_index").get<std::size_t>(), {}};
      if (t.filter_index >= filters.size()) throw MalformedVerdict("filter_index out of range");
      for (const auto& s : m.at("spans")) t.spans.push_back({s.at(0).get<std::size_t>(), s.at(1).get<std::size_t>()});
      validate_spans(t.spans, content.text ? content.text->size() : 0);
      out.push_back(std::move(t));
    }
  } catch (const json::exception& e) {
    throw MalformedVerdict(std::string("match_text reply: ") + e.what());
  } catch (const ValidationError& e) {
    throw MalformedVerdict(std::string("match_text reply: ") + e.what());
  }
  return out;
}

ImageAssessment HttpJudge::assess_image(const ContentItem& content, std::span<const UserContext> users,
                                        std::span<const InterventionKind> palette) {
  json us = json::array();
  for (const auto& u : users) us.push_back(to_json(u));
  json pal = json::array();
  for (auto k : palette) pal.push_back(to_string(k));
  const json reply =
      post("assess_image", {{"content", to_json(content, PixelEncoding::Base64)}, {"users", us}, {"palette", pal}});
  ImageAssessment out;
  try {
    for (const auto& m : reply.at("matches")) {
      ImageMatch im{m.at("filter_index").get<std::size_t>(), {}};
      if (im.filter_index >= users.size()) throw MalformedVerdict("filter_index out of range");
      for (const auto& r : m.at("regions")) {
        NormRect nr{r.at(0).get<double>(), r.at(1).get<double>(), r.at(2).get<double>(), r.at(3).get<double>()};
        validate(nr);
        im.regions.push_back(nr);
      }
      out.matches.push_back(std::move(im));
    }
    out.primary = reply.value("primary", std::size_t{0});
    for (const auto& r : reply.at("ranking"))
      out.ranking.push_back({kind_from_string(r.at("kind").get<std::string>()), r.at("score").get<double>()});
  } catch (const json::exception& e) {
    throw MalformedVerdict(std::string("assess_image reply: ") + e.what());
  } catch (const ValidationError& e) {
    throw MalformedVerdict(std::string("assess_image reply: ") + e.what());
  }
  sort_ranking(out.ranking);
  return out;
}

InterventionKind HttpJudge::select_text(const ContentItem& content, const UserContext& user,
                                        std::span<const InterventionKind> palette) {
  json pal = json::array();
  for (auto k : palette) pal.push_back(to_string(k));
  const json reply = post("select_text", {{"content", to_json(content, PixelEncoding::Base64)},
                                          {"context", to_json(user)},
                                          {"palette", pal}});
  try {
    const K kind = kind_from_string(reply.at("kind").get<std::string>());
    if (std::find(palette.begin(), palette.end(), kind) == palette.end())
      throw MalformedVerdict("selected kind is not in the palette");
    return kind;
  } catch (const json::exception& e) {
    throw MalformedVerdict(std::string("select_text reply: ") + e.what());
  } catch (const ValidationError& e) {
    throw MalformedVerdict(std::string("select_text reply: ") + e.what());
  }
}

std::string HttpJudge::analyze(const ScoringRequest& req) {
  const json reply = post("analyze", request_body(req));
  if (!reply.contains("analysis") || !reply["analysis"].is_string())
    throw MalformedVerdict("analyze reply lacks an analysis string");
  return reply["analysis"].get<std::string>();
}

ScoreVector HttpJudge::score(const ScoringRequest& req, const std::string& analysis) {
  json body = request_body(req);
  body["analysis"] = analysis;
  const json reply = post("score", body);
  try {
    json scores = reply.at("scores");
    scores["rubric"] = to_string(req.rubric);
    return scores_from_json(scores);
  } catch (const json::exception& e) {
    throw MalformedVerdict(std::string("score reply: ") + e.what());
  } catch (const ValidationError& e) {
    throw MalformedVerdict(std::string("score reply: ") + e.what());
  }
}

ScoreVector HttpJudge::rubric(const ContextVector& context, InterventionKind kind) {
  const json reply = post("rubric", {{"context", to_json(context)}, {"kind", to_string(kind)}});
  try {
    json scores = reply.at("scores");
    scores["rubric"] = to_string(Rubric::Training3Dim);
    return scores_from_json(scores);
  } catch (const json::exception& e) {
    throw MalformedVerdict(std::string("rubric reply: ") + e.what());
  } catch (const ValidationError& e) {
    throw MalformedVerdict(std::string("rubric reply: ") + e.what());
  }
}

// ---------------------------------------------------------------------------

JudgeVerdict score(const ContentItem& original, const TransformResult& result, const UserContext& user,
                   Rubric rubric, JudgeBackend& backend) {
  const bool text_result = result.text_instruction.has_value();
  if (text_result ? !original.text : !original.image)
    throw UnsupportedKind(std::string(to_string(result.kind)) + " does not apply to this content");
  const ScoringRequest req{original, result, user, rubric};
  JudgeVerdict v;
  v.analysis = backend.analyze(req);
  v.scores = backend.score(req, v.analysis);
  if (v.scores.rubric != rubric) throw MalformedVerdict("verdict uses a different rubric");
  try {
    validate(v.scores);
  } catch (const ValidationError& e) {
    throw MalformedVerdict(e.what());
  }
  v.total = verdict_total(v.scores);
  return v;
}

std::vector<InterventionKind> prune(const ContentItem& content, std::span<const InterventionKind> palette,
                                    const UserContext& user, JudgeBackend& backend, std::size_t k) {
  std::vector<InterventionKind> usable;
  for (auto kind : palette) {
    const bool ok = is_image_kind(kind) ? (content.image && covers_image(user.filter.modality))
                                        : (content.text && covers_text(user.filter.modality));
    if (ok) usable.push_back(kind);
  }
  if (usable.empty()) throw EmptyPalette("no palette entry applies to this content and filter");
  if (k < 1 || k > usable.size()) throw ValidationError("k", "must be within 1..|palette|");
  const UserContext users[] = {user};
  ImageAssessment a = backend.assess_image(content, users, usable);
  if (a.ranking.size() < k) throw MalformedVerdict("pruner ranked fewer kinds than requested");
  std::vector<InterventionKind> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(a.ranking[i].kind);
  return out;
}

ScoreVector rubric_judge(const ContextVector& context, InterventionKind kind, JudgeBackend& backend) {
  ScoreVector s = backend.rubric(context, kind);
  if (s.rubric != Rubric::Training3Dim) throw RubricMismatch("rubric judge must answer with the training rubric");
  return s;
}

}  // namespace modpipe
