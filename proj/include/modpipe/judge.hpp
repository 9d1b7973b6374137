#pragma once

// Rubric evaluation of transformed content, the scalar utility used for
// preference generation, and the single-call predictive pruner.

#include <array>
#include <atomic>
#include <chrono>
#include <string>
#include <vector>

#include "modpipe/core.hpp"
#include "modpipe/palette.hpp"

namespace modpipe {

class RubricMismatch : public Error {
 public:
  explicit RubricMismatch(const std::string& m) : Error("RubricMismatch", m) {}
};

class BackendError : public Error {
 public:
  explicit BackendError(const std::string& m) : Error("BackendError", m) {}
};

class MalformedVerdict : public Error {
 public:
  explicit MalformedVerdict(const std::string& m) : Error("MalformedVerdict", m) {}
};

class EmptyPalette : public Error {
 public:
  explicit EmptyPalette(const std::string& m) : Error("EmptyPalette", m) {}
};

struct UserContext {
  Filter filter;
  int sensitivity = 3;
  std::vector<std::string> history;
};

UserContext make_user_context(const Filter& filter, std::vector<std::string> history = {});

struct UtilityWeights {
  double w_goal = 2.0;
  double w_coh = 1.0;
  double w_fact = 0.5;
};

void validate(const UtilityWeights& w);

/// w_goal*s_goal + w_coh*s_coh + w_fact*s_fact. Training rubric only.
double utility(const ScoreVector& scores, const UtilityWeights& weights = {});

/// Sum of populated positive dimensions minus the appropriateness penalty.
double verdict_total(const ScoreVector& scores);

struct JudgeVerdict {
  ScoreVector scores;
  std::string analysis;
  double total = 0.0;
};

struct RankedKind {
  InterventionKind kind;
  double predicted_total = 0.0;
};

struct TextMatch {
  std::size_t filter_index = 0;
  std::vector<Span> spans;
};

struct ImageMatch {
  std::size_t filter_index = 0;
  std::vector<NormRect> regions;
};

/// Result of the multi-task image call: which filters the image matches and
/// a predicted ranking of the palette for the primary user context.
struct ImageAssessment {
  std::vector<ImageMatch> matches;
  std::size_t primary = 0;
  std::vector<RankedKind> ranking;
};

struct ScoringRequest {
  const ContentItem& original;
  const TransformResult& result;
  const UserContext& user;
  Rubric rubric;
};

/// Judge backend. All calls may arrive concurrently from several workers.
/// Every method is one logical model call.
class JudgeBackend {
 public:
  virtual ~JudgeBackend() = default;

  virtual std::vector<TextMatch> match_text(const ContentItem& content, std::span<const Filter> filters) = 0;

  /// Image filter matching fused with Stage-1 prediction.
  virtual ImageAssessment assess_image(const ContentItem& content, std::span<const UserContext> users,
                                       std::span<const InterventionKind> palette) = 0;

  virtual InterventionKind select_text(const ContentItem& content, const UserContext& user,
                                       std::span<const InterventionKind> palette) = 0;

  /// Stage one of the two-stage scorer: free-form analysis.
  virtual std::string analyze(const ScoringRequest& request) = 0;
  /// Stage two: numeric scores given the stage-one analysis.
  virtual ScoreVector score(const ScoringRequest& request, const std::string& analysis) = 0;

  virtual ScoreVector rubric(const ContextVector& context, InterventionKind kind) = 0;
};

/// Constant tables driving the simulated judge, indexed by InterventionKind.
struct SimJudgeTables {
  std::array<double, kKindCount> residual_fidelity{};
  std::array<double, kKindCount> smoothness{};
  std::array<double, kKindCount> alteration{};
  double appropriateness_penalty = 0.5;
  std::vector<std::string> gravity_labels;

  static SimJudgeTables defaults();
};

json to_json(const SimJudgeTables& t);
/// Keys absent from `j` keep their default values.
SimJudgeTables sim_tables_from_json(const json& j);

/// Highest severity among annotations matching the filter; falls back to all
/// annotations when none match.
double trigger_severity(const ContentItem& content, const Filter& filter);

/// Deterministic judge computed from fixed per-kind tables and the ground
/// truth trigger annotations on the content.
class SimulatedJudge final : public JudgeBackend {
 public:
  explicit SimulatedJudge(SimJudgeTables tables = SimJudgeTables::defaults());

  const SimJudgeTables& tables() const { return tables_; }

  /// Deployment rubric scores for `kind` at the given trigger severity.
  ScoreVector deployment_scores(InterventionKind kind, double severity, int sensitivity,
                                std::span<const TriggerAnnotation> annotations) const;
  ScoreVector training_scores(InterventionKind kind, double severity) const;

  std::vector<TextMatch> match_text(const ContentItem& content, std::span<const Filter> filters) override;
  ImageAssessment assess_image(const ContentItem& content, std::span<const UserContext> users,
                               std::span<const InterventionKind> palette) override;
  InterventionKind select_text(const ContentItem& content, const UserContext& user,
                               std::span<const InterventionKind> palette) override;
  std::string analyze(const ScoringRequest& request) override;
  ScoreVector score(const ScoringRequest& request, const std::string& analysis) override;
  ScoreVector rubric(const ContextVector& context, InterventionKind kind) override;

  std::vector<RankedKind> rank(const ContentItem& content, const UserContext& user,
                               std::span<const InterventionKind> palette) const;

 private:
  bool gravity(std::span<const TriggerAnnotation> annotations) const;

  SimJudgeTables tables_;
};

/// Forwards to another backend and counts calls per method. Counters are
/// atomic so concurrent workers never lose increments.
class CountingJudge final : public JudgeBackend {
 public:
  explicit CountingJudge(JudgeBackend& inner) : inner_(inner) {}

  std::vector<TextMatch> match_text(const ContentItem& content, std::span<const Filter> filters) override;
  ImageAssessment assess_image(const ContentItem& content, std::span<const UserContext> users,
                               std::span<const InterventionKind> palette) override;
  InterventionKind select_text(const ContentItem& content, const UserContext& user,
                               std::span<const InterventionKind> palette) override;
  std::string analyze(const ScoringRequest& request) override;
  ScoreVector score(const ScoringRequest& request, const std::string& analysis) override;
  ScoreVector rubric(const ContextVector& context, InterventionKind kind) override;

  std::atomic<std::uint64_t> match_text_calls{0};
  std::atomic<std::uint64_t> assess_image_calls{0};
  std::atomic<std::uint64_t> select_text_calls{0};
  std::atomic<std::uint64_t> analyze_calls{0};
  std::atomic<std::uint64_t> score_calls{0};
  std::atomic<std::uint64_t> rubric_calls{0};

  std::uint64_t total() const;
  void reset();

 private:
  JudgeBackend& inner_;
};

/// External judge reached over HTTP. Each method POSTs JSON to
/// {base_url}/{analyze,score,match_text,assess_image,select_text,rubric}.
/// A timed-out request is retried once, then reported as BackendError.
class HttpJudge final : public JudgeBackend {
 public:
  HttpJudge(std::string base_url, std::chrono::milliseconds timeout, std::string model = {});

  std::vector<TextMatch> match_text(const ContentItem& content, std::span<const Filter> filters) override;
  ImageAssessment assess_image(const ContentItem& content, std::span<const UserContext> users,
                               std::span<const InterventionKind> palette) override;
  InterventionKind select_text(const ContentItem& content, const UserContext& user,
                               std::span<const InterventionKind> palette) override;
  std::string analyze(const ScoringRequest& request) override;
  ScoreVector score(const ScoringRequest& request, const std::string& analysis) override;
  ScoreVector rubric(const ContextVector& context, InterventionKind kind) override;

 private:
  json post(const std::string& endpoint, const json& body) const;
  json request_body(const ScoringRequest& request) const;

  std::string host_;
  std::string prefix_;
  std::chrono::milliseconds timeout_;
  std::string model_;
};

json to_json(const UserContext& u);

/// Two-stage scoring: analysis first, then scores conditioned on it.
JudgeVerdict score(const ContentItem& original, const TransformResult& result, const UserContext& user,
                   Rubric rubric, JudgeBackend& backend);

/// Top-k of the palette by predicted total using exactly one backend call.
/// Ties go to the lower kind index.
std::vector<InterventionKind> prune(const ContentItem& content, std::span<const InterventionKind> palette,
                                    const UserContext& user, JudgeBackend& backend, std::size_t k);

ScoreVector rubric_judge(const ContextVector& context, InterventionKind kind, JudgeBackend& backend);

/// Sorts descending by predicted total, ascending kind index on ties.
void sort_ranking(std::vector<RankedKind>& ranking);

}  // namespace modpipe
