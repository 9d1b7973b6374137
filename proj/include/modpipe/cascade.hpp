#pragma once

// Two-stage intervention selection: one pruning call ranks the palette, the
// top K candidates are generated and scored concurrently, the best total wins.

#include <atomic>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "modpipe/core.hpp"
#include "modpipe/judge.hpp"
#include "modpipe/palette.hpp"

namespace modpipe {

class AllCandidatesFailed : public Error {
 public:
  explicit AllCandidatesFailed(const std::string& m) : Error("AllCandidatesFailed", m) {}
};

/// Model calls per pipeline operation. The six table counters follow the
/// batch cost model; local_transform counts the subset of image_generate that
/// ran in-process, so external generator calls = image_generate - local_transform.
struct CallAccount {
  std::uint64_t text_match = 0;
  std::uint64_t text_select = 0;
  std::uint64_t text_apply = 0;
  std::uint64_t image_match = 0;
  std::uint64_t image_generate = 0;
  std::uint64_t image_score = 0;
  std::uint64_t local_transform = 0;
  std::uint64_t generation_failures = 0;

  std::uint64_t total() const {
    return text_match + text_select + text_apply + image_match + image_generate + image_score;
  }
  CallAccount& operator+=(const CallAccount& o);
  bool operator==(const CallAccount&) const = default;
};

json to_json(const CallAccount& c);

class CountingGenerator final : public Generator {
 public:
  explicit CountingGenerator(const Generator& inner) : inner_(inner) {}
  ImageBuffer generate(const GenerationRequest& request) const override;
  mutable std::atomic<std::uint64_t> calls{0};

 private:
  const Generator& inner_;
};

class CountingTransformer final : public Transformer {
 public:
  explicit CountingTransformer(const Transformer& inner) : inner_(inner) {}
  TextInstruction transform(const TextRequest& request) const override;
  mutable std::atomic<std::uint64_t> calls{0};

 private:
  const Transformer& inner_;
};

/// Alternate Stage-1 ranking (e.g. a learned selector). Runs locally and makes
/// no judge call.
using Stage1Ranker = std::function<std::vector<RankedKind>(const ContentItem&, const UserContext&,
                                                           std::span<const InterventionKind>)>;

struct CascadeConfig {
  std::size_t k = 3;
  std::vector<InterventionKind> palette = all_kinds();
  JudgeBackend* judge = nullptr;
  const Generator* generator = nullptr;
  const Transformer* transformer = nullptr;
  LocalParams local;
  StyleScope style_scope = StyleScope::Region;
  Rubric rubric = Rubric::Deployment4Dim;
  Stage1Ranker stage1;          // empty: use the judge's pruner
  std::ostream* log = nullptr;  // JSON lines when set
};

struct Candidate {
  InterventionKind kind;  // kind actually rendered (Occlusion after a fallback)
  InterventionKind requested;
  JudgeVerdict verdict;
  bool degraded = false;
};

struct SelectionResult {
  TransformResult winner;
  InterventionKind winner_kind = InterventionKind::Occlusion;
  std::vector<Candidate> candidates;  // in Stage-1 rank order
  std::size_t pruned_from = 0;
  std::size_t k = 0;
  CallAccount calls;
  std::vector<std::string> events;
};

/// Runs both stages for one post. `target` picks the modality to transform;
/// `ranking` reuses a Stage-1 ranking already produced by the fused image
/// matching call. Text targets take one select_text call and one transform,
/// without scoring.
SelectionResult select_intervention(const ContentItem& content, const UserContext& user, const CascadeConfig& config,
                                    Modality target = Modality::Image,
                                    std::optional<std::vector<RankedKind>> ranking = std::nullopt);

/// Renders one candidate: locally for obfuscation kinds, through the
/// generator or transformer otherwise.
TransformResult render_candidate(const ContentItem& content, InterventionKind kind, const Filter& filter,
                                 const CascadeConfig& config);

struct FilterMatch {
  std::size_t filter_index = 0;
  Modality modality = Modality::Text;  // Text or Image
  std::vector<Span> spans;
  std::vector<NormRect> regions;
};

struct MatchFailure {
  Modality modality = Modality::Text;
  std::string reason;
  bool fail_closed = false;  // a filter at or above the threshold covers this modality
};

struct MatchReport {
  std::vector<FilterMatch> matches;
  std::vector<MatchFailure> failures;
  std::optional<ImageAssessment> assessment;
  CallAccount calls;
};

/// One text call and one image call per post at most; ads are never examined.
/// Backend errors are recorded per modality instead of propagating.
MatchReport match_filters(const ContentItem& content, std::span<const Filter> filters, JudgeBackend& judge,
                          std::span<const InterventionKind> image_palette = {}, int fail_closed_threshold = 4);

}  // namespace modpipe
