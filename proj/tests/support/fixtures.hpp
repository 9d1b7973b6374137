#pragma once

// Shared builders and stand-in backends for the test binaries.

#include <atomic>
#include <chrono>
#include <filesystem>
#include <string>
#include <vector>

#include "modpipe/cascade.hpp"
#include "modpipe/core.hpp"
#include "modpipe/costmodel.hpp"
#include "modpipe/feed.hpp"
#include "modpipe/judge.hpp"
#include "modpipe/palette.hpp"

namespace fixtures {

using namespace modpipe;

Filter make_filter(const std::string& description = "graphic violence and blood", int sensitivity = 3,
                   Modality modality = Modality::Both, const std::string& id = "f1");

/// A post with one annotation over `region`. Text mentions the label when
/// `with_text`.
ContentItem annotated_post(const std::string& id, int position, const std::string& label, double severity,
                           double salience, bool with_text = true, bool with_image = true,
                           NormRect region = {0.25, 0.25, 0.75, 0.75}, int size = 16);

/// N posts whose text and image both match the default feed filter.
std::vector<ContentItem> matching_batch(std::size_t n, std::uint64_t seed = 1);

/// Independent FNV-1a-64 written from the published definition.
std::uint64_t reference_fnv1a64(const std::string& bytes);

/// Sleeps before delegating to MockGenerator.
class SlowGenerator final : public Generator {
 public:
  explicit SlowGenerator(std::chrono::milliseconds delay) : delay_(delay) {}
  ImageBuffer generate(const GenerationRequest& request) const override;

 private:
  std::chrono::milliseconds delay_;
  MockGenerator inner_;
};

class FailingGenerator final : public Generator {
 public:
  ImageBuffer generate(const GenerationRequest& request) const override;
  mutable std::atomic<int> calls{0};
};

/// Forwards to SimulatedJudge, sleeping `scale` times the midpoint latency of
/// each operation first, and optionally failing selected methods.
class ScriptedJudge final : public JudgeBackend {
 public:
  explicit ScriptedJudge(double latency_scale = 0.0, LatencyTable table = {});

  bool fail_match_text = false;
  bool fail_assess_image = false;
  bool fail_score = false;

  std::vector<TextMatch> match_text(const ContentItem& content, std::span<const Filter> filters) override;
  ImageAssessment assess_image(const ContentItem& content, std::span<const UserContext> users,
                               std::span<const InterventionKind> palette) override;
  InterventionKind select_text(const ContentItem& content, const UserContext& user,
                               std::span<const InterventionKind> palette) override;
  std::string analyze(const ScoringRequest& request) override;
  ScoreVector score(const ScoringRequest& request, const std::string& analysis) override;
  ScoreVector rubric(const ContextVector& context, InterventionKind kind) override;

 private:
  void pause(Op op) const;

  double scale_;
  LatencyTable table_;
  SimulatedJudge inner_;
};

/// Unique directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir();
  ~TempDir();
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace fixtures
