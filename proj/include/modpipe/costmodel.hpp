#pragma once

// Closed-form call accounting for a batch, a discrete-event latency model of
// the pipeline, and the intercept-only logistic fit used for alignment.

#include <array>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "modpipe/core.hpp"

namespace modpipe {

struct WorkloadParams {
  std::uint64_t N = 0;    // posts
  std::uint64_t N_t = 0;  // posts with text
  std::uint64_t N_p = 0;  // posts with images
  std::uint64_t M_t = 0;  // text matches
  std::uint64_t M_p = 0;  // image matches
  std::uint64_t K = 3;
};

void validate(const WorkloadParams& w);
json to_json(const WorkloadParams& w);
WorkloadParams workload_from_json(const json& j);

/// "worst_case" (25 posts, everything matches), "no_matches", "typical".
WorkloadParams workload_preset(std::string_view name);

struct CallCounts {
  std::uint64_t T_text = 0;
  std::uint64_t T_image = 0;
  std::uint64_t T_total = 0;
};

CallCounts call_counts(const WorkloadParams& w);
json to_json(const CallCounts& c);

/// Share of stage-2 generate+score volume removed by keeping K of P kinds.
double pruning_savings(std::size_t palette_size, std::size_t k);

enum class Op { TextMatch, TextSelect, TextApply, ImageMatch, ImageGenerate, ImageScore };
inline constexpr std::size_t kOpCount = 6;

std::string_view to_string(Op op);

struct LatencyRange {
  double min_s = 0.0;
  double max_s = 0.0;
};

struct LatencyTable {
  std::array<LatencyRange, kOpCount> ops{{{0.5, 1.0}, {1.0, 2.0}, {1.0, 2.0}, {2.0, 5.0}, {3.0, 10.0}, {2.0, 5.0}}};

  const LatencyRange& operator[](Op op) const { return ops[static_cast<std::size_t>(op)]; }
  LatencyRange& operator[](Op op) { return ops[static_cast<std::size_t>(op)]; }
};

void validate(const LatencyTable& t);
json to_json(const LatencyTable& t);
LatencyTable latency_table_from_json(const json& j);

enum class LatencySample { Min, Max, Mid, SeededUniform };

LatencySample latency_sample_from_string(std::string_view s);
std::string_view to_string(LatencySample s);

struct SimConfig {
  std::size_t judge_concurrency = 25;
  std::size_t worker_count = 4;
  LatencySample sample = LatencySample::Mid;
  std::uint64_t seed = 0;
};

/// Latency of the index-th call of `op`. A pure function of its arguments.
double sample_latency(const LatencyTable& t, Op op, std::uint64_t index, LatencySample mode, std::uint64_t seed);

struct TimelineEvent {
  Op op;
  std::uint64_t index = 0;
  std::size_t slot = 0;
  double start_s = 0.0;
  double end_s = 0.0;
  bool blocking = true;
};

struct LatencyReport {
  double critical_path_s = 0.0;
  double background_completion_s = 0.0;
  std::vector<TimelineEvent> timeline;
};

/// Blocking calls (text match/select/apply, image match) share one judge pool
/// of `judge_concurrency` slots in FIFO order; each text stage waits for the
/// previous one. Background generation then scoring runs on `worker_count`
/// workers once the critical path is done.
LatencyReport simulate_latency(const WorkloadParams& w, const LatencyTable& table, const SimConfig& cfg);

json to_json(const LatencyReport& r, bool with_timeline = false);
void write_timeline_csv(const LatencyReport& r, std::ostream& out);

double sigmoid(double x);
double logit(double p);

struct LogisticFit {
  double log_odds = 0.0;
  double probability = 0.0;
  std::size_t n = 0;
  std::size_t successes = 0;
  bool degenerate = false;  // all outcomes identical; log_odds is +-inf
  int iterations = 0;
};

/// Intercept-only logistic regression by Newton's method.
LogisticFit fit_intercept_logistic(std::span<const bool> outcomes);

json to_json(const LogisticFit& f);

/// Alignment summary over human preference records carrying
/// system_choice_favored and modality: overall and per modality.
json alignment_report(const json& records);

}  // namespace modpipe
