#pragma once

// Learned intervention policy: context featurization and a weighted
// multiclass gradient-boosted tree ensemble trained in three phases.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "modpipe/cascade.hpp"
#include "modpipe/core.hpp"
#include "modpipe/judge.hpp"

namespace modpipe {

class DegenerateDataset : public Error {
 public:
  explicit DegenerateDataset(const std::string& m) : Error("DegenerateDataset", m) {}
};

/// c_sens from the filter, c_sal and c_scale from the matching annotations
/// (all annotations when none match), c_feas the share of the palette usable
/// on the matched modality, c_mod from the filter modality. Image wins when
/// the content has an image the filter covers; otherwise text spans set
/// c_scale.
ContextVector featurize(const ContentItem& content, const Filter& filter,
                        std::span<const InterventionKind> palette = {});

enum class Provenance { Phase1, Phase2, Phase3 };

std::string_view to_string(Provenance p);
Provenance provenance_from_string(std::string_view s);

struct TrainParams {
  int n_rounds = 100;
  int max_depth = 3;
  double learning_rate = 0.1;
  double min_child_weight = 1.0;
  double lambda_l2 = 1.0;
  std::uint64_t seed = 0;
};

void validate(const TrainParams& p);
json to_json(const TrainParams& p);
TrainParams train_params_from_json(const json& j);

/// Flat regression tree. Node 0 is the root; a node is a leaf when feature < 0.
/// Samples with x[feature] < threshold go left.
struct TreeNode {
  int feature = -1;
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double value = 0.0;  // leaf contribution, learning rate already applied

  bool operator==(const TreeNode&) const = default;
};

struct Tree {
  std::vector<TreeNode> nodes;
  double eval(const ContextVector& c) const;
  bool operator==(const Tree&) const = default;
};

class SelectorModel {
 public:
  static constexpr int kFormatVersion = 1;

  int n_classes = static_cast<int>(kKindCount);
  double learning_rate = 0.1;
  std::vector<double> base_score = std::vector<double>(kKindCount, 0.0);
  std::vector<std::vector<Tree>> rounds;  // rounds[r][class]
  Provenance provenance = Provenance::Phase1;
  std::vector<std::string> flags;
  TrainParams params;
  std::vector<double> training_loss;  // mean weighted log-loss, initial then per round

  std::vector<double> raw_scores(const ContextVector& c) const;
  bool has_flag(std::string_view f) const;
  /// Same base scores and trees.
  bool same_ensemble(const SelectorModel& o) const;
};

json to_json(const SelectorModel& m);
SelectorModel selector_from_json(const json& j);

struct Prediction {
  std::vector<double> probabilities;  // indexed by kind index
  InterventionKind kind;
};

Prediction predict(const SelectorModel& model, const ContextVector& context);

std::vector<double> softmax(std::span<const double> raw);

/// Sum over samples of w * -log softmax(raw)[label].
double weighted_log_loss(std::span<const std::vector<double>> raw, std::span<const int> labels,
                         std::span<const double> weights);

struct GradHess {
  std::vector<double> grad;  // w (p - y)
  std::vector<double> hess;  // w p (1 - p)
};

GradHess loss_derivatives(std::span<const double> raw, int label, double weight);

SelectorModel train_phase1(std::span<const LabeledContext> d_sft, const TrainParams& params = {});
SelectorModel train_phase2(std::span<const WeightedExample> d2, const TrainParams& params = {});
/// Warm start: keeps every tree of `model2` and appends params.n_rounds rounds.
SelectorModel train_phase3(const SelectorModel& model2, std::span<const PreferencePair> d_hp,
                           const TrainParams& params = {});

/// Phase 2 from pairs, falling back to phase-1 training on `d_sft` (flagged)
/// when there are no pairs.
SelectorModel train_phase2_from_pairs(std::span<const LabeledContext> d_sft, std::span<const PreferencePair> pairs,
                                      const TrainParams& params = {});

/// Winner weight 1, loser max(0.1, 1 - margin).
std::vector<WeightedExample> build_phase2_dataset(std::span<const PreferencePair> pairs);
/// Chosen weight 1, rejected 0.1.
std::vector<WeightedExample> build_phase3_dataset(std::span<const PreferencePair> d_hp);

double loser_weight(double margin);

/// Backend failure during pair generation; `partial` holds the pairs emitted
/// before it.
class PairGenerationFailed : public Error {
 public:
  PairGenerationFailed(const std::string& m, std::vector<PreferencePair> partial)
      : Error("BackendError", m), partial(std::move(partial)) {}
  std::vector<PreferencePair> partial;
};

/// Automated preference pairs. For each labeled context, every other palette
/// kind is compared on utility; pairs with |dU| <= epsilon are skipped.
std::vector<PreferencePair> generate_preference_pairs(std::span<const LabeledContext> d_sft,
                                                      std::span<const InterventionKind> palette,
                                                      JudgeBackend& judge, const UtilityWeights& weights = {},
                                                      double epsilon = 0.05);

/// Stage-1 hook ranking the palette by selector probability.
Stage1Ranker selector_ranker(const SelectorModel& model);

}  // namespace modpipe
