#include "modpipe/selector.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

namespace modpipe {

ContextVector featurize(const ContentItem& content, const Filter& filter, std::span<const InterventionKind> palette) {
  const std::vector<InterventionKind> fallback = all_kinds();
  if (palette.empty()) palette = fallback;

  std::vector<const TriggerAnnotation*> matched;
  for (const auto& a : content.annotations)
    if (annotation_matches(a, filter)) matched.push_back(&a);
  if (matched.empty())
    for (const auto& a : content.annotations) matched.push_back(&a);

  const bool image = content.image.has_value() && covers_image(filter.modality);
  assert(image || (content.text && covers_text(filter.modality)));

  double sal = 0.0, scale = 0.0;
  for (const auto* a : matched) sal = std::max(sal, a->salience);
  if (image) {
    for (const auto* a : matched) scale = std::max(scale, a->region.area());
  } else if (content.text && !content.text->empty()) {
    std::size_t chars = 0;
    for (const auto& s : trigger_spans(*content.text, content.annotations, filter)) chars += s.end - s.start;
    scale = static_cast<double>(chars) / static_cast<double>(content.text->size());
  }

  const auto usable = kinds_for(image ? Modality::Image : Modality::Text, palette);
  const double feas = static_cast<double>(usable.size()) / static_cast<double>(palette.size());
  return ContextVector(sensitivity_component(filter.sensitivity), std::min(sal, 1.0), std::min(scale, 1.0), feas,
                       modality_component(filter.modality));
}

std::string_view to_string(Provenance p) {
  switch (p) {
    case Provenance::Phase1: return "Phase1";
    case Provenance::Phase2: return "Phase2";
    case Provenance::Phase3: return "Phase3";
  }
  return "Phase1";
}

Provenance provenance_from_string(std::string_view s) {
  if (s == "Phase1") return Provenance::Phase1;
  if (s == "Phase2") return Provenance::Phase2;
  if (s == "Phase3") return Provenance::Phase3;
  throw ValidationError("provenance", "unknown provenance '" + std::string(s) + "'");
}

void validate(const TrainParams& p) {
  if (p.n_rounds < 1) throw ValidationError("n_rounds", "must be >= 1");
  if (p.max_depth < 1) throw ValidationError("max_depth", "must be >= 1");
  if (!(p.learning_rate > 0.0 && p.learning_rate <= 1.0)) throw ValidationError("learning_rate", "must be in (0,1]");
  if (!(p.min_child_weight >= 0.0)) throw ValidationError("min_child_weight", "must be >= 0");
  if (!(p.lambda_l2 >= 0.0)) throw ValidationError("lambda_l2", "must be >= 0");
}

json to_json(const TrainParams& p) {
  return json{{"n_rounds", p.n_rounds},         {"max_depth", p.max_depth}, {"learning_rate", p.learning_rate},
              {"min_child_weight", p.min_child_weight}, {"lambda_l2", p.lambda_l2}, {"seed", p.seed}};
}

TrainParams train_params_from_json(const json& j) {
  TrainParams p;
  try {
    p.n_rounds = j.value("n_rounds", p.n_rounds);
    p.max_depth = j.value("max_depth", p.max_depth);
    p.learning_rate = j.value("learning_rate", p.learning_rate);
    p.min_child_weight = j.value("min_child_weight", p.min_child_weight);
    p.lambda_l2 = j.value("lambda_l2", p.lambda_l2);
    p.seed = j.value("seed", p.seed);
  } catch (const json::exception& e) {
    throw ParseError(std::string("train params: ") + e.what());
  }
  validate(p);
  return p;
}

// ---------------------------------------------------------------------------
// Model

double Tree::eval(const ContextVector& c) const {
  if (nodes.empty()) return 0.0;
  std::size_t i = 0;
  while (nodes[i].feature >= 0) i = static_cast<std::size_t>(c[nodes[i].feature] < nodes[i].threshold ? nodes[i].left : nodes[i].right);
  return nodes[i].value;
}

std::vector<double> SelectorModel::raw_scores(const ContextVector& c) const {
  std::vector<double> raw = base_score;
  for (const auto& round : rounds)
    for (std::size_t k = 0; k < round.size(); ++k) raw[k] += round[k].eval(c);
  return raw;
}

bool SelectorModel::has_flag(std::string_view f) const {
  return std::find(flags.begin(), flags.end(), f) != flags.end();
}

bool SelectorModel::same_ensemble(const SelectorModel& o) const {
  return n_classes == o.n_classes && base_score == o.base_score && rounds == o.rounds;
}

namespace {

json tree_to_json(const Tree& t, std::size_t i) {
  const auto& n = t.nodes[i];
  if (n.feature < 0) return json{{"leaf", n.value}};
  return json{{"feature", n.feature},
              {"threshold", n.threshold},
              {"left", tree_to_json(t, static_cast<std::size_t>(n.left))},
              {"right", tree_to_json(t, static_cast<std::size_t>(n.right))}};
}

int tree_from_json(const json& j, Tree& t) {
  const int idx = static_cast<int>(t.nodes.size());
  t.nodes.emplace_back();
  if (j.contains("leaf")) {
    t.nodes[idx].value = j.at("leaf").get<double>();
    return idx;
  }
  const int feature = j.at("feature").get<int>();
  if (feature < 0 || feature >= static_cast<int>(ContextVector::kSize))
    throw ValidationError("feature", "tree references feature " + std::to_string(feature));
  t.nodes[idx].feature = feature;
  t.nodes[idx].threshold = j.at("threshold").get<double>();
  const int l = tree_from_json(j.at("left"), t);
  const int r = tree_from_json(j.at("right"), t);
  t.nodes[idx].left = l;
  t.nodes[idx].right = r;
  return idx;
}

}  // namespace

json to_json(const SelectorModel& m) {
  json rounds = json::array();
  for (const auto& round : m.rounds) {
    json r = json::array();
    for (const auto& t : round) r.push_back(t.nodes.empty() ? json{{"leaf", 0.0}} : tree_to_json(t, 0));
    rounds.push_back(std::move(r));
  }
  json classes = json::array();
  for (int k = 0; k < m.n_classes; ++k) classes.push_back(to_string(kind_from_index(static_cast<std::size_t>(k))));
  return json{{"format", "modpipe-selector"},
              {"version", SelectorModel::kFormatVersion},
              {"n_classes", m.n_classes},
              {"classes", classes},
              {"feature_count", ContextVector::kSize},
              {"learning_rate", m.learning_rate},
              {"base_score", m.base_score},
              {"provenance", to_string(m.provenance)},
              {"flags", m.flags},
              {"params", to_json(m.params)},
              {"training_loss", m.training_loss},
              {"rounds", rounds}};
}

SelectorModel selector_from_json(const json& j) {
  SelectorModel m;
  try {
    if (j.at("format").get<std::string>() != "modpipe-selector") throw ParseError("not a selector model");
    if (j.at("version").get<int>() != SelectorModel::kFormatVersion)
      throw ParseError("unsupported selector model version " + j.at("version").dump());
    if (j.at("feature_count").get<std::size_t>() != ContextVector::kSize)
      throw ValidationError("feature_count", "must be 5");
    m.n_classes = j.at("n_classes").get<int>();
    if (m.n_classes != static_cast<int>(kKindCount)) throw ValidationError("n_classes", "must equal the palette size");
    m.learning_rate = j.at("learning_rate").get<double>();
    m.base_score = j.at("base_score").get<std::vector<double>>();
    if (m.base_score.size() != kKindCount) throw ValidationError("base_score", "one value per class expected");
    m.provenance = provenance_from_string(j.at("provenance").get<std::string>());
    m.flags = j.value("flags", std::vector<std::string>{});
    if (j.contains("params")) m.params = train_params_from_json(j.at("params"));
    m.training_loss = j.value("training_loss", std::vector<double>{});
    for (const auto& r : j.at("rounds")) {
      if (r.size() != kKindCount) throw ValidationError("rounds", "one tree per class expected");
      std::vector<Tree> round;
      for (const auto& t : r) {
        Tree tree;
        tree_from_json(t, tree);
        round.push_back(std::move(tree));
      }
      m.rounds.push_back(std::move(round));
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("selector model: ") + e.what());
  }
  return m;
}

std::vector<double> softmax(std::span<const double> raw) {
  std::vector<double> p(raw.begin(), raw.end());
  if (p.empty()) return p;
  const double mx = *std::max_element(p.begin(), p.end());
  double sum = 0.0;
  for (auto& v : p) sum += (v = std::exp(v - mx));
  for (auto& v : p) v /= sum;
  return p;
}

Prediction predict(const SelectorModel& model, const ContextVector& context) {
  Prediction out;
  out.probabilities = softmax(model.raw_scores(context));
  std::size_t best = 0;
  for (std::size_t k = 1; k < out.probabilities.size(); ++k)
    if (out.probabilities[k] > out.probabilities[best]) best = k;
  out.kind = kind_from_index(best);
  return out;
}

double weighted_log_loss(std::span<const std::vector<double>> raw, std::span<const int> labels,
                         std::span<const double> weights) {
  double total = 0.0;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const auto& r = raw[i];
    const double mx = *std::max_element(r.begin(), r.end());
    double sum = 0.0;
    for (double v : r) sum += std::exp(v - mx);
    const double log_p = r[static_cast<std::size_t>(labels[i])] - mx - std::log(sum);
    total += -weights[i] * log_p;
  }
  return total;
}

GradHess loss_derivatives(std::span<const double> raw, int label, double weight) {
  GradHess gh;
  const auto p = softmax(raw);
  gh.grad.resize(p.size());
  gh.hess.resize(p.size());
  for (std::size_t k = 0; k < p.size(); ++k) {
    const double y = static_cast<int>(k) == label ? 1.0 : 0.0;
    gh.grad[k] = weight * (p[k] - y);
    gh.hess[k] = weight * p[k] * (1.0 - p[k]);
  }
  return gh;
}

// ---------------------------------------------------------------------------
// Boosting

namespace {

struct Sample {
  ContextVector x;
  int label;
  double weight;
};

class TreeBuilder {
 public:
  TreeBuilder(const std::vector<Sample>& samples, const std::vector<double>& g, const std::vector<double>& h,
              const TrainParams& params)
      : samples_(samples), g_(g), h_(h), params_(params) {}

  Tree build() {
    std::vector<std::size_t> idx(samples_.size());
    std::iota(idx.begin(), idx.end(), 0);
    Tree t;
    grow(t, idx, 0);
    return t;
  }

 private:
  double leaf_weight(double G, double H) const { return -G / (H + params_.lambda_l2); }
  double score(double G, double H) const { return G * G / (H + params_.lambda_l2); }

  int grow(Tree& t, std::vector<std::size_t>& idx, int depth) {
    double G = 0.0, H = 0.0;
    for (auto i : idx) {
      G += g_[i];
      H += h_[i];
    }
    const int node = static_cast<int>(t.nodes.size());
    t.nodes.emplace_back();
    t.nodes[node].value = params_.learning_rate * leaf_weight(G, H);
    if (depth >= params_.max_depth || idx.size() < 2) return node;

    const double parent = score(G, H);
    double best_gain = 0.0;
    int best_feature = -1;
    double best_threshold = 0.0;
    std::vector<std::size_t> sorted = idx;
    for (int f = 0; f < static_cast<int>(ContextVector::kSize); ++f) {
      std::stable_sort(sorted.begin(), sorted.end(),
                       [&](std::size_t a, std::size_t b) { return samples_[a].x[f] < samples_[b].x[f]; });
      double GL = 0.0, HL = 0.0;
      for (std::size_t j = 0; j + 1 < sorted.size(); ++j) {
        GL += g_[sorted[j]];
        HL += h_[sorted[j]];
        const double xl = samples_[sorted[j]].x[f];
        const double xr = samples_[sorted[j + 1]].x[f];
        if (!(xl < xr)) continue;
        const double GR = G - GL, HR = H - HL;
        if (HL < params_.min_child_weight || HR < params_.min_child_weight) continue;
        const double gain = 0.5 * (score(GL, HL) + score(GR, HR) - parent);
        if (gain > best_gain) {
          best_gain = gain;
          best_feature = f;
          best_threshold = xl + (xr - xl) / 2.0;
        }
      }
    }
    if (best_feature < 0) return node;

    std::vector<std::size_t> left, right;
    for (auto i : idx) (samples_[i].x[best_feature] < best_threshold ? left : right).push_back(i);
    idx.clear();
    idx.shrink_to_fit();
    t.nodes[node].feature = best_feature;
    t.nodes[node].threshold = best_threshold;
    t.nodes[node].value = 0.0;
    const int l = grow(t, left, depth + 1);
    const int r = grow(t, right, depth + 1);
    t.nodes[node].left = l;
    t.nodes[node].right = r;
    return node;
  }

  const std::vector<Sample>& samples_;
  const std::vector<double>& g_;
  const std::vector<double>& h_;
  const TrainParams& params_;
};

double mean_loss(const std::vector<Sample>& s, const std::vector<std::vector<double>>& raw) {
  std::vector<int> labels;
  std::vector<double> weights;
  double wsum = 0.0;
  for (const auto& x : s) {
    labels.push_back(x.label);
    weights.push_back(x.weight);
    wsum += x.weight;
  }
  return weighted_log_loss(raw, labels, weights) / wsum;
}

/// Appends params.n_rounds rounds to `model`, starting from its current scores.
void boost(SelectorModel& model, const std::vector<Sample>& samples, const TrainParams& params) {
  const std::size_t n = samples.size(), C = static_cast<std::size_t>(model.n_classes);
  std::vector<std::vector<double>> raw(n);
  for (std::size_t i = 0; i < n; ++i) raw[i] = model.raw_scores(samples[i].x);

  model.training_loss.clear();
  model.training_loss.push_back(mean_loss(samples, raw));
  std::vector<double> g(n), h(n);
  std::vector<std::vector<double>> p(n);
  for (int r = 0; r < params.n_rounds; ++r) {
    for (std::size_t i = 0; i < n; ++i) p[i] = softmax(raw[i]);
    std::vector<Tree> round;
    round.reserve(C);
    for (std::size_t k = 0; k < C; ++k) {
      for (std::size_t i = 0; i < n; ++i) {
        const double y = samples[i].label == static_cast<int>(k) ? 1.0 : 0.0;
        g[i] = samples[i].weight * (p[i][k] - y);
        h[i] = samples[i].weight * p[i][k] * (1.0 - p[i][k]);
      }
      round.push_back(TreeBuilder(samples, g, h, params).build());
    }
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < C; ++k) raw[i][k] += round[k].eval(samples[i].x);
    model.rounds.push_back(std::move(round));
    model.training_loss.push_back(mean_loss(samples, raw));
  }
}

SelectorModel fit(std::vector<Sample> samples, const TrainParams& params, Provenance provenance) {
  validate(params);
  if (samples.empty()) throw ValidationError("dataset", "no training examples");
  SelectorModel m;
  m.learning_rate = params.learning_rate;
  m.params = params;
  m.provenance = provenance;

  std::set<int> labels;
  for (const auto& s : samples) labels.insert(s.label);
  if (labels.size() < 2) {
    m.flags.push_back("degenerate_dataset");
    for (int k = 0; k < m.n_classes; ++k) m.base_score[static_cast<std::size_t>(k)] = k == *labels.begin() ? 0.0 : -20.0;
    return m;
  }
  boost(m, samples, params);
  return m;
}

}  // namespace

SelectorModel train_phase1(std::span<const LabeledContext> d_sft, const TrainParams& params) {
  std::vector<Sample> s;
  for (const auto& d : d_sft) s.push_back({d.context, static_cast<int>(index_of(d.label)), 1.0});
  return fit(std::move(s), params, Provenance::Phase1);
}

SelectorModel train_phase2(std::span<const WeightedExample> d2, const TrainParams& params) {
  std::vector<Sample> s;
  for (const auto& e : d2) {
    validate(e);
    s.push_back({e.context, static_cast<int>(index_of(e.label)), e.weight});
  }
  return fit(std::move(s), params, Provenance::Phase2);
}

SelectorModel train_phase2_from_pairs(std::span<const LabeledContext> d_sft, std::span<const PreferencePair> pairs,
                                      const TrainParams& params) {
  if (!pairs.empty()) return train_phase2(build_phase2_dataset(pairs), params);
  SelectorModel m = train_phase1(d_sft, params);
  m.provenance = Provenance::Phase2;
  m.flags.push_back("no_preference_pairs");
  return m;
}

SelectorModel train_phase3(const SelectorModel& model2, std::span<const PreferencePair> d_hp,
                           const TrainParams& params) {
  if (model2.provenance != Provenance::Phase2) throw ValidationError("provenance", "phase 3 starts from a phase-2 model");
  validate(params);
  SelectorModel m = model2;
  if (d_hp.empty()) {
    m.flags.push_back("empty_human_data");
    return m;
  }
  std::vector<Sample> s;
  for (const auto& e : build_phase3_dataset(d_hp)) s.push_back({e.context, static_cast<int>(index_of(e.label)), e.weight});
  m.provenance = Provenance::Phase3;
  m.params = params;
  m.learning_rate = params.learning_rate;
  boost(m, s, params);
  return m;
}

double loser_weight(double margin) { return std::max(0.1, 1.0 - margin); }

std::vector<WeightedExample> build_phase2_dataset(std::span<const PreferencePair> pairs) {
  std::vector<WeightedExample> out;
  out.reserve(pairs.size() * 2);
  for (const auto& p : pairs) {
    validate(p);
    out.push_back({p.context, p.winner, 1.0});
    out.push_back({p.context, p.loser, loser_weight(p.margin.value_or(1.0))});
  }
  return out;
}

std::vector<WeightedExample> build_phase3_dataset(std::span<const PreferencePair> d_hp) {
  std::vector<WeightedExample> out;
  out.reserve(d_hp.size() * 2);
  for (const auto& p : d_hp) {
    validate(p);
    out.push_back({p.context, p.winner, 1.0});
    out.push_back({p.context, p.loser, 0.1});
  }
  return out;
}

std::vector<PreferencePair> generate_preference_pairs(std::span<const LabeledContext> d_sft,
                                                      std::span<const InterventionKind> palette, JudgeBackend& judge,
                                                      const UtilityWeights& weights, double epsilon) {
  if (!(epsilon >= 0.0)) throw ValidationError("epsilon", "must be >= 0");
  validate(weights);
  std::vector<InterventionKind> kinds(palette.begin(), palette.end());
  std::sort(kinds.begin(), kinds.end(), [](auto a, auto b) { return index_of(a) < index_of(b); });
  kinds.erase(std::unique(kinds.begin(), kinds.end()), kinds.end());

  std::vector<PreferencePair> out;
  try {
    for (const auto& d : d_sft) {
      const double u_star = utility(rubric_judge(d.context, d.label, judge), weights);
      for (auto alt : kinds) {
        if (alt == d.label) continue;
        const double du = u_star - utility(rubric_judge(d.context, alt, judge), weights);
        if (!(std::abs(du) > epsilon)) continue;
        PreferencePair p;
        p.context = d.context;
        p.winner = du > 0 ? d.label : alt;
        p.loser = du > 0 ? alt : d.label;
        p.margin = std::abs(du);
        p.source = PairSource::Automated;
        out.push_back(p);
      }
    }
  } catch (const BackendError& e) {
    throw PairGenerationFailed(e.what(), std::move(out));
  }
  return out;
}

Stage1Ranker selector_ranker(const SelectorModel& model) {
  return [model](const ContentItem& content, const UserContext& user, std::span<const InterventionKind> palette) {
    const auto pred = predict(model, featurize(content, user.filter));
    std::vector<RankedKind> ranked;
    for (auto k : palette) ranked.push_back({k, pred.probabilities[index_of(k)]});
    sort_ranking(ranked);
    return ranked;
  };
}

}  // namespace modpipe
