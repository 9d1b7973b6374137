#include "modpipe/cascade.hpp"

#include <algorithm>
#include <future>
#include <ostream>

namespace modpipe {

CallAccount& CallAccount::operator+=(const CallAccount& o) {
  text_match += o.text_match;
  text_select += o.text_select;
  text_apply += o.text_apply;
  image_match += o.image_match;
  image_generate += o.image_generate;
  image_score += o.image_score;
  local_transform += o.local_transform;
  generation_failures += o.generation_failures;
  return *this;
}

json to_json(const CallAccount& c) {
  return json{{"text_match", c.text_match},           {"text_select", c.text_select},
              {"text_apply", c.text_apply},           {"image_match", c.image_match},
              {"image_generate", c.image_generate},   {"image_score", c.image_score},
              {"local_transform", c.local_transform}, {"generation_failures", c.generation_failures},
              {"total", c.total()}};
}

ImageBuffer CountingGenerator::generate(const GenerationRequest& request) const {
  ++calls;
  return inner_.generate(request);
}

TextInstruction CountingTransformer::transform(const TextRequest& request) const {
  ++calls;
  return inner_.transform(request);
}

TransformResult render_candidate(const ContentItem& content, InterventionKind kind, const Filter& filter,
                                 const CascadeConfig& config) {
  if (is_text_kind(kind)) {
    if (!content.text) throw UnsupportedKind("text intervention on content without text");
    if (!config.transformer) throw ValidationError("transformer", "no text transformer configured");
    const auto spans = trigger_spans(*content.text, content.annotations, filter);
    TransformResult r;
    r.kind = kind;
    r.text_instruction = apply_text_intervention(*content.text, kind, spans, filter, *config.transformer);
    return r;
  }
  if (!content.image) throw UnsupportedKind("image intervention on content without an image");
  if (is_local_kind(kind)) {
    const auto regions = target_regions(content.annotations, filter);
    return apply_local(*content.image, kind, regions, filter, config.local);
  }
  if (!config.generator) throw GeneratorUnavailable("no image generator configured");
  return apply_generative(*content.image, kind, content.annotations, filter, *config.generator, config.style_scope);
}

namespace {

struct CandidateOutcome {
  std::optional<Candidate> candidate;
  TransformResult result;
  bool local = false;
  bool generation_failed = false;
  std::string event;
};

}  // namespace

namespace {

SelectionResult select_text_intervention(const ContentItem& content, const UserContext& user,
                                         const CascadeConfig& config) {
  std::vector<InterventionKind> palette;
  for (auto kind : config.palette)
    if (is_text_kind(kind)) palette.push_back(kind);
  if (palette.empty()) throw EmptyPalette("no text entry in the palette");

  SelectionResult out;
  out.pruned_from = palette.size();
  out.k = 1;
  const InterventionKind kind = config.judge->select_text(content, user, palette);
  ++out.calls.text_select;
  if (std::find(palette.begin(), palette.end(), kind) == palette.end())
    throw MalformedVerdict("judge selected a kind outside the text palette");
  ++out.calls.text_apply;
  out.winner = render_candidate(content, kind, user.filter, config);
  out.winner_kind = kind;
  out.candidates.push_back(Candidate{kind, kind, {}, false});
  return out;
}

}  // namespace

SelectionResult select_intervention(const ContentItem& content, const UserContext& user, const CascadeConfig& config,
                                    Modality target, std::optional<std::vector<RankedKind>> ranking) {
  if (!config.judge) throw ValidationError("judge", "no judge backend configured");
  if (target == Modality::Text) {
    if (!content.text) throw UnsupportedKind("content has no text");
    return select_text_intervention(content, user, config);
  }
  if (!content.image) throw UnsupportedKind("content has no image");

  std::vector<InterventionKind> palette;
  for (auto kind : config.palette)
    if (is_image_kind(kind)) palette.push_back(kind);
  if (palette.empty()) throw EmptyPalette("no image entry in the palette");
  if (config.k < 1 || config.k > palette.size()) throw ValidationError("k", "must be within 1..|palette|");

  SelectionResult out;
  out.pruned_from = palette.size();
  out.k = config.k;

  // Stage 1
  std::vector<RankedKind> ranked;
  if (ranking) {
    for (const auto& r : *ranking)
      if (std::find(palette.begin(), palette.end(), r.kind) != palette.end()) ranked.push_back(r);
  } else if (config.stage1) {
    ranked = config.stage1(content, user, palette);
  } else {
    const UserContext users[] = {user};
    ranked = config.judge->assess_image(content, users, palette).ranking;
    ++out.calls.image_match;
  }
  sort_ranking(ranked);
  if (ranked.size() < config.k) throw MalformedVerdict("stage 1 ranked fewer kinds than K");

  // Stage 2: candidates are independent; results are collected by rank index.
  std::vector<std::future<CandidateOutcome>> tasks;
  for (std::size_t i = 0; i < config.k; ++i) {
    const InterventionKind kind = ranked[i].kind;
    tasks.push_back(std::async(std::launch::async, [&content, &user, &config, kind] {
      CandidateOutcome o;
      InterventionKind rendered = kind;
      o.local = is_local_kind(kind);
      try {
        o.result = render_candidate(content, kind, user.filter, config);
      } catch (const GeneratorUnavailable& e) {
        o.generation_failed = true;
        rendered = InterventionKind::Occlusion;
        o.event = "generation of " + std::string(to_string(kind)) + " failed (" + e.what() + "), using Occlusion";
        o.result = render_candidate(content, rendered, user.filter, config);
      }
      try {
        JudgeVerdict v = score(content, o.result, user, config.rubric, *config.judge);
        o.candidate = Candidate{rendered, kind, std::move(v), o.generation_failed};
      } catch (const Error& e) {
        if (e.code() != "BackendError" && e.code() != "MalformedVerdict") throw;
        if (!o.event.empty()) o.event += "; ";
        o.event += "scoring " + std::string(to_string(rendered)) + " failed: " + e.what();
      }
      return o;
    }));
  }

  std::vector<CandidateOutcome> outcomes;
  for (auto& t : tasks) outcomes.push_back(t.get());

  std::optional<std::size_t> best;
  for (auto& o : outcomes) {
    ++out.calls.image_generate;
    ++out.calls.image_score;
    if (o.local || o.generation_failed) ++out.calls.local_transform;
    if (o.generation_failed) ++out.calls.generation_failures;
    if (!o.event.empty()) out.events.push_back(o.event);
    if (!o.candidate) continue;
    out.candidates.push_back(*o.candidate);
    const std::size_t idx = out.candidates.size() - 1;
    const auto& c = out.candidates[idx];
    const bool better = !best || c.verdict.total > out.candidates[*best].verdict.total ||
                        (c.verdict.total == out.candidates[*best].verdict.total &&
                         index_of(c.kind) < index_of(out.candidates[*best].kind));
    if (better) {
      best = idx;
      out.winner = o.result;
    }
  }
  if (!best) throw AllCandidatesFailed("every candidate failed scoring");
  out.winner_kind = out.candidates[*best].kind;

  if (config.log) {
    json kinds = json::array(), totals = json::array();
    for (const auto& c : out.candidates) {
      kinds.push_back(to_string(c.kind));
      totals.push_back(c.verdict.total);
    }
    *config.log << json{{"content_id", content.id},
                        {"kinds_considered", kinds},
                        {"totals", totals},
                        {"winner", to_string(out.winner_kind)},
                        {"calls", to_json(out.calls)}}
                       .dump()
                << '\n';
  }
  return out;
}

MatchReport match_filters(const ContentItem& content, std::span<const Filter> filters, JudgeBackend& judge,
                          std::span<const InterventionKind> image_palette, int fail_closed_threshold) {
  MatchReport report;
  if (content.is_ad || filters.empty()) return report;

  auto fail_closed = [&](Modality m) {
    for (const auto& f : filters)
      if ((m == Modality::Text ? covers_text(f.modality) : covers_image(f.modality)) &&
          f.sensitivity >= fail_closed_threshold)
        return true;
    return false;
  };

  const bool any_text = std::any_of(filters.begin(), filters.end(), [](const Filter& f) { return covers_text(f.modality); });
  const bool any_image = std::any_of(filters.begin(), filters.end(), [](const Filter& f) { return covers_image(f.modality); });

  if (content.text && any_text) {
    ++report.calls.text_match;
    try {
      for (auto& m : judge.match_text(content, filters))
        report.matches.push_back({m.filter_index, Modality::Text, std::move(m.spans), {}});
    } catch (const Error& e) {
      if (e.code() != "BackendError" && e.code() != "MalformedVerdict") throw;
      report.failures.push_back({Modality::Text, e.what(), fail_closed(Modality::Text)});
    }
  }

  if (content.image && any_image) {
    ++report.calls.image_match;
    std::vector<UserContext> users;
    for (const auto& f : filters) users.push_back(make_user_context(f));
    const std::vector<InterventionKind> fallback = image_kinds();
    std::span<const InterventionKind> palette = image_palette.empty() ? std::span<const InterventionKind>(fallback)
                                                                      : image_palette;
    try {
      ImageAssessment a = judge.assess_image(content, users, palette);
      for (const auto& m : a.matches) report.matches.push_back({m.filter_index, Modality::Image, {}, m.regions});
      report.assessment = std::move(a);
    } catch (const Error& e) {
      if (e.code() != "BackendError" && e.code() != "MalformedVerdict") throw;
      report.failures.push_back({Modality::Image, e.what(), fail_closed(Modality::Image)});
    }
  }
  return report;
}

}  // namespace modpipe
