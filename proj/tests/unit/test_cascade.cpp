#include <doctest.h>

#include <sstream>

#include "fixtures.hpp"

using namespace modpipe;
using fixtures::make_filter;
using K = InterventionKind;

namespace {

struct Rig {
  SimulatedJudge sim;
  CountingJudge judge{sim};
  MockGenerator mock;
  CountingGenerator generator{mock};
  MockTransformer mock_text;
  CountingTransformer transformer{mock_text};

  CascadeConfig config(std::size_t k = 3) {
    CascadeConfig c;
    c.k = k;
    c.judge = &judge;
    c.generator = &generator;
    c.transformer = &transformer;
    return c;
  }
};

// Renders and scores every image kind independently of the cascade.
K brute_force_winner(const ContentItem& c, const UserContext& user, const CascadeConfig& cfg,
                     const std::vector<K>& kinds) {
  SimulatedJudge fresh;
  std::optional<K> best;
  double best_total = -1e9;
  for (auto k : kinds) {
    const double t = score(c, render_candidate(c, k, user.filter, cfg), user, Rubric::Deployment4Dim, fresh).total;
    if (t > best_total) {
      best_total = t;
      best = k;
    }
  }
  return *best;
}

}  // namespace

TEST_SUITE("cascade") {
  TEST_CASE("image selection accounting") {
    Rig rig;
    const auto c = fixtures::annotated_post("p", 0, "blood", 1.0, 0.5);
    const auto user = make_user_context(make_filter("blood", 5));
    const auto r = select_intervention(c, user, rig.config());
    CHECK(r.k == 3);
    CHECK(r.pruned_from == 10);
    CHECK(r.candidates.size() == 3);
    CHECK(r.calls.image_match == 1);
    CHECK(r.calls.image_generate == 3);
    CHECK(r.calls.image_score == 3);
    CHECK(r.calls.total() == 7);
    CHECK(r.calls.local_transform + rig.generator.calls == r.calls.image_generate);
    CHECK(rig.judge.assess_image_calls == r.calls.image_match);
    CHECK(rig.judge.analyze_calls == r.calls.image_score);
    CHECK(rig.judge.score_calls == r.calls.image_score);
    CHECK(r.winner.kind == r.winner_kind);
    CHECK(r.winner.image.has_value());
  }

  TEST_CASE("winner agrees with brute-force scoring of the full palette") {
    Rig rig;
    const std::vector<int> sens{1, 3, 5};
    for (double sev : {0.1, 0.4, 0.7, 1.0})
      for (int s : sens) {
        const auto c = fixtures::annotated_post("p", 0, "blood", sev, 0.5);
        const auto user = make_user_context(make_filter("blood", s));
        auto cfg = rig.config(10);
        const auto r = select_intervention(c, user, cfg);
        CHECK(r.winner_kind == brute_force_winner(c, user, cfg, image_kinds()));
      }
  }

  TEST_CASE("top-K winner is the best of the predicted top K") {
    Rig rig;
    const auto c = fixtures::annotated_post("p", 0, "blood", 0.6, 0.5);
    const auto user = make_user_context(make_filter("blood", 4));
    auto cfg = rig.config(3);
    const auto r = select_intervention(c, user, cfg);
    const auto ranking = rig.sim.rank(c, user, image_kinds());
    const std::vector<K> top{ranking[0].kind, ranking[1].kind, ranking[2].kind};
    CHECK(r.winner_kind == brute_force_winner(c, user, cfg, top));
  }

  TEST_CASE("a supplied ranking skips the pruning call") {
    Rig rig;
    const auto c = fixtures::annotated_post("p", 0, "blood", 1.0, 0.5);
    const auto user = make_user_context(make_filter("blood", 5));
    std::vector<RankedKind> ranking{{K::Blur, 3}, {K::Shrink, 2}, {K::Inpainting, 1}, {K::TextBlur, 9}};
    const auto r = select_intervention(c, user, rig.config(), Modality::Image, ranking);
    CHECK(r.calls.image_match == 0);
    CHECK(rig.judge.assess_image_calls == 0);
    REQUIRE(r.candidates.size() == 3);
    CHECK(r.candidates[0].kind == K::Blur);
    CHECK(r.candidates[1].kind == K::Shrink);
    CHECK(r.candidates[2].kind == K::Inpainting);
  }

  TEST_CASE("a learned stage-1 ranker replaces the judge") {
    Rig rig;
    auto cfg = rig.config(2);
    cfg.stage1 = [](const ContentItem&, const UserContext&, std::span<const K> palette) {
      std::vector<RankedKind> out;
      for (auto k : palette) out.push_back({k, k == K::Occlusion ? 1.0 : 0.0});
      return out;
    };
    const auto c = fixtures::annotated_post("p", 0, "blood", 1.0, 0.5);
    const auto r = select_intervention(c, make_user_context(make_filter("blood")), cfg);
    CHECK(r.calls.image_match == 0);
    CHECK(r.candidates[0].kind == K::Occlusion);
    CHECK(r.candidates[1].kind == K::Blur);
  }

  TEST_CASE("generator failure falls back to occlusion") {
    Rig rig;
    fixtures::FailingGenerator failing;
    auto cfg = rig.config(3);
    cfg.generator = &failing;
    const auto c = fixtures::annotated_post("p", 0, "blood", 0.2, 0.5);
    const auto user = make_user_context(make_filter("blood", 1));
    const auto r = select_intervention(c, user, cfg);
    // Low severity ranks three generative styles first.
    CHECK(r.calls.generation_failures == 3);
    CHECK(r.events.size() == 3);
    CHECK(r.events[0].find("using Occlusion") != std::string::npos);
    CHECK(r.winner_kind == K::Occlusion);
    for (const auto& cand : r.candidates) {
      CHECK(cand.degraded);
      CHECK(is_style_kind(cand.requested));
    }
    CHECK(r.calls.image_generate == 3);
    CHECK(r.calls.local_transform == 3);
  }

  TEST_CASE("scoring failures drop candidates") {
    fixtures::ScriptedJudge judge;
    judge.fail_score = true;
    MockGenerator gen;
    CascadeConfig cfg;
    cfg.judge = &judge;
    cfg.generator = &gen;
    const auto c = fixtures::annotated_post("p", 0, "blood", 1.0, 0.5);
    CHECK_THROWS_AS(select_intervention(c, make_user_context(make_filter("blood")), cfg), AllCandidatesFailed);
  }

  TEST_CASE("text selection makes one select and one apply call") {
    Rig rig;
    const auto c = fixtures::annotated_post("p", 0, "blood", 1.0, 0.5);
    const auto user = make_user_context(make_filter("blood", 5));
    const auto r = select_intervention(c, user, rig.config(), Modality::Text);
    CHECK(r.calls.text_select == 1);
    CHECK(r.calls.text_apply == 1);
    CHECK(r.calls.total() == 2);
    CHECK(rig.judge.select_text_calls == 1);
    CHECK(rig.transformer.calls == 1);
    CHECK(rig.judge.analyze_calls == 0);
    CHECK(is_text_kind(r.winner_kind));
    CHECK(r.winner.text_instruction.has_value());
    CHECK(r.winner_kind == K::TextOverlay);
  }

  TEST_CASE("invalid configurations") {
    Rig rig;
    const auto c = fixtures::annotated_post("p", 0, "blood", 1.0, 0.5);
    const auto user = make_user_context(make_filter("blood"));
    CHECK_THROWS_AS(select_intervention(c, user, rig.config(0)), ValidationError);
    CHECK_THROWS_AS(select_intervention(c, user, rig.config(11)), ValidationError);
    auto cfg = rig.config();
    cfg.palette = text_kinds();
    CHECK_THROWS_AS(select_intervention(c, user, cfg), EmptyPalette);
    cfg = rig.config();
    cfg.judge = nullptr;
    CHECK_THROWS_AS(select_intervention(c, user, cfg), ValidationError);
    cfg = rig.config();
    cfg.generator = nullptr;
    CHECK_THROWS_AS(render_candidate(c, K::Inpainting, user.filter, cfg), GeneratorUnavailable);
    auto text_only = c;
    text_only.image.reset();
    CHECK_THROWS_AS(select_intervention(text_only, user, rig.config()), UnsupportedKind);
  }

  TEST_CASE("selection log lines") {
    Rig rig;
    std::ostringstream log;
    auto cfg = rig.config();
    cfg.log = &log;
    const auto c = fixtures::annotated_post("p7", 0, "blood", 1.0, 0.5);
    select_intervention(c, make_user_context(make_filter("blood")), cfg);
    const json line = json::parse(log.str());
    CHECK(line["content_id"] == "p7");
    CHECK(line["kinds_considered"].size() == 3);
    CHECK(line["calls"]["total"] == 7);
  }

  TEST_CASE("call accounts add up") {
    CallAccount a, b;
    a.text_match = 1;
    a.image_generate = 2;
    b.text_match = 3;
    b.local_transform = 1;
    a += b;
    CHECK(a.text_match == 4);
    CHECK(a.total() == 6);
    CHECK(to_json(a)["local_transform"] == 1);
  }

  TEST_CASE("filter matching") {
    SimulatedJudge sim;
    CountingJudge judge(sim);
    auto c = fixtures::annotated_post("p", 0, "blood", 1.0, 0.5);
    const std::vector<Filter> fs{make_filter("blood", 5)};
    auto report = match_filters(c, fs, judge);
    CHECK(report.calls.text_match == 1);
    CHECK(report.calls.image_match == 1);
    CHECK(report.matches.size() == 2);
    CHECK(report.assessment.has_value());

    c.is_ad = true;
    report = match_filters(c, fs, judge);
    CHECK(report.calls.total() == 0);

    fixtures::ScriptedJudge broken;
    broken.fail_match_text = true;
    broken.fail_assess_image = true;
    c.is_ad = false;
    report = match_filters(c, fs, broken, {}, 4);
    REQUIRE(report.failures.size() == 2);
    CHECK(report.failures[0].fail_closed);
    const std::vector<Filter> mild{make_filter("blood", 2)};
    report = match_filters(c, mild, broken, {}, 4);
    CHECK_FALSE(report.failures[0].fail_closed);
  }
}
