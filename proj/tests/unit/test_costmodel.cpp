#include <doctest.h>

#include <cmath>
#include <sstream>

#include "fixtures.hpp"

using namespace modpipe;

namespace {

double mid(const LatencyTable& t, Op op) { return (t[op].min_s + t[op].max_s) / 2; }

}  // namespace

TEST_SUITE("costmodel") {
  TEST_CASE("call counts") {
    const auto worst = call_counts(workload_preset("worst_case"));
    CHECK(worst.T_text == 25 + 2 * 25);
    CHECK(worst.T_image == 25 + 2 * 3 * 25);
    CHECK(worst.T_total == 250);
    const auto none = call_counts(workload_preset("no_matches"));
    CHECK(none.T_total == 35);
    WorkloadParams w{10, 10, 4, 2, 1, 5};
    CHECK(call_counts(w).T_total == (10 + 4) + (4 + 10));
    w.M_p = 5;
    CHECK_THROWS_AS(call_counts(w), ConfigError);
    CHECK_THROWS_AS(workload_preset("huge"), ConfigError);
    CHECK(workload_from_json(to_json(workload_preset("worst_case"))).N == 25);
  }

  TEST_CASE("pruning savings") {
    CHECK(pruning_savings(9, 3) == doctest::Approx(2.0 / 3));
    CHECK(pruning_savings(12, 3) == doctest::Approx(0.75));
    CHECK(pruning_savings(10, 10) == 0.0);
    CHECK_THROWS_AS(pruning_savings(9, 0), ConfigError);
    CHECK_THROWS_AS(pruning_savings(3, 9), ConfigError);
  }

  TEST_CASE("worst-case batch meets the latency band") {
    const LatencyTable t;
    const auto r = simulate_latency(workload_preset("worst_case"), t, {});
    CHECK(r.critical_path_s >= 5.0);
    CHECK(r.critical_path_s <= 15.0);
    // 25 slots: text match wave, image match wave, then select and apply.
    const double expect = mid(t, Op::TextMatch) + mid(t, Op::ImageMatch) + mid(t, Op::TextSelect) +
                          mid(t, Op::TextApply);
    CHECK(r.critical_path_s == doctest::Approx(expect));
    const double rounds = std::ceil(75.0 / 4.0);
    CHECK(r.background_completion_s ==
          doctest::Approx(expect + rounds * (mid(t, Op::ImageGenerate) + mid(t, Op::ImageScore))));
    const auto lo = simulate_latency(workload_preset("worst_case"), t, {25, 4, LatencySample::Min, 0});
    const auto hi = simulate_latency(workload_preset("worst_case"), t, {25, 4, LatencySample::Max, 0});
    CHECK(lo.critical_path_s <= r.critical_path_s);
    CHECK(r.critical_path_s <= hi.critical_path_s);
  }

  TEST_CASE("serial execution sums every call") {
    const LatencyTable t;
    const auto w = workload_preset("worst_case");
    const auto r = simulate_latency(w, t, {1, 1, LatencySample::Mid, 0});
    const double blocking = 25 * mid(t, Op::TextMatch) + 25 * mid(t, Op::ImageMatch) +
                            25 * mid(t, Op::TextSelect) + 25 * mid(t, Op::TextApply);
    CHECK(r.critical_path_s == doctest::Approx(blocking));
    CHECK(r.critical_path_s == doctest::Approx(181.25));
    CHECK(r.background_completion_s ==
          doctest::Approx(blocking + 75 * (mid(t, Op::ImageGenerate) + mid(t, Op::ImageScore))));
  }

  TEST_CASE("no matches is a single wave") {
    const LatencyTable t;
    const auto r = simulate_latency(workload_preset("no_matches"), t, {});
    CHECK(r.critical_path_s == doctest::Approx(mid(t, Op::TextMatch) + mid(t, Op::ImageMatch)));
    CHECK(r.background_completion_s == r.critical_path_s);
    for (const auto& e : r.timeline) CHECK(e.blocking);
  }

  TEST_CASE("seeded sampling is reproducible and in range") {
    const LatencyTable t;
    for (std::uint64_t i = 0; i < 50; ++i) {
      const double a = sample_latency(t, Op::ImageGenerate, i, LatencySample::SeededUniform, 9);
      CHECK(a == sample_latency(t, Op::ImageGenerate, i, LatencySample::SeededUniform, 9));
      CHECK(a >= 3.0);
      CHECK(a <= 10.0);
    }
    const auto a = simulate_latency(workload_preset("typical"), t, {25, 4, LatencySample::SeededUniform, 3});
    const auto b = simulate_latency(workload_preset("typical"), t, {25, 4, LatencySample::SeededUniform, 3});
    CHECK(to_json(a, true) == to_json(b, true));
    std::ostringstream csv;
    write_timeline_csv(a, csv);
    CHECK(csv.str().rfind("op,index,slot,start_s,end_s,blocking\n", 0) == 0);
  }

  TEST_CASE("latency table validation") {
    LatencyTable t;
    t[Op::TextMatch] = {2.0, 1.0};
    CHECK_THROWS(validate(t));
    const auto parsed = latency_table_from_json(json{{"image_score", {1.0, 1.5}}});
    CHECK(parsed[Op::ImageScore].max_s == 1.5);
    CHECK(parsed[Op::TextMatch].min_s == 0.5);
    CHECK_THROWS_AS(simulate_latency(workload_preset("typical"), LatencyTable{}, {0, 4}), ConfigError);
  }

  TEST_CASE("sigmoid and logit") {
    CHECK(sigmoid(0.53) == doctest::Approx(0.6295).epsilon(1e-4));
    CHECK(sigmoid(1.33) == doctest::Approx(0.7908).epsilon(1e-4));
    CHECK(sigmoid(-800) >= 0.0);
    CHECK(sigmoid(800) == 1.0);
    for (double p : {0.01, 0.3, 0.5, 0.63, 0.99}) CHECK(sigmoid(logit(p)) == doctest::Approx(p).epsilon(1e-12));
  }

  TEST_CASE("intercept-only logistic fit") {
    std::vector<bool> v(1000, false);
    for (int i = 0; i < 630; ++i) v[i] = true;
    const std::unique_ptr<bool[]> buf(new bool[v.size()]);
    for (std::size_t i = 0; i < v.size(); ++i) buf[i] = v[i];
    const auto f = fit_intercept_logistic(std::span<const bool>(buf.get(), v.size()));
    CHECK(f.log_odds == doctest::Approx(std::log(0.63 / 0.37)).epsilon(1e-12));
    CHECK(f.log_odds == doctest::Approx(0.5322).epsilon(1e-4));
    CHECK(f.probability == doctest::Approx(0.63));
    CHECK_FALSE(f.degenerate);
    const bool all[3] = {true, true, true};
    const auto d = fit_intercept_logistic(all);
    CHECK(d.degenerate);
    CHECK(std::isinf(d.log_odds));
    CHECK(to_json(d)["log_odds"] == "inf");
  }

  TEST_CASE("alignment report") {
    json records = json::array();
    for (int i = 0; i < 10; ++i)
      records.push_back({{"system_choice_favored", i < 7}, {"modality", i % 2 ? "image" : "text"}});
    const auto r = alignment_report(records);
    CHECK(r["overall"]["n"] == 10);
    CHECK(r["overall"]["probability"].get<double>() == doctest::Approx(0.7));
    CHECK(r["by_modality"]["text"]["successes"] == 4);
    CHECK(r["by_modality"]["image"]["successes"] == 3);
    CHECK_THROWS_AS(alignment_report(json::object()), ParseError);
    CHECK_THROWS_AS(alignment_report(json::array({json{{"x", 1}}})), ValidationError);
    CHECK_THROWS_AS(alignment_report(json::array()), ValidationError);
  }
}
