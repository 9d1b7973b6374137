// Thin JSON-string bridge; python/modpipe/__init__.py converts to and from dicts.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "modpipe/costmodel.hpp"
#include "modpipe/encoding.hpp"
#include "modpipe/feed.hpp"
#include "modpipe/selector.hpp"
#include "modpipe/serving.hpp"

namespace py = pybind11;
using namespace modpipe;

namespace {

json parse(const std::string& s) { return parse_json(s); }

std::string select_json(const std::string& post, const std::string& filter, std::size_t k) {
  SimulatedJudge judge;
  MockGenerator gen;
  MockTransformer text;
  CascadeConfig cfg;
  cfg.k = k;
  cfg.judge = &judge;
  cfg.generator = &gen;
  cfg.transformer = &text;
  const auto content = content_from_json(parse(post));
  const auto r = select_intervention(content, make_user_context(filter_from_json(parse(filter))), cfg);
  json cands = json::array();
  for (const auto& c : r.candidates)
    cands.push_back({{"kind", to_string(c.kind)}, {"requested", to_string(c.requested)}, {"total", c.verdict.total}});
  return json{{"winner", to_string(r.winner_kind)}, {"candidates", cands}, {"calls", to_json(r.calls)}, {"k", r.k}}
      .dump();
}

std::string feed_json(std::size_t posts, double match_rate, std::uint64_t seed, std::size_t page) {
  FeedParams p;
  p.posts = posts;
  p.match_rate = match_rate;
  p.seed = seed;
  p.page = page;
  json out = json::array();
  for (const auto& c : generate_feed(p)) out.push_back(to_json(c, PixelEncoding::Base64));
  return out.dump();
}

std::string simulate_json(const std::string& workload, std::size_t concurrency, std::size_t workers,
                          const std::string& sample, std::uint64_t seed) {
  const auto w = workload_from_json(parse(workload));
  SimConfig cfg{concurrency, workers, latency_sample_from_string(sample), seed};
  return to_json(simulate_latency(w, LatencyTable{}, cfg)).dump();
}

std::string logistic_json(const std::vector<bool>& outcomes) {
  std::unique_ptr<bool[]> buf(new bool[outcomes.size()]);
  for (std::size_t i = 0; i < outcomes.size(); ++i) buf[i] = outcomes[i];
  return to_json(fit_intercept_logistic(std::span<const bool>(buf.get(), outcomes.size()))).dump();
}

std::string pairs_json(const std::string& sft, const std::vector<std::string>& palette, double epsilon) {
  std::vector<InterventionKind> kinds;
  for (const auto& k : palette) kinds.push_back(kind_from_string(k));
  if (kinds.empty()) kinds = all_kinds();
  SimulatedJudge judge;
  const auto d = sft_from_json(parse(sft));
  const auto pairs = generate_preference_pairs(d, kinds, judge, {}, epsilon);
  return to_json(std::span<const PreferencePair>(pairs)).dump();
}

std::string train_json(int phase, const std::string& data, const std::string& params_text, const std::string& base) {
  const TrainParams params = params_text.empty() ? TrainParams{} : train_params_from_json(parse(params_text));
  const json d = parse(data);
  switch (phase) {
    case 1: return to_json(train_phase1(sft_from_json(d), params)).dump();
    case 2: return to_json(train_phase2(build_phase2_dataset(pairs_from_json(d)), params)).dump();
    case 3: return to_json(train_phase3(selector_from_json(parse(base)), pairs_from_json(d), params)).dump();
  }
  throw ValidationError("phase", "must be 1, 2 or 3");
}

std::string predict_json(const std::string& model, const std::vector<double>& context) {
  const auto p = predict(selector_from_json(parse(model)), ContextVector(std::span<const double>(context)));
  return json{{"kind", to_string(p.kind)}, {"probabilities", p.probabilities}}.dump();
}

}  // namespace

PYBIND11_MODULE(_modpipe, m) {
  m.doc() = "modpipe core bindings";

  auto base = py::register_exception<Error>(m, "ModpipeError", PyExc_RuntimeError);
  py::register_exception<ValidationError>(m, "ValidationError", base.ptr());

  m.def("fnv1a64", [](py::bytes b) { return fnv1a64(std::string(b)); });
  m.def("cache_key", [](py::bytes content, const std::string& params, int sensitivity) {
    return cache_key(std::string(content), params, sensitivity);
  });
  m.def("call_counts", [](const std::string& w) { return to_json(call_counts(workload_from_json(parse(w)))).dump(); });
  m.def("pruning_savings", &pruning_savings);
  m.def("simulate_latency", &simulate_json);
  m.def("sigmoid", &sigmoid);
  m.def("logit", &logit);
  m.def("fit_intercept_logistic", &logistic_json);
  m.def("alignment_report", [](const std::string& r) { return alignment_report(parse(r)).dump(); });
  m.def("loser_weight", &loser_weight);
  m.def("backoff_base", [](int attempt) { return backoff_base(attempt, {}); });
  m.def("generate_feed", &feed_json);
  m.def("select_intervention", &select_json);
  m.def("generate_preference_pairs", &pairs_json);
  m.def("train", &train_json);
  m.def("predict", &predict_json);
}
