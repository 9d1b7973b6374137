#include "modpipe/costmodel.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <ostream>
#include <queue>
#include <random>

namespace modpipe {

void validate(const WorkloadParams& w) {
  if (w.K < 1) throw ConfigError("K must be >= 1");
  if (w.N_t > w.N) throw ConfigError("N_t must be <= N");
  if (w.N_p > w.N) throw ConfigError("N_p must be <= N");
  if (w.M_t > w.N_t) throw ConfigError("M_t must be <= N_t");
  if (w.M_p > w.N_p) throw ConfigError("M_p must be <= N_p");
}

json to_json(const WorkloadParams& w) {
  return json{{"N", w.N}, {"N_t", w.N_t}, {"N_p", w.N_p}, {"M_t", w.M_t}, {"M_p", w.M_p}, {"K", w.K}};
}

WorkloadParams workload_from_json(const json& j) {
  WorkloadParams w;
  try {
    w.N = j.at("N").get<std::uint64_t>();
    w.N_t = j.value("N_t", w.N);
    w.N_p = j.at("N_p").get<std::uint64_t>();
    w.M_t = j.at("M_t").get<std::uint64_t>();
    w.M_p = j.at("M_p").get<std::uint64_t>();
    w.K = j.value("K", std::uint64_t{3});
  } catch (const json::exception& e) {
    throw ParseError(std::string("workload: ") + e.what());
  }
  validate(w);
  return w;
}

WorkloadParams workload_preset(std::string_view name) {
  if (name == "worst_case") return {25, 25, 25, 25, 25, 3};
  if (name == "no_matches") return {25, 25, 10, 0, 0, 3};
  if (name == "typical") return {25, 25, 12, 5, 3, 3};
  throw ConfigError("unknown workload preset '" + std::string(name) + "'");
}

CallCounts call_counts(const WorkloadParams& w) {
  validate(w);
  CallCounts c;
  c.T_text = w.N + 2 * w.M_t;
  c.T_image = w.N_p + 2 * w.K * w.M_p;
  c.T_total = c.T_text + c.T_image;
  return c;
}

json to_json(const CallCounts& c) {
  return json{{"T_text", c.T_text}, {"T_image", c.T_image}, {"T_total", c.T_total}};
}

double pruning_savings(std::size_t palette_size, std::size_t k) {
  if (k < 1 || k > palette_size) throw ConfigError("pruning requires 1 <= K <= P");
  return static_cast<double>(palette_size - k) / static_cast<double>(palette_size);
}

std::string_view to_string(Op op) {
  switch (op) {
    case Op::TextMatch: return "text_match";
    case Op::TextSelect: return "text_select";
    case Op::TextApply: return "text_apply";
    case Op::ImageMatch: return "image_match";
    case Op::ImageGenerate: return "image_generate";
    case Op::ImageScore: return "image_score";
  }
  return "text_match";
}

void validate(const LatencyTable& t) {
  for (std::size_t i = 0; i < kOpCount; ++i) {
    const auto& r = t.ops[i];
    if (!(r.min_s > 0.0 && r.min_s <= r.max_s))
      throw ConfigError(std::string("latency range for ") + std::string(to_string(static_cast<Op>(i))) +
                        " must satisfy 0 < min <= max");
  }
}

json to_json(const LatencyTable& t) {
  json j = json::object();
  for (std::size_t i = 0; i < kOpCount; ++i)
    j[std::string(to_string(static_cast<Op>(i)))] = json::array({t.ops[i].min_s, t.ops[i].max_s});
  return j;
}

LatencyTable latency_table_from_json(const json& j) {
  LatencyTable t;
  try {
    for (std::size_t i = 0; i < kOpCount; ++i) {
      const std::string key(to_string(static_cast<Op>(i)));
      if (!j.contains(key)) continue;
      const auto& r = j.at(key);
      t.ops[i] = {r.at(0).get<double>(), r.at(1).get<double>()};
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("latency table: ") + e.what());
  }
  validate(t);
  return t;
}

LatencySample latency_sample_from_string(std::string_view s) {
  if (s == "min") return LatencySample::Min;
  if (s == "max") return LatencySample::Max;
  if (s == "mid") return LatencySample::Mid;
  if (s == "seeded-uniform" || s == "uniform") return LatencySample::SeededUniform;
  throw ConfigError("unknown latency sampling '" + std::string(s) + "'");
}

std::string_view to_string(LatencySample s) {
  switch (s) {
    case LatencySample::Min: return "min";
    case LatencySample::Max: return "max";
    case LatencySample::Mid: return "mid";
    case LatencySample::SeededUniform: return "seeded-uniform";
  }
  return "mid";
}

double sample_latency(const LatencyTable& t, Op op, std::uint64_t index, LatencySample mode, std::uint64_t seed) {
  const auto& r = t[op];
  switch (mode) {
    case LatencySample::Min: return r.min_s;
    case LatencySample::Max: return r.max_s;
    case LatencySample::Mid: return r.min_s + (r.max_s - r.min_s) / 2.0;
    case LatencySample::SeededUniform: {
      std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                        static_cast<std::uint32_t>(op), static_cast<std::uint32_t>(index),
                        static_cast<std::uint32_t>(index >> 32)};
      std::mt19937_64 rng(seq);
      const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
      return r.min_s + u * (r.max_s - r.min_s);
    }
  }
  return r.min_s;
}

namespace {

/// FIFO list scheduler over a fixed number of identical slots.
class Pool {
 public:
  explicit Pool(std::size_t slots) {
    for (std::size_t i = 0; i < slots; ++i) free_.push({0.0, i});
  }

  TimelineEvent run(Op op, std::uint64_t index, double ready, double duration, bool blocking) {
    auto [t, slot] = free_.top();
    free_.pop();
    const double start = std::max(t, ready);
    const double end = start + duration;
    free_.push({end, slot});
    return {op, index, slot, start, end, blocking};
  }

 private:
  using Entry = std::pair<double, std::size_t>;
  std::priority_queue<Entry, std::vector<Entry>, std::greater<Entry>> free_;
};

}  // namespace

LatencyReport simulate_latency(const WorkloadParams& w, const LatencyTable& table, const SimConfig& cfg) {
  validate(w);
  validate(table);
  if (cfg.judge_concurrency < 1) throw ConfigError("judge_concurrency must be >= 1");
  if (cfg.worker_count < 1) throw ConfigError("worker_count must be >= 1");

  LatencyReport out;
  auto dur = [&](Op op, std::uint64_t i) { return sample_latency(table, op, i, cfg.sample, cfg.seed); };

  Pool judge(cfg.judge_concurrency);
  double text_done = 0.0, image_done = 0.0;
  auto stage = [&](Op op, std::uint64_t count, double ready, double& done) {
    double last = ready;
    for (std::uint64_t i = 0; i < count; ++i) {
      out.timeline.push_back(judge.run(op, i, ready, dur(op, i), true));
      last = std::max(last, out.timeline.back().end_s);
    }
    done = std::max(done, last);
    return last;
  };

  const double matched = stage(Op::TextMatch, w.N, 0.0, text_done);
  stage(Op::ImageMatch, w.N_p, 0.0, image_done);
  const double selected = stage(Op::TextSelect, w.M_t, matched, text_done);
  stage(Op::TextApply, w.M_t, selected, text_done);
  out.critical_path_s = std::max(text_done, image_done);

  Pool workers(cfg.worker_count);
  double generated = out.critical_path_s, background = out.critical_path_s;
  const std::uint64_t jobs = w.K * w.M_p;
  for (std::uint64_t i = 0; i < jobs; ++i) {
    out.timeline.push_back(workers.run(Op::ImageGenerate, i, out.critical_path_s, dur(Op::ImageGenerate, i), false));
    generated = std::max(generated, out.timeline.back().end_s);
  }
  background = generated;
  for (std::uint64_t i = 0; i < jobs; ++i) {
    out.timeline.push_back(workers.run(Op::ImageScore, i, generated, dur(Op::ImageScore, i), false));
    background = std::max(background, out.timeline.back().end_s);
  }
  out.background_completion_s = background;
  return out;
}

json to_json(const LatencyReport& r, bool with_timeline) {
  json j{{"critical_path_s", r.critical_path_s}, {"background_completion_s", r.background_completion_s}};
  if (with_timeline) {
    json t = json::array();
    for (const auto& e : r.timeline)
      t.push_back({{"op", to_string(e.op)},
                   {"index", e.index},
                   {"slot", e.slot},
                   {"start_s", e.start_s},
                   {"end_s", e.end_s},
                   {"blocking", e.blocking}});
    j["timeline"] = std::move(t);
  }
  return j;
}

void write_timeline_csv(const LatencyReport& r, std::ostream& out) {
  out << "op,index,slot,start_s,end_s,blocking\n";
  for (const auto& e : r.timeline)
    out << to_string(e.op) << ',' << e.index << ',' << e.slot << ',' << json(e.start_s).dump() << ','
        << json(e.end_s).dump() << ',' << (e.blocking ? 1 : 0) << '\n';
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double logit(double p) { return std::log(p / (1.0 - p)); }

LogisticFit fit_intercept_logistic(std::span<const bool> outcomes) {
  if (outcomes.empty()) throw ValidationError("outcomes", "at least one outcome required");
  LogisticFit f;
  f.n = outcomes.size();
  f.successes = static_cast<std::size_t>(std::count(outcomes.begin(), outcomes.end(), true));
  if (f.successes == 0 || f.successes == f.n) {
    f.degenerate = true;
    f.log_odds = f.successes == 0 ? -std::numeric_limits<double>::infinity() : std::numeric_limits<double>::infinity();
    f.probability = f.successes == 0 ? 0.0 : 1.0;
    return f;
  }
  const double n = static_cast<double>(f.n), s = static_cast<double>(f.successes);
  double beta = 0.0;
  for (f.iterations = 1; f.iterations <= 100; ++f.iterations) {
    const double p = sigmoid(beta);
    const double step = (s - n * p) / (n * p * (1.0 - p));
    beta += step;
    if (std::abs(step) < 1e-15) break;
  }
  f.log_odds = beta;
  f.probability = sigmoid(beta);
  return f;
}

json to_json(const LogisticFit& f) {
  json j{{"n", f.n}, {"successes", f.successes}, {"degenerate", f.degenerate}, {"iterations", f.iterations},
         {"probability", f.probability}};
  j["log_odds"] = std::isfinite(f.log_odds) ? json(f.log_odds) : json(f.log_odds > 0 ? "inf" : "-inf");
  return j;
}

json alignment_report(const json& records) {
  if (!records.is_array()) throw ParseError("preference records must be a JSON array");
  std::vector<bool> all;
  std::map<std::string, std::vector<bool>> by_modality;
  for (const auto& r : records) {
    if (!r.is_object() || !r.contains("system_choice_favored") || !r.at("system_choice_favored").is_boolean())
      throw ValidationError("system_choice_favored", "every record needs a boolean system_choice_favored");
    const bool favored = r.at("system_choice_favored").get<bool>();
    all.push_back(favored);
    by_modality[r.value("modality", std::string("unknown"))].push_back(favored);
  }
  auto summarize = [](const std::vector<bool>& v) {
    std::unique_ptr<bool[]> buf(new bool[v.size()]);
    for (std::size_t i = 0; i < v.size(); ++i) buf[i] = v[i];
    const auto fit = fit_intercept_logistic(std::span<const bool>(buf.get(), v.size()));
    json j = to_json(fit);
    j["rate"] = static_cast<double>(fit.successes) / static_cast<double>(fit.n);
    return j;
  };
  if (all.empty()) throw ValidationError("records", "no preference records");
  json out{{"model", "intercept-only logistic (fixed effect)"}, {"overall", summarize(all)}};
  json per = json::object();
  for (const auto& [m, v] : by_modality) per[m] = summarize(v);
  out["by_modality"] = std::move(per);
  return out;
}

}  // namespace modpipe
