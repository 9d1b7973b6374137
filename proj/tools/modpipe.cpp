// modpipe command-line driver.

#include <csignal>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "modpipe/costmodel.hpp"
#include "modpipe/feed.hpp"
#include "modpipe/selector.hpp"
#include "modpipe/serving.hpp"

using namespace modpipe;

namespace {

constexpr int kUsage = 1;
constexpr int kRuntime = 2;

class UsageError : public Error {
 public:
  explicit UsageError(const std::string& m) : Error("UsageError", m) {}
};

void log_line(const std::string& level, const std::string& message, json extra = json::object()) {
  extra["level"] = level;
  extra["message"] = message;
  std::cerr << extra.dump() << "\n";
}

int fail(int exit_code, const std::string& code, const std::string& message) {
  std::cerr << json{{"error", {{"code", code}, {"message", message}}}}.dump() << "\n";
  return exit_code;
}

void write_output(const std::string& path, const std::string& contents) {
  if (path.empty() || path == "-") {
    std::cout << contents << "\n";
    return;
  }
  write_text_file(path, contents + "\n");
}

double parse_double(const std::string& name, const std::string& text) {
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return v;
  } catch (const std::logic_error&) {
    throw UsageError(name + ": not a number: '" + text + "'");
  }
}

// ---------------------------------------------------------------------------
// serve

std::atomic<bool> g_stop{false};

extern "C" void on_signal(int) { g_stop = true; }

struct ServeOpts {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> port;
  std::string host;
};

int run_serve(const ServeOpts& o) {
  json file = o.config.empty() ? json::object() : read_json_file(o.config);
  ServerSettings s = settings_from_json(file, modpipe_environment());
  if (o.seed) {
    s.service.seed = *o.seed;
    s.http.feed.seed = *o.seed;
  }
  if (o.port) s.http.port = *o.port;
  if (!o.host.empty()) s.http.host = o.host;

  const auto timeout = std::chrono::milliseconds(static_cast<long>(s.backend_timeout_s * 1000.0));
  std::unique_ptr<JudgeBackend> judge;
  if (s.judge == "simulated") {
    judge = std::make_unique<SimulatedJudge>(s.simjudge.is_null() ? SimJudgeTables::defaults()
                                                                   : sim_tables_from_json(s.simjudge));
  } else {
    judge = std::make_unique<HttpJudge>(s.judge, timeout, s.judge_model);
  }
  std::unique_ptr<Generator> generator;
  if (s.generator == "mock") generator = std::make_unique<MockGenerator>();
  else generator = std::make_unique<HttpGenerator>(s.generator, timeout);
  MockTransformer transformer;

  ServiceBackends backends{judge.get(), generator.get(), &transformer};
  BatchService service(s.service, backends);
  PrefsService prefs(s.http.feed, backends, s.http.d_hp_path, s.service.seed, s.service);
  HttpServer server(service, prefs, s.http);

  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  const int port = server.start();
  log_line("info", "listening", {{"host", s.http.host}, {"port", port}});
  while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
  server.stop();
  service.wait_idle();
  log_line("info", "stopped");
  return 0;
}

// ---------------------------------------------------------------------------
// gen-feed

struct FeedOpts {
  std::size_t posts = 25;
  double match_rate = 0.5;
  std::uint64_t seed = 0;
  std::size_t page = 0;
  double ad_rate = 0.0;
  int width = 32;
  int height = 32;
  std::string filter;
  std::string out = "feed.json";
};

int run_gen_feed(const FeedOpts& o) {
  if (!(o.match_rate >= 0.0 && o.match_rate <= 1.0)) throw UsageError("--match-rate must be in [0,1]");
  if (!(o.ad_rate >= 0.0 && o.ad_rate <= 1.0)) throw UsageError("--ad-rate must be in [0,1]");
  if (o.posts < 1) throw UsageError("--posts must be >= 1");
  FeedParams p;
  p.posts = o.posts;
  p.match_rate = o.match_rate;
  p.seed = o.seed;
  p.page = o.page;
  p.ad_rate = o.ad_rate;
  p.image_width = o.width;
  p.image_height = o.height;
  if (!o.filter.empty()) p.filter = filter_from_json(read_json_file(o.filter));

  const auto feed = generate_feed(p);
  std::size_t matching = 0;
  json posts = json::array();
  for (const auto& c : feed) {
    matching += post_matches(c, p.filter) ? 1 : 0;
    posts.push_back(to_json(c, PixelEncoding::Base64));
  }
  json doc{{"cursor", page_cursor(p.page)},
           {"next_cursor", page_cursor(p.page + 1)},
           {"seed", p.seed},
           {"filter", to_json(p.filter)},
           {"matching", matching},
           {"posts", posts}};
  write_output(o.out, doc.dump());
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainOpts {
  int phase = 1;
  std::vector<std::string> in;
  std::string out = "selector_model.json";
  std::string params_file;
  std::optional<int> rounds;
  std::optional<int> max_depth;
  std::optional<double> learning_rate;
  std::optional<double> min_child_weight;
  std::optional<double> lambda;
  std::uint64_t seed = 0;
  bool gen_pairs = false;
  std::string epsilon = "0.05";
  std::string weights = "2.0,1.0,0.5";
  std::vector<std::string> palette;
  std::string pairs_out;
};

enum class InputKind { Sft, Pairs, Model };

InputKind classify(const json& j, const std::string& path) {
  if (j.is_object() && j.value("format", std::string()) == "modpipe-selector") return InputKind::Model;
  if (!j.is_array()) throw UsageError(path + ": expected a dataset array or a selector model");
  if (j.empty()) return InputKind::Pairs;
  const auto& first = j.front();
  if (first.is_object() && first.contains("winner")) return InputKind::Pairs;
  if (first.is_object() && first.contains("label")) return InputKind::Sft;
  throw UsageError(path + ": unrecognised dataset records");
}

UtilityWeights parse_weights(const std::string& text) {
  std::vector<double> v;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) v.push_back(parse_double("--weights", item));
  if (v.size() != 3) throw UsageError("--weights needs three comma-separated values");
  UtilityWeights w{v[0], v[1], v[2]};
  validate(w);
  return w;
}

int run_train(const TrainOpts& o) {
  TrainParams params = o.params_file.empty() ? TrainParams{} : train_params_from_json(read_json_file(o.params_file));
  if (o.rounds) params.n_rounds = *o.rounds;
  if (o.max_depth) params.max_depth = *o.max_depth;
  if (o.learning_rate) params.learning_rate = *o.learning_rate;
  if (o.min_child_weight) params.min_child_weight = *o.min_child_weight;
  if (o.lambda) params.lambda_l2 = *o.lambda;
  params.seed = o.seed;
  try {
    validate(params);
  } catch (const Error& e) {
    throw UsageError(e.what());
  }

  std::optional<std::vector<LabeledContext>> sft;
  std::optional<std::vector<PreferencePair>> pairs;
  std::optional<SelectorModel> model;
  for (const auto& path : o.in) {
    const json j = read_json_file(path);
    switch (classify(j, path)) {
      case InputKind::Sft:
        if (sft) throw UsageError("more than one expert dataset given");
        sft = sft_from_json(j);
        break;
      case InputKind::Pairs:
        if (pairs) throw UsageError("more than one preference dataset given");
        pairs = pairs_from_json(j);
        break;
      case InputKind::Model:
        if (model) throw UsageError("more than one model given");
        model = selector_from_json(j);
        break;
    }
  }

  SelectorModel result;
  if (o.phase == 1) {
    if (!sft) throw UsageError("phase 1 needs an expert dataset (d_sft.json)");
    result = train_phase1(*sft, params);
  } else if (o.phase == 2) {
    if (o.gen_pairs) {
      if (!sft) throw UsageError("--gen-pairs needs an expert dataset (d_sft.json)");
      if (pairs) throw UsageError("--gen-pairs and a preference dataset are exclusive");
      const double epsilon = parse_double("--epsilon", o.epsilon);
      if (!(epsilon >= 0.0)) throw UsageError("--epsilon must be >= 0");
      const UtilityWeights weights = parse_weights(o.weights);
      std::vector<InterventionKind> palette;
      for (const auto& name : o.palette) palette.push_back(kind_from_string(name));
      if (palette.empty()) palette = all_kinds();
      SimulatedJudge judge;
      const std::string pairs_path = o.pairs_out.empty() ? "d_ap.json" : o.pairs_out;
      try {
        pairs = generate_preference_pairs(*sft, palette, judge, weights, epsilon);
      } catch (const PairGenerationFailed& e) {
        write_text_file(pairs_path + ".partial", to_json(std::span<const PreferencePair>(e.partial)).dump(2) + "\n");
        throw;
      }
      write_text_file(pairs_path, to_json(std::span<const PreferencePair>(*pairs)).dump(2) + "\n");
      log_line("info", "preference pairs generated", {{"pairs", pairs->size()}, {"path", pairs_path}});
    }
    if (!pairs) throw UsageError("phase 2 needs a preference dataset (d_ap.json) or --gen-pairs");
    if (pairs->empty()) {
      if (!sft) throw UsageError("no preference pairs and no expert dataset to fall back to");
      log_line("warning", "no preference pairs; phase 2 falls back to phase-1 training");
    }
    const std::vector<LabeledContext> none;
    result = train_phase2_from_pairs(sft ? *sft : none, *pairs, params);
  } else if (o.phase == 3) {
    if (!model) throw UsageError("phase 3 needs a phase-2 model");
    if (!pairs) throw UsageError("phase 3 needs a human preference dataset (d_hp.json)");
    result = train_phase3(*model, *pairs, params);
    if (result.has_flag("empty_human_data")) log_line("warning", "no human preferences; model unchanged");
  } else {
    throw UsageError("--phase must be 1, 2 or 3");
  }
  write_output(o.out, to_json(result).dump());
  log_line("info", "model written",
           {{"phase", o.phase},
            {"rounds", result.rounds.size()},
            {"final_loss", result.training_loss.empty() ? 0.0 : result.training_loss.back()},
            {"flags", result.flags}});
  return 0;
}

// ---------------------------------------------------------------------------
// simulate

struct SimulateOpts {
  std::string workload = "worst_case";
  std::string workload_file;
  std::string latency = "mid";
  std::string table;
  std::size_t concurrency = 25;
  std::size_t workers = 4;
  std::uint64_t seed = 0;
  std::size_t palette_size = 9;
  std::string out = "-";
  std::string timeline_csv;
  bool timeline = false;
};

int run_simulate(const SimulateOpts& o) {
  WorkloadParams w;
  if (o.workload == "custom") {
    if (o.workload_file.empty()) throw UsageError("--workload custom needs --workload-file");
    w = workload_from_json(read_json_file(o.workload_file));
  } else {
    try {
      w = workload_preset(o.workload);
    } catch (const Error& e) {
      throw UsageError(e.what());
    }
  }
  LatencyTable table = o.table.empty() ? LatencyTable{} : latency_table_from_json(read_json_file(o.table));
  SimConfig cfg;
  cfg.judge_concurrency = o.concurrency;
  cfg.worker_count = o.workers;
  cfg.seed = o.seed;
  try {
    cfg.sample = latency_sample_from_string(o.latency);
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  const auto counts = call_counts(w);
  const auto report = simulate_latency(w, table, cfg);

  json j{{"workload", to_json(w)},
         {"calls", to_json(counts)},
         {"total_calls", counts.T_total},
         {"latency_table", to_json(table)},
         {"sample", to_string(cfg.sample)},
         {"judge_concurrency", cfg.judge_concurrency},
         {"worker_count", cfg.worker_count},
         {"seed", cfg.seed},
         {"latency", to_json(report, o.timeline)}};
  if (w.K <= o.palette_size)
    j["pruning"] = {{"palette_size", o.palette_size},
                    {"k", w.K},
                    {"savings", pruning_savings(o.palette_size, w.K)}};
  write_output(o.out, j.dump(2));
  if (!o.timeline_csv.empty()) {
    std::ostringstream csv;
    write_timeline_csv(report, csv);
    write_text_file(o.timeline_csv, csv.str());
  }
  return 0;
}

// ---------------------------------------------------------------------------
// analyze

int run_analyze(const std::string& prefs, const std::string& out) {
  write_output(out, alignment_report(read_json_file(prefs)).dump(2));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"modpipe: content intervention pipeline"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "modpipe 0.1.0");

  ServeOpts serve;
  auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP service");
  serve_cmd->add_option("--config", serve.config, "JSON config file")->check(CLI::ExistingFile);
  serve_cmd->add_option("--seed", serve.seed, "RNG seed");
  serve_cmd->add_option("--port", serve.port, "Listen port (0 picks a free one)");
  serve_cmd->add_option("--host", serve.host, "Listen address");

  FeedOpts feed;
  auto* feed_cmd = app.add_subcommand("gen-feed", "Write a synthetic annotated feed");
  feed_cmd->add_option("--posts", feed.posts, "Posts per page")->capture_default_str();
  feed_cmd->add_option("--match-rate", feed.match_rate, "Share of filter-matching posts")->capture_default_str();
  feed_cmd->add_option("--seed", feed.seed, "RNG seed")->capture_default_str();
  feed_cmd->add_option("--page", feed.page, "Page index")->capture_default_str();
  feed_cmd->add_option("--ad-rate", feed.ad_rate, "Share of ads")->capture_default_str();
  feed_cmd->add_option("--width", feed.width, "Image width")->check(CLI::Range(1, 4096));
  feed_cmd->add_option("--height", feed.height, "Image height")->check(CLI::Range(1, 4096));
  feed_cmd->add_option("--filter", feed.filter, "Filter JSON file")->check(CLI::ExistingFile);
  feed_cmd->add_option("-o,--out", feed.out, "Output path, - for stdout")->capture_default_str();

  TrainOpts train;
  auto* train_cmd = app.add_subcommand("train", "Train the selector");
  train_cmd->add_option("--phase", train.phase, "1, 2 or 3")->required()->check(CLI::IsMember({1, 2, 3}));
  train_cmd->add_option("--in", train.in, "Input files (datasets, phase-2 model)")->check(CLI::ExistingFile);
  train_cmd->add_option("--out", train.out, "Model output path")->capture_default_str();
  train_cmd->add_option("--params", train.params_file, "Training parameter JSON file")->check(CLI::ExistingFile);
  train_cmd->add_option("--rounds", train.rounds, "Boosting rounds");
  train_cmd->add_option("--max-depth", train.max_depth, "Tree depth");
  train_cmd->add_option("--learning-rate", train.learning_rate, "Shrinkage");
  train_cmd->add_option("--min-child-weight", train.min_child_weight, "Minimum hessian per leaf");
  train_cmd->add_option("--lambda", train.lambda, "L2 leaf penalty");
  train_cmd->add_option("--seed", train.seed, "RNG seed")->capture_default_str();
  train_cmd->add_flag("--gen-pairs", train.gen_pairs, "Generate preference pairs before phase 2");
  train_cmd->add_option("--epsilon", train.epsilon, "Utility margin threshold (inf allowed)")->capture_default_str();
  train_cmd->add_option("--weights", train.weights, "Utility weights goal,coh,fact")->capture_default_str();
  train_cmd->add_option("--palette", train.palette, "Kinds compared during pair generation");
  train_cmd->add_option("--pairs-out", train.pairs_out, "Where generated pairs go (default d_ap.json)");

  SimulateOpts sim;
  auto* sim_cmd = app.add_subcommand("simulate", "Call counts and latency simulation");
  sim_cmd->add_option("--workload", sim.workload, "worst_case, no_matches, typical or custom")->capture_default_str();
  sim_cmd->add_option("--workload-file", sim.workload_file, "Custom workload JSON")->check(CLI::ExistingFile);
  sim_cmd->add_option("--latency", sim.latency, "min, max, mid or uniform")->capture_default_str();
  sim_cmd->add_option("--table", sim.table, "Latency table JSON")->check(CLI::ExistingFile);
  sim_cmd->add_option("--concurrency", sim.concurrency, "Judge concurrency")->capture_default_str();
  sim_cmd->add_option("--workers", sim.workers, "Background workers")->capture_default_str();
  sim_cmd->add_option("--seed", sim.seed, "RNG seed")->capture_default_str();
  sim_cmd->add_option("--palette-size", sim.palette_size, "Palette size for pruning savings")->capture_default_str();
  sim_cmd->add_option("-o,--out", sim.out, "Report path, - for stdout")->capture_default_str();
  sim_cmd->add_option("--timeline-csv", sim.timeline_csv, "Write the event timeline as CSV");
  sim_cmd->add_flag("--timeline", sim.timeline, "Include the timeline in the report");

  std::string prefs_path, analyze_out = "-";
  auto* analyze_cmd = app.add_subcommand("analyze", "Alignment statistics over human preferences");
  analyze_cmd->add_option("--prefs", prefs_path, "d_hp.json")->required()->check(CLI::ExistingFile);
  analyze_cmd->add_option("-o,--out", analyze_out, "Report path, - for stdout")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    return fail(kUsage, "UsageError", msg);
  }

  try {
    if (*serve_cmd) return run_serve(serve);
    if (*feed_cmd) return run_gen_feed(feed);
    if (*train_cmd) return run_train(train);
    if (*sim_cmd) return run_simulate(sim);
    if (*analyze_cmd) return run_analyze(prefs_path, analyze_out);
  } catch (const UsageError& e) {
    return fail(kUsage, e.code(), e.what());
  } catch (const Error& e) {
    return fail(kRuntime, e.code(), e.what());
  } catch (const std::exception& e) {
    return fail(kRuntime, "Internal", e.what());
  }
  return fail(kUsage, "UsageError", "no subcommand");
}
