#include "fixtures.hpp"

#include <random>
#include <thread>

namespace fixtures {

Filter make_filter(const std::string& description, int sensitivity, Modality modality, const std::string& id) {
  Filter f;
  f.id = id;
  f.description = description;
  f.sensitivity = sensitivity;
  f.modality = modality;
  f.duration = Duration::never();
  return f;
}

ContentItem annotated_post(const std::string& id, int position, const std::string& label, double severity,
                           double salience, bool with_text, bool with_image, NormRect region, int size) {
  ContentItem c;
  c.id = id;
  c.position = position;
  if (with_text) c.text = "A picture of " + label + " at the scene.";
  if (with_image) {
    ImageBuffer img(size, size, Rgb{200, 180, 160});
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        if ((x + y) % 3 == 0) img.set(x, y, Rgb{static_cast<std::uint8_t>(10 * x), static_cast<std::uint8_t>(7 * y), 90});
    c.image = std::move(img);
  }
  c.annotations.push_back({region, severity, salience, label});
  return c;
}

std::vector<ContentItem> matching_batch(std::size_t n, std::uint64_t seed) {
  FeedParams p;
  p.posts = n;
  p.match_rate = 1.0;
  p.seed = seed;
  return generate_feed(p);
}

std::uint64_t reference_fnv1a64(const std::string& bytes) {
  std::uint64_t hash = 14695981039346656037ull;
  for (unsigned char octet : bytes) {
    hash = hash ^ octet;
    hash = hash * 1099511628211ull;
  }
  return hash;
}

ImageBuffer SlowGenerator::generate(const GenerationRequest& request) const {
  std::this_thread::sleep_for(delay_);
  return inner_.generate(request);
}

ImageBuffer FailingGenerator::generate(const GenerationRequest&) const {
  ++calls;
  throw GeneratorUnavailable("generator offline");
}

ScriptedJudge::ScriptedJudge(double latency_scale, LatencyTable table) : scale_(latency_scale), table_(table) {}

void ScriptedJudge::pause(Op op) const {
  if (scale_ <= 0.0) return;
  const auto& r = table_[op];
  std::this_thread::sleep_for(std::chrono::duration<double>(scale_ * 0.5 * (r.min_s + r.max_s)));
}

std::vector<TextMatch> ScriptedJudge::match_text(const ContentItem& c, std::span<const Filter> f) {
  pause(Op::TextMatch);
  if (fail_match_text) throw BackendError("text matching unavailable");
  return inner_.match_text(c, f);
}

ImageAssessment ScriptedJudge::assess_image(const ContentItem& c, std::span<const UserContext> u,
                                            std::span<const InterventionKind> p) {
  pause(Op::ImageMatch);
  if (fail_assess_image) throw BackendError("image matching unavailable");
  return inner_.assess_image(c, u, p);
}

InterventionKind ScriptedJudge::select_text(const ContentItem& c, const UserContext& u,
                                            std::span<const InterventionKind> p) {
  pause(Op::TextSelect);
  return inner_.select_text(c, u, p);
}

std::string ScriptedJudge::analyze(const ScoringRequest& r) {
  pause(Op::ImageScore);
  return inner_.analyze(r);
}

ScoreVector ScriptedJudge::score(const ScoringRequest& r, const std::string& a) {
  if (fail_score) throw BackendError("scorer unavailable");
  return inner_.score(r, a);
}

ScoreVector ScriptedJudge::rubric(const ContextVector& c, InterventionKind k) { return inner_.rubric(c, k); }

TempDir::TempDir() {
  std::random_device rd;
  path_ = std::filesystem::temp_directory_path() /
          ("modpipe-test-" + std::to_string(rd()) + "-" + std::to_string(rd()));
  std::filesystem::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  std::filesystem::remove_all(path_, ec);
}

}  // namespace fixtures
