#pragma once

// Domain types shared by every module: filters, content items, intervention
// kinds, context vectors, rubric scores and training records, plus their
// canonical JSON forms.

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace modpipe {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Errors

class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}
  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

class ParseError : public Error {
 public:
  explicit ParseError(const std::string& message) : Error("ParseError", message) {}
};

/// Raised when a value violates a type invariant. `field()` names the
/// offending field so callers can report it without parsing the message.
class ValidationError : public Error {
 public:
  ValidationError(std::string field, const std::string& message)
      : Error("ValidationError", field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& message) : Error("ConfigError", message) {}
};

// ---------------------------------------------------------------------------
// Filters

enum class Modality { Text, Image, Both };

std::string_view to_string(Modality m);
Modality modality_from_string(std::string_view s);
bool covers_text(Modality m);
bool covers_image(Modality m);

enum class DurationKind { Hours24, Week, Never, Custom };

struct Duration {
  DurationKind kind = DurationKind::Never;
  std::int64_t seconds = 0;  // only meaningful for Custom

  static Duration hours24() { return {DurationKind::Hours24, 0}; }
  static Duration week() { return {DurationKind::Week, 0}; }
  static Duration never() { return {DurationKind::Never, 0}; }
  static Duration custom(std::int64_t s) { return {DurationKind::Custom, s}; }

  bool operator==(const Duration&) const = default;
};

struct Filter {
  std::string id;
  std::string description;
  int sensitivity = 3;
  Modality modality = Modality::Both;
  Duration duration;
  std::map<std::string, std::string> metadata;
  std::int64_t created_at = 0;

  bool operator==(const Filter&) const = default;
};

void validate(const Filter& f);

/// Whether the filter is still in force at `now` (unix seconds).
bool filter_is_active(const Filter& f, std::int64_t now);

std::vector<Filter> active_filters(std::span<const Filter> filters, std::int64_t now);

json to_json(const Filter& f);
Filter filter_from_json(const json& j);
std::string filter_to_json(const Filter& f);
Filter filter_from_json(std::string_view text);

/// Canonical bytes of the parameters that influence processing (no id, no
/// lifecycle fields). Used for content-addressed cache keys.
std::string filter_params_canonical(const Filter& f);

// ---------------------------------------------------------------------------
// Images and content

struct NormRect {
  double x0 = 0, y0 = 0, x1 = 1, y1 = 1;

  double area() const { return (x1 - x0) * (y1 - y0); }
  bool operator==(const NormRect&) const = default;
};

void validate(const NormRect& r);

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  bool operator==(const Rgb&) const = default;
};

class ImageBuffer {
 public:
  ImageBuffer() = default;
  ImageBuffer(int width, int height, Rgb fill = {});
  ImageBuffer(int width, int height, std::vector<std::uint8_t> pixels);

  int width() const { return width_; }
  int height() const { return height_; }
  bool empty() const { return pixels_.empty(); }

  std::span<const std::uint8_t> pixels() const { return pixels_; }
  std::span<std::uint8_t> pixels() { return pixels_; }

  std::uint8_t at(int x, int y, int c) const {
    return pixels_[(static_cast<std::size_t>(y) * width_ + x) * 3 + c];
  }
  std::uint8_t& at(int x, int y, int c) {
    return pixels_[(static_cast<std::size_t>(y) * width_ + x) * 3 + c];
  }
  Rgb rgb(int x, int y) const { return {at(x, y, 0), at(x, y, 1), at(x, y, 2)}; }
  void set(int x, int y, Rgb c) {
    at(x, y, 0) = c.r;
    at(x, y, 1) = c.g;
    at(x, y, 2) = c.b;
  }

  bool operator==(const ImageBuffer&) const = default;

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<std::uint8_t> pixels_;
};

struct TriggerAnnotation {
  NormRect region;
  double severity = 0.0;
  double salience = 0.0;
  std::string label;

  bool operator==(const TriggerAnnotation&) const = default;
};

void validate(const TriggerAnnotation& a);

/// Case-insensitive: the annotation label occurs in the filter description
/// and the annotation carries nonzero severity.
bool annotation_matches(const TriggerAnnotation& a, const Filter& f);

struct ContentItem {
  std::string id;
  int position = 0;
  std::optional<std::string> text;
  std::optional<ImageBuffer> image;
  std::vector<TriggerAnnotation> annotations;
  bool is_ad = false;

  bool operator==(const ContentItem&) const = default;
};

void validate(const ContentItem& c);

/// How pixel payloads travel alongside content JSON.
enum class PixelEncoding {
  SideChannel,  // {"image":{"ref":<content id>,"width","height"}} + ImageStore
  Base64,       // {"image":{"width","height","pixels_b64"}}
};

using ImageStore = std::map<std::string, ImageBuffer>;

json to_json(const ContentItem& c, PixelEncoding enc = PixelEncoding::SideChannel);
ContentItem content_from_json(const json& j, const ImageStore* side_channel = nullptr);

/// Canonical bytes identifying the text (or image) payload of a post.
std::string text_canonical(const ContentItem& c);
std::string image_canonical(const ContentItem& c);

// ---------------------------------------------------------------------------
// Interventions

enum class InterventionKind : std::uint8_t {
  Blur = 0,
  Occlusion,
  WarningOverlay,
  Inpainting,
  Replacement,
  Shrink,
  StyleCubism,
  StyleGhibli,
  StyleImpressionism,
  StylePointillism,
  TextBlur,
  TextRewrite,
  TextOverlay,
};

inline constexpr std::size_t kKindCount = 13;

enum class StyleScope { Region, FullImage };

constexpr std::size_t index_of(InterventionKind k) { return static_cast<std::size_t>(k); }
InterventionKind kind_from_index(std::size_t i);
std::string_view to_string(InterventionKind k);
InterventionKind kind_from_string(std::string_view s);
std::string_view to_string(StyleScope s);
StyleScope scope_from_string(std::string_view s);

bool is_image_kind(InterventionKind k);
bool is_text_kind(InterventionKind k);
bool is_style_kind(InterventionKind k);
/// Kinds rendered in-process (pixel obfuscation and CSS-level text marks).
bool is_local_kind(InterventionKind k);

std::vector<InterventionKind> all_kinds();
std::vector<InterventionKind> image_kinds();
std::vector<InterventionKind> text_kinds();
/// Palette entries applicable to the given modality (Both keeps all).
std::vector<InterventionKind> kinds_for(Modality m, std::span<const InterventionKind> palette);

// ---------------------------------------------------------------------------
// Context vector

/// Policy input [c_sens, c_sal, c_scale, c_feas, c_mod]. All components are
/// checked on construction.
class ContextVector {
 public:
  static constexpr std::size_t kSize = 5;

  ContextVector() = default;
  ContextVector(double sens, double sal, double scale, double feas, double mod);
  explicit ContextVector(std::span<const double> values);

  double sens() const { return v_[0]; }
  double sal() const { return v_[1]; }
  double scale() const { return v_[2]; }
  double feas() const { return v_[3]; }
  double mod() const { return v_[4]; }
  double operator[](std::size_t i) const { return v_[i]; }
  const std::array<double, kSize>& values() const { return v_; }

  bool operator==(const ContextVector&) const = default;

 private:
  std::array<double, kSize> v_{0, 0, 0, 0, 0};
};

double sensitivity_component(int sensitivity);
double modality_component(Modality m);

json to_json(const ContextVector& c);
ContextVector context_from_json(const json& j);

// ---------------------------------------------------------------------------
// Rubric scores

enum class Rubric { Training3Dim, Deployment4Dim };

std::string_view to_string(Rubric r);
Rubric rubric_from_string(std::string_view s);

/// Rubric judge output. Only the dimensions of the selected rubric are
/// populated; the others stay empty.
struct ScoreVector {
  Rubric rubric = Rubric::Training3Dim;
  std::optional<double> goal_alignment;
  std::optional<double> coherence;
  std::optional<double> factual_integrity;
  std::optional<double> emotional_impact;
  std::optional<double> appropriateness_penalty;

  static ScoreVector training(double goal, double coh, double fact);
  static ScoreVector deployment(double coh, double fact, double emotional, double penalty);

  bool operator==(const ScoreVector&) const = default;
};

void validate(const ScoreVector& s);
json to_json(const ScoreVector& s);
ScoreVector scores_from_json(const json& j);

// ---------------------------------------------------------------------------
// Training records

enum class PairSource { Automated, Human };

struct PreferencePair {
  ContextVector context;
  InterventionKind winner = InterventionKind::Blur;
  InterventionKind loser = InterventionKind::Occlusion;
  std::optional<double> margin;
  PairSource source = PairSource::Automated;

  bool operator==(const PreferencePair&) const = default;
};

void validate(const PreferencePair& p);
json to_json(const PreferencePair& p);
PreferencePair pair_from_json(const json& j);

struct WeightedExample {
  ContextVector context;
  InterventionKind label = InterventionKind::Blur;
  double weight = 1.0;

  bool operator==(const WeightedExample&) const = default;
};

void validate(const WeightedExample& e);
json to_json(const WeightedExample& e);
WeightedExample example_from_json(const json& j);

struct LabeledContext {
  ContextVector context;
  InterventionKind label = InterventionKind::Blur;

  bool operator==(const LabeledContext&) const = default;
};

// Dataset files. d_sft.json: [{context:[5], label:name}], d_ap.json and
// d_hp.json: [PreferencePair]. Extra keys on pair records are ignored.
std::vector<LabeledContext> sft_from_json(const json& j);
json to_json(std::span<const LabeledContext> d);
std::vector<PreferencePair> pairs_from_json(const json& j);
json to_json(std::span<const PreferencePair> d);

json parse_json(std::string_view text);
json read_json_file(const std::string& path);
/// Writes `path` via a temporary sibling and rename.
void write_text_file(const std::string& path, std::string_view contents);

}  // namespace modpipe
