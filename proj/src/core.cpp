#include "modpipe/core.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "modpipe/encoding.hpp"

namespace modpipe {

namespace {

constexpr std::array<std::string_view, kKindCount> kKindNames = {
    "Blur",        "Occlusion",          "WarningOverlay",   "Inpainting", "Replacement",
    "Shrink",      "StyleCubism",        "StyleGhibli",      "StyleImpressionism",
    "StylePointillism", "TextBlur",      "TextRewrite",      "TextOverlay",
};

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

std::string_view trim(std::string_view s) {
  auto is_space = [](char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; };
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

const json& field(const json& j, const char* name) {
  if (!j.is_object()) throw ValidationError(name, "enclosing value is not an object");
  auto it = j.find(name);
  if (it == j.end()) throw ValidationError(name, "missing");
  return *it;
}

std::string get_string(const json& j, const char* name) {
  const json& v = field(j, name);
  if (!v.is_string()) throw ValidationError(name, "expected a string");
  return v.get<std::string>();
}

std::int64_t get_int(const json& j, const char* name) {
  const json& v = field(j, name);
  if (!v.is_number_integer()) throw ValidationError(name, "expected an integer");
  return v.get<std::int64_t>();
}

double get_double(const json& j, const char* name) {
  const json& v = field(j, name);
  if (!v.is_number()) throw ValidationError(name, "expected a number");
  return v.get<double>();
}

bool in_unit(double v) { return std::isfinite(v) && v >= 0.0 && v <= 1.0; }

json rect_to_json(const NormRect& r) { return json::array({r.x0, r.y0, r.x1, r.y1}); }

NormRect rect_from_json(const json& j) {
  if (!j.is_array() || j.size() != 4) throw ValidationError("region", "expected [x0,y0,x1,y1]");
  for (const auto& v : j)
    if (!v.is_number()) throw ValidationError("region", "expected numbers");
  NormRect r{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
  validate(r);
  return r;
}

}  // namespace

// ---------------------------------------------------------------------------

std::string_view to_string(Modality m) {
  switch (m) {
    case Modality::Text: return "Text";
    case Modality::Image: return "Image";
    case Modality::Both: return "Both";
  }
  return "Both";
}

Modality modality_from_string(std::string_view s) {
  if (s == "Text") return Modality::Text;
  if (s == "Image") return Modality::Image;
  if (s == "Both") return Modality::Both;
  throw ValidationError("modality", "unknown modality '" + std::string(s) + "'");
}

bool covers_text(Modality m) { return m != Modality::Image; }
bool covers_image(Modality m) { return m != Modality::Text; }

void validate(const Filter& f) {
  if (trim(f.description).empty()) throw ValidationError("description", "must not be empty");
  if (f.sensitivity < 1 || f.sensitivity > 5)
    throw ValidationError("sensitivity", "must be within 1..5, got " + std::to_string(f.sensitivity));
  if (f.duration.kind == DurationKind::Custom && f.duration.seconds <= 0)
    throw ValidationError("duration", "custom duration must be positive");
}

bool filter_is_active(const Filter& f, std::int64_t now) {
  const std::int64_t age = now - f.created_at;
  switch (f.duration.kind) {
    case DurationKind::Never: return true;
    case DurationKind::Hours24: return age < 86400;
    case DurationKind::Week: return age < 604800;
    case DurationKind::Custom: return age < f.duration.seconds;
  }
  return false;
}

std::vector<Filter> active_filters(std::span<const Filter> filters, std::int64_t now) {
  std::vector<Filter> out;
  for (const auto& f : filters)
    if (filter_is_active(f, now)) out.push_back(f);
  return out;
}

json to_json(const Filter& f) {
  json duration;
  switch (f.duration.kind) {
    case DurationKind::Hours24: duration["kind"] = "Hours24"; break;
    case DurationKind::Week: duration["kind"] = "Week"; break;
    case DurationKind::Never: duration["kind"] = "Never"; break;
    case DurationKind::Custom:
      duration["kind"] = "Custom";
      duration["seconds"] = f.duration.seconds;
      break;
  }
  json meta = json::object();
  for (const auto& [k, v] : f.metadata) meta[k] = v;
  return json{{"id", f.id},
              {"description", f.description},
              {"sensitivity", f.sensitivity},
              {"modality", to_string(f.modality)},
              {"duration", duration},
              {"metadata", meta},
              {"created_at", f.created_at}};
}

Filter filter_from_json(const json& j) {
  if (!j.is_object()) throw ParseError("filter must be a JSON object");
  Filter f;
  f.id = get_string(j, "id");
  f.description = get_string(j, "description");
  f.sensitivity = static_cast<int>(std::clamp<std::int64_t>(get_int(j, "sensitivity"), -1, 99));
  f.modality = modality_from_string(get_string(j, "modality"));
  const json& d = field(j, "duration");
  const std::string kind = get_string(d, "kind");
  if (kind == "Hours24") f.duration = Duration::hours24();
  else if (kind == "Week") f.duration = Duration::week();
  else if (kind == "Never") f.duration = Duration::never();
  else if (kind == "Custom") f.duration = Duration::custom(get_int(d, "seconds"));
  else throw ValidationError("duration", "unknown duration kind '" + kind + "'");
  if (auto it = j.find("metadata"); it != j.end()) {
    if (!it->is_object()) throw ValidationError("metadata", "expected an object");
    for (auto m = it->begin(); m != it->end(); ++m) {
      if (!m->is_string()) throw ValidationError("metadata", "values must be strings");
      f.metadata[m.key()] = m->get<std::string>();
    }
  }
  f.created_at = get_int(j, "created_at");
  validate(f);
  return f;
}

std::string filter_to_json(const Filter& f) { return to_json(f).dump(); }

Filter filter_from_json(std::string_view text) { return filter_from_json(parse_json(text)); }

std::string filter_params_canonical(const Filter& f) {
  json meta = json::object();
  for (const auto& [k, v] : f.metadata) meta[k] = v;
  return json{{"description", f.description},
              {"metadata", meta},
              {"modality", to_string(f.modality)},
              {"sensitivity", f.sensitivity}}
      .dump();
}

// ---------------------------------------------------------------------------

void validate(const NormRect& r) {
  if (!(in_unit(r.x0) && in_unit(r.x1) && r.x0 < r.x1))
    throw ValidationError("region", "need 0 <= x0 < x1 <= 1");
  if (!(in_unit(r.y0) && in_unit(r.y1) && r.y0 < r.y1))
    throw ValidationError("region", "need 0 <= y0 < y1 <= 1");
}

ImageBuffer::ImageBuffer(int width, int height, Rgb fill) : width_(width), height_(height) {
  if (width <= 0 || height <= 0) throw ValidationError("image", "dimensions must be positive");
  pixels_.resize(static_cast<std::size_t>(width) * height * 3);
  for (std::size_t i = 0; i < pixels_.size(); i += 3) {
    pixels_[i] = fill.r;
    pixels_[i + 1] = fill.g;
    pixels_[i + 2] = fill.b;
  }
}

ImageBuffer::ImageBuffer(int width, int height, std::vector<std::uint8_t> pixels)
    : width_(width), height_(height), pixels_(std::move(pixels)) {
  if (width <= 0 || height <= 0) throw ValidationError("image", "dimensions must be positive");
  if (pixels_.size() != static_cast<std::size_t>(width) * height * 3)
    throw ValidationError("image", "pixel buffer length must be width*height*3");
}

void validate(const TriggerAnnotation& a) {
  validate(a.region);
  if (!in_unit(a.severity)) throw ValidationError("severity", "must be within [0,1]");
  if (!in_unit(a.salience)) throw ValidationError("salience", "must be within [0,1]");
}

bool annotation_matches(const TriggerAnnotation& a, const Filter& f) {
  if (a.severity <= 0.0 || a.label.empty()) return false;
  return lower(f.description).find(lower(a.label)) != std::string::npos;
}

void validate(const ContentItem& c) {
  if (!c.text && !c.image) throw ValidationError("content", "needs text or an image");
  if (c.position < 0) throw ValidationError("position", "must be non-negative");
  for (const auto& a : c.annotations) validate(a);
}

json to_json(const ContentItem& c, PixelEncoding enc) {
  json j{{"id", c.id}, {"position", c.position}, {"is_ad", c.is_ad}};
  if (c.text) j["text"] = *c.text;
  if (c.image) {
    json img{{"width", c.image->width()}, {"height", c.image->height()}};
    if (enc == PixelEncoding::Base64) img["pixels_b64"] = base64_encode(c.image->pixels());
    else img["ref"] = c.id;
    j["image"] = img;
  }
  json anns = json::array();
  for (const auto& a : c.annotations)
    anns.push_back({{"region", rect_to_json(a.region)},
                    {"severity", a.severity},
                    {"salience", a.salience},
                    {"label", a.label}});
  j["annotations"] = anns;
  return j;
}

ContentItem content_from_json(const json& j, const ImageStore* side_channel) {
  if (!j.is_object()) throw ParseError("content item must be a JSON object");
  ContentItem c;
  c.id = get_string(j, "id");
  c.position = static_cast<int>(get_int(j, "position"));
  if (auto it = j.find("is_ad"); it != j.end()) {
    if (!it->is_boolean()) throw ValidationError("is_ad", "expected a boolean");
    c.is_ad = it->get<bool>();
  }
  if (auto it = j.find("text"); it != j.end() && !it->is_null()) {
    if (!it->is_string()) throw ValidationError("text", "expected a string");
    c.text = it->get<std::string>();
  }
  if (auto it = j.find("image"); it != j.end() && !it->is_null()) {
    const json& img = *it;
    const int w = static_cast<int>(get_int(img, "width"));
    const int h = static_cast<int>(get_int(img, "height"));
    if (auto p = img.find("pixels_b64"); p != img.end()) {
      if (!p->is_string()) throw ValidationError("pixels_b64", "expected a string");
      c.image = ImageBuffer(w, h, base64_decode(p->get<std::string>()));
    } else {
      const std::string ref = get_string(img, "ref");
      if (!side_channel) throw ValidationError("image", "pixel side channel unavailable for '" + ref + "'");
      auto found = side_channel->find(ref);
      if (found == side_channel->end()) throw ValidationError("image", "unknown image ref '" + ref + "'");
      if (found->second.width() != w || found->second.height() != h)
        throw ValidationError("image", "side-channel dimensions disagree for '" + ref + "'");
      c.image = found->second;
    }
  }
  if (auto it = j.find("annotations"); it != j.end()) {
    if (!it->is_array()) throw ValidationError("annotations", "expected an array");
    for (const auto& a : *it) {
      TriggerAnnotation t;
      t.region = rect_from_json(field(a, "region"));
      t.severity = get_double(a, "severity");
      t.salience = get_double(a, "salience");
      t.label = get_string(a, "label");
      validate(t);
      c.annotations.push_back(std::move(t));
    }
  }
  validate(c);
  return c;
}

std::string text_canonical(const ContentItem& c) { return "text\n" + c.text.value_or(""); }

std::string image_canonical(const ContentItem& c) {
  if (!c.image) return "image\n";
  std::string out = "image\n" + std::to_string(c.image->width()) + "x" +
                    std::to_string(c.image->height()) + "\n";
  auto px = c.image->pixels();
  out.append(reinterpret_cast<const char*>(px.data()), px.size());
  return out;
}

// ---------------------------------------------------------------------------

InterventionKind kind_from_index(std::size_t i) {
  if (i >= kKindCount) throw ValidationError("kind", "index out of range: " + std::to_string(i));
  return static_cast<InterventionKind>(i);
}

std::string_view to_string(InterventionKind k) { return kKindNames[index_of(k)]; }

InterventionKind kind_from_string(std::string_view s) {
  for (std::size_t i = 0; i < kKindCount; ++i)
    if (kKindNames[i] == s) return static_cast<InterventionKind>(i);
  throw ValidationError("kind", "unknown intervention kind '" + std::string(s) + "'");
}

std::string_view to_string(StyleScope s) { return s == StyleScope::Region ? "Region" : "FullImage"; }

StyleScope scope_from_string(std::string_view s) {
  if (s == "Region") return StyleScope::Region;
  if (s == "FullImage") return StyleScope::FullImage;
  throw ValidationError("scope", "unknown style scope '" + std::string(s) + "'");
}

bool is_image_kind(InterventionKind k) { return index_of(k) <= index_of(InterventionKind::StylePointillism); }
bool is_text_kind(InterventionKind k) { return !is_image_kind(k); }

bool is_style_kind(InterventionKind k) {
  return index_of(k) >= index_of(InterventionKind::StyleCubism) &&
         index_of(k) <= index_of(InterventionKind::StylePointillism);
}

bool is_local_kind(InterventionKind k) {
  switch (k) {
    case InterventionKind::Blur:
    case InterventionKind::Occlusion:
    case InterventionKind::WarningOverlay:
    case InterventionKind::TextBlur:
    case InterventionKind::TextOverlay: return true;
    default: return false;
  }
}

std::vector<InterventionKind> all_kinds() {
  std::vector<InterventionKind> v;
  for (std::size_t i = 0; i < kKindCount; ++i) v.push_back(static_cast<InterventionKind>(i));
  return v;
}

std::vector<InterventionKind> image_kinds() {
  std::vector<InterventionKind> v;
  for (auto k : all_kinds())
    if (is_image_kind(k)) v.push_back(k);
  return v;
}

std::vector<InterventionKind> text_kinds() {
  std::vector<InterventionKind> v;
  for (auto k : all_kinds())
    if (is_text_kind(k)) v.push_back(k);
  return v;
}

std::vector<InterventionKind> kinds_for(Modality m, std::span<const InterventionKind> palette) {
  std::vector<InterventionKind> v;
  for (auto k : palette)
    if ((is_text_kind(k) && covers_text(m)) || (is_image_kind(k) && covers_image(m))) v.push_back(k);
  return v;
}

// ---------------------------------------------------------------------------

ContextVector::ContextVector(double sens, double sal, double scale, double feas, double mod)
    : v_{sens, sal, scale, feas, mod} {
  static constexpr const char* kNames[] = {"c_sens", "c_sal", "c_scale", "c_feas", "c_mod"};
  for (std::size_t i = 0; i < kSize; ++i)
    if (!in_unit(v_[i])) throw ValidationError(kNames[i], "must be within [0,1]");
  if (mod != 0.0 && mod != 0.5 && mod != 1.0) throw ValidationError("c_mod", "must be 0, 0.5 or 1");
}

ContextVector::ContextVector(std::span<const double> values) {
  if (values.size() != kSize) throw ValidationError("context", "expected exactly 5 components");
  *this = ContextVector(values[0], values[1], values[2], values[3], values[4]);
}

double sensitivity_component(int sensitivity) { return (sensitivity - 1) / 4.0; }

double modality_component(Modality m) {
  switch (m) {
    case Modality::Text: return 0.0;
    case Modality::Both: return 0.5;
    case Modality::Image: return 1.0;
  }
  return 0.5;
}

json to_json(const ContextVector& c) {
  json a = json::array();
  for (double v : c.values()) a.push_back(v);
  return a;
}

ContextVector context_from_json(const json& j) {
  if (!j.is_array()) throw ValidationError("context", "expected an array of 5 numbers");
  std::vector<double> v;
  for (const auto& e : j) {
    if (!e.is_number()) throw ValidationError("context", "expected numbers");
    v.push_back(e.get<double>());
  }
  return ContextVector(v);
}

// ---------------------------------------------------------------------------

std::string_view to_string(Rubric r) { return r == Rubric::Training3Dim ? "Training3Dim" : "Deployment4Dim"; }

Rubric rubric_from_string(std::string_view s) {
  if (s == "Training3Dim") return Rubric::Training3Dim;
  if (s == "Deployment4Dim") return Rubric::Deployment4Dim;
  throw ValidationError("rubric", "unknown rubric '" + std::string(s) + "'");
}

ScoreVector ScoreVector::training(double goal, double coh, double fact) {
  ScoreVector s;
  s.rubric = Rubric::Training3Dim;
  s.goal_alignment = goal;
  s.coherence = coh;
  s.factual_integrity = fact;
  validate(s);
  return s;
}

ScoreVector ScoreVector::deployment(double coh, double fact, double emotional, double penalty) {
  ScoreVector s;
  s.rubric = Rubric::Deployment4Dim;
  s.coherence = coh;
  s.factual_integrity = fact;
  s.emotional_impact = emotional;
  s.appropriateness_penalty = penalty;
  validate(s);
  return s;
}

void validate(const ScoreVector& s) {
  auto check = [](const std::optional<double>& v, const char* name, bool required) {
    if (required && !v) throw ValidationError(name, "required by rubric but absent");
    if (!required && v) throw ValidationError(name, "not part of this rubric");
    if (v && !in_unit(*v)) throw ValidationError(name, "must be within [0,1]");
  };
  const bool train = s.rubric == Rubric::Training3Dim;
  check(s.goal_alignment, "goal_alignment", train);
  check(s.coherence, "coherence", true);
  check(s.factual_integrity, "factual_integrity", true);
  check(s.emotional_impact, "emotional_impact", !train);
  check(s.appropriateness_penalty, "appropriateness_penalty", !train);
}

json to_json(const ScoreVector& s) {
  json j{{"rubric", to_string(s.rubric)}};
  if (s.goal_alignment) j["goal_alignment"] = *s.goal_alignment;
  if (s.coherence) j["coherence"] = *s.coherence;
  if (s.factual_integrity) j["factual_integrity"] = *s.factual_integrity;
  if (s.emotional_impact) j["emotional_impact"] = *s.emotional_impact;
  if (s.appropriateness_penalty) j["appropriateness_penalty"] = *s.appropriateness_penalty;
  return j;
}

ScoreVector scores_from_json(const json& j) {
  ScoreVector s;
  s.rubric = rubric_from_string(get_string(j, "rubric"));
  auto opt = [&](const char* name) -> std::optional<double> {
    if (!j.contains(name)) return std::nullopt;
    return get_double(j, name);
  };
  s.goal_alignment = opt("goal_alignment");
  s.coherence = opt("coherence");
  s.factual_integrity = opt("factual_integrity");
  s.emotional_impact = opt("emotional_impact");
  s.appropriateness_penalty = opt("appropriateness_penalty");
  validate(s);
  return s;
}

// ---------------------------------------------------------------------------

void validate(const PreferencePair& p) {
  if (p.winner == p.loser) throw ValidationError("winner", "winner and loser must differ");
  if (p.margin && !(std::isfinite(*p.margin) && *p.margin > 0.0))
    throw ValidationError("margin", "must be positive");
  if (p.source == PairSource::Automated && !p.margin)
    throw ValidationError("margin", "automated pairs carry a margin");
}

json to_json(const PreferencePair& p) {
  json j{{"context", to_json(p.context)},
         {"winner", to_string(p.winner)},
         {"loser", to_string(p.loser)},
         {"source", p.source == PairSource::Automated ? "Automated" : "Human"}};
  if (p.margin) j["margin"] = *p.margin;
  return j;
}

PreferencePair pair_from_json(const json& j) {
  PreferencePair p;
  p.context = context_from_json(field(j, "context"));
  p.winner = kind_from_string(get_string(j, "winner"));
  p.loser = kind_from_string(get_string(j, "loser"));
  const std::string src = get_string(j, "source");
  if (src == "Automated") p.source = PairSource::Automated;
  else if (src == "Human") p.source = PairSource::Human;
  else throw ValidationError("source", "unknown source '" + src + "'");
  if (j.contains("margin") && !j["margin"].is_null()) p.margin = get_double(j, "margin");
  validate(p);
  return p;
}

void validate(const WeightedExample& e) {
  if (!(std::isfinite(e.weight) && e.weight > 0.0 && e.weight <= 1.0))
    throw ValidationError("weight", "must be within (0,1]");
}

json to_json(const WeightedExample& e) {
  return json{{"context", to_json(e.context)}, {"label", to_string(e.label)}, {"weight", e.weight}};
}

WeightedExample example_from_json(const json& j) {
  WeightedExample e;
  e.context = context_from_json(field(j, "context"));
  e.label = kind_from_string(get_string(j, "label"));
  e.weight = get_double(j, "weight");
  validate(e);
  return e;
}

std::vector<LabeledContext> sft_from_json(const json& j) {
  if (!j.is_array()) throw ValidationError("d_sft", "expected an array");
  std::vector<LabeledContext> out;
  for (const auto& e : j)
    out.push_back({context_from_json(field(e, "context")), kind_from_string(get_string(e, "label"))});
  return out;
}

json to_json(std::span<const LabeledContext> d) {
  json a = json::array();
  for (const auto& e : d) a.push_back({{"context", to_json(e.context)}, {"label", to_string(e.label)}});
  return a;
}

std::vector<PreferencePair> pairs_from_json(const json& j) {
  if (!j.is_array()) throw ValidationError("pairs", "expected an array");
  std::vector<PreferencePair> out;
  for (const auto& e : j) out.push_back(pair_from_json(e));
  return out;
}

json to_json(std::span<const PreferencePair> d) {
  json a = json::array();
  for (const auto& p : d) a.push_back(to_json(p));
  return a;
}

// ---------------------------------------------------------------------------

json parse_json(std::string_view text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(e.what());
  }
}

json read_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("IoError", "cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_json(ss.str());
}

void write_text_file(const std::string& path, std::string_view contents) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("IoError", "cannot write '" + tmp + "'");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw Error("IoError", "short write to '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace modpipe
