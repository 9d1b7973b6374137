#include "modpipe/palette.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include <httplib.h>

#include "modpipe/encoding.hpp"

namespace modpipe {

namespace {

std::uint8_t round_level(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::floor(v + 0.5), 0.0, 255.0));
}

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

void fill(ImageBuffer& img, const PixelRect& r, Rgb c) {
  for (int y = r.y0; y < r.y1; ++y)
    for (int x = r.x0; x < r.x1; ++x) img.set(x, y, c);
}

std::string_view instruction_name(TextInstructionKind k) {
  switch (k) {
    case TextInstructionKind::BlurSpans: return "BlurSpans";
    case TextInstructionKind::Overlay: return "Overlay";
    case TextInstructionKind::Rewrite: return "Rewrite";
  }
  return "BlurSpans";
}

std::pair<std::string, std::string> split_url(const std::string& url) {
  const auto scheme = url.find("://");
  const auto path_start = url.find('/', scheme == std::string::npos ? 0 : scheme + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

}  // namespace

PixelRect to_pixels(const NormRect& r, int width, int height) {
  PixelRect p;
  p.x0 = std::clamp(static_cast<int>(std::floor(r.x0 * width)), 0, width);
  p.y0 = std::clamp(static_cast<int>(std::floor(r.y0 * height)), 0, height);
  p.x1 = std::clamp(static_cast<int>(std::ceil(r.x1 * width)), 0, width);
  p.y1 = std::clamp(static_cast<int>(std::ceil(r.y1 * height)), 0, height);
  if (p.x1 <= p.x0 || p.y1 <= p.y0) throw DegenerateRegion("region covers no pixels");
  return p;
}

ImageBuffer apply_occlusion(const ImageBuffer& image, const NormRect& region, Rgb color) {
  validate(region);
  const PixelRect p = to_pixels(region, image.width(), image.height());
  ImageBuffer out = image;
  fill(out, p, color);
  return out;
}

std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ValidationError("sigma", "must be positive");
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> w(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    w[i + radius] = std::exp(-(static_cast<double>(i) * i) / (2.0 * sigma * sigma));
    sum += w[i + radius];
  }
  for (double& v : w) v /= sum;
  return w;
}

ImageBuffer apply_blur(const ImageBuffer& image, const NormRect& region, double sigma) {
  validate(region);
  const std::vector<double> kernel = gaussian_kernel(sigma);
  const PixelRect p = to_pixels(region, image.width(), image.height());
  const int w = image.width(), h = image.height();
  const int radius = static_cast<int>(kernel.size() / 2);

  std::vector<double> horiz(static_cast<std::size_t>(w) * h * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int k = -radius; k <= radius; ++k)
          acc += kernel[k + radius] * image.at(std::clamp(x + k, 0, w - 1), y, c);
        horiz[(static_cast<std::size_t>(y) * w + x) * 3 + c] = acc;
      }

  ImageBuffer out = image;
  for (int y = p.y0; y < p.y1; ++y)
    for (int x = p.x0; x < p.x1; ++x)
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int k = -radius; k <= radius; ++k) {
          const int yy = std::clamp(y + k, 0, h - 1);
          acc += kernel[k + radius] * horiz[(static_cast<std::size_t>(yy) * w + x) * 3 + c];
        }
        out.at(x, y, c) = round_level(acc);
      }
  return out;
}

// ---------------------------------------------------------------------------

void validate_spans(std::span<const Span> spans, std::size_t text_size) {
  std::size_t prev_end = 0;
  for (std::size_t i = 0; i < spans.size(); ++i) {
    const Span& s = spans[i];
    if (s.start >= s.end) throw ValidationError("spans", "span must be non-empty");
    if (s.end > text_size) throw ValidationError("spans", "span exceeds text bounds");
    if (i > 0 && s.start < prev_end) throw ValidationError("spans", "spans must be sorted and disjoint");
    prev_end = s.end;
  }
}

void validate(const TextInstruction& t, std::size_t text_size) {
  switch (t.kind) {
    case TextInstructionKind::BlurSpans:
      validate_spans(t.spans, text_size);
      if (!t.message.empty() || !t.rewritten.empty())
        throw ValidationError("text_instruction", "BlurSpans carries spans only");
      break;
    case TextInstructionKind::Overlay:
      if (!t.spans.empty() || !t.rewritten.empty())
        throw ValidationError("text_instruction", "Overlay carries a message only");
      if (t.message.empty()) throw ValidationError("message", "overlay message is empty");
      break;
    case TextInstructionKind::Rewrite:
      if (!t.spans.empty() || !t.message.empty())
        throw ValidationError("text_instruction", "Rewrite carries rewritten text only");
      break;
  }
  if (!t.modified) throw ValidationError("modified", "instructions always mark content as modified");
}

json to_json(const TextInstruction& t) {
  json j{{"kind", instruction_name(t.kind)}, {"modified", t.modified}};
  switch (t.kind) {
    case TextInstructionKind::BlurSpans: {
      json spans = json::array();
      for (const auto& s : t.spans) spans.push_back(json::array({s.start, s.end}));
      j["spans"] = spans;
      break;
    }
    case TextInstructionKind::Overlay: j["message"] = t.message; break;
    case TextInstructionKind::Rewrite: j["rewritten"] = t.rewritten; break;
  }
  return j;
}

TextInstruction text_instruction_from_json(const json& j) {
  if (!j.is_object() || !j.contains("kind") || !j["kind"].is_string())
    throw ValidationError("kind", "text instruction needs a kind");
  TextInstruction t;
  const auto kind = j["kind"].get<std::string>();
  if (kind == "BlurSpans") {
    t.kind = TextInstructionKind::BlurSpans;
    for (const auto& s : j.at("spans")) t.spans.push_back({s.at(0).get<std::size_t>(), s.at(1).get<std::size_t>()});
  } else if (kind == "Overlay") {
    t.kind = TextInstructionKind::Overlay;
    t.message = j.at("message").get<std::string>();
  } else if (kind == "Rewrite") {
    t.kind = TextInstructionKind::Rewrite;
    t.rewritten = j.at("rewritten").get<std::string>();
  } else {
    throw ValidationError("kind", "unknown text instruction kind '" + kind + "'");
  }
  return t;
}

void validate(const TransformResult& r) {
  if (r.image.has_value() == r.text_instruction.has_value())
    throw ValidationError("transform_result", "exactly one of image and text_instruction is set");
  if (!r.indicator) throw ValidationError("indicator", "modified content is always badged");
}

json to_json(const TransformResult& r, PixelEncoding enc) {
  json j{{"kind", to_string(r.kind)}, {"indicator", r.indicator}};
  json regions = json::array();
  for (const auto& reg : r.modified_regions) regions.push_back(json::array({reg.x0, reg.y0, reg.x1, reg.y1}));
  j["modified_regions"] = regions;
  json meta = json::object();
  for (const auto& [k, v] : r.metadata) meta[k] = v;
  j["metadata"] = meta;
  if (r.image) {
    json img{{"width", r.image->width()}, {"height", r.image->height()}};
    if (enc == PixelEncoding::Base64) img["pixels_b64"] = base64_encode(r.image->pixels());
    else img["digest"] = hex64(fnv1a64(std::string_view(
        reinterpret_cast<const char*>(r.image->pixels().data()), r.image->pixels().size())));
    j["image"] = img;
  }
  if (r.text_instruction) j["text_instruction"] = to_json(*r.text_instruction);
  return j;
}

TransformResult transform_result_from_json(const json& j) {
  TransformResult r;
  r.kind = kind_from_string(j.at("kind").get<std::string>());
  r.indicator = j.value("indicator", true);
  for (const auto& reg : j.value("modified_regions", json::array()))
    r.modified_regions.push_back({reg.at(0).get<double>(), reg.at(1).get<double>(), reg.at(2).get<double>(),
                                  reg.at(3).get<double>()});
  if (j.contains("metadata"))
    for (const auto& [k, v] : j["metadata"].items()) r.metadata[k] = v.get<std::string>();
  if (j.contains("image")) {
    const json& img = j["image"];
    if (!img.contains("pixels_b64")) throw ValidationError("image", "pixel payload missing");
    r.image = ImageBuffer(img.at("width").get<int>(), img.at("height").get<int>(),
                          base64_decode(img["pixels_b64"].get<std::string>()));
  }
  if (j.contains("text_instruction")) r.text_instruction = text_instruction_from_json(j["text_instruction"]);
  validate(r);
  return r;
}

TransformResult apply_warning_overlay(const ImageBuffer& image, const NormRect& region,
                                      const std::string& message, double alpha) {
  validate(region);
  if (!(alpha > 0.0 && alpha <= 1.0)) throw ValidationError("alpha", "must be within (0,1]");
  const PixelRect p = to_pixels(region, image.width(), image.height());
  ImageBuffer out = image;
  const std::uint8_t dark[3] = {kOverlayDark.r, kOverlayDark.g, kOverlayDark.b};
  for (int y = p.y0; y < p.y1; ++y)
    for (int x = p.x0; x < p.x1; ++x)
      for (int c = 0; c < 3; ++c)
        out.at(x, y, c) = round_level((1.0 - alpha) * image.at(x, y, c) + alpha * dark[c]);
  TransformResult r;
  r.kind = InterventionKind::WarningOverlay;
  r.image = std::move(out);
  r.modified_regions = {region};
  r.metadata["message"] = message;
  return r;
}

// ---------------------------------------------------------------------------

std::string overlay_message(const Filter& filter) {
  return "Hidden for you: this may contain \"" + filter.description + "\". Tap to reveal.";
}

TextInstruction MockTransformer::transform(const TextRequest& request) const {
  TextInstruction t;
  switch (request.kind) {
    case InterventionKind::TextBlur:
      t.kind = TextInstructionKind::BlurSpans;
      t.spans.assign(request.spans.begin(), request.spans.end());
      break;
    case InterventionKind::TextOverlay:
      t.kind = TextInstructionKind::Overlay;
      t.message = overlay_message(request.filter);
      break;
    case InterventionKind::TextRewrite: {
      t.kind = TextInstructionKind::Rewrite;
      std::string out = request.text;
      for (auto it = request.spans.rbegin(); it != request.spans.rend(); ++it)
        out.replace(it->start, it->end - it->start, "[...]");
      t.rewritten = std::move(out);
      break;
    }
    default: throw UnsupportedKind(std::string(to_string(request.kind)) + " is not a text intervention");
  }
  return t;
}

TextInstruction apply_text_intervention(const std::string& text, InterventionKind kind,
                                        std::span<const Span> spans, const Filter& filter,
                                        const Transformer& transformer) {
  if (!is_text_kind(kind))
    throw UnsupportedKind(std::string(to_string(kind)) + " cannot be applied to text");
  if (kind != InterventionKind::TextOverlay) validate_spans(spans, text.size());
  TextInstruction t = transformer.transform({text, kind, spans, filter});
  const auto expected = kind == InterventionKind::TextBlur      ? TextInstructionKind::BlurSpans
                        : kind == InterventionKind::TextOverlay ? TextInstructionKind::Overlay
                                                                : TextInstructionKind::Rewrite;
  if (t.kind != expected) throw ValidationError("text_instruction", "transformer returned the wrong kind");
  validate(t, text.size());
  return t;
}

std::vector<Span> trigger_spans(const std::string& text, std::span<const TriggerAnnotation> annotations,
                                const Filter& filter) {
  const std::string hay = lower(text);
  std::vector<Span> raw;
  for (const auto& a : annotations) {
    if (!annotation_matches(a, filter)) continue;
    const std::string needle = lower(a.label);
    for (auto pos = hay.find(needle); pos != std::string::npos; pos = hay.find(needle, pos + 1))
      raw.push_back({pos, pos + needle.size()});
  }
  std::sort(raw.begin(), raw.end(), [](const Span& a, const Span& b) {
    return a.start != b.start ? a.start < b.start : a.end < b.end;
  });
  std::vector<Span> merged;
  for (const auto& s : raw) {
    if (!merged.empty() && s.start <= merged.back().end) merged.back().end = std::max(merged.back().end, s.end);
    else merged.push_back(s);
  }
  return merged;
}

// ---------------------------------------------------------------------------

std::array<std::uint8_t, 4> style_levels(InterventionKind style) {
  switch (style) {
    case InterventionKind::StyleCubism: return {0, 85, 170, 255};
    case InterventionKind::StyleGhibli: return {40, 100, 170, 230};
    case InterventionKind::StyleImpressionism: return {30, 90, 150, 210};
    case InterventionKind::StylePointillism: return {16, 80, 160, 240};
    default: throw UnsupportedKind(std::string(to_string(style)) + " is not a style");
  }
}

Rgb ring_mean(const ImageBuffer& image, const PixelRect& r) {
  double sum[3] = {0, 0, 0};
  std::size_t n = 0;
  for (int y = r.y0 - 1; y <= r.y1; ++y)
    for (int x = r.x0 - 1; x <= r.x1; ++x) {
      if (r.contains(x, y)) continue;
      if (x < 0 || y < 0 || x >= image.width() || y >= image.height()) continue;
      for (int c = 0; c < 3; ++c) sum[c] += image.at(x, y, c);
      ++n;
    }
  if (n == 0) return {128, 128, 128};
  return {round_level(sum[0] / n), round_level(sum[1] / n), round_level(sum[2] / n)};
}

Rgb replacement_color(const Filter& filter) {
  auto it = filter.metadata.find("replace_with");
  const std::uint64_t h = fnv1a64(it == filter.metadata.end() ? std::string_view{} : std::string_view(it->second));
  return {static_cast<std::uint8_t>(h & 0xff), static_cast<std::uint8_t>((h >> 8) & 0xff),
          static_cast<std::uint8_t>((h >> 16) & 0xff)};
}

ImageBuffer MockGenerator::generate(const GenerationRequest& req) const {
  ImageBuffer out = req.image;
  const int w = req.image.width(), h = req.image.height();
  auto each_region = [&](auto&& fn) {
    for (const auto& region : req.regions) fn(to_pixels(region, w, h));
  };
  switch (req.kind) {
    case InterventionKind::Inpainting:
      each_region([&](const PixelRect& p) { fill(out, p, ring_mean(out, p)); });
      break;
    case InterventionKind::Replacement: {
      const Rgb c = replacement_color(req.filter);
      each_region([&](const PixelRect& p) { fill(out, p, c); });
      break;
    }
    case InterventionKind::Shrink:
      each_region([&](const PixelRect& p) {
        const ImageBuffer before = out;
        fill(out, p, ring_mean(before, p));
        const int hw = std::max(1, p.width() / 2), hh = std::max(1, p.height() / 2);
        const int ox = p.x0 + (p.width() - hw) / 2, oy = p.y0 + (p.height() - hh) / 2;
        for (int y = 0; y < hh; ++y)
          for (int x = 0; x < hw; ++x) out.set(ox + x, oy + y, before.rgb(p.x0 + 2 * x, p.y0 + 2 * y));
      });
      break;
    case InterventionKind::StyleCubism:
    case InterventionKind::StyleGhibli:
    case InterventionKind::StyleImpressionism:
    case InterventionKind::StylePointillism: {
      const auto levels = style_levels(req.kind);
      auto quantize = [&](const PixelRect& p) {
        for (int y = p.y0; y < p.y1; ++y)
          for (int x = p.x0; x < p.x1; ++x)
            for (int c = 0; c < 3; ++c) out.at(x, y, c) = levels[std::min(3, out.at(x, y, c) / 64)];
      };
      if (req.scope == StyleScope::FullImage) quantize({0, 0, w, h});
      else each_region(quantize);
      break;
    }
    default:
      throw UnsupportedKind(std::string(to_string(req.kind)) + " is not a generative intervention");
  }
  return out;
}

HttpGenerator::HttpGenerator(std::string url, std::chrono::milliseconds timeout) : timeout_(timeout) {
  std::tie(host_, path_) = split_url(url);
}

ImageBuffer HttpGenerator::generate(const GenerationRequest& req) const {
  json regions = json::array();
  for (const auto& r : req.regions) regions.push_back(json::array({r.x0, r.y0, r.x1, r.y1}));
  json params{{"scope", to_string(req.scope)}, {"filter", req.filter.description}};
  if (auto it = req.filter.metadata.find("replace_with"); it != req.filter.metadata.end())
    params["replace_with"] = it->second;
  const json body{{"image", base64_encode(req.image.pixels())},
                  {"width", req.image.width()},
                  {"height", req.image.height()},
                  {"kind", to_string(req.kind)},
                  {"region", regions},
                  {"params", params}};

  httplib::Client client(host_);
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(timeout_);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(timeout_ - secs);
  client.set_connection_timeout(secs.count(), usecs.count());
  client.set_read_timeout(secs.count(), usecs.count());
  auto res = client.Post(path_, body.dump(), "application/json");
  if (!res) throw GeneratorUnavailable("generator unreachable: " + httplib::to_string(res.error()));
  if (res->status != 200) throw GeneratorUnavailable("generator returned HTTP " + std::to_string(res->status));
  try {
    const json reply = json::parse(res->body);
    return ImageBuffer(req.image.width(), req.image.height(),
                       base64_decode(reply.at("image").get<std::string>()));
  } catch (const std::exception& e) {
    throw GeneratorUnavailable(std::string("malformed generator reply: ") + e.what());
  }
}

// ---------------------------------------------------------------------------

std::vector<NormRect> target_regions(std::span<const TriggerAnnotation> annotations, const Filter& filter) {
  std::vector<NormRect> matched, all;
  for (const auto& a : annotations) {
    all.push_back(a.region);
    if (annotation_matches(a, filter)) matched.push_back(a.region);
  }
  if (!matched.empty()) return matched;
  if (!all.empty()) return all;
  return {NormRect{0, 0, 1, 1}};
}

TransformResult apply_generative(const ImageBuffer& image, InterventionKind kind,
                                 std::span<const TriggerAnnotation> annotations, const Filter& filter,
                                 const Generator& generator, StyleScope scope) {
  switch (kind) {
    case InterventionKind::Inpainting:
    case InterventionKind::Replacement:
    case InterventionKind::Shrink: break;
    default:
      if (!is_style_kind(kind))
        throw UnsupportedKind(std::string(to_string(kind)) + " is not a generative intervention");
  }
  const std::vector<NormRect> regions = target_regions(annotations, filter);
  for (const auto& r : regions) to_pixels(r, image.width(), image.height());
  TransformResult r;
  r.kind = kind;
  r.image = generator.generate({image, kind, scope, regions, filter});
  if (r.image->width() != image.width() || r.image->height() != image.height())
    throw GeneratorUnavailable("generator changed the image dimensions");
  r.modified_regions = (is_style_kind(kind) && scope == StyleScope::FullImage)
                           ? std::vector<NormRect>{NormRect{0, 0, 1, 1}}
                           : regions;
  if (is_style_kind(kind)) r.metadata["scope"] = std::string(to_string(scope));
  return r;
}

TransformResult apply_local(const ImageBuffer& image, InterventionKind kind, std::span<const NormRect> regions,
                            const Filter& filter, const LocalParams& params) {
  TransformResult r;
  r.kind = kind;
  ImageBuffer out = image;
  for (const auto& region : regions) {
    switch (kind) {
      case InterventionKind::Blur: out = apply_blur(out, region, params.blur_sigma); break;
      case InterventionKind::Occlusion: out = apply_occlusion(out, region, params.occlusion_color); break;
      case InterventionKind::WarningOverlay:
        out = *apply_warning_overlay(out, region, overlay_message(filter), params.overlay_alpha).image;
        break;
      default: throw UnsupportedKind(std::string(to_string(kind)) + " is not rendered locally");
    }
  }
  if (kind == InterventionKind::WarningOverlay) r.metadata["message"] = overlay_message(filter);
  r.image = std::move(out);
  r.modified_regions.assign(regions.begin(), regions.end());
  return r;
}

}  // namespace modpipe
