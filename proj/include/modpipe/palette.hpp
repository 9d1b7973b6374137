#pragma once

// Interventions applied to content: pixel-level obfuscation done in-process,
// text instructions for the client, and generative transforms behind the
// Generator interface.

#include <chrono>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "modpipe/core.hpp"

namespace modpipe {

class DegenerateRegion : public Error {
 public:
  explicit DegenerateRegion(const std::string& m) : Error("DegenerateRegion", m) {}
};

class UnsupportedKind : public Error {
 public:
  explicit UnsupportedKind(const std::string& m) : Error("UnsupportedKind", m) {}
};

class GeneratorUnavailable : public Error {
 public:
  explicit GeneratorUnavailable(const std::string& m) : Error("GeneratorUnavailable", m) {}
};

/// Half-open pixel rectangle [x0,x1) x [y0,y1).
struct PixelRect {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
  bool contains(int x, int y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
  bool operator==(const PixelRect&) const = default;
};

/// floor for the start edge, ceil for the end edge, clamped to the image.
/// Throws DegenerateRegion when nothing is left.
PixelRect to_pixels(const NormRect& r, int width, int height);

ImageBuffer apply_occlusion(const ImageBuffer& image, const NormRect& region, Rgb color);
ImageBuffer apply_blur(const ImageBuffer& image, const NormRect& region, double sigma);

/// Normalized 1-D Gaussian weights for offsets -radius..radius, radius = ceil(3*sigma).
std::vector<double> gaussian_kernel(double sigma);

inline constexpr Rgb kOverlayDark{0, 0, 0};

// ---------------------------------------------------------------------------
// Text instructions

enum class TextInstructionKind { BlurSpans, Overlay, Rewrite };

struct Span {
  std::size_t start = 0;
  std::size_t end = 0;
  bool operator==(const Span&) const = default;
};

/// Sorted, non-overlapping, non-empty and inside [0, text_size].
void validate_spans(std::span<const Span> spans, std::size_t text_size);

struct TextInstruction {
  TextInstructionKind kind = TextInstructionKind::BlurSpans;
  std::vector<Span> spans;   // BlurSpans
  std::string message;       // Overlay
  std::string rewritten;     // Rewrite
  bool modified = true;

  bool operator==(const TextInstruction&) const = default;
};

void validate(const TextInstruction& t, std::size_t text_size);
json to_json(const TextInstruction& t);
TextInstruction text_instruction_from_json(const json& j);

struct TransformResult {
  InterventionKind kind = InterventionKind::Occlusion;
  std::optional<ImageBuffer> image;
  std::optional<TextInstruction> text_instruction;
  std::vector<NormRect> modified_regions;
  std::map<std::string, std::string> metadata;  // e.g. "message" for warning overlays
  bool indicator = true;

  bool operator==(const TransformResult&) const = default;
};

void validate(const TransformResult& r);
json to_json(const TransformResult& r, PixelEncoding enc = PixelEncoding::Base64);
TransformResult transform_result_from_json(const json& j);

TransformResult apply_warning_overlay(const ImageBuffer& image, const NormRect& region,
                                      const std::string& message, double alpha);

/// Warning text shown for an overlay, personalized from the filter.
std::string overlay_message(const Filter& filter);

struct TextRequest {
  const std::string& text;
  InterventionKind kind;
  std::span<const Span> spans;
  const Filter& filter;
};

/// Produces text instructions. Implementations are called concurrently.
class Transformer {
 public:
  virtual ~Transformer() = default;
  virtual TextInstruction transform(const TextRequest& request) const = 0;
};

/// Blur echoes spans, Overlay uses overlay_message(), Rewrite replaces every
/// span with "[...]".
class MockTransformer final : public Transformer {
 public:
  TextInstruction transform(const TextRequest& request) const override;
};

TextInstruction apply_text_intervention(const std::string& text, InterventionKind kind,
                                        std::span<const Span> spans, const Filter& filter,
                                        const Transformer& transformer);

/// Literal, case-insensitive occurrences of matching annotation labels in
/// the text, merged into sorted disjoint spans.
std::vector<Span> trigger_spans(const std::string& text, std::span<const TriggerAnnotation> annotations,
                                const Filter& filter);

// ---------------------------------------------------------------------------
// Generative transforms

struct GenerationRequest {
  const ImageBuffer& image;
  InterventionKind kind;
  StyleScope scope;
  std::span<const NormRect> regions;
  const Filter& filter;
};

/// Image generation backend. Implementations are called from several worker
/// threads at once and must be safe for that.
class Generator {
 public:
  virtual ~Generator() = default;
  virtual ImageBuffer generate(const GenerationRequest& request) const = 0;
};

/// Deterministic stand-in for an image model.
///   Inpainting   region := mean colour of the 1-pixel ring around it
///   Replacement  region := colour from FNV-1a of metadata["replace_with"]
///   Shrink       2x nearest-neighbour copy centred in the region, ring mean elsewhere
///   Style*       per-channel quantization to a fixed 4-level palette
class MockGenerator final : public Generator {
 public:
  ImageBuffer generate(const GenerationRequest& request) const override;
};

/// POSTs {image, width, height, kind, region, params} to `url` and expects
/// {image} back (base64 RGB). Anything but a 200 with a well-formed body is
/// GeneratorUnavailable.
class HttpGenerator final : public Generator {
 public:
  HttpGenerator(std::string url, std::chrono::milliseconds timeout);
  ImageBuffer generate(const GenerationRequest& request) const override;

 private:
  std::string host_;
  std::string path_;
  std::chrono::milliseconds timeout_;
};

/// Levels used by the mock stylizer for each style kind.
std::array<std::uint8_t, 4> style_levels(InterventionKind style);

/// Mean colour of the pixels bordering `r` from outside (clipped to the image).
/// Falls back to mid gray when the region covers the whole image.
Rgb ring_mean(const ImageBuffer& image, const PixelRect& r);

Rgb replacement_color(const Filter& filter);

/// Regions of annotations matching the filter; all annotated regions when
/// none match; the whole image when there are no annotations.
std::vector<NormRect> target_regions(std::span<const TriggerAnnotation> annotations, const Filter& filter);

TransformResult apply_generative(const ImageBuffer& image, InterventionKind kind,
                                 std::span<const TriggerAnnotation> annotations, const Filter& filter,
                                 const Generator& generator, StyleScope scope = StyleScope::Region);

/// Parameters for the in-process obfuscation kinds.
struct LocalParams {
  double blur_sigma = 4.0;
  Rgb occlusion_color{0, 0, 0};
  double overlay_alpha = 0.85;
};

/// Applies Blur, Occlusion or WarningOverlay to every region.
TransformResult apply_local(const ImageBuffer& image, InterventionKind kind,
                            std::span<const NormRect> regions, const Filter& filter,
                            const LocalParams& params = {});

}  // namespace modpipe
