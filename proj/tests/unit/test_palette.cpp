#include <doctest.h>

#include <cmath>
#include <random>

#include <httplib.h>

#include "fixtures.hpp"

using namespace modpipe;
using fixtures::make_filter;

namespace {

ImageBuffer noise_image(int w, int h, std::mt19937& rng) {
  ImageBuffer img(w, h);
  for (auto& p : img.pixels()) p = static_cast<std::uint8_t>(rng() & 0xff);
  return img;
}

// Direct 2-D Gaussian convolution with clamp-to-edge sampling.
double reference_blur(const ImageBuffer& img, int x, int y, int c, double sigma) {
  const int radius = static_cast<int>(std::ceil(3 * sigma));
  double acc = 0, norm = 0;
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx) {
      const double w = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
      const int xx = std::min(std::max(x + dx, 0), img.width() - 1);
      const int yy = std::min(std::max(y + dy, 0), img.height() - 1);
      acc += w * img.at(xx, yy, c);
      norm += w;
    }
  return acc / norm;
}

bool outside_identical(const ImageBuffer& a, const ImageBuffer& b, const PixelRect& r) {
  for (int y = 0; y < a.height(); ++y)
    for (int x = 0; x < a.width(); ++x)
      if (!r.contains(x, y) && a.rgb(x, y) != b.rgb(x, y)) return false;
  return true;
}

}  // namespace

TEST_SUITE("palette") {
  TEST_CASE("normalized to pixel rectangles") {
    CHECK(to_pixels({0, 0, 1, 1}, 10, 8) == PixelRect{0, 0, 10, 8});
    CHECK(to_pixels({0.15, 0.2, 0.31, 0.5}, 10, 10) == PixelRect{1, 2, 4, 5});
    CHECK_THROWS_AS(to_pixels({0.5, 0.5, 0.5, 0.6}, 10, 10), DegenerateRegion);
    PixelRect r{1, 1, 3, 4};
    CHECK(r.width() == 2);
    CHECK(r.contains(1, 3));
    CHECK_FALSE(r.contains(3, 1));
  }

  TEST_CASE("gaussian kernel") {
    const auto k = gaussian_kernel(2.0);
    CHECK(k.size() == 13);
    double sum = 0;
    for (double v : k) sum += v;
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    for (std::size_t i = 0; i < k.size(); ++i) CHECK(k[i] == doctest::Approx(k[k.size() - 1 - i]));
    CHECK_THROWS_AS(gaussian_kernel(0.0), ValidationError);
  }

  TEST_CASE("blur matches a direct convolution and leaves the outside alone") {
    std::mt19937 rng(7);
    for (int trial = 0; trial < 10; ++trial) {
      const auto img = noise_image(20, 14, rng);
      const NormRect region{0.1, 0.2, 0.7, 0.9};
      const double sigma = 0.8 + 0.3 * trial;
      const auto out = apply_blur(img, region, sigma);
      const auto p = to_pixels(region, img.width(), img.height());
      CHECK(outside_identical(img, out, p));
      for (int y = p.y0; y < p.y1; ++y)
        for (int x = p.x0; x < p.x1; ++x)
          for (int c = 0; c < 3; ++c) CHECK(std::abs(out.at(x, y, c) - reference_blur(img, x, y, c, sigma)) <= 1.0);
    }
  }

  TEST_CASE("occlusion fills and is idempotent") {
    std::mt19937 rng(3);
    const auto img = noise_image(9, 9, rng);
    const NormRect region{0.3, 0.3, 0.6, 0.6};
    const auto once = apply_occlusion(img, region, Rgb{1, 2, 3});
    const auto p = to_pixels(region, 9, 9);
    for (int y = p.y0; y < p.y1; ++y)
      for (int x = p.x0; x < p.x1; ++x) CHECK(once.rgb(x, y) == Rgb{1, 2, 3});
    CHECK(outside_identical(img, once, p));
    CHECK(apply_occlusion(once, region, Rgb{1, 2, 3}) == once);
  }

  TEST_CASE("warning overlay blends toward dark") {
    const ImageBuffer img(4, 4, Rgb{200, 100, 11});
    const auto r = apply_warning_overlay(img, {0, 0, 0.5, 0.5}, "msg", 0.85);
    CHECK(r.kind == InterventionKind::WarningOverlay);
    CHECK(r.metadata.at("message") == "msg");
    CHECK(r.image->rgb(0, 0) == Rgb{30, 15, 2});
    CHECK(r.image->rgb(3, 3) == Rgb{200, 100, 11});
    CHECK_THROWS_AS(apply_warning_overlay(img, {0, 0, 1, 1}, "m", 0.0), ValidationError);
  }

  TEST_CASE("apply_local covers every region") {
    const ImageBuffer img(10, 10, Rgb{255, 255, 255});
    const std::vector<NormRect> regions{{0, 0, 0.2, 0.2}, {0.8, 0.8, 1, 1}};
    const auto r = apply_local(img, InterventionKind::Occlusion, regions, make_filter());
    CHECK(r.image->rgb(0, 0) == Rgb{0, 0, 0});
    CHECK(r.image->rgb(9, 9) == Rgb{0, 0, 0});
    CHECK(r.image->rgb(5, 5) == Rgb{255, 255, 255});
    CHECK(r.modified_regions == regions);
    CHECK(r.indicator);
    const auto o = apply_local(img, InterventionKind::WarningOverlay, regions, make_filter("spiders"));
    CHECK(o.metadata.at("message").find("spiders") != std::string::npos);
    CHECK_THROWS_AS(apply_local(img, InterventionKind::Inpainting, regions, make_filter()), UnsupportedKind);
  }

  TEST_CASE("trigger spans are merged and sorted") {
    const std::string text = "Blood and more blood; bloody violence";
    std::vector<TriggerAnnotation> ann{{{0, 0, 1, 1}, 0.5, 0.5, "blood"},
                                       {{0, 0, 1, 1}, 0.5, 0.5, "bloody violence"},
                                       {{0, 0, 1, 1}, 0.5, 0.5, "kitten"}};
    const auto spans = trigger_spans(text, ann, make_filter("graphic blood, bloody violence"));
    REQUIRE(spans.size() == 3);
    CHECK(spans[0] == Span{0, 5});
    CHECK(spans[1] == Span{15, 20});
    CHECK(spans[2] == Span{22, 37});
    CHECK_NOTHROW(validate_spans(spans, text.size()));
    const std::vector<Span> bad{{3, 5}, {4, 6}};
    CHECK_THROWS_AS(validate_spans(bad, 10), ValidationError);
  }

  TEST_CASE("text interventions through the mock transformer") {
    const std::string text = "I saw blood there";
    const std::vector<Span> spans{{6, 11}};
    const auto f = make_filter("blood");
    MockTransformer t;
    const auto blur = apply_text_intervention(text, InterventionKind::TextBlur, spans, f, t);
    CHECK(blur.kind == TextInstructionKind::BlurSpans);
    CHECK(blur.spans == spans);
    const auto rewrite = apply_text_intervention(text, InterventionKind::TextRewrite, spans, f, t);
    CHECK(rewrite.rewritten == "I saw [...] there");
    const auto overlay = apply_text_intervention(text, InterventionKind::TextOverlay, {}, f, t);
    CHECK(overlay.message == overlay_message(f));
    CHECK_THROWS_AS(apply_text_intervention(text, InterventionKind::Blur, spans, f, t), UnsupportedKind);
    const std::vector<Span> outside{{10, 40}};
    CHECK_THROWS_AS(apply_text_intervention(text, InterventionKind::TextBlur, outside, f, t), ValidationError);
    CHECK(text_instruction_from_json(to_json(rewrite)) == rewrite);
  }

  TEST_CASE("mock generator") {
    auto post = fixtures::annotated_post("p", 0, "blood", 0.9, 0.5, false, true, {0.25, 0.25, 0.75, 0.75}, 16);
    MockGenerator gen;
    const auto f = make_filter("blood");
    const auto p = to_pixels(post.annotations[0].region, 16, 16);

    const auto inpaint = apply_generative(*post.image, InterventionKind::Inpainting, post.annotations, f, gen);
    const Rgb ring = ring_mean(*post.image, p);
    CHECK(inpaint.image->rgb(8, 8) == ring);
    CHECK(outside_identical(*post.image, *inpaint.image, p));

    auto g = f;
    g.metadata["replace_with"] = "flowers";
    const auto repl = apply_generative(*post.image, InterventionKind::Replacement, post.annotations, g, gen);
    CHECK(repl.image->rgb(5, 5) == replacement_color(g));

    const auto style = apply_generative(*post.image, InterventionKind::StyleCubism, post.annotations, f, gen,
                                        StyleScope::FullImage);
    CHECK(style.modified_regions == std::vector<NormRect>{NormRect{0, 0, 1, 1}});
    for (auto v : style.image->pixels()) CHECK((v == 0 || v == 85 || v == 170 || v == 255));

    const auto region_style =
        apply_generative(*post.image, InterventionKind::StyleGhibli, post.annotations, f, gen, StyleScope::Region);
    CHECK(outside_identical(*post.image, *region_style.image, p));

    const auto shrink = apply_generative(*post.image, InterventionKind::Shrink, post.annotations, f, gen);
    CHECK(outside_identical(*post.image, *shrink.image, p));
    CHECK(shrink.image->width() == 16);

    CHECK_THROWS_AS(apply_generative(*post.image, InterventionKind::Blur, post.annotations, f, gen), UnsupportedKind);
  }

  TEST_CASE("target regions fall back sensibly") {
    const auto f = make_filter("blood");
    std::vector<TriggerAnnotation> ann{{{0, 0, 0.5, 0.5}, 0.5, 0.5, "kitten"}};
    CHECK(target_regions(ann, f) == std::vector<NormRect>{{0, 0, 0.5, 0.5}});
    ann.push_back({{0.5, 0.5, 1, 1}, 0.5, 0.5, "blood"});
    CHECK(target_regions(ann, f) == std::vector<NormRect>{{0.5, 0.5, 1, 1}});
    CHECK(target_regions({}, f) == std::vector<NormRect>{{0, 0, 1, 1}});
  }

  TEST_CASE("transform results serialize") {
    const ImageBuffer img(3, 2, Rgb{9, 8, 7});
    const auto r = apply_local(img, InterventionKind::Blur, std::vector<NormRect>{{0, 0, 1, 1}}, make_filter());
    CHECK(transform_result_from_json(to_json(r)) == r);
    TransformResult both = r;
    both.text_instruction = TextInstruction{};
    CHECK_THROWS_AS(validate(both), ValidationError);
    const json digest = to_json(r, PixelEncoding::SideChannel);
    CHECK(digest["image"].contains("digest"));
  }

  TEST_CASE("http generator reports failures as unavailable") {
    httplib::Server server;
    server.Post("/gen", [](const httplib::Request& req, httplib::Response& res) {
      const json body = json::parse(req.body);
      if (body["kind"] == "Inpainting") {
        res.set_content(json{{"image", body["image"]}}.dump(), "application/json");
      } else {
        res.status = 503;
      }
    });
    const int port = server.bind_to_any_port("127.0.0.1");
    std::thread th([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    auto post = fixtures::annotated_post("p", 0, "blood", 0.9, 0.5, false, true);
    HttpGenerator gen("http://127.0.0.1:" + std::to_string(port) + "/gen", std::chrono::milliseconds(2000));
    const auto ok = apply_generative(*post.image, InterventionKind::Inpainting, post.annotations, make_filter(), gen);
    CHECK(*ok.image == *post.image);
    CHECK_THROWS_AS(apply_generative(*post.image, InterventionKind::Shrink, post.annotations, make_filter(), gen),
                    GeneratorUnavailable);
    server.stop();
    th.join();

    HttpGenerator dead("http://127.0.0.1:1/gen", std::chrono::milliseconds(300));
    CHECK_THROWS_AS(dead.generate({*post.image, InterventionKind::Inpainting, StyleScope::Region, {}, make_filter()}),
                    GeneratorUnavailable);
  }
}
