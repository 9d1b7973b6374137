#include <doctest.h>

#include "fixtures.hpp"
#include "modpipe/encoding.hpp"

using namespace modpipe;
using fixtures::make_filter;

TEST_SUITE("core") {
  TEST_CASE("fnv1a64 matches published vectors and an independent implementation") {
    CHECK(fnv1a64("") == 0xcbf29ce484222325ull);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cull);
    CHECK(fnv1a64("foobar") == 0x85944171f73967e8ull);
    for (const std::string& s : std::vector<std::string>{"", "x", "hello world", std::string("\0\xff\x80", 3)})
      CHECK(fnv1a64(s) == fixtures::reference_fnv1a64(s));
    static_assert(fnv1a64("") == kFnvOffsetBasis);
  }

  TEST_CASE("base64 round trip and known encodings") {
    const std::vector<std::uint8_t> man{'M', 'a', 'n'};
    CHECK(base64_encode(man) == "TWFu");
    CHECK(base64_encode(std::vector<std::uint8_t>{'M'}) == "TQ==");
    CHECK(base64_encode(std::vector<std::uint8_t>{'M', 'a'}) == "TWE=");
    std::vector<std::uint8_t> all(256);
    for (int i = 0; i < 256; ++i) all[i] = static_cast<std::uint8_t>(i);
    CHECK(base64_decode(base64_encode(all)) == all);
    CHECK_THROWS(base64_decode("abc"));
    CHECK(hex64(0xabcull) == "0000000000000abc");
  }

  TEST_CASE("filter validation") {
    auto f = make_filter();
    CHECK_NOTHROW(validate(f));
    f.sensitivity = 0;
    CHECK_THROWS_AS(validate(f), ValidationError);
    f.sensitivity = 6;
    try {
      validate(f);
      FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
      CHECK(e.field() == "sensitivity");
    }
    f = make_filter("   ");
    CHECK_THROWS_AS(validate(f), ValidationError);
    f = make_filter();
    f.duration = Duration::custom(0);
    CHECK_THROWS_AS(validate(f), ValidationError);
  }

  TEST_CASE("filter lifetime") {
    auto f = make_filter();
    f.created_at = 1000;
    f.duration = Duration::hours24();
    CHECK(filter_is_active(f, 1000 + 86399));
    CHECK_FALSE(filter_is_active(f, 1000 + 86400));
    f.duration = Duration::week();
    CHECK(filter_is_active(f, 1000 + 604799));
    CHECK_FALSE(filter_is_active(f, 1000 + 604800));
    f.duration = Duration::custom(10);
    CHECK(filter_is_active(f, 1009));
    CHECK_FALSE(filter_is_active(f, 1010));
    f.duration = Duration::never();
    CHECK(filter_is_active(f, 1'000'000'000));
    const std::vector<Filter> fs{make_filter("a"), f};
    CHECK(active_filters(fs, 5000).size() == 2);
  }

  TEST_CASE("filter JSON round trip") {
    auto f = make_filter("spiders", 5, Modality::Image, "x");
    f.metadata["replace_with"] = "butterfly";
    f.duration = Duration::custom(3600);
    f.created_at = 77;
    CHECK(filter_from_json(std::string_view(filter_to_json(f))) == f);
    CHECK(filter_from_json(to_json(f)) == f);
    CHECK_THROWS_AS(filter_from_json(std::string_view("{")), ParseError);
    json bad = to_json(f);
    bad["sensitivity"] = 9;
    CHECK_THROWS_AS(filter_from_json(bad), ValidationError);
  }

  TEST_CASE("filter canonical parameters ignore id and lifecycle") {
    auto a = make_filter("spiders", 3, Modality::Both, "one");
    auto b = make_filter("spiders", 3, Modality::Both, "two");
    b.created_at = 99;
    b.duration = Duration::week();
    CHECK(filter_params_canonical(a) == filter_params_canonical(b));
    b.sensitivity = 4;
    CHECK(filter_params_canonical(a) != filter_params_canonical(b));
    CHECK(filter_params_canonical(a).find("one") == std::string::npos);
  }

  TEST_CASE("annotation matching is case-insensitive and needs severity") {
    const auto f = make_filter("Graphic VIOLENCE");
    TriggerAnnotation a{{0, 0, 1, 1}, 0.5, 0.5, "violence"};
    CHECK(annotation_matches(a, f));
    a.severity = 0.0;
    CHECK_FALSE(annotation_matches(a, f));
    a = {{0, 0, 1, 1}, 0.5, 0.5, "kitten"};
    CHECK_FALSE(annotation_matches(a, f));
  }

  TEST_CASE("content validation and JSON") {
    ContentItem empty;
    CHECK_THROWS_AS(validate(empty), ValidationError);
    auto c = fixtures::annotated_post("p1", 2, "blood", 0.8, 0.4);
    CHECK_NOTHROW(validate(c));
    CHECK(content_from_json(to_json(c, PixelEncoding::Base64)) == c);

    ImageStore store{{"p1", *c.image}};
    const json side = to_json(c, PixelEncoding::SideChannel);
    CHECK_FALSE(side.dump().find("pixels_b64") != std::string::npos);
    CHECK(content_from_json(side, &store) == c);
    CHECK_THROWS(content_from_json(side, nullptr));

    c.annotations[0].region = {0.5, 0, 0.4, 1};
    CHECK_THROWS_AS(validate(c), ValidationError);
  }

  TEST_CASE("canonical content bytes") {
    auto c = fixtures::annotated_post("p1", 0, "blood", 0.8, 0.4);
    auto d = c;
    d.id = "other";
    d.position = 7;
    d.annotations.clear();
    CHECK(text_canonical(c) == text_canonical(d));
    CHECK(image_canonical(c) == image_canonical(d));
    d.image->set(0, 0, Rgb{1, 2, 3});
    CHECK(image_canonical(c) != image_canonical(d));
    CHECK(text_canonical(c).rfind("text\n", 0) == 0);
  }

  TEST_CASE("intervention kinds") {
    CHECK(all_kinds().size() == kKindCount);
    CHECK(image_kinds().size() == 10);
    CHECK(text_kinds().size() == 3);
    for (auto k : all_kinds()) {
      CHECK(kind_from_string(to_string(k)) == k);
      CHECK(kind_from_index(index_of(k)) == k);
      CHECK(is_image_kind(k) != is_text_kind(k));
    }
    CHECK_THROWS(kind_from_string("Teleport"));
    CHECK_THROWS(kind_from_index(13));
    CHECK(is_local_kind(InterventionKind::Blur));
    CHECK_FALSE(is_local_kind(InterventionKind::Inpainting));
    const auto all = all_kinds();
    CHECK(kinds_for(Modality::Text, all) == text_kinds());
    CHECK(kinds_for(Modality::Image, all) == image_kinds());
    CHECK(kinds_for(Modality::Both, all).size() == 13);
  }

  TEST_CASE("context vector bounds") {
    CHECK_NOTHROW(ContextVector(0, 0.5, 1, 0.3, 0.5));
    CHECK_THROWS_AS(ContextVector(1.1, 0, 0, 0, 0), ValidationError);
    CHECK_THROWS_AS(ContextVector(0, 0, 0, 0, 0.3), ValidationError);
    const std::vector<double> four{0, 0, 0, 0};
    CHECK_THROWS_AS(ContextVector(std::span<const double>(four)), ValidationError);
    CHECK(sensitivity_component(1) == 0.0);
    CHECK(sensitivity_component(5) == 1.0);
    CHECK(sensitivity_component(3) == 0.5);
    CHECK(modality_component(Modality::Text) == 0.0);
    CHECK(modality_component(Modality::Both) == 0.5);
    CHECK(modality_component(Modality::Image) == 1.0);
    const ContextVector c(0.25, 0.5, 0.75, 1, 0);
    CHECK(context_from_json(to_json(c)) == c);
  }

  TEST_CASE("score vectors follow their rubric") {
    CHECK_NOTHROW(validate(ScoreVector::training(0.5, 0.5, 0.5)));
    CHECK_NOTHROW(validate(ScoreVector::deployment(0.5, 0.5, 0.5, 0.0)));
    auto s = ScoreVector::training(0.5, 0.5, 0.5);
    s.emotional_impact = 0.3;
    CHECK_THROWS_AS(validate(s), ValidationError);
    CHECK_THROWS_AS(validate(ScoreVector::training(1.5, 0.5, 0.5)), ValidationError);
    const auto d = ScoreVector::deployment(0.1, 0.2, 0.3, 0.5);
    CHECK(scores_from_json(to_json(d)) == d);
  }

  TEST_CASE("training records") {
    PreferencePair p{ContextVector(0.5, 0.5, 0.5, 0.5, 1), InterventionKind::Blur, InterventionKind::Occlusion, 0.3,
                     PairSource::Automated};
    CHECK(pair_from_json(to_json(p)) == p);
    p.margin.reset();
    CHECK_THROWS_AS(validate(p), ValidationError);
    p.source = PairSource::Human;
    CHECK_NOTHROW(validate(p));
    p.loser = p.winner;
    CHECK_THROWS_AS(validate(p), ValidationError);

    WeightedExample e{ContextVector(0, 0, 0, 0, 0), InterventionKind::TextBlur, 0.1};
    CHECK(example_from_json(to_json(e)) == e);
    e.weight = 0.0;
    CHECK_THROWS_AS(validate(e), ValidationError);

    const std::vector<LabeledContext> sft{{ContextVector(0.1, 0.2, 0.3, 0.4, 0.5), InterventionKind::Shrink}};
    CHECK(sft_from_json(to_json(std::span<const LabeledContext>(sft))) == sft);
    json extra = json::array({to_json(PreferencePair{ContextVector(0, 0, 0, 0, 0), InterventionKind::Blur,
                                                     InterventionKind::Shrink, std::nullopt, PairSource::Human})});
    extra[0]["rationale"] = "ignored";
    CHECK(pairs_from_json(extra).size() == 1);
  }

  TEST_CASE("file helpers") {
    fixtures::TempDir dir;
    const auto path = (dir / "x.json").string();
    write_text_file(path, R"({"a": 1})");
    CHECK(read_json_file(path)["a"] == 1);
    CHECK_THROWS_AS(read_json_file((dir / "missing.json").string()), Error);
    write_text_file(path, "{oops");
    CHECK_THROWS_AS(read_json_file(path), ParseError);
  }
}
