#include "modpipe/feed.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <random>

namespace modpipe {

Filter FeedParams::default_feed_filter() {
  Filter f;
  f.id = "feed-default";
  f.description = "graphic violence, blood and weapons";
  f.sensitivity = 4;
  f.modality = Modality::Both;
  f.duration = Duration::never();
  return f;
}

namespace {

double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

std::size_t pick(std::mt19937_64& rng, std::size_t n) { return static_cast<std::size_t>(unit(rng) * n) % n; }

Rgb random_color(std::mt19937_64& rng) {
  return {static_cast<std::uint8_t>(rng() & 0xff), static_cast<std::uint8_t>(rng() & 0xff),
          static_cast<std::uint8_t>(rng() & 0xff)};
}

}  // namespace

std::vector<ContentItem> generate_feed(const FeedParams& p) {
  if (p.posts == 0) throw ValidationError("posts", "must be >= 1");
  if (!(p.match_rate >= 0.0 && p.match_rate <= 1.0)) throw ValidationError("match_rate", "must be in [0,1]");
  if (p.image_width < 4 || p.image_height < 4) throw ValidationError("image", "at least 4x4 pixels");
  validate(p.filter);
  for (const auto& l : p.trigger_labels) {
    TriggerAnnotation probe{{0, 0, 1, 1}, 1.0, 1.0, l};
    if (!annotation_matches(probe, p.filter))
      throw ValidationError("trigger_labels", "label '" + l + "' does not match the feed filter");
  }

  std::seed_seq seq{static_cast<std::uint32_t>(p.seed), static_cast<std::uint32_t>(p.seed >> 32),
                    static_cast<std::uint32_t>(p.page)};
  std::mt19937_64 rng(seq);

  const auto matching = static_cast<std::size_t>(std::llround(p.match_rate * static_cast<double>(p.posts)));
  std::vector<std::size_t> order(p.posts);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[pick(rng, i)]);
  std::vector<bool> is_match(p.posts, false);
  for (std::size_t i = 0; i < matching; ++i) is_match[order[i]] = true;

  std::vector<ContentItem> out;
  out.reserve(p.posts);
  for (std::size_t i = 0; i < p.posts; ++i) {
    ContentItem c;
    c.id = "p" + std::to_string(p.page) + "-" + std::to_string(i);
    c.position = static_cast<int>(i);
    const auto& labels = is_match[i] ? p.trigger_labels : p.neutral_labels;
    const std::string label = labels[pick(rng, labels.size())];

    const double w = 0.25 + 0.5 * unit(rng), h = 0.25 + 0.5 * unit(rng);
    const double x0 = (1.0 - w) * unit(rng), y0 = (1.0 - h) * unit(rng);
    TriggerAnnotation a;
    a.region = {x0, y0, std::min(1.0, x0 + w), std::min(1.0, y0 + h)};
    a.severity = 0.2 + 0.8 * unit(rng);
    a.salience = 0.2 + 0.8 * unit(rng);
    a.label = label;

    ImageBuffer img(p.image_width, p.image_height, random_color(rng));
    const Rgb fg = random_color(rng);
    const int px0 = static_cast<int>(std::floor(a.region.x0 * p.image_width));
    const int py0 = static_cast<int>(std::floor(a.region.y0 * p.image_height));
    const int px1 = static_cast<int>(std::ceil(a.region.x1 * p.image_width));
    const int py1 = static_cast<int>(std::ceil(a.region.y1 * p.image_height));
    for (int y = py0; y < py1; ++y)
      for (int x = px0; x < px1; ++x) img.set(x, y, fg);
    c.image = std::move(img);
    c.text = "Post " + std::to_string(i) + " on page " + std::to_string(p.page) + ": a photo with " + label +
             " in it.";
    c.annotations.push_back(std::move(a));
    c.is_ad = p.ad_rate > 0.0 && unit(rng) < p.ad_rate;
    out.push_back(std::move(c));
  }
  return out;
}

bool post_matches(const ContentItem& post, const Filter& filter) {
  return std::any_of(post.annotations.begin(), post.annotations.end(),
                     [&](const TriggerAnnotation& a) { return annotation_matches(a, filter); });
}

std::size_t cursor_page(const std::string& cursor) {
  if (cursor.empty()) return 0;
  constexpr std::string_view prefix = "page:";
  if (cursor.rfind(prefix, 0) != 0) throw ValidationError("cursor", "expected page:N");
  std::size_t n = 0;
  const char* b = cursor.data() + prefix.size();
  const char* e = cursor.data() + cursor.size();
  auto [ptr, ec] = std::from_chars(b, e, n);
  if (ec != std::errc{} || ptr != e || b == e) throw ValidationError("cursor", "expected page:N");
  return n;
}

std::string page_cursor(std::size_t page) { return "page:" + std::to_string(page); }

}  // namespace modpipe
