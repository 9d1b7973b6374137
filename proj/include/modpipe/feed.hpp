#pragma once

// Synthetic annotated feed standing in for a social platform's listing API.

#include <cstdint>
#include <string>
#include <vector>

#include "modpipe/core.hpp"

namespace modpipe {

struct FeedParams {
  std::size_t posts = 25;
  double match_rate = 0.5;
  std::uint64_t seed = 0;
  std::size_t page = 0;
  int image_width = 32;
  int image_height = 32;
  double ad_rate = 0.0;
  Filter filter = default_feed_filter();
  /// Labels for matching posts; each must occur in filter.description.
  std::vector<std::string> trigger_labels{"blood", "violence", "weapon"};
  std::vector<std::string> neutral_labels{"sunset", "kitten", "bicycle", "garden", "coffee"};

  static Filter default_feed_filter();
};

/// round(match_rate * posts) posts carry a matching annotation (text and
/// image); the rest carry neutral ones. Deterministic in (seed, page).
std::vector<ContentItem> generate_feed(const FeedParams& params);

/// Whether any annotation of the post matches the filter.
bool post_matches(const ContentItem& post, const Filter& filter);

/// "page:N" cursors. Anything else is rejected with ValidationError("cursor").
std::size_t cursor_page(const std::string& cursor);
std::string page_cursor(std::size_t page);

}  // namespace modpipe
