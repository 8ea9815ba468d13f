#pragma once

// Answer normalization shared by the OEQ failure predicate and the text metrics.

#include <cctype>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace v3fusion::text {

/// Lowercase, punctuation stripped, articles (a/an/the) dropped, tokens split on whitespace.
inline std::vector<std::string> normalized_tokens(std::string_view raw) {
  std::string cleaned;
  cleaned.reserve(raw.size());
  for (unsigned char c : raw) {
    if (std::ispunct(c)) continue;
    cleaned.push_back(static_cast<char>(std::tolower(c)));
  }
  std::vector<std::string> tokens;
  std::istringstream in(cleaned);
  std::string token;
  while (in >> token) {
    if (token == "a" || token == "an" || token == "the") continue;
    tokens.push_back(std::move(token));
  }
  return tokens;
}

/// Normalized tokens re-joined with single spaces.
inline std::string normalize(std::string_view raw) {
  std::string out;
  for (const auto& token : normalized_tokens(raw)) {
    if (!out.empty()) out.push_back(' ');
    out += token;
  }
  return out;
}

}  // namespace v3fusion::text
