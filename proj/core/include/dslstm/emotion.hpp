#pragma once

#include <array>
#include <optional>
#include <string_view>

namespace dslstm {

enum class Emotion : int { kHappy = 0, kNeutral = 1, kAngry = 2, kSad = 3 };

inline constexpr std::size_t kNumClasses = 4;
inline constexpr std::array<std::string_view, kNumClasses> kEmotionNames{"happy", "neutral", "angry", "sad"};

inline std::string_view to_string(Emotion e) { return kEmotionNames[static_cast<std::size_t>(e)]; }

inline std::optional<Emotion> parse_emotion(std::string_view s) {
  for (std::size_t i = 0; i < kNumClasses; ++i) {
    if (kEmotionNames[i] == s) return static_cast<Emotion>(i);
  }
  return std::nullopt;
}

}  // namespace dslstm
