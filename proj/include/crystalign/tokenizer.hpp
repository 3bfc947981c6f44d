#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace crystalign {

inline constexpr std::size_t kDefaultVocabSize = 32768;

/// Lowercased words, split on every ASCII non-alphanumeric byte. Bytes >= 0x80
/// are kept inside words so UTF-8 letters do not split a token.
std::vector<std::string> split_words(std::string_view text);

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view bytes) noexcept;

/// Hashed token ids (FNV-1a mod vocab_size) of split_words(text).
std::vector<std::uint32_t> tokenize(std::string_view text, std::size_t vocab_size = kDefaultVocabSize);

}  // namespace crystalign
