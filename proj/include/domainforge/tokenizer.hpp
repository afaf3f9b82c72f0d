#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace domainforge {

using TokenId = std::uint32_t;
using TokenSeq = std::vector<TokenId>;

// Byte-level vocabulary: ids 0..255 are raw bytes, followed by three specials.
struct Vocab {
  static constexpr TokenId kBos = 256;
  static constexpr TokenId kEos = 257;
  static constexpr TokenId kPad = 258;
  static constexpr std::size_t kSize = 259;

  static constexpr bool is_byte(TokenId id) noexcept { return id < 256; }
  static constexpr bool is_valid(TokenId id) noexcept { return id < kSize; }
};

inline TokenSeq encode(std::string_view text, bool add_bos = false, bool add_eos = false) {
  TokenSeq ids;
  ids.reserve(text.size() + 2);
  if (add_bos) ids.push_back(Vocab::kBos);
  for (unsigned char c : text) ids.push_back(c);
  if (add_eos) ids.push_back(Vocab::kEos);
  return ids;
}

namespace detail {

// Length of the well-formed UTF-8 sequence starting at s[i], or 0 if ill-formed.
inline std::size_t utf8_sequence_length(std::string_view s, std::size_t i) noexcept {
  const auto byte = [&](std::size_t k) { return static_cast<unsigned char>(s[k]); };
  const unsigned char lead = byte(i);
  if (lead < 0x80) return 1;
  std::size_t len = 0;
  unsigned char lo = 0x80, hi = 0xBF;
  if (lead >= 0xC2 && lead <= 0xDF) {
    len = 2;
  } else if (lead >= 0xE0 && lead <= 0xEF) {
    len = 3;
    if (lead == 0xE0) lo = 0xA0;
    if (lead == 0xED) hi = 0x9F;
  } else if (lead >= 0xF0 && lead <= 0xF4) {
    len = 4;
    if (lead == 0xF0) lo = 0x90;
    if (lead == 0xF4) hi = 0x8F;
  } else {
    return 0;
  }
  if (i + len > s.size()) return 0;
  if (byte(i + 1) < lo || byte(i + 1) > hi) return 0;
  for (std::size_t k = 2; k < len; ++k) {
    if (byte(i + k) < 0x80 || byte(i + k) > 0xBF) return 0;
  }
  return len;
}

}  // namespace detail

inline bool is_valid_utf8(std::string_view s) noexcept {
  for (std::size_t i = 0; i < s.size();) {
    const std::size_t len = detail::utf8_sequence_length(s, i);
    if (len == 0) return false;
    i += len;
  }
  return true;
}

// Replaces every ill-formed byte with U+FFFD.
inline std::string sanitize_utf8(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size();) {
    const std::size_t len = detail::utf8_sequence_length(s, i);
    if (len == 0) {
      out += "\xEF\xBF\xBD";
      ++i;
    } else {
      out.append(s.substr(i, len));
      i += len;
    }
  }
  return out;
}

// Specials are dropped; invalid byte sequences decode to U+FFFD.
inline std::string decode(std::span<const TokenId> ids) {
  std::string bytes;
  bytes.reserve(ids.size());
  for (TokenId id : ids) {
    if (Vocab::is_byte(id)) bytes.push_back(static_cast<char>(id));
  }
  if (is_valid_utf8(bytes)) return bytes;
  return sanitize_utf8(bytes);
}

}  // namespace domainforge
