#include <gtest/gtest.h>

#include "domainforge/rng.hpp"
#include "domainforge/tokenizer.hpp"

using namespace domainforge;

TEST(Tokenizer, EncodesBytes) {
  EXPECT_EQ(encode("ab"), (TokenSeq{97, 98}));
  EXPECT_EQ(encode("", true, true), (TokenSeq{Vocab::kBos, Vocab::kEos}));
  EXPECT_EQ(encode("\xC3\xA9"), (TokenSeq{0xC3, 0xA9}));
}

TEST(Tokenizer, DecodeDropsSpecials) {
  EXPECT_EQ(decode(TokenSeq{97, 98}), "ab");
  EXPECT_EQ(decode(TokenSeq{256, 97, 257}), "a");
  EXPECT_EQ(decode(TokenSeq{258, 258}), "");
}

TEST(Tokenizer, VocabLayout) {
  EXPECT_EQ(Vocab::kSize, 259u);
  EXPECT_EQ(Vocab::kBos, 256u);
  EXPECT_EQ(Vocab::kEos, 257u);
  EXPECT_EQ(Vocab::kPad, 258u);
}

TEST(Tokenizer, InvalidUtf8IsReplacedNotFatal) {
  EXPECT_EQ(decode(TokenSeq{'a', 0xFF, 'b'}), "a\xEF\xBF\xBD" "b");
  EXPECT_EQ(decode(TokenSeq{0xE2, 0x82}), "\xEF\xBF\xBD\xEF\xBF\xBD");
}

// Random valid UTF-8 strings mixing ASCII and 2-, 3- and 4-byte code points.
TEST(Tokenizer, RoundTripProperty) {
  Rng rng(1234);
  for (int n = 0; n < 1000; ++n) {
    std::string s;
    const std::size_t len = rng.below(40);
    for (std::size_t i = 0; i < len; ++i) {
      std::uint32_t cp;
      switch (rng.below(4)) {
        case 0: cp = static_cast<std::uint32_t>(rng.below(0x80)); break;
        case 1: cp = 0x80 + static_cast<std::uint32_t>(rng.below(0x780)); break;
        case 2: cp = 0x800 + static_cast<std::uint32_t>(rng.below(0xD000 - 0x800)); break;
        default: cp = 0x10000 + static_cast<std::uint32_t>(rng.below(0x100000)); break;
      }
      if (cp < 0x80) {
        s.push_back(static_cast<char>(cp));
      } else if (cp < 0x800) {
        s.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
      } else if (cp < 0x10000) {
        s.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        s.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
      } else {
        s.push_back(static_cast<char>(0xF0 | (cp >> 18)));
        s.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
        s.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
      }
    }
    const TokenSeq ids = encode(s);
    ASSERT_EQ(ids.size(), s.size());
    ASSERT_EQ(decode(ids), s);
  }
}
