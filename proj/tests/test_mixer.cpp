#include <gtest/gtest.h>

#include <set>

#include "domainforge/mixer.hpp"
#include "support.hpp"

using namespace domainforge;

namespace {

std::vector<PackedSequence> numbered(std::size_t count, std::size_t ctx, TokenId base) {
  std::vector<PackedSequence> out;
  for (std::size_t i = 0; i < count; ++i) {
    PackedSequence s;
    s.tokens.assign(ctx, static_cast<TokenId>(base + i));
    s.mask.assign(ctx, 1);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

// 7 + EOS + 2 + EOS = 11 tokens at ctx 6: one full window and one with a PAD.
TEST(Pack, SevenAndTwoBytes) {
  const auto seqs = pack_texts({"abcdefg", "hi"}, 6);
  ASSERT_EQ(seqs.size(), 2u);
  EXPECT_EQ(seqs[0].tokens, (TokenSeq{'a', 'b', 'c', 'd', 'e', 'f'}));
  EXPECT_EQ(seqs[1].tokens, (TokenSeq{'g', Vocab::kEos, 'h', 'i', Vocab::kEos, Vocab::kPad}));
  EXPECT_EQ(seqs[1].mask, (std::vector<std::uint8_t>{1, 1, 1, 1, 1, 0}));
  EXPECT_EQ(seqs[0].non_pad() + seqs[1].non_pad(), 11u);
}

TEST(Pack, ExactFitAndEmpty) {
  const auto seqs = pack_texts({"abcde"}, 6);
  ASSERT_EQ(seqs.size(), 1u);
  EXPECT_EQ(seqs[0].non_pad(), 6u);
  EXPECT_TRUE(pack_texts({}, 6).empty());
  EXPECT_THROW(pack_texts({"a"}, 1), ConfigError);
}

TEST(PackCache, RoundTripAndIntegrity) {
  PackCache cache{6, pack_texts({"abcdefg", "hi", "xyz"}, 6)};
  const std::string bytes = serialize_pack_cache(cache);
  EXPECT_EQ(bytes.substr(0, 4), "DFPK");
  // header 20 + rows 3*6*4 + masks 3*1
  EXPECT_EQ(bytes.size(), 20u + 72u + 3u);
  const PackCache back = parse_pack_cache(bytes);
  EXPECT_EQ(back.context_len, 6u);
  EXPECT_EQ(back.sequences, cache.sequences);
  EXPECT_THROW(parse_pack_cache(bytes.substr(0, bytes.size() - 1)), IntegrityError);
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(parse_pack_cache(bad), IntegrityError);
}

TEST(Mixer, DefaultRatioRows) {
  Mixer mixer({numbered(30, 4, 0), numbered(8, 4, 100), numbered(3, 4, 200)}, MixRatio{}, 20, 0);
  auto [batch, epoch] = mixer.next_batch();
  std::array<std::size_t, 3> counts{};
  for (Source s : batch.sources) ++counts[static_cast<std::size_t>(s)];
  EXPECT_EQ(counts, (std::array<std::size_t, 3>{15, 4, 1}));
  EXPECT_EQ(batch.tokens.size(), 20u * 4u);
}

TEST(Mixer, EpochIncrementsOnSecondBatch) {
  Mixer mixer({numbered(30, 4, 0), numbered(8, 4, 100), numbered(3, 4, 200)}, MixRatio{}, 20, 0);
  EXPECT_EQ(mixer.next_batch().second.epoch, 0u);
  EXPECT_EQ(mixer.next_batch().second.epoch, 1u);
}

TEST(Mixer, DegenerateRatio) {
  Mixer mixer({numbered(5, 4, 0), {}, {}}, MixRatio{1, 0, 0}, 4, 0);
  auto [batch, _] = mixer.next_batch();
  for (Source s : batch.sources) EXPECT_EQ(s, Source::book);
}

TEST(Mixer, ConfigurationErrors) {
  EXPECT_THROW(Mixer({numbered(30, 4, 0), numbered(8, 4, 100), numbered(3, 4, 200)}, MixRatio{}, 21, 0), ConfigError);
  EXPECT_THROW(Mixer({numbered(30, 4, 0), {}, numbered(3, 4, 200)}, MixRatio{}, 20, 0), ConfigError);
  EXPECT_THROW(Mixer({numbered(30, 4, 0), {}, {}}, MixRatio{-1, 0, 2}, 20, 0), ConfigError);
}

TEST(Mixer, EveryBookSequenceOncePerEpoch) {
  Mixer mixer({numbered(45, 2, 0), numbered(7, 2, 100), numbered(2, 2, 200)}, MixRatio{}, 20, 9);
  std::multiset<std::size_t> seen;
  std::uint64_t epoch = 0;
  for (int b = 0; b < 60; ++b) {
    auto [batch, state] = mixer.next_batch();
    for (std::size_t r = 0; r < batch.rows; ++r)
      if (batch.sources[r] == Source::book) seen.insert(batch.sequence[r]);
    if (state.epoch != epoch) {
      ASSERT_EQ(state.epoch, epoch + 1);
      ASSERT_EQ(seen.size(), 45u);
      for (std::size_t i = 0; i < 45; ++i) ASSERT_EQ(seen.count(i), 1u);
      seen.clear();
      epoch = state.epoch;
    }
  }
  EXPECT_EQ(epoch, 20u);  // 60 batches x 15 rows / 45 sequences
}

TEST(Mixer, DeterministicAndResumable) {
  auto make = [] { return Mixer({numbered(30, 4, 0), numbered(8, 4, 100), numbered(3, 4, 200)}, MixRatio{}, 20, 5); };
  Mixer a = make(), b = make();
  for (int i = 0; i < 7; ++i) ASSERT_EQ(a.next_batch().first.tokens, b.next_batch().first.tokens);

  const json saved = to_json(a.state());
  std::vector<std::vector<TokenId>> expected;
  for (int i = 0; i < 5; ++i) expected.push_back(a.next_batch().first.tokens);
  Mixer c = make();
  c.restore(mixer_state_from_json(saved));
  for (int i = 0; i < 5; ++i) EXPECT_EQ(c.next_batch().first.tokens, expected[i]);
}

TEST(Mixer, SeedChangesOrder) {
  Mixer a({numbered(30, 4, 0), numbered(8, 4, 100), numbered(3, 4, 200)}, MixRatio{}, 20, 1);
  Mixer b({numbered(30, 4, 0), numbered(8, 4, 100), numbered(3, 4, 200)}, MixRatio{}, 20, 2);
  EXPECT_NE(a.next_batch().first.tokens, b.next_batch().first.tokens);
}

TEST(Mixer, BookTokenAccounting) {
  Mixer mixer({numbered(30, 4, 0), numbered(8, 4, 100), numbered(3, 4, 200)}, MixRatio{}, 20, 0);
  auto s = mixer.next_batch().second;
  EXPECT_EQ(s.total_book_tokens, 120u);
  EXPECT_EQ(s.book_tokens_seen, 60u);
  s = mixer.next_batch().second;
  EXPECT_EQ(s.book_tokens_seen, 0u);  // wrapped into a fresh epoch
}
