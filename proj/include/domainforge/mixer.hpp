#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <algorithm>
#include <filesystem>
#include <span>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "corpus.hpp"
#include "error.hpp"
#include "jsonl.hpp"
#include "rng.hpp"
#include "tokenizer.hpp"

namespace domainforge {

// One fixed-length training window. mask[i] == 0 exactly at PAD positions.
struct PackedSequence {
  TokenSeq tokens;
  std::vector<std::uint8_t> mask;

  std::size_t non_pad() const {
    std::size_t n = 0;
    for (std::uint8_t m : mask) n += m;
    return n;
  }
  friend bool operator==(const PackedSequence&, const PackedSequence&) = default;
};

// Tokenizes each text, appends EOS, concatenates, and cuts consecutive windows
// of context_len tokens. The last window is right-padded with PAD.
inline std::vector<PackedSequence> pack_texts(const std::vector<std::string_view>& texts, std::size_t context_len) {
  if (context_len < 2) throw ConfigError("pack: context_len must be >= 2");
  TokenSeq stream;
  for (std::string_view text : texts) {
    TokenSeq ids = encode(text, false, true);
    stream.insert(stream.end(), ids.begin(), ids.end());
  }
  std::vector<PackedSequence> out;
  for (std::size_t start = 0; start < stream.size(); start += context_len) {
    const std::size_t n = std::min(context_len, stream.size() - start);
    PackedSequence seq;
    seq.tokens.assign(stream.begin() + static_cast<std::ptrdiff_t>(start),
                      stream.begin() + static_cast<std::ptrdiff_t>(start + n));
    seq.mask.assign(n, 1);
    seq.tokens.resize(context_len, Vocab::kPad);
    seq.mask.resize(context_len, 0);
    out.push_back(std::move(seq));
  }
  return out;
}

inline std::vector<PackedSequence> pack(const std::vector<CleanDocument>& docs, std::size_t context_len) {
  std::vector<std::string_view> texts;
  texts.reserve(docs.size());
  for (const CleanDocument& doc : docs) texts.push_back(doc.text);
  return pack_texts(texts, context_len);
}

// ---------------------------------------------------------------------------
// Packed-sequence cache file ("DFPK")
// ---------------------------------------------------------------------------

inline constexpr std::array<char, 4> kPackMagic{'D', 'F', 'P', 'K'};
inline constexpr std::uint32_t kPackVersion = 1;

namespace detail {

template <class T>
void put_le(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF));
}

template <class T>
T get_le(std::string_view bytes, std::size_t offset) {
  std::uint64_t value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) value |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[offset + i])) << (8 * i);
  return static_cast<T>(value);
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  auto in = open_input(path, std::ios::in | std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace detail

struct PackCache {
  std::size_t context_len = 0;
  std::vector<PackedSequence> sequences;
};

inline std::string serialize_pack_cache(const PackCache& cache) {
  const std::size_t ctx = cache.context_len;
  const std::size_t bitmap_bytes = (ctx + 7) / 8;
  std::string out(kPackMagic.begin(), kPackMagic.end());
  detail::put_le<std::uint32_t>(out, kPackVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ctx));
  detail::put_le<std::uint64_t>(out, cache.sequences.size());
  for (const PackedSequence& seq : cache.sequences) {
    if (seq.tokens.size() != ctx || seq.mask.size() != ctx) throw DataError("pack cache: sequence length != context_len");
    for (TokenId id : seq.tokens) detail::put_le<std::uint32_t>(out, id);
  }
  for (const PackedSequence& seq : cache.sequences) {
    std::string bitmap(bitmap_bytes, '\0');
    for (std::size_t i = 0; i < ctx; ++i) {
      if (seq.mask[i]) bitmap[i / 8] = static_cast<char>(static_cast<unsigned char>(bitmap[i / 8]) | (1u << (i % 8)));
    }
    out += bitmap;
  }
  return out;
}

inline PackCache parse_pack_cache(std::string_view bytes) {
  constexpr std::size_t kHeader = 4 + 4 + 4 + 8;
  if (bytes.size() < kHeader || !std::equal(kPackMagic.begin(), kPackMagic.end(), bytes.begin())) {
    throw IntegrityError("pack cache: bad magic");
  }
  const auto version = detail::get_le<std::uint32_t>(bytes, 4);
  if (version != kPackVersion) throw IntegrityError("pack cache: unsupported version " + std::to_string(version));
  PackCache cache;
  cache.context_len = detail::get_le<std::uint32_t>(bytes, 8);
  const auto count = detail::get_le<std::uint64_t>(bytes, 12);
  const std::size_t ctx = cache.context_len;
  const std::size_t bitmap_bytes = (ctx + 7) / 8;
  if (ctx < 2) throw IntegrityError("pack cache: context_len < 2");
  if (count > (bytes.size() - kHeader) / (ctx * 4 + bitmap_bytes) || kHeader + count * (ctx * 4 + bitmap_bytes) != bytes.size()) {
    throw IntegrityError("pack cache: size does not match header");
  }
  cache.sequences.resize(count);
  std::size_t offset = kHeader;
  for (PackedSequence& seq : cache.sequences) {
    seq.tokens.resize(ctx);
    for (std::size_t i = 0; i < ctx; ++i, offset += 4) {
      seq.tokens[i] = detail::get_le<std::uint32_t>(bytes, offset);
      if (!Vocab::is_valid(seq.tokens[i])) throw IntegrityError("pack cache: invalid token id");
    }
  }
  for (PackedSequence& seq : cache.sequences) {
    seq.mask.resize(ctx);
    for (std::size_t i = 0; i < ctx; ++i) seq.mask[i] = (static_cast<unsigned char>(bytes[offset + i / 8]) >> (i % 8)) & 1u;
    offset += bitmap_bytes;
  }
  return cache;
}

inline void write_pack_cache(const std::filesystem::path& path, const PackCache& cache) {
  auto out = open_output(path, std::ios::out | std::ios::binary);
  const std::string bytes = serialize_pack_cache(cache);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write error: " + path.string());
}

inline PackCache read_pack_cache(const std::filesystem::path& path) {
  return parse_pack_cache(detail::read_file_bytes(path));
}

// ---------------------------------------------------------------------------
// Ratio-controlled batches
// ---------------------------------------------------------------------------

struct MixRatio {
  int book = 15;
  int paper = 4;
  int general = 1;

  int sum() const noexcept { return book + paper + general; }
  int of(Source s) const noexcept {
    switch (s) {
      case Source::book: return book;
      case Source::paper: return paper;
      case Source::general: return general;
    }
    return 0;
  }
  void validate() const {
    if (book < 0 || paper < 0 || general < 0) throw ConfigError("mix ratio entries must be >= 0");
    if (sum() <= 0) throw ConfigError("mix ratio must have a positive sum");
  }
};

// Sequences of one source, visited in a per-pass shuffled order. The order for
// pass w is a pure function of (seed, source, w), so a stream's full state is
// (cursor, wraps).
class SourceStream {
 public:
  SourceStream() = default;
  SourceStream(Source source, std::vector<PackedSequence> sequences, std::uint64_t seed)
      : source_(source), sequences_(std::move(sequences)), seed_(seed) {
    reshuffle();
  }

  Source source() const noexcept { return source_; }
  std::size_t size() const noexcept { return sequences_.size(); }
  bool empty() const noexcept { return sequences_.empty(); }
  std::size_t cursor() const noexcept { return cursor_; }
  std::uint64_t wraps() const noexcept { return wraps_; }
  const std::vector<PackedSequence>& sequences() const noexcept { return sequences_; }

  // Returns the index (into sequences()) of the next sequence and advances.
  std::size_t next() {
    const std::size_t index = order_[cursor_];
    if (++cursor_ == sequences_.size()) {
      cursor_ = 0;
      ++wraps_;
      reshuffle();
    }
    return index;
  }

  void restore(std::size_t cursor, std::uint64_t wraps) {
    if (!sequences_.empty() && cursor >= sequences_.size()) throw DataError("stream cursor out of range");
    cursor_ = cursor;
    wraps_ = wraps;
    reshuffle();
  }

 private:
  void reshuffle() {
    Rng rng = Rng::substream(mix_seed(seed_, static_cast<std::uint64_t>(source_)), "stream-pass", wraps_);
    order_ = rng.permutation(sequences_.size());
  }

  Source source_ = Source::book;
  std::vector<PackedSequence> sequences_;
  std::uint64_t seed_ = 0;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::uint64_t wraps_ = 0;
};

// The book stream defines epochs: epoch == number of completed passes over it.
struct EpochState {
  std::uint64_t epoch = 0;
  std::size_t book_tokens_seen = 0;  // non-PAD book tokens consumed in the current epoch
  std::size_t total_book_tokens = 0;
};

struct Batch {
  std::size_t rows = 0;
  std::size_t context_len = 0;
  std::vector<TokenId> tokens;        // rows x context_len
  std::vector<std::uint8_t> mask;     // rows x context_len, 0 at PAD
  std::vector<Source> sources;        // per row
  std::vector<std::size_t> sequence;  // per row: index within its source stream

  std::span<const TokenId> row_tokens(std::size_t r) const { return {tokens.data() + r * context_len, context_len}; }
  std::span<const std::uint8_t> row_mask(std::size_t r) const { return {mask.data() + r * context_len, context_len}; }
};

struct StreamPosition {
  std::size_t cursor = 0;
  std::uint64_t wraps = 0;
};

struct MixerState {
  std::array<StreamPosition, 3> streams{};
  std::size_t book_tokens_seen = 0;
};

class Mixer {
 public:
  Mixer(std::array<std::vector<PackedSequence>, 3> sequences, MixRatio ratio, std::size_t batch_size, std::uint64_t seed)
      : ratio_(ratio), batch_size_(batch_size) {
    ratio_.validate();
    if (batch_size_ == 0 || batch_size_ % static_cast<std::size_t>(ratio_.sum()) != 0) {
      throw ConfigError("batch size " + std::to_string(batch_size_) + " is not divisible by mix ratio sum " +
                        std::to_string(ratio_.sum()));
    }
    for (Source s : kAllSources) {
      auto& seqs = sequences[static_cast<std::size_t>(s)];
      if (ratio_.of(s) > 0 && seqs.empty()) {
        throw ConfigError("source stream \"" + std::string(to_string(s)) + "\" is empty but has a nonzero ratio");
      }
      for (const PackedSequence& seq : seqs) {
        if (context_len_ == 0) context_len_ = seq.tokens.size();
        if (seq.tokens.size() != context_len_ || seq.mask.size() != context_len_) {
          throw DataError("packed sequences must share one context length");
        }
      }
      streams_[static_cast<std::size_t>(s)] = SourceStream(s, std::move(seqs), seed);
    }
    for (const PackedSequence& seq : stream(Source::book).sequences()) total_book_tokens_ += seq.non_pad();
  }

  std::size_t batch_size() const noexcept { return batch_size_; }
  std::size_t context_len() const noexcept { return context_len_; }
  const MixRatio& ratio() const noexcept { return ratio_; }
  const SourceStream& stream(Source s) const { return streams_[static_cast<std::size_t>(s)]; }

  std::size_t rows_per_batch(Source s) const {
    return batch_size_ / static_cast<std::size_t>(ratio_.sum()) * static_cast<std::size_t>(ratio_.of(s));
  }

  EpochState epoch_state() const {
    return {stream(Source::book).wraps(), book_tokens_seen_, total_book_tokens_};
  }

  // Rows are grouped by source in book, paper, general order.
  std::pair<Batch, EpochState> next_batch() {
    Batch batch;
    batch.rows = batch_size_;
    batch.context_len = context_len_;
    batch.tokens.reserve(batch_size_ * context_len_);
    batch.mask.reserve(batch_size_ * context_len_);
    for (Source s : kAllSources) {
      SourceStream& src = streams_[static_cast<std::size_t>(s)];
      for (std::size_t r = 0; r < rows_per_batch(s); ++r) {
        const std::uint64_t wraps_before = src.wraps();
        const std::size_t index = src.next();
        const PackedSequence& seq = src.sequences()[index];
        batch.tokens.insert(batch.tokens.end(), seq.tokens.begin(), seq.tokens.end());
        batch.mask.insert(batch.mask.end(), seq.mask.begin(), seq.mask.end());
        batch.sources.push_back(s);
        batch.sequence.push_back(index);
        if (s == Source::book) {
          book_tokens_seen_ += seq.non_pad();
          if (src.wraps() != wraps_before) book_tokens_seen_ = 0;
        }
      }
    }
    return {std::move(batch), epoch_state()};
  }

  MixerState state() const {
    MixerState st;
    for (Source s : kAllSources) st.streams[static_cast<std::size_t>(s)] = {stream(s).cursor(), stream(s).wraps()};
    st.book_tokens_seen = book_tokens_seen_;
    return st;
  }

  void restore(const MixerState& st) {
    for (std::size_t i = 0; i < streams_.size(); ++i) streams_[i].restore(st.streams[i].cursor, st.streams[i].wraps);
    book_tokens_seen_ = st.book_tokens_seen;
  }

 private:
  MixRatio ratio_;
  std::size_t batch_size_;
  std::size_t context_len_ = 0;
  std::array<SourceStream, 3> streams_;
  std::size_t total_book_tokens_ = 0;
  std::size_t book_tokens_seen_ = 0;
};

inline json to_json(const MixRatio& r) { return {{"book", r.book}, {"paper", r.paper}, {"general", r.general}}; }

inline json to_json(const EpochState& e) {
  return {{"epoch", e.epoch}, {"book_tokens_seen", e.book_tokens_seen}, {"total_book_tokens", e.total_book_tokens}};
}

inline json to_json(const MixerState& st) {
  json streams = json::array();
  for (const StreamPosition& p : st.streams) streams.push_back({{"cursor", p.cursor}, {"wraps", p.wraps}});
  return {{"streams", streams}, {"book_tokens_seen", st.book_tokens_seen}};
}

inline MixerState mixer_state_from_json(const json& j) {
  MixerState st;
  const json& streams = j.at("streams");
  if (!streams.is_array() || streams.size() != 3) throw DataError("mixer state: expected 3 streams");
  for (std::size_t i = 0; i < 3; ++i) {
    st.streams[i].cursor = streams[i].at("cursor").get<std::size_t>();
    st.streams[i].wraps = streams[i].at("wraps").get<std::uint64_t>();
  }
  st.book_tokens_seen = j.at("book_tokens_seen").get<std::size_t>();
  return st;
}

}  // namespace domainforge
