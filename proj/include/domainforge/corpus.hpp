#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <regex>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "error.hpp"
#include "hash.hpp"
#include "jsonl.hpp"
#include "rng.hpp"

namespace domainforge {

enum class Source : std::uint8_t { book = 0, paper = 1, general = 2 };
inline constexpr std::array<Source, 3> kAllSources{Source::book, Source::paper, Source::general};

inline std::string_view to_string(Source s) {
  switch (s) {
    case Source::book: return "book";
    case Source::paper: return "paper";
    case Source::general: return "general";
  }
  return "?";
}

inline std::optional<Source> parse_source(std::string_view s) {
  if (s == "book") return Source::book;
  if (s == "paper") return Source::paper;
  if (s == "general") return Source::general;
  return std::nullopt;
}

struct RawDocument {
  std::string id;
  Source source = Source::book;
  std::optional<std::string> pmc_id;
  std::optional<std::string> title;
  std::string text;
};

// ---------------------------------------------------------------------------
// Cleaning rules
// ---------------------------------------------------------------------------

enum RuleId : std::size_t { kRuleUrl = 0, kRuleCitation, kRuleFigureRef, kRuleReferenceTail, kRuleFrontMatter };
inline constexpr std::size_t kRuleCount = 5;
inline constexpr int kCleaningRulesVersion = 1;

struct CleaningRule {
  std::string_view id;
  std::string_view target;
  std::string_view pattern;  // ECMAScript syntax; R4/R5 patterns apply to whole lines
};

// R1..R3 are applied inside each line. R4 and R5 are line-structural.
inline constexpr std::array<CleaningRule, kRuleCount> kCleaningRules{{
    {"R1", "URL (scheme + authority)", R"((?:https?|ftp)://[^\s/?#]+[^\s]*)"},
    {"R2", "citation marker",
     R"(\[\d+(?:\s*(?:,|-|\xE2\x80\x93)\s*\d+)*\]|\([A-Z][A-Za-z'\-]+(?: et al\.?| (?:and|&) [A-Z][A-Za-z'\-]+)?,? \d{4}[a-z]?\))"},
    {"R3", "figure/table reference",
     R"(\((?:Figure|Fig|Table|Tab)\.?[ \t]*\d+[A-Za-z]?\)|\b(?:Figure|Fig|Table|Tab)\.?[ \t]*\d+[A-Za-z]?\b)"},
    {"R4", "reference section tail", R"(^[ \t]*(?:references|bibliography)[ \t]*$)"},
    {"R5", "front-matter line (author list / contents)",
     R"(^[ \t]*(?:[A-Z][A-Za-z'.\-]*,?|\(?\d+(?:[.,:\-]\d+)*[.,:)]?|[IVXLC]+\.?)(?:[ \t]+(?:[A-Z][A-Za-z'.\-]*,?|\(?\d+(?:[.,:\-]\d+)*[.,:)]?|[IVXLC]+\.?)){0,2}[ \t]*$)"},
}};

using RuleCounts = std::array<std::size_t, kRuleCount>;

inline RuleCounts& operator+=(RuleCounts& a, const RuleCounts& b) {
  for (std::size_t i = 0; i < kRuleCount; ++i) a[i] += b[i];
  return a;
}

struct CleanedText {
  std::string text;
  RuleCounts removed{};
};

namespace detail {

struct CompiledRules {
  std::array<std::regex, 3> inline_rules;
  std::regex reference_heading;
  std::regex front_matter;

  CompiledRules()
      : inline_rules{std::regex(std::string(kCleaningRules[0].pattern)),
                     std::regex(std::string(kCleaningRules[1].pattern)),
                     std::regex(std::string(kCleaningRules[2].pattern))},
        reference_heading(std::string(kCleaningRules[3].pattern), std::regex::icase),
        front_matter(std::string(kCleaningRules[4].pattern)) {}
};

// std::regex objects are safe for concurrent matching once constructed.
inline const CompiledRules& compiled_rules() {
  static const CompiledRules rules;
  return rules;
}

inline std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) {
      lines.push_back(text.substr(start));
      break;
    }
    lines.push_back(text.substr(start, end - start));
    start = end + 1;
  }
  return lines;
}

inline bool is_blank(std::string_view line) {
  return std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c) != 0; });
}

inline std::string erase_matches(const std::string& line, const std::regex& pattern, std::size_t& count) {
  std::string out;
  std::size_t last = 0;
  for (auto it = std::sregex_iterator(line.begin(), line.end(), pattern); it != std::sregex_iterator(); ++it) {
    out.append(line, last, static_cast<std::size_t>(it->position()) - last);
    out.push_back(' ');
    last = static_cast<std::size_t>(it->position() + it->length());
    ++count;
  }
  if (last == 0) return line;
  out.append(line, last, std::string::npos);
  return out;
}

// Per line: horizontal whitespace runs become one space and ends are trimmed.
// Blank-line runs collapse to a single empty line; leading/trailing blank lines go.
inline std::string normalize_layout(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool pending_blank = false;
  for (std::string_view line : split_lines(text)) {
    std::string collapsed;
    bool in_space = false;
    for (char c : line) {
      if (c == ' ' || c == '\t' || c == '\r' || c == '\f' || c == '\v') {
        in_space = true;
      } else {
        if (in_space && !collapsed.empty()) collapsed.push_back(' ');
        collapsed.push_back(c);
        in_space = false;
      }
    }
    if (collapsed.empty()) {
      pending_blank = !out.empty();
      continue;
    }
    if (!out.empty()) out += pending_blank ? "\n\n" : "\n";
    pending_blank = false;
    out += collapsed;
  }
  return out;
}

inline std::string clean_pass(const std::string& text, RuleCounts& counts) {
  const CompiledRules& rules = compiled_rules();
  std::vector<std::string> lines;
  for (std::string_view line : split_lines(text)) lines.emplace_back(line);

  for (std::string& line : lines) {
    for (std::size_t r = 0; r < rules.inline_rules.size(); ++r) {
      line = erase_matches(line, rules.inline_rules[r], counts[r]);
    }
  }

  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (std::regex_match(lines[i], rules.reference_heading)) {
      lines.resize(i);
      ++counts[kRuleReferenceTail];
      break;
    }
  }

  std::size_t head = 0;
  while (head < lines.size()) {
    if (is_blank(lines[head])) {
      ++head;
    } else if (std::regex_match(lines[head], rules.front_matter)) {
      ++counts[kRuleFrontMatter];
      ++head;
    } else {
      break;
    }
  }

  std::string joined;
  for (std::size_t i = head; i < lines.size(); ++i) {
    if (i > head) joined.push_back('\n');
    joined += lines[i];
  }
  return normalize_layout(joined);
}

}  // namespace detail

// Applies every cleaning rule until nothing changes, so the result is a fixed
// point: clean_text(clean_text(x).text).text == clean_text(x).text.
inline CleanedText clean_text(std::string_view text) {
  CleanedText result;
  std::string current(text);
  // Passes after the first see layout-normalized text, so any further change
  // removes bytes and the loop terminates.
  for (;;) {
    std::string next = detail::clean_pass(current, result.removed);
    if (next == current) break;
    current = std::move(next);
  }
  result.text = std::move(current);
  return result;
}

inline std::size_t word_count(std::string_view text) {
  std::size_t count = 0;
  bool in_word = false;
  for (unsigned char c : text) {
    const bool space = std::isspace(c) != 0;
    if (!space && !in_word) ++count;
    in_word = !space;
  }
  return count;
}

struct CleanDocument {
  std::string id;
  Source source = Source::book;
  std::optional<std::string> pmc_id;
  std::optional<std::string> title;
  std::string text;
  RuleCounts removed{};
  std::size_t token_estimate = 0;
};

inline CleanDocument clean_document(const RawDocument& doc) {
  CleanedText cleaned = clean_text(doc.text);
  CleanDocument out{doc.id, doc.source, doc.pmc_id, doc.title, std::move(cleaned.text), cleaned.removed, 0};
  out.token_estimate = word_count(out.text);
  return out;
}

// Cleans documents on `workers` threads. Output order equals input order.
inline std::vector<CleanDocument> clean_documents(const std::vector<RawDocument>& docs, std::size_t workers) {
  std::vector<CleanDocument> out(docs.size());
  workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(docs.size(), 1));
  if (workers == 1) {
    for (std::size_t i = 0; i < docs.size(); ++i) out[i] = clean_document(docs[i]);
    return out;
  }
  std::vector<std::jthread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < docs.size(); i += workers) out[i] = clean_document(docs[i]);
    });
  }
  pool.clear();
  return out;
}

// ---------------------------------------------------------------------------
// Paper filtering
// ---------------------------------------------------------------------------

struct DocumentError {
  std::string id;
  std::string message;
};

struct FilterResult {
  std::vector<RawDocument> kept;
  std::vector<DocumentError> errors;
};

inline bool has_pmc_id(const RawDocument& doc) { return doc.pmc_id.has_value() && !doc.pmc_id->empty(); }

// Keeps papers that carry a PubMed Central id. Non-paper inputs are rejected
// individually and the rest of the stream is still processed.
inline FilterResult filter_papers(std::vector<RawDocument> docs) {
  FilterResult result;
  for (RawDocument& doc : docs) {
    if (doc.source != Source::paper) {
      result.errors.push_back({doc.id, "source is " + std::string(to_string(doc.source)) + ", expected paper"});
      continue;
    }
    if (has_pmc_id(doc)) result.kept.push_back(std::move(doc));
  }
  return result;
}

// ---------------------------------------------------------------------------
// De-duplication
// ---------------------------------------------------------------------------

struct DedupConfig {
  std::size_t shingle_width = 5;
  std::size_t signature_size = 64;
  double threshold = 0.9;
  std::uint64_t seed = 0;
  std::size_t bands = 16;  // LSH banding for candidate lookup; must divide signature_size
};

enum class DedupVerdict { unique, exact_duplicate, near_duplicate };

// Exact duplicates are detected with a 64-bit hash of the normalized text; near
// duplicates with a min-hash estimate of character-shingle Jaccard similarity.
class DedupIndex {
 public:
  using Signature = std::vector<std::uint64_t>;

  explicit DedupIndex(DedupConfig config = {}) : config_(config) {
    if (config_.shingle_width == 0 || config_.signature_size == 0) throw ConfigError("dedup: zero shingle width or signature size");
    if (!(config_.threshold > 0.0 && config_.threshold <= 1.0)) throw ConfigError("dedup: threshold must be in (0, 1]");
    if (config_.bands == 0 || config_.signature_size % config_.bands != 0) throw ConfigError("dedup: bands must divide signature size");
    salts_.resize(config_.signature_size);
    for (std::size_t i = 0; i < salts_.size(); ++i) salts_[i] = mix_seed(config_.seed, i);
    buckets_.resize(config_.bands);
    // A pair at or above the threshold differs in at most this many signature
    // slots, so it shares at least one band whenever that count is < bands.
    const auto max_mismatch = static_cast<std::size_t>(
        std::floor((1.0 - config_.threshold) * static_cast<double>(config_.signature_size) + 1e-9));
    banding_complete_ = max_mismatch < config_.bands;
  }

  const DedupConfig& config() const noexcept { return config_; }
  std::size_t size() const noexcept { return signatures_.size(); }

  static std::string normalize(std::string_view text) {
    std::string out;
    out.reserve(text.size());
    bool in_space = false;
    for (unsigned char c : text) {
      if (std::isspace(c)) {
        in_space = true;
        continue;
      }
      if (in_space && !out.empty()) out.push_back(' ');
      in_space = false;
      out.push_back(static_cast<char>(std::tolower(c)));
    }
    return out;
  }

  Signature signature(std::string_view normalized) const {
    Signature sig(config_.signature_size, std::numeric_limits<std::uint64_t>::max());
    const std::size_t w = config_.shingle_width;
    const auto absorb = [&](std::string_view shingle) {
      const std::uint64_t base = fnv1a64(shingle);
      for (std::size_t i = 0; i < sig.size(); ++i) sig[i] = std::min(sig[i], splitmix64(base ^ salts_[i]));
    };
    if (normalized.empty()) return sig;
    if (normalized.size() < w) {
      absorb(normalized);
    } else {
      for (std::size_t i = 0; i + w <= normalized.size(); ++i) absorb(normalized.substr(i, w));
    }
    return sig;
  }

  static double estimate_similarity(const Signature& a, const Signature& b) {
    if (a.empty() || a.size() != b.size()) return 0.0;
    std::size_t equal = 0;
    for (std::size_t i = 0; i < a.size(); ++i) equal += a[i] == b[i];
    return static_cast<double>(equal) / static_cast<double>(a.size());
  }

  DedupVerdict query(std::string_view text) const {
    const std::string normalized = normalize(text);
    if (exact_.contains(fnv1a64(normalized))) return DedupVerdict::exact_duplicate;
    return find_near(signature(normalized)) ? DedupVerdict::near_duplicate : DedupVerdict::unique;
  }

  // Records the text when it is unique; duplicates leave the index unchanged.
  DedupVerdict insert(std::string_view text) {
    const std::string normalized = normalize(text);
    const std::uint64_t digest = fnv1a64(normalized);
    if (exact_.contains(digest)) return DedupVerdict::exact_duplicate;
    Signature sig = signature(normalized);
    if (find_near(sig)) return DedupVerdict::near_duplicate;
    exact_.insert(digest);
    const std::size_t index = signatures_.size();
    for (std::size_t b = 0; b < config_.bands; ++b) buckets_[b][band_key(sig, b)].push_back(index);
    signatures_.push_back(std::move(sig));
    return DedupVerdict::unique;
  }

 private:
  std::uint64_t band_key(const Signature& sig, std::size_t band) const {
    const std::size_t rows = config_.signature_size / config_.bands;
    std::uint64_t h = mix_seed(kFnvOffset, band);
    for (std::size_t r = 0; r < rows; ++r) h = mix_seed(h, sig[band * rows + r]);
    return h;
  }

  bool find_near(const Signature& sig) const {
    if (!banding_complete_) {
      return std::any_of(signatures_.begin(), signatures_.end(),
                         [&](const Signature& other) { return estimate_similarity(sig, other) >= config_.threshold; });
    }
    for (std::size_t b = 0; b < config_.bands; ++b) {
      auto it = buckets_[b].find(band_key(sig, b));
      if (it == buckets_[b].end()) continue;
      for (std::size_t index : it->second) {
        if (estimate_similarity(sig, signatures_[index]) >= config_.threshold) return true;
      }
    }
    return false;
  }

  DedupConfig config_;
  std::vector<std::uint64_t> salts_;
  std::unordered_set<std::uint64_t> exact_;
  std::vector<Signature> signatures_;
  std::vector<std::unordered_map<std::uint64_t, std::vector<std::size_t>>> buckets_;
  bool banding_complete_ = true;
};

struct DedupResult {
  std::vector<CleanDocument> kept;
  std::size_t exact_dropped = 0;
  std::size_t near_dropped = 0;
};

// Sequential by construction: insertion order decides which copy survives.
inline DedupResult dedup(std::vector<CleanDocument> docs, DedupIndex& index) {
  DedupResult result;
  for (CleanDocument& doc : docs) {
    switch (index.insert(doc.text)) {
      case DedupVerdict::unique: result.kept.push_back(std::move(doc)); break;
      case DedupVerdict::exact_duplicate: ++result.exact_dropped; break;
      case DedupVerdict::near_duplicate: ++result.near_dropped; break;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

struct CleaningReport {
  std::size_t documents_in = 0;
  std::size_t documents_out = 0;
  std::size_t papers_without_pmc = 0;
  std::size_t empty_after_cleaning = 0;
  std::size_t duplicates_dropped = 0;
  std::size_t near_duplicates_dropped = 0;
  RuleCounts removed{};

  std::size_t dropped() const noexcept {
    return papers_without_pmc + empty_after_cleaning + duplicates_dropped + near_duplicates_dropped;
  }
};

struct CleanOptions {
  bool dedup = true;
  DedupConfig dedup_config{};
  std::size_t workers = 1;
};

struct CleanOutput {
  std::vector<CleanDocument> documents;
  CleaningReport report;
};

// filter papers -> clean (parallel) -> drop empties -> dedup (sequential).
inline CleanOutput clean_corpus(const std::vector<RawDocument>& docs, const CleanOptions& options) {
  CleanOutput out;
  CleaningReport& report = out.report;
  report.documents_in = docs.size();

  std::vector<RawDocument> eligible;
  eligible.reserve(docs.size());
  for (const RawDocument& doc : docs) {
    if (doc.source == Source::paper && !has_pmc_id(doc)) {
      ++report.papers_without_pmc;
      continue;
    }
    eligible.push_back(doc);
  }

  std::vector<CleanDocument> cleaned = clean_documents(eligible, options.workers);
  std::vector<CleanDocument> non_empty;
  non_empty.reserve(cleaned.size());
  for (CleanDocument& doc : cleaned) {
    report.removed += doc.removed;
    if (doc.text.empty()) {
      ++report.empty_after_cleaning;
    } else {
      non_empty.push_back(std::move(doc));
    }
  }

  if (options.dedup) {
    DedupIndex index(options.dedup_config);
    DedupResult deduped = dedup(std::move(non_empty), index);
    report.duplicates_dropped = deduped.exact_dropped;
    report.near_duplicates_dropped = deduped.near_dropped;
    out.documents = std::move(deduped.kept);
  } else {
    out.documents = std::move(non_empty);
  }
  report.documents_out = out.documents.size();
  return out;
}

// ---------------------------------------------------------------------------
// JSON Lines I/O
// ---------------------------------------------------------------------------

inline RawDocument raw_document_from_json(const json& j) {
  RawDocument doc;
  doc.id = require_string(j, "id");
  if (doc.id.empty()) throw DataError("field \"id\" is empty");
  const std::string source = require_string(j, "source");
  auto parsed = parse_source(source);
  if (!parsed) throw DataError("unknown source \"" + source + "\"");
  doc.source = *parsed;
  doc.pmc_id = optional_string(j, "pmc_id");
  doc.title = optional_string(j, "title");
  doc.text = require_string(j, "text");
  return doc;
}

inline json rule_counts_to_json(const RuleCounts& counts) {
  json j = json::object();
  for (std::size_t r = 0; r < kRuleCount; ++r) j[std::string(kCleaningRules[r].id)] = counts[r];
  return j;
}

inline json to_json(const CleanDocument& doc) {
  json j = {{"id", doc.id}, {"source", to_string(doc.source)}, {"text", doc.text}, {"removed", rule_counts_to_json(doc.removed)}};
  if (doc.pmc_id) j["pmc_id"] = *doc.pmc_id;
  if (doc.title) j["title"] = *doc.title;
  return j;
}

inline CleanDocument clean_document_from_json(const json& j) {
  RawDocument raw = raw_document_from_json(j);
  CleanDocument doc{raw.id, raw.source, raw.pmc_id, raw.title, std::move(raw.text), {}, 0};
  if (auto it = j.find("removed"); it != j.end() && it->is_object()) {
    for (std::size_t r = 0; r < kRuleCount; ++r) doc.removed[r] = it->value(std::string(kCleaningRules[r].id), std::size_t{0});
  }
  doc.token_estimate = word_count(doc.text);
  return doc;
}

inline json to_json(const CleaningReport& r) {
  return {{"documents_in", r.documents_in},
          {"documents_out", r.documents_out},
          {"papers_without_pmc", r.papers_without_pmc},
          {"empty_after_cleaning", r.empty_after_cleaning},
          {"duplicates_dropped", r.duplicates_dropped},
          {"near_duplicates_dropped", r.near_duplicates_dropped},
          {"removed", rule_counts_to_json(r.removed)},
          {"rules_version", kCleaningRulesVersion}};
}

// Reads a corpus file in file order. Malformed lines and repeated ids are
// reported with their line number and skipped.
inline Ingested<RawDocument> ingest(const std::filesystem::path& path) {
  auto result = read_jsonl<RawDocument>(path, raw_document_from_json);
  std::unordered_set<std::string> seen;
  Ingested<RawDocument> unique;
  for (std::size_t i = 0; i < result.items.size(); ++i) {
    RawDocument& doc = result.items[i];
    if (!seen.insert(doc.id).second) {
      result.diagnostics.push_back({result.lines[i], "duplicate document id \"" + doc.id + "\""});
      continue;
    }
    unique.items.push_back(std::move(doc));
    unique.lines.push_back(result.lines[i]);
  }
  unique.diagnostics = std::move(result.diagnostics);
  std::sort(unique.diagnostics.begin(), unique.diagnostics.end(),
            [](const Diagnostic& a, const Diagnostic& b) { return a.line < b.line; });
  return unique;
}

inline Ingested<CleanDocument> read_clean_documents(const std::filesystem::path& path) {
  return read_jsonl<CleanDocument>(path, clean_document_from_json);
}

}  // namespace domainforge
