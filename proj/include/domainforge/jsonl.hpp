#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "error.hpp"

namespace domainforge {

using json = nlohmann::json;

// A per-record problem found while reading an input file. Line numbers are 1-based.
struct Diagnostic {
  std::size_t line = 0;
  std::string message;
};

template <class T>
struct Ingested {
  std::vector<T> items;
  std::vector<std::size_t> lines;  // source line of each item
  std::vector<Diagnostic> diagnostics;
};

inline std::ifstream open_input(const std::filesystem::path& path, std::ios::openmode mode = std::ios::in) {
  std::ifstream in(path, mode);
  if (!in) throw IoError("cannot open file: " + path.string());
  return in;
}

inline std::ofstream open_output(const std::filesystem::path& path, std::ios::openmode mode = std::ios::out) {
  std::ofstream out(path, mode | std::ios::trunc);
  if (!out) throw IoError("cannot write file: " + path.string());
  return out;
}

// Reads a JSON Lines file, converting each object with `convert`. Lines that fail to
// parse or convert are reported and skipped; blank lines are ignored.
template <class T, class Convert>
Ingested<T> read_jsonl(const std::filesystem::path& path, Convert&& convert) {
  auto in = open_input(path);
  Ingested<T> result;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    try {
      result.items.push_back(convert(json::parse(line)));
      result.lines.push_back(line_no);
    } catch (const std::exception& e) {
      result.diagnostics.push_back({line_no, e.what()});
    }
  }
  if (in.bad()) throw IoError("read error: " + path.string());
  return result;
}

template <class Range, class ToJson>
void write_jsonl(const std::filesystem::path& path, const Range& items, ToJson&& to_json) {
  auto out = open_output(path, std::ios::out | std::ios::binary);
  for (const auto& item : items) out << to_json(item).dump() << '\n';
  if (!out) throw IoError("write error: " + path.string());
}

inline void write_json(const std::filesystem::path& path, const json& document) {
  auto out = open_output(path, std::ios::out | std::ios::binary);
  out << document.dump(2) << '\n';
  if (!out) throw IoError("write error: " + path.string());
}

inline json read_json(const std::filesystem::path& path) {
  auto in = open_input(path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

// Typed field access with messages that name the missing or mistyped key.
inline const json& require_field(const json& object, const char* key) {
  if (!object.is_object()) throw DataError("expected a JSON object");
  auto it = object.find(key);
  if (it == object.end()) throw DataError(std::string("missing field \"") + key + "\"");
  return *it;
}

inline std::string require_string(const json& object, const char* key) {
  const json& value = require_field(object, key);
  if (!value.is_string()) throw DataError(std::string("field \"") + key + "\" must be a string");
  return value.get<std::string>();
}

inline std::optional<std::string> optional_string(const json& object, const char* key) {
  auto it = object.find(key);
  if (it == object.end() || it->is_null()) return std::nullopt;
  if (!it->is_string()) throw DataError(std::string("field \"") + key + "\" must be a string");
  return it->get<std::string>();
}

}  // namespace domainforge
