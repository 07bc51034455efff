#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <string>

#include <json.hpp>

#include "lmprobe/errors.hpp"

namespace lmprobe {

using json = nlohmann::json;

/// Reads a line-delimited JSON file, invoking fn(line_number, record) for
/// every non-empty line. Parse failures report "<file>:<line>: ...".
inline void read_jsonl(const std::filesystem::path& path,
                       const std::function<void(int, const json&)>& fn) {
  std::ifstream in(path);
  if (!in) {
    throw DatasetError("cannot open " + path.string());
  }
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos) {
      continue;
    }
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DatasetError(path.filename().string() + ":" +
                         std::to_string(line_no) + ": " + e.what());
    }
    fn(line_no, rec);
  }
}

inline void append_jsonl(std::ofstream& out, const json& rec) {
  out << rec.dump() << '\n';
}

/// Fetches a required field, reporting the record location on failure.
inline const json& require_field(const json& rec, const char* key,
                                 const std::filesystem::path& file,
                                 int line_no) {
  auto it = rec.find(key);
  if (it == rec.end()) {
    throw DatasetError(file.filename().string() + ":" +
                       std::to_string(line_no) + ": missing field \"" + key +
                       "\"");
  }
  return *it;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error("cannot open " + path.string());
  }
  return std::string(std::istreambuf_iterator<char>(in),
                     std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path,
                       const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw Error("cannot write " + path.string());
  }
  out << content;
}

}  // namespace lmprobe
