// Copyright 2026 The DP-Align Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "dpalign/datasets.h"

#include <cstdio>

#include "absl/strings/str_cat.h"
#include "absl/strings/str_split.h"
#include "dpalign/checkpoint.h"
#include "dpalign/status_macros.h"

namespace dpalign {
namespace {

int HexDigit(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  if (c >= 'A' && c <= 'F') return c - 'A' + 10;
  return -1;
}

// Splits into lines, dropping one trailing empty line. Blank lines are kept
// so that errors carry the physical line number.
std::vector<std::string_view> Lines(std::string_view contents) {
  std::vector<std::string_view> lines;
  size_t start = 0;
  while (start < contents.size()) {
    size_t end = contents.find('\n', start);
    if (end == std::string_view::npos) end = contents.size();
    std::string_view line = contents.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    lines.push_back(line);
    start = end + 1;
  }
  return lines;
}

absl::StatusOr<std::vector<std::string>> Fields(std::string_view line, size_t expected,
                                                size_t line_no) {
  std::vector<std::string> out;
  size_t start = 0;
  while (true) {
    const size_t tab = line.find('\t', start);
    auto field = UnescapeField(line.substr(start, tab == std::string_view::npos
                                                      ? std::string_view::npos
                                                      : tab - start));
    if (!field.ok()) {
      return absl::InvalidArgumentError(
          absl::StrCat("line ", line_no, ": ", field.status().message()));
    }
    out.push_back(*std::move(field));
    if (tab == std::string_view::npos) break;
    start = tab + 1;
  }
  if (out.size() != expected) {
    return absl::InvalidArgumentError(absl::StrCat("line ", line_no, ": expected ", expected,
                                                   " tab-separated fields, found ", out.size()));
  }
  return out;
}

}  // namespace

std::string EscapeField(std::string_view raw) {
  std::string out;
  out.reserve(raw.size());
  for (unsigned char c : raw) {
    switch (c) {
      case '\\': out += "\\\\"; break;
      case '\t': out += "\\t"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      default:
        if (c < 0x20 || c == 0x7f) {
          char buf[5];
          std::snprintf(buf, sizeof(buf), "\\x%02x", c);
          out += buf;
        } else {
          out += static_cast<char>(c);
        }
    }
  }
  return out;
}

absl::StatusOr<std::string> UnescapeField(std::string_view escaped) {
  std::string out;
  for (size_t i = 0; i < escaped.size(); ++i) {
    if (escaped[i] != '\\') {
      out += escaped[i];
      continue;
    }
    if (i + 1 >= escaped.size()) return absl::InvalidArgumentError("dangling backslash");
    const char e = escaped[++i];
    switch (e) {
      case '\\': out += '\\'; break;
      case 't': out += '\t'; break;
      case 'n': out += '\n'; break;
      case 'r': out += '\r'; break;
      case 'x': {
        if (i + 2 >= escaped.size()) {
          return absl::InvalidArgumentError("truncated \\x escape");
        }
        const int hi = HexDigit(escaped[i + 1]), lo = HexDigit(escaped[i + 2]);
        if (hi < 0 || lo < 0) return absl::InvalidArgumentError("bad \\x escape");
        out += static_cast<char>(hi * 16 + lo);
        i += 2;
        break;
      }
      default:
        return absl::InvalidArgumentError(absl::StrCat("unknown escape \\", std::string(1, e)));
    }
  }
  return out;
}

absl::StatusOr<std::vector<SftExample>> ParseSftDataset(std::string_view contents) {
  std::vector<SftExample> out;
  const auto lines = Lines(contents);
  for (size_t i = 0; i < lines.size(); ++i) {
    ASSIGN_OR_RETURN(std::vector<std::string> f, Fields(lines[i], 2, i + 1));
    if (f[1].empty()) {
      return absl::InvalidArgumentError(absl::StrCat("line ", i + 1, ": empty target"));
    }
    out.push_back({std::move(f[0]), std::move(f[1])});
  }
  return out;
}

std::string FormatSftDataset(const std::vector<SftExample>& examples) {
  std::string out;
  for (const SftExample& e : examples) {
    absl::StrAppend(&out, EscapeField(e.prompt), "\t", EscapeField(e.target), "\n");
  }
  return out;
}

absl::StatusOr<std::vector<PreferenceRecord>> ParsePreferenceDataset(std::string_view contents) {
  std::vector<PreferenceRecord> out;
  const auto lines = Lines(contents);
  for (size_t i = 0; i < lines.size(); ++i) {
    ASSIGN_OR_RETURN(std::vector<std::string> f, Fields(lines[i], 4, i + 1));
    if (f[3] != "0" && f[3] != "1") {
      return absl::InvalidArgumentError(
          absl::StrCat("line ", i + 1, ": preference bit must be 0 or 1, got '", f[3], "'"));
    }
    if (f[1] == f[2]) {
      return absl::InvalidArgumentError(
          absl::StrCat("line ", i + 1, ": degenerate pair, y0 == y1"));
    }
    if (f[1].empty() || f[2].empty()) {
      return absl::InvalidArgumentError(absl::StrCat("line ", i + 1, ": empty completion"));
    }
    out.push_back({std::move(f[0]), std::move(f[1]), std::move(f[2]), f[3] == "1" ? 1 : 0});
  }
  return out;
}

std::string FormatPreferenceDataset(const std::vector<PreferenceRecord>& records) {
  std::string out;
  for (const PreferenceRecord& r : records) {
    absl::StrAppend(&out, EscapeField(r.prompt), "\t", EscapeField(r.y0), "\t",
                    EscapeField(r.y1), "\t", r.preferred, "\n");
  }
  return out;
}

absl::StatusOr<std::vector<std::string>> ParsePromptList(std::string_view contents) {
  std::vector<std::string> out;
  const auto lines = Lines(contents);
  for (size_t i = 0; i < lines.size(); ++i) {
    ASSIGN_OR_RETURN(std::vector<std::string> f, Fields(lines[i], 1, i + 1));
    out.push_back(std::move(f[0]));
  }
  return out;
}

std::string FormatPromptList(const std::vector<std::string>& prompts) {
  std::string out;
  for (const std::string& p : prompts) absl::StrAppend(&out, EscapeField(p), "\n");
  return out;
}

absl::StatusOr<std::vector<SftExample>> LoadSftDataset(const std::string& path) {
  ASSIGN_OR_RETURN(std::string contents, ReadFile(path));
  auto parsed = ParseSftDataset(contents);
  if (!parsed.ok()) return absl::InvalidArgumentError(path + ": " + std::string(parsed.status().message()));
  return parsed;
}

absl::StatusOr<std::vector<PreferenceRecord>> LoadPreferenceDataset(const std::string& path) {
  ASSIGN_OR_RETURN(std::string contents, ReadFile(path));
  auto parsed = ParsePreferenceDataset(contents);
  if (!parsed.ok()) return absl::InvalidArgumentError(path + ": " + std::string(parsed.status().message()));
  return parsed;
}

absl::StatusOr<std::vector<std::string>> LoadPromptList(const std::string& path) {
  ASSIGN_OR_RETURN(std::string contents, ReadFile(path));
  auto parsed = ParsePromptList(contents);
  if (!parsed.ok()) return absl::InvalidArgumentError(path + ": " + std::string(parsed.status().message()));
  return parsed;
}

TokenSeq SftTargetTokens(const SftExample& example) {
  TokenSeq t = EncodeBytes(example.target);
  t.push_back(kEosToken);
  return t;
}

}  // namespace dpalign
