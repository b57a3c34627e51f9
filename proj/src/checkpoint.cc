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

#include "dpalign/checkpoint.h"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "absl/strings/numbers.h"
#include "absl/strings/str_cat.h"
#include "dpalign/status_macros.h"

namespace dpalign {
namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint encoding assumes a little-endian host");

void PutU32(std::string& out, uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

void PutU64(std::string& out, uint64_t v) {
  char b[8];
  std::memcpy(b, &v, 8);
  out.append(b, 8);
}

void PutString(std::string& out, const std::string& s) {
  PutU32(out, static_cast<uint32_t>(s.size()));
  out += s;
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  absl::Status Need(size_t n) const {
    if (pos_ + n > bytes_.size()) {
      return absl::DataLossError(absl::StrCat("checkpoint truncated at byte ", pos_));
    }
    return absl::OkStatus();
  }
  absl::StatusOr<uint32_t> U32() {
    RETURN_IF_ERROR(Need(4));
    uint32_t v;
    std::memcpy(&v, bytes_.data() + pos_, 4);
    pos_ += 4;
    return v;
  }
  absl::StatusOr<uint64_t> U64() {
    RETURN_IF_ERROR(Need(8));
    uint64_t v;
    std::memcpy(&v, bytes_.data() + pos_, 8);
    pos_ += 8;
    return v;
  }
  absl::StatusOr<uint8_t> U8() {
    RETURN_IF_ERROR(Need(1));
    return static_cast<uint8_t>(bytes_[pos_++]);
  }
  absl::StatusOr<std::string> Str() {
    ASSIGN_OR_RETURN(uint32_t n, U32());
    RETURN_IF_ERROR(Need(n));
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  absl::StatusOr<float> F32() {
    RETURN_IF_ERROR(Need(4));
    float v;
    std::memcpy(&v, bytes_.data() + pos_, 4);
    pos_ += 4;
    return v;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  size_t pos_ = 0;
};

std::map<std::string, std::string> ConfigEntries(const TinyLM& model) {
  const TinyLMConfig& c = model.config();
  std::map<std::string, std::string> e = {
      {"adapter_rank", absl::StrCat(c.adapter_rank)},
      {"context_len", absl::StrCat(c.context_len)},
      {"d_model", absl::StrCat(c.d_model)},
      {"n_heads", absl::StrCat(c.n_heads)},
      {"n_layers", absl::StrCat(c.n_layers)},
      {"seed", absl::StrCat(c.seed)},
      {"vocab_size", absl::StrCat(c.vocab_size)},
  };
  for (const auto& [k, v] : model.metadata()) e["meta." + k] = v;
  return e;
}

absl::Status ParseInt(const std::map<std::string, std::string>& e,
                      const std::string& key, int* out) {
  auto it = e.find(key);
  if (it == e.end() || !absl::SimpleAtoi(it->second, out)) {
    return absl::DataLossError(absl::StrCat("checkpoint config missing ", key));
  }
  return absl::OkStatus();
}

}  // namespace

std::string SerializeCheckpoint(const TinyLM& model) {
  std::string out = "DPAL";
  PutU32(out, kCheckpointVersion);
  const auto entries = ConfigEntries(model);
  PutU32(out, static_cast<uint32_t>(entries.size()));
  for (const auto& [k, v] : entries) {
    PutString(out, k);
    PutString(out, v);
  }
  const ParameterSet& p = model.params();
  PutU32(out, static_cast<uint32_t>(p.size()));
  for (const std::string& name : p.names()) {
    const Tensor& t = p.Get(name);
    PutString(out, name);
    out.push_back(0);  // f32
    PutU32(out, static_cast<uint32_t>(t.rank()));
    for (int64_t d : t.shape()) PutU64(out, static_cast<uint64_t>(d));
    for (double x : t.data()) {
      const float f = static_cast<float>(x);
      char b[4];
      std::memcpy(b, &f, 4);
      out.append(b, 4);
    }
  }
  return out;
}

absl::StatusOr<TinyLM> ParseCheckpoint(const std::string& bytes) {
  if (bytes.size() < 8 || bytes.compare(0, 4, "DPAL") != 0) {
    return absl::DataLossError("not a checkpoint: bad magic");
  }
  Reader r(bytes);
  for (int i = 0; i < 4; ++i) (void)r.U8();
  ASSIGN_OR_RETURN(uint32_t version, r.U32());
  if (version != kCheckpointVersion) {
    return absl::DataLossError(absl::StrCat("unsupported checkpoint version ", version));
  }
  ASSIGN_OR_RETURN(uint32_t n_entries, r.U32());
  std::map<std::string, std::string> entries;
  for (uint32_t i = 0; i < n_entries; ++i) {
    ASSIGN_OR_RETURN(std::string k, r.Str());
    ASSIGN_OR_RETURN(std::string v, r.Str());
    entries[k] = v;
  }
  TinyLMConfig config;
  RETURN_IF_ERROR(ParseInt(entries, "vocab_size", &config.vocab_size));
  RETURN_IF_ERROR(ParseInt(entries, "context_len", &config.context_len));
  RETURN_IF_ERROR(ParseInt(entries, "d_model", &config.d_model));
  RETURN_IF_ERROR(ParseInt(entries, "n_layers", &config.n_layers));
  RETURN_IF_ERROR(ParseInt(entries, "n_heads", &config.n_heads));
  RETURN_IF_ERROR(ParseInt(entries, "adapter_rank", &config.adapter_rank));
  if (!absl::SimpleAtoi(entries["seed"], &config.seed)) {
    return absl::DataLossError("checkpoint config missing seed");
  }
  std::map<std::string, std::string> metadata;
  for (const auto& [k, v] : entries) {
    if (k.rfind("meta.", 0) == 0) metadata[k.substr(5)] = v;
  }
  ASSIGN_OR_RETURN(uint32_t n_arrays, r.U32());
  ParameterSet params;
  for (uint32_t i = 0; i < n_arrays; ++i) {
    ASSIGN_OR_RETURN(std::string name, r.Str());
    ASSIGN_OR_RETURN(uint8_t dtype, r.U8());
    if (dtype != 0) {
      return absl::DataLossError(absl::StrCat("array ", name, ": unsupported dtype"));
    }
    ASSIGN_OR_RETURN(uint32_t rank, r.U32());
    Shape shape;
    for (uint32_t d = 0; d < rank; ++d) {
      ASSIGN_OR_RETURN(uint64_t dim, r.U64());
      shape.push_back(static_cast<int64_t>(dim));
    }
    const int64_t count = NumElements(shape);
    RETURN_IF_ERROR(r.Need(static_cast<size_t>(count) * 4));
    std::vector<double> data(count);
    for (int64_t j = 0; j < count; ++j) {
      ASSIGN_OR_RETURN(float f, r.F32());
      data[j] = f;
    }
    params.Add(name, Tensor(std::move(shape), std::move(data)));
  }
  if (!r.done()) return absl::DataLossError("trailing bytes after checkpoint");
  return MakeTinyLM(config, std::move(params), std::move(metadata));
}

absl::StatusOr<std::string> ReadFile(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return absl::NotFoundError(absl::StrCat("cannot open ", path));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

absl::Status WriteFile(const std::string& path, const std::string& contents) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(p.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) return absl::PermissionDeniedError(absl::StrCat("cannot write ", path));
  out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  if (!out) return absl::DataLossError(absl::StrCat("short write to ", path));
  return absl::OkStatus();
}

absl::Status SaveCheckpoint(const TinyLM& model, const std::string& path) {
  return WriteFile(path, SerializeCheckpoint(model));
}

absl::StatusOr<TinyLM> LoadCheckpoint(const std::string& path) {
  ASSIGN_OR_RETURN(std::string bytes, ReadFile(path));
  return ParseCheckpoint(bytes);
}

}  // namespace dpalign
