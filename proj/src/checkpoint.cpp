/* Copyright 2026 The sdtlab Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License. */

#include "sdtlab/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

namespace sdtlab {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr std::array<char, 8> kMagic = {'S', 'D', 'T', 'C', 'K', 'P', 'T', '\0'};

template <typename T>
void put_le(std::string& out, T v) {
  auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(v);
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.append(bytes.data(), bytes.size());
}

template <typename T>
T get_le(const char* p) {
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  return std::bit_cast<T>(bytes);
}

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

Dtype parse_dtype(const std::string& s) {
  if (s == "float32") return Dtype::kFloat32;
  if (s == "float64") return Dtype::kFloat64;
  throw IoError("unsupported tensor dtype '" + s + "'");
}

}  // namespace

const char* dtype_name(Dtype d) { return d == Dtype::kFloat32 ? "float32" : "float64"; }

json backbone_config_to_json(const BackboneConfig& config) {
  return {{"in_channels", config.in_channels},
          {"num_classes", config.num_classes},
          {"widths", config.widths},
          {"norm_groups", config.norm_groups}};
}

BackboneConfig backbone_config_from_json(const json& j) {
  BackboneConfig c;
  c.in_channels = j.at("in_channels").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  c.widths = j.at("widths").get<std::vector<int>>();
  c.norm_groups = j.at("norm_groups").get<int>();
  c.validate();
  return c;
}

const NetworkWeights& Checkpoint::section(const std::string& name) const {
  for (const auto& s : sections) {
    if (s.name == name) return s.weights;
  }
  throw IoError("checkpoint has no section '" + name + "'");
}

bool Checkpoint::has_section(const std::string& name) const {
  for (const auto& s : sections) {
    if (s.name == name) return true;
  }
  return false;
}

void save_checkpoint(const fs::path& path,
                     const std::vector<std::pair<std::string, const NetworkWeights*>>& sections,
                     const json& metadata, Dtype dtype) {
  if (sections.empty()) throw InputError("save_checkpoint: no sections");
  const NetworkWeights& first = *sections.front().second;
  for (const auto& [name, w] : sections) {
    if (name.empty() || name.find('/') != std::string::npos) {
      throw InputError("save_checkpoint: invalid section name '" + name + "'");
    }
    if (w->fingerprint() != first.fingerprint()) {
      throw InputError("save_checkpoint: section '" + name + "' has a different architecture");
    }
  }

  std::string payload;
  json tensors = json::array();
  const size_t elem = dtype == Dtype::kFloat32 ? 4 : 8;
  for (const auto& [name, w] : sections) {
    for (const auto& p : w->params()) {
      const size_t offset = payload.size();
      for (double v : p.values) {
        if (dtype == Dtype::kFloat32) {
          put_le(payload, static_cast<float>(v));
        } else {
          put_le(payload, v);
        }
      }
      tensors.push_back({{"name", name + "/" + p.name},
                         {"shape", p.shape},
                         {"dtype", dtype_name(dtype)},
                         {"offset", offset},
                         {"nbytes", p.values.size() * elem}});
    }
  }
  json header = {{"format_version", kCheckpointFormatVersion},
                 {"fingerprint", hex64(first.fingerprint())},
                 {"config", backbone_config_to_json(first.config())},
                 {"tensors", std::move(tensors)},
                 {"metadata", metadata}};
  const std::string text = header.dump();

  std::string head(kMagic.begin(), kMagic.end());
  put_le(head, static_cast<uint64_t>(text.size()));
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + tmp.string() + " for writing");
    f.write(head.data(), static_cast<std::streamsize>(head.size()));
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    f.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!f) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place: " + ec.message());
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("missing checkpoint: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic.data(), kMagic.size()) != 0) {
    throw IoError("not a checkpoint file: " + path.string());
  }
  const auto header_len = get_le<uint64_t>(bytes.data() + 8);
  if (16 + header_len > bytes.size()) throw IoError("truncated checkpoint header: " + path.string());
  json header;
  try {
    header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<int64_t>(header_len));
  } catch (const json::exception& e) {
    throw IoError("malformed checkpoint header: " + std::string(e.what()));
  }
  const char* payload = bytes.data() + 16 + header_len;
  const size_t payload_size = bytes.size() - 16 - header_len;

  Checkpoint ckpt;
  try {
    if (header.at("format_version").get<int>() != kCheckpointFormatVersion) {
      throw IoError("unknown checkpoint format version");
    }
    const BackboneConfig config = backbone_config_from_json(header.at("config"));
    ckpt.metadata = header.value("metadata", json::object());

    std::vector<std::pair<std::string, std::vector<ParamTensor>>> grouped;
    for (const auto& t : header.at("tensors")) {
      const std::string full = t.at("name").get<std::string>();
      const auto slash = full.find('/');
      if (slash == std::string::npos) throw IoError("tensor name without section: " + full);
      const std::string section = full.substr(0, slash);
      ParamTensor p;
      p.name = full.substr(slash + 1);
      p.shape = t.at("shape").get<Shape>();
      const Dtype dt = parse_dtype(t.at("dtype").get<std::string>());
      const size_t offset = t.at("offset").get<size_t>();
      const size_t nbytes = t.at("nbytes").get<size_t>();
      const size_t count = static_cast<size_t>(num_elements(p.shape));
      const size_t elem = dt == Dtype::kFloat32 ? 4 : 8;
      if (nbytes != count * elem || offset + nbytes > payload_size) {
        throw IoError("tensor " + full + " does not fit its declared shape or the payload");
      }
      p.values.resize(count);
      for (size_t i = 0; i < count; ++i) {
        const char* src = payload + offset + i * elem;
        p.values[i] = dt == Dtype::kFloat32 ? static_cast<double>(get_le<float>(src))
                                            : get_le<double>(src);
      }
      if (grouped.empty() || grouped.back().first != section) grouped.emplace_back(section, std::vector<ParamTensor>{});
      grouped.back().second.push_back(std::move(p));
    }
    const std::string want = header.at("fingerprint").get<std::string>();
    for (auto& [name, params] : grouped) {
      NetworkWeights w(config, std::move(params));
      if (hex64(w.fingerprint()) != want) {
        throw IoError("checkpoint section '" + name + "' does not match the recorded fingerprint");
      }
      ckpt.sections.push_back({name, std::move(w)});
    }
  } catch (const json::exception& e) {
    throw IoError("malformed checkpoint header: " + std::string(e.what()));
  } catch (const ConfigError& e) {
    throw IoError("checkpoint config invalid: " + std::string(e.what()));
  }
  return ckpt;
}

void save_weights(const fs::path& path, const NetworkWeights& weights, Dtype dtype) {
  save_checkpoint(path, {{"model", &weights}}, json::object(), dtype);
}

NetworkWeights load_weights(const fs::path& path, const std::string& section) {
  Checkpoint c = load_checkpoint(path);
  if (c.sections.empty()) throw IoError("checkpoint has no tensors: " + path.string());
  if (section.empty()) return std::move(c.sections.front().weights);
  return c.section(section);
}

}  // namespace sdtlab
