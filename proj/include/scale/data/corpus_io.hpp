// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "scale/data/corpus.hpp"
#include "scale/data/stats.hpp"

// On-disk corpus layout (one directory):
//   manifest.json  {"format": "scale-corpus", "version": 1, "config": {...},
//                   "payload_file": "payloads.bin", "samples": [...]}
//   payloads.bin   8-byte magic "SCALEPAY", u32 version, u32 reserved,
//                  u64 value count, then IEEE-754 binary64 little-endian values
//   stats.json     corpus_stats report
// Each sample record carries id, category, instance, presence[5], text token
// ids, table [[property, [value ids]], ...] and for image/video/audio an
// {"offset", "rows", "dim"} index into payloads.bin (offset in values).
namespace scale {

inline constexpr char kPayloadMagic[8] = {'S', 'C', 'A', 'L', 'E', 'P', 'A', 'Y'};
inline constexpr std::uint32_t kCorpusFormatVersion = 1;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace io_detail {

template <typename T>
void put_le(std::ostream& os, T v) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  U bits = std::bit_cast<U>(v);
  unsigned char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <typename T>
T get_le(std::istream& is) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  unsigned char buf[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(U))) throw FormatError("truncated binary file");
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) bits |= static_cast<U>(buf[i]) << (8 * i);
  return std::bit_cast<T>(bits);
}

}  // namespace io_detail

inline void save_corpus(const std::filesystem::path& dir, const CorpusConfig& config,
                        const std::vector<ProductSample>& corpus) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::vector<real> payload;
  nlohmann::json samples = nlohmann::json::array();
  for (const ProductSample& s : corpus) {
    nlohmann::json j;
    j["id"] = s.id;
    j["category"] = s.category;
    j["instance"] = s.instance;
    j["presence"] = s.presence;
    j["text"] = s.text;
    nlohmann::json table = nlohmann::json::array();
    for (const auto& e : s.table) table.push_back({e.property, e.value});
    j["table"] = table;
    for (ModalityKind k : {ModalityKind::Image, ModalityKind::Video, ModalityKind::Audio}) {
      const FeatureSeq& f = s.features(k);
      j[std::string(modality_name(k))] = {{"offset", payload.size()}, {"rows", f.rows}, {"dim", f.dim}};
      payload.insert(payload.end(), f.values.begin(), f.values.end());
    }
    samples.push_back(std::move(j));
  }

  nlohmann::json manifest;
  manifest["format"] = "scale-corpus";
  manifest["version"] = kCorpusFormatVersion;
  manifest["config"] = config;
  manifest["payload_file"] = "payloads.bin";
  manifest["samples"] = std::move(samples);
  {
    std::ofstream os(dir / "manifest.json");
    if (!os) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
    os << manifest.dump() << "\n";
  }
  {
    std::ofstream os(dir / "payloads.bin", std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + (dir / "payloads.bin").string());
    os.write(kPayloadMagic, sizeof(kPayloadMagic));
    io_detail::put_le<std::uint32_t>(os, kCorpusFormatVersion);
    io_detail::put_le<std::uint32_t>(os, 0);
    io_detail::put_le<std::uint64_t>(os, payload.size());
    for (real v : payload) io_detail::put_le<double>(os, v);
  }
  {
    std::ofstream os(dir / "stats.json");
    os << to_json(corpus_stats(corpus)).dump(2) << "\n";
  }
}

struct LoadedCorpus {
  CorpusConfig config;
  std::vector<ProductSample> samples;
};

inline LoadedCorpus load_corpus(const std::filesystem::path& dir) {
  std::ifstream ms(dir / "manifest.json");
  if (!ms) throw std::runtime_error("corpus manifest not found in " + dir.string());
  nlohmann::json manifest = nlohmann::json::parse(ms);
  if (manifest.value("format", "") != "scale-corpus") throw FormatError("not a corpus manifest");
  if (manifest.value("version", 0u) != kCorpusFormatVersion) throw FormatError("unsupported corpus version");

  std::ifstream ps(dir / manifest.value("payload_file", "payloads.bin"), std::ios::binary);
  if (!ps) throw std::runtime_error("payload file missing in " + dir.string());
  char magic[8];
  if (!ps.read(magic, 8) || std::memcmp(magic, kPayloadMagic, 8) != 0) throw FormatError("bad payload magic");
  if (io_detail::get_le<std::uint32_t>(ps) != kCorpusFormatVersion) throw FormatError("unsupported payload version");
  io_detail::get_le<std::uint32_t>(ps);
  const std::uint64_t count = io_detail::get_le<std::uint64_t>(ps);
  std::vector<real> payload(count);
  for (auto& v : payload) v = io_detail::get_le<double>(ps);

  LoadedCorpus out;
  out.config = manifest.at("config").get<CorpusConfig>();
  for (const auto& j : manifest.at("samples")) {
    ProductSample s;
    s.id = j.at("id");
    s.category = j.at("category");
    s.instance = j.at("instance");
    s.presence = j.at("presence").get<std::array<bool, kNumModalities>>();
    s.text = j.at("text").get<std::vector<std::int64_t>>();
    for (const auto& e : j.at("table")) {
      s.table.push_back(TableEntity{e.at(0).get<std::int64_t>(), e.at(1).get<std::vector<std::int64_t>>()});
    }
    for (ModalityKind k : {ModalityKind::Image, ModalityKind::Video, ModalityKind::Audio}) {
      const auto& idx = j.at(std::string(modality_name(k)));
      FeatureSeq& f = s.features(k);
      f.rows = idx.at("rows");
      f.dim = idx.at("dim");
      const std::size_t off = idx.at("offset");
      if (off + f.rows * f.dim > payload.size()) throw FormatError("payload index out of range");
      f.values.assign(payload.begin() + static_cast<std::ptrdiff_t>(off),
                      payload.begin() + static_cast<std::ptrdiff_t>(off + f.rows * f.dim));
    }
    if (s.id != out.samples.size()) throw FormatError("sample ids must be dense and ordered");
    out.samples.push_back(std::move(s));
  }
  return out;
}

}  // namespace scale
