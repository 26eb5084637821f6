// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "scale/model/model.hpp"
#include "scale/numerics/optimizer.hpp"
#include "scale/train/run_config.hpp"

// Checkpoint file layout (little-endian):
//   char[8]  "SCALECKP"
//   u32      format version (1)
//   u32      reserved (0)
//   u64      FNV-1a hash of the model config JSON
//   u64      training step
//   u64      byte length L, then L bytes of model config JSON
//   u64      parameter count P, then per parameter:
//              u32 name length, name bytes, u32 rank, u64 extents[rank], f64 values
//   u8       1 if optimizer state follows, else 0
//   u64      optimizer step, then for every parameter in order: f64 m[], f64 v[]
namespace scale {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'S', 'C', 'A', 'L', 'E', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

class Writer {
 public:
  template <typename T>
  void put(const T& v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void str(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void tensor_values(const Tensor& t) { bytes(t.data(), t.size() * sizeof(real)); }
  const std::string& data() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}
  template <typename T>
  T get() {
    T v;
    need(sizeof(T));
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void values(Tensor& t) {
    need(t.size() * sizeof(real));
    std::memcpy(t.data(), data_.data() + pos_, t.size() * sizeof(real));
    pos_ += t.size() * sizeof(real);
  }
  bool at_end() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw CheckpointError("checkpoint truncated");
  }
  std::string data_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace detail

struct CheckpointHeader {
  std::uint64_t config_hash = 0;
  std::uint64_t step = 0;
  ModelConfig model;
};

struct CheckpointTensor {
  std::string name;
  Tensor value;
};

struct CheckpointData {
  CheckpointHeader header;
  std::vector<CheckpointTensor> params;
  std::optional<AdamState> optimizer;
};

inline std::string encode_checkpoint(const ScaleModel& model, std::uint64_t step, const Adam* opt = nullptr) {
  detail::Writer w;
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.put(kCheckpointVersion);
  w.put(std::uint32_t{0});
  const std::string cfg = nlohmann::json(model.config()).dump();
  w.put(fnv1a(cfg));
  w.put(static_cast<std::uint64_t>(step));
  w.put(static_cast<std::uint64_t>(cfg.size()));
  w.bytes(cfg.data(), cfg.size());
  const ParamSet& ps = model.params();
  w.put(static_cast<std::uint64_t>(ps.size()));
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const Parameter& p = ps[i];
    w.str(p.name);
    w.put(static_cast<std::uint32_t>(p.value.rank()));
    for (std::size_t e : p.value.shape()) w.put(static_cast<std::uint64_t>(e));
    w.tensor_values(p.value);
  }
  w.put(static_cast<std::uint8_t>(opt ? 1 : 0));
  if (opt) {
    const AdamState& st = opt->state();
    w.put(static_cast<std::uint64_t>(st.step));
    for (std::size_t i = 0; i < st.m.size(); ++i) {
      w.tensor_values(st.m[i]);
      w.tensor_values(st.v[i]);
    }
  }
  return w.data();
}

inline void save_checkpoint(const std::filesystem::path& path, const ScaleModel& model, std::uint64_t step,
                            const Adam* opt = nullptr) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::string bytes = encode_checkpoint(model, step, opt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("write failed for " + path.string());
}

inline CheckpointData decode_checkpoint(std::string bytes) {
  detail::Reader r(std::move(bytes));
  if (r.str(sizeof kCheckpointMagic) != std::string(kCheckpointMagic, sizeof kCheckpointMagic)) {
    throw CheckpointError("not a checkpoint (bad magic)");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  (void)r.get<std::uint32_t>();
  CheckpointData d;
  d.header.config_hash = r.get<std::uint64_t>();
  d.header.step = r.get<std::uint64_t>();
  const std::string cfg = r.str(r.get<std::uint64_t>());
  if (fnv1a(cfg) != d.header.config_hash) throw CheckpointError("checkpoint config hash mismatch");
  d.header.model = nlohmann::json::parse(cfg).get<ModelConfig>();
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointTensor t;
    t.name = r.str(r.get<std::uint32_t>());
    Shape shape(r.get<std::uint32_t>());
    for (auto& e : shape) e = r.get<std::uint64_t>();
    t.value = Tensor(shape);
    r.values(t.value);
    d.params.push_back(std::move(t));
  }
  if (r.get<std::uint8_t>()) {
    AdamState st;
    st.step = r.get<std::uint64_t>();
    for (const auto& p : d.params) {
      st.m.emplace_back(p.value.shape());
      st.v.emplace_back(p.value.shape());
      r.values(st.m.back());
      r.values(st.v.back());
    }
    d.optimizer = std::move(st);
  }
  if (!r.at_end()) throw CheckpointError("trailing bytes in checkpoint");
  return d;
}

inline CheckpointData read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file(path));
}

inline std::uint64_t file_hash(const std::filesystem::path& path) { return fnv1a(detail::read_file(path)); }

// Copies checkpoint tensors into an existing model. Architecture sizes must
// agree; a classifier head in the checkpoint is attached if the model lacks
// one. Parameters missing from the checkpoint keep their current values.
inline void load_into(const CheckpointData& d, ScaleModel& model, Adam* opt = nullptr) {
  const ModelConfig& have = model.config();
  const ModelConfig& got = d.header.model;
  auto check = [](const char* what, std::size_t ckpt, std::size_t cfg) {
    if (ckpt != cfg) {
      throw CheckpointError(std::string(what) + " mismatch: checkpoint " + std::to_string(ckpt) + ", config " +
                            std::to_string(cfg));
    }
  };
  check("hidden dim", got.hidden, have.hidden);
  check("layer count", got.layers, have.layers);
  check("ffn dim", got.ffn, have.ffn);
  check("vocab size", got.vocab_size, have.vocab_size);
  for (const auto& t : d.params) {
    if (t.name == "head.classifier.weight" && !model.has_classifier()) model.classifier(t.value.shape().back());
  }
  ParamSet& ps = model.params();
  for (const auto& t : d.params) {
    if (!ps.contains(t.name)) throw CheckpointError("checkpoint parameter " + t.name + " not in model");
    Parameter& p = ps.get(t.name);
    if (p.value.shape() != t.value.shape()) {
      throw CheckpointError("shape mismatch for " + t.name + ": checkpoint " + shape_string(t.value.shape()) +
                            ", model " + shape_string(p.value.shape()));
    }
    p.value = t.value;
  }
  if (opt && d.optimizer) {
    if (opt->params().size() != d.params.size()) throw CheckpointError("optimizer state does not match model");
    opt->state() = *d.optimizer;
  }
}

inline std::unique_ptr<ScaleModel> load_model(const std::filesystem::path& path) {
  CheckpointData d = read_checkpoint(path);
  auto model = std::make_unique<ScaleModel>(d.header.model);
  load_into(d, *model);
  return model;
}

}  // namespace scale
