#pragma once

// Single-file checkpoints: a text manifest terminated by a line `end`, then
// the raw little-endian tensor payload. The manifest records the model
// config, the vocabulary size and hash, and each tensor's name, shape,
// dtype and byte offset into the payload.

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>

#include "semtrace/neural/model.hpp"

namespace semtrace::nn {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointHeader {
  ModelConfig cfg;
  std::size_t vocab_size = 0;
  std::uint64_t vocab_hash = 0;
  std::map<std::string, std::string> meta;  // free-form provenance, e.g. stage and epoch
};

namespace detail {

template <class T>
constexpr const char* dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

template <class T>
void put_scalar(std::string& out, T v) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <class T>
T get_scalar(const char* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

}  // namespace detail

template <class T>
std::string serialize_checkpoint(const Model<T>& m, std::uint64_t vocab_hash, const std::map<std::string, std::string>& meta = {}) {
  std::ostringstream head;
  head << "semtrace-checkpoint 1\n";
  for (const auto& [k, v] : m.cfg.to_kv()) head << "config " << k << " " << v << "\n";
  for (const auto& [k, v] : meta) head << "meta " << k << " " << v << "\n";
  head << "vocab_size " << m.vocab_size << "\n";
  head << "vocab_hash " << detail::hex64(vocab_hash) << "\n";
  std::string payload;
  m.for_each_tensor([&](const Tensor<T>& t) {
    head << "tensor " << t.name << " " << t.value.rows() << " " << t.value.cols() << " " << detail::dtype_name<T>() << " "
         << payload.size() << "\n";
    for (Eigen::Index i = 0; i < t.value.size(); ++i) detail::put_scalar(payload, t.value.data()[i]);
  });
  head << "end\n";
  return head.str() + payload;
}

template <class T>
void save_checkpoint(const std::string& path, const Model<T>& m, std::uint64_t vocab_hash,
                     const std::map<std::string, std::string>& meta = {}) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot write checkpoint " + path);
  const auto bytes = serialize_checkpoint(m, vocab_hash, meta);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

/// Parses a checkpoint into a model of scalar type T, converting stored
/// values when the file's dtype differs.
template <class T>
std::pair<Model<T>, CheckpointHeader> parse_checkpoint(const std::string& bytes) {
  const auto end_pos = bytes.find("\nend\n");
  if (bytes.rfind("semtrace-checkpoint 1\n", 0) != 0 || end_pos == std::string::npos) throw CheckpointError("not a checkpoint");
  const std::size_t payload_start = end_pos + 5;
  std::istringstream head(bytes.substr(0, end_pos + 1));
  std::string line;
  std::getline(head, line);
  CheckpointHeader h;
  std::map<std::string, std::string> cfg_kv;
  struct Entry {
    Eigen::Index rows, cols;
    std::string dtype;
    std::size_t offset;
  };
  std::map<std::string, Entry> entries;
  while (std::getline(head, line)) {
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "config") {
      std::string k, v;
      ls >> k >> v;
      cfg_kv[k] = v;
    } else if (kind == "meta") {
      std::string k, v;
      ls >> k;
      std::getline(ls >> std::ws, v);
      h.meta[k] = v;
    } else if (kind == "vocab_size") {
      ls >> h.vocab_size;
    } else if (kind == "vocab_hash") {
      std::string hx;
      ls >> hx;
      h.vocab_hash = std::stoull(hx, nullptr, 16);
    } else if (kind == "tensor") {
      std::string name;
      Entry e{};
      ls >> name >> e.rows >> e.cols >> e.dtype >> e.offset;
      if (!ls) throw CheckpointError("bad tensor line: " + line);
      entries[name] = e;
    } else if (!kind.empty()) {
      throw CheckpointError("unknown manifest line: " + line);
    }
  }
  h.cfg.apply_kv(cfg_kv);
  Model<T> m = init_model<T>(h.cfg, h.vocab_size, 0);
  m.for_each_tensor([&](Tensor<T>& t) {
    auto it = entries.find(t.name);
    if (it == entries.end()) throw CheckpointError("checkpoint lacks tensor " + t.name);
    const Entry& e = it->second;
    if (e.rows != t.value.rows() || e.cols != t.value.cols()) throw CheckpointError("shape mismatch for " + t.name);
    const std::size_t width = e.dtype == "f32" ? 4 : e.dtype == "f64" ? 8 : 0;
    if (!width) throw CheckpointError("unknown dtype " + e.dtype);
    const std::size_t start = payload_start + e.offset;
    if (start + width * static_cast<std::size_t>(t.value.size()) > bytes.size()) throw CheckpointError("truncated payload for " + t.name);
    for (Eigen::Index i = 0; i < t.value.size(); ++i) {
      const char* p = bytes.data() + start + width * static_cast<std::size_t>(i);
      t.value.data()[i] = width == 4 ? static_cast<T>(detail::get_scalar<float>(p)) : static_cast<T>(detail::get_scalar<double>(p));
    }
  });
  return {std::move(m), std::move(h)};
}

template <class T>
std::pair<Model<T>, CheckpointHeader> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_checkpoint<T>(ss.str());
}

/// Loads and checks that the checkpoint was trained against `vocab`.
template <class T>
Model<T> load_checkpoint_for(const std::string& path, const Vocab& vocab) {
  auto [m, h] = load_checkpoint<T>(path);
  if (h.vocab_hash != vocab.hash() || h.vocab_size != vocab.size())
    throw CheckpointError("checkpoint " + path + " was trained with a different vocabulary (hash " + detail::hex64(h.vocab_hash) +
                          ", expected " + detail::hex64(vocab.hash()) + ")");
  return std::move(m);
}

}  // namespace semtrace::nn
