#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "peftdebias/forward.hpp"
#include "peftdebias/model.hpp"
#include "peftdebias/peft.hpp"
#include "peftdebias/rng.hpp"

namespace peftdebias {

// Versioned binary checkpoints. Round-trips are bit-exact: tensor payloads
// are raw IEEE-754 doubles in for_each_tensor order.

namespace io {

inline void write_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline void write_i64(std::ostream& out, std::int64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline void write_f64(std::ostream& out, double v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline void write_string(std::ostream& out, const std::string& s) {
  write_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::uint32_t read_u32(std::istream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}
inline std::int64_t read_i64(std::istream& in) {
  std::int64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}
inline double read_f64(std::istream& in) {
  double v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}
inline std::string read_string(std::istream& in) {
  const std::uint32_t n = read_u32(in);
  std::string s(n, '\0');
  in.read(s.data(), n);
  return s;
}

inline void write_matrix(std::ostream& out, const Matrix& m) {
  write_u32(out, static_cast<std::uint32_t>(m.rows));
  write_u32(out, static_cast<std::uint32_t>(m.cols));
  out.write(reinterpret_cast<const char*>(m.data.data()),
            static_cast<std::streamsize>(m.data.size() * sizeof(double)));
}

inline Matrix read_matrix(std::istream& in) {
  const int rows = static_cast<int>(read_u32(in));
  const int cols = static_cast<int>(read_u32(in));
  Matrix m(rows, cols);
  in.read(reinterpret_cast<char*>(m.data.data()),
          static_cast<std::streamsize>(m.data.size() * sizeof(double)));
  return m;
}

inline void write_config(std::ostream& out, const ModelConfig& c) {
  for (int v : {c.num_layers, c.hidden, c.heads, c.ffn, c.vocab_size, c.max_seq, c.num_classes})
    write_u32(out, static_cast<std::uint32_t>(v));
}

inline ModelConfig read_config(std::istream& in) {
  ModelConfig c;
  c.num_layers = static_cast<int>(read_u32(in));
  c.hidden = static_cast<int>(read_u32(in));
  c.heads = static_cast<int>(read_u32(in));
  c.ffn = static_cast<int>(read_u32(in));
  c.vocab_size = static_cast<int>(read_u32(in));
  c.max_seq = static_cast<int>(read_u32(in));
  c.num_classes = static_cast<int>(read_u32(in));
  return c;
}

}  // namespace io

constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_model_checkpoint(const std::string& path, const TransformerParams& params,
                                  const Rng& rng) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  out.write("PFDM", 4);
  io::write_u32(out, kCheckpointVersion);
  io::write_config(out, params.config);
  io::write_string(out, rng.save_state());
  for_each_tensor(const_cast<TransformerParams&>(params),
                  [&](const std::string&, Matrix& m) { io::write_matrix(out, m); });
  if (!out) throw std::runtime_error("write failed: " + path);
}

inline TransformerParams load_model_checkpoint(const std::string& path, Rng* rng = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint: " + path);
  char magic[4];
  in.read(magic, 4);
  if (std::memcmp(magic, "PFDM", 4) != 0)
    throw std::runtime_error("not a model checkpoint: " + path);
  if (io::read_u32(in) != kCheckpointVersion)
    throw std::runtime_error("unsupported checkpoint version: " + path);
  const ModelConfig config = io::read_config(in);
  const std::string rng_state = io::read_string(in);
  if (rng != nullptr) rng->load_state(rng_state);
  Rng dummy(0);
  TransformerParams params = init_params(config, dummy);
  for_each_tensor(params, [&](const std::string& name, Matrix& m) {
    Matrix loaded = io::read_matrix(in);
    if (!loaded.same_shape(m))
      throw std::runtime_error("checkpoint tensor shape mismatch at " + name + ": " + path);
    m = std::move(loaded);
  });
  if (!in) throw std::runtime_error("truncated checkpoint: " + path);
  return params;
}

inline void save_peft_checkpoint(const std::string& path, const PeftParams& peft,
                                 const ModelConfig& config) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  out.write("PFDP", 4);
  io::write_u32(out, kCheckpointVersion);
  io::write_u32(out, static_cast<std::uint32_t>(peft.kind()));
  io::write_string(out, peft.axis_name);
  io::write_config(out, config);
  switch (peft.kind()) {
    case PeftKind::adapter:
      io::write_u32(out, static_cast<std::uint32_t>(peft.adapter().bottleneck));
      break;
    case PeftKind::prompt:
      io::write_u32(out, static_cast<std::uint32_t>(peft.prompt().length()));
      break;
    case PeftKind::lora:
      io::write_u32(out, static_cast<std::uint32_t>(peft.lora().rank));
      io::write_f64(out, peft.lora().alpha);
      break;
    case PeftKind::sft: {
      const auto& sft = peft.sft();
      io::write_i64(out, static_cast<std::int64_t>(sft.mask.size()));
      for (std::int64_t c : sft.mask) io::write_i64(out, c);
      for (double dv : sft.delta) io::write_f64(out, dv);
      break;
    }
    case PeftKind::none:
      break;
  }
  for_each_peft_tensor(const_cast<PeftParams&>(peft),
                       [&](const std::string&, Matrix& m) { io::write_matrix(out, m); });
  if (!out) throw std::runtime_error("write failed: " + path);
}

inline PeftParams load_peft_checkpoint(const std::string& path, ModelConfig* config_out = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint: " + path);
  char magic[4];
  in.read(magic, 4);
  if (std::memcmp(magic, "PFDP", 4) != 0)
    throw std::runtime_error("not a PEFT checkpoint: " + path);
  if (io::read_u32(in) != kCheckpointVersion)
    throw std::runtime_error("unsupported checkpoint version: " + path);
  const PeftKind kind = static_cast<PeftKind>(io::read_u32(in));
  PeftParams peft;
  peft.axis_name = io::read_string(in);
  const ModelConfig config = io::read_config(in);
  if (config_out != nullptr) *config_out = config;
  switch (kind) {
    case PeftKind::adapter: {
      AdapterParams a;
      a.bottleneck = static_cast<int>(io::read_u32(in));
      a.layers.resize(static_cast<std::size_t>(config.num_layers));
      peft.params = std::move(a);
      break;
    }
    case PeftKind::prompt: {
      io::read_u32(in);  // prompt length is implied by the tensor shape
      peft.params = PromptParams{};
      break;
    }
    case PeftKind::lora: {
      LoraParams lo;
      lo.rank = static_cast<int>(io::read_u32(in));
      lo.alpha = io::read_f64(in);
      lo.layers.resize(static_cast<std::size_t>(config.num_layers));
      peft.params = std::move(lo);
      break;
    }
    case PeftKind::sft: {
      SftParams sft;
      const std::int64_t n = io::read_i64(in);
      sft.mask.resize(static_cast<std::size_t>(n));
      for (auto& c : sft.mask) c = io::read_i64(in);
      sft.delta.resize(static_cast<std::size_t>(n));
      for (auto& dv : sft.delta) dv = io::read_f64(in);
      peft.params = std::move(sft);
      break;
    }
    case PeftKind::none:
      break;
  }
  for_each_peft_tensor(peft, [&](const std::string&, Matrix& m) { m = io::read_matrix(in); });
  if (!in) throw std::runtime_error("truncated checkpoint: " + path);
  return peft;
}

// FNV-1a over raw tensor bytes; bit-exact equality proxy for the freeze
// contracts.
inline std::uint64_t checksum_bytes(std::uint64_t h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t checksum(const TransformerParams& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for_each_tensor(const_cast<TransformerParams&>(params), [&](const std::string&, Matrix& m) {
    h = checksum_bytes(h, m.data.data(), m.data.size() * sizeof(double));
  });
  return h;
}

inline std::uint64_t checksum(const PeftParams& peft) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for_each_peft_tensor(const_cast<PeftParams&>(peft), [&](const std::string&, Matrix& m) {
    h = checksum_bytes(h, m.data.data(), m.data.size() * sizeof(double));
  });
  if (peft.kind() == PeftKind::sft) {
    const auto& sft = peft.sft();
    h = checksum_bytes(h, sft.mask.data(), sft.mask.size() * sizeof(std::int64_t));
    h = checksum_bytes(h, sft.delta.data(), sft.delta.size() * sizeof(double));
  }
  return h;
}

}  // namespace peftdebias
