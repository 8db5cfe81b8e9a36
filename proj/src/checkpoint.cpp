#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "tlab/trainer.hpp"

// Binary little-endian checkpoint, layout documented in docs/checkpoint.md.
// Integers and doubles are written byte-by-byte so the format does not depend
// on host endianness.

namespace tlab {

namespace {

constexpr char kMagic[8] = {'T', 'L', 'A', 'B', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

void put_u8(std::ostream& out, std::uint8_t v) {
  out.write(reinterpret_cast<const char*>(&v), 1);
}

void put_f64(std::ostream& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

void put_f64_array(std::ostream& out, const double* v, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) put_f64(out, v[i]);
}

void put_string(std::ostream& out, const std::string& s) {
  put_u64(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

[[noreturn]] void fail_truncated(const std::string& path) {
  throw std::runtime_error("checkpoint load: truncated file " + path);
}

struct Reader {
  std::ifstream in;
  std::string path;

  void read_bytes(void* dst, std::size_t n) {
    in.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n) fail_truncated(path);
  }
  std::uint32_t u32() {
    unsigned char b[4];
    read_bytes(b, 4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }
  std::uint64_t u64() {
    unsigned char b[8];
    read_bytes(b, 8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }
  std::uint8_t u8() {
    std::uint8_t v;
    read_bytes(&v, 1);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint64_t n = u64();
    if (n > (1u << 20)) throw std::runtime_error("checkpoint load: corrupt string length in " + path);
    std::string s(n, '\0');
    read_bytes(s.data(), n);
    return s;
  }
  void f64_array(double* dst, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) dst[i] = f64();
  }
};

void put_config(std::ostream& out, const ModelConfig& c) {
  put_u64(out, c.n_layers);
  put_u64(out, c.n_heads);
  put_u64(out, c.d_model);
  put_u64(out, c.d_mlp);
  put_u64(out, c.vocab_size);
  put_u64(out, c.context_len);
  put_u8(out, c.use_positional_encoding ? 1 : 0);
  put_u8(out, c.causal_attention ? 1 : 0);
  put_u8(out, c.tie_lm_head ? 1 : 0);
  put_u8(out, c.gelu_exact ? 1 : 0);
  put_f64(out, c.residual_scale);
  put_f64(out, c.layer_norm_eps);
  put_u64(out, c.ablated_layers.size());
  for (std::size_t layer : c.ablated_layers) put_u64(out, layer);
}

ModelConfig read_config(Reader& r) {
  ModelConfig c;
  c.n_layers = r.u64();
  c.n_heads = r.u64();
  c.d_model = r.u64();
  c.d_mlp = r.u64();
  c.vocab_size = r.u64();
  c.context_len = r.u64();
  c.use_positional_encoding = r.u8() != 0;
  c.causal_attention = r.u8() != 0;
  c.tie_lm_head = r.u8() != 0;
  c.gelu_exact = r.u8() != 0;
  c.residual_scale = r.f64();
  c.layer_norm_eps = r.f64();
  const std::uint64_t n_ablated = r.u64();
  for (std::uint64_t i = 0; i < n_ablated; ++i) c.ablated_layers.insert(r.u64());
  return c;
}

}  // namespace

void save_checkpoint(const std::string& path, const TransformerModel& model,
                     const TrainerState& state) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out.write(kMagic, sizeof(kMagic));
  put_u32(out, kVersion);
  put_config(out, model.config);

  const auto params = model.named_parameters();
  put_u64(out, params.size());
  for (const auto& [name, tensor] : params) {
    put_string(out, name);
    put_u8(out, 0);  // dtype tag: float64
    put_u64(out, tensor.ndim());
    for (std::size_t d : tensor.shape()) put_u64(out, d);
    put_f64_array(out, tensor.data(), tensor.size());
  }

  const bool has_opt = !state.opt.m.empty();
  put_u8(out, has_opt ? 1 : 0);
  if (has_opt) {
    if (state.opt.m.size() != params.size())
      throw std::runtime_error("save_checkpoint: optimizer state does not match parameters");
    put_u64(out, state.opt.step);
    for (std::size_t i = 0; i < params.size(); ++i) {
      put_f64_array(out, state.opt.m[i].data(), state.opt.m[i].size());
      put_f64_array(out, state.opt.v[i].data(), state.opt.v[i].size());
    }
  }
  put_u64(out, state.iteration);
  put_u64(out, state.rng_state);
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  Reader r;
  r.path = path;
  r.in.open(path, std::ios::binary);
  if (!r.in) throw std::runtime_error("checkpoint load: cannot open " + path);

  char magic[8];
  r.read_bytes(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("checkpoint load: magic mismatch in " + path);
  const std::uint32_t version = r.u32();
  if (version != kVersion)
    throw std::runtime_error("checkpoint load: version mismatch (file has " +
                             std::to_string(version) + ", expected " + std::to_string(kVersion) +
                             ") in " + path);

  LoadedCheckpoint loaded;
  const ModelConfig config = read_config(r);
  // Rebuild the parameter skeleton, then overwrite values from the file.
  loaded.model = init_params(config, 0);
  auto params = loaded.model.named_parameters();

  const std::uint64_t n_params = r.u64();
  if (n_params != params.size())
    throw std::runtime_error("checkpoint load: file holds " + std::to_string(n_params) +
                             " parameters, config implies " + std::to_string(params.size()) +
                             " in " + path);
  for (auto& [name, tensor] : params) {
    const std::string file_name = r.str();
    if (file_name != name)
      throw std::runtime_error("checkpoint load: parameter order mismatch (" + file_name +
                               " vs " + name + ") in " + path);
    if (r.u8() != 0) throw std::runtime_error("checkpoint load: unknown dtype tag in " + path);
    const std::uint64_t ndim = r.u64();
    if (ndim != tensor.ndim())
      throw std::runtime_error("checkpoint load: rank mismatch for " + name + " in " + path);
    for (std::size_t d = 0; d < ndim; ++d)
      if (r.u64() != tensor.shape()[d])
        throw std::runtime_error("checkpoint load: shape mismatch for " + name + " in " + path);
    Tensor t = tensor;
    r.f64_array(t.data(), t.size());
  }

  if (r.u8() != 0) {
    loaded.state.opt.step = r.u64();
    loaded.state.opt.m.resize(params.size());
    loaded.state.opt.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      loaded.state.opt.m[i].resize(params[i].second.size());
      loaded.state.opt.v[i].resize(params[i].second.size());
      r.f64_array(loaded.state.opt.m[i].data(), loaded.state.opt.m[i].size());
      r.f64_array(loaded.state.opt.v[i].data(), loaded.state.opt.v[i].size());
    }
  }
  loaded.state.iteration = r.u64();
  loaded.state.rng_state = r.u64();
  return loaded;
}

}  // namespace tlab
