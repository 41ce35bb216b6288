#include "natstream/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace natstream {

namespace {

constexpr char kMagic[8] = {'N', 'S', 'T', 'B', '0', '0', '0', '1'};
constexpr const char* kModelKind = "chunked_ctc";

void write_u64(std::ostream& out, uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

uint64_t read_u64(std::istream& in, const std::string& path) {
  uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in) throw std::runtime_error("truncated bundle: " + path);
  return v;
}

void write_string(std::ostream& out, const std::string& s) {
  write_u64(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& in, const std::string& path) {
  uint64_t len = read_u64(in, path);
  std::string s(len, '\0');
  in.read(s.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error("truncated bundle: " + path);
  return s;
}

}  // namespace

void save_bundle(const std::string& path, const TensorBundle& bundle) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write bundle: " + path);
  out.write(kMagic, sizeof(kMagic));
  write_string(out, config_to_text(bundle.header));
  write_u64(out, bundle.tensors.size());
  for (const auto& [name, tensor] : bundle.tensors) {
    if (!tensor.defined()) throw std::runtime_error("bundle tensor '" + name + "' is undefined");
    write_string(out, name);
    write_u64(out, tensor.shape.size());
    for (int dim : tensor.shape) write_u64(out, static_cast<uint64_t>(dim));
    out.write(reinterpret_cast<const char*>(tensor.data->data()),
              static_cast<std::streamsize>(tensor.numel() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("failed writing bundle: " + path);
}

TensorBundle load_bundle(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open bundle: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("not a tensor bundle (bad magic): " + path);
  }
  TensorBundle bundle;
  bundle.header = parse_config_text(read_string(in, path));
  uint64_t count = read_u64(in, path);
  for (uint64_t i = 0; i < count; ++i) {
    std::string name = read_string(in, path);
    uint64_t ndim = read_u64(in, path);
    Shape shape;
    for (uint64_t d = 0; d < ndim; ++d) shape.push_back(static_cast<int>(read_u64(in, path)));
    Tensor t = Tensor::zeros(shape);
    in.read(reinterpret_cast<char*>(t.data->data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!in) throw std::runtime_error("truncated bundle: " + path);
    bundle.tensors.emplace_back(std::move(name), std::move(t));
  }
  return bundle;
}

void model_config_to_map(const ModelConfig& cfg, ConfigMap& out, const std::string& prefix) {
  out.set_int(prefix + "frame_ms", cfg.frame_ms);
  out.set_int(prefix + "chunk_ms", cfg.chunk_ms);
  out.set_int(prefix + "lookahead_ms", cfg.lookahead_ms);
  out.set_int(prefix + "lookahead_chunks", cfg.lookahead_chunks);
  out.set_int(prefix + "r_down", cfg.r_down);
  out.set_int(prefix + "r_up", cfg.r_up);
  out.set_int(prefix + "feat_dim", cfg.feat_dim);
  out.set_int(prefix + "model_dim", cfg.model_dim);
  out.set_int(prefix + "heads", cfg.heads);
  out.set_int(prefix + "enc_layers", cfg.enc_layers);
  out.set_int(prefix + "ling_layers", cfg.ling_layers);
  out.set_int(prefix + "ac_layers", cfg.ac_layers);
  out.set_int(prefix + "ffn_mult", cfg.ffn_mult);
  out.set_int(prefix + "text_vocab", cfg.text_vocab);
  out.set_int(prefix + "unit_vocab", cfg.unit_vocab);
  out.set_int(prefix + "max_positions", cfg.max_positions);
  out.set_double(prefix + "dropout", cfg.dropout);
}

ModelConfig model_config_from_map(const ConfigMap& map, const std::string& prefix) {
  ModelConfig cfg;
  cfg.frame_ms = static_cast<int>(map.get_int(prefix + "frame_ms"));
  cfg.chunk_ms = static_cast<int>(map.get_int(prefix + "chunk_ms"));
  cfg.lookahead_ms = static_cast<int>(map.get_int(prefix + "lookahead_ms"));
  cfg.lookahead_chunks = static_cast<int>(map.get_int(prefix + "lookahead_chunks"));
  cfg.r_down = static_cast<int>(map.get_int(prefix + "r_down"));
  cfg.r_up = static_cast<int>(map.get_int(prefix + "r_up"));
  cfg.feat_dim = static_cast<int>(map.get_int(prefix + "feat_dim"));
  cfg.model_dim = static_cast<int>(map.get_int(prefix + "model_dim"));
  cfg.heads = static_cast<int>(map.get_int(prefix + "heads"));
  cfg.enc_layers = static_cast<int>(map.get_int(prefix + "enc_layers"));
  cfg.ling_layers = static_cast<int>(map.get_int(prefix + "ling_layers"));
  cfg.ac_layers = static_cast<int>(map.get_int(prefix + "ac_layers"));
  cfg.ffn_mult = static_cast<int>(map.get_int(prefix + "ffn_mult"));
  cfg.text_vocab = static_cast<int>(map.get_int(prefix + "text_vocab"));
  cfg.unit_vocab = static_cast<int>(map.get_int(prefix + "unit_vocab"));
  cfg.max_positions = static_cast<int>(map.get_int(prefix + "max_positions"));
  cfg.dropout = map.get_double(prefix + "dropout");
  cfg.validate();
  return cfg;
}

void save_model(const std::string& path, ModelParams& params) {
  TensorBundle bundle;
  bundle.header.set("kind", kModelKind);
  model_config_to_map(params.cfg, bundle.header);
  for (const NamedTensor& entry : params.named_params()) {
    bundle.tensors.emplace_back(entry.name, *entry.tensor);
  }
  save_bundle(path, bundle);
}

void fill_params_from_bundle(const TensorBundle& bundle, const std::string& path,
                             const std::vector<NamedTensor>& params) {
  size_t next = 0;
  for (const NamedTensor& entry : params) {
    if (next >= bundle.tensors.size()) {
      throw std::runtime_error("checkpoint " + path + " is missing tensor '" + entry.name + "'");
    }
    const auto& [name, stored] = bundle.tensors[next++];
    if (name != entry.name) {
      throw std::runtime_error("checkpoint " + path + " has tensor '" + name + "' where '" +
                               entry.name + "' was expected");
    }
    if (stored.shape != entry.tensor->shape) {
      throw std::runtime_error("checkpoint tensor '" + name + "' has shape " +
                               shape_str(stored.shape) + ", expected " +
                               shape_str(entry.tensor->shape));
    }
    *entry.tensor->data = *stored.data;
  }
  if (next != bundle.tensors.size()) {
    throw std::runtime_error("checkpoint " + path + " has " +
                             std::to_string(bundle.tensors.size() - next) + " unexpected tensors");
  }
}

ModelParams load_model(const std::string& path) {
  TensorBundle bundle = load_bundle(path);
  const std::string kind = bundle.header.get_string("kind");
  if (kind != kModelKind) {
    throw std::runtime_error("checkpoint " + path + " has kind '" + kind + "', expected '" +
                             kModelKind + "'");
  }
  ModelConfig cfg = model_config_from_map(bundle.header);
  Rng rng(0);  // shapes only; every value is overwritten below
  ModelParams params = ModelParams::init(cfg, rng);
  fill_params_from_bundle(bundle, path, params.named_params());
  return params;
}

std::string checkpoint_kind(const std::string& path) {
  return load_bundle(path).header.get_string("kind");
}

}  // namespace natstream
