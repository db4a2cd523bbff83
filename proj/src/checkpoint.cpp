#include "laip/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

#include "laip/errors.hpp"

namespace laip::model {

using nlohmann::json;

namespace {

void put_f64(std::vector<unsigned char>& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(bits >> (8 * i)));
}

double get_f64(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 7; i >= 0; --i) bits = (bits << 8) | p[i];
  return std::bit_cast<double>(bits);
}

}  // namespace

json config_to_json(const ModelConfig& c) {
  return json{{"d", c.d},
              {"heads", c.heads},
              {"ffn_dim", c.ffn_dim},
              {"n_self_layers", c.n_self_layers},
              {"n_cross_layers", c.n_cross_layers},
              {"bidiratt_layer", c.bidiratt_layer},
              {"proj_dim", c.proj_dim},
              {"grid_rows", c.grid_rows},
              {"grid_cols", c.grid_cols},
              {"patch_pixels", c.patch_pixels},
              {"max_text_len", c.max_text_len},
              {"vocab_size", c.vocab_size},
              {"separate_phrase_projection", c.separate_phrase_projection}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  const json defaults = config_to_json(c);
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!defaults.contains(it.key())) throw ConfigError("unknown model config key '" + it.key() + "'");
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("d", c.d);
  get("heads", c.heads);
  get("ffn_dim", c.ffn_dim);
  get("n_self_layers", c.n_self_layers);
  get("n_cross_layers", c.n_cross_layers);
  get("bidiratt_layer", c.bidiratt_layer);
  get("proj_dim", c.proj_dim);
  get("grid_rows", c.grid_rows);
  get("grid_cols", c.grid_cols);
  get("patch_pixels", c.patch_pixels);
  get("max_text_len", c.max_text_len);
  get("vocab_size", c.vocab_size);
  get("separate_phrase_projection", c.separate_phrase_projection);
  return c;
}

void write_tensor_bundle(const std::filesystem::path& dir, const std::map<std::string, Tensor>& tensors,
                         json extra) {
  std::filesystem::create_directories(dir);
  std::vector<unsigned char> blob;
  json entries = json::array();
  for (const auto& [name, t] : tensors) {
    entries.push_back({{"name", name}, {"shape", t.shape()}, {"offset", blob.size()}, {"count", t.size()}});
    for (double v : t.data()) put_f64(blob, v);
  }
  json manifest = std::move(extra);
  manifest["format"] = "laip-checkpoint";
  manifest["version"] = kCheckpointVersion;
  manifest["dtype"] = "float64";
  manifest["byte_order"] = "little";
  manifest["blob"] = "tensors.bin";
  manifest["tensors"] = std::move(entries);

  std::ofstream bin(dir / "tensors.bin", std::ios::binary | std::ios::trunc);
  bin.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
  if (!bin) throw FormatError("failed writing " + (dir / "tensors.bin").string());
  std::ofstream man(dir / "manifest.json", std::ios::trunc);
  man << manifest.dump(2) << '\n';
  if (!man) throw FormatError("failed writing " + (dir / "manifest.json").string());
}

std::map<std::string, Tensor> read_tensor_bundle(const std::filesystem::path& dir, json* manifest_out) {
  std::ifstream man(dir / "manifest.json");
  if (!man) throw FormatError("missing checkpoint manifest in " + dir.string());
  json manifest;
  try {
    manifest = json::parse(man);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("checkpoint manifest is not valid JSON: ") + e.what());
  }
  if (manifest.value("format", "") != "laip-checkpoint") throw FormatError("not a laip checkpoint manifest");
  if (!manifest.contains("version")) throw FormatError("checkpoint manifest lacks a version field");
  if (manifest["version"] != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + manifest["version"].dump());

  std::ifstream bin(dir / manifest.value("blob", "tensors.bin"), std::ios::binary);
  if (!bin) throw FormatError("missing checkpoint blob in " + dir.string());
  std::vector<unsigned char> blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());

  std::map<std::string, Tensor> out;
  for (const auto& e : manifest.at("tensors")) {
    const auto name = e.at("name").get<std::string>();
    const auto shape = e.at("shape").get<Shape>();
    const auto offset = e.at("offset").get<std::uint64_t>();
    const auto count = e.at("count").get<std::uint64_t>();
    if (offset + count * 8 > blob.size()) throw FormatError("tensor '" + name + "' runs past end of blob", offset);
    std::vector<double> data(count);
    for (std::uint64_t i = 0; i < count; ++i) data[i] = get_f64(blob.data() + offset + 8 * i);
    try {
      out.emplace(name, Tensor(shape, std::move(data)));
    } catch (const DimensionError& err) {
      throw FormatError("tensor '" + name + "': " + err.what(), offset);
    }
  }
  if (manifest_out) *manifest_out = std::move(manifest);
  return out;
}

void save_checkpoint(const std::filesystem::path& dir, const ModelConfig& config, Params& params,
                     MomentumState& momentum) {
  std::map<std::string, Tensor> tensors;
  visit_params(params, [&](const std::string& name, Var& v) { tensors.emplace(name, v.value()); });
  visit_momentum(momentum, [&](const std::string& name, Var& v) { tensors.emplace("momentum." + name, v.value()); });
  write_tensor_bundle(dir, tensors, json{{"model_config", config_to_json(config)}, {"momentum_alpha", momentum.alpha}});
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  json manifest;
  auto tensors = read_tensor_bundle(dir, &manifest);
  Checkpoint ck;
  ck.config = config_from_json(manifest.at("model_config"));
  ck.config.validate();
  Rng rng(0);
  ck.params = init_params(ck.config, rng);
  ck.momentum = init_momentum(ck.params, manifest.value("momentum_alpha", 0.995));
  auto assign = [&](const std::string& key, Var& v) {
    auto it = tensors.find(key);
    if (it == tensors.end()) throw FormatError("checkpoint lacks tensor '" + key + "'");
    if (it->second.shape() != v.value().shape())
      throw FormatError("tensor '" + key + "' has shape " + shape_str(it->second.shape()) + ", expected " +
                        shape_str(v.value().shape()));
    v.mutable_value() = it->second;
  };
  visit_params(ck.params, [&](const std::string& name, Var& v) { assign(name, v); });
  visit_momentum(ck.momentum, [&](const std::string& name, Var& v) { assign("momentum." + name, v); });
  return ck;
}

}  // namespace laip::model
