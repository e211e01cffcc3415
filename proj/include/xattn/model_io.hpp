#pragma once

// Checkpoint format: `<prefix>.manifest.json` + `<prefix>.bin`.
//
// The manifest carries the encoder config, the kind of every layer (with
// top_k for routed layers and the surviving expert ids for deterministic
// ones), and a tensor table: name, shape, dtype, byte offset and length
// into the blob. The blob is the raw little-endian f32 payloads
// concatenated in parameter-visitation order. Writes go through a temp
// file plus rename so a crash never leaves a half-written checkpoint, and
// the manifest is dumped with sorted keys so identical models produce
// byte-identical files.

#include <json.hpp>

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "xattn/model.hpp"

namespace xattn {

inline constexpr int kCheckpointFormatVersion = 1;

// ---------------------------------------------------------------------------
// Config <-> JSON (strict: unknown keys are rejected)

inline nlohmann::json encoder_config_to_json(const EncoderConfig& c) {
  return nlohmann::json{
      {"vocab_size", c.vocab_size}, {"max_len", c.max_len},
      {"d_model", c.d_model},       {"n_heads", c.n_heads},
      {"n_layers", c.n_layers},     {"d_ff", c.d_ff},
      {"n_classes", c.n_classes},   {"use_pooler", c.use_pooler},
      {"ln_eps", c.ln_eps},         {"init_std", c.init_std}};
}

inline EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  static const std::vector<std::string> known{
      "vocab_size", "max_len", "d_model", "n_heads", "n_layers",
      "d_ff",       "n_classes", "use_pooler", "ln_eps", "init_std"};
  for (const auto& item : j.items())
    if (std::find(known.begin(), known.end(), item.key()) == known.end())
      throw ConfigError("model config: unknown key '" + item.key() + "'");
  EncoderConfig c;
  c.vocab_size = j.at("vocab_size").get<Index>();
  c.max_len = j.at("max_len").get<Index>();
  c.d_model = j.at("d_model").get<Index>();
  c.n_heads = j.at("n_heads").get<Index>();
  c.n_layers = j.at("n_layers").get<Index>();
  c.d_ff = j.at("d_ff").get<Index>();
  c.n_classes = j.at("n_classes").get<Index>();
  if (j.contains("use_pooler")) c.use_pooler = j.at("use_pooler").get<bool>();
  if (j.contains("ln_eps")) c.ln_eps = j.at("ln_eps").get<double>();
  if (j.contains("init_std")) c.init_std = j.at("init_std").get<double>();
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Save

namespace detail {

inline void write_file_atomic(const std::string& path, const void* data,
                              std::size_t size) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp + "' for writing");
    out.write(static_cast<const char*>(data),
              static_cast<std::streamsize>(size));
    if (!out.flush()) throw IoError("write to '" + tmp + "' failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec)
    throw IoError("rename '" + tmp + "' -> '" + path + "': " + ec.message());
}

}  // namespace detail

inline void save_checkpoint(const std::string& prefix, Model<float>& model) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& layer : model.layers) {
    nlohmann::json entry{{"kind", to_string(kind_of(layer))}};
    if (kind_of(layer) == LayerKind::routed)
      entry["top_k"] = std::get<MoELayer<float>>(layer).top_k;
    if (kind_of(layer) == LayerKind::deterministic)
      entry["source"] = std::get<DeterministicLayer<float>>(layer).source;
    layers.push_back(std::move(entry));
  }

  nlohmann::json tensors = nlohmann::json::array();
  std::vector<char> blob;
  model.visit_params([&](const std::string& name, Parameter<float>& p) {
    const std::size_t bytes = static_cast<std::size_t>(p.numel()) * 4;
    tensors.push_back({{"name", name},
                       {"shape", p.value.shape()},
                       {"dtype", "f32"},
                       {"offset", blob.size()},
                       {"byte_length", bytes}});
    const std::size_t at = blob.size();
    blob.resize(at + bytes);
    std::memcpy(blob.data() + at, p.value.data(), bytes);
  });

  const nlohmann::json manifest{
      {"format_version", kCheckpointFormatVersion},
      {"config", encoder_config_to_json(model.cfg)},
      {"layers", layers},
      {"tensors", tensors}};
  const std::string text = manifest.dump(2) + "\n";
  detail::write_file_atomic(prefix + ".bin", blob.data(), blob.size());
  detail::write_file_atomic(prefix + ".manifest.json", text.data(),
                            text.size());
}

// ---------------------------------------------------------------------------
// Load

namespace detail {

inline std::vector<char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open '" + path + "'");
  const std::streamsize size = in.tellg();
  in.seekg(0);
  std::vector<char> data(static_cast<std::size_t>(size));
  if (size > 0 && !in.read(data.data(), size))
    throw IoError("read of '" + path + "' failed");
  return data;
}

}  // namespace detail

inline Model<float> load_checkpoint(const std::string& prefix) {
  const std::string manifest_path = prefix + ".manifest.json";
  nlohmann::json manifest;
  try {
    const auto text = detail::read_file(manifest_path);
    manifest = nlohmann::json::parse(text.begin(), text.end());
  } catch (const nlohmann::json::exception& e) {
    throw IoError(manifest_path + ": " + e.what());
  }

  Model<float> model;
  try {
    if (manifest.at("format_version").get<int>() != kCheckpointFormatVersion)
      throw IoError(manifest_path + ": unsupported format_version");
    model.cfg = encoder_config_from_json(manifest.at("config"));

    const auto& layers = manifest.at("layers");
    if (!layers.is_array() ||
        static_cast<Index>(layers.size()) != model.cfg.n_layers)
      throw IoError(manifest_path + ": layer list does not match n_layers");
    const Index d = model.cfg.d_model, dh = model.cfg.d_head();
    model.embed = Embedding<float>(model.cfg.vocab_size, model.cfg.max_len, d);
    for (const auto& entry : layers) {
      switch (layer_kind_from_string(entry.at("kind").get<std::string>())) {
        case LayerKind::standard:
          model.layers.emplace_back(StandardLayer<float>(
              d, model.cfg.n_heads, model.cfg.d_ff));
          break;
        case LayerKind::routed:
          model.layers.emplace_back(MoELayer<float>(
              d, dh, model.cfg.n_heads, entry.at("top_k").get<Index>()));
          break;
        case LayerKind::deterministic: {
          DeterministicLayer<float> det;
          det.source = entry.at("source").get<std::vector<Index>>();
          if (det.source.empty())
            throw IoError(manifest_path + ": deterministic layer without experts");
          for (std::size_t i = 0; i < det.source.size(); ++i)
            det.experts.emplace_back(d, dh);
          det.expander = ExpanderFFN<float>(dh, d);
          det.ln_out = Norm<float>(d);
          model.layers.emplace_back(std::move(det));
          break;
        }
      }
    }
    if (model.cfg.use_pooler) model.pooler = Dense<float>(d, d);
    model.classifier = Dense<float>(d, model.cfg.n_classes);

    const auto blob = detail::read_file(prefix + ".bin");
    std::map<std::string, Parameter<float>*> by_name;
    model.visit_params([&by_name](const std::string& name,
                                  Parameter<float>& p) { by_name[name] = &p; });

    std::map<std::string, bool> filled;
    for (const auto& [name, _] : by_name) filled[name] = false;
    for (const auto& entry : manifest.at("tensors")) {
      const std::string name = entry.at("name").get<std::string>();
      auto it = by_name.find(name);
      if (it == by_name.end())
        throw IoError(manifest_path + ": tensor '" + name +
                      "' does not exist in a model of this shape");
      if (filled[name])
        throw IoError(manifest_path + ": tensor '" + name + "' listed twice");
      Parameter<float>& p = *it->second;
      const Shape shape = entry.at("shape").get<Shape>();
      if (shape != p.value.shape())
        throw IoError(manifest_path + ": tensor '" + name + "' has shape " +
                      shape_str(shape) + ", model expects " +
                      shape_str(p.value.shape()));
      if (entry.at("dtype").get<std::string>() != "f32")
        throw IoError(manifest_path + ": tensor '" + name +
                      "' has unsupported dtype");
      const std::size_t offset = entry.at("offset").get<std::size_t>();
      const std::size_t bytes = entry.at("byte_length").get<std::size_t>();
      if (bytes != static_cast<std::size_t>(p.numel()) * 4 ||
          offset + bytes > blob.size())
        throw IoError(manifest_path + ": tensor '" + name +
                      "' does not fit the blob");
      std::memcpy(p.value.data(), blob.data() + offset, bytes);
      filled[name] = true;
    }
    for (const auto& [name, ok] : filled)
      if (!ok)
        throw IoError(manifest_path + ": tensor '" + name + "' missing");
  } catch (const nlohmann::json::exception& e) {
    throw IoError(manifest_path + ": " + e.what());
  }
  return model;
}

}  // namespace xattn
