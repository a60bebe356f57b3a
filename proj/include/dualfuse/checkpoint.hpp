#pragma once

#include <memory>
#include <string>
#include <vector>

#include "dualfuse/io.hpp"
#include "dualfuse/models.hpp"

namespace dualfuse {

inline io::json spec_to_json(const ModelSpec& s) {
  return {{"model", to_string(s.kind)},
          {"variant", to_string(s.variant)},
          {"dims",
           {{"text_len", s.dims.text_len},
            {"text_dim", s.dims.text_dim},
            {"image_len", s.dims.image_len},
            {"image_dim", s.dims.image_dim},
            {"num_classes", s.dims.num_classes}}},
          {"layers", s.layers},
          {"heads", s.heads},
          {"head_hidden", s.head_hidden},
          {"attn_dropout", s.attn_dropout},
          {"dropout", s.dropout},
          {"seed", s.seed}};
}

inline ModelSpec spec_from_json(const io::json& j, const io::fs::path& where) {
  ModelSpec s;
  s.kind = parse_model_kind(io::field<std::string>(j, "model", where));
  s.variant = parse_variant(io::field<std::string>(j, "variant", where));
  const auto d = io::field<io::json>(j, "dims", where);
  s.dims.text_len = io::field<std::size_t>(d, "text_len", where);
  s.dims.text_dim = io::field<std::size_t>(d, "text_dim", where);
  s.dims.image_len = io::field<std::size_t>(d, "image_len", where);
  s.dims.image_dim = io::field<std::size_t>(d, "image_dim", where);
  s.dims.num_classes = io::field<std::size_t>(d, "num_classes", where);
  s.layers = io::field<std::size_t>(j, "layers", where);
  s.heads = io::field<std::size_t>(j, "heads", where);
  s.head_hidden = io::field<std::size_t>(j, "head_hidden", where);
  s.attn_dropout = io::field<double>(j, "attn_dropout", where);
  s.dropout = io::field<double>(j, "dropout", where);
  s.seed = io::field<std::uint64_t>(j, "seed", where);
  return s;
}

/// dir/model.json (spec + named parameter shapes) and dir/weights.bin
/// (f32 little-endian, parameters concatenated in manifest order).
template <class T>
void save_checkpoint(Model<T>& model, const io::fs::path& dir) {
  io::fs::create_directories(dir);
  io::json params = io::json::array();
  std::vector<float> blob;
  for (const auto* p : model.parameters()) {
    params.push_back({{"name", p->name}, {"shape", p->value.shape()}});
    for (T v : p->value.data()) blob.push_back(static_cast<float>(v));
  }
  io::write_json(dir / "model.json",
                 {{"version", 1}, {"dtype", "f32le"}, {"spec", spec_to_json(model.spec())}, {"parameters", params}});
  io::write_file(dir / "weights.bin", io::encode_le<float>(blob));
}

template <class T>
std::unique_ptr<Model<T>> load_checkpoint(const io::fs::path& dir) {
  const auto where = dir / "model.json";
  const auto m = io::read_json(where);
  require(io::field<int>(m, "version", where) == 1 && io::field<std::string>(m, "dtype", where) == "f32le",
          ErrorCode::kBadMagic, where.string() + ": not a version 1 f32le checkpoint");
  auto model = make_model<T>(spec_from_json(io::field<io::json>(m, "spec", where), where));
  const auto listed = io::field<io::json>(m, "parameters", where);
  auto params = model->parameters();
  require(listed.is_array() && listed.size() == params.size(), ErrorCode::kShapeMismatchWithManifest,
          where.string() + ": parameter list does not match the model");
  std::size_t total = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto name = io::field<std::string>(listed[i], "name", where);
    const auto shape = io::field<Shape>(listed[i], "shape", where);
    require(name == params[i]->name && shape == params[i]->value.shape(), ErrorCode::kShapeMismatchWithManifest,
            where.string() + ": entry " + std::to_string(i) + " is " + name + " " + shape_str(shape) + ", model has " +
                params[i]->name + " " + shape_str(params[i]->value.shape()));
    total += params[i]->value.size();
  }
  const auto blob = io::decode_le<float>(io::read_file(dir / "weights.bin"), total, "weights.bin");
  std::size_t at = 0;
  for (auto* p : params)
    for (T& v : p->value.data()) v = static_cast<T>(blob[at++]);
  return model;
}

}  // namespace dualfuse
