#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "from/network.hpp"
#include "from/nn/tensor.hpp"

#include "json.hpp"

namespace from {

inline nlohmann::json to_json(const NetworkConfig& c) {
  return nlohmann::json{{"image_h", c.image_h},
                        {"image_w", c.image_w},
                        {"stem_ch", c.stem_ch},
                        {"c3_ch", c.c3_ch},
                        {"c2_ch", c.c2_ch},
                        {"x1_ch", c.x1_ch},
                        {"pyramid_ch", c.pyramid_ch},
                        {"embed_dim", c.embed_dim},
                        {"mask_mode", to_string(c.mask_mode)},
                        {"pattern_head", to_string(c.pattern_head)},
                        {"dropout", c.dropout},
                        {"k", c.k}};
}

inline NetworkConfig network_config_from_json(const nlohmann::json& j) {
  NetworkConfig c;
  c.image_h = j.at("image_h");
  c.image_w = j.at("image_w");
  c.stem_ch = j.at("stem_ch");
  c.c3_ch = j.at("c3_ch");
  c.c2_ch = j.at("c2_ch");
  c.x1_ch = j.at("x1_ch");
  c.pyramid_ch = j.at("pyramid_ch");
  c.embed_dim = j.at("embed_dim");
  c.mask_mode = mask_mode_from_string(j.at("mask_mode"));
  c.pattern_head = pattern_head_from_string(j.at("pattern_head"));
  c.dropout = j.at("dropout");
  c.k = j.at("k");
  return c;
}

// Self-describing container: magic, JSON directory, raw little-endian data.
template <class T>
struct Checkpoint {
  nlohmann::json meta;  // config echo, epoch, mode flags
  std::vector<std::pair<std::string, nn::Tensor<T>>> tensors;

  const nn::Tensor<T>* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
};

inline constexpr char kCkptMagic[8] = {'F', 'R', 'O', 'M', 'C', 'K', 'P', '1'};

template <class T>
void save_checkpoint(const std::string& path, const Checkpoint<T>& ckpt) {
  nlohmann::json header;
  header["version"] = 1;
  header["scalar"] = sizeof(T) == 4 ? "f32" : "f64";
  header["meta"] = ckpt.meta;
  auto& dir = header["tensors"] = nlohmann::json::array();
  for (const auto& [name, t] : ckpt.tensors)
    dir.push_back({{"name", name}, {"shape", t.shape}});

  std::string hs = header.dump();
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  f.write(kCkptMagic, 8);
  std::uint64_t hlen = hs.size();
  f.write(reinterpret_cast<const char*>(&hlen), 8);
  f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& [name, t] : ckpt.tensors)
    f.write(reinterpret_cast<const char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(T)));
  if (!f) throw std::runtime_error("checkpoint: write failed for " + path);
}

template <class T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kCkptMagic, 8) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  std::uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), 8);
  std::string hs(hlen, '\0');
  f.read(hs.data(), static_cast<std::streamsize>(hlen));
  nlohmann::json header = nlohmann::json::parse(hs);
  if (header.at("version") != 1)
    throw std::runtime_error("checkpoint: unsupported version");
  std::string scalar = header.at("scalar");
  if (scalar != (sizeof(T) == 4 ? "f32" : "f64"))
    throw std::runtime_error("checkpoint: scalar type mismatch (" + scalar + ")");

  Checkpoint<T> ckpt;
  ckpt.meta = header.at("meta");
  for (const auto& entry : header.at("tensors")) {
    nn::Tensor<T> t(entry.at("shape").template get<std::vector<int>>());
    f.read(reinterpret_cast<char*>(t.data.data()),
           static_cast<std::streamsize>(t.data.size() * sizeof(T)));
    ckpt.tensors.emplace_back(entry.at("name"), std::move(t));
  }
  if (!f) throw std::runtime_error("checkpoint: truncated file " + path);
  return ckpt;
}

// Copy every checkpoint tensor whose name and shape match a destination
// parameter. Returns the number of loaded tensors.
template <class T>
int restore_params(const Checkpoint<T>& ckpt,
                   std::vector<nn::ParamRef<T>>& params,
                   bool require_all = true) {
  int loaded = 0;
  for (auto& p : params) {
    const nn::Tensor<T>* src = ckpt.find(p.name);
    if (!src) {
      if (require_all)
        throw std::runtime_error("checkpoint: missing tensor " + p.name);
      continue;
    }
    if (src->shape != p.value->shape)
      throw std::runtime_error("checkpoint: shape mismatch for " + p.name);
    *p.value = *src;
    ++loaded;
  }
  return loaded;
}

}  // namespace from
