#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "from/geometry.hpp"
#include "from/image.hpp"
#include "from/patterns.hpp"
#include "from/rng.hpp"

#include "json.hpp"

namespace from {

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// ---------------------------------------------------------------------------
// Procedural occluders. Visually distinct texture families, each rendering a
// full rectangle so the occluded-area box is exact. The "face" family pastes
// a patch of a *different* synthetic identity: unlike the abstract textures
// it injects face-like features, the hardest contamination case for an
// embedding model.
// ---------------------------------------------------------------------------

enum class OccluderFamily {
  solid,
  stripes,
  checker,
  blob,
  ring,
  gradient,
  noise,
  cross,
  disk,
  face,
};

inline const std::vector<std::string>& occluder_family_names() {
  static const std::vector<std::string> names = {
      "solid", "stripes", "checker", "blob",  "ring",
      "gradient", "noise", "cross",  "disk",  "face"};
  return names;
}

inline std::string to_string(OccluderFamily f) {
  return occluder_family_names()[static_cast<int>(f)];
}

inline OccluderFamily occluder_family_from_string(const std::string& s) {
  const auto& names = occluder_family_names();
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == s) return static_cast<OccluderFamily>(i);
  throw ConfigError("occluders: unknown family '" + s + "'");
}

struct OccluderSpec {
  OccluderFamily family = OccluderFamily::solid;
  int base_w = 14;
  int base_h = 12;
  std::uint32_t texture_seed = 0;
};

inline Image synth_identity_image(std::uint64_t identity_seed, Rng& sample_rng,
                                  int w, int h);

// Renders the occluder texture at the given output size. Coordinates are
// normalized so rendering at a scaled size behaves like rescaling the base
// texture; the result is a pure function of (family, size, texture_seed).
inline Image render_occluder(const OccluderSpec& spec, int out_w, int out_h) {
  if (spec.family == OccluderFamily::face) {
    // another face as the occluder; the texture seed IS the identity seed, so
    // dataset builders can draw the occluding face from their own identity
    // pool (the hardest case: only location separates the two identities)
    Rng jitter(Rng::splitmix(spec.texture_seed ^ 0xfacefaceu));
    Image img = synth_identity_image(spec.texture_seed, jitter, out_w, out_h);
    // dark frame around the patch so it reads as a held-up photo: the face
    // inside stays confusable with the subject, but the boundary is visible
    int fw = std::max(1, std::min(out_w, out_h) / 8);
    for (int y = 0; y < out_h; ++y)
      for (int x = 0; x < out_w; ++x)
        if (x < fw || y < fw || x >= out_w - fw || y >= out_h - fw)
          img.at(x, y) = -0.95f;
    return img;
  }
  Image img(out_w, out_h);
  Rng rng(Rng::splitmix(spec.texture_seed ^ 0xabcdef12u));
  double p0 = rng.uniform(0.0, 6.283);
  double p1 = rng.uniform(0.0, 6.283);
  double freq = rng.uniform(4.0, 9.0);
  double polarity = rng.uniform() < 0.5 ? -1.0 : 1.0;
  auto tex = [&](double u, double v) -> double {
    switch (spec.family) {
      case OccluderFamily::solid:
        return polarity * 0.95;
      case OccluderFamily::stripes:
        return (std::sin(freq * u * 6.283 + p0) > 0 ? 0.9 : -0.9) * polarity;
      case OccluderFamily::checker: {
        int cu = static_cast<int>(u * freq);
        int cv = static_cast<int>(v * freq);
        return ((cu + cv) % 2 == 0 ? 0.9 : -0.9) * polarity;
      }
      case OccluderFamily::blob: {
        double s = -0.8;
        double cx[3] = {0.3, 0.7, 0.5};
        double cy[3] = {0.3, 0.4, 0.75};
        for (int i = 0; i < 3; ++i) {
          double du = u - cx[i], dv = v - cy[i];
          s += 1.6 * std::exp(-(du * du + dv * dv) / 0.02);
        }
        return std::min(0.95, s) * polarity;
      }
      case OccluderFamily::ring: {
        double du = u - 0.5, dv = v - 0.5;
        double r = std::sqrt(du * du + dv * dv);
        return (std::sin(r * freq * 6.283 + p1) > 0 ? 0.85 : -0.85) * polarity;
      }
      case OccluderFamily::gradient:
        return (2.0 * (u * std::cos(p0) + v * std::sin(p0)) - 1.0) * 0.9;
      case OccluderFamily::noise:
        return 0.0;  // filled per-pixel below
      case OccluderFamily::cross: {
        bool bar = std::abs(u - 0.5) < 0.18 || std::abs(v - 0.5) < 0.18;
        return (bar ? 0.9 : -0.9) * polarity;
      }
      case OccluderFamily::disk: {
        double du = u - 0.5, dv = v - 0.5;
        return (du * du + dv * dv < 0.11 ? -0.9 : 0.9) * polarity;
      }
      case OccluderFamily::face:
        return 0.0;  // handled by the early return above
    }
    return 0.0;
  };
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x) {
      double u = (x + 0.5) / out_w;
      double v = (y + 0.5) / out_h;
      img.at(x, y) = static_cast<float>(tex(u, v));
    }
  if (spec.family == OccluderFamily::noise) {
    Rng nrng(Rng::splitmix(spec.texture_seed ^ 0x51f15eedu));
    for (float& px : img.pixels)
      px = static_cast<float>(nrng.uniform(-0.95, 0.95));
  }
  img.clamp_range();  // gradients can overshoot the [-1,1] pixel contract
  return img;
}

// ---------------------------------------------------------------------------
// Synthetic identities: layered parametric faces keyed by identity_seed, with
// per-sample jitter (translation <= 3 px, brightness +-0.1, noise sigma 0.02).
// ---------------------------------------------------------------------------

inline Image synth_identity_image(std::uint64_t identity_seed, Rng& sample_rng,
                                  int w, int h) {
  Rng id_rng(Rng::splitmix(identity_seed * 0x2545f491u + 0x9e37u));
  struct Blob {
    double cx, cy, sx, sy, amp;
  };
  // canonical face layout: two eyes, nose, mouth, plus an identity texture
  Blob blobs[4];
  double eye_dx = id_rng.uniform(0.16, 0.24);
  double eye_y = id_rng.uniform(0.30, 0.40);
  double eye_s = id_rng.uniform(0.035, 0.075);
  double eye_a = id_rng.uniform(0.5, 1.0) * (id_rng.uniform() < 0.5 ? -1 : 1);
  blobs[0] = {0.5 - eye_dx, eye_y, eye_s, eye_s * 0.8, eye_a};
  blobs[1] = {0.5 + eye_dx, eye_y, eye_s, eye_s * 0.8,
              eye_a * id_rng.uniform(0.8, 1.2)};
  blobs[2] = {id_rng.uniform(0.45, 0.55), id_rng.uniform(0.50, 0.60),
              id_rng.uniform(0.03, 0.06), id_rng.uniform(0.08, 0.14),
              id_rng.uniform(-0.9, 0.9)};
  blobs[3] = {0.5, id_rng.uniform(0.70, 0.80), id_rng.uniform(0.10, 0.18),
              id_rng.uniform(0.03, 0.06),
              id_rng.uniform(0.5, 1.0) * (id_rng.uniform() < 0.5 ? -1 : 1)};
  double oval_rx = id_rng.uniform(0.34, 0.44);
  double oval_ry = id_rng.uniform(0.38, 0.48);
  double oval_amp = id_rng.uniform(0.25, 0.55);
  double bg = id_rng.uniform(-0.65, -0.35);
  double tex_fx = id_rng.uniform(2.0, 7.0);
  double tex_fy = id_rng.uniform(2.0, 7.0);
  double tex_phase = id_rng.uniform(0.0, 6.283);
  double tex_amp = id_rng.uniform(0.05, 0.25);

  double jx = sample_rng.uniform(-3.0, 3.0);
  double jy = sample_rng.uniform(-3.0, 3.0);
  double brightness = sample_rng.uniform(-0.1, 0.1);

  Image img(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double u = (x + 0.5 - jx) / w;
      double v = (y + 0.5 - jy) / h;
      double du = (u - 0.5) / oval_rx;
      double dv = (v - 0.5) / oval_ry;
      double val = bg + oval_amp * std::exp(-(du * du + dv * dv) * 1.2);
      for (const Blob& b : blobs) {
        double bu = (u - b.cx) / b.sx;
        double bv = (v - b.cy) / b.sy;
        val += b.amp * std::exp(-0.5 * (bu * bu + bv * bv));
      }
      val += tex_amp *
             std::sin(tex_fx * 6.283 * u + tex_fy * 6.283 * v + tex_phase);
      img.at(x, y) = static_cast<float>(val + brightness);
    }
  for (float& px : img.pixels)
    px += static_cast<float>(sample_rng.normal(0.0, 0.02));
  img.clamp_range();
  return img;
}

// ---------------------------------------------------------------------------
// Occlusion pasting: rescale, drop at a uniform random center, clip at the
// borders, return the composited image and the clipped box.
// ---------------------------------------------------------------------------

inline std::pair<Image, PixelBox> apply_occlusion(const Image& img,
                                                  const OccluderSpec& occ,
                                                  double s, Rng& rng) {
  if (s <= 0.0) throw std::invalid_argument("occlusion scale must be > 0");
  if (occ.base_w < 4 || occ.base_h < 4)
    throw std::invalid_argument("occluder base size must be >= 4");
  int sw = std::max(1, static_cast<int>(std::llround(s * occ.base_w)));
  int sh = std::max(1, static_cast<int>(std::llround(s * occ.base_h)));
  if (sw > 4 * img.width || sh > 4 * img.height)
    throw std::invalid_argument(
        "scaled occluder exceeds 4x the image in one dimension");

  int cx = static_cast<int>(rng.uniform_int(static_cast<std::uint32_t>(img.width)));
  int cy = static_cast<int>(rng.uniform_int(static_cast<std::uint32_t>(img.height)));
  PixelBox raw{cx - sw / 2, cy - sh / 2, cx - sw / 2 + sw, cy - sh / 2 + sh};
  PixelBox box = raw.clipped(img.width, img.height);

  Image out = img;
  Image tex = render_occluder(occ, sw, sh);
  for (int y = box.y0; y < box.y1; ++y)
    for (int x = box.x0; x < box.x1; ++x)
      out.at(x, y) = tex.at(x - raw.x0, y - raw.y0);
  return {std::move(out), box};
}

// paste at an exact target box (fixed-region evaluation sets)
inline std::pair<Image, PixelBox> apply_occlusion_at(const Image& img,
                                                     const OccluderSpec& occ,
                                                     const PixelBox& target) {
  PixelBox box = target.clipped(img.width, img.height);
  Image out = img;
  if (!box.empty()) {
    Image tex = render_occluder(occ, box.x1 - box.x0, box.y1 - box.y0);
    for (int y = box.y0; y < box.y1; ++y)
      for (int x = box.x0; x < box.x1; ++x)
        out.at(x, y) = tex.at(x - box.x0, y - box.y0);
  }
  return {std::move(out), box};
}

// Named face regions used for the per-occlusion-type breakdown.
inline PixelBox region_box(const std::string& name, int w, int h) {
  auto f = [&](double x0, double y0, double x1, double y1) {
    return PixelBox{static_cast<int>(std::llround(x0 * w)),
                    static_cast<int>(std::llround(y0 * h)),
                    static_cast<int>(std::llround(x1 * w)),
                    static_cast<int>(std::llround(y1 * h))};
  };
  if (name == "left") return f(0.0, 0.0, 0.5, 1.0);
  if (name == "right") return f(0.5, 0.0, 1.0, 1.0);
  if (name == "upper") return f(0.0, 0.0, 1.0, 0.5);
  if (name == "lower") return f(0.0, 0.5, 1.0, 1.0);
  if (name == "eyes") return f(0.15, 0.22, 0.85, 0.48);
  if (name == "nose") return f(0.35, 0.45, 0.65, 0.68);
  if (name == "mouth") return f(0.25, 0.65, 0.75, 0.88);
  throw ConfigError("region: unknown region '" + name + "'");
}

// ---------------------------------------------------------------------------
// Dataset factory
// ---------------------------------------------------------------------------

struct SynthConfig {
  int identities = 40;
  int samples_per_identity = 50;
  int image_w = 48;
  int image_h = 56;
  int k = 5;
  std::string scale_policy = "uniform";  // "fixed" or "uniform" over 1.0:0.5:5.0
  double scale_s = 2.0;                  // used when scale_policy == fixed
  std::vector<OccluderFamily> families;  // empty means the nine textures
                                         // (face occluders are opt-in)
  double clean_fraction = 0.0;
  int occluder_base_w = 14;
  int occluder_base_h = 12;
  std::uint64_t global_seed = 100;
  std::uint64_t id_seed_base = 0;
  std::string region;  // optional fixed region name

  void validate() const {
    if (identities < 1) throw ConfigError("identities: must be >= 1");
    if (samples_per_identity < 1)
      throw ConfigError("samples_per_identity: must be >= 1");
    if (image_w < 16 || image_h < 16)
      throw ConfigError("image_w/image_h: must be >= 16");
    if (k < 1 || k > 16) throw ConfigError("k: must be in [1,16]");
    if (scale_policy != "fixed" && scale_policy != "uniform")
      throw ConfigError("scale_policy: must be 'fixed' or 'uniform'");
    if (scale_s <= 0.0) throw ConfigError("scale_s: must be > 0");
    if (clean_fraction < 0.0 || clean_fraction > 1.0)
      throw ConfigError("clean_fraction: must be in [0,1]");
    if (occluder_base_w < 4 || occluder_base_h < 4)
      throw ConfigError("occluder_base_w/occluder_base_h: must be >= 4");
    if (!region.empty()) region_box(region, image_w, image_h);  // throws
  }

  std::vector<OccluderFamily> active_families() const {
    if (!families.empty()) return families;
    std::vector<OccluderFamily> all;
    for (int i = 0; i < 9; ++i) all.push_back(static_cast<OccluderFamily>(i));
    return all;
  }
};

struct ManifestRecord {
  std::uint64_t index = 0;
  int identity = 0;
  std::uint64_t identity_seed = 0;
  bool occluded = false;
  OccluderSpec occluder;
  double scale_s = 0.0;
  PixelBox box;
  std::size_t pattern_label = 0;
  double occ_fraction = 0.0;
};

struct DatasetManifest {
  SynthConfig config;
  std::vector<ManifestRecord> records;
};

// All randomness for record i comes from stream (global_seed, i), so
// generation order and worker count never change the result.
inline std::pair<ManifestRecord, Image> generate_record(
    const SynthConfig& cfg, const PatternCodebook& cb, std::uint64_t index) {
  ManifestRecord rec;
  rec.index = index;
  rec.identity = static_cast<int>(index / cfg.samples_per_identity);
  rec.identity_seed = cfg.id_seed_base + rec.identity;

  Rng rng = Rng::stream(cfg.global_seed, index);
  Image img = synth_identity_image(rec.identity_seed, rng, cfg.image_w, cfg.image_h);

  bool clean = rng.uniform() < cfg.clean_fraction;
  if (!clean) {
    auto fams = cfg.active_families();
    rec.occluded = true;
    rec.occluder.family = fams[rng.uniform_int(static_cast<std::uint32_t>(fams.size()))];
    rec.occluder.base_w = cfg.occluder_base_w;
    rec.occluder.base_h = cfg.occluder_base_h;
    if (rec.occluder.family == OccluderFamily::face && cfg.identities > 1) {
      // occlude with a different identity from this dataset's own pool
      int other = (rec.identity + 1 +
                   static_cast<int>(rng.uniform_int(
                       static_cast<std::uint32_t>(cfg.identities - 1)))) %
                  cfg.identities;
      rec.occluder.texture_seed =
          static_cast<std::uint32_t>(cfg.id_seed_base + other);
    } else {
      rec.occluder.texture_seed = rng.next_u32();
    }
    if (!cfg.region.empty()) {
      rec.scale_s = 1.0;
      PixelBox target = region_box(cfg.region, cfg.image_w, cfg.image_h);
      auto [occ_img, box] = apply_occlusion_at(img, rec.occluder, target);
      img = std::move(occ_img);
      rec.box = box;
    } else {
      if (cfg.scale_policy == "fixed") {
        rec.scale_s = cfg.scale_s;
      } else {
        rec.scale_s = 1.0 + 0.5 * rng.uniform_int(9);  // 1.0:0.5:5.0
      }
      auto [occ_img, box] = apply_occlusion(img, rec.occluder, rec.scale_s, rng);
      img = std::move(occ_img);
      rec.box = box;
    }
  }
  rec.pattern_label = match_box_to_pattern(rec.box, cb, cfg.image_w, cfg.image_h);
  rec.occ_fraction = occluded_fraction(rec.box, cfg.image_w, cfg.image_h);
  return {rec, std::move(img)};
}

inline Image image_for_record(const SynthConfig& cfg, const PatternCodebook& cb,
                              std::uint64_t index) {
  return generate_record(cfg, cb, index).second;
}

inline DatasetManifest build_dataset(const SynthConfig& cfg) {
  cfg.validate();
  PatternCodebook cb = enumerate_patterns(cfg.k);
  DatasetManifest man;
  man.config = cfg;
  std::uint64_t total =
      std::uint64_t(cfg.identities) * std::uint64_t(cfg.samples_per_identity);
  man.records.reserve(total);
  for (std::uint64_t i = 0; i < total; ++i)
    man.records.push_back(generate_record(cfg, cb, i).first);
  return man;
}

// ---------------------------------------------------------------------------
// Manifest JSONL + flat key=value config files
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const SynthConfig& c) {
  nlohmann::json j;
  j["identities"] = c.identities;
  j["samples_per_identity"] = c.samples_per_identity;
  j["image_w"] = c.image_w;
  j["image_h"] = c.image_h;
  j["k"] = c.k;
  j["scale_policy"] = c.scale_policy;
  j["scale_s"] = c.scale_s;
  std::vector<std::string> fams;
  for (auto f : c.families) fams.push_back(to_string(f));
  j["families"] = fams;
  j["clean_fraction"] = c.clean_fraction;
  j["occluder_base_w"] = c.occluder_base_w;
  j["occluder_base_h"] = c.occluder_base_h;
  j["global_seed"] = c.global_seed;
  j["id_seed_base"] = c.id_seed_base;
  j["region"] = c.region;
  return j;
}

inline SynthConfig synth_config_from_json(const nlohmann::json& j) {
  SynthConfig c;
  c.identities = j.at("identities");
  c.samples_per_identity = j.at("samples_per_identity");
  c.image_w = j.at("image_w");
  c.image_h = j.at("image_h");
  c.k = j.at("k");
  c.scale_policy = j.at("scale_policy");
  c.scale_s = j.at("scale_s");
  for (const auto& f : j.at("families"))
    c.families.push_back(occluder_family_from_string(f));
  c.clean_fraction = j.at("clean_fraction");
  c.occluder_base_w = j.at("occluder_base_w");
  c.occluder_base_h = j.at("occluder_base_h");
  c.global_seed = j.at("global_seed");
  c.id_seed_base = j.at("id_seed_base");
  c.region = j.value("region", "");
  return c;
}

inline void write_manifest(const DatasetManifest& man, std::ostream& os) {
  nlohmann::json header;
  header["type"] = "header";
  header["version"] = 1;
  header["config"] = to_json(man.config);
  os << header.dump() << "\n";
  for (const auto& r : man.records) {
    nlohmann::json j;
    j["index"] = r.index;
    j["identity"] = r.identity;
    j["identity_seed"] = r.identity_seed;
    j["occluded"] = r.occluded;
    if (r.occluded) {
      j["occluder"] = {{"family", to_string(r.occluder.family)},
                       {"base_w", r.occluder.base_w},
                       {"base_h", r.occluder.base_h},
                       {"texture_seed", r.occluder.texture_seed}};
      j["scale_s"] = r.scale_s;
    }
    j["box"] = {r.box.x0, r.box.y0, r.box.x1, r.box.y1};
    j["pattern_label"] = r.pattern_label;
    j["occluded_fraction"] = r.occ_fraction;
    os << j.dump() << "\n";
  }
}

inline void write_manifest(const DatasetManifest& man, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  write_manifest(man, f);
}

inline DatasetManifest read_manifest(std::istream& is) {
  DatasetManifest man;
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("manifest: empty file");
  nlohmann::json header = nlohmann::json::parse(line);
  if (header.value("type", "") != "header")
    throw std::runtime_error("manifest: missing header line");
  man.config = synth_config_from_json(header.at("config"));
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    ManifestRecord r;
    r.index = j.at("index");
    r.identity = j.at("identity");
    r.identity_seed = j.at("identity_seed");
    r.occluded = j.at("occluded");
    if (r.occluded) {
      r.occluder.family = occluder_family_from_string(j.at("occluder").at("family"));
      r.occluder.base_w = j.at("occluder").at("base_w");
      r.occluder.base_h = j.at("occluder").at("base_h");
      r.occluder.texture_seed = j.at("occluder").at("texture_seed");
      r.scale_s = j.at("scale_s");
    }
    auto b = j.at("box");
    r.box = PixelBox{b[0], b[1], b[2], b[3]};
    r.pattern_label = j.at("pattern_label");
    r.occ_fraction = j.at("occluded_fraction");
    man.records.push_back(r);
  }
  return man;
}

inline DatasetManifest read_manifest(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  return read_manifest(f);
}

// flat key=value files; '#' starts a comment
inline std::map<std::string, std::string> parse_kv_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(f, line)) {
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      auto b = s.find_first_not_of(" \t\r");
      auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    std::string key = trim(line.substr(0, eq));
    std::string val = trim(line.substr(eq + 1));
    if (!key.empty()) kv[key] = val;
  }
  return kv;
}

inline SynthConfig synth_config_from_kv(
    const std::map<std::string, std::string>& kv) {
  SynthConfig c;
  auto geti = [&](const char* key, int& out) {
    if (auto it = kv.find(key); it != kv.end()) out = std::stoi(it->second);
  };
  auto getd = [&](const char* key, double& out) {
    if (auto it = kv.find(key); it != kv.end()) out = std::stod(it->second);
  };
  auto getu = [&](const char* key, std::uint64_t& out) {
    if (auto it = kv.find(key); it != kv.end()) out = std::stoull(it->second);
  };
  geti("identities", c.identities);
  geti("samples_per_identity", c.samples_per_identity);
  geti("image_w", c.image_w);
  geti("image_h", c.image_h);
  geti("k", c.k);
  if (auto it = kv.find("scale_policy"); it != kv.end()) c.scale_policy = it->second;
  getd("scale_s", c.scale_s);
  getd("clean_fraction", c.clean_fraction);
  geti("occluder_base_w", c.occluder_base_w);
  geti("occluder_base_h", c.occluder_base_h);
  getu("global_seed", c.global_seed);
  getu("id_seed_base", c.id_seed_base);
  if (auto it = kv.find("region"); it != kv.end()) c.region = it->second;
  if (auto it = kv.find("occluders"); it != kv.end() && it->second != "all") {
    std::stringstream ss(it->second);
    std::string tok;
    while (std::getline(ss, tok, ','))
      if (!tok.empty()) c.families.push_back(occluder_family_from_string(tok));
  }
  c.validate();
  return c;
}

}  // namespace from
