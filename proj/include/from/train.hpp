#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "from/checkpoint.hpp"
#include "from/losses.hpp"
#include "from/network.hpp"
#include "from/synth.hpp"

namespace from {

struct TrainConfig {
  std::string stage = "pretrain";  // pretrain | finetune
  std::string clean_manifest;
  std::string occ_manifest;
  int mix_occ = 2;  // occluded:clean ratio in finetune batches
  int mix_clean = 1;
  int batch_size = 32;
  int epochs = 15;
  double lr = 0.1;
  std::vector<int> decay_epochs;  // 1-based epochs where lr drops
  double decay_factor = 10.0;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double lambda = 1.0;
  double grad_clip = 0.0;  // 0 = off
  std::uint64_t seed = 1;
  std::string baseline_mode = "from";  // none|baseline|baseline_aug|baseline_md|from
  MarginSpec margin = MarginSpec::cosface(0.35, 30.0);
  NetworkConfig net;
  std::string log_path;

  void validate() const {
    if (stage != "pretrain" && stage != "finetune")
      throw ConfigError("stage: must be pretrain or finetune");
    if (batch_size < 1) throw ConfigError("batch_size: must be >= 1");
    if (epochs < 1) throw ConfigError("epochs: must be >= 1");
    if (lr <= 0) throw ConfigError("lr: must be > 0");
    if (lambda < 0) throw ConfigError("lambda: must be >= 0");
    for (std::size_t i = 0; i < decay_epochs.size(); ++i) {
      if (decay_epochs[i] >= epochs + 1 ||
          (i > 0 && decay_epochs[i] <= decay_epochs[i - 1]))
        throw ConfigError(
            "decay_epochs: must be strictly increasing and < epochs");
    }
    static const char* modes[] = {"none", "baseline", "baseline_aug",
                                  "baseline_md", "from"};
    if (std::find_if(std::begin(modes), std::end(modes), [&](const char* m) {
          return baseline_mode == m;
        }) == std::end(modes))
      throw ConfigError("baseline_mode: unknown mode '" + baseline_mode + "'");
    if (stage == "finetune") {
      if (mix_occ < 1 || mix_clean < 0)
        throw ConfigError("mix_occ/mix_clean: invalid ratio");
      if (batch_size % (mix_occ + mix_clean) != 0)
        throw ConfigError("batch_size: not divisible by mix ratio total");
    }
    margin.validate();
  }

  double lr_at_epoch(int epoch) const {  // epoch is 1-based
    int drops = 0;
    for (int d : decay_epochs)
      if (d <= epoch) ++drops;
    return lr * std::pow(decay_factor, -drops);
  }

  bool wants_decoder() const {
    return baseline_mode == "baseline_md" || baseline_mode == "from" ||
           baseline_mode == "none";
  }
  double effective_lambda() const {
    return baseline_mode == "baseline_md" ? 0.0 : lambda;
  }
};

inline TrainConfig train_config_from_kv(
    const std::map<std::string, std::string>& kv) {
  TrainConfig c;
  auto geti = [&](const char* key, int& out) {
    if (auto it = kv.find(key); it != kv.end()) out = std::stoi(it->second);
  };
  auto getd = [&](const char* key, double& out) {
    if (auto it = kv.find(key); it != kv.end()) out = std::stod(it->second);
  };
  auto gets = [&](const char* key, std::string& out) {
    if (auto it = kv.find(key); it != kv.end()) out = it->second;
  };
  gets("stage", c.stage);
  gets("clean_manifest", c.clean_manifest);
  gets("occ_manifest", c.occ_manifest);
  geti("mix_occ", c.mix_occ);
  geti("mix_clean", c.mix_clean);
  geti("batch_size", c.batch_size);
  geti("epochs", c.epochs);
  getd("lr", c.lr);
  getd("decay_factor", c.decay_factor);
  getd("momentum", c.momentum);
  getd("weight_decay", c.weight_decay);
  getd("lambda", c.lambda);
  getd("grad_clip", c.grad_clip);
  if (auto it = kv.find("seed"); it != kv.end()) c.seed = std::stoull(it->second);
  gets("baseline_mode", c.baseline_mode);
  gets("log_path", c.log_path);
  if (auto it = kv.find("decay_epochs"); it != kv.end()) {
    std::stringstream ss(it->second);
    std::string tok;
    c.decay_epochs.clear();
    while (std::getline(ss, tok, ','))
      if (!tok.empty()) c.decay_epochs.push_back(std::stoi(tok));
  }
  std::string preset;
  gets("loss.preset", preset);
  if (!preset.empty()) c.margin = MarginSpec::preset(preset, c.margin.s);
  getd("loss.m1", c.margin.m1);
  getd("loss.m2", c.margin.m2);
  getd("loss.m3", c.margin.m3);
  getd("loss.s", c.margin.s);
  std::string ph;
  gets("loss.pattern_head", ph);
  if (!ph.empty()) c.net.pattern_head = pattern_head_from_string(ph);
  std::string mm;
  gets("mask_mode", mm);
  if (!mm.empty()) c.net.mask_mode = mask_mode_from_string(mm);
  geti("embed_dim", c.net.embed_dim);
  geti("pyramid_ch", c.net.pyramid_ch);
  getd("dropout", c.net.dropout);
  return c;
}

// ---------------------------------------------------------------------------
// In-memory dataset: manifest plus regenerated images
// ---------------------------------------------------------------------------

struct LoadedSet {
  SynthConfig cfg;
  std::vector<ManifestRecord> records;
  std::vector<Image> images;

  static LoadedSet from_manifest(const DatasetManifest& man) {
    LoadedSet set;
    set.cfg = man.config;
    set.records = man.records;
    PatternCodebook cb = enumerate_patterns(man.config.k);
    set.images.reserve(man.records.size());
    for (const auto& r : man.records)
      set.images.push_back(image_for_record(man.config, cb, r.index));
    return set;
  }

  static LoadedSet load(const std::string& path) {
    return from_manifest(read_manifest(path));
  }

  int num_classes() const {
    int m = 0;
    for (const auto& r : records) m = std::max(m, r.identity + 1);
    return m;
  }
};

// ---------------------------------------------------------------------------
// Deterministic batch composition
// ---------------------------------------------------------------------------

struct BatchItem {
  bool from_occluded_pool = false;
  std::size_t record = 0;
};

// One mini-batch of mixed occluded and clean indices, mix_occ:mix_clean.
inline std::vector<BatchItem> make_batch(std::size_t occ_pool,
                                         std::size_t clean_pool, int mix_occ,
                                         int mix_clean, int batch_size,
                                         Rng& rng) {
  if (mix_occ < 0 || mix_clean < 0 || mix_occ + mix_clean == 0 ||
      batch_size % (mix_occ + mix_clean) != 0)
    throw ConfigError("mix ratio not expressible at this batch size");
  int unit = batch_size / (mix_occ + mix_clean);
  int n_occ = unit * mix_occ;
  int n_clean = unit * mix_clean;
  if ((n_occ > 0 && occ_pool == 0) || (n_clean > 0 && clean_pool == 0))
    throw ConfigError("batch requests samples from an empty pool");
  std::vector<BatchItem> batch;
  batch.reserve(batch_size);
  for (int i = 0; i < n_occ; ++i)
    batch.push_back({true, rng.uniform_int(static_cast<std::uint32_t>(occ_pool))});
  for (int i = 0; i < n_clean; ++i)
    batch.push_back(
        {false, rng.uniform_int(static_cast<std::uint32_t>(clean_pool))});
  return batch;
}

// ---------------------------------------------------------------------------
// SGD with momentum and weight decay
// ---------------------------------------------------------------------------

template <class T>
struct Sgd {
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::vector<nn::Tensor<T>> velocity;

  void step(std::vector<nn::ParamRef<T>>& params, double lr,
            double grad_clip = 0.0) {
    if (velocity.empty()) {
      for (auto& p : params)
        velocity.push_back(p.grad ? nn::Tensor<T>(p.value->shape)
                                  : nn::Tensor<T>());
    }
    double clip_scale = 1.0;
    if (grad_clip > 0.0) {
      double sq = 0.0;
      for (auto& p : params)
        if (p.grad)
          for (const T& g : p.grad->data) sq += double(g) * g;
      double norm = std::sqrt(sq);
      if (norm > grad_clip) clip_scale = grad_clip / norm;
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      if (!p.grad || !p.trainable) continue;
      auto& v = velocity[i];
      for (std::size_t j = 0; j < p.value->size(); ++j) {
        double g = double(p.grad->data[j]) * clip_scale +
                   weight_decay * double(p.value->data[j]);
        double vel = momentum * double(v.data[j]) + g;
        v.data[j] = static_cast<T>(vel);
        p.value->data[j] = static_cast<T>(double(p.value->data[j]) - lr * vel);
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Trainer: single thread owns the parameters; data order and dropout are
// driven by per-epoch RNG streams, so resuming at an epoch boundary is
// bit-exact.
// ---------------------------------------------------------------------------

struct EpochStats {
  int epoch = 0;
  double lr = 0.0;
  double l_margin = 0.0;
  double l_pred = 0.0;
  double pattern_acc = 0.0;
  int steps = 0;
};

template <class T = float>
class Trainer {
 public:
  TrainConfig cfg;
  FromNet<T> net;
  CosineHead<T> cos_head;
  Sgd<T> opt;
  const LoadedSet* occ_set = nullptr;    // primary pool
  const LoadedSet* clean_set = nullptr;  // secondary pool
  int classes = 0;
  int epochs_done = 0;
  PatternCodebook codebook;

  Trainer(TrainConfig config, const LoadedSet* occ, const LoadedSet* clean)
      : cfg(std::move(config)) {
    cfg.validate();
    occ_set = occ;
    clean_set = clean;
    const LoadedSet* any = occ_set ? occ_set : clean_set;
    cfg.net.image_h = any->cfg.image_h;
    cfg.net.image_w = any->cfg.image_w;
    cfg.net.k = any->cfg.k;
    codebook = enumerate_patterns(cfg.net.k);
    classes = 0;
    if (occ_set) classes = std::max(classes, occ_set->num_classes());
    if (clean_set) classes = std::max(classes, clean_set->num_classes());
    bool with_decoder = cfg.stage == "finetune" && cfg.wants_decoder();
    net = FromNet<T>(cfg.net, with_decoder);
    cos_head = CosineHead<T>(cfg.net.embed_dim, classes);
    opt.momentum = cfg.momentum;
    opt.weight_decay = cfg.weight_decay;
  }

  void init_params() {
    Rng rng(Rng::splitmix(cfg.seed ^ 0x1217f00du));
    net.init(rng);
    cos_head.init(rng);
  }

  void load_pretrained(const Checkpoint<T>& ckpt, bool strict_shared = true) {
    auto params = all_params();
    // shared trunk tensors restore by name; decoder/OPP stay freshly init'd
    int loaded = 0;
    for (auto& p : params) {
      const nn::Tensor<T>* src = ckpt.find(p.name);
      if (!src) continue;
      if (src->shape != p.value->shape)
        throw std::runtime_error("pretrained shape mismatch for " + p.name);
      *p.value = *src;
      ++loaded;
    }
    if (strict_shared && loaded == 0)
      throw std::runtime_error("pretrained checkpoint shares no tensors");
  }

  std::vector<nn::ParamRef<T>> all_params() {
    auto params = net.params();
    cos_head.collect("cos_head", params);
    return params;
  }

  struct Batch {
    nn::Tensor<T> images;
    std::vector<int> identity;
    std::vector<int> pattern;
    nn::Tensor<T> boxes;  // normalized corners for the regression head
  };

  Batch assemble(const std::vector<BatchItem>& items) {
    int B = static_cast<int>(items.size());
    int H = cfg.net.image_h, W = cfg.net.image_w;
    Batch b;
    b.images = nn::Tensor<T>({B, 1, H, W});
    b.boxes = nn::Tensor<T>({B, 4});
    for (int i = 0; i < B; ++i) {
      const LoadedSet& set = items[i].from_occluded_pool ? *occ_set : *clean_set;
      const Image& img = set.images[items[i].record];
      const ManifestRecord& rec = set.records[items[i].record];
      std::copy(img.pixels.begin(), img.pixels.end(),
                &b.images.at4(i, 0, 0, 0));
      b.identity.push_back(rec.identity);
      b.pattern.push_back(static_cast<int>(rec.pattern_label));
      b.boxes.at2(i, 0) = static_cast<T>(double(rec.box.x0) / W);
      b.boxes.at2(i, 1) = static_cast<T>(double(rec.box.y0) / H);
      b.boxes.at2(i, 2) = static_cast<T>(double(rec.box.x1) / W);
      b.boxes.at2(i, 3) = static_cast<T>(double(rec.box.y1) / H);
    }
    return b;
  }

  struct StepStats {
    double l_margin = 0, l_pred = 0, pattern_acc = 0;
  };

  StepStats train_step(const Batch& b, Rng* drop_rng, double lr) {
    auto params = all_params();
    for (auto& p : params)
      if (p.grad) p.grad->zero();

    auto out = net.forward(b.images, true, drop_rng);
    auto cos = cos_head.forward(out.embedding);
    nn::Tensor<T> dcos;
    StepStats st;
    st.l_margin = margin_loss(cos, b.identity, cfg.margin, &dcos);
    auto demb = cos_head.backward(dcos);

    nn::Tensor<T> dpattern;
    double lambda = cfg.effective_lambda();
    bool supervise_pattern = net.has_decoder && lambda > 0.0;
    if (net.has_decoder) {
      if (cfg.net.pattern_head == PatternHead::classify) {
        nn::Tensor<T> dp;
        st.l_pred = pattern_ce_loss(out.pattern, b.pattern,
                                    supervise_pattern ? &dp : nullptr);
        int hits = 0;
        for (int i = 0; i < out.pattern.dim(0); ++i) {
          int arg = 0;
          for (int j = 1; j < out.pattern.dim(1); ++j)
            if (out.pattern.at2(i, j) > out.pattern.at2(i, arg)) arg = j;
          if (arg == b.pattern[i]) ++hits;
        }
        st.pattern_acc = double(hits) / out.pattern.dim(0);
        if (supervise_pattern) dpattern = dp;
      } else {
        nn::Tensor<T> dp;
        st.l_pred = pattern_reg_loss(out.pattern, b.boxes,
                                     supervise_pattern ? &dp : nullptr);
        if (supervise_pattern) dpattern = dp;
      }
      if (supervise_pattern)
        for (auto& g : dpattern.data) g = static_cast<T>(double(g) * lambda);
    }

    net.backward(demb, dpattern);
    opt.step(params, lr, cfg.grad_clip);
    return st;
  }

  EpochStats run_epoch(int epoch) {  // 1-based
    double lr = cfg.lr_at_epoch(epoch);
    Rng data_rng = Rng::stream(cfg.seed ^ 0xda7aULL, epoch);
    Rng drop_rng = Rng::stream(cfg.seed ^ 0xd120ULL, epoch);

    bool mixed = cfg.stage == "finetune" && clean_set != nullptr &&
                 cfg.mix_clean > 0;
    int mo = mixed ? cfg.mix_occ : 1;
    int mc = mixed ? cfg.mix_clean : 0;
    const LoadedSet* primary = occ_set ? occ_set : clean_set;
    std::size_t occ_pool = occ_set ? occ_set->records.size() : 0;
    std::size_t clean_pool = clean_set ? clean_set->records.size() : 0;
    if (!occ_set) {  // pretrain draws everything from the clean pool
      occ_pool = clean_pool;
    }
    int steps = static_cast<int>(primary->records.size()) / cfg.batch_size;
    steps = std::max(steps, 1);

    EpochStats es;
    es.epoch = epoch;
    es.lr = lr;
    for (int s = 0; s < steps; ++s) {
      auto items = make_batch(occ_pool, clean_pool, mo, mc, cfg.batch_size,
                              data_rng);
      if (!occ_set)
        for (auto& it : items) it.from_occluded_pool = false;
      auto st = train_step(assemble(items), &drop_rng, lr);
      es.l_margin += st.l_margin;
      es.l_pred += st.l_pred;
      es.pattern_acc += st.pattern_acc;
      ++es.steps;
    }
    es.l_margin /= es.steps;
    es.l_pred /= es.steps;
    es.pattern_acc /= es.steps;
    epochs_done = epoch;
    return es;
  }

  void log_epoch(std::ostream* log, const EpochStats& es) {
    if (!log) return;
    nlohmann::json j{{"epoch", es.epoch},     {"lr", es.lr},
                     {"l_margin", es.l_margin}, {"l_pred", es.l_pred},
                     {"pattern_acc", es.pattern_acc}, {"steps", es.steps}};
    (*log) << j.dump() << "\n";
  }

  Checkpoint<T> checkpoint() {
    Checkpoint<T> ckpt;
    ckpt.meta["config"] = to_json(cfg.net);
    ckpt.meta["epoch"] = epochs_done;
    ckpt.meta["stage"] = cfg.stage;
    ckpt.meta["baseline_mode"] = cfg.baseline_mode;
    ckpt.meta["classes"] = classes;
    ckpt.meta["has_decoder"] = net.has_decoder;
    for (auto& p : all_params()) ckpt.tensors.emplace_back(p.name, *p.value);
    auto params = all_params();
    if (!opt.velocity.empty())
      for (std::size_t i = 0; i < params.size(); ++i)
        if (params[i].grad)
          ckpt.tensors.emplace_back("opt/" + params[i].name, opt.velocity[i]);
    return ckpt;
  }

  void restore(const Checkpoint<T>& ckpt) {
    auto params = all_params();
    restore_params(ckpt, params, true);
    opt.velocity.clear();
    bool any_vel = false;
    for (const auto& [name, t] : ckpt.tensors)
      if (name.rfind("opt/", 0) == 0) any_vel = true;
    if (any_vel) {
      for (auto& p : params) {
        if (!p.grad) {
          opt.velocity.push_back(nn::Tensor<T>());
          continue;
        }
        const nn::Tensor<T>* v = ckpt.find("opt/" + p.name);
        if (!v) throw std::runtime_error("checkpoint: missing velocity for " + p.name);
        opt.velocity.push_back(*v);
      }
    }
    epochs_done = ckpt.meta.at("epoch");
  }

  // Train epochs [epochs_done+1 .. cfg.epochs].
  std::vector<EpochStats> run(std::ostream* log = nullptr) {
    std::vector<EpochStats> all;
    for (int e = epochs_done + 1; e <= cfg.epochs; ++e) {
      auto es = run_epoch(e);
      log_epoch(log, es);
      all.push_back(es);
    }
    return all;
  }
};

// Embeddings for a whole dataset with a frozen model (eval mode).
template <class T>
std::vector<std::vector<T>> extract_embeddings(FromNet<T>& net,
                                               const LoadedSet& set,
                                               int batch = 64,
                                               double binarize_t = 0.0) {
  int H = net.cfg.image_h, W = net.cfg.image_w;
  std::vector<std::vector<T>> out;
  out.reserve(set.records.size());
  for (std::size_t start = 0; start < set.records.size(); start += batch) {
    std::size_t end = std::min(set.records.size(), start + batch);
    int B = static_cast<int>(end - start);
    nn::Tensor<T> images({B, 1, H, W});
    for (int i = 0; i < B; ++i)
      std::copy(set.images[start + i].pixels.begin(),
                set.images[start + i].pixels.end(), &images.at4(i, 0, 0, 0));
    ForwardOutput<T> fo;
    if (binarize_t > 0.0 && net.has_decoder) {
      fo = net.forward(images, false);
      auto hard = binarize_mask(fo.mask, binarize_t);
      fo = net.forward(images, false, nullptr, &hard);
    } else {
      fo = net.forward(images, false);
    }
    for (int i = 0; i < B; ++i) {
      std::vector<T> emb(net.cfg.embed_dim);
      for (int j = 0; j < net.cfg.embed_dim; ++j) emb[j] = fo.embedding.at2(i, j);
      out.push_back(std::move(emb));
    }
  }
  return out;
}

// Held-out pattern accuracy of the OPP head (classification mode).
template <class T>
double pattern_accuracy(FromNet<T>& net, const LoadedSet& set, int batch = 64) {
  if (!net.has_decoder || net.cfg.pattern_head != PatternHead::classify)
    throw std::invalid_argument("pattern_accuracy needs a classification OPP");
  int H = net.cfg.image_h, W = net.cfg.image_w;
  int hits = 0;
  for (std::size_t start = 0; start < set.records.size(); start += batch) {
    std::size_t end = std::min(set.records.size(), start + batch);
    int B = static_cast<int>(end - start);
    nn::Tensor<T> images({B, 1, H, W});
    for (int i = 0; i < B; ++i)
      std::copy(set.images[start + i].pixels.begin(),
                set.images[start + i].pixels.end(), &images.at4(i, 0, 0, 0));
    auto fo = net.forward(images, false);
    for (int i = 0; i < B; ++i) {
      int arg = 0;
      for (int j = 1; j < fo.pattern.dim(1); ++j)
        if (fo.pattern.at2(i, j) > fo.pattern.at2(i, arg)) arg = j;
      if (arg == static_cast<int>(set.records[start + i].pattern_label)) ++hits;
    }
  }
  return double(hits) / set.records.size();
}

}  // namespace from
