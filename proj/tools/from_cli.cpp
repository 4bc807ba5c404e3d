#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "from/checkpoint.hpp"
#include "from/eval.hpp"
#include "from/network.hpp"
#include "from/patterns.hpp"
#include "from/png_io.hpp"
#include "from/synth.hpp"
#include "from/train.hpp"

#include "CLI11.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using from::nn::Tensor;

namespace {

std::vector<double> parse_far_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ','))
    if (!tok.empty()) out.push_back(std::stod(tok));
  return out;
}

from::FromNet<float> net_from_checkpoint(const from::Checkpoint<float>& ckpt) {
  from::NetworkConfig nc =
      from::network_config_from_json(ckpt.meta.at("config"));
  bool has_decoder = ckpt.meta.value("has_decoder", true);
  from::FromNet<float> net(nc, has_decoder);
  auto params = net.params();
  from::restore_params(ckpt, params, true);
  return net;
}

int cmd_patterns(int k, const std::string& dump) {
  auto cb = from::enumerate_patterns(k);
  std::cout << "k=" << k << " patterns=" << cb.patterns.size() << "\n";
  auto sm = from::size_matrix(k);
  std::cout << "size matrix (rows m=1.." << k << ", cols n=1.." << k << "):\n";
  for (const auto& row : sm) {
    for (int v : row) std::cout << v << " ";
    std::cout << "\n";
  }
  if (!dump.empty()) {
    std::ofstream f(dump);
    if (!f) throw std::runtime_error("cannot open " + dump);
    for (std::size_t i = 0; i < cb.patterns.size(); ++i) {
      const auto& p = cb.patterns[i];
      nlohmann::json j{{"label", i}};
      if (p.kind == from::Pattern::Kind::clean) {
        j["kind"] = "clean";
      } else {
        j["kind"] = "rect";
        j["row"] = p.row;
        j["col"] = p.col;
        j["m"] = p.m;
        j["n"] = p.n;
      }
      f << j.dump() << "\n";
    }
    std::cout << "wrote " << cb.patterns.size() << " patterns to " << dump << "\n";
  }
  return 0;
}

int cmd_synth(const std::string& config, const std::string& out,
              const std::string& export_dir) {
  auto cfg = from::synth_config_from_kv(from::parse_kv_file(config));
  cfg.validate();
  auto man = from::build_dataset(cfg);
  from::write_manifest(man, out);
  std::cout << "wrote " << man.records.size() << " records to " << out << "\n";
  if (!export_dir.empty()) {
    fs::create_directories(export_dir);
    auto cb = from::enumerate_patterns(cfg.k);
    for (const auto& r : man.records) {
      auto img = from::image_for_record(cfg, cb, r.index);
      char name[64];
      std::snprintf(name, sizeof(name), "id%03d_s%05llu.png", r.identity,
                    static_cast<unsigned long long>(r.index));
      from::png::write_gray8((fs::path(export_dir) / name).string(), img);
    }
    std::cout << "exported " << man.records.size() << " images to "
              << export_dir << "\n";
  }
  return 0;
}

int run_training(from::TrainConfig cfg, const std::string& init,
                 const std::string& resume, const std::string& out) {
  const from::LoadedSet* occ_ptr = nullptr;
  const from::LoadedSet* clean_ptr = nullptr;
  from::LoadedSet occ, clean;
  if (!cfg.occ_manifest.empty()) {
    occ = from::LoadedSet::load(cfg.occ_manifest);
    occ_ptr = &occ;
  }
  if (!cfg.clean_manifest.empty()) {
    clean = from::LoadedSet::load(cfg.clean_manifest);
    clean_ptr = &clean;
  }
  if (!occ_ptr && !clean_ptr)
    throw from::ConfigError("config must name clean_manifest or occ_manifest");

  from::Trainer<float> tr(cfg, occ_ptr, clean_ptr);
  if (!resume.empty()) {
    tr.restore(from::load_checkpoint<float>(resume));
    std::cout << "resumed from " << resume << " at epoch " << tr.epochs_done
              << "\n";
  } else {
    tr.init_params();
    if (!init.empty()) {
      tr.load_pretrained(from::load_checkpoint<float>(init));
      std::cout << "initialized shared layers from " << init << "\n";
    }
  }

  std::ofstream log;
  std::ostream* logp = nullptr;
  if (!cfg.log_path.empty()) {
    log.open(cfg.log_path, resume.empty() ? std::ios::out : std::ios::app);
    if (!log) throw std::runtime_error("cannot open log " + cfg.log_path);
    logp = &log;
  }
  for (int e = tr.epochs_done + 1; e <= cfg.epochs; ++e) {
    auto es = tr.run_epoch(e);
    tr.log_epoch(logp, es);
    std::cout << "epoch " << es.epoch << " lr=" << es.lr
              << " margin=" << es.l_margin << " pred=" << es.l_pred
              << " pattern_acc=" << es.pattern_acc << "\n";
    from::save_checkpoint(out, tr.checkpoint());
  }
  std::cout << "saved " << out << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& pairs_path,
             const std::string& far_list, const std::string& plot_dir,
             double binarize, bool sweep, const std::string& report_path) {
  auto ckpt = from::load_checkpoint<float>(ckpt_path);
  auto net = net_from_checkpoint(ckpt);
  auto pf = from::read_pairs(pairs_path);
  auto set = from::LoadedSet::load(pf.manifest);
  auto fars = parse_far_list(far_list);

  auto report = from::evaluate_pairs(net, set, pf.pairs, fars, binarize);
  report.config_echo = ckpt.meta;
  std::ostringstream notes;
  notes << "dev=even pair indices, test=odd; pairs occluded per manifest "
        << pf.manifest;
  if (binarize > 0.0) notes << "; mask binarized at t=" << binarize;
  report.notes = notes.str();

  nlohmann::json out = report.to_json();
  if (sweep && net.has_decoder) {
    auto& sw = out["binarize_sweep"] = nlohmann::json::array();
    for (double t : {0.3, 0.4, 0.5, 0.6}) {
      auto r = from::evaluate_pairs(net, set, pf.pairs, {}, t);
      sw.push_back({{"t", t}, {"accuracy", r.verification.accuracy}});
    }
    sw.push_back({{"t", 0.0}, {"accuracy", report.verification.accuracy},
                  {"soft", true}});
  }
  std::cout << out.dump(2) << "\n";
  if (!report_path.empty()) {
    std::ofstream f(report_path);
    f << out.dump(2) << "\n";
    std::cout << "wrote report " << report_path << "\n";
  }
  if (!plot_dir.empty()) {
    fs::create_directories(plot_dir);
    auto embs = from::extract_embeddings(net, set, 64, binarize);
    auto scores = from::pair_scores(embs, pf.pairs);
    std::vector<double> pos, neg;
    for (std::size_t i = 0; i < scores.size(); ++i)
      (pf.pairs[i].same ? pos : neg).push_back(scores[i]);
    from::write_score_histogram_svg(
        (fs::path(plot_dir) / "score_distribution.svg").string(), pos, neg);
    if (!report.tar_at_far.empty())
      from::write_tar_far_svg((fs::path(plot_dir) / "tar_far.svg").string(),
                              report.tar_at_far);
    std::cout << "wrote plots to " << plot_dir << "\n";
  }
  return 0;
}

int cmd_predict_pattern(const std::string& ckpt_path,
                        const std::string& image_path) {
  auto ckpt = from::load_checkpoint<float>(ckpt_path);
  auto net = net_from_checkpoint(ckpt);
  if (!net.has_decoder)
    throw std::runtime_error("checkpoint has no pattern predictor");
  auto img = from::png::read(image_path);
  if (img.width != net.cfg.image_w || img.height != net.cfg.image_h)
    throw std::runtime_error("image size mismatch: expected " +
                             std::to_string(net.cfg.image_w) + "x" +
                             std::to_string(net.cfg.image_h));
  Tensor<float> x({1, 1, img.height, img.width});
  std::copy(img.pixels.begin(), img.pixels.end(), x.data.begin());
  auto out = net.forward(x, false);
  if (net.cfg.pattern_head == from::PatternHead::regress) {
    std::cout << "predicted box (normalized): " << out.pattern.at2(0, 0) << " "
              << out.pattern.at2(0, 1) << " " << out.pattern.at2(0, 2) << " "
              << out.pattern.at2(0, 3) << "\n";
    return 0;
  }
  int arg = 0;
  for (int j = 1; j < out.pattern.dim(1); ++j)
    if (out.pattern.at2(0, j) > out.pattern.at2(0, arg)) arg = j;
  auto cb = from::enumerate_patterns(net.cfg.k);
  const auto& p = cb.patterns[static_cast<std::size_t>(arg)];
  std::cout << "predicted pattern label " << arg;
  if (p.kind == from::Pattern::Kind::clean) {
    std::cout << " (clean)\n";
  } else {
    std::cout << " (rect row=" << p.row << " col=" << p.col << " m=" << p.m
              << " n=" << p.n << ")\n";
  }
  auto grid = from::pattern_to_block_mask(p, net.cfg.k);
  for (const auto& row : grid) {
    for (auto v : row) std::cout << (v ? '#' : '.');
    std::cout << "\n";
  }
  return 0;
}

int cmd_make_pairs(const std::string& manifest, const std::string& out,
                   int count, std::uint64_t seed) {
  auto man = from::read_manifest(manifest);
  from::Rng rng = from::Rng::stream(seed, 0);
  from::PairFile pf;
  pf.manifest = manifest;
  pf.pairs = from::make_verification_pairs(man.records, count, rng);
  from::write_pairs(out, pf);
  std::cout << "wrote " << pf.pairs.size() << " pairs to " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"occlusion-robust face embedding toolkit"};
  app.require_subcommand(1);

  int k = 5;
  std::string dump;
  auto* sp = app.add_subcommand("patterns", "enumerate the pattern codebook");
  sp->add_option("--k", k, "grid size");
  sp->add_option("--dump", dump, "write codebook JSONL here");

  std::string config, out, export_dir;
  auto* ss = app.add_subcommand("synth", "generate a dataset manifest");
  ss->add_option("--config", config, "key=value config file")->required();
  ss->add_option("--out", out, "manifest output path")->required();
  ss->add_option("--export-images", export_dir, "also write PNGs here");

  std::string t_config, t_out = "model.ckpt", t_init, t_resume;
  auto* spre = app.add_subcommand("pretrain", "train the trunk on clean data");
  spre->add_option("--config", t_config, "key=value config file")->required();
  spre->add_option("--out", t_out, "checkpoint output path");
  spre->add_option("--resume", t_resume, "resume from this checkpoint");

  std::string f_config, f_out = "model.ckpt", f_init, f_resume;
  auto* sfin = app.add_subcommand("finetune", "train the full masking graph");
  sfin->add_option("--config", f_config, "key=value config file")->required();
  sfin->add_option("--init", f_init, "pretrained checkpoint for shared layers");
  sfin->add_option("--out", f_out, "checkpoint output path");
  sfin->add_option("--resume", f_resume, "resume from this checkpoint");

  std::string e_ckpt, e_pairs, e_far = "1e-2,1e-3", e_plot, e_report;
  double e_binarize = 0.0;
  bool e_sweep = false;
  auto* sev = app.add_subcommand("eval", "verification / TAR@FAR evaluation");
  sev->add_option("--ckpt", e_ckpt, "model checkpoint")->required();
  sev->add_option("--pairs", e_pairs, "pairs JSONL")->required();
  sev->add_option("--far", e_far, "comma-separated FAR targets");
  sev->add_option("--plot", e_plot, "write SVG plots to this directory");
  sev->add_option("--binarize", e_binarize, "binarize the mask at this t");
  sev->add_flag("--binarize-sweep", e_sweep, "sweep t in {0.3,0.4,0.5,0.6}");
  sev->add_option("--out", e_report, "write the JSON report here");

  std::string p_ckpt, p_image;
  auto* spp = app.add_subcommand("predict-pattern",
                                 "predict the occlusion pattern of one image");
  spp->add_option("--ckpt", p_ckpt, "model checkpoint")->required();
  spp->add_option("--image", p_image, "grayscale PNG")->required();

  std::string mp_manifest, mp_out;
  int mp_count = 600;
  std::uint64_t mp_seed = 7;
  auto* smp = app.add_subcommand("make-pairs", "draw balanced verification pairs");
  smp->add_option("--manifest", mp_manifest, "dataset manifest")->required();
  smp->add_option("--out", mp_out, "pairs output path")->required();
  smp->add_option("--count", mp_count, "total pair count (even)");
  smp->add_option("--seed", mp_seed, "pair sampling seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (sp->parsed()) return cmd_patterns(k, dump);
    if (ss->parsed()) return cmd_synth(config, out, export_dir);
    if (spre->parsed() || sfin->parsed()) {
      bool fin = sfin->parsed();
      auto cfg = from::train_config_from_kv(
          from::parse_kv_file(fin ? f_config : t_config));
      cfg.stage = fin ? "finetune" : "pretrain";
      return run_training(cfg, fin ? f_init : std::string(),
                          fin ? f_resume : t_resume, fin ? f_out : t_out);
    }
    if (sev->parsed())
      return cmd_eval(e_ckpt, e_pairs, e_far, e_plot, e_binarize, e_sweep,
                      e_report);
    if (spp->parsed()) return cmd_predict_pattern(p_ckpt, p_image);
    if (smp->parsed()) return cmd_make_pairs(mp_manifest, mp_out, mp_count,
                                             mp_seed);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
