#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "from/synth.hpp"
#include "from/train.hpp"

#include "json.hpp"

namespace from {

struct ProtocolError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <class T>
double cosine_similarity(const std::vector<T>& a, const std::vector<T>& b) {
  if (a.size() != b.size())
    throw std::invalid_argument("cosine_similarity: dimension mismatch");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += double(a[i]) * b[i];
    na += double(a[i]) * a[i];
    nb += double(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0)
    throw std::invalid_argument("cosine_similarity: zero vector");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

// ---------------------------------------------------------------------------
// Verification: threshold chosen on the dev half (even pair indices),
// accuracy reported on the test half (odd indices).
// ---------------------------------------------------------------------------

struct VerificationResult {
  double accuracy = 0.0;
  double threshold = 0.0;
  int tp = 0, tn = 0, fp = 0, fn = 0;
  int dev_pairs = 0, test_pairs = 0;

  double recomputed_accuracy() const {
    return double(tp + tn) / double(tp + tn + fp + fn);
  }
};

namespace eval_detail {

// accept iff score >= threshold
inline double split_accuracy(const std::vector<double>& scores,
                             const std::vector<int>& same, double t, int parity,
                             int* tp = nullptr, int* tn = nullptr,
                             int* fp = nullptr, int* fn = nullptr) {
  int TP = 0, TN = 0, FP = 0, FN = 0;
  for (std::size_t i = parity; i < scores.size(); i += 2) {
    bool accept = scores[i] >= t;
    if (same[i] && accept) ++TP;
    else if (same[i]) ++FN;
    else if (accept) ++FP;
    else ++TN;
  }
  if (tp) { *tp = TP; *tn = TN; *fp = FP; *fn = FN; }
  int n = TP + TN + FP + FN;
  return n ? double(TP + TN) / n : 0.0;
}

}  // namespace eval_detail

inline VerificationResult verification_accuracy(
    const std::vector<double>& scores, const std::vector<int>& same) {
  if (scores.size() != same.size())
    throw std::invalid_argument("verification: scores/labels size mismatch");
  if (scores.size() < 2)
    throw ProtocolError("verification: need at least 2 pairs");
  bool has_pos = false, has_neg = false;
  for (int s : same) (s ? has_pos : has_neg) = true;
  if (!has_pos || !has_neg)
    throw ProtocolError("verification: pair set has only one label");

  VerificationResult r;
  // candidate thresholds: every dev score, plus one above the max so
  // "reject everything" is reachable
  std::vector<double> cands;
  for (std::size_t i = 0; i < scores.size(); i += 2) cands.push_back(scores[i]);
  double hi = *std::max_element(cands.begin(), cands.end());
  cands.push_back(std::nextafter(hi, 2.0));
  std::sort(cands.begin(), cands.end());
  double best_acc = -1.0, best_t = 0.0;
  for (double t : cands) {
    double acc = eval_detail::split_accuracy(scores, same, t, 0);
    if (acc > best_acc) {  // ties keep the lowest threshold
      best_acc = acc;
      best_t = t;
    }
  }
  r.threshold = best_t;
  r.dev_pairs = static_cast<int>((scores.size() + 1) / 2);
  r.test_pairs = static_cast<int>(scores.size() / 2);
  r.accuracy = eval_detail::split_accuracy(scores, same, best_t, 1, &r.tp,
                                           &r.tn, &r.fp, &r.fn);
  return r;
}

// ---------------------------------------------------------------------------
// TAR at a FAR operating point. The threshold admits at most
// floor(far * #negatives) false accepts, so the realized FAR never
// exceeds the target.
// ---------------------------------------------------------------------------

struct TarResult {
  double tar = 0.0;
  double threshold = 0.0;
  double realized_far = 0.0;
  int tp = 0, fn = 0;
};

inline TarResult tar_at_far(const std::vector<double>& pos_scores,
                            const std::vector<double>& neg_scores,
                            double far_target) {
  if (far_target < 0.0 || far_target > 1.0)
    throw std::invalid_argument("tar_at_far: far_target must be in [0,1]");
  if (pos_scores.empty())
    throw ProtocolError("tar_at_far: no positive pairs");
  std::size_t n_neg = neg_scores.size();
  std::size_t k_max = static_cast<std::size_t>(
      std::floor(far_target * double(n_neg)));
  if (k_max < 1 && far_target < 1.0) {
    std::size_t needed = static_cast<std::size_t>(
        std::ceil(1.0 / std::max(far_target, 1e-300)));
    throw ProtocolError("tar_at_far: need at least " + std::to_string(needed) +
                        " negative pairs for far_target " +
                        std::to_string(far_target));
  }

  TarResult r;
  if (k_max >= n_neg) {  // accept everything
    r.threshold = -1.0;
    r.tp = static_cast<int>(pos_scores.size());
    r.tar = 1.0;
    r.realized_far = 1.0;
    return r;
  }
  std::vector<double> negs = neg_scores;
  std::sort(negs.begin(), negs.end(), std::greater<double>());
  r.threshold = negs[k_max];  // accept iff score > threshold
  std::size_t false_accepts = 0;
  for (double s : negs)
    if (s > r.threshold) ++false_accepts;
  r.realized_far = double(false_accepts) / double(n_neg);
  for (double s : pos_scores)
    (s > r.threshold ? r.tp : r.fn)++;
  r.tar = double(r.tp) / double(r.tp + r.fn);
  return r;
}

// ---------------------------------------------------------------------------
// Rank-1 identification
// ---------------------------------------------------------------------------

template <class T>
double rank1_identification(const std::vector<std::vector<T>>& gallery,
                            const std::vector<int>& gallery_ids,
                            const std::vector<std::vector<T>>& probes,
                            const std::vector<int>& probe_ids) {
  if (gallery.size() != gallery_ids.size() || probes.size() != probe_ids.size())
    throw std::invalid_argument("rank1: embeddings/ids size mismatch");
  if (probes.empty()) throw ProtocolError("rank1: empty probe set");
  std::set<int> gal_ids(gallery_ids.begin(), gallery_ids.end());
  for (int id : probe_ids)
    if (!gal_ids.count(id))
      throw ProtocolError("rank1: probe identity " + std::to_string(id) +
                          " missing from gallery");
  int hits = 0;
  for (std::size_t p = 0; p < probes.size(); ++p) {
    double best = -2.0;
    std::size_t arg = 0;
    for (std::size_t g = 0; g < gallery.size(); ++g) {
      double s = cosine_similarity(probes[p], gallery[g]);
      if (s > best) {
        best = s;
        arg = g;
      }
    }
    if (gallery_ids[arg] == probe_ids[p]) ++hits;
  }
  return double(hits) / double(probes.size());
}

// ---------------------------------------------------------------------------
// Pair files (JSON lines; header carries the manifest path)
// ---------------------------------------------------------------------------

struct VerificationPair {
  std::size_t a = 0, b = 0;
  bool same = false;
};

struct PairFile {
  std::string manifest;
  std::vector<VerificationPair> pairs;
};

// Balanced pair set over a manifest's records: n/2 positive (same identity,
// distinct records), n/2 negative, deterministically drawn.
inline std::vector<VerificationPair> make_verification_pairs(
    const std::vector<ManifestRecord>& records, int n_pairs, Rng& rng) {
  if (n_pairs < 2 || n_pairs % 2 != 0)
    throw std::invalid_argument("make_verification_pairs: n_pairs must be even and >= 2");
  std::map<int, std::vector<std::size_t>> by_id;
  for (std::size_t i = 0; i < records.size(); ++i)
    by_id[records[i].identity].push_back(i);
  std::vector<int> ids;
  for (auto& [id, v] : by_id)
    if (v.size() >= 2) ids.push_back(id);
  if (ids.empty() || by_id.size() < 2)
    throw std::invalid_argument(
        "make_verification_pairs: need >= 2 identities and one with >= 2 samples");
  std::vector<int> all_ids;
  for (auto& [id, v] : by_id) all_ids.push_back(id);

  std::vector<VerificationPair> out;
  for (int i = 0; i < n_pairs / 2; ++i) {  // positives
    int id = ids[rng.uniform_int(static_cast<std::uint32_t>(ids.size()))];
    auto& v = by_id[id];
    std::uint32_t a = rng.uniform_int(static_cast<std::uint32_t>(v.size()));
    std::uint32_t b = rng.uniform_int(static_cast<std::uint32_t>(v.size() - 1));
    if (b >= a) ++b;
    out.push_back({v[a], v[b], true});
  }
  for (int i = 0; i < n_pairs / 2; ++i) {  // negatives
    std::uint32_t pa = rng.uniform_int(static_cast<std::uint32_t>(all_ids.size()));
    std::uint32_t pb = rng.uniform_int(static_cast<std::uint32_t>(all_ids.size() - 1));
    if (pb >= pa) ++pb;
    int ia = all_ids[pa];
    int ib = all_ids[pb];
    auto& va = by_id[ia];
    auto& vb = by_id[ib];
    out.push_back({va[rng.uniform_int(static_cast<std::uint32_t>(va.size()))],
                   vb[rng.uniform_int(static_cast<std::uint32_t>(vb.size()))],
                   false});
  }
  // interleave so both the even (dev) and odd (test) halves carry both labels
  std::vector<VerificationPair> mixed;
  mixed.reserve(out.size());
  for (int i = 0; i < n_pairs / 2; ++i) {
    const auto& pos = out[i];
    const auto& neg = out[n_pairs / 2 + i];
    if (i % 2 == 0) {
      mixed.push_back(pos);
      mixed.push_back(neg);
    } else {
      mixed.push_back(neg);
      mixed.push_back(pos);
    }
  }
  return mixed;
}

inline void write_pairs(const std::string& path, const PairFile& pf) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  nlohmann::json header{{"type", "verification_pairs"},
                        {"manifest", pf.manifest},
                        {"count", pf.pairs.size()}};
  f << header.dump() << "\n";
  for (const auto& p : pf.pairs) {
    nlohmann::json j{{"a", p.a}, {"b", p.b}, {"same", p.same}};
    f << j.dump() << "\n";
  }
}

inline PairFile read_pairs(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::string line;
  if (!std::getline(f, line))
    throw std::runtime_error("empty pairs file " + path);
  nlohmann::json header = nlohmann::json::parse(line);
  if (header.at("type") != "verification_pairs")
    throw std::runtime_error("not a pairs file: " + path);
  PairFile pf;
  pf.manifest = header.at("manifest");
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    pf.pairs.push_back({j.at("a"), j.at("b"), j.at("same")});
  }
  return pf;
}

// ---------------------------------------------------------------------------
// High-level harness
// ---------------------------------------------------------------------------

template <class T>
std::vector<double> pair_scores(const std::vector<std::vector<T>>& embeddings,
                                const std::vector<VerificationPair>& pairs) {
  std::vector<double> scores;
  scores.reserve(pairs.size());
  for (const auto& p : pairs) {
    if (p.a >= embeddings.size() || p.b >= embeddings.size())
      throw std::invalid_argument("pair index out of range");
    scores.push_back(cosine_similarity(embeddings[p.a], embeddings[p.b]));
  }
  return scores;
}

struct EvalReport {
  VerificationResult verification;
  std::map<double, TarResult> tar_at_far;
  double rank1 = -1.0;  // <0 = not computed
  std::map<std::string, double> region_accuracy;
  double region_mean = -1.0;
  nlohmann::json config_echo;
  std::string notes;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["accuracy"] = verification.accuracy;
    j["threshold"] = verification.threshold;
    j["counts"] = {{"tp", verification.tp},
                   {"tn", verification.tn},
                   {"fp", verification.fp},
                   {"fn", verification.fn}};
    j["dev_pairs"] = verification.dev_pairs;
    j["test_pairs"] = verification.test_pairs;
    auto& tf = j["tar_at_far"] = nlohmann::json::array();
    for (const auto& [far, r] : tar_at_far)
      tf.push_back({{"far_target", far},
                    {"tar", r.tar},
                    {"threshold", r.threshold},
                    {"realized_far", r.realized_far},
                    {"tp", r.tp},
                    {"fn", r.fn}});
    if (rank1 >= 0.0) j["rank1"] = rank1;
    if (!region_accuracy.empty()) {
      j["regions"] = region_accuracy;
      j["region_mean"] = region_mean;
    }
    if (!config_echo.is_null()) j["config"] = config_echo;
    if (!notes.empty()) j["notes"] = notes;
    return j;
  }
};

template <class T>
EvalReport evaluate_pairs(FromNet<T>& net, const LoadedSet& set,
                          const std::vector<VerificationPair>& pairs,
                          const std::vector<double>& far_targets = {},
                          double binarize_t = 0.0) {
  auto embs = extract_embeddings(net, set, 64, binarize_t);
  auto scores = pair_scores(embs, pairs);
  std::vector<int> same;
  for (const auto& p : pairs) same.push_back(p.same ? 1 : 0);

  EvalReport rep;
  rep.verification = verification_accuracy(scores, same);
  std::vector<double> pos, neg;
  for (std::size_t i = 0; i < scores.size(); ++i)
    (same[i] ? pos : neg).push_back(scores[i]);
  for (double far : far_targets) rep.tar_at_far[far] = tar_at_far(pos, neg, far);
  return rep;
}

inline double region_mean(const std::map<std::string, double>& regions) {
  if (regions.empty()) throw std::invalid_argument("region_mean: empty table");
  double sum = 0;
  for (const auto& [name, acc] : regions) sum += acc;
  return sum / double(regions.size());
}

// ---------------------------------------------------------------------------
// SVG plots: score distributions and TAR/FAR bars
// ---------------------------------------------------------------------------

inline void write_score_histogram_svg(const std::string& path,
                                      const std::vector<double>& pos,
                                      const std::vector<double>& neg,
                                      int bins = 40) {
  const int W = 640, H = 360, ML = 40, MB = 30;
  auto bin_of = [&](double s) {
    int b = static_cast<int>((s + 1.0) / 2.0 * bins);
    return std::clamp(b, 0, bins - 1);
  };
  std::vector<int> hp(bins, 0), hn(bins, 0);
  for (double s : pos) hp[bin_of(s)]++;
  for (double s : neg) hn[bin_of(s)]++;
  int peak = 1;
  for (int b = 0; b < bins; ++b) peak = std::max({peak, hp[b], hn[b]});

  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  f << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='"
    << H << "'>\n<rect width='100%' height='100%' fill='white'/>\n";
  double bw = double(W - ML - 10) / bins;
  for (int b = 0; b < bins; ++b) {
    double x = ML + b * bw;
    double yh = double(hn[b]) / peak * (H - MB - 10);
    f << "<rect x='" << x << "' y='" << (H - MB - yh) << "' width='"
      << bw * 0.45 << "' height='" << yh
      << "' fill='#c0392b' fill-opacity='0.7'/>\n";
    yh = double(hp[b]) / peak * (H - MB - 10);
    f << "<rect x='" << x + bw * 0.45 << "' y='" << (H - MB - yh)
      << "' width='" << bw * 0.45 << "' height='" << yh
      << "' fill='#27ae60' fill-opacity='0.7'/>\n";
  }
  f << "<line x1='" << ML << "' y1='" << (H - MB) << "' x2='" << (W - 10)
    << "' y2='" << (H - MB) << "' stroke='black'/>\n";
  f << "<text x='" << ML << "' y='" << (H - 8)
    << "' font-size='12'>similarity -1 .. 1 (green = same identity, red = "
       "different)</text>\n";
  f << "</svg>\n";
}

inline void write_tar_far_svg(const std::string& path,
                              const std::map<double, TarResult>& tf) {
  const int W = 480, H = 320, ML = 50, MB = 40;
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  f << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='"
    << H << "'>\n<rect width='100%' height='100%' fill='white'/>\n";
  int n = static_cast<int>(tf.size());
  double bw = n ? double(W - ML - 20) / n : 0.0;
  int i = 0;
  for (const auto& [far, r] : tf) {
    double x = ML + i * bw + bw * 0.15;
    double yh = r.tar * (H - MB - 20);
    f << "<rect x='" << x << "' y='" << (H - MB - yh) << "' width='"
      << bw * 0.7 << "' height='" << yh << "' fill='#2980b9'/>\n";
    f << "<text x='" << x << "' y='" << (H - MB + 15) << "' font-size='11'>FAR "
      << far << "</text>\n";
    f << "<text x='" << x << "' y='" << (H - MB - yh - 4)
      << "' font-size='11'>" << r.tar << "</text>\n";
    ++i;
  }
  f << "<line x1='" << ML << "' y1='" << (H - MB) << "' x2='" << (W - 10)
    << "' y2='" << (H - MB) << "' stroke='black'/>\n";
  f << "</svg>\n";
}

}  // namespace from
