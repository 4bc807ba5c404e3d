#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "from/eval.hpp"

using from::ProtocolError;
using from::tar_at_far;
using from::verification_accuracy;

TEST_CASE("cosine similarity basics") {
  std::vector<double> a{1.0, 0.0, 0.0};
  std::vector<double> b{0.0, 1.0, 0.0};
  CHECK_THAT(from::cosine_similarity(a, a), Catch::Matchers::WithinAbs(1.0, 1e-15));
  CHECK_THAT(from::cosine_similarity(a, b), Catch::Matchers::WithinAbs(0.0, 1e-15));
  std::vector<double> na{-2.0, 0.0, 0.0};
  CHECK_THAT(from::cosine_similarity(a, na), Catch::Matchers::WithinAbs(-1.0, 1e-15));
  // scale invariance
  std::vector<double> u{0.3, -1.2, 0.8}, v{1.1, 0.4, -0.2};
  std::vector<double> u5{1.5, -6.0, 4.0};
  CHECK_THAT(from::cosine_similarity(u, v),
             Catch::Matchers::WithinAbs(from::cosine_similarity(u5, v), 1e-12));

  std::vector<double> z{0.0, 0.0, 0.0};
  CHECK_THROWS_AS(from::cosine_similarity(a, z), std::invalid_argument);
  std::vector<double> shorter{1.0, 2.0};
  CHECK_THROWS_AS(from::cosine_similarity(a, shorter), std::invalid_argument);
}

TEST_CASE("perfectly separated scores verify at 1.0") {
  // even indices are dev, odd are test; both halves carry both labels
  std::vector<double> scores{0.9, 0.1, 0.2, 0.88, 0.85, 0.15, 0.25, 0.95};
  std::vector<int> same{1, 0, 0, 1, 1, 0, 0, 1};
  auto r = verification_accuracy(scores, same);
  CHECK(r.accuracy == 1.0);
  CHECK(r.threshold > 0.25);
  CHECK(r.threshold <= 0.85);
  CHECK(r.dev_pairs == 4);
  CHECK(r.test_pairs == 4);
  CHECK(r.tp + r.tn + r.fp + r.fn == 4);
  CHECK(r.recomputed_accuracy() == r.accuracy);
}

TEST_CASE("label-independent scores verify near chance") {
  from::Rng rng(404);
  std::vector<double> scores;
  std::vector<int> same;
  for (int i = 0; i < 4000; ++i) {
    scores.push_back(rng.uniform() * 2.0 - 1.0);
    // labels carry no information about the score (and are independent of
    // the even/odd dev-test split)
    same.push_back(rng.uniform() < 0.5 ? 1 : 0);
  }
  auto r = verification_accuracy(scores, same);
  CHECK(r.accuracy > 0.40);
  CHECK(r.accuracy < 0.60);
  CHECK(r.recomputed_accuracy() == r.accuracy);
}

TEST_CASE("verification protocol errors") {
  CHECK_THROWS_AS(verification_accuracy({0.5}, {1}), ProtocolError);
  CHECK_THROWS_AS(verification_accuracy({0.5, 0.6, 0.7, 0.2}, {1, 1, 1, 1}),
                  ProtocolError);
  CHECK_THROWS_AS(verification_accuracy({0.5, 0.6}, {0, 0}), ProtocolError);
  CHECK_THROWS_AS(verification_accuracy({0.5, 0.6}, {1}),
                  std::invalid_argument);
}

TEST_CASE("threshold ties resolve to the lowest candidate") {
  // any threshold in (0.2, 0.8] scores 100% on the dev half; the chosen one
  // must be the smallest candidate that attains it
  std::vector<double> scores{0.8, 0.9, 0.2, 0.1};
  std::vector<int> same{1, 1, 0, 0};
  auto r = verification_accuracy(scores, same);
  CHECK(r.threshold == 0.8);
}

TEST_CASE("tar at far on a hand-built score set") {
  // 100 distinct negative scores: 0.005, 0.015, ..., 0.995
  std::vector<double> neg;
  for (int i = 0; i < 100; ++i) neg.push_back(0.005 + 0.01 * i);
  // threshold at far 0.05 is the 6th highest negative, 0.945
  std::vector<double> pos{0.95, 0.96, 0.97, 0.98, 0.99, 0.955, 0.965, 0.975,
                          0.985, 0.90};
  auto r = tar_at_far(pos, neg, 0.05);
  CHECK_THAT(r.threshold, Catch::Matchers::WithinAbs(0.945, 1e-12));
  CHECK(r.tp == 9);
  CHECK(r.fn == 1);
  CHECK_THAT(r.tar, Catch::Matchers::WithinAbs(0.9, 1e-12));
  CHECK_THAT(r.realized_far, Catch::Matchers::WithinAbs(0.05, 1e-12));
}

TEST_CASE("far target 1.0 accepts everything") {
  auto r = tar_at_far({0.1, -0.9}, {0.5, 0.6, 0.7}, 1.0);
  CHECK(r.threshold == -1.0);
  CHECK(r.tar == 1.0);
  CHECK(r.realized_far == 1.0);
  CHECK(r.tp == 2);
  CHECK(r.fn == 0);
}

TEST_CASE("tar at far rejects starved protocols") {
  std::vector<double> pos{0.5}, neg(100, 0.1);
  try {
    tar_at_far(pos, neg, 0.001);
    FAIL("expected ProtocolError");
  } catch (const ProtocolError& e) {
    // the message names the minimum negative count for the target
    CHECK(std::string(e.what()).find("1000") != std::string::npos);
  }
  CHECK_THROWS_AS(tar_at_far({}, neg, 0.5), ProtocolError);
  CHECK_THROWS_AS(tar_at_far(pos, neg, -0.1), std::invalid_argument);
  CHECK_THROWS_AS(tar_at_far(pos, neg, 1.5), std::invalid_argument);
}

TEST_CASE("tar is nondecreasing in the far target") {
  from::Rng rng(77);
  std::vector<double> pos, neg;
  for (int i = 0; i < 500; ++i) pos.push_back(rng.normal() * 0.2 + 0.4);
  for (int i = 0; i < 2000; ++i) neg.push_back(rng.normal() * 0.2);
  double prev = -1.0;
  for (double far : {0.001, 0.01, 0.05, 0.1, 0.5, 1.0}) {
    auto r = tar_at_far(pos, neg, far);
    CHECK(r.tar >= prev);
    CHECK(r.realized_far <= far + 1e-12);
    prev = r.tar;
  }
}

TEST_CASE("identically distributed scores give tar near far") {
  from::Rng rng(909);
  std::vector<double> pos, neg;
  for (int i = 0; i < 4000; ++i) pos.push_back(rng.uniform());
  for (int i = 0; i < 20000; ++i) neg.push_back(rng.uniform());
  auto r = tar_at_far(pos, neg, 0.01);
  CHECK(r.tar > 0.003);
  CHECK(r.tar < 0.03);
}

TEST_CASE("rank-1 identification on separated clusters") {
  // five orthogonal directions, probes are noisy copies of gallery entries
  from::Rng rng(15);
  std::vector<std::vector<double>> gallery, probes;
  std::vector<int> gal_ids, probe_ids;
  for (int id = 0; id < 5; ++id) {
    std::vector<double> center(5, 0.0);
    center[id] = 1.0;
    gallery.push_back(center);
    gal_ids.push_back(id);
    for (int p = 0; p < 4; ++p) {
      auto noisy = center;
      for (auto& x : noisy) x += rng.normal() * 0.05;
      probes.push_back(noisy);
      probe_ids.push_back(id);
    }
  }
  CHECK(from::rank1_identification(gallery, gal_ids, probes, probe_ids) == 1.0);
  // a probe that matches itself in the gallery always scores
  CHECK(from::rank1_identification(gallery, gal_ids, {gallery[3]}, {3}) == 1.0);
}

TEST_CASE("rank-1 protocol errors") {
  std::vector<std::vector<double>> gal{{1.0, 0.0}, {0.0, 1.0}};
  std::vector<int> gal_ids{0, 1};
  CHECK_THROWS_AS(
      from::rank1_identification(gal, gal_ids, {{1.0, 0.0}}, {7}),
      ProtocolError);
  CHECK_THROWS_AS(from::rank1_identification(gal, gal_ids, {}, {}),
                  ProtocolError);
  CHECK_THROWS_AS(from::rank1_identification(gal, {0}, {{1.0, 0.0}}, {0}),
                  std::invalid_argument);
}

TEST_CASE("generated pairs are balanced across both halves") {
  from::SynthConfig cfg;
  cfg.identities = 6;
  cfg.samples_per_identity = 8;
  cfg.clean_fraction = 0.5;
  auto man = from::build_dataset(cfg);
  from::Rng rng(3);
  auto pairs = from::make_verification_pairs(man.records, 40, rng);
  REQUIRE(pairs.size() == 40);
  int pos[2] = {0, 0}, neg[2] = {0, 0};
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    CHECK(p.a < man.records.size());
    CHECK(p.b < man.records.size());
    bool same_id = man.records[p.a].identity == man.records[p.b].identity;
    CHECK(same_id == p.same);
    if (p.same) {
      CHECK(p.a != p.b);
      ++pos[i % 2];
    } else {
      ++neg[i % 2];
    }
  }
  CHECK(pos[0] + pos[1] == 20);
  CHECK(neg[0] + neg[1] == 20);
  // both the dev (even) and test (odd) halves carry both labels
  CHECK(pos[0] > 0);
  CHECK(pos[1] > 0);
  CHECK(neg[0] > 0);
  CHECK(neg[1] > 0);

  from::Rng r2(3);
  auto again = from::make_verification_pairs(man.records, 40, r2);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    CHECK(pairs[i].a == again[i].a);
    CHECK(pairs[i].b == again[i].b);
    CHECK(pairs[i].same == again[i].same);
  }

  CHECK_THROWS_AS(from::make_verification_pairs(man.records, 7, rng),
                  std::invalid_argument);
}

TEST_CASE("pair files round-trip") {
  from::PairFile pf;
  pf.manifest = "some/manifest.jsonl";
  pf.pairs = {{0, 3, true}, {1, 5, false}, {2, 4, true}};
  auto tmp = std::filesystem::temp_directory_path() / "pairs_roundtrip.jsonl";
  from::write_pairs(tmp.string(), pf);
  auto back = from::read_pairs(tmp.string());
  CHECK(back.manifest == pf.manifest);
  REQUIRE(back.pairs.size() == pf.pairs.size());
  for (std::size_t i = 0; i < pf.pairs.size(); ++i) {
    CHECK(back.pairs[i].a == pf.pairs[i].a);
    CHECK(back.pairs[i].b == pf.pairs[i].b);
    CHECK(back.pairs[i].same == pf.pairs[i].same);
  }
  // a manifest is not a pairs file
  {
    std::ofstream bad(tmp);
    bad << "{\"type\":\"other\"}\n";
  }
  CHECK_THROWS_AS(from::read_pairs(tmp.string()), std::runtime_error);
  std::filesystem::remove(tmp);
}

TEST_CASE("pair scores validate indices") {
  std::vector<std::vector<float>> embs{{1.f, 0.f}, {0.f, 1.f}};
  std::vector<from::VerificationPair> pairs{{0, 1, false}};
  auto s = from::pair_scores(embs, pairs);
  REQUIRE(s.size() == 1);
  CHECK_THAT(s[0], Catch::Matchers::WithinAbs(0.0, 1e-12));
  pairs.push_back({0, 9, false});
  CHECK_THROWS_AS(from::pair_scores(embs, pairs), std::invalid_argument);
}

TEST_CASE("region mean arithmetic") {
  std::map<std::string, double> regions{
      {"left", 0.8}, {"right", 0.6}, {"eyes", 1.0}};
  CHECK_THAT(from::region_mean(regions),
             Catch::Matchers::WithinAbs(0.8, 1e-12));
  CHECK_THROWS_AS(from::region_mean({}), std::invalid_argument);
}

TEST_CASE("end-to-end report on an untrained network") {
  from::SynthConfig scfg;
  scfg.identities = 6;
  scfg.samples_per_identity = 6;
  scfg.image_w = 48;
  scfg.image_h = 56;
  scfg.clean_fraction = 1.0;
  scfg.global_seed = 71;
  auto set = from::LoadedSet::from_manifest(from::build_dataset(scfg));

  from::NetworkConfig ncfg;
  ncfg.image_w = 48;
  ncfg.image_h = 56;
  ncfg.stem_ch = 2;
  ncfg.c3_ch = 3;
  ncfg.c2_ch = 4;
  ncfg.x1_ch = 4;
  ncfg.pyramid_ch = 3;
  ncfg.embed_dim = 8;
  ncfg.dropout = 0.0;
  ncfg.k = 2;
  from::FromNet<float> net(ncfg, /*with_decoder=*/true);
  from::Rng rng(5);
  net.init(rng);

  from::Rng prng(9);
  auto pairs = from::make_verification_pairs(set.records, 24, prng);
  auto rep = from::evaluate_pairs(net, set, pairs, {0.5, 1.0});
  CHECK(rep.verification.dev_pairs == 12);
  CHECK(rep.verification.test_pairs == 12);
  CHECK(rep.verification.accuracy >= 0.0);
  CHECK(rep.verification.accuracy <= 1.0);
  REQUIRE(rep.tar_at_far.count(0.5) == 1);
  REQUIRE(rep.tar_at_far.count(1.0) == 1);
  CHECK(rep.tar_at_far.at(1.0).tar == 1.0);
  CHECK(rep.tar_at_far.at(0.5).realized_far <= 0.5);

  auto j = rep.to_json();
  CHECK(j.contains("accuracy"));
  CHECK(j.at("tar_at_far").size() == 2);

  // the report is reproducible: same net, set, and pairs give the same scores
  auto rep2 = from::evaluate_pairs(net, set, pairs, {0.5, 1.0});
  CHECK(rep2.verification.accuracy == rep.verification.accuracy);
  CHECK(rep2.verification.threshold == rep.verification.threshold);

  // plots render to non-empty files
  auto d = std::filesystem::temp_directory_path();
  auto hist = d / "hist_test.svg";
  auto tf = d / "tarfar_test.svg";
  from::write_score_histogram_svg(hist.string(), {0.9, 0.8}, {0.1, 0.2});
  from::write_tar_far_svg(tf.string(), rep.tar_at_far);
  CHECK(std::filesystem::file_size(hist) > 100);
  CHECK(std::filesystem::file_size(tf) > 100);
  std::filesystem::remove(hist);
  std::filesystem::remove(tf);
}
