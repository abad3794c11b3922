#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "delmix/evaluation.hpp"
#include "delmix/rng.hpp"

using namespace delmix;

namespace {

double brute_force_auc(std::span<const double> scores, std::span<const char> labels) {
  double num = 0.0;
  std::int64_t pairs = 0;
  for (size_t i = 0; i < scores.size(); ++i) {
    if (!labels[i]) continue;
    for (size_t j = 0; j < scores.size(); ++j) {
      if (labels[j]) continue;
      ++pairs;
      if (scores[i] > scores[j])
        num += 1.0;
      else if (scores[i] == scores[j])
        num += 0.5;
    }
  }
  return num / static_cast<double>(pairs);
}

SimResult quick_sim(std::uint64_t seed = 88) {
  SimConfig cfg;
  cfg.n_bb_per_cycle = 12;
  cfg.n_tags = 500;
  cfg.seed = seed;
  return simulate(cfg);
}

}  // namespace

TEST_CASE("r_squared exact cases") {
  const std::vector<double> obs = {1.0, 2.0, 3.0};
  SUBCASE("perfect prediction") { CHECK(r_squared(obs, obs) == 1.0); }
  SUBCASE("predicting the mean gives zero") {
    const std::vector<double> mean_pred = {2.0, 2.0, 2.0};
    CHECK(r_squared(obs, mean_pred) == 0.0);
  }
  SUBCASE("hand-computed half") {
    const std::vector<double> pred = {1.0, 2.0, 4.0};
    CHECK(r_squared(obs, pred) == doctest::Approx(0.5).epsilon(1e-12));
  }
  SUBCASE("anti-correlated predictions go negative") {
    const std::vector<double> pred = {3.0, 2.0, 1.0};
    CHECK(r_squared(obs, pred) < 0.0);
  }
  SUBCASE("never exceeds one") {
    Rng rng(4);
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<double> o(10), p(10);
      for (int i = 0; i < 10; ++i) {
        o[i] = rng.uniform(0, 10);
        p[i] = rng.uniform(0, 10);
      }
      CHECK(r_squared(o, p) <= 1.0);
    }
  }
  SUBCASE("degenerate inputs") {
    const std::vector<double> flat = {2.0, 2.0, 2.0};
    CHECK_THROWS_AS(r_squared(flat, obs), DegenerateVariance);
    const std::vector<double> one = {1.0};
    CHECK_THROWS_AS(r_squared(one, one), DegenerateVariance);
  }
}

TEST_CASE("roc_auc exact and oracle-checked") {
  SUBCASE("perfect separation") {
    const std::vector<double> s = {5, 4, 1, 0.5};
    const std::vector<char> l = {1, 1, 0, 0};
    CHECK(roc_auc(s, l) == 1.0);
  }
  SUBCASE("inverted scores") {
    const std::vector<double> s = {0.1, 0.2, 3, 4};
    const std::vector<char> l = {1, 1, 0, 0};
    CHECK(roc_auc(s, l) == 0.0);
  }
  SUBCASE("paper-style three molecule example") {
    const std::vector<double> s = {3, 2, 1};
    const std::vector<char> l = {1, 0, 1};
    CHECK(roc_auc(s, l) == doctest::Approx(0.5).epsilon(1e-12));
  }
  SUBCASE("random data with ties matches brute force") {
    Rng rng(6);
    for (int trial = 0; trial < 50; ++trial) {
      const int n = 3 + static_cast<int>(rng.below(40));
      std::vector<double> s(n);
      std::vector<char> l(n);
      bool pos = false, neg = false;
      for (int i = 0; i < n; ++i) {
        s[i] = static_cast<double>(rng.below(6));  // integer grid forces ties
        l[i] = rng.uniform() < 0.5 ? 1 : 0;
        (l[i] ? pos : neg) = true;
      }
      if (!pos || !neg) continue;
      CHECK(roc_auc(s, l) == doctest::Approx(brute_force_auc(s, l)).epsilon(1e-12));
    }
  }
  SUBCASE("invariant under strictly monotone transforms") {
    Rng rng(7);
    std::vector<double> s(30);
    std::vector<char> l(30);
    for (int i = 0; i < 30; ++i) {
      s[i] = rng.uniform(-3, 3);
      l[i] = i % 3 == 0 ? 1 : 0;
    }
    std::vector<double> transformed(30);
    for (int i = 0; i < 30; ++i) transformed[i] = std::exp(2.0 * s[i]) + 5.0;
    CHECK(roc_auc(s, l) == doctest::Approx(roc_auc(transformed, l)).epsilon(1e-12));
  }
  SUBCASE("single class rejected") {
    const std::vector<double> s = {1, 2};
    const std::vector<char> l = {1, 1};
    CHECK_THROWS_AS(roc_auc(s, l), SingleClass);
  }
}

TEST_CASE("hit_rate_at_k") {
  SUBCASE("all binders") {
    const std::vector<double> s = {3, 2, 1};
    const std::vector<char> l = {1, 1, 1};
    CHECK(hit_rate_at_k(s, l, 1) == 1.0);
    CHECK(hit_rate_at_k(s, l, 3) == 1.0);
  }
  SUBCASE("no binders in the top k") {
    const std::vector<double> s = {9, 8, 1, 0.5};
    const std::vector<char> l = {0, 0, 1, 1};
    CHECK(hit_rate_at_k(s, l, 2) == 0.0);
  }
  SUBCASE("constructed fifteen-molecule case with four binders in the top ten") {
    std::vector<double> s(15);
    std::vector<char> l(15, 0);
    for (int i = 0; i < 15; ++i) s[i] = 15.0 - i;
    l[0] = l[3] = l[5] = l[9] = 1;  // four binders inside the top ten
    l[12] = 1;                      // one below the cut
    CHECK(hit_rate_at_k(s, l, 10) == doctest::Approx(0.4).epsilon(1e-12));
  }
  SUBCASE("ties break by stable input order") {
    const std::vector<double> s = {1, 1, 1, 1};
    const std::vector<char> l = {1, 0, 0, 0};
    CHECK(hit_rate_at_k(s, l, 1) == 1.0);
    CHECK(hit_rate_at_k(s, l, 2) == 0.5);
  }
  SUBCASE("invariant under positive rescaling") {
    Rng rng(9);
    std::vector<double> s(20);
    std::vector<char> l(20);
    for (int i = 0; i < 20; ++i) {
      s[i] = rng.uniform(-2, 2);
      l[i] = rng.uniform() < 0.4 ? 1 : 0;
    }
    std::vector<double> scaled(20);
    for (int i = 0; i < 20; ++i) scaled[i] = 7.5 * s[i];
    CHECK(hit_rate_at_k(s, l, 10) == hit_rate_at_k(scaled, l, 10));
  }
  SUBCASE("k bounds") {
    const std::vector<double> s = {1, 2};
    const std::vector<char> l = {1, 0};
    CHECK_THROWS_AS(hit_rate_at_k(s, l, 3), KTooLarge);
    CHECK_THROWS_AS(hit_rate_at_k(s, l, 0), KTooLarge);
  }
}

TEST_CASE("screen ranks deterministically with identical scores for duplicates") {
  SimResult sim = quick_sim();
  MpnnConfig cfg;
  cfg.hidden_dim = 6;
  cfg.readout_dim = 4;
  cfg.head_hidden = 4;
  cfg.seed = 12;
  auto predictor = make_mpnn_predictor(cfg);

  ExternalSetOptions opts;
  opts.size = 20;
  opts.binder_fraction = 0.3;
  opts.seed = 5;
  std::vector<ExternalMolecule> mols = make_external_set(sim, opts);
  REQUIRE(mols.size() == 20);
  // duplicate the first molecule
  ExternalMolecule dup = mols[0];
  dup.id = "dup0";
  mols.push_back(dup);

  std::vector<ScreenEntry> ranked = screen(mols, *predictor, sim.library);
  REQUIRE(ranked.size() == 21);
  CHECK(ranked[0].rank == 1);
  double score0 = 0.0, score_dup = 0.0;
  for (const ScreenEntry& e : ranked) {
    if (e.id == mols[0].id) score0 = e.score;
    if (e.id == "dup0") score_dup = e.score;
  }
  CHECK(score0 == score_dup);

  std::vector<ScreenEntry> again = screen(mols, *predictor, sim.library);
  for (size_t i = 0; i < ranked.size(); ++i) {
    CHECK(ranked[i].id == again[i].id);
    CHECK(ranked[i].score == again[i].score);
  }

  SUBCASE("single molecule gets rank one") {
    std::vector<ExternalMolecule> one = {mols[5]};
    std::vector<ScreenEntry> r = screen(one, *predictor, sim.library);
    REQUIRE(r.size() == 1);
    CHECK(r[0].rank == 1);
  }
}

TEST_CASE("external sets honor size, labels and modes") {
  SimResult sim = quick_sim(17);
  SUBCASE("novel combos avoid library tags and hit the binder quota") {
    ExternalSetOptions opts;
    opts.size = 40;
    opts.binder_fraction = 0.25;
    opts.seed = 3;
    std::vector<ExternalMolecule> mols = make_external_set(sim, opts);
    REQUIRE(mols.size() == 40);
    int binders = 0;
    std::set<std::string> tag_triples;
    for (const LibraryTag& t : sim.tags)
      tag_triples.insert(t.bb[0] + "|" + t.bb[1] + "|" + t.bb[2]);
    for (const ExternalMolecule& m : mols) {
      if (m.is_binder) ++binders;
      CHECK_FALSE(tag_triples.count(m.bb[0] + "|" + m.bb[1] + "|" + m.bb[2]));
      CHECK(m.graph.connected());
      CHECK_FALSE(m.graph.contains_star());
    }
    CHECK(binders == 10);
  }
  SUBCASE("held-out perturbed mode uses the held-out blocks") {
    ExternalSetOptions opts;
    opts.size = 30;
    opts.binder_fraction = 0.2;
    opts.seed = 4;
    opts.mode = ExternalSetMode::HeldoutPerturbed;
    opts.heldout_bb = {sim.library.block(sim.library.blocks_in_cycle(2)[0]).id,
                       sim.library.block(sim.library.blocks_in_cycle(2)[1]).id};
    std::vector<ExternalMolecule> mols = make_external_set(sim, opts);
    REQUIRE(mols.size() == 30);
    for (const ExternalMolecule& m : mols) CHECK(m.graph.connected());
  }
  SUBCASE("external file round trips") {
    namespace fs = std::filesystem;
    ExternalSetOptions opts;
    opts.size = 12;
    opts.binder_fraction = 0.5;
    opts.seed = 9;
    std::vector<ExternalMolecule> mols = make_external_set(sim, opts);
    const fs::path path = fs::temp_directory_path() / "delmix_external_test.tsv";
    write_external_file(path, mols);
    std::vector<ExternalMolecule> back = read_external_file(path);
    REQUIRE(back.size() == mols.size());
    for (size_t i = 0; i < mols.size(); ++i) {
      CHECK(back[i].id == mols[i].id);
      CHECK(back[i].is_binder == mols[i].is_binder);
      CHECK(back[i].bb == mols[i].bb);
      CHECK(format_graph(back[i].graph) == format_graph(mols[i].graph));
    }
    fs::remove(path);
  }
}

TEST_CASE("evaluate_test_set excludes the regularizer and needs tags") {
  SimResult sim = quick_sim(23);
  Dataset ds;
  ds.library = sim.library;
  ds.tags = sim.tags;
  EmbedConfig cfg;
  cfg.dim = 8;
  cfg.seed = 2;
  auto predictor = make_embed_predictor(cfg, ds.library.block_count());
  CountModelParams params;
  std::vector<int> idx = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};

  CountModelParams with_gamma = params;
  with_gamma.gamma = 1.0;
  TestSetMetrics m0 = evaluate_test_set(ds, idx, *predictor, params);
  TestSetMetrics m1 = evaluate_test_set(ds, idx, *predictor, with_gamma);
  CHECK(m0.nb_loss == m1.nb_loss);
  CHECK(m0.r2_target == m1.r2_target);

  TestSetMetrics m2 = evaluate_test_set(ds, idx, *predictor, params);
  CHECK(m0.nb_loss == m2.nb_loss);

  CHECK_THROWS_AS(evaluate_test_set(ds, {}, *predictor, params), EmptyTestSet);
}

// With no enrichment, true betas and rounded true means as counts, the model
// explains the counts almost perfectly.
TEST_CASE("near-noiseless data yields r2 above 0.99") {
  SimConfig cfg;
  cfg.n_bb_per_cycle = 12;
  cfg.n_tags = 800;
  cfg.seed = 301;
  cfg.binder_pair_fraction = 0.0;
  // Wide abundance spread so the count variance dwarfs the rounding error.
  cfg.dls_log_sd = 2.0;
  cfg.true_params.beta_dls = 2.0;
  cfg.true_params.beta2_dls = 2.0;
  SimResult sim = simulate(cfg);
  Dataset ds;
  ds.library = sim.library;
  ds.tags = sim.tags;
  for (size_t t = 0; t < ds.tags.size(); ++t) {
    ds.tags[t].counts.c_target =
        static_cast<std::int64_t>(std::llround(sim.truth.tags[t].mu_target));
    ds.tags[t].counts.c_ntc =
        static_cast<std::int64_t>(std::llround(sim.truth.tags[t].mu_ntc));
  }

  EmbedConfig ecfg;
  ecfg.dim = 4;
  ecfg.seed = 5;
  auto predictor = make_embed_predictor(ecfg, ds.library.block_count());
  for (ParamBlock& b : predictor->param_blocks()) b.w.a.assign(b.w.a.size(), 0.0);

  CountModelParams params;
  params.beta_ntc = sim.truth.params.beta_ntc;
  params.beta_dls = sim.truth.params.beta_dls;
  params.beta_promiscuity = sim.truth.params.beta_promiscuity;
  params.beta_constant = sim.truth.params.beta_constant;
  params.beta2_dls = sim.truth.params.beta2_dls;
  params.beta2_promiscuity = sim.truth.params.beta2_promiscuity;
  params.beta2_constant = sim.truth.params.beta2_constant;

  std::vector<int> idx(ds.tags.size());
  std::iota(idx.begin(), idx.end(), 0);
  TestSetMetrics m = evaluate_test_set(ds, idx, *predictor, params);
  MESSAGE("noiseless r2_target = ", m.r2_target, ", r2_ntc = ", m.r2_ntc);
  CHECK(m.r2_target > 0.99);
  CHECK(m.r2_ntc > 0.99);
}
