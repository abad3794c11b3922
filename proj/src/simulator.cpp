#include "delmix/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <unordered_set>

#include "delmix/diffengine.hpp"
#include "delmix/util.hpp"

namespace delmix {

YieldDistribution YieldDistribution::parse(std::string_view text) {
  auto fail = [&] {
    throw ConfigInvalid("yields: expected uniform(a,b) or fixed(v), got '" +
                        std::string(text) + "'");
  };
  size_t open = text.find('(');
  if (open == std::string_view::npos || text.back() != ')') fail();
  std::string_view name = text.substr(0, open);
  std::string args(text.substr(open + 1, text.size() - open - 2));
  YieldDistribution d;
  try {
    if (name == "uniform") {
      size_t comma = args.find(',');
      if (comma == std::string::npos) fail();
      d.kind = Kind::Uniform;
      d.lo = std::stod(args.substr(0, comma));
      d.hi = std::stod(args.substr(comma + 1));
    } else if (name == "fixed") {
      d.kind = Kind::Fixed;
      d.value = std::stod(args);
    } else {
      fail();
    }
  } catch (const std::invalid_argument&) {
    fail();
  }
  return d;
}

std::string YieldDistribution::str() const {
  if (kind == Kind::Fixed) return "fixed(" + format_double(value) + ")";
  return "uniform(" + format_double(lo) + "," + format_double(hi) + ")";
}

void SimConfig::validate() const {
  if (n_bb_per_cycle < 2) throw ConfigInvalid("n_bb_per_cycle must be >= 2");
  if (n_tags < 1) throw ConfigInvalid("n_tags must be >= 1");
  const double combos = std::pow(static_cast<double>(n_bb_per_cycle), 3);
  if (static_cast<double>(n_tags) > combos)
    throw ConfigInvalid("n_tags exceeds the number of distinct triples");
  if (yields.kind == YieldDistribution::Kind::Uniform) {
    if (yields.lo < 0.0 || yields.hi > 1.0 || yields.lo > yields.hi)
      throw ConfigInvalid("yields: uniform bounds must satisfy 0 <= a <= b <= 1");
  } else if (yields.value < 0.0 || yields.value > 1.0) {
    throw ConfigInvalid("yields: fixed value outside [0,1]");
  }
  if (binder_pair_fraction < 0.0 || binder_pair_fraction > 1.0)
    throw ConfigInvalid("binder_pair_fraction must be in [0,1]");
  if (enrichment_scale < 0.0) throw ConfigInvalid("enrichment_scale must be >= 0");
  if (ntc_enrichment_scale < 0.0) throw ConfigInvalid("ntc_enrichment_scale must be >= 0");
  if (noise_on_reported_yields < 0.0)
    throw ConfigInvalid("noise_on_reported_yields must be >= 0");
  if (promiscuous_fraction < 0.0 || promiscuous_fraction > 1.0)
    throw ConfigInvalid("promiscuous_fraction must be in [0,1]");
  if (true_params.alpha_target <= 0.0) throw ConfigInvalid("alpha_target must be > 0");
  if (true_params.alpha_ntc <= 0.0) throw ConfigInvalid("alpha_ntc must be > 0");
  if (alpha_dls <= 0.0) throw ConfigInvalid("alpha_dls must be > 0");
}

std::int64_t nb_sample(double mu, double alpha, Rng& rng) {
  if (mu <= 0.0) return 0;
  const double shape = 1.0 / alpha;
  const double rate = rng.gamma(shape, alpha * mu);
  return rng.poisson(rate);
}

std::array<double, kFingerprintDim> structure_fingerprint(const MolGraph& g) {
  std::array<double, kFingerprintDim> fp{};
  for (const AtomRecord& a : g.atoms) {
    if (a.element == Element::Star) continue;
    fp[static_cast<int>(a.element)] += 1.0;
    if (a.in_ring) fp[9] += 1.0;
    fp[10] += std::abs(a.formal_charge);
  }
  for (const Bond& b : g.bonds) {
    if (g.atoms[b.i].element == Element::Star || g.atoms[b.j].element == Element::Star)
      continue;
    fp[10 + static_cast<int>(b.order)] += 1.0;  // slots 11..14
  }
  return fp;
}

int BinderRule::cycle_pair_index(int cycle_a, int cycle_b) {
  const auto [lo, hi] = std::minmax(cycle_a, cycle_b);
  if (lo == 1 && hi == 2) return 0;
  if (lo == 1 && hi == 3) return 1;
  if (lo == 2 && hi == 3) return 2;
  throw LibraryError("bad cycle pair");
}

double BinderRule::score(const std::vector<double>& w, std::span<const double> fa,
                         std::span<const double> fb) const {
  double s = 0.0;
  for (int i = 0; i < kFingerprintDim; ++i) {
    if (fa[i] == 0.0) continue;
    const double* row = w.data() + static_cast<size_t>(i) * kFingerprintDim;
    double acc = 0.0;
    for (int j = 0; j < kFingerprintDim; ++j) acc += row[j] * fb[j];
    s += fa[i] * acc;
  }
  return s;
}

namespace {
double excess_effect(double s, double thr, double norm, double scale) {
  if (!(s >= thr)) return 0.0;
  return scale * (0.25 + (s - thr) / norm);
}
}  // namespace

double BinderRule::effect_target(int cp, std::span<const double> fa,
                                 std::span<const double> fb) const {
  return excess_effect(score(weights_target[cp], fa, fb), threshold_target[cp],
                       norm_target[cp], scale_target);
}

double BinderRule::effect_ntc(int cp, std::span<const double> fa,
                              std::span<const double> fb) const {
  return excess_effect(score(weights_ntc[cp], fa, fb), threshold_ntc[cp], norm_ntc[cp],
                       scale_ntc);
}

namespace {

double pair_r(const GroundTruth& gt, const Library& lib, std::span<const int> blocks,
              bool target_channel) {
  double r = 0.0;
  for (size_t i = 0; i < blocks.size(); ++i) {
    for (size_t j = i + 1; j < blocks.size(); ++j) {
      const int cp = BinderRule::cycle_pair_index(lib.block(blocks[i]).cycle,
                                                  lib.block(blocks[j]).cycle);
      const auto& fa = gt.block_fingerprints[blocks[i]];
      const auto& fb = gt.block_fingerprints[blocks[j]];
      r += target_channel ? gt.rule.effect_target(cp, fa, fb)
                          : gt.rule.effect_ntc(cp, fa, fb);
    }
  }
  return r;
}

}  // namespace

double GroundTruth::product_r_target(const Library& lib, std::span<const int> blocks) const {
  return pair_r(*this, lib, blocks, true);
}

double GroundTruth::product_r_ntc(const Library& lib, std::span<const int> blocks) const {
  return pair_r(*this, lib, blocks, false);
}

namespace {

Element sample_element(Rng& rng) {
  const double u = rng.uniform();
  if (u < 0.50) return Element::C;
  if (u < 0.65) return Element::N;
  if (u < 0.80) return Element::O;
  if (u < 0.86) return Element::S;
  if (u < 0.91) return Element::F;
  if (u < 0.95) return Element::Cl;
  if (u < 0.97) return Element::Br;
  if (u < 0.99) return Element::P;
  return Element::H;
}

BondOrder sample_bond_order(Rng& rng) {
  const double u = rng.uniform();
  if (u < 0.70) return BondOrder::Single;
  if (u < 0.85) return BondOrder::Double;
  if (u < 0.95) return BondOrder::Aromatic;
  return BondOrder::Triple;
}

// Random connected fragment: a bonded tree over 3..7 atoms, sometimes one
// ring-closing edge, plus `arity` attachment stars.
Fragment random_fragment(Rng& rng, int arity) {
  MolGraph g;
  const int n = 3 + static_cast<int>(rng.below(5));
  for (int i = 0; i < n; ++i) {
    AtomRecord a;
    a.element = sample_element(rng);
    a.formal_charge = rng.uniform() < 0.05 ? (rng.uniform() < 0.5 ? 1 : -1) : 0;
    g.atoms.push_back(a);
    if (i > 0) g.bonds.push_back({static_cast<int>(rng.below(i)), i, sample_bond_order(rng)});
  }
  if (n >= 4 && rng.uniform() < 0.4) {
    // Close a ring between two atoms that are not already bonded.
    for (int attempt = 0; attempt < 8; ++attempt) {
      int a = static_cast<int>(rng.below(n));
      int b = static_cast<int>(rng.below(n));
      if (a == b) continue;
      bool adjacent = false;
      for (const Bond& bond : g.bonds)
        if ((bond.i == a && bond.j == b) || (bond.i == b && bond.j == a)) adjacent = true;
      if (adjacent) continue;
      g.bonds.push_back({a, b, rng.uniform() < 0.5 ? BondOrder::Single : BondOrder::Aromatic});
      // Mark the tree path between the endpoints as the ring.
      std::vector<std::vector<int>> adj(n);
      for (size_t e = 0; e + 1 < g.bonds.size(); ++e) {
        adj[g.bonds[e].i].push_back(g.bonds[e].j);
        adj[g.bonds[e].j].push_back(g.bonds[e].i);
      }
      std::vector<int> parent(n, -1);
      std::vector<int> queue{a};
      parent[a] = a;
      for (size_t qi = 0; qi < queue.size(); ++qi) {
        for (int w : adj[queue[qi]])
          if (parent[w] < 0) {
            parent[w] = queue[qi];
            queue.push_back(w);
          }
      }
      for (int v = b; v != a; v = parent[v]) g.atoms[v].in_ring = true;
      g.atoms[a].in_ring = true;
      break;
    }
  }
  for (int s = 0; s < arity; ++s) {
    const int anchor = static_cast<int>(rng.below(n));
    g.atoms.push_back({Element::Star, 0, false});
    g.bonds.push_back({anchor, g.atom_count() - 1, BondOrder::Single});
  }
  return Fragment::from_graph(std::move(g));
}

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

std::string block_id(int cycle, int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "bb%d_%03d", cycle, index);
  return buf;
}

}  // namespace

SimResult simulate(const SimConfig& cfg, int threads) {
  cfg.validate();
  SimResult result;
  result.config = cfg;
  GroundTruth& gt = result.truth;
  gt.params = cfg.true_params;

  // Building blocks. Cycle-2 blocks carry two attachment points, the ends
  // carry one.
  for (int cycle = 1; cycle <= 3; ++cycle) {
    for (int i = 0; i < cfg.n_bb_per_cycle; ++i) {
      BuildingBlock b;
      b.id = block_id(cycle, i);
      b.cycle = cycle;
      Rng frag_rng(derive_seed(cfg.seed, "frag:" + b.id));
      b.fragment = random_fragment(frag_rng, cycle == 2 ? 2 : 1);
      Rng yield_rng(derive_seed(cfg.seed, "yield:" + b.id));
      const double true_yield = cfg.yields.sample(yield_rng);
      const double reported =
          clamp01(true_yield + cfg.noise_on_reported_yields * yield_rng.normal());
      b.yield = reported;
      result.library.add_block(std::move(b));
      gt.true_yields.push_back(true_yield);
    }
  }

  // Fingerprints and the structure-driven binder rule.
  gt.block_fingerprints.resize(result.library.block_count());
  for (int i = 0; i < result.library.block_count(); ++i)
    gt.block_fingerprints[i] = structure_fingerprint(result.library.block(i).fragment.graph);

  Rng binder_rng(derive_seed(cfg.seed, "binders"));
  gt.rule.scale_target = cfg.enrichment_scale;
  gt.rule.scale_ntc = cfg.ntc_enrichment_scale;
  for (int cp = 0; cp < 3; ++cp) {
    gt.rule.weights_target[cp].resize(kFingerprintDim * kFingerprintDim);
    gt.rule.weights_ntc[cp].resize(kFingerprintDim * kFingerprintDim);
    for (double& w : gt.rule.weights_target[cp]) w = binder_rng.normal() / kFingerprintDim;
    for (double& w : gt.rule.weights_ntc[cp]) w = binder_rng.normal() / kFingerprintDim;
  }
  const std::array<std::pair<int, int>, 3> cycle_pairs{{{1, 2}, {1, 3}, {2, 3}}};
  auto calibrate = [&](const std::vector<double>& w, int cp, double& thr, double& norm) {
    const auto& as = result.library.blocks_in_cycle(cycle_pairs[cp].first);
    const auto& bs = result.library.blocks_in_cycle(cycle_pairs[cp].second);
    std::vector<double> scores;
    scores.reserve(as.size() * bs.size());
    for (int a : as)
      for (int b : bs)
        scores.push_back(
            gt.rule.score(w, gt.block_fingerprints[a], gt.block_fingerprints[b]));
    const int m = static_cast<int>(std::lround(cfg.binder_pair_fraction *
                                               static_cast<double>(scores.size())));
    if (m <= 0) {
      thr = std::numeric_limits<double>::infinity();
      norm = 1.0;
      return;
    }
    std::sort(scores.begin(), scores.end(), std::greater<>());
    thr = scores[m - 1];
    double mean_excess = 0.0;
    for (int i = 0; i < m; ++i) mean_excess += scores[i] - thr;
    norm = std::max(mean_excess / m, 1e-9);
  };
  for (int cp = 0; cp < 3; ++cp) {
    calibrate(gt.rule.weights_target[cp], cp, gt.rule.threshold_target[cp],
              gt.rule.norm_target[cp]);
    calibrate(gt.rule.weights_ntc[cp], cp, gt.rule.threshold_ntc[cp], gt.rule.norm_ntc[cp]);
  }

  // Distinct tag triples.
  Rng tag_rng(derive_seed(cfg.seed, "tags"));
  const int n = cfg.n_bb_per_cycle;
  std::unordered_set<std::uint64_t> used;
  used.reserve(cfg.n_tags * 2);
  std::vector<std::array<int, 3>> triples;
  triples.reserve(cfg.n_tags);
  while (static_cast<int>(triples.size()) < cfg.n_tags) {
    const int i1 = static_cast<int>(tag_rng.below(n));
    const int i2 = static_cast<int>(tag_rng.below(n));
    const int i3 = static_cast<int>(tag_rng.below(n));
    const std::uint64_t key =
        (static_cast<std::uint64_t>(i1) * n + i2) * static_cast<std::uint64_t>(n) + i3;
    if (used.insert(key).second) triples.push_back({i1, i2, i3});
  }

  const int digits = std::max(5, static_cast<int>(std::to_string(cfg.n_tags).size()));
  const SimTrueParams& tp = cfg.true_params;
  result.tags.resize(cfg.n_tags);
  gt.tags.resize(cfg.n_tags);

  // Per-tag substreams make the sampled counts independent of both tag
  // order and worker count; each chunk keeps its own pair-effect cache.
  auto sample_range = [&](int begin, int end) {
    std::unordered_map<std::uint64_t, std::pair<double, double>> pair_cache;
    auto pair_effects = [&](int ga, int gb) {
      const std::uint64_t key = (static_cast<std::uint64_t>(std::min(ga, gb)) << 32) |
                                static_cast<std::uint64_t>(std::max(ga, gb));
      auto it = pair_cache.find(key);
      if (it != pair_cache.end()) return it->second;
      const int cp = BinderRule::cycle_pair_index(result.library.block(ga).cycle,
                                                  result.library.block(gb).cycle);
      std::pair<double, double> eff{
          gt.rule.effect_target(cp, gt.block_fingerprints[ga], gt.block_fingerprints[gb]),
          gt.rule.effect_ntc(cp, gt.block_fingerprints[ga], gt.block_fingerprints[gb])};
      pair_cache.emplace(key, eff);
      return eff;
    };

    for (int t = begin; t < end; ++t) {
      LibraryTag tag;
      {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "t%0*d", digits, t);
        tag.tag_id = buf;
      }
      std::array<int, 3> globals{};
      for (int c = 0; c < 3; ++c) {
        globals[c] = result.library.blocks_in_cycle(c + 1)[triples[t][c]];
        tag.bb[c] = result.library.block(globals[c]).id;
      }

      Rng rng(derive_seed(cfg.seed, "tag:" + tag.tag_id));
      const double abundance = std::exp(cfg.dls_log_mean + cfg.dls_log_sd * rng.normal());
      tag.counts.c_dls = nb_sample(abundance, cfg.alpha_dls, rng);
      tag.counts.c_promiscuity = rng.uniform() < cfg.promiscuous_fraction
                                     ? rng.gamma(4.0, 5.0)
                                     : rng.gamma(1.0, 0.5);

      TagTruth truth;
      const YieldProportions props =
          yield_proportions(gt.true_yields[globals[0]], gt.true_yields[globals[1]],
                            gt.true_yields[globals[2]]);
      const std::array<ProductKind, 4> kinds{ProductKind::Tri, ProductKind::Di12,
                                             ProductKind::Di13, ProductKind::Di23};
      for (ProductKind kind : kinds) {
        ProductTruth pt;
        pt.kind = kind;
        pt.p_true = props.for_kind(kind);
        const auto cycles = product_kind_cycles(kind);
        std::vector<int> blocks;
        for (int cycle : cycles) blocks.push_back(globals[cycle - 1]);
        for (size_t i = 0; i < blocks.size(); ++i)
          for (size_t j = i + 1; j < blocks.size(); ++j) {
            auto [et, en] = pair_effects(blocks[i], blocks[j]);
            pt.r_target += et;
            pt.r_ntc += en;
          }
        truth.b_target += pt.p_true * pt.r_target;
        truth.b_ntc += pt.p_true * pt.r_ntc;
        truth.products.push_back(pt);
      }

      const double x_dls = std::log1p(static_cast<double>(tag.counts.c_dls));
      const double x_prom = std::log1p(tag.counts.c_promiscuity);
      truth.mu_target = softplus(truth.b_target + tp.beta_ntc * truth.b_ntc +
                                 tp.beta_dls * x_dls + tp.beta_promiscuity * x_prom +
                                 tp.beta_constant);
      truth.mu_ntc = softplus(truth.b_ntc + tp.beta2_dls * x_dls +
                              tp.beta2_promiscuity * x_prom + tp.beta2_constant);
      tag.counts.c_target = nb_sample(truth.mu_target, tp.alpha_target, rng);
      tag.counts.c_ntc = nb_sample(truth.mu_ntc, tp.alpha_ntc, rng);

      result.tags[t] = std::move(tag);
      gt.tags[t] = std::move(truth);
    }
  };
  parallel_for(cfg.n_tags, resolve_threads(threads), sample_range);

  return result;
}

void write_simulation(const std::filesystem::path& dir, const SimResult& result) {
  std::filesystem::create_directories(dir);
  write_fragments_file(dir / "fragments.tsv", result.library);
  write_tags_file(dir / "tags.tsv", result.tags);

  {
    std::ofstream os(dir / "true_yields.tsv");
    if (!os) throw FileError("cannot open true_yields.tsv for writing");
    for (int i = 0; i < result.library.block_count(); ++i)
      os << result.library.block(i).id << '\t' << format_double(result.truth.true_yields[i])
         << '\n';
  }

  {
    std::ofstream os(dir / "ground_truth.tsv");
    if (!os) throw FileError("cannot open ground_truth.tsv for writing");
    const SimTrueParams& tp = result.truth.params;
    os << "# seed=" << result.config.seed << '\n';
    os << "# beta_ntc=" << format_double(tp.beta_ntc) << '\n';
    os << "# beta_dls=" << format_double(tp.beta_dls) << '\n';
    os << "# beta_promiscuity=" << format_double(tp.beta_promiscuity) << '\n';
    os << "# beta_constant=" << format_double(tp.beta_constant) << '\n';
    os << "# beta2_dls=" << format_double(tp.beta2_dls) << '\n';
    os << "# beta2_promiscuity=" << format_double(tp.beta2_promiscuity) << '\n';
    os << "# beta2_constant=" << format_double(tp.beta2_constant) << '\n';
    os << "# alpha_target=" << format_double(tp.alpha_target) << '\n';
    os << "# alpha_ntc=" << format_double(tp.alpha_ntc) << '\n';
    for (size_t t = 0; t < result.tags.size(); ++t) {
      for (const ProductTruth& pt : result.truth.tags[t].products) {
        os << result.tags[t].tag_id << '\t' << product_kind_name(pt.kind) << '\t'
           << format_double(pt.p_true) << '\t' << format_double(pt.r_target) << '\t'
           << format_double(pt.r_ntc) << '\n';
      }
    }
  }
}

}  // namespace delmix
