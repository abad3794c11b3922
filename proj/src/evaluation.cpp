#include "delmix/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <unordered_set>

#include "delmix/rng.hpp"

namespace delmix {

double r_squared(std::span<const double> observed, std::span<const double> predicted) {
  if (observed.size() != predicted.size())
    throw std::invalid_argument("r_squared length mismatch");
  if (observed.size() < 2)
    throw DegenerateVariance("r_squared needs at least two observations");
  const double mean =
      std::accumulate(observed.begin(), observed.end(), 0.0) / observed.size();
  double ss_res = 0.0;
  double ss_tot = 0.0;
  for (size_t i = 0; i < observed.size(); ++i) {
    ss_res += (observed[i] - predicted[i]) * (observed[i] - predicted[i]);
    ss_tot += (observed[i] - mean) * (observed[i] - mean);
  }
  if (ss_tot == 0.0) throw DegenerateVariance("observed values are all equal");
  return 1.0 - ss_res / ss_tot;
}

double roc_auc(std::span<const double> scores, std::span<const char> labels) {
  if (scores.size() != labels.size())
    throw std::invalid_argument("roc_auc length mismatch");
  std::int64_t n_pos = 0;
  for (char l : labels) n_pos += l ? 1 : 0;
  const std::int64_t n_neg = static_cast<std::int64_t>(labels.size()) - n_pos;
  if (n_pos == 0 || n_neg == 0)
    throw SingleClass("roc_auc needs both classes present");

  // Rank-sum with midranks for ties.
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](int a, int b) { return scores[a] < scores[b]; });
  double rank_sum_pos = 0.0;
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (size_t k = i; k <= j; ++k)
      if (labels[order[k]]) rank_sum_pos += midrank;
    i = j + 1;
  }
  const double u = rank_sum_pos - static_cast<double>(n_pos) * (n_pos + 1) / 2.0;
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double hit_rate_at_k(std::span<const double> scores, std::span<const char> labels, int k) {
  if (scores.size() != labels.size())
    throw std::invalid_argument("hit_rate_at_k length mismatch");
  if (k < 1 || static_cast<size_t>(k) > scores.size())
    throw KTooLarge("k must be in [1, n]");
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return scores[a] > scores[b]; });
  int hits = 0;
  for (int i = 0; i < k; ++i)
    if (labels[order[i]]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(k);
}

std::vector<ScreenEntry> screen(std::span<const ExternalMolecule> molecules,
                                Predictor& predictor, const Library& library) {
  std::vector<ScreenEntry> entries;
  if (molecules.empty()) return entries;

  std::vector<ProductInput> inputs;
  inputs.reserve(molecules.size());
  for (const ExternalMolecule& m : molecules) {
    ProductInput in;
    in.kind = m.kind;
    in.graph = &m.graph;
    if (!predictor.needs_graphs())
      for (int c = 0; c < 3; ++c)
        if (!m.bb[c].empty()) in.blocks.push_back(library.index_of(m.bb[c]));
    inputs.push_back(std::move(in));
  }
  Tape tape;
  PredictorBatch batch = predictor.forward_batch(tape, inputs, false);
  const Mat& r = tape.value(batch.r_target);

  entries.reserve(molecules.size());
  for (size_t i = 0; i < molecules.size(); ++i)
    entries.push_back({0, molecules[i].id, r.a[i]});
  std::stable_sort(entries.begin(), entries.end(),
                   [](const ScreenEntry& a, const ScreenEntry& b) { return a.score > b.score; });
  for (size_t i = 0; i < entries.size(); ++i) entries[i].rank = static_cast<int>(i) + 1;
  return entries;
}

TestSetMetrics evaluate_test_set(const Dataset& ds, std::span<const int> test_indices,
                                 Predictor& predictor, const CountModelParams& params) {
  if (test_indices.empty()) throw EmptyTestSet("evaluate_test_set given no tags");
  PredictedSet pred = predict_set(ds, test_indices, predictor, params);
  TestSetMetrics m;
  m.nb_loss = pred.mean_nll;
  std::vector<double> obs_t(pred.c_target.begin(), pred.c_target.end());
  std::vector<double> obs_n(pred.c_ntc.begin(), pred.c_ntc.end());
  m.r2_target = r_squared(obs_t, pred.mu_target);
  m.r2_ntc = r_squared(obs_n, pred.mu_ntc);
  return m;
}

std::vector<ExternalMolecule> make_external_set(const SimResult& sim,
                                                const ExternalSetOptions& opts) {
  if (opts.size < 2) throw ConfigInvalid("external set size must be >= 2");
  if (opts.binder_fraction < 0.0 || opts.binder_fraction > 1.0)
    throw ConfigInvalid("external binder fraction must be in [0,1]");
  const Library& lib = sim.library;
  const GroundTruth& gt = sim.truth;

  std::unordered_set<std::string> used_triples;
  for (const LibraryTag& t : sim.tags)
    used_triples.insert(t.bb[0] + "\t" + t.bb[1] + "\t" + t.bb[2]);

  std::array<std::vector<int>, 3> pools;
  for (int c = 1; c <= 3; ++c) {
    for (int idx : lib.blocks_in_cycle(c)) {
      const std::string& id = lib.block(idx).id;
      if (!opts.allowed_bb.empty() &&
          std::find(opts.allowed_bb.begin(), opts.allowed_bb.end(), id) ==
              opts.allowed_bb.end())
        continue;
      pools[c - 1].push_back(idx);
    }
    if (pools[c - 1].empty())
      throw ConfigInvalid("external set has no usable cycle-" + std::to_string(c) +
                          " blocks");
  }

  std::vector<int> heldout_pool;
  if (opts.mode == ExternalSetMode::HeldoutPerturbed) {
    for (const std::string& id : opts.heldout_bb) heldout_pool.push_back(lib.index_of(id));
    if (heldout_pool.empty())
      throw ConfigInvalid("heldout external mode requires held-out blocks");
  }

  Rng rng(derive_seed(opts.seed, "external"));
  const int want_pos =
      static_cast<int>(std::lround(opts.binder_fraction * static_cast<double>(opts.size)));
  const int want_neg = opts.size - want_pos;
  int n_pos = 0;
  int n_neg = 0;
  std::vector<ExternalMolecule> out;
  out.reserve(opts.size);

  // Perturbs one fragment so the molecule is structurally novel; the binder
  // rule is a function of structure, so the label stays well defined.
  auto perturb = [&](Fragment frag) {
    std::vector<int> real_atoms;
    for (int i = 0; i < frag.graph.atom_count(); ++i)
      if (frag.graph.atoms[i].element != Element::Star) real_atoms.push_back(i);
    const int atom = real_atoms[rng.below(real_atoms.size())];
    const Element choices[4] = {Element::C, Element::N, Element::O, Element::S};
    frag.graph.atoms[atom].element = choices[rng.below(4)];
    return frag;
  };

  const std::uint64_t max_attempts = static_cast<std::uint64_t>(opts.size) * 4000ULL;
  for (std::uint64_t attempt = 0;
       attempt < max_attempts && (n_pos < want_pos || n_neg < want_neg); ++attempt) {
    std::array<int, 3> blocks{};
    for (int c = 0; c < 3; ++c)
      blocks[c] = pools[c][rng.below(pools[c].size())];
    std::array<Fragment, 3> frags = {lib.block(blocks[0]).fragment,
                                     lib.block(blocks[1]).fragment,
                                     lib.block(blocks[2]).fragment};
    bool perturbed = false;
    if (opts.mode == ExternalSetMode::HeldoutPerturbed) {
      const int held = heldout_pool[rng.below(heldout_pool.size())];
      blocks[lib.block(held).cycle - 1] = held;
      frags[lib.block(held).cycle - 1] = lib.block(held).fragment;
      const int which = static_cast<int>(rng.below(3));
      frags[which] = perturb(frags[which]);
      perturbed = true;
    } else {
      const std::string key = lib.block(blocks[0]).id + "\t" + lib.block(blocks[1]).id +
                              "\t" + lib.block(blocks[2]).id;
      if (!used_triples.insert(key).second) continue;
    }

    // Trisynthon-level truth from the structure rule.
    std::array<std::array<double, kFingerprintDim>, 3> fps;
    for (int c = 0; c < 3; ++c)
      fps[c] = perturbed ? structure_fingerprint(frags[c].graph)
                         : gt.block_fingerprints[blocks[c]];
    double r_true = 0.0;
    for (int a = 0; a < 3; ++a)
      for (int b = a + 1; b < 3; ++b)
        r_true += gt.rule.effect_target(BinderRule::cycle_pair_index(a + 1, b + 1), fps[a],
                                        fps[b]);
    const bool binder = r_true > 0.0;
    if (binder && n_pos >= want_pos) continue;
    if (!binder && n_neg >= want_neg) continue;

    ExternalMolecule m;
    m.kind = ProductKind::Tri;
    m.bb = {lib.block(blocks[0]).id, lib.block(blocks[1]).id, lib.block(blocks[2]).id};
    m.graph = assemble(frags);
    m.is_binder = binder;
    {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "ext%04d", static_cast<int>(out.size()));
      m.id = buf;
    }
    out.push_back(std::move(m));
    (binder ? n_pos : n_neg) += 1;
  }
  if (n_pos < want_pos || n_neg < want_neg)
    throw ConfigInvalid("could not sample the requested external set composition");
  return out;
}

void write_external_file(const std::filesystem::path& path,
                         std::span<const ExternalMolecule> molecules) {
  std::ofstream os(path);
  if (!os) throw FileError("cannot open '" + path.string() + "' for writing");
  for (const ExternalMolecule& m : molecules) {
    os << m.id << '\t' << product_kind_name(m.kind) << '\t' << m.bb[0] << ',' << m.bb[1]
       << ',' << m.bb[2] << '\t' << (m.is_binder ? 1 : 0) << '\t' << format_graph(m.graph)
       << '\n';
  }
}

std::vector<ExternalMolecule> read_external_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FileError("cannot open '" + path.string() + "'");
  std::vector<ExternalMolecule> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    size_t start = 0;
    while (start <= line.size()) {
      size_t pos = line.find('\t', start);
      if (pos == std::string::npos) {
        fields.push_back(line.substr(start));
        break;
      }
      fields.push_back(line.substr(start, pos - start));
      start = pos + 1;
    }
    if (fields.size() != 5)
      throw ParseError(path.string() + ":" + std::to_string(lineno) +
                       ": expected 5 tab-separated fields");
    ExternalMolecule m;
    m.id = fields[0];
    auto kind = product_kind_from_name(fields[1]);
    if (!kind) throw ParseError("unknown product kind '" + fields[1] + "'");
    m.kind = *kind;
    size_t c1 = fields[2].find(',');
    size_t c2 = c1 == std::string::npos ? std::string::npos : fields[2].find(',', c1 + 1);
    if (c2 == std::string::npos) throw ParseError("bad bb triple '" + fields[2] + "'");
    m.bb = {fields[2].substr(0, c1), fields[2].substr(c1 + 1, c2 - c1 - 1),
            fields[2].substr(c2 + 1)};
    if (fields[3] != "0" && fields[3] != "1")
      throw ParseError("bad binder flag '" + fields[3] + "'");
    m.is_binder = fields[3] == "1";
    try {
      m.graph = parse_graph(fields[4]);
    } catch (const GraphError& e) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    out.push_back(std::move(m));
  }
  return out;
}

void write_ranked_hits(const std::filesystem::path& path,
                       std::span<const ScreenEntry> entries) {
  std::ofstream os(path);
  if (!os) throw FileError("cannot open '" + path.string() + "' for writing");
  for (const ScreenEntry& e : entries)
    os << e.rank << '\t' << e.id << '\t' << format_double(e.score) << '\n';
}

void write_metrics_file(const std::filesystem::path& path,
                        std::span<const std::pair<std::string, double>> metrics) {
  std::ofstream os(path);
  if (!os) throw FileError("cannot open '" + path.string() + "' for writing");
  for (const auto& [name, value] : metrics) os << name << '\t' << format_double(value) << '\n';
}

}  // namespace delmix
