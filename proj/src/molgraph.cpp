#include "delmix/molgraph.hpp"

#include <algorithm>
#include <charconv>
#include <map>
#include <set>
#include <sstream>
#include <utility>

namespace delmix {

namespace {

constexpr std::string_view kSymbols[kNumElements] = {"C", "N", "O",  "S", "F",
                                                     "Cl", "Br", "P", "H", "*"};

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  size_t start = 0;
  while (start <= s.size()) {
    size_t pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(s.substr(start));
      break;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

int parse_int(std::string_view s, std::string_view what) {
  int value = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw GraphError("bad integer '" + std::string(s) + "' in " + std::string(what));
  return value;
}

}  // namespace

std::string_view element_symbol(Element e) { return kSymbols[static_cast<int>(e)]; }

std::optional<Element> element_from_symbol(std::string_view s) {
  for (int i = 0; i < kNumElements; ++i)
    if (kSymbols[i] == s) return static_cast<Element>(i);
  return std::nullopt;
}

std::vector<int> MolGraph::degrees() const {
  std::vector<int> deg(atoms.size(), 0);
  for (const Bond& b : bonds) {
    ++deg[b.i];
    ++deg[b.j];
  }
  return deg;
}

bool MolGraph::contains_star() const {
  return std::any_of(atoms.begin(), atoms.end(),
                     [](const AtomRecord& a) { return a.element == Element::Star; });
}

bool MolGraph::connected() const {
  if (atoms.empty()) return false;
  std::vector<std::vector<int>> adj(atoms.size());
  for (const Bond& b : bonds) {
    adj[b.i].push_back(b.j);
    adj[b.j].push_back(b.i);
  }
  std::vector<char> seen(atoms.size(), 0);
  std::vector<int> stack{0};
  seen[0] = 1;
  int count = 1;
  while (!stack.empty()) {
    int v = stack.back();
    stack.pop_back();
    for (int w : adj[v])
      if (!seen[w]) {
        seen[w] = 1;
        ++count;
        stack.push_back(w);
      }
  }
  return count == atom_count();
}

void MolGraph::validate() const {
  std::set<std::pair<int, int>> pairs;
  for (const Bond& b : bonds) {
    if (b.i < 0 || b.j < 0 || b.i >= atom_count() || b.j >= atom_count())
      throw GraphError("bond endpoint out of range");
    if (b.i == b.j) throw GraphError("self-loop bond");
    auto key = std::minmax(b.i, b.j);
    if (!pairs.insert(key).second) throw GraphError("duplicate bond");
  }
}

Fragment Fragment::from_graph(MolGraph g) {
  g.validate();
  Fragment f;
  const auto deg = g.degrees();
  int real_atoms = 0;
  for (int i = 0; i < g.atom_count(); ++i) {
    if (g.atoms[i].element == Element::Star) {
      if (deg[i] != 1)
        throw GraphError("attachment atom " + std::to_string(i) + " must have degree 1");
      f.attachment_points.push_back(i);
    } else {
      ++real_atoms;
    }
  }
  if (real_atoms == 0) throw GraphError("fragment has no non-attachment atoms");
  if (!g.connected()) throw Disconnected("fragment graph is disconnected");
  f.graph = std::move(g);
  return f;
}

namespace {

// Removes the listed atoms, dropping any bond that touches them.
MolGraph drop_atoms(const MolGraph& g, const std::vector<char>& remove) {
  MolGraph out;
  std::vector<int> remap(g.atoms.size(), -1);
  for (int i = 0; i < g.atom_count(); ++i) {
    if (!remove[i]) {
      remap[i] = out.atom_count();
      out.atoms.push_back(g.atoms[i]);
    }
  }
  for (const Bond& b : g.bonds) {
    if (remap[b.i] >= 0 && remap[b.j] >= 0)
      out.bonds.push_back({remap[b.i], remap[b.j], b.order});
  }
  return out;
}

int sole_neighbor(const MolGraph& g, int atom) {
  for (const Bond& b : g.bonds) {
    if (b.i == atom) return b.j;
    if (b.j == atom) return b.i;
  }
  throw GraphError("attachment atom has no neighbor");
}

}  // namespace

Fragment join_chain(std::span<const Fragment> fragments) {
  if (fragments.empty()) throw GraphError("join_chain: empty fragment list");
  for (size_t k = 0; k < fragments.size(); ++k) {
    if (!fragments[k].graph.connected())
      throw Disconnected("fragment " + std::to_string(k) + " is disconnected");
  }

  MolGraph merged;
  std::vector<int> offsets(fragments.size(), 0);
  for (size_t k = 0; k < fragments.size(); ++k) {
    offsets[k] = merged.atom_count();
    const MolGraph& g = fragments[k].graph;
    merged.atoms.insert(merged.atoms.end(), g.atoms.begin(), g.atoms.end());
    for (const Bond& b : g.bonds)
      merged.bonds.push_back({b.i + offsets[k], b.j + offsets[k], b.order});
  }

  // Each fragment's point list acts as a deque: incoming joins consume from
  // the front, outgoing joins from the back. This keeps chained assembly
  // associative: the tail point of a partial chain is its outgoing point.
  std::vector<int> front(fragments.size(), 0);
  std::vector<int> back(fragments.size());
  for (size_t k = 0; k < fragments.size(); ++k)
    back[k] = fragments[k].arity() - 1;
  std::vector<char> remove(merged.atoms.size(), 0);
  auto take_incoming = [&](size_t k) {
    if (front[k] > back[k])
      throw ArityMismatch("fragment " + std::to_string(k) +
                          " has no free incoming attachment point");
    return fragments[k].attachment_points[front[k]++] + offsets[k];
  };
  auto take_outgoing = [&](size_t k) {
    if (front[k] > back[k])
      throw ArityMismatch("fragment " + std::to_string(k) +
                          " has no free outgoing attachment point");
    return fragments[k].attachment_points[back[k]--] + offsets[k];
  };

  for (size_t k = 0; k + 1 < fragments.size(); ++k) {
    const int out_star = take_outgoing(k);
    const int in_star = take_incoming(k + 1);
    const int a = sole_neighbor(merged, out_star);
    const int b = sole_neighbor(merged, in_star);
    merged.bonds.push_back({a, b, BondOrder::Single});
    remove[out_star] = 1;
    remove[in_star] = 1;
  }

  // Keep surviving points in fragment order so further joins see the head
  // of the chain first and the tail last.
  std::vector<int> survivors;
  for (size_t k = 0; k < fragments.size(); ++k)
    for (int p = front[k]; p <= back[k]; ++p)
      survivors.push_back(fragments[k].attachment_points[p] + offsets[k]);

  MolGraph joined = drop_atoms(merged, remove);
  // drop_atoms preserves relative order, so remap survivor indices by
  // counting removed atoms before each.
  std::vector<int> shift(merged.atoms.size() + 1, 0);
  for (size_t i = 0; i < merged.atoms.size(); ++i)
    shift[i + 1] = shift[i] + (remove[i] ? 1 : 0);
  Fragment result;
  result.graph = std::move(joined);
  for (int s : survivors) result.attachment_points.push_back(s - shift[s]);
  result.graph.validate();
  if (!result.graph.connected()) throw Disconnected("joined chain is disconnected");
  return result;
}

MolGraph assemble(std::span<const Fragment> fragments) {
  Fragment chained = join_chain(fragments);
  std::vector<char> remove(chained.graph.atoms.size(), 0);
  for (int p : chained.attachment_points) remove[p] = 1;
  MolGraph out = drop_atoms(chained.graph, remove);
  if (!out.connected())
    throw Disconnected("assembled product is disconnected");
  return out;
}

FeatureMatrix featurize(const MolGraph& g) {
  if (g.contains_star())
    throw UnassembledGraph("featurize: graph still contains attachment atoms");
  FeatureMatrix fm;
  fm.n_atoms = g.atom_count();
  fm.n_bonds = g.bond_count();
  fm.atom_features.assign(static_cast<size_t>(fm.n_atoms) * kAtomFeatureDim, 0.0);
  fm.bond_features.assign(static_cast<size_t>(fm.n_bonds) * kBondFeatureDim, 0.0);
  const auto deg = g.degrees();
  for (int i = 0; i < fm.n_atoms; ++i) {
    double* row = fm.atom_features.data() + static_cast<size_t>(i) * kAtomFeatureDim;
    row[static_cast<int>(g.atoms[i].element)] = 1.0;
    row[kNumElements + std::min(deg[i], 5)] = 1.0;
    row[16] = static_cast<double>(g.atoms[i].formal_charge);
    row[17] = g.atoms[i].in_ring ? 1.0 : 0.0;
  }
  for (int b = 0; b < fm.n_bonds; ++b) {
    double* row = fm.bond_features.data() + static_cast<size_t>(b) * kBondFeatureDim;
    row[static_cast<int>(g.bonds[b].order) - 1] = 1.0;
  }
  return fm;
}

std::string graph_signature(const MolGraph& g) {
  const int n = g.atom_count();
  std::vector<std::string> color(n);
  for (int i = 0; i < n; ++i) {
    std::ostringstream os;
    os << element_symbol(g.atoms[i].element) << '/' << g.atoms[i].formal_charge << '/'
       << (g.atoms[i].in_ring ? 1 : 0);
    color[i] = os.str();
  }
  std::vector<std::vector<std::pair<int, int>>> adj(n);  // (neighbor, order)
  for (const Bond& b : g.bonds) {
    adj[b.i].push_back({b.j, static_cast<int>(b.order)});
    adj[b.j].push_back({b.i, static_cast<int>(b.order)});
  }
  const int rounds = std::max(2, n);
  for (int r = 0; r < rounds; ++r) {
    std::vector<std::string> next(n);
    for (int i = 0; i < n; ++i) {
      std::vector<std::string> neigh;
      neigh.reserve(adj[i].size());
      for (auto [j, order] : adj[i]) neigh.push_back(std::to_string(order) + ":" + color[j]);
      std::sort(neigh.begin(), neigh.end());
      std::string label = color[i] + "(";
      for (const auto& s : neigh) label += s + ",";
      label += ")";
      next[i] = std::move(label);
    }
    // Compress labels to keep strings short across rounds.
    std::map<std::string, int> ids;
    for (const auto& s : next) ids.emplace(s, 0);
    int id = 0;
    for (auto& [k, v] : ids) v = id++;
    for (int i = 0; i < n; ++i) color[i] = std::to_string(ids[next[i]]);
  }
  std::vector<std::string> sorted = color;
  std::sort(sorted.begin(), sorted.end());
  std::ostringstream os;
  os << n << '|' << g.bond_count() << '|';
  for (const auto& c : sorted) os << c << ',';
  return os.str();
}

MolGraph parse_graph(std::string_view text) {
  MolGraph g;
  std::vector<std::string_view> sections = split(text, ';');
  if (sections.size() != 4) throw GraphError("graph text must have 4 sections");
  auto section_value = [&](int idx, std::string_view key) -> std::string_view {
    std::string_view s = sections[idx];
    size_t eq = s.find('=');
    if (eq == std::string_view::npos || s.substr(0, eq) != key)
      throw GraphError("expected section '" + std::string(key) + "'");
    return s.substr(eq + 1);
  };

  std::string_view atoms_s = section_value(0, "atoms");
  for (std::string_view sym : split(atoms_s, ',')) {
    auto e = element_from_symbol(sym);
    if (!e) throw GraphError("unknown element '" + std::string(sym) + "'");
    g.atoms.push_back({*e, 0, false});
  }

  std::string_view charges_s = section_value(1, "charges");
  auto charges = split(charges_s, ',');
  if (charges.size() != g.atoms.size()) throw GraphError("charges count mismatch");
  for (size_t i = 0; i < charges.size(); ++i)
    g.atoms[i].formal_charge = parse_int(charges[i], "charges");

  std::string_view rings_s = section_value(2, "rings");
  auto rings = split(rings_s, ',');
  if (rings.size() != g.atoms.size()) throw GraphError("rings count mismatch");
  for (size_t i = 0; i < rings.size(); ++i) {
    int v = parse_int(rings[i], "rings");
    if (v != 0 && v != 1) throw GraphError("ring flag must be 0 or 1");
    g.atoms[i].in_ring = v == 1;
  }

  std::string_view bonds_s = section_value(3, "bonds");
  if (!bonds_s.empty()) {
    for (std::string_view bs : split(bonds_s, ',')) {
      size_t dash = bs.find('-');
      size_t colon = bs.find(':');
      if (dash == std::string_view::npos || colon == std::string_view::npos || colon < dash)
        throw GraphError("bad bond '" + std::string(bs) + "'");
      int i = parse_int(bs.substr(0, dash), "bond");
      int j = parse_int(bs.substr(dash + 1, colon - dash - 1), "bond");
      int code = parse_int(bs.substr(colon + 1), "bond order");
      if (code < 1 || code > 4) throw GraphError("bond order code must be 1..4");
      g.bonds.push_back({i, j, static_cast<BondOrder>(code)});
    }
  }
  g.validate();
  return g;
}

std::string format_graph(const MolGraph& g) {
  std::ostringstream os;
  os << "atoms=";
  for (int i = 0; i < g.atom_count(); ++i) {
    if (i) os << ',';
    os << element_symbol(g.atoms[i].element);
  }
  os << ";charges=";
  for (int i = 0; i < g.atom_count(); ++i) {
    if (i) os << ',';
    os << g.atoms[i].formal_charge;
  }
  os << ";rings=";
  for (int i = 0; i < g.atom_count(); ++i) {
    if (i) os << ',';
    os << (g.atoms[i].in_ring ? 1 : 0);
  }
  os << ";bonds=";
  for (int b = 0; b < g.bond_count(); ++b) {
    if (b) os << ',';
    os << g.bonds[b].i << '-' << g.bonds[b].j << ':' << static_cast<int>(g.bonds[b].order);
  }
  return os.str();
}

}  // namespace delmix
