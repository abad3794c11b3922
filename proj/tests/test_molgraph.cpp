#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>

#include "delmix/molgraph.hpp"
#include "delmix/rng.hpp"

using namespace delmix;

namespace {

Fragment frag(const std::string& text) { return Fragment::from_graph(parse_graph(text)); }

// Random connected fragment for property tests: a bonded tree plus stars.
Fragment random_test_fragment(Rng& rng, int arity) {
  MolGraph g;
  const int n = 2 + static_cast<int>(rng.below(5));
  const Element elems[4] = {Element::C, Element::N, Element::O, Element::S};
  for (int i = 0; i < n; ++i) {
    g.atoms.push_back({elems[rng.below(4)], 0, false});
    if (i > 0)
      g.bonds.push_back({static_cast<int>(rng.below(i)), i,
                         rng.uniform() < 0.7 ? BondOrder::Single : BondOrder::Double});
  }
  for (int s = 0; s < arity; ++s) {
    g.atoms.push_back({Element::Star, 0, false});
    g.bonds.push_back({static_cast<int>(rng.below(n)), g.atom_count() - 1, BondOrder::Single});
  }
  return Fragment::from_graph(std::move(g));
}

std::vector<std::vector<double>> sorted_feature_rows(const FeatureMatrix& fm) {
  std::vector<std::vector<double>> rows;
  for (int i = 0; i < fm.n_atoms; ++i)
    rows.emplace_back(fm.atom_features.begin() + i * kAtomFeatureDim,
                      fm.atom_features.begin() + (i + 1) * kAtomFeatureDim);
  std::sort(rows.begin(), rows.end());
  return rows;
}

}  // namespace

TEST_CASE("graph text codec round trips") {
  const std::string text =
      "atoms=C,N,*;charges=0,-1,0;rings=1,1,0;bonds=0-1:4,1-2:1";
  MolGraph g = parse_graph(text);
  CHECK(g.atom_count() == 3);
  CHECK(g.atoms[1].formal_charge == -1);
  CHECK(g.atoms[0].in_ring);
  CHECK(g.bonds[0].order == BondOrder::Aromatic);
  CHECK(format_graph(g) == text);
}

TEST_CASE("parser rejects malformed input") {
  CHECK_THROWS_AS(parse_graph("atoms=C,Xx;charges=0,0;rings=0,0;bonds="), GraphError);
  CHECK_THROWS_AS(parse_graph("atoms=C;charges=0,0;rings=0;bonds="), GraphError);
  CHECK_THROWS_AS(parse_graph("atoms=C,C;charges=0,0;rings=0,0;bonds=0-0:1"), GraphError);
  CHECK_THROWS_AS(parse_graph("atoms=C,C;charges=0,0;rings=0,0;bonds=0-1:1,1-0:2"),
                  GraphError);
  CHECK_THROWS_AS(parse_graph("atoms=C,C;charges=0,0;rings=0,0;bonds=0-5:1"), GraphError);
}

TEST_CASE("single fragment assembly strips attachment atoms") {
  Fragment f = frag("atoms=C,N,*;charges=0,0,0;rings=0,0,0;bonds=0-1:1,1-2:1");
  MolGraph out = assemble(std::span(&f, 1));
  CHECK(out.atom_count() == 2);
  CHECK(out.bond_count() == 1);
  CHECK_FALSE(out.contains_star());
}

TEST_CASE("two one-carbon fragments join into an ethane-like graph") {
  Fragment a = frag("atoms=C,*;charges=0,0;rings=0,0;bonds=0-1:1");
  Fragment b = frag("atoms=*,C;charges=0,0;rings=0,0;bonds=0-1:1");
  std::vector<Fragment> frags{a, b};
  MolGraph out = assemble(frags);
  REQUIRE(out.atom_count() == 2);
  REQUIRE(out.bond_count() == 1);
  CHECK(out.atoms[0].element == Element::C);
  CHECK(out.atoms[1].element == Element::C);
  CHECK(out.bonds[0].order == BondOrder::Single);
  CHECK(out.connected());
}

TEST_CASE("three-fragment chains with 2,2,1 arities assemble connected and star-free") {
  Rng rng(20240456);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Fragment> frags{random_test_fragment(rng, 2), random_test_fragment(rng, 2),
                                random_test_fragment(rng, 1)};
    MolGraph out = assemble(frags);
    CHECK(out.connected());
    CHECK_FALSE(out.contains_star());
    int real_atoms = 0;
    for (const Fragment& f : frags) real_atoms += f.graph.atom_count() - f.arity();
    CHECK(out.atom_count() == real_atoms);
  }
}

TEST_CASE("assembly errors") {
  Fragment mono = frag("atoms=C,*;charges=0,0;rings=0,0;bonds=0-1:1");
  Fragment no_star = Fragment{parse_graph("atoms=C,N;charges=0,0;rings=0,0;bonds=0-1:1"), {}};
  SUBCASE("middle fragment without enough attachment points") {
    std::vector<Fragment> frags{mono, mono, mono};
    CHECK_THROWS_AS(assemble(frags), ArityMismatch);
  }
  SUBCASE("fragment with no attachment point at a join") {
    std::vector<Fragment> frags{no_star, mono};
    CHECK_THROWS_AS(assemble(frags), ArityMismatch);
  }
  SUBCASE("internally disconnected fragment") {
    MolGraph g = parse_graph("atoms=C,C,*;charges=0,0,0;rings=0,0,0;bonds=1-2:1");
    CHECK_THROWS_AS(Fragment::from_graph(g), Disconnected);
  }
  SUBCASE("empty chain") { CHECK_THROWS_AS(assemble({}), GraphError); }
}

TEST_CASE("chain assembly is associative up to isomorphism") {
  Rng rng(77);
  for (int trial = 0; trial < 40; ++trial) {
    const int arity_a = 1 + static_cast<int>(rng.below(2));
    Fragment a = random_test_fragment(rng, arity_a);
    Fragment b = random_test_fragment(rng, 2);
    Fragment c = random_test_fragment(rng, 1);

    std::vector<Fragment> abc{a, b, c};
    MolGraph direct = assemble(abc);

    std::vector<Fragment> ab{a, b};
    Fragment joined = join_chain(ab);
    std::vector<Fragment> ab_c{joined, c};
    MolGraph staged = assemble(ab_c);

    CHECK(graph_signature(direct) == graph_signature(staged));
  }
}

TEST_CASE("featurize single carbon") {
  MolGraph g = parse_graph("atoms=C;charges=0;rings=0;bonds=");
  FeatureMatrix fm = featurize(g);
  REQUIRE(fm.n_atoms == 1);
  REQUIRE(static_cast<int>(fm.atom_features.size()) == kAtomFeatureDim);
  CHECK(fm.atom_features[static_cast<int>(Element::C)] == 1.0);
  CHECK(fm.atom_features[kNumElements + 0] == 1.0);  // degree 0
  CHECK(fm.atom_features[16] == 0.0);
  CHECK(fm.atom_features[17] == 0.0);
  double sum_elem = 0.0;
  for (int j = 0; j < kNumElements; ++j) sum_elem += fm.atom_features[j];
  CHECK(sum_elem == 1.0);
}

TEST_CASE("featurize benzene-like ring") {
  MolGraph g = parse_graph(
      "atoms=C,C,C,C,C,C;charges=0,0,0,0,0,0;rings=1,1,1,1,1,1;"
      "bonds=0-1:4,1-2:4,2-3:4,3-4:4,4-5:4,5-0:4");
  FeatureMatrix fm = featurize(g);
  for (int i = 0; i < 6; ++i) {
    CHECK(fm.atom_features[i * kAtomFeatureDim + kNumElements + 2] == 1.0);  // degree 2
    CHECK(fm.atom_features[i * kAtomFeatureDim + 17] == 1.0);               // in ring
  }
  for (int b = 0; b < 6; ++b)
    CHECK(fm.bond_features[b * kBondFeatureDim + 3] == 1.0);  // aromatic one-hot
}

TEST_CASE("featurize rejects unassembled graphs") {
  MolGraph g = parse_graph("atoms=C,*;charges=0,0;rings=0,0;bonds=0-1:1");
  CHECK_THROWS_AS(featurize(g), UnassembledGraph);
}

TEST_CASE("permuting atoms permutes feature rows identically") {
  Rng rng(99);
  for (int trial = 0; trial < 30; ++trial) {
    Fragment f = random_test_fragment(rng, 1);
    std::vector<Fragment> fs{f};
    MolGraph g = assemble(fs);
    const int n = g.atom_count();
    std::vector<int> perm(n);
    for (int i = 0; i < n; ++i) perm[i] = i;
    for (size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);

    MolGraph pg;
    pg.atoms.resize(n);
    for (int i = 0; i < n; ++i) pg.atoms[perm[i]] = g.atoms[i];
    for (const Bond& b : g.bonds) pg.bonds.push_back({perm[b.i], perm[b.j], b.order});

    FeatureMatrix fa = featurize(g);
    FeatureMatrix fb = featurize(pg);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < kAtomFeatureDim; ++j)
        CHECK(fa.atom_features[i * kAtomFeatureDim + j] ==
              fb.atom_features[perm[i] * kAtomFeatureDim + j]);
  }
}

TEST_CASE("assembled features are invariant to fragment-internal relabeling") {
  Rng rng(1234);
  for (int trial = 0; trial < 20; ++trial) {
    Fragment a = random_test_fragment(rng, 1);
    Fragment b = random_test_fragment(rng, 2);
    Fragment c = random_test_fragment(rng, 1);

    // Relabel fragment b's atoms.
    const int n = b.graph.atom_count();
    std::vector<int> perm(n);
    for (int i = 0; i < n; ++i) perm[i] = i;
    for (size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    MolGraph pg;
    pg.atoms.resize(n);
    for (int i = 0; i < n; ++i) pg.atoms[perm[i]] = b.graph.atoms[i];
    for (const Bond& bd : b.graph.bonds) pg.bonds.push_back({perm[bd.i], perm[bd.j], bd.order});
    Fragment b2 = Fragment::from_graph(std::move(pg));
    // from_graph rescans stars in index order; restore the original point order.
    std::vector<int> pts;
    for (int p : b.attachment_points) pts.push_back(perm[p]);
    b2.attachment_points = pts;

    std::vector<Fragment> orig{a, b, c};
    std::vector<Fragment> relab{a, b2, c};
    FeatureMatrix fa = featurize(assemble(orig));
    FeatureMatrix fb = featurize(assemble(relab));
    CHECK(sorted_feature_rows(fa) == sorted_feature_rows(fb));
  }
}

TEST_CASE("graph signatures separate structurally distinct products") {
  Fragment a = frag("atoms=C,*;charges=0,0;rings=0,0;bonds=0-1:1");
  Fragment b = frag("atoms=*,N,*;charges=0,0,0;rings=0,0,0;bonds=0-1:1,1-2:1");
  Fragment c = frag("atoms=O,*;charges=0,0;rings=0,0;bonds=0-1:1");
  std::vector<Fragment> tri{a, b, c};
  std::vector<Fragment> di{a, b};
  CHECK(graph_signature(assemble(tri)) != graph_signature(assemble(di)));
}
