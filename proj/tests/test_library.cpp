#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "delmix/library.hpp"
#include "delmix/rng.hpp"

using namespace delmix;

namespace {

Library tiny_library() {
  Library lib;
  auto add = [&](const char* id, int cycle, double yield, const char* graph) {
    BuildingBlock b;
    b.id = id;
    b.cycle = cycle;
    b.yield = yield;
    b.fragment = Fragment::from_graph(parse_graph(graph));
    lib.add_block(std::move(b));
  };
  add("a1", 1, 0.9, "atoms=C,N,*;charges=0,0,0;rings=0,0,0;bonds=0-1:1,1-2:1");
  add("a2", 1, 0.5, "atoms=O,*;charges=0,0;rings=0,0;bonds=0-1:1");
  add("b1", 2, 0.8, "atoms=*,C,C,*;charges=0,0,0,0;rings=0,0,0,0;bonds=0-1:1,1-2:1,2-3:1");
  add("b2", 2, 0.6, "atoms=*,S,*;charges=0,0,0;rings=0,0,0;bonds=0-1:1,1-2:1");
  add("c1", 3, 0.7, "atoms=N,*;charges=0,0;rings=0,0;bonds=0-1:1");
  add("c2", 3, 0.4, "atoms=C,C,*;charges=0,1,0;rings=0,0,0;bonds=0-1:2,1-2:1");
  return lib;
}

LibraryTag tag_of(const char* b1, const char* b2, const char* b3) {
  LibraryTag t;
  t.tag_id = "t0";
  t.bb = {b1, b2, b3};
  t.counts = {4, 2, 30, 1.5};
  return t;
}

}  // namespace

TEST_CASE("yield proportions: corner and paper values") {
  SUBCASE("perfect yields put all mass on the trisynthon") {
    YieldProportions p = yield_proportions(1.0, 1.0, 1.0);
    CHECK(p.tri == 1.0);
    CHECK(p.di12 == 0.0);
    CHECK(p.di13 == 0.0);
    CHECK(p.di23 == 0.0);
    CHECK(p.none == 0.0);
  }
  SUBCASE("flat 70% yields give 0.147 disynthon proportions") {
    YieldProportions p = yield_proportions(0.7, 0.7, 0.7);
    CHECK(p.di12 == doctest::Approx(0.147).epsilon(1e-14));
    CHECK(p.di13 == doctest::Approx(0.147).epsilon(1e-14));
    CHECK(p.di23 == doctest::Approx(0.147).epsilon(1e-14));
    // The independence formula puts the trisynthon at 0.343, not 0.147.
    CHECK(p.tri == doctest::Approx(0.343).epsilon(1e-14));
  }
  SUBCASE("one failing cycle splits mass between tri and the matching di") {
    YieldProportions p = yield_proportions(0.5, 1.0, 1.0);
    CHECK(p.tri == doctest::Approx(0.5));
    CHECK(p.di23 == doctest::Approx(0.5));
    CHECK(p.di12 == 0.0);
    CHECK(p.di13 == 0.0);
    CHECK(p.mono1 == 0.0);
  }
}

TEST_CASE("yield proportions sum to one over all eight outcomes") {
  Rng rng(11);
  for (int i = 0; i < 10000; ++i) {
    YieldProportions p = yield_proportions(rng.uniform(), rng.uniform(), rng.uniform());
    CHECK(std::fabs(p.sum() - 1.0) < 1e-12);
  }
}

TEST_CASE("p_tri increases strictly in every yield") {
  Rng rng(12);
  for (int i = 0; i < 200; ++i) {
    const double y1 = rng.uniform(0.05, 0.95);
    const double y2 = rng.uniform(0.05, 0.95);
    const double y3 = rng.uniform(0.05, 0.95);
    const double base = yield_proportions(y1, y2, y3).tri;
    CHECK(yield_proportions(y1 + 0.03, y2, y3).tri > base);
    CHECK(yield_proportions(y1, y2 + 0.03, y3).tri > base);
    CHECK(yield_proportions(y1, y2, y3 + 0.03).tri > base);
  }
}

TEST_CASE("yield_proportions rejects out-of-range yields") {
  CHECK_THROWS_AS(yield_proportions(-0.1, 0.5, 0.5), YieldOutOfRange);
  CHECK_THROWS_AS(yield_proportions(0.5, 1.1, 0.5), YieldOutOfRange);
  CHECK_THROWS_AS(yield_proportions(0.5, 0.5, std::nan("")), YieldOutOfRange);
}

TEST_CASE("enumerate_products yields tri plus three di by default") {
  Library lib = tiny_library();
  LibraryTag t = tag_of("a1", "b1", "c1");
  ProductMixture mix = enumerate_products(lib, t);
  REQUIRE(mix.products.size() == 4);
  CHECK(mix.products[0].kind == ProductKind::Tri);
  CHECK(mix.find(ProductKind::Di12) != nullptr);
  CHECK(mix.find(ProductKind::Di13) != nullptr);
  CHECK(mix.find(ProductKind::Di23) != nullptr);
  double total = 0.0;
  for (const Product& p : mix.products) {
    CHECK(p.p_lab >= 0.0);
    CHECK(p.p_lab <= 1.0);
    CHECK(p.graph.connected());
    CHECK_FALSE(p.graph.contains_star());
    total += p.p_lab;
  }
  CHECK(total <= 1.0);
  CHECK(mix.products[0].p_lab == doctest::Approx(0.9 * 0.8 * 0.7));
}

TEST_CASE("monosynthons appear only when requested") {
  Library lib = tiny_library();
  LibraryTag t = tag_of("a1", "b1", "c1");
  EnumerateOptions opts;
  opts.include_mono = true;
  ProductMixture mix = enumerate_products(lib, t, opts);
  CHECK(mix.products.size() == 7);
  CHECK(mix.find(ProductKind::Mono2) != nullptr);
}

TEST_CASE("tags sharing blocks produce isomorphic disynthons") {
  Library lib = tiny_library();
  ProductMixture m1 = enumerate_products(lib, tag_of("a1", "b1", "c1"));
  ProductMixture m2 = enumerate_products(lib, tag_of("a1", "b1", "c2"));
  CHECK(graph_signature(m1.find(ProductKind::Di12)->graph) ==
        graph_signature(m2.find(ProductKind::Di12)->graph));
  CHECK(graph_signature(m1.find(ProductKind::Tri)->graph) !=
        graph_signature(m2.find(ProductKind::Tri)->graph));
}

TEST_CASE("enumerate_products is deterministic") {
  Library lib = tiny_library();
  LibraryTag t = tag_of("a2", "b2", "c2");
  ProductMixture m1 = enumerate_products(lib, t);
  ProductMixture m2 = enumerate_products(lib, t);
  REQUIRE(m1.products.size() == m2.products.size());
  for (size_t i = 0; i < m1.products.size(); ++i) {
    CHECK(m1.products[i].p_lab == m2.products[i].p_lab);
    CHECK(format_graph(m1.products[i].graph) == format_graph(m2.products[i].graph));
  }
}

TEST_CASE("tag validation catches unknown blocks and wrong cycles") {
  Library lib = tiny_library();
  CHECK_THROWS_AS(enumerate_products(lib, tag_of("zz", "b1", "c1")), UnknownBuildingBlock);
  CHECK_THROWS_AS(enumerate_products(lib, tag_of("b1", "a1", "c1")), LibraryError);
}

TEST_CASE("library rejects duplicate ids and bad yields") {
  Library lib = tiny_library();
  BuildingBlock dup;
  dup.id = "a1";
  dup.cycle = 1;
  dup.yield = 0.5;
  dup.fragment = Fragment::from_graph(parse_graph("atoms=C,*;charges=0,0;rings=0,0;bonds=0-1:1"));
  CHECK_THROWS_AS(lib.add_block(dup), LibraryError);
  dup.id = "fresh";
  dup.yield = 1.5;
  CHECK_THROWS_AS(lib.add_block(dup), YieldOutOfRange);
}

TEST_CASE("fragment and tag files round trip") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "delmix_test_library";
  fs::create_directories(dir);
  Library lib = tiny_library();
  write_fragments_file(dir / "fragments.tsv", lib);
  Library lib2 = read_fragments_file(dir / "fragments.tsv");
  REQUIRE(lib2.block_count() == lib.block_count());
  for (int i = 0; i < lib.block_count(); ++i) {
    CHECK(lib2.block(i).id == lib.block(i).id);
    CHECK(lib2.block(i).cycle == lib.block(i).cycle);
    CHECK(lib2.block(i).yield == lib.block(i).yield);
    CHECK(format_graph(lib2.block(i).fragment.graph) ==
          format_graph(lib.block(i).fragment.graph));
  }

  std::vector<LibraryTag> tags = {tag_of("a1", "b1", "c1"), tag_of("a2", "b2", "c2")};
  tags[1].provenance = TagProvenance::NtcOnly;
  write_tags_file(dir / "tags.tsv", tags);
  std::vector<LibraryTag> tags2 = read_tags_file(dir / "tags.tsv");
  REQUIRE(tags2.size() == 2);
  CHECK(tags2[0].counts.c_dls == 30);
  CHECK(tags2[0].provenance == TagProvenance::Observed);
  CHECK(tags2[1].provenance == TagProvenance::NtcOnly);
  CHECK(tags2[1].counts.c_promiscuity == tags[1].counts.c_promiscuity);
  fs::remove_all(dir);
}

TEST_CASE("tag file parser rejects malformed rows") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "delmix_test_library_bad";
  fs::create_directories(dir);
  {
    std::ofstream os(dir / "bad1.tsv");
    os << "t0\ta\tb\tc\t1\t2\t3\n";
  }
  CHECK_THROWS_AS(read_tags_file(dir / "bad1.tsv"), ParseError);
  {
    std::ofstream os(dir / "bad2.tsv");
    os << "t0\ta\tb\tc\t-1\t2\t3\t0.5\n";
  }
  CHECK_THROWS_AS(read_tags_file(dir / "bad2.tsv"), ParseError);
  CHECK_THROWS_AS(read_tags_file(dir / "missing.tsv"), FileError);
  fs::remove_all(dir);
}
