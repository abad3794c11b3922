#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <set>

#include "delmix/datapipeline.hpp"
#include "delmix/simulator.hpp"

using namespace delmix;

namespace {

Dataset sim_dataset(int n_bb = 10, int n_tags = 400, std::uint64_t seed = 9) {
  SimConfig cfg;
  cfg.n_bb_per_cycle = n_bb;
  cfg.n_tags = n_tags;
  cfg.seed = seed;
  SimResult r = simulate(cfg);
  Dataset ds;
  ds.library = std::move(r.library);
  ds.tags = std::move(r.tags);
  return ds;
}

}  // namespace

TEST_CASE("zero augmentation leaves the dataset unchanged") {
  Dataset ds = sim_dataset();
  const size_t before = ds.tags.size();
  augment_negatives(ds, 0, 0, 1);
  CHECK(ds.tags.size() == before);
}

TEST_CASE("augmented records satisfy their count predicates") {
  Dataset ds = sim_dataset();
  const std::vector<LibraryTag> original = ds.tags;
  augment_negatives(ds, 50, 40, 7);
  REQUIRE(ds.tags.size() == original.size() + 90);

  // originals are untouched
  for (size_t i = 0; i < original.size(); ++i) {
    CHECK(ds.tags[i].tag_id == original[i].tag_id);
    CHECK(ds.tags[i].counts.c_target == original[i].counts.c_target);
    CHECK(ds.tags[i].provenance == TagProvenance::Observed);
  }

  int n_ntc = 0;
  int n_unseq = 0;
  std::set<std::string> triples;
  for (const LibraryTag& t : ds.tags)
    triples.insert(t.bb[0] + "|" + t.bb[1] + "|" + t.bb[2]);
  CHECK(triples.size() == ds.tags.size());  // appended triples are fresh

  for (size_t i = original.size(); i < ds.tags.size(); ++i) {
    const LibraryTag& t = ds.tags[i];
    if (t.provenance == TagProvenance::NtcOnly) {
      ++n_ntc;
      CHECK(t.counts.c_target == 0);
      CHECK(t.counts.c_ntc > 0);
    } else if (t.provenance == TagProvenance::Unsequenced) {
      ++n_unseq;
      CHECK(t.counts.c_target == 0);
      CHECK(t.counts.c_ntc == 0);
    } else {
      FAIL("augmented record lacks provenance");
    }
  }
  CHECK(n_ntc == 50);
  CHECK(n_unseq == 40);
}

TEST_CASE("augmentation at the paper's negative ratio") {
  // Four parts observed molecules to one part NTC-only plus one part
  // unsequenced negatives.
  Dataset ds = sim_dataset(10, 400);
  const int quarter = static_cast<int>(ds.tags.size()) / 4;
  augment_negatives(ds, quarter, quarter, 3);
  CHECK(ds.tags.size() == 600);
  int negatives = 0;
  for (const LibraryTag& t : ds.tags)
    if (t.provenance != TagProvenance::Observed) ++negatives;
  CHECK(negatives * 2 == 400);  // 2 parts negatives per 4 parts observed
}

TEST_CASE("augmentation draws only from the unused triple pool") {
  Dataset ds = sim_dataset(4, 60, 2);  // 64 triples, 60 used
  CHECK_THROWS_AS(augment_negatives(ds, 3, 3, 1), PoolExhausted);
  CHECK_NOTHROW(augment_negatives(ds, 2, 2, 1));
}

TEST_CASE("split holds out cycle-2 blocks consistently") {
  Dataset ds = sim_dataset(12, 600, 21);
  DatasetSplit s = split(ds, 0.25, 77);

  SUBCASE("train and test are disjoint and cover everything") {
    std::set<std::string> train(s.train.begin(), s.train.end());
    std::set<std::string> test(s.test.begin(), s.test.end());
    CHECK(train.size() + test.size() == ds.tags.size());
    for (const std::string& id : s.test) CHECK_FALSE(train.count(id));
  }
  SUBCASE("no test cycle-2 block appears in any train tag") {
    std::set<std::string> train_ids(s.train.begin(), s.train.end());
    for (const LibraryTag& t : ds.tags) {
      if (train_ids.count(t.tag_id))
        CHECK_FALSE(s.heldout_bb_ids.count(t.bb[1]));
      else
        CHECK(s.heldout_bb_ids.count(t.bb[1]));
    }
  }
  SUBCASE("same seed reproduces the split") {
    DatasetSplit s2 = split(ds, 0.25, 77);
    CHECK(s2.train == s.train);
    CHECK(s2.test == s.test);
    CHECK(s2.heldout_bb_ids == s.heldout_bb_ids);
  }
  SUBCASE("different seeds differ") {
    DatasetSplit s2 = split(ds, 0.25, 78);
    CHECK(s2.heldout_bb_ids != s.heldout_bb_ids);
  }
}

TEST_CASE("tiny holdout fractions still hold out one block") {
  Dataset ds = sim_dataset(12, 600, 4);
  DatasetSplit s = split(ds, 0.01, 5);
  CHECK(s.heldout_bb_ids.size() == 1);
  CHECK_FALSE(s.test.empty());
  CHECK_FALSE(s.train.empty());
}

TEST_CASE("degenerate splits are rejected") {
  Dataset ds = sim_dataset(3, 20, 6);
  CHECK_THROWS_AS(split(ds, 0.99, 1), DegenerateSplit);
  CHECK_THROWS_AS(split(ds, 0.0, 1), std::invalid_argument);
  CHECK_THROWS_AS(split(ds, 1.0, 1), std::invalid_argument);
}

TEST_CASE("split file round trips") {
  namespace fs = std::filesystem;
  Dataset ds = sim_dataset(8, 200, 31);
  DatasetSplit s = split(ds, 0.2, 13);
  const fs::path path = fs::temp_directory_path() / "delmix_split_test.tsv";
  write_split_file(path, s);
  DatasetSplit s2 = read_split_file(path);
  CHECK(s2.train == s.train);
  CHECK(s2.test == s.test);
  CHECK(s2.heldout_bb_ids == s.heldout_bb_ids);
  fs::remove(path);
}
