#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "delmix/library.hpp"

namespace delmix {

struct PoolExhausted : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DegenerateSplit : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Dataset {
  Library library;
  std::vector<LibraryTag> tags;
};

struct DatasetSplit {
  std::vector<std::string> train;
  std::vector<std::string> test;
  std::set<std::string> heldout_bb_ids;
  std::uint64_t seed = 0;
  double fraction = 0.0;

  std::vector<int> train_indices(const Dataset& ds) const;
  std::vector<int> test_indices(const Dataset& ds) const;
};

// Appends NTC-only tags (c_target = 0, c_ntc > 0) and unsequenced tags
// (c_target = c_ntc = 0) built from unused building-block triples.
void augment_negatives(Dataset& ds, int n_ntc_only, int n_unsequenced, std::uint64_t seed);

// Holds out a fraction of cycle-2 building blocks (at least one); every tag
// using a held-out block goes to the test side.
DatasetSplit split(const Dataset& ds, double holdout_fraction, std::uint64_t seed);

void write_split_file(const std::filesystem::path& path, const DatasetSplit& s);
DatasetSplit read_split_file(const std::filesystem::path& path);

}  // namespace delmix
