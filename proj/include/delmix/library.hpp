#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "delmix/molgraph.hpp"

namespace delmix {

struct LibraryError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct YieldOutOfRange : LibraryError {
  using LibraryError::LibraryError;
};
struct UnknownBuildingBlock : LibraryError {
  using LibraryError::LibraryError;
};
struct FileError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct BuildingBlock {
  std::string id;
  int cycle = 1;  // 1, 2 or 3
  double yield = 0.0;
  Fragment fragment;
};

struct CountRecord {
  std::int64_t c_target = 0;
  std::int64_t c_ntc = 0;
  std::int64_t c_dls = 0;
  double c_promiscuity = 0.0;
};

enum class TagProvenance { Observed, NtcOnly, Unsequenced };

std::string_view provenance_name(TagProvenance p);
std::optional<TagProvenance> provenance_from_name(std::string_view s);

struct LibraryTag {
  std::string tag_id;
  std::array<std::string, 3> bb;  // one id per cycle
  CountRecord counts;
  TagProvenance provenance = TagProvenance::Observed;
};

class Library {
 public:
  int add_block(BuildingBlock block);  // returns global index
  int block_count() const { return static_cast<int>(blocks_.size()); }
  const BuildingBlock& block(int index) const { return blocks_[index]; }
  const BuildingBlock& block(const std::string& id) const;
  int index_of(const std::string& id) const;  // throws UnknownBuildingBlock
  std::optional<int> find(const std::string& id) const;
  const std::vector<int>& blocks_in_cycle(int cycle) const;
  // Resolves a tag's blocks and checks cycles; returns global indices.
  std::array<int, 3> resolve_tag(const LibraryTag& tag) const;

 private:
  std::vector<BuildingBlock> blocks_;
  std::unordered_map<std::string, int> by_id_;
  std::array<std::vector<int>, 3> by_cycle_;
};

enum class ProductKind { Tri, Di12, Di13, Di23, Mono1, Mono2, Mono3 };
inline constexpr int kNumProductKinds = 7;

std::string_view product_kind_name(ProductKind k);
std::optional<ProductKind> product_kind_from_name(std::string_view s);
// Which of the tag's three cycles the product kind uses, in chain order.
std::vector<int> product_kind_cycles(ProductKind k);

// Proportions of every synthesis outcome under independent per-cycle
// success probabilities. `none` is the all-failed remainder, so the eight
// fields always sum to 1.
struct YieldProportions {
  double tri = 0.0;
  double di12 = 0.0;
  double di13 = 0.0;
  double di23 = 0.0;
  double mono1 = 0.0;
  double mono2 = 0.0;
  double mono3 = 0.0;
  double none = 0.0;

  double sum() const { return tri + di12 + di13 + di23 + mono1 + mono2 + mono3 + none; }
  double for_kind(ProductKind k) const;
};

YieldProportions yield_proportions(double y1, double y2, double y3);

struct Product {
  ProductKind kind = ProductKind::Tri;
  MolGraph graph;                   // empty when enumerated without graphs
  double p_lab = 0.0;
  std::vector<int> block_indices;   // global library indices, chain order
};

struct ProductMixture {
  std::vector<Product> products;
  const Product* find(ProductKind k) const;
};

struct EnumerateOptions {
  bool include_mono = false;
  bool with_graphs = true;
};

ProductMixture enumerate_products(const Library& lib, const LibraryTag& tag,
                                  EnumerateOptions opts = {});

// Assembles the product graph for a kind from the tag's fragments.
MolGraph assemble_product(const Library& lib, std::span<const int> block_indices);

// Fragment file: id<TAB>cycle<TAB>yield<TAB>graph
void write_fragments_file(const std::filesystem::path& path, const Library& lib);
Library read_fragments_file(const std::filesystem::path& path);

// Tag file: tag_id<TAB>bb1<TAB>bb2<TAB>bb3<TAB>c_target<TAB>c_ntc<TAB>c_dls<TAB>c_promiscuity
// A ninth provenance column is written for augmented datasets and accepted
// on read.
void write_tags_file(const std::filesystem::path& path, std::span<const LibraryTag> tags);
std::vector<LibraryTag> read_tags_file(const std::filesystem::path& path);

// Canonical float formatting used by every TSV writer (round-trip exact).
std::string format_double(double v);

}  // namespace delmix
