#include "delmix/library.hpp"

#include <charconv>
#include <cstdlib>
#include <cstring>
#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace delmix {

std::string_view provenance_name(TagProvenance p) {
  switch (p) {
    case TagProvenance::Observed:
      return "observed";
    case TagProvenance::NtcOnly:
      return "ntc_only";
    case TagProvenance::Unsequenced:
      return "unsequenced";
  }
  return "observed";
}

std::optional<TagProvenance> provenance_from_name(std::string_view s) {
  if (s == "observed") return TagProvenance::Observed;
  if (s == "ntc_only") return TagProvenance::NtcOnly;
  if (s == "unsequenced") return TagProvenance::Unsequenced;
  return std::nullopt;
}

int Library::add_block(BuildingBlock block) {
  if (block.cycle < 1 || block.cycle > 3)
    throw LibraryError("building block '" + block.id + "' has cycle " +
                       std::to_string(block.cycle) + ", expected 1..3");
  if (block.yield < 0.0 || block.yield > 1.0)
    throw YieldOutOfRange("building block '" + block.id + "' has yield " +
                          std::to_string(block.yield));
  if (by_id_.count(block.id))
    throw LibraryError("duplicate building block id '" + block.id + "'");
  const int index = static_cast<int>(blocks_.size());
  by_id_[block.id] = index;
  by_cycle_[block.cycle - 1].push_back(index);
  blocks_.push_back(std::move(block));
  return index;
}

const BuildingBlock& Library::block(const std::string& id) const {
  return blocks_[index_of(id)];
}

int Library::index_of(const std::string& id) const {
  auto it = by_id_.find(id);
  if (it == by_id_.end()) throw UnknownBuildingBlock("unknown building block '" + id + "'");
  return it->second;
}

std::optional<int> Library::find(const std::string& id) const {
  auto it = by_id_.find(id);
  if (it == by_id_.end()) return std::nullopt;
  return it->second;
}

const std::vector<int>& Library::blocks_in_cycle(int cycle) const {
  if (cycle < 1 || cycle > 3) throw LibraryError("cycle out of range");
  return by_cycle_[cycle - 1];
}

std::array<int, 3> Library::resolve_tag(const LibraryTag& tag) const {
  std::array<int, 3> out{};
  for (int c = 0; c < 3; ++c) {
    out[c] = index_of(tag.bb[c]);
    if (blocks_[out[c]].cycle != c + 1)
      throw LibraryError("tag '" + tag.tag_id + "' uses block '" + tag.bb[c] +
                         "' in cycle " + std::to_string(c + 1) + " but it belongs to cycle " +
                         std::to_string(blocks_[out[c]].cycle));
  }
  return out;
}

std::string_view product_kind_name(ProductKind k) {
  switch (k) {
    case ProductKind::Tri:
      return "tri";
    case ProductKind::Di12:
      return "di_12";
    case ProductKind::Di13:
      return "di_13";
    case ProductKind::Di23:
      return "di_23";
    case ProductKind::Mono1:
      return "mono_1";
    case ProductKind::Mono2:
      return "mono_2";
    case ProductKind::Mono3:
      return "mono_3";
  }
  return "tri";
}

std::optional<ProductKind> product_kind_from_name(std::string_view s) {
  for (int k = 0; k < kNumProductKinds; ++k) {
    auto kind = static_cast<ProductKind>(k);
    if (product_kind_name(kind) == s) return kind;
  }
  return std::nullopt;
}

std::vector<int> product_kind_cycles(ProductKind k) {
  switch (k) {
    case ProductKind::Tri:
      return {1, 2, 3};
    case ProductKind::Di12:
      return {1, 2};
    case ProductKind::Di13:
      return {1, 3};
    case ProductKind::Di23:
      return {2, 3};
    case ProductKind::Mono1:
      return {1};
    case ProductKind::Mono2:
      return {2};
    case ProductKind::Mono3:
      return {3};
  }
  return {};
}

double YieldProportions::for_kind(ProductKind k) const {
  switch (k) {
    case ProductKind::Tri:
      return tri;
    case ProductKind::Di12:
      return di12;
    case ProductKind::Di13:
      return di13;
    case ProductKind::Di23:
      return di23;
    case ProductKind::Mono1:
      return mono1;
    case ProductKind::Mono2:
      return mono2;
    case ProductKind::Mono3:
      return mono3;
  }
  return 0.0;
}

YieldProportions yield_proportions(double y1, double y2, double y3) {
  for (double y : {y1, y2, y3})
    if (!(y >= 0.0 && y <= 1.0))
      throw YieldOutOfRange("yield " + std::to_string(y) + " outside [0,1]");
  YieldProportions p;
  p.tri = y1 * y2 * y3;
  p.di12 = y1 * y2 * (1.0 - y3);
  p.di13 = y1 * (1.0 - y2) * y3;
  p.di23 = (1.0 - y1) * y2 * y3;
  p.mono1 = y1 * (1.0 - y2) * (1.0 - y3);
  p.mono2 = (1.0 - y1) * y2 * (1.0 - y3);
  p.mono3 = (1.0 - y1) * (1.0 - y2) * y3;
  p.none = (1.0 - y1) * (1.0 - y2) * (1.0 - y3);
  return p;
}

const Product* ProductMixture::find(ProductKind k) const {
  for (const Product& p : products)
    if (p.kind == k) return &p;
  return nullptr;
}

MolGraph assemble_product(const Library& lib, std::span<const int> block_indices) {
  std::vector<Fragment> frags;
  frags.reserve(block_indices.size());
  for (int idx : block_indices) frags.push_back(lib.block(idx).fragment);
  return assemble(frags);
}

ProductMixture enumerate_products(const Library& lib, const LibraryTag& tag,
                                  EnumerateOptions opts) {
  const std::array<int, 3> blocks = lib.resolve_tag(tag);
  const YieldProportions props = yield_proportions(
      lib.block(blocks[0]).yield, lib.block(blocks[1]).yield, lib.block(blocks[2]).yield);

  std::vector<ProductKind> kinds = {ProductKind::Tri, ProductKind::Di12, ProductKind::Di13,
                                    ProductKind::Di23};
  if (opts.include_mono) {
    kinds.push_back(ProductKind::Mono1);
    kinds.push_back(ProductKind::Mono2);
    kinds.push_back(ProductKind::Mono3);
  }

  ProductMixture mix;
  mix.products.reserve(kinds.size());
  for (ProductKind k : kinds) {
    Product prod;
    prod.kind = k;
    prod.p_lab = props.for_kind(k);
    for (int cycle : product_kind_cycles(k)) prod.block_indices.push_back(blocks[cycle - 1]);
    if (opts.with_graphs) prod.graph = assemble_product(lib, prod.block_indices);
    mix.products.push_back(std::move(prod));
  }
  return mix;
}

std::string format_double(double v) {
  char buf[40];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

namespace {

std::vector<std::string> split_line(const std::string& line, char sep) {
  std::vector<std::string> out;
  size_t start = 0;
  while (start <= line.size()) {
    size_t pos = line.find(sep, start);
    if (pos == std::string::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

double parse_double(const std::string& s, const std::string& what) {
  try {
    size_t used = 0;
    double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ParseError("bad number '" + s + "' in " + what);
  }
}

std::int64_t parse_i64(const std::string& s, const std::string& what) {
  std::int64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw ParseError("bad integer '" + s + "' in " + what);
  return v;
}

}  // namespace

void write_fragments_file(const std::filesystem::path& path, const Library& lib) {
  std::ofstream os(path);
  if (!os) throw FileError("cannot open '" + path.string() + "' for writing");
  for (int i = 0; i < lib.block_count(); ++i) {
    const BuildingBlock& b = lib.block(i);
    os << b.id << '\t' << b.cycle << '\t' << format_double(b.yield) << '\t'
       << format_graph(b.fragment.graph) << '\n';
  }
  if (!os) throw FileError("write failed for '" + path.string() + "'");
}

Library read_fragments_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FileError("cannot open '" + path.string() + "'");
  Library lib;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    auto fields = split_line(line, '\t');
    if (fields.size() != 4)
      throw ParseError(path.string() + ":" + std::to_string(lineno) +
                       ": expected 4 tab-separated fields");
    BuildingBlock b;
    b.id = fields[0];
    b.cycle = static_cast<int>(parse_i64(fields[1], "cycle"));
    b.yield = parse_double(fields[2], "yield");
    try {
      b.fragment = Fragment::from_graph(parse_graph(fields[3]));
    } catch (const GraphError& e) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    lib.add_block(std::move(b));
  }
  return lib;
}

void write_tags_file(const std::filesystem::path& path, std::span<const LibraryTag> tags) {
  std::ofstream os(path);
  if (!os) throw FileError("cannot open '" + path.string() + "' for writing");
  bool any_augmented = false;
  for (const LibraryTag& t : tags)
    if (t.provenance != TagProvenance::Observed) any_augmented = true;
  for (const LibraryTag& t : tags) {
    os << t.tag_id << '\t' << t.bb[0] << '\t' << t.bb[1] << '\t' << t.bb[2] << '\t'
       << t.counts.c_target << '\t' << t.counts.c_ntc << '\t' << t.counts.c_dls << '\t'
       << format_double(t.counts.c_promiscuity);
    if (any_augmented) os << '\t' << provenance_name(t.provenance);
    os << '\n';
  }
  if (!os) throw FileError("write failed for '" + path.string() + "'");
}

std::vector<LibraryTag> read_tags_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FileError("cannot open '" + path.string() + "'");
  std::vector<LibraryTag> tags;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    auto fields = split_line(line, '\t');
    if (fields.size() != 8 && fields.size() != 9)
      throw ParseError(path.string() + ":" + std::to_string(lineno) +
                       ": expected 8 or 9 tab-separated fields");
    LibraryTag t;
    t.tag_id = fields[0];
    t.bb = {fields[1], fields[2], fields[3]};
    t.counts.c_target = parse_i64(fields[4], "c_target");
    t.counts.c_ntc = parse_i64(fields[5], "c_ntc");
    t.counts.c_dls = parse_i64(fields[6], "c_dls");
    t.counts.c_promiscuity = parse_double(fields[7], "c_promiscuity");
    if (t.counts.c_target < 0 || t.counts.c_ntc < 0 || t.counts.c_dls < 0 ||
        t.counts.c_promiscuity < 0)
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": negative count");
    if (fields.size() == 9) {
      auto p = provenance_from_name(fields[8]);
      if (!p)
        throw ParseError(path.string() + ":" + std::to_string(lineno) +
                         ": unknown provenance '" + fields[8] + "'");
      t.provenance = *p;
    }
    tags.push_back(std::move(t));
  }
  return tags;
}

}  // namespace delmix
