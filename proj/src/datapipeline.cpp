#include "delmix/datapipeline.hpp"

#include <algorithm>
#include <fstream>
#include <unordered_map>
#include <unordered_set>

#include "delmix/rng.hpp"
#include "delmix/simulator.hpp"

namespace delmix {

namespace {

std::unordered_map<std::string, int> id_index(const Dataset& ds) {
  std::unordered_map<std::string, int> m;
  for (size_t i = 0; i < ds.tags.size(); ++i) m[ds.tags[i].tag_id] = static_cast<int>(i);
  return m;
}

std::vector<int> indices_for(const Dataset& ds, const std::vector<std::string>& ids) {
  auto m = id_index(ds);
  std::vector<int> out;
  out.reserve(ids.size());
  for (const std::string& id : ids) {
    auto it = m.find(id);
    if (it == m.end()) throw LibraryError("split references unknown tag '" + id + "'");
    out.push_back(it->second);
  }
  return out;
}

}  // namespace

std::vector<int> DatasetSplit::train_indices(const Dataset& ds) const {
  return indices_for(ds, train);
}

std::vector<int> DatasetSplit::test_indices(const Dataset& ds) const {
  return indices_for(ds, test);
}

void augment_negatives(Dataset& ds, int n_ntc_only, int n_unsequenced, std::uint64_t seed) {
  if (n_ntc_only < 0 || n_unsequenced < 0)
    throw std::invalid_argument("augmentation counts must be non-negative");
  if (n_ntc_only == 0 && n_unsequenced == 0) return;

  const auto& c1 = ds.library.blocks_in_cycle(1);
  const auto& c2 = ds.library.blocks_in_cycle(2);
  const auto& c3 = ds.library.blocks_in_cycle(3);
  const std::uint64_t total =
      static_cast<std::uint64_t>(c1.size()) * c2.size() * c3.size();

  std::unordered_set<std::string> used;
  used.reserve(ds.tags.size() * 2);
  for (const LibraryTag& t : ds.tags)
    used.insert(t.bb[0] + "\t" + t.bb[1] + "\t" + t.bb[2]);
  const std::uint64_t requested = static_cast<std::uint64_t>(n_ntc_only) + n_unsequenced;
  if (used.size() + requested > total)
    throw PoolExhausted("requested " + std::to_string(requested) +
                        " augmented tags but only " + std::to_string(total - used.size()) +
                        " unused triples remain");

  Rng rng(derive_seed(seed, "augment"));
  auto fresh_triple = [&](std::array<std::string, 3>& bb) {
    for (;;) {
      const int i1 = c1[rng.below(c1.size())];
      const int i2 = c2[rng.below(c2.size())];
      const int i3 = c3[rng.below(c3.size())];
      bb = {ds.library.block(i1).id, ds.library.block(i2).id, ds.library.block(i3).id};
      if (used.insert(bb[0] + "\t" + bb[1] + "\t" + bb[2]).second) return;
    }
  };

  char buf[32];
  for (int i = 0; i < n_ntc_only; ++i) {
    LibraryTag t;
    std::snprintf(buf, sizeof(buf), "ntc%06d", i);
    t.tag_id = buf;
    fresh_triple(t.bb);
    t.counts.c_target = 0;
    t.counts.c_ntc = 1 + nb_sample(5.0, 0.5, rng);
    t.counts.c_dls = nb_sample(30.0, 0.3, rng);
    t.counts.c_promiscuity = rng.gamma(1.0, 0.5);
    t.provenance = TagProvenance::NtcOnly;
    ds.tags.push_back(std::move(t));
  }
  for (int i = 0; i < n_unsequenced; ++i) {
    LibraryTag t;
    std::snprintf(buf, sizeof(buf), "unseq%06d", i);
    t.tag_id = buf;
    fresh_triple(t.bb);
    t.counts.c_target = 0;
    t.counts.c_ntc = 0;
    t.counts.c_dls = nb_sample(30.0, 0.3, rng);
    t.counts.c_promiscuity = rng.gamma(1.0, 0.5);
    t.provenance = TagProvenance::Unsequenced;
    ds.tags.push_back(std::move(t));
  }
}

DatasetSplit split(const Dataset& ds, double holdout_fraction, std::uint64_t seed) {
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0))
    throw std::invalid_argument("holdout_fraction must be in (0,1)");
  const auto& c2 = ds.library.blocks_in_cycle(2);
  if (c2.empty()) throw DegenerateSplit("library has no cycle-2 blocks");

  std::vector<int> order(c2.begin(), c2.end());
  Rng rng(derive_seed(seed, "split"));
  for (size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[rng.below(i)]);

  const int n_held = std::max(
      1, static_cast<int>(std::lround(holdout_fraction * static_cast<double>(order.size()))));
  if (n_held >= static_cast<int>(order.size()))
    throw DegenerateSplit("holdout fraction leaves no training blocks");

  DatasetSplit s;
  s.seed = seed;
  s.fraction = holdout_fraction;
  for (int i = 0; i < n_held; ++i) s.heldout_bb_ids.insert(ds.library.block(order[i]).id);

  for (const LibraryTag& t : ds.tags) {
    if (s.heldout_bb_ids.count(t.bb[1]))
      s.test.push_back(t.tag_id);
    else
      s.train.push_back(t.tag_id);
  }
  if (s.train.empty() || s.test.empty())
    throw DegenerateSplit("split produced an empty train or test side");
  return s;
}

void write_split_file(const std::filesystem::path& path, const DatasetSplit& s) {
  std::ofstream os(path);
  if (!os) throw FileError("cannot open '" + path.string() + "' for writing");
  os << "# seed=" << s.seed << " fraction=" << format_double(s.fraction) << '\n';
  os << "# heldout_bb=";
  bool first = true;
  for (const std::string& id : s.heldout_bb_ids) {
    if (!first) os << ',';
    os << id;
    first = false;
  }
  os << '\n';
  for (const std::string& id : s.train) os << id << "\ttrain\n";
  for (const std::string& id : s.test) os << id << "\ttest\n";
}

DatasetSplit read_split_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FileError("cannot open '" + path.string() + "'");
  DatasetSplit s;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      const std::string held = "# heldout_bb=";
      if (line.rfind(held, 0) == 0) {
        std::string rest = line.substr(held.size());
        size_t start = 0;
        while (start <= rest.size() && !rest.empty()) {
          size_t pos = rest.find(',', start);
          if (pos == std::string::npos) {
            s.heldout_bb_ids.insert(rest.substr(start));
            break;
          }
          s.heldout_bb_ids.insert(rest.substr(start, pos - start));
          start = pos + 1;
        }
      }
      continue;
    }
    size_t tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError("bad split line '" + line + "'");
    const std::string id = line.substr(0, tab);
    const std::string side = line.substr(tab + 1);
    if (side == "train")
      s.train.push_back(id);
    else if (side == "test")
      s.test.push_back(id);
    else
      throw ParseError("bad split side '" + side + "'");
  }
  return s;
}

}  // namespace delmix
