#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "delmix/countmodel.hpp"
#include "delmix/simulator.hpp"

namespace delmix {

struct DegenerateVariance : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct SingleClass : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct KTooLarge : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct EmptyTestSet : std::runtime_error {
  using std::runtime_error::runtime_error;
};

double r_squared(std::span<const double> observed, std::span<const double> predicted);

// Mann-Whitney AUC; ties count one half.
double roc_auc(std::span<const double> scores, std::span<const char> labels);

// Fraction of binders among the k top-scored entries; ties resolved by
// stable input order.
double hit_rate_at_k(std::span<const double> scores, std::span<const char> labels, int k);

struct ExternalMolecule {
  std::string id;
  ProductKind kind = ProductKind::Tri;
  std::array<std::string, 3> bb{};
  MolGraph graph;
  bool is_binder = false;
};

struct ScreenEntry {
  int rank = 0;
  std::string id;
  double score = 0.0;
};

// Scores every molecule with the target-enrichment head and sorts
// descending (stable).
std::vector<ScreenEntry> screen(std::span<const ExternalMolecule> molecules,
                                Predictor& predictor, const Library& library);

struct TestSetMetrics {
  double nb_loss = 0.0;  // gamma excluded
  double r2_target = 0.0;
  double r2_ntc = 0.0;
};

TestSetMetrics evaluate_test_set(const Dataset& ds, std::span<const int> test_indices,
                                 Predictor& predictor, const CountModelParams& params);

enum class ExternalSetMode { NovelCombos, HeldoutPerturbed };

struct ExternalSetOptions {
  int size = 150;
  double binder_fraction = 0.2;
  ExternalSetMode mode = ExternalSetMode::NovelCombos;
  std::uint64_t seed = 0;
  // NovelCombos draws blocks from this set when non-empty (e.g. train-side
  // blocks); HeldoutPerturbed requires heldout_bb to be non-empty.
  std::vector<std::string> allowed_bb;
  std::vector<std::string> heldout_bb;
};

// Builds labeled external molecules from the simulation's ground truth.
std::vector<ExternalMolecule> make_external_set(const SimResult& sim,
                                                const ExternalSetOptions& opts);

// id<TAB>kind<TAB>bb1,bb2,bb3<TAB>is_binder<TAB>graph
void write_external_file(const std::filesystem::path& path,
                         std::span<const ExternalMolecule> molecules);
std::vector<ExternalMolecule> read_external_file(const std::filesystem::path& path);

void write_ranked_hits(const std::filesystem::path& path,
                       std::span<const ScreenEntry> entries);
void write_metrics_file(const std::filesystem::path& path,
                        std::span<const std::pair<std::string, double>> metrics);

}  // namespace delmix
