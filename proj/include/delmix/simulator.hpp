#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "delmix/library.hpp"
#include "delmix/rng.hpp"

namespace delmix {

struct ConfigInvalid : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct YieldDistribution {
  enum class Kind { Uniform, Fixed };
  Kind kind = Kind::Uniform;
  double lo = 0.4;
  double hi = 0.95;
  double value = 0.7;

  double sample(Rng& rng) const {
    return kind == Kind::Fixed ? value : rng.uniform(lo, hi);
  }
  static YieldDistribution parse(std::string_view text);  // "uniform(a,b)" | "fixed(v)"
  std::string str() const;
};

// True regression weights the simulator plugs into the count means.
struct SimTrueParams {
  double beta_ntc = 0.4;
  double beta_dls = 0.8;
  double beta_promiscuity = 0.5;
  double beta_constant = 0.5;
  double beta2_dls = 0.9;
  double beta2_promiscuity = 0.7;
  double beta2_constant = 0.8;
  double alpha_target = 0.5;
  double alpha_ntc = 0.5;
};

struct SimConfig {
  int n_bb_per_cycle = 50;
  int n_tags = 20000;
  YieldDistribution yields;
  double binder_pair_fraction = 0.02;
  double enrichment_scale = 12.0;
  double ntc_enrichment_scale = 6.0;
  double noise_on_reported_yields = 0.1;
  std::uint64_t seed = 1;
  SimTrueParams true_params;
  double promiscuous_fraction = 0.05;
  double dls_log_mean = 3.4;  // log-normal abundance of starting material
  double dls_log_sd = 0.5;
  double alpha_dls = 0.3;

  void validate() const;  // throws ConfigInvalid naming the bad key
};

// Gamma-Poisson draw with mean mu and variance mu + alpha*mu^2.
std::int64_t nb_sample(double mu, double alpha, Rng& rng);

// Structural fingerprint used to decide which building-block pairs bind.
inline constexpr int kFingerprintDim = 15;
std::array<double, kFingerprintDim> structure_fingerprint(const MolGraph& g);

// Enrichment is conferred by sparse building-block pairs: a pair binds when
// its bilinear structure score clears a per-cycle-pair quantile threshold,
// and the effect grows with the excess score. Because the rule is a
// function of structure alone it extends to fragments outside the library.
struct BinderRule {
  // 3 cycle pairs: (1,2), (1,3), (2,3)
  std::array<std::vector<double>, 3> weights_target;  // kFingerprintDim^2 each
  std::array<std::vector<double>, 3> weights_ntc;
  std::array<double, 3> threshold_target{};
  std::array<double, 3> threshold_ntc{};
  std::array<double, 3> norm_target{};
  std::array<double, 3> norm_ntc{};
  double scale_target = 0.0;
  double scale_ntc = 0.0;

  static int cycle_pair_index(int cycle_a, int cycle_b);
  double score(const std::vector<double>& w, std::span<const double> fa,
               std::span<const double> fb) const;
  double effect_target(int cp, std::span<const double> fa, std::span<const double> fb) const;
  double effect_ntc(int cp, std::span<const double> fa, std::span<const double> fb) const;
};

struct ProductTruth {
  ProductKind kind = ProductKind::Tri;
  double p_true = 0.0;
  double r_target = 0.0;
  double r_ntc = 0.0;
};

struct TagTruth {
  std::vector<ProductTruth> products;
  double b_target = 0.0;
  double b_ntc = 0.0;
  double mu_target = 0.0;
  double mu_ntc = 0.0;
};

struct GroundTruth {
  std::vector<double> true_yields;  // by global block index
  std::vector<TagTruth> tags;       // aligned with SimResult::tags
  SimTrueParams params;
  BinderRule rule;
  std::vector<std::array<double, kFingerprintDim>> block_fingerprints;

  // Sum of pair effects over the building blocks of one product.
  double product_r_target(const Library& lib, std::span<const int> blocks) const;
  double product_r_ntc(const Library& lib, std::span<const int> blocks) const;
};

struct SimResult {
  SimConfig config;
  Library library;  // carries reported (noisy) yields
  std::vector<LibraryTag> tags;
  GroundTruth truth;
};

SimResult simulate(const SimConfig& cfg, int threads = 1);

// fragments.tsv, tags.tsv, ground_truth.tsv, true_yields.tsv
void write_simulation(const std::filesystem::path& dir, const SimResult& result);

}  // namespace delmix
