#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "delmix/datapipeline.hpp"
#include "delmix/diffengine.hpp"
#include "delmix/library.hpp"
#include "delmix/predictors.hpp"

namespace delmix {

struct InvalidParams : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ArmMismatch : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct AdjustMissing : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NonConvergence : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NaNLoss : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Arm { Full, TriOnly, DiOnly };
std::string_view arm_name(Arm a);
std::optional<Arm> arm_from_name(std::string_view s);

enum class ProportionBase { Lab, Flat };
enum class CovariateTransform { Identity, Log1p };
enum class AdjustSigma { Sigmoid, Softplus };

struct ProportionMode {
  ProportionBase base = ProportionBase::Lab;
  double flat_p = 0.147;
  bool learned_adjust = false;

  std::string str() const;
  static ProportionMode parse(std::string_view s);
};

struct CountModelParams {
  // Target channel (Eq. with the NTC carry-over term).
  double beta_ntc = 0.0;
  double beta_dls = 0.0;
  double beta_promiscuity = 0.0;
  double beta_constant = 0.0;
  // NTC channel (primed betas).
  double beta2_dls = 0.0;
  double beta2_promiscuity = 0.0;
  double beta2_constant = 0.0;

  double alpha_target = 0.5;  // fixed after the dispersion pre-fit
  double alpha_ntc = 0.5;
  double gamma = 1e-4;

  ProportionMode proportions;
  Arm arm = Arm::Full;
  CovariateTransform covariate_transform = CovariateTransform::Log1p;
  AdjustSigma adjust_sigma = AdjustSigma::Sigmoid;
  bool freeze_betas = false;
  bool include_mono = false;

  void validate() const;  // throws InvalidParams
  double transform_covariate(double c) const;
};

// Effective product proportion under the configured mode.
double effective_proportion(double p_lab, std::optional<double> p_adjust,
                            const ProportionMode& mode,
                            AdjustSigma sigma = AdjustSigma::Sigmoid);

// Eqs: mixture of per-product enrichments weighted by effective proportions.
std::pair<double, double> compose_b(const ProductMixture& mixture,
                                    std::span<const PredictorOutput> outputs, Arm arm,
                                    const ProportionMode& mode,
                                    AdjustSigma sigma = AdjustSigma::Sigmoid);

double mu_target(double b_target, double b_ntc, const CountRecord& counts,
                 const CountModelParams& params);
double mu_ntc(double b_ntc, const CountRecord& counts, const CountModelParams& params);

// Negative binomial negative log-likelihood via log-gamma.
double nb_nll(std::int64_t c, double mu, double alpha);

struct TagPrediction {
  double b_target = 0.0;
  double b_ntc = 0.0;
  double mu_target = 0.0;
  double mu_ntc = 0.0;
  std::vector<double> p_effective;
};

TagPrediction predict_tag(const ProductMixture& mixture,
                          std::span<const PredictorOutput> outputs,
                          const CountRecord& counts, const CountModelParams& params);

// Full per-example loss: both channel NLLs plus the enrichment regularizer
// summed over every scored product and both heads.
double tag_loss(const ProductMixture& mixture, std::span<const PredictorOutput> outputs,
                const CountRecord& counts, const CountModelParams& params);

enum class Channel { Target, Ntc };

struct DispersionFit {
  double alpha = 0.0;
  double beta_dls = 0.0;
  double beta_promiscuity = 0.0;
  double beta_constant = 0.0;
  int iterations = 0;
};

struct DispersionOptions {
  int max_iterations = 20000;
  double lr = 0.05;
  double grad_tol = 1e-7;
  int stagnation_window = 300;
  CovariateTransform covariate_transform = CovariateTransform::Log1p;
};

// Enrichment-free NB regression maximizing likelihood jointly over the
// nuisance betas and the dispersion.
DispersionFit fit_dispersion(std::span<const LibraryTag> tags, Channel channel,
                             const DispersionOptions& opts = {});

// -------------------------------------------------------------------------
// Training

struct TrainOptions {
  int epochs = 15;
  int batch = 32;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double test_loss = 0.0;  // pure NLL, regularizer excluded
  double r2_target = 0.0;
  double r2_ntc = 0.0;
};

struct TrainResult {
  CountModelParams params;
  std::vector<EpochStats> curve;
};

// Per-tag tensors prepared once per training/evaluation run. Graphs are
// assembled lazily and shared across tags (disynthons repeat).
class PreparedTags {
 public:
  struct ProductEntry {
    ProductKind kind;
    std::vector<int> blocks;
    const MolGraph* graph = nullptr;
    double p_lab = 0.0;
  };
  struct TagEntry {
    int dataset_index = 0;
    double x_dls = 0.0;
    double x_prom = 0.0;
    std::int64_t c_target = 0;
    std::int64_t c_ntc = 0;
    std::vector<ProductEntry> products;
  };

  static PreparedTags prepare(const Dataset& ds, std::span<const int> tag_indices,
                              const CountModelParams& params, bool needs_graphs);

  const std::vector<TagEntry>& tags() const { return tags_; }

 private:
  std::vector<TagEntry> tags_;
  std::unordered_map<std::string, std::unique_ptr<MolGraph>> graph_cache_;
};

struct BatchNodes {
  NodeId loss = -1;      // objective (mean NLL + regularizer)
  NodeId mean_nll = -1;  // gamma-free monitoring value
  NodeId mu_target = -1;
  NodeId mu_ntc = -1;
  NodeId r_target = -1;
  NodeId r_ntc = -1;
  std::vector<NodeId> beta_nodes;  // empty when betas are frozen constants
};

// Builds the full forward graph for one batch of prepared tags.
BatchNodes build_batch(Tape& tape, const PreparedTags& prepared,
                       std::span<const int> batch_positions, Predictor& predictor,
                       const CountModelParams& params, bool betas_trainable);

using EpochHook = std::function<void(const EpochStats&, const CountModelParams&)>;

TrainResult train(const Dataset& ds, const DatasetSplit& split, Predictor& predictor,
                  CountModelParams params, const TrainOptions& opts,
                  const EpochHook& hook = nullptr);

// Batched no-grad forward over an index set.
struct PredictedSet {
  std::vector<double> mu_target;
  std::vector<double> mu_ntc;
  std::vector<std::int64_t> c_target;
  std::vector<std::int64_t> c_ntc;
  double mean_nll = 0.0;
};

PredictedSet predict_set(const Dataset& ds, std::span<const int> tag_indices,
                         Predictor& predictor, const CountModelParams& params);

// Checkpoints hold the predictor blocks plus the count-model parameters and
// round-trip bit-exactly.
void save_checkpoint(const std::filesystem::path& path, const Predictor& predictor,
                     const CountModelParams& params);
struct Checkpoint {
  std::unique_ptr<Predictor> predictor;
  CountModelParams params;
};
Checkpoint load_checkpoint(const std::filesystem::path& path);

void write_metrics_log(const std::filesystem::path& path,
                       std::span<const EpochStats> curve);

}  // namespace delmix
