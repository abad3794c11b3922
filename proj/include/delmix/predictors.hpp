#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "delmix/diffengine.hpp"
#include "delmix/library.hpp"

namespace delmix {

struct PredictorError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ParamBlock {
  std::string name;
  Mat w;
};

// One product to score: which kind it is, which blocks it uses (global
// library indices) and, for graph predictors, its assembled graph.
struct ProductInput {
  ProductKind kind = ProductKind::Tri;
  std::vector<int> blocks;
  const MolGraph* graph = nullptr;
};

struct PredictorOutput {
  double r_target = 0.0;
  double r_ntc = 0.0;
  double p_adjust = 0.0;
};

// Column nodes (P x 1) over a batch of products.
struct PredictorBatch {
  NodeId r_target = -1;
  NodeId r_ntc = -1;
  NodeId p_adjust = -1;
};

class Predictor {
 public:
  virtual ~Predictor() = default;

  virtual PredictorBatch forward_batch(Tape& tape, std::span<const ProductInput> products,
                                       bool want_adjust) = 0;
  virtual std::vector<ParamBlock>& param_blocks() = 0;
  const std::vector<ParamBlock>& param_blocks() const {
    return const_cast<Predictor*>(this)->param_blocks();
  }
  virtual bool has_adjust_head() const = 0;
  virtual bool needs_graphs() const = 0;
  virtual std::string kind() const = 0;
  virtual nlohmann::json config_json() const = 0;

  // Param leaf nodes bound by the most recent forward_batch, aligned with
  // param_blocks(). Valid until the tape is discarded.
  const std::vector<NodeId>& bound_param_nodes() const { return bound_nodes_; }

  // Convenience single-product forward on a private tape.
  PredictorOutput forward_one(const ProductInput& product, bool want_adjust);

  std::size_t total_params() const;

 protected:
  std::vector<NodeId> bound_nodes_;
};

struct EmbedConfig {
  int dim = 32;
  int head_hidden = 32;
  bool adjust_head = false;
  std::uint64_t seed = 0;
};

struct MpnnConfig {
  int hidden_dim = 32;
  int message_steps = 3;
  int readout_dim = 32;  // paper-scale 128 available via config
  int head_hidden = 32;
  bool adjust_head = false;
  std::uint64_t seed = 0;
};

std::unique_ptr<Predictor> make_embed_predictor(const EmbedConfig& cfg, int n_blocks);
std::unique_ptr<Predictor> make_mpnn_predictor(const MpnnConfig& cfg);

nlohmann::json predictor_to_json(const Predictor& p);
std::unique_ptr<Predictor> predictor_from_json(const nlohmann::json& j);

}  // namespace delmix
