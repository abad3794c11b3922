#include "delmix/predictors.hpp"

#include <cmath>

#include "delmix/rng.hpp"

namespace delmix {

namespace {

Mat init_weight(int rows, int cols, Rng& rng) {
  Mat m(rows, cols);
  const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
  for (double& v : m.a) v = rng.uniform(-bound, bound);
  return m;
}

// Shared 2-layer head: tanh hidden then a linear scalar output.
struct HeadIds {
  NodeId w1, b1, w2, b2;
};

NodeId apply_head(Tape& tape, NodeId input, const HeadIds& h) {
  NodeId hidden = tape.tanh(tape.add(tape.matmul(input, h.w1), h.b1));
  return tape.add(tape.matmul(hidden, h.w2), h.b2);
}

}  // namespace

PredictorOutput Predictor::forward_one(const ProductInput& product, bool want_adjust) {
  Tape tape;
  PredictorBatch batch = forward_batch(tape, std::span(&product, 1), want_adjust);
  PredictorOutput out;
  out.r_target = tape.value(batch.r_target).a[0];
  out.r_ntc = tape.value(batch.r_ntc).a[0];
  if (batch.p_adjust >= 0) out.p_adjust = tape.value(batch.p_adjust).a[0];
  return out;
}

std::size_t Predictor::total_params() const {
  std::size_t n = 0;
  for (const ParamBlock& b : param_blocks()) n += static_cast<std::size_t>(b.w.size());
  return n;
}

// ---------------------------------------------------------------------------
// Building-block embedding predictor: the trunk is the sum of the product's
// block embeddings plus a product-kind embedding.

class EmbedPredictor final : public Predictor {
 public:
  EmbedPredictor(const EmbedConfig& cfg, int n_blocks) : cfg_(cfg), n_blocks_(n_blocks) {
    Rng rng(derive_seed(cfg.seed, "embed-init"));
    auto push = [&](const std::string& name, int r, int c, bool zero = false) {
      blocks_.push_back({name, zero ? Mat(r, c) : init_weight(r, c, rng)});
    };
    push("bb_embedding", n_blocks, cfg.dim);
    push("kind_embedding", kNumProductKinds, cfg.dim);
    push_head(push, "target");
    push_head(push, "ntc");
    if (cfg.adjust_head) push_head(push, "adjust");
  }

  PredictorBatch forward_batch(Tape& tape, std::span<const ProductInput> products,
                               bool want_adjust) override {
    if (want_adjust && !cfg_.adjust_head)
      throw PredictorError("adjust output requested but the adjust head is disabled");
    bound_nodes_.clear();
    for (const ParamBlock& b : blocks_) bound_nodes_.push_back(tape.param(b.w));

    std::vector<int> flat_blocks;
    std::vector<int> flat_product;
    std::vector<int> kind_rows;
    kind_rows.reserve(products.size());
    for (size_t p = 0; p < products.size(); ++p) {
      if (products[p].blocks.empty())
        throw PredictorError("product has no building blocks");
      for (int b : products[p].blocks) {
        if (b < 0 || b >= n_blocks_)
          throw UnknownBuildingBlock("embedding index " + std::to_string(b) +
                                     " outside table of " + std::to_string(n_blocks_));
        flat_blocks.push_back(b);
        flat_product.push_back(static_cast<int>(p));
      }
      kind_rows.push_back(static_cast<int>(products[p].kind));
    }

    NodeId gathered = tape.gather_rows(bound_nodes_[0], std::move(flat_blocks));
    NodeId summed = tape.scatter_add_rows(gathered, std::move(flat_product),
                                          static_cast<int>(products.size()));
    NodeId kinds = tape.gather_rows(bound_nodes_[1], std::move(kind_rows));
    NodeId trunk = tape.add(summed, kinds);

    PredictorBatch out;
    out.r_target = apply_head(tape, trunk, head_ids(2));
    out.r_ntc = apply_head(tape, trunk, head_ids(6));
    if (want_adjust) out.p_adjust = apply_head(tape, trunk, head_ids(10));
    return out;
  }

  std::vector<ParamBlock>& param_blocks() override { return blocks_; }
  bool has_adjust_head() const override { return cfg_.adjust_head; }
  bool needs_graphs() const override { return false; }
  std::string kind() const override { return "embed"; }

  nlohmann::json config_json() const override {
    return {{"dim", cfg_.dim},
            {"head_hidden", cfg_.head_hidden},
            {"adjust_head", cfg_.adjust_head},
            {"seed", cfg_.seed},
            {"n_blocks", n_blocks_}};
  }

 private:
  template <typename Push>
  void push_head(Push push, const std::string& tag) {
    push("head_" + tag + "_w1", cfg_.dim, cfg_.head_hidden);
    push("head_" + tag + "_b1", 1, cfg_.head_hidden, true);
    push("head_" + tag + "_w2", cfg_.head_hidden, 1);
    push("head_" + tag + "_b2", 1, 1, true);
  }

  HeadIds head_ids(int first) const {
    return {bound_nodes_[first], bound_nodes_[first + 1], bound_nodes_[first + 2],
            bound_nodes_[first + 3]};
  }

  EmbedConfig cfg_;
  int n_blocks_;
  std::vector<ParamBlock> blocks_;
};

// ---------------------------------------------------------------------------
// Message-passing graph network over a disjoint union of the batch graphs.

class MpnnPredictor final : public Predictor {
 public:
  explicit MpnnPredictor(const MpnnConfig& cfg) : cfg_(cfg) {
    Rng rng(derive_seed(cfg.seed, "mpnn-init"));
    const int h = cfg.hidden_dim;
    auto push = [&](const std::string& name, int r, int c, bool zero = false) {
      blocks_.push_back({name, zero ? Mat(r, c) : init_weight(r, c, rng)});
    };
    push("init_w", kAtomFeatureDim, h);
    push("init_b", 1, h, true);
    push("msg_w", h + kBondFeatureDim, h);
    push("msg_b", 1, h, true);
    push("gate_w", 2 * h, h);
    push("gate_b", 1, h, true);
    push("cand_w", 2 * h, h);
    push("cand_b", 1, h, true);
    push("read_gate_w", h, 1);
    push("read_gate_b", 1, 1, true);
    push("read_proj_w", h, cfg.readout_dim);
    push("read_proj_b", 1, cfg.readout_dim, true);
    push_head(push, "target");
    push_head(push, "ntc");
    if (cfg.adjust_head) push_head(push, "adjust");
  }

  PredictorBatch forward_batch(Tape& tape, std::span<const ProductInput> products,
                               bool want_adjust) override {
    if (want_adjust && !cfg_.adjust_head)
      throw PredictorError("adjust output requested but the adjust head is disabled");
    bound_nodes_.clear();
    for (const ParamBlock& b : blocks_) bound_nodes_.push_back(tape.param(b.w));

    // Disjoint union of the batch graphs.
    int n_atoms = 0;
    int n_dir_edges = 0;
    for (const ProductInput& p : products) {
      if (!p.graph) throw PredictorError("graph predictor given a product without a graph");
      n_atoms += p.graph->atom_count();
      n_dir_edges += 2 * p.graph->bond_count();
    }
    Mat atom_feats(n_atoms, kAtomFeatureDim);
    Mat bond_feats(n_dir_edges, kBondFeatureDim);
    std::vector<int> src;
    std::vector<int> dst;
    std::vector<int> atom_graph;
    src.reserve(n_dir_edges);
    dst.reserve(n_dir_edges);
    atom_graph.reserve(n_atoms);
    int atom_offset = 0;
    int edge_offset = 0;
    for (size_t p = 0; p < products.size(); ++p) {
      const MolGraph& g = *products[p].graph;
      const FeatureMatrix fm = featurize(g);
      for (int i = 0; i < fm.n_atoms; ++i) {
        for (int j = 0; j < kAtomFeatureDim; ++j)
          atom_feats.at(atom_offset + i, j) = fm.atom_features[i * kAtomFeatureDim + j];
        atom_graph.push_back(static_cast<int>(p));
      }
      for (int b = 0; b < fm.n_bonds; ++b) {
        for (int dir = 0; dir < 2; ++dir) {
          const int e = edge_offset + 2 * b + dir;
          for (int j = 0; j < kBondFeatureDim; ++j)
            bond_feats.at(e, j) = fm.bond_features[b * kBondFeatureDim + j];
          src.push_back(atom_offset + (dir == 0 ? g.bonds[b].i : g.bonds[b].j));
          dst.push_back(atom_offset + (dir == 0 ? g.bonds[b].j : g.bonds[b].i));
        }
      }
      atom_offset += fm.n_atoms;
      edge_offset += 2 * fm.n_bonds;
    }

    NodeId feats = tape.constant(std::move(atom_feats));
    NodeId bonds = tape.constant(std::move(bond_feats));
    NodeId state = tape.add(tape.matmul(feats, bound_nodes_[0]), bound_nodes_[1]);

    for (int step = 0; step < cfg_.message_steps; ++step) {
      NodeId neighbor = tape.gather_rows(state, src);
      NodeId msg_in = tape.concat_cols(neighbor, bonds);
      NodeId msg = tape.add(tape.matmul(msg_in, bound_nodes_[2]), bound_nodes_[3]);
      NodeId agg = tape.scatter_add_rows(msg, dst, n_atoms);
      NodeId update_in = tape.concat_cols(state, agg);
      NodeId z = tape.sigmoid(tape.add(tape.matmul(update_in, bound_nodes_[4]), bound_nodes_[5]));
      NodeId cand = tape.tanh(tape.add(tape.matmul(update_in, bound_nodes_[6]), bound_nodes_[7]));
      NodeId keep = tape.mul(tape.affine(z, -1.0, 1.0), state);
      state = tape.add(keep, tape.mul(z, cand));
    }

    NodeId gate =
        tape.sigmoid(tape.add(tape.matmul(state, bound_nodes_[8]), bound_nodes_[9]));
    NodeId proj = tape.add(tape.matmul(state, bound_nodes_[10]), bound_nodes_[11]);
    NodeId weighted = tape.mul(proj, gate);
    NodeId encoding =
        tape.scatter_add_rows(weighted, atom_graph, static_cast<int>(products.size()));

    PredictorBatch out;
    out.r_target = apply_head(tape, encoding, head_ids(12));
    out.r_ntc = apply_head(tape, encoding, head_ids(16));
    if (want_adjust) out.p_adjust = apply_head(tape, encoding, head_ids(20));
    return out;
  }

  std::vector<ParamBlock>& param_blocks() override { return blocks_; }
  bool has_adjust_head() const override { return cfg_.adjust_head; }
  bool needs_graphs() const override { return true; }
  std::string kind() const override { return "mpnn"; }

  nlohmann::json config_json() const override {
    return {{"hidden_dim", cfg_.hidden_dim},
            {"message_steps", cfg_.message_steps},
            {"readout_dim", cfg_.readout_dim},
            {"head_hidden", cfg_.head_hidden},
            {"adjust_head", cfg_.adjust_head},
            {"seed", cfg_.seed}};
  }

 private:
  template <typename Push>
  void push_head(Push push, const std::string& tag) {
    push("head_" + tag + "_w1", cfg_.readout_dim, cfg_.head_hidden);
    push("head_" + tag + "_b1", 1, cfg_.head_hidden, true);
    push("head_" + tag + "_w2", cfg_.head_hidden, 1);
    push("head_" + tag + "_b2", 1, 1, true);
  }

  HeadIds head_ids(int first) const {
    return {bound_nodes_[first], bound_nodes_[first + 1], bound_nodes_[first + 2],
            bound_nodes_[first + 3]};
  }

  MpnnConfig cfg_;
  std::vector<ParamBlock> blocks_;
};

std::unique_ptr<Predictor> make_embed_predictor(const EmbedConfig& cfg, int n_blocks) {
  if (cfg.dim < 1 || cfg.head_hidden < 1 || n_blocks < 1)
    throw PredictorError("embed predictor dimensions must be positive");
  return std::make_unique<EmbedPredictor>(cfg, n_blocks);
}

std::unique_ptr<Predictor> make_mpnn_predictor(const MpnnConfig& cfg) {
  if (cfg.hidden_dim < 1 || cfg.message_steps < 1 || cfg.readout_dim < 1 ||
      cfg.head_hidden < 1)
    throw PredictorError("mpnn predictor dimensions must be positive");
  return std::make_unique<MpnnPredictor>(cfg);
}

nlohmann::json predictor_to_json(const Predictor& p) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const ParamBlock& b : p.param_blocks()) {
    blocks.push_back({{"name", b.name},
                      {"rows", b.w.rows},
                      {"cols", b.w.cols},
                      {"data", b.w.a}});
  }
  return {{"kind", p.kind()}, {"config", p.config_json()}, {"blocks", blocks}};
}

std::unique_ptr<Predictor> predictor_from_json(const nlohmann::json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  const nlohmann::json& cfg = j.at("config");
  std::unique_ptr<Predictor> p;
  if (kind == "embed") {
    EmbedConfig ec;
    ec.dim = cfg.at("dim").get<int>();
    ec.head_hidden = cfg.at("head_hidden").get<int>();
    ec.adjust_head = cfg.at("adjust_head").get<bool>();
    ec.seed = cfg.at("seed").get<std::uint64_t>();
    p = make_embed_predictor(ec, cfg.at("n_blocks").get<int>());
  } else if (kind == "mpnn") {
    MpnnConfig mc;
    mc.hidden_dim = cfg.at("hidden_dim").get<int>();
    mc.message_steps = cfg.at("message_steps").get<int>();
    mc.readout_dim = cfg.at("readout_dim").get<int>();
    mc.head_hidden = cfg.at("head_hidden").get<int>();
    mc.adjust_head = cfg.at("adjust_head").get<bool>();
    mc.seed = cfg.at("seed").get<std::uint64_t>();
    p = make_mpnn_predictor(mc);
  } else {
    throw PredictorError("unknown predictor kind '" + kind + "'");
  }
  auto& blocks = p->param_blocks();
  const nlohmann::json& jb = j.at("blocks");
  if (jb.size() != blocks.size()) throw PredictorError("checkpoint block count mismatch");
  for (size_t i = 0; i < blocks.size(); ++i) {
    if (jb[i].at("name").get<std::string>() != blocks[i].name ||
        jb[i].at("rows").get<int>() != blocks[i].w.rows ||
        jb[i].at("cols").get<int>() != blocks[i].w.cols)
      throw PredictorError("checkpoint block '" + blocks[i].name + "' shape mismatch");
    jb[i].at("data").get_to(blocks[i].w.a);
    if (static_cast<int>(blocks[i].w.a.size()) != blocks[i].w.size())
      throw PredictorError("checkpoint block '" + blocks[i].name + "' size mismatch");
  }
  return p;
}

}  // namespace delmix
