#include "delmix/countmodel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "delmix/rng.hpp"

namespace delmix {

std::string_view arm_name(Arm a) {
  switch (a) {
    case Arm::Full:
      return "full";
    case Arm::TriOnly:
      return "tri_only";
    case Arm::DiOnly:
      return "di_only";
  }
  return "full";
}

std::optional<Arm> arm_from_name(std::string_view s) {
  if (s == "full") return Arm::Full;
  if (s == "tri_only") return Arm::TriOnly;
  if (s == "di_only") return Arm::DiOnly;
  return std::nullopt;
}

std::string ProportionMode::str() const {
  if (base == ProportionBase::Lab)
    return learned_adjust ? "lab_plus_learned_adjust" : "lab_fixed";
  std::string tail = ":" + format_double(flat_p);
  return (learned_adjust ? "flat_plus_learned_adjust" : "flat") + tail;
}

ProportionMode ProportionMode::parse(std::string_view s) {
  ProportionMode m;
  if (s == "lab_fixed") return m;
  if (s == "lab_plus_learned_adjust") {
    m.learned_adjust = true;
    return m;
  }
  auto parse_flat = [&](std::string_view tail, bool adjust) {
    m.base = ProportionBase::Flat;
    m.learned_adjust = adjust;
    if (!tail.empty()) {
      if (tail[0] != ':')
        throw InvalidParams("bad proportion mode '" + std::string(s) + "'");
      try {
        m.flat_p = std::stod(std::string(tail.substr(1)));
      } catch (const std::exception&) {
        throw InvalidParams("bad flat proportion in '" + std::string(s) + "'");
      }
    }
    return m;
  };
  const std::string_view flat = "flat";
  const std::string_view flat_adj = "flat_plus_learned_adjust";
  if (s.rfind(flat_adj, 0) == 0) return parse_flat(s.substr(flat_adj.size()), true);
  if (s.rfind(flat, 0) == 0) return parse_flat(s.substr(flat.size()), false);
  throw InvalidParams("unknown proportion mode '" + std::string(s) + "'");
}

void CountModelParams::validate() const {
  if (alpha_target <= 0.0 || alpha_ntc <= 0.0)
    throw InvalidParams("dispersion alphas must be > 0");
  if (gamma < 0.0) throw InvalidParams("gamma must be >= 0");
  if (proportions.base == ProportionBase::Flat &&
      (proportions.flat_p < 0.0 || proportions.flat_p > 1.0))
    throw InvalidParams("flat proportion must be in [0,1]");
}

double CountModelParams::transform_covariate(double c) const {
  return covariate_transform == CovariateTransform::Log1p ? std::log1p(c) : c;
}

double effective_proportion(double p_lab, std::optional<double> p_adjust,
                            const ProportionMode& mode, AdjustSigma sigma) {
  if (!(p_lab >= 0.0 && p_lab <= 1.0))
    throw InvalidParams("p_lab " + std::to_string(p_lab) + " outside [0,1]");
  const double base = mode.base == ProportionBase::Flat ? mode.flat_p : p_lab;
  if (!mode.learned_adjust) return base;
  if (!p_adjust) throw AdjustMissing("adjusted proportion mode requires an adjust output");
  return sigma == AdjustSigma::Sigmoid ? sigmoid(*p_adjust + base)
                                       : softplus(*p_adjust + base);
}

namespace {

bool arm_uses(Arm arm, ProductKind kind) {
  const bool is_tri = kind == ProductKind::Tri;
  const bool is_di = kind == ProductKind::Di12 || kind == ProductKind::Di13 ||
                     kind == ProductKind::Di23;
  switch (arm) {
    case Arm::Full:
      return true;
    case Arm::TriOnly:
      return is_tri;
    case Arm::DiOnly:
      return is_di;
  }
  return false;
}

void check_arm_products(Arm arm, const ProductMixture& mixture) {
  const bool has_tri = mixture.find(ProductKind::Tri) != nullptr;
  const bool has_di = mixture.find(ProductKind::Di12) && mixture.find(ProductKind::Di13) &&
                      mixture.find(ProductKind::Di23);
  if ((arm == Arm::Full || arm == Arm::TriOnly) && !has_tri)
    throw ArmMismatch("arm requires a trisynthon product");
  if ((arm == Arm::Full || arm == Arm::DiOnly) && !has_di)
    throw ArmMismatch("arm requires all three disynthon products");
}

}  // namespace

std::pair<double, double> compose_b(const ProductMixture& mixture,
                                    std::span<const PredictorOutput> outputs, Arm arm,
                                    const ProportionMode& mode, AdjustSigma sigma) {
  if (outputs.size() != mixture.products.size())
    throw InvalidParams("outputs not aligned with products");
  check_arm_products(arm, mixture);
  double b_target = 0.0;
  double b_ntc = 0.0;
  for (size_t k = 0; k < mixture.products.size(); ++k) {
    if (!arm_uses(arm, mixture.products[k].kind)) continue;
    const std::optional<double> adj =
        mode.learned_adjust ? std::optional<double>(outputs[k].p_adjust) : std::nullopt;
    const double p = effective_proportion(mixture.products[k].p_lab, adj, mode, sigma);
    b_target += p * outputs[k].r_target;
    b_ntc += p * outputs[k].r_ntc;
  }
  return {b_target, b_ntc};
}

double mu_target(double b_target, double b_ntc, const CountRecord& counts,
                 const CountModelParams& params) {
  const double x_dls = params.transform_covariate(static_cast<double>(counts.c_dls));
  const double x_prom = params.transform_covariate(counts.c_promiscuity);
  return softplus(b_target + params.beta_ntc * b_ntc + params.beta_dls * x_dls +
                  params.beta_promiscuity * x_prom + params.beta_constant);
}

double mu_ntc(double b_ntc, const CountRecord& counts, const CountModelParams& params) {
  const double x_dls = params.transform_covariate(static_cast<double>(counts.c_dls));
  const double x_prom = params.transform_covariate(counts.c_promiscuity);
  return softplus(b_ntc + params.beta2_dls * x_dls + params.beta2_promiscuity * x_prom +
                  params.beta2_constant);
}

double nb_nll(std::int64_t c, double mu, double alpha) {
  if (c < 0) throw InvalidParams("count must be non-negative");
  if (!(mu > 0.0) || !(alpha > 0.0))
    throw InvalidParams("nb_nll requires mu > 0 and alpha > 0");
  const double inv_alpha = 1.0 / alpha;
  const double cd = static_cast<double>(c);
  const double am = alpha * mu;
  double ll = std::lgamma(cd + inv_alpha) - std::lgamma(inv_alpha) - std::lgamma(cd + 1.0) -
              inv_alpha * std::log1p(am);
  if (c > 0) ll += cd * (std::log(am) - std::log1p(am));
  return -ll;
}

TagPrediction predict_tag(const ProductMixture& mixture,
                          std::span<const PredictorOutput> outputs,
                          const CountRecord& counts, const CountModelParams& params) {
  TagPrediction pred;
  auto [bt, bn] = compose_b(mixture, outputs, params.arm, params.proportions,
                            params.adjust_sigma);
  pred.b_target = bt;
  pred.b_ntc = bn;
  pred.mu_target = mu_target(bt, bn, counts, params);
  pred.mu_ntc = mu_ntc(bn, counts, params);
  for (size_t k = 0; k < mixture.products.size(); ++k) {
    const std::optional<double> adj =
        params.proportions.learned_adjust ? std::optional<double>(outputs[k].p_adjust)
                                          : std::nullopt;
    pred.p_effective.push_back(effective_proportion(mixture.products[k].p_lab, adj,
                                                    params.proportions,
                                                    params.adjust_sigma));
  }
  return pred;
}

double tag_loss(const ProductMixture& mixture, std::span<const PredictorOutput> outputs,
                const CountRecord& counts, const CountModelParams& params) {
  const TagPrediction pred = predict_tag(mixture, outputs, counts, params);
  double loss = nb_nll(counts.c_target, pred.mu_target, params.alpha_target) +
                nb_nll(counts.c_ntc, pred.mu_ntc, params.alpha_ntc);
  if (params.gamma > 0.0) {
    double reg = 0.0;
    for (size_t k = 0; k < mixture.products.size(); ++k) {
      if (!arm_uses(params.arm, mixture.products[k].kind)) continue;
      reg += outputs[k].r_target * outputs[k].r_target +
             outputs[k].r_ntc * outputs[k].r_ntc;
    }
    loss += params.gamma * reg;
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Dispersion pre-fit

DispersionFit fit_dispersion(std::span<const LibraryTag> tags, Channel channel,
                             const DispersionOptions& opts) {
  if (tags.size() < 100)
    throw InvalidParams("fit_dispersion needs at least 100 tags, got " +
                        std::to_string(tags.size()));

  const size_t n = tags.size();
  Mat c_col(static_cast<int>(n), 1);
  Mat xd_col(static_cast<int>(n), 1);
  Mat xp_col(static_cast<int>(n), 1);
  double mean_count = 0.0;
  const bool log1p_x = opts.covariate_transform == CovariateTransform::Log1p;
  for (size_t i = 0; i < n; ++i) {
    const CountRecord& cr = tags[i].counts;
    const double c =
        static_cast<double>(channel == Channel::Target ? cr.c_target : cr.c_ntc);
    c_col.a[i] = c;
    xd_col.a[i] = log1p_x ? std::log1p(static_cast<double>(cr.c_dls))
                          : static_cast<double>(cr.c_dls);
    xp_col.a[i] = log1p_x ? std::log1p(cr.c_promiscuity) : cr.c_promiscuity;
    mean_count += c;
  }
  mean_count /= static_cast<double>(n);

  // lgamma(c+1) does not depend on the parameters; fold it in as a constant.
  double lgamma_c1_mean = 0.0;
  for (size_t i = 0; i < n; ++i) lgamma_c1_mean += std::lgamma(c_col.a[i] + 1.0);
  lgamma_c1_mean /= static_cast<double>(n);

  std::vector<double> theta = {0.0, 0.0, inv_softplus(std::max(mean_count, 0.1)),
                               std::log(0.5)};
  AdamConfig acfg;
  acfg.lr = opts.lr;
  AdamState adam(theta.size(), acfg);

  DispersionFit fit;
  const double inv_n = 1.0 / static_cast<double>(n);
  double best_loss = std::numeric_limits<double>::infinity();
  int stagnant = 0;
  for (int iter = 1; iter <= opts.max_iterations; ++iter) {
    Tape tape;
    const NodeId c_node = tape.constant(c_col);
    const NodeId xd_node = tape.constant(xd_col);
    const NodeId xp_node = tape.constant(xp_col);
    const NodeId bd = tape.param(Mat::scalar(theta[0]));
    const NodeId bp = tape.param(Mat::scalar(theta[1]));
    const NodeId bc = tape.param(Mat::scalar(theta[2]));
    const NodeId la = tape.param(Mat::scalar(theta[3]));

    const NodeId lin = tape.add(tape.add(tape.mul(xd_node, bd), tape.mul(xp_node, bp)), bc);
    const NodeId mu = tape.affine(tape.softplus(lin), 1.0, 1e-12);
    const NodeId alpha = tape.exp(la);
    const NodeId inv_alpha = tape.reciprocal(alpha);
    const NodeId s = tape.mul(mu, alpha);
    const NodeId l1 = tape.log1p(s);
    const NodeId ls = tape.log(s);
    // -ll_i = -lgamma(c_i + 1/a) + lgamma(1/a) + lgamma(c_i+1)
    //         + (1/a) log(1+am) - c_i (log(am) - log(1+am))
    const NodeId t1 = tape.affine(tape.lgamma(tape.add(c_node, inv_alpha)), -1.0, 0.0);
    const NodeId t2 = tape.mul(l1, inv_alpha);
    const NodeId t3 = tape.affine(tape.mul(c_node, tape.sub(ls, l1)), -1.0, 0.0);
    const NodeId per_tag = tape.add(tape.add(t1, t2), t3);
    const NodeId base = tape.affine(tape.sum(per_tag), inv_n, lgamma_c1_mean);
    const NodeId loss = tape.add(base, tape.lgamma(inv_alpha));

    const double loss_value = tape.value(loss).a[0];
    if (!std::isfinite(loss_value))
      throw NonConvergence("dispersion fit diverged at iteration " + std::to_string(iter));
    tape.backward(loss);
    const double g0 = tape.grad(bd).a[0];
    const double g1 = tape.grad(bp).a[0];
    const double g2 = tape.grad(bc).a[0];
    const double g3 = tape.grad(la).a[0];
    const double gmax = std::max({std::fabs(g0), std::fabs(g1), std::fabs(g2), std::fabs(g3)});
    // Converged when the gradient vanishes, or when the likelihood has been
    // flat for a long stretch (the alpha direction flattens out entirely for
    // near-Poisson data).
    if (loss_value < best_loss - 1e-12 * std::max(1.0, std::fabs(best_loss))) {
      best_loss = loss_value;
      stagnant = 0;
    } else {
      ++stagnant;
    }
    if (gmax < opts.grad_tol || stagnant >= opts.stagnation_window) {
      fit.iterations = iter;
      fit.beta_dls = theta[0];
      fit.beta_promiscuity = theta[1];
      fit.beta_constant = theta[2];
      fit.alpha = std::exp(theta[3]);
      return fit;
    }
    const std::array<double, 4> grads{g0, g1, g2, g3};
    adam.step(theta, grads);
  }
  throw NonConvergence("dispersion fit did not converge within " +
                       std::to_string(opts.max_iterations) + " iterations");
}

// ---------------------------------------------------------------------------
// Prepared data

PreparedTags PreparedTags::prepare(const Dataset& ds, std::span<const int> tag_indices,
                                   const CountModelParams& params, bool needs_graphs) {
  PreparedTags out;
  out.tags_.reserve(tag_indices.size());
  EnumerateOptions opts;
  opts.include_mono = params.include_mono;
  opts.with_graphs = false;  // graphs come from the shared cache below
  for (int idx : tag_indices) {
    const LibraryTag& tag = ds.tags[idx];
    TagEntry entry;
    entry.dataset_index = idx;
    entry.c_target = tag.counts.c_target;
    entry.c_ntc = tag.counts.c_ntc;
    entry.x_dls = params.transform_covariate(static_cast<double>(tag.counts.c_dls));
    entry.x_prom = params.transform_covariate(tag.counts.c_promiscuity);

    ProductMixture mixture = enumerate_products(ds.library, tag, opts);
    check_arm_products(params.arm, mixture);
    for (Product& prod : mixture.products) {
      if (!arm_uses(params.arm, prod.kind)) continue;
      ProductEntry pe;
      pe.kind = prod.kind;
      pe.blocks = std::move(prod.block_indices);
      pe.p_lab = prod.p_lab;
      if (needs_graphs) {
        std::string key = std::string(product_kind_name(pe.kind));
        for (int b : pe.blocks) {
          key += '|';
          key += ds.library.block(b).id;
        }
        auto it = out.graph_cache_.find(key);
        if (it == out.graph_cache_.end()) {
          auto g = std::make_unique<MolGraph>(assemble_product(ds.library, pe.blocks));
          it = out.graph_cache_.emplace(std::move(key), std::move(g)).first;
        }
        pe.graph = it->second.get();
      }
      entry.products.push_back(std::move(pe));
    }
    out.tags_.push_back(std::move(entry));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batched forward graph

BatchNodes build_batch(Tape& tape, const PreparedTags& prepared,
                       std::span<const int> batch_positions, Predictor& predictor,
                       const CountModelParams& params, bool betas_trainable) {
  const auto& all = prepared.tags();
  const int n_tags = static_cast<int>(batch_positions.size());
  if (n_tags == 0) throw InvalidParams("empty batch");
  const bool adjust = params.proportions.learned_adjust;
  if (adjust && !predictor.has_adjust_head())
    throw AdjustMissing("proportion mode needs an adjust head but the predictor has none");

  std::vector<ProductInput> inputs;
  std::vector<int> prod_tag;
  std::vector<double> p_base;
  Mat c_t(n_tags, 1);
  Mat c_n(n_tags, 1);
  Mat x_dls(n_tags, 1);
  Mat x_prom(n_tags, 1);
  for (int t = 0; t < n_tags; ++t) {
    const auto& entry = all[batch_positions[t]];
    c_t.a[t] = static_cast<double>(entry.c_target);
    c_n.a[t] = static_cast<double>(entry.c_ntc);
    x_dls.a[t] = entry.x_dls;
    x_prom.a[t] = entry.x_prom;
    for (const auto& pe : entry.products) {
      ProductInput in;
      in.kind = pe.kind;
      in.blocks = pe.blocks;
      in.graph = pe.graph;
      inputs.push_back(std::move(in));
      prod_tag.push_back(t);
      p_base.push_back(params.proportions.base == ProportionBase::Flat
                           ? params.proportions.flat_p
                           : pe.p_lab);
    }
  }

  PredictorBatch heads = predictor.forward_batch(tape, inputs, adjust);

  NodeId p_eff;
  const NodeId base_col = tape.constant(Mat::column(p_base));
  if (adjust) {
    const NodeId shifted = tape.add(heads.p_adjust, base_col);
    p_eff = params.adjust_sigma == AdjustSigma::Sigmoid ? tape.sigmoid(shifted)
                                                        : tape.softplus(shifted);
  } else {
    p_eff = base_col;
  }

  const NodeId b_t =
      tape.scatter_add_rows(tape.mul(heads.r_target, p_eff), prod_tag, n_tags);
  const NodeId b_n = tape.scatter_add_rows(tape.mul(heads.r_ntc, p_eff), prod_tag, n_tags);

  auto beta_node = [&](double v) {
    return betas_trainable ? tape.param(Mat::scalar(v)) : tape.constant(Mat::scalar(v));
  };
  BatchNodes out;
  const NodeId nb_ntc = beta_node(params.beta_ntc);
  const NodeId nb_dls = beta_node(params.beta_dls);
  const NodeId nb_prom = beta_node(params.beta_promiscuity);
  const NodeId nb_const = beta_node(params.beta_constant);
  const NodeId nb2_dls = beta_node(params.beta2_dls);
  const NodeId nb2_prom = beta_node(params.beta2_promiscuity);
  const NodeId nb2_const = beta_node(params.beta2_constant);
  if (betas_trainable)
    out.beta_nodes = {nb_ntc, nb_dls, nb_prom, nb_const, nb2_dls, nb2_prom, nb2_const};

  const NodeId xd_node = tape.constant(std::move(x_dls));
  const NodeId xp_node = tape.constant(std::move(x_prom));
  const NodeId lin_t = tape.add(
      tape.add(tape.add(b_t, tape.mul(b_n, nb_ntc)),
               tape.add(tape.mul(xd_node, nb_dls), tape.mul(xp_node, nb_prom))),
      nb_const);
  const NodeId lin_n = tape.add(
      tape.add(b_n, tape.add(tape.mul(xd_node, nb2_dls), tape.mul(xp_node, nb2_prom))),
      nb2_const);
  // Tiny floor keeps log(alpha*mu) finite when softplus underflows.
  out.mu_target = tape.affine(tape.softplus(lin_t), 1.0, 1e-12);
  out.mu_ntc = tape.affine(tape.softplus(lin_n), 1.0, 1e-12);

  auto channel_nll = [&](NodeId mu, const Mat& counts, double alpha) {
    Mat k_const(counts.rows, 1);
    const double inv_alpha = 1.0 / alpha;
    const double lg_inv = std::lgamma(inv_alpha);
    for (int i = 0; i < counts.rows; ++i)
      k_const.a[i] = -std::lgamma(counts.a[i] + inv_alpha) + lg_inv +
                     std::lgamma(counts.a[i] + 1.0);
    const NodeId s = tape.affine(mu, alpha, 0.0);
    const NodeId l1 = tape.log1p(s);
    const NodeId ls = tape.log(s);
    const NodeId c_node = tape.constant(counts);
    const NodeId var_terms =
        tape.add(tape.affine(l1, inv_alpha, 0.0),
                 tape.affine(tape.mul(c_node, tape.sub(ls, l1)), -1.0, 0.0));
    return tape.add(tape.constant(std::move(k_const)), var_terms);
  };

  const NodeId nll_t = channel_nll(out.mu_target, c_t, params.alpha_target);
  const NodeId nll_n = channel_nll(out.mu_ntc, c_n, params.alpha_ntc);
  out.mean_nll =
      tape.affine(tape.sum(tape.add(nll_t, nll_n)), 1.0 / static_cast<double>(n_tags), 0.0);

  out.r_target = heads.r_target;
  out.r_ntc = heads.r_ntc;
  if (params.gamma > 0.0) {
    const NodeId reg =
        tape.add(tape.sum(tape.mul(heads.r_target, heads.r_target)),
                 tape.sum(tape.mul(heads.r_ntc, heads.r_ntc)));
    out.loss = tape.add(out.mean_nll,
                        tape.affine(reg, params.gamma / static_cast<double>(n_tags), 0.0));
  } else {
    out.loss = out.mean_nll;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

struct FlatParams {
  std::vector<double> values;
  std::vector<std::pair<size_t, size_t>> block_spans;  // offset,size per predictor block
  size_t beta_offset = 0;
  bool with_betas = false;

  static FlatParams gather(const Predictor& predictor, const CountModelParams& params,
                           bool with_betas) {
    FlatParams f;
    f.with_betas = with_betas;
    for (const ParamBlock& b : predictor.param_blocks()) {
      f.block_spans.push_back({f.values.size(), b.w.a.size()});
      f.values.insert(f.values.end(), b.w.a.begin(), b.w.a.end());
    }
    f.beta_offset = f.values.size();
    if (with_betas) {
      f.values.insert(f.values.end(),
                      {params.beta_ntc, params.beta_dls, params.beta_promiscuity,
                       params.beta_constant, params.beta2_dls, params.beta2_promiscuity,
                       params.beta2_constant});
    }
    return f;
  }

  void scatter(Predictor& predictor, CountModelParams& params) const {
    auto& blocks = predictor.param_blocks();
    for (size_t i = 0; i < blocks.size(); ++i) {
      const auto [off, size] = block_spans[i];
      std::copy(values.begin() + off, values.begin() + off + size, blocks[i].w.a.begin());
    }
    if (with_betas) {
      const double* b = values.data() + beta_offset;
      params.beta_ntc = b[0];
      params.beta_dls = b[1];
      params.beta_promiscuity = b[2];
      params.beta_constant = b[3];
      params.beta2_dls = b[4];
      params.beta2_promiscuity = b[5];
      params.beta2_constant = b[6];
    }
  }
};

double mean_of(std::span<const double> v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double r2_of(std::span<const double> obs, std::span<const double> pred) {
  const double mean = mean_of(obs);
  double ss_res = 0.0;
  double ss_tot = 0.0;
  for (size_t i = 0; i < obs.size(); ++i) {
    ss_res += (obs[i] - pred[i]) * (obs[i] - pred[i]);
    ss_tot += (obs[i] - mean) * (obs[i] - mean);
  }
  if (ss_tot == 0.0) return 0.0;
  return 1.0 - ss_res / ss_tot;
}

PredictedSet predict_prepared(const PreparedTags& prepared, Predictor& predictor,
                              const CountModelParams& params) {
  PredictedSet out;
  const int n = static_cast<int>(prepared.tags().size());
  out.mu_target.reserve(n);
  out.mu_ntc.reserve(n);
  double nll_sum = 0.0;
  const int chunk = 1024;
  for (int start = 0; start < n; start += chunk) {
    const int len = std::min(chunk, n - start);
    std::vector<int> positions(len);
    std::iota(positions.begin(), positions.end(), start);
    Tape tape;
    BatchNodes nodes = build_batch(tape, prepared, positions, predictor, params, false);
    const Mat& mt = tape.value(nodes.mu_target);
    const Mat& mn = tape.value(nodes.mu_ntc);
    for (int i = 0; i < len; ++i) {
      out.mu_target.push_back(mt.a[i]);
      out.mu_ntc.push_back(mn.a[i]);
      out.c_target.push_back(prepared.tags()[start + i].c_target);
      out.c_ntc.push_back(prepared.tags()[start + i].c_ntc);
    }
    nll_sum += tape.value(nodes.mean_nll).a[0] * len;
  }
  out.mean_nll = nll_sum / static_cast<double>(n);
  return out;
}

}  // namespace

PredictedSet predict_set(const Dataset& ds, std::span<const int> tag_indices,
                         Predictor& predictor, const CountModelParams& params) {
  PreparedTags prepared =
      PreparedTags::prepare(ds, tag_indices, params, predictor.needs_graphs());
  return predict_prepared(prepared, predictor, params);
}

TrainResult train(const Dataset& ds, const DatasetSplit& split, Predictor& predictor,
                  CountModelParams params, const TrainOptions& opts, const EpochHook& hook) {
  params.validate();
  if (opts.epochs < 1 || opts.batch < 1) throw InvalidParams("epochs and batch must be >= 1");
  const std::vector<int> train_idx = split.train_indices(ds);
  const std::vector<int> test_idx = split.test_indices(ds);
  if (train_idx.empty()) throw InvalidParams("empty training set");

  const bool needs_graphs = predictor.needs_graphs();
  PreparedTags train_prepared = PreparedTags::prepare(ds, train_idx, params, needs_graphs);
  PreparedTags test_prepared = PreparedTags::prepare(ds, test_idx, params, needs_graphs);

  const bool betas_trainable = !params.freeze_betas;
  FlatParams flat = FlatParams::gather(predictor, params, betas_trainable);
  AdamConfig acfg;
  acfg.lr = opts.lr;
  AdamState adam(flat.values.size(), acfg);
  std::vector<double> grads(flat.values.size(), 0.0);

  const int n_train = static_cast<int>(train_prepared.tags().size());
  std::vector<int> order(n_train);
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  for (int epoch = 1; epoch <= opts.epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(opts.seed, "epoch:" + std::to_string(epoch)));
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.below(i)]);

    double loss_sum = 0.0;
    for (int start = 0; start < n_train; start += opts.batch) {
      const int len = std::min(opts.batch, n_train - start);
      std::span<const int> batch(order.data() + start, static_cast<size_t>(len));

      Tape tape;
      BatchNodes nodes =
          build_batch(tape, train_prepared, batch, predictor, params, betas_trainable);
      const double batch_loss = tape.value(nodes.loss).a[0];
      if (!std::isfinite(batch_loss)) {
        std::ostringstream os;
        os << "non-finite loss " << batch_loss << " at epoch " << epoch << ", batch "
           << (start / opts.batch) << " (seed " << opts.seed << ")";
        throw NaNLoss(os.str());
      }
      loss_sum += batch_loss * len;

      tape.backward(nodes.loss);
      std::fill(grads.begin(), grads.end(), 0.0);
      const auto& bound = predictor.bound_param_nodes();
      for (size_t b = 0; b < bound.size(); ++b) {
        const Mat& g = tape.grad(bound[b]);
        const auto [off, size] = flat.block_spans[b];
        for (size_t k = 0; k < size; ++k) grads[off + k] = g.a[k];
      }
      if (betas_trainable)
        for (size_t b = 0; b < nodes.beta_nodes.size(); ++b)
          grads[flat.beta_offset + b] = tape.grad(nodes.beta_nodes[b]).a[0];

      adam.step(flat.values, grads);
      flat.scatter(predictor, params);
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = loss_sum / static_cast<double>(n_train);
    if (!test_prepared.tags().empty()) {
      PredictedSet test_pred = predict_prepared(test_prepared, predictor, params);
      stats.test_loss = test_pred.mean_nll;
      std::vector<double> obs_t(test_pred.c_target.begin(), test_pred.c_target.end());
      std::vector<double> obs_n(test_pred.c_ntc.begin(), test_pred.c_ntc.end());
      stats.r2_target = r2_of(obs_t, test_pred.mu_target);
      stats.r2_ntc = r2_of(obs_n, test_pred.mu_ntc);
    }
    result.curve.push_back(stats);
    if (hook) hook(stats, params);
  }

  result.params = params;
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints and logs

namespace {

nlohmann::json params_to_json(const CountModelParams& p) {
  return {{"beta_ntc", p.beta_ntc},
          {"beta_dls", p.beta_dls},
          {"beta_promiscuity", p.beta_promiscuity},
          {"beta_constant", p.beta_constant},
          {"beta2_dls", p.beta2_dls},
          {"beta2_promiscuity", p.beta2_promiscuity},
          {"beta2_constant", p.beta2_constant},
          {"alpha_target", p.alpha_target},
          {"alpha_ntc", p.alpha_ntc},
          {"gamma", p.gamma},
          {"proportions", p.proportions.str()},
          {"arm", std::string(arm_name(p.arm))},
          {"covariates",
           p.covariate_transform == CovariateTransform::Log1p ? "log1p" : "identity"},
          {"adjust_sigma", p.adjust_sigma == AdjustSigma::Sigmoid ? "sigmoid" : "softplus"},
          {"freeze_betas", p.freeze_betas},
          {"include_mono", p.include_mono}};
}

CountModelParams params_from_json(const nlohmann::json& j) {
  CountModelParams p;
  p.beta_ntc = j.at("beta_ntc").get<double>();
  p.beta_dls = j.at("beta_dls").get<double>();
  p.beta_promiscuity = j.at("beta_promiscuity").get<double>();
  p.beta_constant = j.at("beta_constant").get<double>();
  p.beta2_dls = j.at("beta2_dls").get<double>();
  p.beta2_promiscuity = j.at("beta2_promiscuity").get<double>();
  p.beta2_constant = j.at("beta2_constant").get<double>();
  p.alpha_target = j.at("alpha_target").get<double>();
  p.alpha_ntc = j.at("alpha_ntc").get<double>();
  p.gamma = j.at("gamma").get<double>();
  p.proportions = ProportionMode::parse(j.at("proportions").get<std::string>());
  auto arm = arm_from_name(j.at("arm").get<std::string>());
  if (!arm) throw InvalidParams("bad arm in checkpoint");
  p.arm = *arm;
  p.covariate_transform = j.at("covariates").get<std::string>() == "identity"
                              ? CovariateTransform::Identity
                              : CovariateTransform::Log1p;
  p.adjust_sigma = j.at("adjust_sigma").get<std::string>() == "softplus"
                       ? AdjustSigma::Softplus
                       : AdjustSigma::Sigmoid;
  p.freeze_betas = j.at("freeze_betas").get<bool>();
  p.include_mono = j.at("include_mono").get<bool>();
  return p;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Predictor& predictor,
                     const CountModelParams& params) {
  nlohmann::json j = {{"format_version", 1},
                      {"predictor", predictor_to_json(predictor)},
                      {"model", params_to_json(params)}};
  std::ofstream os(path);
  if (!os) throw FileError("cannot open '" + path.string() + "' for writing");
  os << j.dump(2) << '\n';
  if (!os) throw FileError("write failed for '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FileError("cannot open '" + path.string() + "'");
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("bad checkpoint '" + path.string() + "': " + e.what());
  }
  if (j.at("format_version").get<int>() != 1)
    throw ParseError("unsupported checkpoint version");
  Checkpoint ck;
  ck.predictor = predictor_from_json(j.at("predictor"));
  ck.params = params_from_json(j.at("model"));
  return ck;
}

void write_metrics_log(const std::filesystem::path& path,
                       std::span<const EpochStats> curve) {
  std::ofstream os(path);
  if (!os) throw FileError("cannot open '" + path.string() + "' for writing");
  for (const EpochStats& s : curve) {
    os << s.epoch << '\t' << format_double(s.train_loss) << '\t'
       << format_double(s.test_loss) << '\t' << format_double(s.r2_target) << '\t'
       << format_double(s.r2_ntc) << '\n';
  }
}

}  // namespace delmix
