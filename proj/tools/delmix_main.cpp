// delmix: simulate / fit-dispersion / train / evaluate / screen / compare
// pipeline driver. Exit codes: 0 ok, 2 config error, 3 I/O error, 4 numeric
// failure, 1 other failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <set>

#include "delmix/config.hpp"
#include "delmix/countmodel.hpp"
#include "delmix/datapipeline.hpp"
#include "delmix/evaluation.hpp"
#include "delmix/library.hpp"
#include "delmix/simulator.hpp"
#include "delmix/util.hpp"

namespace fs = std::filesystem;
using namespace delmix;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitOther = 1;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

struct CliState {
  std::string config_path;
  std::string data_dir;
  std::string out_dir;
  std::string checkpoint_path;
  std::string external_path;
  std::string external_out;
  std::string arm_override;
  std::string proportions_override;
  std::string predictor_override;
  bool fit_dispersion_inline = false;
  int threads = 0;
};

Dataset load_dataset(const fs::path& dir) {
  Dataset ds;
  ds.library = read_fragments_file(dir / "fragments.tsv");
  ds.tags = read_tags_file(dir / "tags.tsv");
  return ds;
}

struct DispersionPair {
  DispersionFit target;
  DispersionFit ntc;
};

void write_dispersion_file(const fs::path& path, const DispersionPair& d) {
  std::ofstream os(path);
  if (!os) throw FileError("cannot open '" + path.string() + "' for writing");
  auto row = [&](const char* name, const DispersionFit& f) {
    os << name << '\t' << format_double(f.alpha) << '\t' << format_double(f.beta_dls) << '\t'
       << format_double(f.beta_promiscuity) << '\t' << format_double(f.beta_constant) << '\t'
       << f.iterations << '\n';
  };
  row("target", d.target);
  row("ntc", d.ntc);
}

DispersionPair read_dispersion_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigInvalid("dispersion fit not found at '" + path.string() +
                               "' (run fit-dispersion or pass --fit-dispersion)");
  DispersionPair d;
  bool have_target = false;
  bool have_ntc = false;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string name;
    DispersionFit f;
    if (!(ls >> name >> f.alpha >> f.beta_dls >> f.beta_promiscuity >> f.beta_constant >>
          f.iterations))
      throw ParseError("bad dispersion line '" + line + "'");
    if (name == "target") {
      d.target = f;
      have_target = true;
    } else if (name == "ntc") {
      d.ntc = f;
      have_ntc = true;
    }
  }
  if (!have_target || !have_ntc)
    throw ParseError("dispersion file '" + path.string() + "' is missing a channel");
  return d;
}

DispersionPair fit_both_channels(const Dataset& ds, const RunConfig& cfg) {
  DispersionOptions opts;
  opts.covariate_transform = cfg.model.covariate_transform;
  DispersionPair d;
  d.target = fit_dispersion(ds.tags, Channel::Target, opts);
  d.ntc = fit_dispersion(ds.tags, Channel::Ntc, opts);
  return d;
}

CountModelParams params_for_run(const RunConfig& cfg, const DispersionPair& disp) {
  CountModelParams p = cfg.model;
  p.alpha_target = disp.target.alpha;
  p.alpha_ntc = disp.ntc.alpha;
  p.beta_ntc = 0.0;
  p.beta_dls = disp.target.beta_dls;
  p.beta_promiscuity = disp.target.beta_promiscuity;
  p.beta_constant = disp.target.beta_constant;
  p.beta2_dls = disp.ntc.beta_dls;
  p.beta2_promiscuity = disp.ntc.beta_promiscuity;
  p.beta2_constant = disp.ntc.beta_constant;
  return p;
}

std::unique_ptr<Predictor> make_predictor(const RunConfig& cfg, int n_blocks,
                                          bool adjust_head) {
  const std::uint64_t init_seed = derive_seed(cfg.train.seed, "predictor-init");
  if (cfg.predictor == "embed") {
    EmbedConfig ec;
    ec.dim = cfg.dim;
    ec.head_hidden = cfg.mpnn.head_hidden;
    ec.adjust_head = adjust_head;
    ec.seed = init_seed;
    return make_embed_predictor(ec, n_blocks);
  }
  MpnnConfig mc = cfg.mpnn;
  mc.adjust_head = adjust_head;
  mc.seed = init_seed;
  return make_mpnn_predictor(mc);
}

std::vector<ExternalMolecule> external_for_run(const RunConfig& cfg,
                                               const DatasetSplit& split, int threads) {
  if (!cfg.external_path.empty()) return read_external_file(cfg.external_path);
  // Regenerate the simulation to recover the ground truth that labels the
  // external molecules.
  SimResult sim = simulate(cfg.simulate, threads);
  ExternalSetOptions opts;
  opts.size = cfg.external_size;
  opts.binder_fraction = cfg.external_binder_fraction;
  opts.seed = derive_seed(cfg.simulate.seed, "external");
  if (cfg.external_mode == "heldout_bb") {
    opts.mode = ExternalSetMode::HeldoutPerturbed;
    opts.heldout_bb.assign(split.heldout_bb_ids.begin(), split.heldout_bb_ids.end());
  } else {
    opts.mode = ExternalSetMode::NovelCombos;
    for (int i = 0; i < sim.library.block_count(); ++i) {
      const std::string& id = sim.library.block(i).id;
      if (!split.heldout_bb_ids.count(id)) opts.allowed_bb.push_back(id);
    }
  }
  return make_external_set(sim, opts);
}

struct ExternalScores {
  double auc = 0.0;
  double hit_rate = 0.0;
};

ExternalScores score_external(std::span<const ExternalMolecule> molecules,
                              Predictor& predictor, const Library& lib, int k) {
  std::vector<ProductInput> inputs;
  std::vector<double> scores(molecules.size(), 0.0);
  std::vector<char> labels(molecules.size(), 0);
  Tape tape;
  inputs.reserve(molecules.size());
  for (size_t i = 0; i < molecules.size(); ++i) {
    ProductInput in;
    in.kind = molecules[i].kind;
    in.graph = &molecules[i].graph;
    if (!predictor.needs_graphs())
      for (const std::string& id : molecules[i].bb)
        if (!id.empty()) in.blocks.push_back(lib.index_of(id));
    inputs.push_back(std::move(in));
    labels[i] = molecules[i].is_binder ? 1 : 0;
  }
  PredictorBatch batch = predictor.forward_batch(tape, inputs, false);
  for (size_t i = 0; i < molecules.size(); ++i) scores[i] = tape.value(batch.r_target).a[i];
  ExternalScores out;
  out.auc = roc_auc(scores, labels);
  out.hit_rate = hit_rate_at_k(scores, labels, k);
  return out;
}

struct TrainedArm {
  std::unique_ptr<Predictor> predictor;
  CountModelParams params;
  std::vector<EpochStats> curve;
};

TrainedArm train_arm(const RunConfig& cfg, const Dataset& ds, const DatasetSplit& split,
                     const DispersionPair& disp, const EpochHook& hook = nullptr) {
  TrainedArm arm;
  arm.predictor =
      make_predictor(cfg, ds.library.block_count(), cfg.model.proportions.learned_adjust);
  CountModelParams params = params_for_run(cfg, disp);
  TrainResult result = train(ds, split, *arm.predictor, params, cfg.train, hook);
  arm.params = result.params;
  arm.curve = std::move(result.curve);
  return arm;
}

// ---------------------------------------------------------------------------

int cmd_simulate(const CliState& cli) {
  RunConfig cfg = parse_run_config(cli.config_path);
  const int threads = resolve_threads(cli.threads);
  SimResult sim = simulate(cfg.simulate, threads);
  write_simulation(cli.out_dir, sim);
  echo_config(cli.out_dir, cfg);
  if (!cli.external_out.empty()) {
    ExternalSetOptions opts;
    opts.size = cfg.external_size;
    opts.binder_fraction = cfg.external_binder_fraction;
    opts.seed = derive_seed(cfg.simulate.seed, "external");
    write_external_file(cli.external_out, make_external_set(sim, opts));
  }
  std::cout << "simulated " << sim.tags.size() << " tags over "
            << sim.library.block_count() << " building blocks into " << cli.out_dir << "\n";
  return kExitOk;
}

int cmd_fit_dispersion(const CliState& cli) {
  RunConfig cfg = parse_run_config(cli.config_path);
  Dataset ds = load_dataset(cli.data_dir);
  DispersionPair d = fit_both_channels(ds, cfg);
  fs::create_directories(cli.out_dir);
  write_dispersion_file(fs::path(cli.out_dir) / "dispersion.tsv", d);
  echo_config(cli.out_dir, cfg);
  std::cout << "alpha_target=" << format_double(d.target.alpha)
            << " alpha_ntc=" << format_double(d.ntc.alpha) << "\n";
  return kExitOk;
}

void apply_overrides(RunConfig& cfg, const CliState& cli) {
  if (!cli.arm_override.empty()) {
    auto a = arm_from_name(cli.arm_override);
    if (!a) throw ConfigInvalid("unknown arm '" + cli.arm_override + "'");
    cfg.model.arm = *a;
  }
  if (!cli.proportions_override.empty())
    cfg.model.proportions = ProportionMode::parse(cli.proportions_override);
  if (!cli.predictor_override.empty()) {
    if (cli.predictor_override != "embed" && cli.predictor_override != "mpnn")
      throw ConfigInvalid("unknown predictor '" + cli.predictor_override + "'");
    cfg.predictor = cli.predictor_override;
  }
}

int cmd_train(const CliState& cli) {
  RunConfig cfg = parse_run_config(cli.config_path);
  apply_overrides(cfg, cli);
  Dataset ds = load_dataset(cli.data_dir);
  augment_negatives(ds, cfg.n_ntc_only, cfg.n_unsequenced, cfg.train.seed);

  DispersionPair disp = cli.fit_dispersion_inline
                            ? fit_both_channels(ds, cfg)
                            : read_dispersion_file(fs::path(cli.data_dir) / "dispersion.tsv");

  DatasetSplit ds_split = split(ds, cfg.holdout_fraction, cfg.train.seed);
  fs::create_directories(cli.out_dir);
  echo_config(cli.out_dir, cfg);
  write_split_file(fs::path(cli.out_dir) / "split.tsv", ds_split);

  const fs::path ckpt_path = fs::path(cli.out_dir) / "checkpoint.json";
  auto predictor =
      make_predictor(cfg, ds.library.block_count(), cfg.model.proportions.learned_adjust);
  CountModelParams init = params_for_run(cfg, disp);
  std::vector<EpochStats> curve;
  // Checkpoint after every epoch so a numeric abort retains the last good
  // state.
  const EpochHook hook = [&](const EpochStats& stats, const CountModelParams& p) {
    curve.push_back(stats);
    save_checkpoint(ckpt_path, *predictor, p);
  };
  TrainResult result;
  try {
    result = train(ds, ds_split, *predictor, init, cfg.train, hook);
  } catch (const NaNLoss&) {
    write_metrics_log(fs::path(cli.out_dir) / "metrics.tsv", curve);
    throw;
  }
  write_metrics_log(fs::path(cli.out_dir) / "metrics.tsv", result.curve);
  std::cout << "trained " << arm_name(result.params.arm) << "/"
            << result.params.proportions.str() << ": final test loss "
            << format_double(result.curve.empty() ? 0.0 : result.curve.back().test_loss)
            << "\n";
  return kExitOk;
}

int cmd_evaluate(const CliState& cli) {
  RunConfig cfg = parse_run_config(cli.config_path);
  Dataset ds = load_dataset(cli.data_dir);
  Checkpoint ckpt = load_checkpoint(cli.checkpoint_path);
  DatasetSplit ds_split = split(ds, cfg.holdout_fraction, cfg.train.seed);
  const std::vector<int> test_idx = ds_split.test_indices(ds);

  TestSetMetrics tm = evaluate_test_set(ds, test_idx, *ckpt.predictor, ckpt.params);
  std::vector<ExternalMolecule> external =
      external_for_run(cfg, ds_split, resolve_threads(cli.threads));
  ExternalScores es = score_external(external, *ckpt.predictor, ds.library, cfg.k);

  fs::create_directories(cli.out_dir);
  echo_config(cli.out_dir, cfg);
  const std::vector<std::pair<std::string, double>> metrics = {
      {"test_nb_loss", tm.nb_loss},
      {"r2_target", tm.r2_target},
      {"r2_ntc", tm.r2_ntc},
      {"roc_auc", es.auc},
      {"hit_rate_at_" + std::to_string(cfg.k), es.hit_rate},
  };
  write_metrics_file(fs::path(cli.out_dir) / "metrics.tsv", metrics);
  for (const auto& [name, value] : metrics)
    std::cout << name << "\t" << format_double(value) << "\n";
  return kExitOk;
}

int cmd_screen(const CliState& cli) {
  RunConfig cfg = parse_run_config(cli.config_path);
  Dataset ds = load_dataset(cli.data_dir);
  Checkpoint ckpt = load_checkpoint(cli.checkpoint_path);
  std::vector<ExternalMolecule> molecules;
  if (!cli.external_path.empty()) {
    molecules = read_external_file(cli.external_path);
  } else {
    DatasetSplit ds_split = split(ds, cfg.holdout_fraction, cfg.train.seed);
    molecules = external_for_run(cfg, ds_split, resolve_threads(cli.threads));
  }
  std::vector<ScreenEntry> ranked = screen(molecules, *ckpt.predictor, ds.library);
  fs::create_directories(cli.out_dir);
  echo_config(cli.out_dir, cfg);
  write_ranked_hits(fs::path(cli.out_dir) / "ranked_hits.tsv", ranked);
  std::cout << "ranked " << ranked.size() << " molecules into " << cli.out_dir
            << "/ranked_hits.tsv\n";
  return kExitOk;
}

struct CompareRow {
  std::string arm;
  std::string proportions;
  bool failed = false;
  std::string error;
  double loss = 0.0;
  double r2_target = 0.0;
  double r2_ntc = 0.0;
  double auc = 0.0;
  double hit_rate = 0.0;
};

int cmd_compare(const CliState& cli) {
  RunConfig cfg = parse_run_config(cli.config_path);
  Dataset ds = load_dataset(cli.data_dir);
  const int threads = resolve_threads(cli.threads);

  DispersionPair disp = fit_both_channels(ds, cfg);
  DatasetSplit ds_split = split(ds, cfg.holdout_fraction, cfg.train.seed);
  const std::vector<int> test_idx = ds_split.test_indices(ds);
  std::vector<ExternalMolecule> external = external_for_run(cfg, ds_split, threads);

  struct GridArm {
    Arm arm;
    ProportionMode mode;
  };
  ProportionMode lab_fixed;
  ProportionMode lab_adjust;
  lab_adjust.learned_adjust = true;
  ProportionMode flat_fixed;
  flat_fixed.base = ProportionBase::Flat;
  ProportionMode flat_adjust = flat_fixed;
  flat_adjust.learned_adjust = true;
  const std::vector<GridArm> grid = {
      {Arm::Full, lab_fixed},    {Arm::Full, lab_adjust},
      {Arm::TriOnly, lab_fixed}, {Arm::TriOnly, lab_adjust},
      {Arm::DiOnly, lab_fixed},  {Arm::DiOnly, lab_adjust},
      {Arm::Full, flat_fixed},   {Arm::Full, flat_adjust},
  };

  std::vector<CompareRow> rows;
  bool any_failed = false;
  for (const GridArm& ga : grid) {
    CompareRow row;
    row.arm = std::string(arm_name(ga.arm));
    row.proportions = ga.mode.str();
    RunConfig arm_cfg = cfg;
    arm_cfg.model.arm = ga.arm;
    arm_cfg.model.proportions = ga.mode;
    try {
      TrainedArm trained = train_arm(arm_cfg, ds, ds_split, disp);
      TestSetMetrics tm =
          evaluate_test_set(ds, test_idx, *trained.predictor, trained.params);
      ExternalScores es = score_external(external, *trained.predictor, ds.library, cfg.k);
      row.loss = tm.nb_loss;
      row.r2_target = tm.r2_target;
      row.r2_ntc = tm.r2_ntc;
      row.auc = es.auc;
      row.hit_rate = es.hit_rate;
    } catch (const std::exception& e) {
      row.failed = true;
      row.error = e.what();
      any_failed = true;
    }
    rows.push_back(std::move(row));
    const CompareRow& r = rows.back();
    std::cout << r.arm << "/" << r.proportions << ": "
              << (r.failed ? ("FAILED: " + r.error)
                           : ("loss=" + format_double(r.loss) +
                              " auc=" + format_double(r.auc)))
              << "\n";
  }

  fs::create_directories(cli.out_dir);
  echo_config(cli.out_dir, cfg);
  std::ofstream os(fs::path(cli.out_dir) / "comparison.tsv");
  if (!os) throw FileError("cannot write comparison.tsv");
  os << "arm\tproportions\tloss\tr2_target\tr2_ntc\tauc\thit_at_" << cfg.k << "\n";
  for (const CompareRow& r : rows) {
    os << r.arm << '\t' << r.proportions << '\t';
    if (r.failed)
      os << "error:" << r.error << "\t\t\t\t\n";
    else
      os << format_double(r.loss) << '\t' << format_double(r.r2_target) << '\t'
         << format_double(r.r2_ntc) << '\t' << format_double(r.auc) << '\t'
         << format_double(r.hit_rate) << '\n';
  }
  return any_failed ? kExitOther : kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"delmix: yield-aware partial-product count model for DEL screens"};
  app.require_subcommand(1);
  CliState cli;
  app.add_option("--threads", cli.threads,
                 "worker cap (default: DELMIX_THREADS or 1; never changes results)");

  auto add_config = [&](CLI::App* cmd) {
    cmd->add_option("--config", cli.config_path, "run configuration file")->required();
  };

  CLI::App* c_sim = app.add_subcommand("simulate", "generate a synthetic screen");
  add_config(c_sim);
  c_sim->add_option("--out", cli.out_dir, "output directory")->required();
  c_sim->add_option("--external-out", cli.external_out,
                    "also write a labeled external molecule file");

  CLI::App* c_fit = app.add_subcommand("fit-dispersion", "pre-fit NB dispersions");
  add_config(c_fit);
  c_fit->add_option("--data", cli.data_dir, "simulated data directory")->required();
  c_fit->add_option("--out", cli.out_dir, "output directory")->required();

  CLI::App* c_train = app.add_subcommand("train", "train the count model");
  add_config(c_train);
  c_train->add_option("--data", cli.data_dir, "simulated data directory")->required();
  c_train->add_option("--out", cli.out_dir, "output directory")->required();
  c_train->add_flag("--fit-dispersion", cli.fit_dispersion_inline,
                    "fit dispersions inline instead of reading dispersion.tsv");
  c_train->add_option("--arm", cli.arm_override, "override [model] arm");
  c_train->add_option("--proportions", cli.proportions_override,
                      "override [model] proportions");
  c_train->add_option("--predictor", cli.predictor_override, "override [model] predictor");

  CLI::App* c_eval = app.add_subcommand("evaluate", "evaluate a trained checkpoint");
  add_config(c_eval);
  c_eval->add_option("--data", cli.data_dir, "simulated data directory")->required();
  c_eval->add_option("--checkpoint", cli.checkpoint_path, "checkpoint file")->required();
  c_eval->add_option("--out", cli.out_dir, "output directory")->required();

  CLI::App* c_screen = app.add_subcommand("screen", "rank external molecules");
  add_config(c_screen);
  c_screen->add_option("--data", cli.data_dir, "simulated data directory")->required();
  c_screen->add_option("--checkpoint", cli.checkpoint_path, "checkpoint file")->required();
  c_screen->add_option("--external", cli.external_path, "external molecule file");
  c_screen->add_option("--out", cli.out_dir, "output directory")->required();

  CLI::App* c_cmp = app.add_subcommand("compare", "run the 8-arm model comparison grid");
  add_config(c_cmp);
  c_cmp->add_option("--data", cli.data_dir, "simulated data directory")->required();
  c_cmp->add_option("--out", cli.out_dir, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (c_sim->parsed()) return cmd_simulate(cli);
    if (c_fit->parsed()) return cmd_fit_dispersion(cli);
    if (c_train->parsed()) return cmd_train(cli);
    if (c_eval->parsed()) return cmd_evaluate(cli);
    if (c_screen->parsed()) return cmd_screen(cli);
    if (c_cmp->parsed()) return cmd_compare(cli);
  } catch (const ConfigInvalid& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const InvalidParams& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const FileError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const ParseError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const NaNLoss& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const NonConvergence& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitOther;
  }
  return kExitOther;
}
