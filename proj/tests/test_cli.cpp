#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "delmix/config.hpp"

using namespace delmix;
namespace fs = std::filesystem;

namespace {

// Path to the delmix executable, injected by CMake.
const char* kBinary = DELMIX_BINARY;

struct RunOutcome {
  int exit_code = -1;
  std::string output;
};

RunOutcome run(const std::string& args, const fs::path& dir) {
  const fs::path log = dir / "cmd.log";
  const std::string cmd =
      std::string(kBinary) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  RunOutcome out;
  out.exit_code = WEXITSTATUS(status);
  std::ifstream is(log);
  std::ostringstream os;
  os << is.rdbuf();
  out.output = os.str();
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

struct TempDir {
  fs::path path;
  explicit TempDir(const char* name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void write_config(const fs::path& p, const std::string& extra = "") {
  std::ofstream os(p);
  os << "[simulate]\n"
     << "n_bb_per_cycle = 8\n"
     << "n_tags = 300\n"
     << "seed = 11\n"
     << "[model]\n"
     << "dim = 8\n"
     << "head_hidden = 8\n"
     << "[train]\n"
     << "epochs = 2\n"
     << "seed = 4\n"
     << "[eval]\n"
     << "external_size = 30\n"
     << "external_binder_fraction = 0.3\n"
     << extra;
}

}  // namespace

TEST_CASE("run config text parses, serializes and rejects unknowns") {
  RunConfig cfg = parse_run_config_text(
      "[simulate]\nn_tags = 50\nn_bb_per_cycle = 5\nyields = fixed(0.7)\n"
      "[model]\narm = di_only\nproportions = flat:0.2\n"
      "[train]\nlr = 0.01\n[eval]\nk = 5\n");
  CHECK(cfg.simulate.n_tags == 50);
  CHECK(cfg.simulate.yields.kind == YieldDistribution::Kind::Fixed);
  CHECK(cfg.model.arm == Arm::DiOnly);
  CHECK(cfg.model.proportions.base == ProportionBase::Flat);
  CHECK(cfg.train.lr == 0.01);
  CHECK(cfg.k == 5);

  // round trip through the canonical serialization
  RunConfig cfg2 = parse_run_config_text(serialize_run_config(cfg));
  CHECK(serialize_run_config(cfg2) == serialize_run_config(cfg));

  CHECK_THROWS_AS(parse_run_config_text("[simulate]\nbogus_key = 1\n"), ConfigInvalid);
  CHECK_THROWS_AS(parse_run_config_text("[nosuch]\nx = 1\n"), ConfigInvalid);
  CHECK_THROWS_AS(parse_run_config_text("orphan = 1\n"), ConfigInvalid);
  CHECK_THROWS_AS(parse_run_config_text("[train]\nepochs = zero\n"), ConfigInvalid);
}

TEST_CASE("help exits zero and lists the commands") {
  TempDir dir("delmix_cli_help");
  RunOutcome out = run("--help", dir.path);
  CHECK(out.exit_code == 0);
  for (const char* cmd :
       {"simulate", "fit-dispersion", "train", "evaluate", "screen", "compare"})
    CHECK(out.output.find(cmd) != std::string::npos);
  CHECK(out.output.find("--threads") != std::string::npos);

  RunOutcome sub = run("train --help", dir.path);
  CHECK(sub.exit_code == 0);
  for (const char* flag : {"--config", "--data", "--out", "--fit-dispersion", "--arm",
                           "--proportions", "--predictor"})
    CHECK(sub.output.find(flag) != std::string::npos);
}

TEST_CASE("unknown flags exit with the config code") {
  TempDir dir("delmix_cli_unknown");
  CHECK(run("simulate --no-such-flag", dir.path).exit_code == 2);
  CHECK(run("frobnicate", dir.path).exit_code == 2);
}

TEST_CASE("simulate writes the four data files and is byte-identical on rerun") {
  TempDir dir("delmix_cli_sim");
  write_config(dir.path / "cfg.ini");
  RunOutcome out = run("simulate --config " + (dir.path / "cfg.ini").string() + " --out " +
                           (dir.path / "d1").string(),
                       dir.path);
  REQUIRE(out.exit_code == 0);
  for (const char* name :
       {"fragments.tsv", "tags.tsv", "ground_truth.tsv", "true_yields.tsv"})
    CHECK(fs::exists(dir.path / "d1" / name));
  CHECK(fs::exists(dir.path / "d1" / "config.ini"));

  RunOutcome out2 = run("simulate --config " + (dir.path / "cfg.ini").string() + " --out " +
                            (dir.path / "d2").string(),
                        dir.path);
  REQUIRE(out2.exit_code == 0);
  for (const char* name :
       {"fragments.tsv", "tags.tsv", "ground_truth.tsv", "true_yields.tsv", "config.ini"})
    CHECK(slurp(dir.path / "d1" / name) == slurp(dir.path / "d2" / name));
}

TEST_CASE("config errors name the offending key and exit 2") {
  TempDir dir("delmix_cli_badcfg");
  write_config(dir.path / "bad.ini", "");
  {
    std::ofstream os(dir.path / "bad.ini", std::ios::app);
    os << "[simulate]\nyields = uniform(0.9,0.1)\n";
  }
  RunOutcome out = run("simulate --config " + (dir.path / "bad.ini").string() + " --out " +
                           (dir.path / "x").string(),
                       dir.path);
  CHECK(out.exit_code == 2);
  CHECK(out.output.find("yields") != std::string::npos);
}

TEST_CASE("full pipeline: simulate, fit, train, evaluate, screen, compare") {
  TempDir dir("delmix_cli_pipeline");
  const std::string cfg = (dir.path / "cfg.ini").string();
  write_config(dir.path / "cfg.ini");
  const std::string data = (dir.path / "data").string();

  REQUIRE(run("simulate --config " + cfg + " --out " + data, dir.path).exit_code == 0);

  SUBCASE("train without a dispersion fit exits 2") {
    RunOutcome out =
        run("train --config " + cfg + " --data " + data + " --out " +
                (dir.path / "t0").string(),
            dir.path);
    CHECK(out.exit_code == 2);
    CHECK(out.output.find("dispersion") != std::string::npos);
  }

  SUBCASE("pipeline runs green") {
    REQUIRE(run("fit-dispersion --config " + cfg + " --data " + data + " --out " + data,
                dir.path)
                .exit_code == 0);
    REQUIRE(fs::exists(dir.path / "data" / "dispersion.tsv"));

    RunOutcome tr = run("train --config " + cfg + " --data " + data + " --out " +
                            (dir.path / "run").string(),
                        dir.path);
    REQUIRE(tr.exit_code == 0);
    CHECK(fs::exists(dir.path / "run" / "checkpoint.json"));
    CHECK(fs::exists(dir.path / "run" / "metrics.tsv"));
    CHECK(fs::exists(dir.path / "run" / "split.tsv"));

    RunOutcome ev = run("evaluate --config " + cfg + " --data " + data + " --checkpoint " +
                            (dir.path / "run" / "checkpoint.json").string() + " --out " +
                            (dir.path / "eval").string(),
                        dir.path);
    REQUIRE(ev.exit_code == 0);
    const std::string metrics = slurp(dir.path / "eval" / "metrics.tsv");
    for (const char* name : {"test_nb_loss", "r2_target", "r2_ntc", "roc_auc", "hit_rate"})
      CHECK(metrics.find(name) != std::string::npos);

    RunOutcome sc = run("screen --config " + cfg + " --data " + data + " --checkpoint " +
                            (dir.path / "run" / "checkpoint.json").string() + " --out " +
                            (dir.path / "screen").string(),
                        dir.path);
    REQUIRE(sc.exit_code == 0);
    std::ifstream hits(dir.path / "screen" / "ranked_hits.tsv");
    std::string first_line;
    std::getline(hits, first_line);
    CHECK(first_line.rfind("1\t", 0) == 0);

    // arm override matches the documented grammar
    RunOutcome tr2 = run("train --config " + cfg + " --data " + data +
                             " --arm tri_only --proportions lab_plus_learned_adjust" +
                             " --out " + (dir.path / "run2").string(),
                         dir.path);
    REQUIRE(tr2.exit_code == 0);
    CHECK(slurp(dir.path / "run2" / "config.ini").find("arm = tri_only") !=
          std::string::npos);

    // reruns of train are byte-identical
    RunOutcome tr3 = run("train --config " + cfg + " --data " + data + " --out " +
                             (dir.path / "run3").string(),
                         dir.path);
    REQUIRE(tr3.exit_code == 0);
    CHECK(slurp(dir.path / "run" / "checkpoint.json") ==
          slurp(dir.path / "run3" / "checkpoint.json"));
    CHECK(slurp(dir.path / "run" / "metrics.tsv") ==
          slurp(dir.path / "run3" / "metrics.tsv"));
  }

  SUBCASE("compare emits the eight-arm table") {
    RunOutcome cp = run("compare --config " + cfg + " --data " + data + " --out " +
                            (dir.path / "cmp").string(),
                        dir.path);
    REQUIRE(cp.exit_code == 0);
    std::ifstream table(dir.path / "cmp" / "comparison.tsv");
    std::string line;
    std::getline(table, line);
    CHECK(line.find("arm\tproportions\tloss") == 0);
    int rows = 0;
    int cols_ok = 0;
    while (std::getline(table, line)) {
      ++rows;
      int tabs = 0;
      for (char c : line)
        if (c == '\t') ++tabs;
      if (tabs == 6) ++cols_ok;
    }
    CHECK(rows == 8);
    CHECK(cols_ok == 8);
  }
}
