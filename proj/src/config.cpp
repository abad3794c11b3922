#include "delmix/config.hpp"

#include <fstream>
#include <sstream>

#include "delmix/util.hpp"

namespace delmix {

namespace {

struct KeyValue {
  std::string section;
  std::string key;
  std::string value;
  int line = 0;
};

std::vector<KeyValue> tokenize(const std::string& text) {
  std::vector<KeyValue> out;
  std::istringstream is(text);
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    if (t.front() == '[') {
      if (t.back() != ']')
        throw ConfigInvalid("config line " + std::to_string(lineno) + ": bad section header");
      section = trim(t.substr(1, t.size() - 2));
      continue;
    }
    const size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigInvalid("config line " + std::to_string(lineno) + ": expected key = value");
    KeyValue kv;
    kv.section = section;
    kv.key = trim(t.substr(0, eq));
    kv.value = trim(t.substr(eq + 1));
    kv.line = lineno;
    if (kv.section.empty())
      throw ConfigInvalid("config line " + std::to_string(lineno) +
                          ": key '" + kv.key + "' outside any section");
    if (kv.key.empty())
      throw ConfigInvalid("config line " + std::to_string(lineno) + ": empty key");
    out.push_back(std::move(kv));
  }
  return out;
}

[[noreturn]] void bad_value(const KeyValue& kv) {
  throw ConfigInvalid("config line " + std::to_string(kv.line) + ": bad value '" + kv.value +
                      "' for key '" + kv.key + "' in [" + kv.section + "]");
}

int to_int(const KeyValue& kv) {
  try {
    size_t used = 0;
    int v = std::stoi(kv.value, &used);
    if (used != kv.value.size()) bad_value(kv);
    return v;
  } catch (const ConfigInvalid&) {
    throw;
  } catch (const std::exception&) {
    bad_value(kv);
  }
}

double to_double(const KeyValue& kv) {
  try {
    size_t used = 0;
    double v = std::stod(kv.value, &used);
    if (used != kv.value.size()) bad_value(kv);
    return v;
  } catch (const ConfigInvalid&) {
    throw;
  } catch (const std::exception&) {
    bad_value(kv);
  }
}

std::uint64_t to_u64(const KeyValue& kv) {
  try {
    size_t used = 0;
    unsigned long long v = std::stoull(kv.value, &used);
    if (used != kv.value.size()) bad_value(kv);
    return v;
  } catch (const ConfigInvalid&) {
    throw;
  } catch (const std::exception&) {
    bad_value(kv);
  }
}

bool to_bool(const KeyValue& kv) {
  if (kv.value == "true" || kv.value == "1") return true;
  if (kv.value == "false" || kv.value == "0") return false;
  bad_value(kv);
}

}  // namespace

RunConfig parse_run_config_text(const std::string& text) {
  RunConfig cfg;
  for (const KeyValue& kv : tokenize(text)) {
    if (kv.section == "simulate") {
      SimConfig& s = cfg.simulate;
      if (kv.key == "n_bb_per_cycle")
        s.n_bb_per_cycle = to_int(kv);
      else if (kv.key == "n_tags")
        s.n_tags = to_int(kv);
      else if (kv.key == "yields")
        s.yields = YieldDistribution::parse(kv.value);
      else if (kv.key == "binder_pair_fraction")
        s.binder_pair_fraction = to_double(kv);
      else if (kv.key == "enrichment_scale")
        s.enrichment_scale = to_double(kv);
      else if (kv.key == "ntc_enrichment_scale")
        s.ntc_enrichment_scale = to_double(kv);
      else if (kv.key == "noise_on_reported_yields")
        s.noise_on_reported_yields = to_double(kv);
      else if (kv.key == "promiscuous_fraction")
        s.promiscuous_fraction = to_double(kv);
      else if (kv.key == "seed")
        s.seed = to_u64(kv);
      else if (kv.key == "alpha_target")
        s.true_params.alpha_target = to_double(kv);
      else if (kv.key == "alpha_ntc")
        s.true_params.alpha_ntc = to_double(kv);
      else
        throw ConfigInvalid("unknown key '" + kv.key + "' in [simulate] (line " +
                            std::to_string(kv.line) + ")");
    } else if (kv.section == "model") {
      CountModelParams& m = cfg.model;
      if (kv.key == "predictor") {
        if (kv.value != "embed" && kv.value != "mpnn") bad_value(kv);
        cfg.predictor = kv.value;
      } else if (kv.key == "arm") {
        auto a = arm_from_name(kv.value);
        if (!a) bad_value(kv);
        m.arm = *a;
      } else if (kv.key == "proportions") {
        try {
          m.proportions = ProportionMode::parse(kv.value);
        } catch (const InvalidParams&) {
          bad_value(kv);
        }
      } else if (kv.key == "gamma") {
        m.gamma = to_double(kv);
      } else if (kv.key == "covariates") {
        if (kv.value == "identity")
          m.covariate_transform = CovariateTransform::Identity;
        else if (kv.value == "log1p")
          m.covariate_transform = CovariateTransform::Log1p;
        else
          bad_value(kv);
      } else if (kv.key == "adjust_sigma") {
        if (kv.value == "sigmoid")
          m.adjust_sigma = AdjustSigma::Sigmoid;
        else if (kv.value == "softplus")
          m.adjust_sigma = AdjustSigma::Softplus;
        else
          bad_value(kv);
      } else if (kv.key == "include_mono") {
        m.include_mono = to_bool(kv);
      } else if (kv.key == "dim") {
        cfg.dim = to_int(kv);
      } else if (kv.key == "hidden_dim") {
        cfg.mpnn.hidden_dim = to_int(kv);
      } else if (kv.key == "message_steps") {
        cfg.mpnn.message_steps = to_int(kv);
      } else if (kv.key == "readout_dim") {
        cfg.mpnn.readout_dim = to_int(kv);
      } else if (kv.key == "head_hidden") {
        cfg.mpnn.head_hidden = to_int(kv);
      } else {
        throw ConfigInvalid("unknown key '" + kv.key + "' in [model] (line " +
                            std::to_string(kv.line) + ")");
      }
    } else if (kv.section == "train") {
      if (kv.key == "epochs")
        cfg.train.epochs = to_int(kv);
      else if (kv.key == "batch")
        cfg.train.batch = to_int(kv);
      else if (kv.key == "lr")
        cfg.train.lr = to_double(kv);
      else if (kv.key == "seed")
        cfg.train.seed = to_u64(kv);
      else if (kv.key == "freeze_betas")
        cfg.model.freeze_betas = to_bool(kv);
      else if (kv.key == "holdout_fraction")
        cfg.holdout_fraction = to_double(kv);
      else if (kv.key == "n_ntc_only")
        cfg.n_ntc_only = to_int(kv);
      else if (kv.key == "n_unsequenced")
        cfg.n_unsequenced = to_int(kv);
      else
        throw ConfigInvalid("unknown key '" + kv.key + "' in [train] (line " +
                            std::to_string(kv.line) + ")");
    } else if (kv.section == "eval") {
      if (kv.key == "k")
        cfg.k = to_int(kv);
      else if (kv.key == "external")
        cfg.external_path = kv.value;
      else if (kv.key == "external_size")
        cfg.external_size = to_int(kv);
      else if (kv.key == "external_binder_fraction")
        cfg.external_binder_fraction = to_double(kv);
      else if (kv.key == "external_mode") {
        if (kv.value != "combos" && kv.value != "heldout_bb") bad_value(kv);
        cfg.external_mode = kv.value;
      } else
        throw ConfigInvalid("unknown key '" + kv.key + "' in [eval] (line " +
                            std::to_string(kv.line) + ")");
    } else {
      throw ConfigInvalid("unknown section [" + kv.section + "] (line " +
                          std::to_string(kv.line) + ")");
    }
  }
  cfg.validate();
  return cfg;
}

void RunConfig::validate() const {
  simulate.validate();
  model.validate();
  if (dim < 1) throw ConfigInvalid("dim must be >= 1");
  if (mpnn.hidden_dim < 1 || mpnn.message_steps < 1 || mpnn.readout_dim < 1 ||
      mpnn.head_hidden < 1)
    throw ConfigInvalid("mpnn dimensions must be >= 1");
  if (train.epochs < 1) throw ConfigInvalid("epochs must be >= 1");
  if (train.batch < 1) throw ConfigInvalid("batch must be >= 1");
  if (!(train.lr > 0.0)) throw ConfigInvalid("lr must be > 0");
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0))
    throw ConfigInvalid("holdout_fraction must be in (0,1)");
  if (n_ntc_only < 0 || n_unsequenced < 0)
    throw ConfigInvalid("augmentation counts must be >= 0");
  if (k < 1) throw ConfigInvalid("k must be >= 1");
  if (external_size < 2) throw ConfigInvalid("external_size must be >= 2");
  if (external_binder_fraction < 0.0 || external_binder_fraction > 1.0)
    throw ConfigInvalid("external_binder_fraction must be in [0,1]");
}

RunConfig parse_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FileError("cannot open config '" + path.string() + "'");
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse_run_config_text(buf.str());
}

std::string serialize_run_config(const RunConfig& cfg) {
  std::ostringstream os;
  const SimConfig& s = cfg.simulate;
  os << "[simulate]\n";
  os << "n_bb_per_cycle = " << s.n_bb_per_cycle << '\n';
  os << "n_tags = " << s.n_tags << '\n';
  os << "yields = " << s.yields.str() << '\n';
  os << "binder_pair_fraction = " << format_double(s.binder_pair_fraction) << '\n';
  os << "enrichment_scale = " << format_double(s.enrichment_scale) << '\n';
  os << "ntc_enrichment_scale = " << format_double(s.ntc_enrichment_scale) << '\n';
  os << "noise_on_reported_yields = " << format_double(s.noise_on_reported_yields) << '\n';
  os << "promiscuous_fraction = " << format_double(s.promiscuous_fraction) << '\n';
  os << "seed = " << s.seed << '\n';
  os << "alpha_target = " << format_double(s.true_params.alpha_target) << '\n';
  os << "alpha_ntc = " << format_double(s.true_params.alpha_ntc) << '\n';
  os << '\n';
  const CountModelParams& m = cfg.model;
  os << "[model]\n";
  os << "predictor = " << cfg.predictor << '\n';
  os << "arm = " << arm_name(m.arm) << '\n';
  os << "proportions = " << m.proportions.str() << '\n';
  os << "gamma = " << format_double(m.gamma) << '\n';
  os << "covariates = "
     << (m.covariate_transform == CovariateTransform::Log1p ? "log1p" : "identity") << '\n';
  os << "adjust_sigma = "
     << (m.adjust_sigma == AdjustSigma::Sigmoid ? "sigmoid" : "softplus") << '\n';
  os << "include_mono = " << (m.include_mono ? "true" : "false") << '\n';
  os << "dim = " << cfg.dim << '\n';
  os << "hidden_dim = " << cfg.mpnn.hidden_dim << '\n';
  os << "message_steps = " << cfg.mpnn.message_steps << '\n';
  os << "readout_dim = " << cfg.mpnn.readout_dim << '\n';
  os << "head_hidden = " << cfg.mpnn.head_hidden << '\n';
  os << '\n';
  os << "[train]\n";
  os << "epochs = " << cfg.train.epochs << '\n';
  os << "batch = " << cfg.train.batch << '\n';
  os << "lr = " << format_double(cfg.train.lr) << '\n';
  os << "seed = " << cfg.train.seed << '\n';
  os << "freeze_betas = " << (m.freeze_betas ? "true" : "false") << '\n';
  os << "holdout_fraction = " << format_double(cfg.holdout_fraction) << '\n';
  os << "n_ntc_only = " << cfg.n_ntc_only << '\n';
  os << "n_unsequenced = " << cfg.n_unsequenced << '\n';
  os << '\n';
  os << "[eval]\n";
  os << "k = " << cfg.k << '\n';
  os << "external = " << cfg.external_path << '\n';
  os << "external_size = " << cfg.external_size << '\n';
  os << "external_binder_fraction = " << format_double(cfg.external_binder_fraction) << '\n';
  os << "external_mode = " << cfg.external_mode << '\n';
  return os.str();
}

void echo_config(const std::filesystem::path& out_dir, const RunConfig& cfg) {
  std::filesystem::create_directories(out_dir);
  std::ofstream os(out_dir / "config.ini");
  if (!os) throw FileError("cannot write config echo in '" + out_dir.string() + "'");
  os << serialize_run_config(cfg);
}

}  // namespace delmix
