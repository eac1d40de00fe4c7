#include "adshard/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "adshard/errors.hpp"

namespace adshard {

std::string_view to_string(Mode mode) {
  switch (mode) {
    case Mode::train: return "train";
    case Mode::gradcheck: return "gradcheck";
    case Mode::distcheck: return "distcheck";
    case Mode::cost: return "cost";
    case Mode::curves: return "curves";
  }
  return "?";
}

Mode parse_mode(std::string_view text) {
  for (Mode m : {Mode::train, Mode::gradcheck, Mode::distcheck, Mode::cost, Mode::curves})
    if (text == to_string(m)) return m;
  throw ConfigError("unknown mode '" + std::string(text) + "'");
}

std::string_view to_string(GradientSource src) {
  switch (src) {
    case GradientSource::adjoint: return "adjoint";
    case GradientSource::tape_detached: return "tape-detached";
    case GradientSource::tape_full: return "tape-full";
  }
  return "?";
}

GradientSource parse_gradient_source(std::string_view text) {
  for (GradientSource s :
       {GradientSource::adjoint, GradientSource::tape_detached, GradientSource::tape_full})
    if (text == to_string(s)) return s;
  throw ConfigError("unknown gradient source '" + std::string(text) + "'");
}

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <typename T>
T parse_number(std::string_view key, std::string_view text) {
  T value{};
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end)
    throw ConfigError("bad value '" + std::string(text) + "' for " + std::string(key));
  return value;
}

}  // namespace

std::vector<int> parse_int_list(std::string_view text) {
  std::vector<int> out;
  while (!text.empty()) {
    const auto comma = text.find(',');
    out.push_back(parse_number<int>("list", trim(text.substr(0, comma))));
    if (comma == std::string_view::npos) break;
    text.remove_prefix(comma + 1);
  }
  if (out.empty()) throw ConfigError("empty list");
  return out;
}

bool parse_on_off(std::string_view text) {
  if (text == "on" || text == "true" || text == "1") return true;
  if (text == "off" || text == "false" || text == "0") return false;
  throw ConfigError("expected on/off, got '" + std::string(text) + "'");
}

void apply_setting(RunConfig& cfg, std::string_view key, std::string_view value) {
  value = trim(value);
  if (key == "mode") cfg.mode = parse_mode(value);
  else if (key == "K") cfg.dims.K = parse_number<int>(key, value);
  else if (key == "N") cfg.dims.N = parse_number<int>(key, value);
  else if (key == "P") cfg.dims.P = parse_number<int>(key, value);
  else if (key == "V") cfg.dims.V = parse_number<int>(key, value);
  else if (key == "T") cfg.dims.T = parse_number<int>(key, value);
  else if (key == "bs") cfg.dims.bs = parse_number<int>(key, value);
  else if (key == "variant") cfg.variant.kind = parse_ssm_kind(value);
  else if (key == "head_activation" || key == "activation")
    cfg.variant.head_activation = parse_activation(value);
  else if (key == "loss") cfg.loss = parse_loss_kind(value);
  else if (key == "Tbar") cfg.tbar = parse_number<int>(key, value);
  else if (key == "upsilon") cfg.upsilon = parse_int_list(value);
  else if (key == "workers") cfg.workers = parse_number<int>(key, value);
  else if (key == "seed") cfg.seed = parse_number<std::uint64_t>(key, value);
  else if (key == "lr") cfg.lr = parse_number<double>(key, value);
  else if (key == "steps") cfg.steps = parse_number<int>(key, value);
  else if (key == "sequences") cfg.sequences = parse_number<int>(key, value);
  else if (key == "deterministic") cfg.deterministic = parse_on_off(value);
  else if (key == "out") cfg.out = std::string(value);
  else if (key == "preset") cfg.preset = std::string(value);
  else if (key == "h0") cfg.h0 = std::string(value);
  else if (key == "gradient") cfg.gradient = parse_gradient_source(value);
  else if (key == "instances") cfg.instances = parse_number<int>(key, value);
  else if (key == "curve_lengths") cfg.curve_lengths = parse_int_list(value);
  else if (key == "tape_limit") cfg.tape_limit = parse_number<std::size_t>(key, value);
  else if (key == "init_scale") cfg.init_scale = parse_number<double>(key, value);
  else throw ConfigError("unknown config key '" + std::string(key) + "'");
}

void load_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view view = line;
    if (const auto hash = view.find('#'); hash != std::string_view::npos) view = view.substr(0, hash);
    view = trim(view);
    if (view.empty()) continue;
    const auto eq = view.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
    try {
      apply_setting(cfg, trim(view.substr(0, eq)), view.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void RunConfig::validate() const {
  dims.validate();
  if (h0 != "zero") throw ConfigError("h0 policy '" + h0 + "' is not supported (only 'zero')");
  if (tbar && *tbar < 1) throw ConfigError("Tbar must be >= 1");
  if (workers < 1) throw ConfigError("workers must be >= 1");
  if (steps < 0) throw ConfigError("steps must be >= 0");
  if (sequences < 1) throw ConfigError("sequences must be >= 1");
  if (instances < 1) throw ConfigError("instances must be >= 1");
  if (upsilon.empty()) throw ConfigError("upsilon list is empty");
  for (int u : upsilon)
    if (u < 1) throw ConfigError("upsilon values must be >= 1");
  for (int T : curve_lengths)
    if (T < 1) throw ConfigError("curve lengths must be >= 1");
  if (!(init_scale >= 0)) throw ConfigError("init_scale must be >= 0");
}

std::string describe(const RunConfig& cfg) {
  std::ostringstream out;
  const ModelDims& d = cfg.dims;
  out << "mode=" << to_string(cfg.mode) << " K=" << d.K << " N=" << d.N << " P=" << d.P
      << " V=" << d.V << " T=" << d.T << " bs=" << d.bs << " variant=" << to_string(cfg.variant.kind)
      << " activation=" << to_string(cfg.variant.head_activation)
      << " loss=" << to_string(cfg.loss) << " Tbar=" << cfg.effective_tbar() << " upsilon=";
  for (std::size_t i = 0; i < cfg.upsilon.size(); ++i) out << (i ? "," : "") << cfg.upsilon[i];
  out << " workers=" << cfg.workers << " seed=" << cfg.seed
      << " deterministic=" << (cfg.deterministic ? "on" : "off");
  return out.str();
}

}  // namespace adshard
