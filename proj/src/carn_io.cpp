#include <map>
#include <sstream>

#include "wfs/carn.hpp"

namespace wfs {

std::string carn_config_to_text(const CarnConfig& cfg) {
  std::ostringstream os;
  os.precision(17);
  os << "in_channels=" << cfg.in_channels << '\n'
     << "width=" << cfg.width << '\n'
     << "groups=" << cfg.groups << '\n'
     << "n_global=" << cfg.n_global << '\n'
     << "n_local=" << cfg.n_local << '\n'
     << "activation_after_skip=" << (cfg.activation_after_skip ? 1 : 0) << '\n'
     << "clamp_lo=" << cfg.clamp_lo << '\n'
     << "clamp_hi=" << cfg.clamp_hi << '\n';
  return os.str();
}

CarnConfig carn_config_from_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  for (std::string line; std::getline(is, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto get = [&](const char* key) -> const std::string& {
    const auto it = kv.find(key);
    if (it == kv.end()) throw Error(Errc::config, std::string("carn config: missing ") + key);
    return it->second;
  };
  CarnConfig cfg;
  cfg.in_channels = std::stol(get("in_channels"));
  cfg.width = std::stol(get("width"));
  cfg.groups = std::stol(get("groups"));
  cfg.n_global = std::stol(get("n_global"));
  cfg.n_local = std::stol(get("n_local"));
  cfg.activation_after_skip = get("activation_after_skip") == "1";
  cfg.clamp_lo = std::stod(get("clamp_lo"));
  cfg.clamp_hi = std::stod(get("clamp_hi"));
  cfg.validate();
  return cfg;
}

}  // namespace wfs
