#include "clapkit/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "clapkit/datakit.hpp"

namespace clapkit {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::invalid_argument("config: bad boolean for " + key + ": " + v);
}

std::vector<int> parse_int_list(const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(std::stoi(item));
  }
  return out;
}

std::string int_list_str(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(v[i]);
  }
  return s;
}

std::string fmt_double(double x) {
  std::ostringstream os;
  os.precision(17);
  os << x;
  return os.str();
}

}  // namespace

void DspConfig::validate() const {
  require(sample_rate > 0, "dsp: sample_rate must be positive");
  require(hop > 0 && window > 0, "dsp: hop and window must be positive");
  require(hop <= window, "dsp: hop must not exceed window");
  require(n_mels >= 1, "dsp: n_mels must be at least 1");
  require(f_min < f_max && f_max <= sample_rate / 2.0,
          "dsp: need f_min < f_max <= sample_rate/2");
  require(log_floor > 0, "dsp: log_floor must be positive");
  require(resampler == "linear", "dsp: unknown resampler " + resampler);
}

std::string DspConfig::hash() const {
  std::string s = std::to_string(sample_rate) + "|" + std::to_string(hop) +
                  "|" + std::to_string(window) + "|" + std::to_string(n_mels) +
                  "|" + fmt_double(f_min) + "|" + fmt_double(f_max) + "|" +
                  fmt_double(log_floor) + "|" + resampler;
  return sha256_hex(s.data(), s.size()).substr(0, 16);
}

void FusionConfig::validate() const {
  require(chunk_seconds > 0, "fusion: chunk_seconds must be positive");
}

void ModelConfig::validate() const {
  require(stem_channels >= 1, "model: stem_channels must be at least 1");
  require(stem_stride >= 1, "model: stem_stride must be at least 1");
  require(!block_channels.empty(), "model: block_channels must be non-empty");
  for (int c : block_channels)
    require(c >= 1, "model: block channel counts must be positive");
  require(embed_dim >= 1, "model: embed_dim must be at least 1");
  require(text_dim >= 1, "model: text_dim must be at least 1");
  require(bottleneck_ratio >= 1, "model: bottleneck_ratio must be at least 1");
}

void TrainConfig::validate() const {
  require(batch_size >= 1, "train: batch_size must be at least 1");
  require(epochs >= 1, "train: epochs must be at least 1");
  require(base_lr > 0, "train: base_lr must be positive");
  require(beta1 >= 0 && beta1 < 1, "train: beta1 must be in [0,1)");
  require(beta2 >= 0 && beta2 < 1, "train: beta2 must be in [0,1)");
  require(warmup_frac >= 0 && warmup_frac <= 1,
          "train: warmup_frac must be in [0,1]");
  require(tau_min > 0 && tau_min <= tau_max, "train: need 0 < tau_min <= tau_max");
  require(tau_init >= tau_min && tau_init <= tau_max,
          "train: tau_init must lie in [tau_min, tau_max]");
}

void Config::validate() const {
  dsp.validate();
  fusion.validate();
  model.validate();
  train.validate();
}

namespace {

void set_key(Config& c, const std::string& section, const std::string& key,
             const std::string& value) {
  const std::string where = section + "." + key;
  try {
    if (section == "dsp") {
      if (key == "sample_rate") c.dsp.sample_rate = std::stoi(value);
      else if (key == "hop") c.dsp.hop = std::stoi(value);
      else if (key == "window") c.dsp.window = std::stoi(value);
      else if (key == "n_mels") c.dsp.n_mels = std::stoi(value);
      else if (key == "f_min") c.dsp.f_min = std::stod(value);
      else if (key == "f_max") c.dsp.f_max = std::stod(value);
      else if (key == "log_floor") c.dsp.log_floor = std::stod(value);
      else if (key == "resampler") c.dsp.resampler = value;
      else throw std::invalid_argument("config: unknown key " + where);
    } else if (section == "fusion") {
      if (key == "enabled") c.fusion.enabled = parse_bool(value, where);
      else if (key == "chunk_seconds") c.fusion.chunk_seconds = std::stod(value);
      else if (key == "seed") c.fusion.seed = std::stoull(value);
      else throw std::invalid_argument("config: unknown key " + where);
    } else if (section == "model") {
      if (key == "stem_channels") c.model.stem_channels = std::stoi(value);
      else if (key == "stem_stride") c.model.stem_stride = std::stoi(value);
      else if (key == "block_channels") c.model.block_channels = parse_int_list(value);
      else if (key == "embed_dim") c.model.embed_dim = std::stoi(value);
      else if (key == "text_dim") c.model.text_dim = std::stoi(value);
      else if (key == "text_attention") c.model.text_attention = parse_bool(value, where);
      else if (key == "bottleneck_ratio") c.model.bottleneck_ratio = std::stoi(value);
      else throw std::invalid_argument("config: unknown key " + where);
    } else if (section == "train") {
      if (key == "batch_size") c.train.batch_size = std::stoi(value);
      else if (key == "epochs") c.train.epochs = std::stoi(value);
      else if (key == "seed") c.train.seed = std::stoull(value);
      else if (key == "base_lr") c.train.base_lr = std::stod(value);
      else if (key == "beta1") c.train.beta1 = std::stod(value);
      else if (key == "beta2") c.train.beta2 = std::stod(value);
      else if (key == "adam_eps") c.train.adam_eps = std::stod(value);
      else if (key == "warmup_frac") c.train.warmup_frac = std::stod(value);
      else if (key == "clip_norm") c.train.clip_norm = std::stod(value);
      else if (key == "tau_init") c.train.tau_init = std::stod(value);
      else if (key == "tau_min") c.train.tau_min = std::stod(value);
      else if (key == "tau_max") c.train.tau_max = std::stod(value);
      else if (key == "checkpoint_every") c.train.checkpoint_every = std::stoi(value);
      else if (key == "threads") c.train.threads = std::stoi(value);
      else throw std::invalid_argument("config: unknown key " + where);
    } else {
      throw std::invalid_argument("config: unknown section [" + section + "]");
    }
  } catch (const std::invalid_argument&) {
    throw;
  } catch (const std::exception&) {
    throw std::invalid_argument("config: bad value for " + where + ": " + value);
  }
}

}  // namespace

Config parse_config(const std::string& text) {
  Config cfg;
  std::string section;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::size_t hash_pos = line.find('#');
    if (hash_pos != std::string::npos) line = line.substr(0, hash_pos);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw std::invalid_argument("config: bad section header at line " +
                                    std::to_string(lineno));
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: expected key = value at line " +
                                  std::to_string(lineno));
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (section.empty())
      throw std::invalid_argument("config: key outside a section at line " +
                                  std::to_string(lineno));
    set_key(cfg, section, key, value);
  }
  return cfg;
}

Config load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("config: cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

void apply_override(Config& cfg, const std::string& spec) {
  std::size_t eq = spec.find('=');
  if (eq == std::string::npos)
    throw std::invalid_argument("override must look like section.key=value: " + spec);
  std::string path = trim(spec.substr(0, eq));
  std::string value = trim(spec.substr(eq + 1));
  std::size_t dot = path.find('.');
  if (dot == std::string::npos)
    throw std::invalid_argument("override must look like section.key=value: " + spec);
  set_key(cfg, path.substr(0, dot), path.substr(dot + 1), value);
}

std::string serialize_config(const Config& c) {
  std::ostringstream os;
  os << "[dsp]\n";
  os << "sample_rate = " << c.dsp.sample_rate << "\n";
  os << "hop = " << c.dsp.hop << "\n";
  os << "window = " << c.dsp.window << "\n";
  os << "n_mels = " << c.dsp.n_mels << "\n";
  os << "f_min = " << fmt_double(c.dsp.f_min) << "\n";
  os << "f_max = " << fmt_double(c.dsp.f_max) << "\n";
  os << "log_floor = " << fmt_double(c.dsp.log_floor) << "\n";
  os << "resampler = " << c.dsp.resampler << "\n";
  os << "\n[fusion]\n";
  os << "enabled = " << (c.fusion.enabled ? "true" : "false") << "\n";
  os << "chunk_seconds = " << fmt_double(c.fusion.chunk_seconds) << "\n";
  os << "seed = " << c.fusion.seed << "\n";
  os << "\n[model]\n";
  os << "stem_channels = " << c.model.stem_channels << "\n";
  os << "stem_stride = " << c.model.stem_stride << "\n";
  os << "block_channels = " << int_list_str(c.model.block_channels) << "\n";
  os << "embed_dim = " << c.model.embed_dim << "\n";
  os << "text_dim = " << c.model.text_dim << "\n";
  os << "text_attention = " << (c.model.text_attention ? "true" : "false") << "\n";
  os << "bottleneck_ratio = " << c.model.bottleneck_ratio << "\n";
  os << "\n[train]\n";
  os << "batch_size = " << c.train.batch_size << "\n";
  os << "epochs = " << c.train.epochs << "\n";
  os << "seed = " << c.train.seed << "\n";
  os << "base_lr = " << fmt_double(c.train.base_lr) << "\n";
  os << "beta1 = " << fmt_double(c.train.beta1) << "\n";
  os << "beta2 = " << fmt_double(c.train.beta2) << "\n";
  os << "adam_eps = " << fmt_double(c.train.adam_eps) << "\n";
  os << "warmup_frac = " << fmt_double(c.train.warmup_frac) << "\n";
  os << "clip_norm = " << fmt_double(c.train.clip_norm) << "\n";
  os << "tau_init = " << fmt_double(c.train.tau_init) << "\n";
  os << "tau_min = " << fmt_double(c.train.tau_min) << "\n";
  os << "tau_max = " << fmt_double(c.train.tau_max) << "\n";
  os << "checkpoint_every = " << c.train.checkpoint_every << "\n";
  os << "threads = " << c.train.threads << "\n";
  return os.str();
}

void save_config(const Config& cfg, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("config: cannot write " + path);
  f << serialize_config(cfg);
}

}  // namespace clapkit
