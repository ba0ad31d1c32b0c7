#include "nsfpn/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <vector>

namespace nsfpn::config {

namespace pt = boost::property_tree;

namespace {

std::string fmt(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

template <typename T>
T parse_number(const std::string& s, const std::string& key) {
  T v{};
  const char* end = s.data() + s.size();
  auto res = std::from_chars(s.data(), end, v);
  if (res.ec != std::errc() || res.ptr != end) {
    throw std::invalid_argument("config: " + key + " = '" + s + "' is not a valid number");
  }
  return v;
}

struct Field {
  std::string section;
  std::string key;
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

template <typename T>
Field num(const char* section, const char* key, T& ref) {
  const std::string name = std::string(section) + "." + key;
  if constexpr (std::is_floating_point_v<T>) {
    return {section, key, [&ref] { return fmt(ref); },
            [&ref, name](const std::string& s) { ref = parse_number<T>(s, name); }};
  } else {
    return {section, key, [&ref] { return std::to_string(ref); },
            [&ref, name](const std::string& s) { ref = parse_number<T>(s, name); }};
  }
}

Field str(const char* section, const char* key, std::string& ref) {
  return {section, key, [&ref] { return ref; }, [&ref](const std::string& s) { ref = s; }};
}

std::vector<Field> fields(RunConfig& c, std::map<std::string, std::string>& pending) {
  std::vector<Field> f;
  auto& t = c.train;
  f.push_back(num("run", "seed", c.seed));
  f.push_back(str("run", "out", c.out));
  f.push_back(num("run", "epochs", t.epochs));
  f.push_back(num("run", "batch_size", t.batch_size));
  f.push_back(num("run", "lr", t.lr));
  f.push_back(num("run", "initial_accumulator", t.initial_accumulator));
  f.push_back(num("run", "eval_every", t.eval_every));
  f.push_back(num("run", "bce_weight", t.loss.bce_weight));
  f.push_back(num("run", "iou_weight", t.loss.iou_weight));
  f.push_back(num("run", "iou_smooth", t.loss.iou_smooth));

  auto& d = c.data;
  f.push_back({"data", "source", [&d] { return std::string(d.source == DataSource::Synthetic ? "synthetic" : "manifest"); },
               [&d](const std::string& s) {
                 if (s == "synthetic") {
                   d.source = DataSource::Synthetic;
                 } else if (s == "manifest") {
                   d.source = DataSource::Manifest;
                 } else {
                   throw std::invalid_argument("config: data.source must be synthetic or manifest, got '" + s + "'");
                 }
               }});
  f.push_back(str("data", "train_manifest", d.train_manifest));
  f.push_back(str("data", "test_manifest", d.test_manifest));
  f.push_back(num("data", "train_count", d.train_count));
  f.push_back(num("data", "test_count", d.test_count));
  f.push_back(num("data", "seed", d.seed));
  auto& s = d.scene;
  f.push_back(num("data", "height", s.height));
  f.push_back(num("data", "width", s.width));
  f.push_back(num("data", "min_targets", s.min_targets));
  f.push_back(num("data", "max_targets", s.max_targets));
  f.push_back(num("data", "amp_min", s.amp_min));
  f.push_back(num("data", "amp_max", s.amp_max));
  f.push_back(num("data", "sigma_min", s.sigma_min));
  f.push_back(num("data", "sigma_max", s.sigma_max));
  f.push_back(num("data", "background", s.background));
  f.push_back(num("data", "clutter_amp", s.clutter_amp));
  f.push_back(num("data", "clutter_smoothness", s.clutter_smoothness));
  f.push_back(num("data", "noise_std", s.noise_std));
  f.push_back(num("data", "min_distractors", s.min_distractors));
  f.push_back(num("data", "max_distractors", s.max_distractors));
  f.push_back(num("data", "distractor_amp_min", s.distractor_amp_min));
  f.push_back(num("data", "distractor_amp_max", s.distractor_amp_max));
  f.push_back(num("data", "distractor_sigma", s.distractor_sigma));

  // The model sections reuse the checkpoint key set.
  const std::map<std::string, std::string> defaults = model::NsFpnConfig{}.to_map();
  for (const auto& [k, v] : defaults) {
    std::string section = "model";
    std::string key = k;
    if (const auto dot = k.find('.'); dot != std::string::npos) {
      section = k.substr(0, dot);
      key = k.substr(dot + 1);
    }
    const std::string full = k;
    f.push_back({section, key, [&c, full] { return c.model.to_map().at(full); },
                 [&c, &pending, full](const std::string& value) {
                   pending[full] = value;
                   c.model_explicit = true;
                 }});
  }

  auto& e = c.train.eval;
  f.push_back(num("eval", "threshold", e.threshold));
  f.push_back(num("eval", "match_radius", e.match.radius));
  f.push_back({"eval", "fa_mode", [&e] { return std::string(e.fa_mode == irdata::FaMode::Pixels ? "pixels" : "regions"); },
               [&e](const std::string& v) {
                 if (v == "pixels") {
                   e.fa_mode = irdata::FaMode::Pixels;
                 } else if (v == "regions") {
                   e.fa_mode = irdata::FaMode::Regions;
                 } else {
                   throw std::invalid_argument("config: eval.fa_mode must be pixels or regions, got '" + v + "'");
                 }
               }});
  f.push_back(num("eval", "batch_size", e.batch_size));
  f.push_back(str("eval", "split", c.eval_split));
  return f;
}

const char* kSectionOrder[] = {"run", "data", "model", "lfp", "spiral", "eval"};

}  // namespace

void RunConfig::validate() const {
  if (train.epochs < 1) throw std::invalid_argument("config: run.epochs must be positive");
  if (train.batch_size < 1) throw std::invalid_argument("config: run.batch_size must be positive");
  if (!(train.lr > 0.0)) throw std::invalid_argument("config: run.lr must be positive");
  if (train.initial_accumulator < 0.0) throw std::invalid_argument("config: run.initial_accumulator must be >= 0");
  if (train.eval_every < 0) throw std::invalid_argument("config: run.eval_every must be >= 0");
  if (data.train_count < 0 || data.test_count < 0) throw std::invalid_argument("config: data counts must be >= 0");
  if (data.source == DataSource::Manifest && data.train_manifest.empty() && data.test_manifest.empty()) {
    throw std::invalid_argument("config: data.source = manifest needs train_manifest or test_manifest");
  }
  if (eval_split != "train" && eval_split != "test") {
    throw std::invalid_argument("config: eval.split must be train or test, got '" + eval_split + "'");
  }
  if (!(train.eval.threshold > 0.0 && train.eval.threshold < 1.0)) {
    throw std::invalid_argument("config: eval.threshold must lie in (0, 1)");
  }
  if (train.eval.match.radius < 0.0) throw std::invalid_argument("config: eval.match_radius must be >= 0");
  data.scene.validate();
  model.validate();
}

RunConfig parse_config(std::istream& in, const std::string& origin) {
  pt::ptree tree;
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw std::invalid_argument(origin + ":" + std::to_string(e.line()) + ": " + e.message());
  }
  RunConfig cfg;
  std::map<std::string, std::string> pending;
  const std::vector<Field> table = fields(cfg, pending);
  for (const auto& [section, body] : tree) {
    if (body.empty()) {
      throw std::invalid_argument(origin + ": key '" + section + "' outside of a section");
    }
    for (const auto& [key, value] : body) {
      const auto it = std::find_if(table.begin(), table.end(),
                                   [&](const Field& fl) { return fl.section == section && fl.key == key; });
      if (it == table.end()) throw std::invalid_argument(origin + ": unknown key [" + section + "] " + key);
      it->set(value.get_value<std::string>());
    }
  }
  if (!pending.empty()) {
    auto kv = cfg.model.to_map();
    for (const auto& [k, v] : pending) kv[k] = v;
    cfg.model = model::NsFpnConfig::from_map(kv);
  }
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path);
  return parse_config(in, path);
}

void write_config(std::ostream& out, const RunConfig& cfg) {
  RunConfig copy = cfg;
  std::map<std::string, std::string> unused;
  const std::vector<Field> table = fields(copy, unused);
  bool first = true;
  for (const char* section : kSectionOrder) {
    out << (first ? "" : "\n") << '[' << section << "]\n";
    first = false;
    for (const Field& fl : table) {
      if (fl.section == section) out << fl.key << " = " << fl.get() << '\n';
    }
  }
}

std::string to_ini(const RunConfig& cfg) {
  std::ostringstream os;
  write_config(os, cfg);
  return os.str();
}

irdata::Dataset load_split(const RunConfig& cfg, const std::string& split) {
  const bool train = split == "train";
  if (!train && split != "test") throw std::invalid_argument("load_split: unknown split '" + split + "'");
  if (cfg.data.source == DataSource::Manifest) {
    const std::string& path = train ? cfg.data.train_manifest : cfg.data.test_manifest;
    if (path.empty()) return {};
    return irdata::load_manifest(path);
  }
  return irdata::synthetic_dataset(cfg.data.scene, train ? cfg.data.train_count : cfg.data.test_count, cfg.data.seed,
                                   train ? 0 : 1);
}

}  // namespace nsfpn::config
