#pragma once

#include "stecnn/contrastive.hpp"
#include "stecnn/data.hpp"
#include "stecnn/models.hpp"

#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace stecnn {

struct DataConfig {
  enum class Source { Csv, Synthetic };
  Source source = Source::Synthetic;
  std::string path;
  SyntheticConfig synthetic;
  bool seed_from_run = true;  // synthetic seed derived from the run seed unless pinned
  bool global_standardization = false;  // default: leak-free per-fold train stats
};

/// One experiment: model, optimizer, schedule, data source, evaluation.
struct RunConfig {
  ModelConfig model;
  double lr = 3e-4;
  Index batch_size = 1024;  // clamped to the training-fold size
  int epochs = -1;          // negative: per-model default (400 conv, 200 mlp)
  std::uint64_t seed = 0;
  DataConfig data;
  std::string pretrain_checkpoint;
  std::vector<int> eval_ks = {1, 3, 5};
  PretrainConfig pretrain;

  int resolved_epochs() const {
    if (epochs >= 0) return epochs;
    return model.kind == ModelKind::Mlp ? 200 : 400;
  }

  void validate() const {
    check(epochs >= -1, "config: epochs must be >= 0");
    check(batch_size >= 1, "config: batch size must be >= 1");
    check(lr > 0, "config: learning rate must be positive");
    for (int k : eval_ks) check(k >= 0, "config: evaluation tolerance must be >= 0");
  }
};

// ---------------------------------------------------------------------------
// Config file parsing: "[section]" headers, "key = value" lines, '#' comments.
// Unknown sections or keys are errors.
// ---------------------------------------------------------------------------

namespace detail {

inline std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t");
  return s.substr(begin, end - begin + 1);
}

struct ConfigValue {
  std::string text;
  std::size_t line = 0;
};

using ConfigSections = std::map<std::string, std::map<std::string, ConfigValue>>;

inline ConfigSections parse_sections(std::istream& in, const std::string& origin) {
  ConfigSections sections;
  std::string section;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        fail(origin, ":", line_no, ": malformed section header '", line, "'");
      section = trim(line.substr(1, line.size() - 2));
      sections[section];
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      fail(origin, ":", line_no, ": expected 'key = value', got '", line, "'");
    if (section.empty()) fail(origin, ":", line_no, ": key before any [section]");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) fail(origin, ":", line_no, ": empty key");
    if (sections[section].count(key))
      fail(origin, ":", line_no, ": duplicate key '", key, "' in [", section, "]");
    sections[section][key] = {value, line_no};
  }
  return sections;
}

/// Typed view over one section that tracks which keys were consumed.
class SectionReader {
 public:
  SectionReader(const std::string& origin, const std::string& name,
                const std::map<std::string, ConfigValue>& values)
      : origin_(origin), name_(name), values_(values) {}

  std::optional<std::string> get(const std::string& key) {
    auto it = values_.find(key);
    if (it == values_.end()) return std::nullopt;
    seen_.insert(key);
    return it->second.text;
  }

  template <typename T, typename Parse>
  void read(const std::string& key, T& out, Parse parse) {
    if (auto text = get(key)) out = parse(*text, key);
  }

  void read_double(const std::string& key, double& out) {
    read(key, out, [this](const std::string& t, const std::string& k) { return to_double(t, k); });
  }
  void read_index(const std::string& key, Index& out) {
    read(key, out, [this](const std::string& t, const std::string& k) {
      return static_cast<Index>(to_long(t, k));
    });
  }
  void read_int(const std::string& key, int& out) {
    read(key, out,
         [this](const std::string& t, const std::string& k) { return static_cast<int>(to_long(t, k)); });
  }
  void read_u64(const std::string& key, std::uint64_t& out) {
    read(key, out, [this](const std::string& t, const std::string& k) {
      return static_cast<std::uint64_t>(to_long(t, k));
    });
  }
  void read_bool(const std::string& key, bool& out) {
    read(key, out, [this](const std::string& t, const std::string& k) {
      if (t == "true" || t == "1") return true;
      if (t == "false" || t == "0") return false;
      fail(origin_, ": [", name_, "] ", k, ": expected true/false, got '", t, "'");
    });
  }
  void read_string(const std::string& key, std::string& out) {
    read(key, out, [](const std::string& t, const std::string&) { return t; });
  }
  void read_index_list(const std::string& key, std::vector<Index>& out) {
    read(key, out, [this](const std::string& t, const std::string& k) {
      std::vector<Index> v;
      for (const auto& item : split_list(t, k)) v.push_back(static_cast<Index>(to_long(item, k)));
      return v;
    });
  }
  void read_int_list(const std::string& key, std::vector<int>& out) {
    read(key, out, [this](const std::string& t, const std::string& k) {
      std::vector<int> v;
      for (const auto& item : split_list(t, k)) v.push_back(static_cast<int>(to_long(item, k)));
      return v;
    });
  }

  void finish() const {
    for (const auto& [key, value] : values_) {
      if (!seen_.count(key))
        fail(origin_, ":", value.line, ": unknown key '", key, "' in [", name_, "]");
    }
  }

  [[noreturn]] void bad_value(const std::string& key, const std::string& got,
                              const std::string& expect) const {
    fail(origin_, ": [", name_, "] ", key, ": expected ", expect, ", got '", got, "'");
  }

 private:
  double to_double(const std::string& t, const std::string& key) const {
    try {
      std::size_t used = 0;
      const double v = std::stod(t, &used);
      if (used != t.size()) throw std::invalid_argument(t);
      return v;
    } catch (const std::exception&) {
      bad_value(key, t, "a number");
    }
  }
  long long to_long(const std::string& t, const std::string& key) const {
    try {
      std::size_t used = 0;
      const long long v = std::stoll(t, &used);
      if (used != t.size()) throw std::invalid_argument(t);
      return v;
    } catch (const std::exception&) {
      bad_value(key, t, "an integer");
    }
  }
  std::vector<std::string> split_list(const std::string& t, const std::string& key) const {
    std::vector<std::string> items;
    std::istringstream is(t);
    std::string item;
    while (std::getline(is, item, ',')) {
      item = trim(item);
      if (item.empty()) bad_value(key, t, "a comma-separated list");
      items.push_back(item);
    }
    if (items.empty()) bad_value(key, t, "a comma-separated list");
    return items;
  }

  std::string origin_;
  std::string name_;
  const std::map<std::string, ConfigValue>& values_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline RunConfig parse_run_config(std::istream& in, const std::string& origin) {
  const auto sections = detail::parse_sections(in, origin);
  for (const auto& [name, _] : sections) {
    if (name != "run" && name != "data" && name != "model" && name != "pretrain")
      fail(origin, ": unknown section [", name, "]");
  }
  RunConfig cfg;

  if (auto it = sections.find("run"); it != sections.end()) {
    detail::SectionReader run(origin, "run", it->second);
    if (auto kind = run.get("model")) cfg.model.kind = model_kind_from_string(*kind);
    run.read_u64("seed", cfg.seed);
    run.read_int("epochs", cfg.epochs);
    run.read_index("batch", cfg.batch_size);
    run.read_double("lr", cfg.lr);
    run.read_string("pretrain_checkpoint", cfg.pretrain_checkpoint);
    run.read_int_list("eval_ks", cfg.eval_ks);
    run.finish();
  }

  if (auto it = sections.find("data"); it != sections.end()) {
    detail::SectionReader data(origin, "data", it->second);
    if (auto source = data.get("source")) {
      if (*source == "csv") cfg.data.source = DataConfig::Source::Csv;
      else if (*source == "synthetic") cfg.data.source = DataConfig::Source::Synthetic;
      else data.bad_value("source", *source, "csv or synthetic");
    }
    data.read_string("path", cfg.data.path);
    if (auto mode = data.get("standardize")) {
      if (*mode == "global") cfg.data.global_standardization = true;
      else if (*mode == "perfold") cfg.data.global_standardization = false;
      else data.bad_value("standardize", *mode, "perfold or global");
    }
    auto& s = cfg.data.synthetic;
    data.read_index("length", s.length);
    data.read_double("positive_fraction", s.positive_fraction);
    data.read_double("amp_min", s.amp_min);
    data.read_double("amp_max", s.amp_max);
    data.read_double("width_min", s.width_min);
    data.read_double("width_max", s.width_max);
    data.read_int("max_dyadic_exponent", s.max_dyadic_exponent);
    data.read_double("width_multiplier", s.width_multiplier);
    data.read_double("noise_ar", s.noise_ar);
    data.read_int("month", s.month);
    if (auto seed = data.get("seed")) {
      std::size_t used = 0;
      s.seed = std::stoull(*seed, &used);
      cfg.data.seed_from_run = false;
    }
    data.finish();
  }

  if (auto it = sections.find("model"); it != sections.end()) {
    detail::SectionReader model(origin, "model", it->second);
    Padding padding = Padding::Circular;
    if (auto pad = model.get("padding")) {
      if (*pad == "circular") padding = Padding::Circular;
      else if (*pad == "zero") padding = Padding::Zero;
      else model.bad_value("padding", *pad, "circular or zero");
    }
    ProjectionMode projection = ProjectionMode::Max;
    if (auto proj = model.get("projection")) {
      if (*proj == "max") projection = ProjectionMode::Max;
      else if (*proj == "mean") projection = ProjectionMode::Mean;
      else model.bad_value("projection", *proj, "max or mean");
    }
    auto& e = cfg.model.equi_onedcnn;
    auto& r = cfg.model.equiresnet;
    auto& o = cfg.model.onedcnn;
    e.padding = o.padding = r.padding = padding;
    e.projection = r.projection = projection;
    if (auto preset = model.get("preset")) {
      if (*preset == "paper") r.blocks = {3, 4, 6, 3};
      else if (*preset == "desk") r.blocks = {1, 1, 1, 1};
      else model.bad_value("preset", *preset, "desk or paper");
    }
    model.read_index("lift_channels", e.lift_channels);
    model.read_index_list("gconv_channels", e.gconv_channels);
    std::vector<Index> head_hidden;
    model.read_index_list("head_hidden", head_hidden);
    if (!head_hidden.empty()) e.head_hidden = o.head_hidden = head_hidden;
    Index kernel_size = 0;
    model.read_index("kernel_size", kernel_size);
    if (kernel_size > 0) e.kernel_size = r.kernel_size = o.kernel_size = kernel_size;
    int num_scales = 0;
    model.read_int("num_scales", num_scales);
    if (num_scales > 0) e.num_scales = r.num_scales = num_scales;
    Index scale_kernel_size = 0;
    model.read_index("scale_kernel_size", scale_kernel_size);
    if (scale_kernel_size > 0) e.scale_kernel_size = r.scale_kernel_size = scale_kernel_size;
    bool pool_translation = false;
    model.read_bool("pool_translation", pool_translation);
    e.pool_translation = r.pool_translation = pool_translation;
    model.read_int_list("blocks", r.blocks);
    model.read_index_list("stage_channels", r.stage_channels);
    model.read_index_list("channels", o.channels);
    model.read_index_list("hidden", cfg.model.mlp.hidden);
    model.finish();
  }

  if (auto it = sections.find("pretrain"); it != sections.end()) {
    detail::SectionReader pre(origin, "pretrain", it->second);
    pre.read_index("batch", cfg.pretrain.batch_size);
    pre.read_double("tau", cfg.pretrain.tau);
    pre.read_int("epochs", cfg.pretrain.epochs);
    pre.read_double("lr", cfg.pretrain.lr);
    pre.read_index("projection_dim", cfg.pretrain.projection_dim);
    pre.read_double("crop_min_fraction", cfg.pretrain.augmentation.crop_min_fraction);
    pre.read_double("flip_probability", cfg.pretrain.augmentation.flip_probability);
    pre.finish();
  }

  cfg.pretrain.seed = cfg.seed;
  cfg.validate();
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("config: cannot open ", path);
  return parse_run_config(in, path);
}

/// Canonical text rendering of the fields that shape an experiment; hashed
/// into checkpoint/report provenance.
inline std::string config_fingerprint(const RunConfig& cfg) {
  std::ostringstream os;
  os << "model=" << to_string(cfg.model.kind) << ";lr=" << cfg.lr << ";batch=" << cfg.batch_size
     << ";epochs=" << cfg.resolved_epochs() << ";seed=" << cfg.seed
     << ";source=" << (cfg.data.source == DataConfig::Source::Csv ? "csv" : "synthetic")
     << ";path=" << cfg.data.path << ";global_std=" << cfg.data.global_standardization;
  const auto& s = cfg.data.synthetic;
  os << ";len=" << s.length << ";pos=" << s.positive_fraction << ";amp=" << s.amp_min << ","
     << s.amp_max << ";width=" << s.width_min << "," << s.width_max << ";dyadic="
     << s.max_dyadic_exponent << ";mult=" << s.width_multiplier << ";ar=" << s.noise_ar
     << ";month=" << s.month << ";dataseed=" << s.seed << ";fromrun=" << cfg.data.seed_from_run;
  switch (cfg.model.kind) {
    case ModelKind::EquiOneDCNN: {
      const auto& e = cfg.model.equi_onedcnn;
      os << ";lift=" << e.lift_channels << ";K=" << e.kernel_size << ";S=" << e.num_scales
         << ";Sk=" << e.scale_kernel_size << ";pool_t=" << e.pool_translation;
      for (Index c : e.gconv_channels) os << ";gc=" << c;
      for (Index h : e.head_hidden) os << ";hh=" << h;
      break;
    }
    case ModelKind::EquiResNet: {
      const auto& r = cfg.model.equiresnet;
      os << ";K=" << r.kernel_size << ";S=" << r.num_scales << ";Sk=" << r.scale_kernel_size
         << ";pool_t=" << r.pool_translation;
      for (int b : r.blocks) os << ";blk=" << b;
      for (Index c : r.stage_channels) os << ";ch=" << c;
      break;
    }
    case ModelKind::OneDCNN: {
      const auto& o = cfg.model.onedcnn;
      os << ";K=" << o.kernel_size;
      for (Index c : o.channels) os << ";ch=" << c;
      for (Index h : o.head_hidden) os << ";hh=" << h;
      break;
    }
    case ModelKind::Mlp: {
      for (Index h : cfg.model.mlp.hidden) os << ";h=" << h;
      break;
    }
  }
  return os.str();
}

}  // namespace stecnn
