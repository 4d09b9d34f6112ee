#include "skipvit/cli/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include <fmt/format.h>

#include "skipvit/errors.hpp"

namespace skipvit::cli {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return "";
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  throw ValidationError(key + ": expected " + expected + ", got '" + value + "'");
}

std::uint64_t to_u64(const std::string& key, const std::string& value) {
  std::uint64_t out = 0;
  const char* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (value.empty() || ec != std::errc() || ptr != end) {
    bad_value(key, value, "a non-negative integer");
  }
  return out;
}

std::size_t to_size(const std::string& key, const std::string& value) {
  return static_cast<std::size_t>(to_u64(key, value));
}

double to_double(const std::string& key, const std::string& value) {
  double out = 0;
  const char* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (value.empty() || ec != std::errc() || ptr != end) bad_value(key, value, "a number");
  return out;
}

bool to_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  bad_value(key, value, "true or false");
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> out;
  if (trim(value).empty()) return out;
  std::stringstream in(value);
  std::string item;
  while (std::getline(in, item, ',')) out.push_back(trim(item));
  if (!value.empty() && value.back() == ',') out.push_back("");
  return out;
}

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + items[i];
  return out;
}

std::string num(double v) { return fmt::format("{}", v); }
std::string num(std::uint64_t v) { return std::to_string(v); }
std::string flag(bool v) { return v ? "true" : "false"; }

bool valid_arm_name(const std::string& name) {
  return !name.empty() && std::all_of(name.begin(), name.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-';
  });
}

/// Stage lists are set key by key and paired up once all keys are in.
struct Pending {
  std::vector<std::size_t> layers;
  std::vector<double> ratios;
};

struct Field {
  std::function<void(ExperimentConfig&, Pending&, const std::string& key, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <typename Get>
Field size_field(Get get) {
  return {[get](ExperimentConfig& c, Pending&, const std::string& k, const std::string& v) {
            get(c) = to_size(k, v);
          },
          [get](const ExperimentConfig& c) {
            return num(std::uint64_t(get(c)));
          }};
}

template <typename Get>
Field double_field(Get get) {
  return {[get](ExperimentConfig& c, Pending&, const std::string& k, const std::string& v) {
            get(c) = to_double(k, v);
          },
          [get](const ExperimentConfig& c) { return num(get(c)); }};
}

template <typename Get>
Field bool_field(Get get) {
  return {[get](ExperimentConfig& c, Pending&, const std::string& k, const std::string& v) {
            get(c) = to_bool(k, v);
          },
          [get](const ExperimentConfig& c) { return flag(get(c)); }};
}

/// Every key except the presets and the sweep keys, in output order.
const std::vector<std::pair<std::string, Field>>& fields() {
  using C = ExperimentConfig;
  static const std::vector<std::pair<std::string, Field>> table = {
      {"model.depth", size_field([](auto& c) -> auto& { return c.model.depth; })},
      {"model.heads", size_field([](auto& c) -> auto& { return c.model.heads; })},
      {"model.embed_dim", size_field([](auto& c) -> auto& { return c.model.embed_dim; })},
      {"model.ffn_ratio", size_field([](auto& c) -> auto& { return c.model.ffn_ratio; })},
      {"model.patch_size", size_field([](auto& c) -> auto& { return c.model.patch_size; })},
      {"model.image_size", size_field([](auto& c) -> auto& { return c.model.image_size; })},
      {"model.channels", size_field([](auto& c) -> auto& { return c.model.channels; })},
      {"model.num_classes", size_field([](auto& c) -> auto& { return c.model.num_classes; })},
      {"model.layernorm_eps", double_field([](auto& c) -> auto& { return c.model.layernorm_eps; })},
      {"schedule.mode",
       {[](C& c, Pending&, const std::string&, const std::string& v) {
          c.schedule.mode = skipdrop::parse_drop_mode(v);
        },
        [](const C& c) { return skipdrop::to_string(c.schedule.mode); }}},
      {"schedule.drop_layers",
       {[](C&, Pending& p, const std::string& k, const std::string& v) {
          p.layers.clear();
          for (const auto& item : split_list(v)) p.layers.push_back(to_size(k, item));
        },
        [](const C& c) {
          std::vector<std::string> items;
          for (const auto& s : c.schedule.stages) items.push_back(num(std::uint64_t(s.layer)));
          return join(items);
        }}},
      {"schedule.drop_ratios",
       {[](C&, Pending& p, const std::string& k, const std::string& v) {
          p.ratios.clear();
          for (const auto& item : split_list(v)) p.ratios.push_back(to_double(k, item));
        },
        [](const C& c) {
          std::vector<std::string> items;
          for (const auto& s : c.schedule.stages) items.push_back(num(s.ratio));
          return join(items);
        }}},
      {"schedule.skip_target",
       {[](C& c, Pending&, const std::string& k, const std::string& v) {
          if (v == "none" || v.empty()) {
            c.schedule.skip_target.reset();
          } else {
            c.schedule.skip_target = to_size(k, v);
          }
        },
        [](const C& c) {
          return c.schedule.skip_target ? num(std::uint64_t(*c.schedule.skip_target))
                                        : std::string("none");
        }}},
      {"schedule.warmup_epochs",
       size_field([](auto& c) -> auto& { return c.schedule.warmup_epochs; })},
      {"schedule.drop_after_ffn",
       bool_field([](auto& c) -> auto& { return c.schedule.drop_after_ffn; })},
      {"train.batch_size", size_field([](auto& c) -> auto& { return c.train.batch_size; })},
      {"train.epochs", size_field([](auto& c) -> auto& { return c.train.epochs; })},
      {"train.weight_decay", double_field([](auto& c) -> auto& { return c.train.weight_decay; })},
      {"train.learning_rate", double_field([](auto& c) -> auto& { return c.train.learning_rate; })},
      {"train.warmup_lr", double_field([](auto& c) -> auto& { return c.train.warmup_lr; })},
      {"train.lr_warmup_epochs",
       size_field([](auto& c) -> auto& { return c.train.lr_warmup_epochs; })},
      {"train.mixup", double_field([](auto& c) -> auto& { return c.train.mixup; })},
      {"train.seed", size_field([](auto& c) -> auto& { return c.train.seed; })},
      {"train.precision",
       {[](C& c, Pending&, const std::string& k, const std::string& v) {
          const auto bits = to_size(k, v);
          if (bits != 32 && bits != 64) bad_value(k, v, "32 or 64");
          c.train.precision = int(bits);
        },
        [](const C& c) { return std::to_string(c.train.precision); }}},
      {"train.max_steps", size_field([](auto& c) -> auto& { return c.train.max_steps; })},
      {"train.eval_every", size_field([](auto& c) -> auto& { return c.train.eval_every; })},
      {"eval.dropping", bool_field([](auto& c) -> auto& { return c.train.eval_dropping; })},
      {"dataset.name",
       {[](C& c, Pending&, const std::string&, const std::string& v) { c.dataset.name = v; },
        [](const C& c) { return c.dataset.name; }}},
      {"dataset.root",
       {[](C& c, Pending&, const std::string&, const std::string& v) { c.dataset.root = v; },
        [](const C& c) { return c.dataset.root.string(); }}},
      {"dataset.seed", size_field([](auto& c) -> auto& { return c.dataset.seed; })},
      {"dataset.train_size", size_field([](auto& c) -> auto& { return c.dataset.train_size; })},
      {"dataset.val_size", size_field([](auto& c) -> auto& { return c.dataset.val_size; })},
      {"dataset.num_classes", size_field([](auto& c) -> auto& { return c.dataset.num_classes; })},
      {"dataset.side", size_field([](auto& c) -> auto& { return c.dataset.side; })},
      {"bench.batches", size_field([](auto& c) -> auto& { return c.bench.batches; })},
      {"bench.discard", size_field([](auto& c) -> auto& { return c.bench.discard; })},
      {"output.dir",
       {[](C& c, Pending&, const std::string&, const std::string& v) { c.output_dir = v; },
        [](const C& c) { return c.output_dir.string(); }}},
      {"seed", size_field([](auto& c) -> auto& { return c.seed; })},
  };
  return table;
}

const Field* find_field(const std::string& key) {
  for (const auto& [name, field] : fields()) {
    if (name == key) return &field;
  }
  return nullptr;
}

bool is_arm_key(const std::string& key) { return key.rfind("arm.", 0) == 0; }

KeyValues to_pairs(const ExperimentConfig& c) {
  KeyValues out;
  for (const auto& [name, field] : fields()) out.emplace_back(name, field.get(c));
  std::vector<std::string> names;
  for (const auto& arm : c.arms) names.push_back(arm.name);
  out.emplace_back("sweep.arms", join(names));
  for (const auto& arm : c.arms) {
    for (const auto& [k, v] : arm.overrides) out.emplace_back("arm." + arm.name + "." + k, v);
  }
  return out;
}

}  // namespace

std::pair<std::string, std::string> split_assignment(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos) {
    throw ValidationError("expected key=value, got '" + text + "'");
  }
  auto key = trim(text.substr(0, eq));
  if (key.empty()) throw ValidationError("empty key in '" + text + "'");
  return {key, trim(text.substr(eq + 1))};
}

KeyValues parse_key_values(const std::string& text) {
  KeyValues out;
  std::stringstream in(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto body = trim(line);
    if (body.empty() || body.front() == '#') continue;
    std::pair<std::string, std::string> kv;
    try {
      kv = split_assignment(body);
    } catch (const ValidationError& e) {
      throw ValidationError("line " + std::to_string(number) + ": " + e.what());
    }
    for (const auto& [k, v] : out) {
      if (k == kv.first) {
        throw ValidationError("line " + std::to_string(number) + ": key '" + k + "' repeated");
      }
    }
    out.push_back(std::move(kv));
  }
  return out;
}

KeyValues read_key_values(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("config: cannot read '" + path.string() + "'");
  std::stringstream text;
  text << in.rdbuf();
  try {
    return parse_key_values(text.str());
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

ExperimentConfig build_experiment(const KeyValues& pairs) {
  ExperimentConfig c;
  for (const auto& [k, v] : pairs) {
    if (k == "model.preset") c.model = vit::ModelConfig::preset(v);
  }
  for (const auto& [k, v] : pairs) {
    if (k == "train.preset") c.train = trainer::TrainConfig::preset(v);
  }
  Pending pending;
  for (const auto& s : c.schedule.stages) {
    pending.layers.push_back(s.layer);
    pending.ratios.push_back(s.ratio);
  }
  std::vector<std::string> declared;
  bool arms_given = false;
  for (const auto& [k, v] : pairs) {
    if (k == "model.preset" || k == "train.preset" || is_arm_key(k)) continue;
    if (k == "sweep.arms") {
      declared = split_list(v);
      arms_given = true;
      continue;
    }
    const Field* field = find_field(k);
    if (!field) throw ValidationError(k + ": unknown key");
    field->set(c, pending, k, v);
  }
  if (pending.layers.size() != pending.ratios.size()) {
    throw ValidationError("schedule.drop_ratios: " + std::to_string(pending.ratios.size()) +
                          " ratio(s) for " + std::to_string(pending.layers.size()) +
                          " drop layer(s)");
  }
  c.schedule.stages.clear();
  for (std::size_t i = 0; i < pending.layers.size(); ++i) {
    c.schedule.stages.push_back({pending.layers[i], pending.ratios[i]});
  }

  if (arms_given) {
    for (const auto& name : declared) {
      if (!valid_arm_name(name)) {
        throw ValidationError("sweep.arms: invalid arm name '" + name + "'");
      }
      if (std::any_of(c.arms.begin(), c.arms.end(),
                      [&](const SweepArm& a) { return a.name == name; })) {
        throw ValidationError("sweep.arms: arm '" + name + "' listed twice");
      }
      c.arms.push_back({name, {}});
    }
  }
  for (const auto& [k, v] : pairs) {
    if (!is_arm_key(k)) continue;
    const auto rest = k.substr(4);
    const auto dot = rest.find('.');
    const auto name = rest.substr(0, dot);
    auto arm = std::find_if(c.arms.begin(), c.arms.end(),
                            [&](const SweepArm& a) { return a.name == name; });
    if (dot == std::string::npos || arm == c.arms.end()) {
      throw ValidationError(k + ": arm '" + name + "' is not listed in sweep.arms");
    }
    const auto sub = rest.substr(dot + 1);
    if (sub != "model.preset" && sub != "train.preset" && !find_field(sub)) {
      throw ValidationError(k + ": unknown key '" + sub + "'");
    }
    arm->overrides.emplace_back(sub, v);
  }
  return c;
}

void apply_overrides(ExperimentConfig& config, const KeyValues& overrides) {
  KeyValues pairs = to_pairs(config);
  for (const auto& [key, value] : overrides) {
    if (key == "model.preset" || key == "train.preset") {
      const auto section = key.substr(0, key.find('.') + 1);
      std::erase_if(pairs, [&](const auto& kv) { return kv.first.rfind(section, 0) == 0; });
    }
    if (key == "sweep.arms") {
      std::erase_if(pairs, [&](const auto& kv) { return is_arm_key(kv.first); });
    }
    auto it =
        std::find_if(pairs.begin(), pairs.end(), [&](const auto& kv) { return kv.first == key; });
    if (it != pairs.end()) {
      it->second = value;
    } else {
      pairs.emplace_back(key, value);
    }
  }
  config = build_experiment(pairs);
}

void apply_override(ExperimentConfig& config, const std::string& key, const std::string& value) {
  apply_overrides(config, {{key, value}});
}

ExperimentConfig resolve_arm(const ExperimentConfig& config, const SweepArm& arm) {
  ExperimentConfig out = config;
  out.arms.clear();
  try {
    apply_overrides(out, arm.overrides);
  } catch (const ValidationError& e) {
    throw ValidationError("arm." + arm.name + ": " + e.what());
  }
  return out;
}

void validate(const ExperimentConfig& c) {
  vit::validate(c.model);
  skipdrop::validate(c.schedule, c.model);
  trainer::validate(c.train);
  if (c.dataset.name != "synthetic" && c.dataset.name != "cifar10") {
    throw ValidationError("dataset.name: unknown dataset '" + c.dataset.name +
                          "' (expected synthetic or cifar10)");
  }
  if (c.dataset.side != c.model.image_size) {
    throw ValidationError("dataset.side: " + std::to_string(c.dataset.side) +
                          " does not match model.image_size " + std::to_string(c.model.image_size));
  }
  if (c.model.channels != 3) {
    throw ValidationError("model.channels: datasets provide 3 channels, got " +
                          std::to_string(c.model.channels));
  }
  if (c.dataset.num_classes > c.model.num_classes) {
    throw ValidationError("dataset.num_classes: " + std::to_string(c.dataset.num_classes) +
                          " exceeds model.num_classes " + std::to_string(c.model.num_classes));
  }
  if (c.dataset.name == "synthetic" && c.dataset.train_size == 0) {
    throw ValidationError("dataset.train_size: synthetic data needs at least one sample");
  }
  if (c.bench.batches <= c.bench.discard) {
    throw ValidationError("bench.batches: must exceed bench.discard");
  }
  for (const auto& arm : c.arms) {
    const auto resolved = resolve_arm(c, arm);
    try {
      validate(resolved);
    } catch (const ValidationError& e) {
      throw ValidationError("arm." + arm.name + ": " + e.what());
    }
  }
}

std::string to_text(const ExperimentConfig& config) {
  std::string out;
  for (const auto& [k, v] : to_pairs(config)) out += k + " = " + v + "\n";
  return out;
}

}  // namespace skipvit::cli
