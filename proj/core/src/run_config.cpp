#include "mdsm/run_config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "mdsm/diffusion_refiner.hpp"
#include "mdsm/errors.hpp"

namespace mdsm {
using nlohmann::json;

namespace {

json optimizer_json(const OptimizerConfig& o) {
  return {{"epochs", o.epochs},     {"batch_size", o.batch_size}, {"learning_rate", o.learning_rate},
          {"beta1", o.beta1},       {"beta2", o.beta2},           {"weight_decay", o.weight_decay}};
}

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& item : j.items()) {
    if (!allowed.contains(item.key())) throw ConfigError("unknown config key '" + where + "." + item.key() + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void read_optimizer(const json& j, OptimizerConfig& o, const std::string& where) {
  check_keys(j, {"epochs", "batch_size", "learning_rate", "beta1", "beta2", "weight_decay"}, where);
  read(j, "epochs", o.epochs);
  read(j, "batch_size", o.batch_size);
  read(j, "learning_rate", o.learning_rate);
  read(j, "beta1", o.beta1);
  read(j, "beta2", o.beta2);
  read(j, "weight_decay", o.weight_decay);
}

void validate_optimizer(const OptimizerConfig& o, const std::string& where) {
  if (o.epochs < 0) throw ConfigError(where + ".epochs must be >= 0");
  if (o.batch_size < 1) throw ConfigError(where + ".batch_size must be >= 1");
  if (!(o.learning_rate > 0.0)) throw ConfigError(where + ".learning_rate must be positive");
  if (!(o.beta1 >= 0.0 && o.beta1 < 1.0 && o.beta2 >= 0.0 && o.beta2 < 1.0)) {
    throw ConfigError(where + " betas must lie in [0, 1)");
  }
}

}  // namespace

std::string to_json(const RunConfig& c, int indent) {
  const json j = {
      {"seed", c.seed},
      {"data_dir", c.data_dir},
      {"run_dir", c.run_dir},
      {"lr_schedule", c.lr_schedule},
      {"train_limit", c.train_limit},
      {"verbose", c.verbose},
      {"model",
       {{"image_size", c.model.image_size},
        {"c1", c.model.c1},
        {"blocks", c.model.blocks},
        {"c_clp", c.model.c_clp},
        {"text_dim", c.model.text_dim},
        {"text_layers", c.model.text_layers},
        {"text_heads", c.model.text_heads},
        {"max_tokens", c.model.max_tokens},
        {"use_global_branch", c.model.use_global_branch},
        {"train_text_encoder", c.model.train_text_encoder}}},
      {"stage1", optimizer_json(c.stage1)},
      {"stage2",
       {{"optimizer", optimizer_json(c.stage2.optimizer)},
        {"warmup_epochs", c.stage2.warmup_epochs},
        {"patience", c.stage2.patience},
        {"holdout_fraction", c.stage2.holdout_fraction}}},
      {"diffusion",
       {{"T", c.diffusion.steps},
        {"beta_start", c.diffusion.beta_start},
        {"beta_end", c.diffusion.beta_end},
        {"t_infer", c.diffusion.t_infer},
        {"level_selection", c.diffusion.level_selection},
        {"clamp_probability", c.diffusion.clamp_probability},
        {"base_channels", c.diffusion.base_channels},
        {"noise_seed", c.diffusion.noise_seed},
        {"optimizer", optimizer_json(c.diffusion.optimizer)}}},
  };
  return j.dump(indent);
}

RunConfig run_config_from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig c;
  try {
    check_keys(j, {"seed", "data_dir", "run_dir", "lr_schedule", "train_limit", "verbose", "model", "stage1", "stage2",
                   "diffusion"},
               "config");
    read(j, "seed", c.seed);
    read(j, "data_dir", c.data_dir);
    read(j, "run_dir", c.run_dir);
    read(j, "lr_schedule", c.lr_schedule);
    read(j, "train_limit", c.train_limit);
    read(j, "verbose", c.verbose);
    if (j.contains("model")) {
      const auto& m = j.at("model");
      check_keys(m, {"image_size", "c1", "blocks", "c_clp", "text_dim", "text_layers", "text_heads", "max_tokens",
                     "use_global_branch", "train_text_encoder"},
                 "model");
      read(m, "image_size", c.model.image_size);
      read(m, "c1", c.model.c1);
      read(m, "blocks", c.model.blocks);
      read(m, "c_clp", c.model.c_clp);
      read(m, "text_dim", c.model.text_dim);
      read(m, "text_layers", c.model.text_layers);
      read(m, "text_heads", c.model.text_heads);
      read(m, "max_tokens", c.model.max_tokens);
      read(m, "use_global_branch", c.model.use_global_branch);
      read(m, "train_text_encoder", c.model.train_text_encoder);
    }
    if (j.contains("stage1")) read_optimizer(j.at("stage1"), c.stage1, "stage1");
    if (j.contains("stage2")) {
      const auto& s = j.at("stage2");
      check_keys(s, {"optimizer", "warmup_epochs", "patience", "holdout_fraction"}, "stage2");
      if (s.contains("optimizer")) read_optimizer(s.at("optimizer"), c.stage2.optimizer, "stage2.optimizer");
      read(s, "warmup_epochs", c.stage2.warmup_epochs);
      read(s, "patience", c.stage2.patience);
      read(s, "holdout_fraction", c.stage2.holdout_fraction);
    }
    if (j.contains("diffusion")) {
      const auto& d = j.at("diffusion");
      check_keys(d, {"T", "beta_start", "beta_end", "t_infer", "level_selection", "clamp_probability", "base_channels",
                     "noise_seed", "optimizer"},
                 "diffusion");
      read(d, "T", c.diffusion.steps);
      read(d, "beta_start", c.diffusion.beta_start);
      read(d, "beta_end", c.diffusion.beta_end);
      read(d, "t_infer", c.diffusion.t_infer);
      read(d, "level_selection", c.diffusion.level_selection);
      read(d, "clamp_probability", c.diffusion.clamp_probability);
      read(d, "base_channels", c.diffusion.base_channels);
      read(d, "noise_seed", c.diffusion.noise_seed);
      if (d.contains("optimizer")) read_optimizer(d.at("optimizer"), c.diffusion.optimizer, "diffusion.optimizer");
    }
  } catch (const json::type_error& e) {
    throw ConfigError(std::string("config value has the wrong type: ") + e.what());
  }
  validate(c);
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return run_config_from_json(buffer.str());
}

void save_run_config(const std::filesystem::path& path, const RunConfig& config) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write config " + path.string());
  out << to_json(config) << '\n';
}

void validate(const RunConfig& c) {
  validate_optimizer(c.stage1, "stage1");
  validate_optimizer(c.stage2.optimizer, "stage2.optimizer");
  validate_optimizer(c.diffusion.optimizer, "diffusion.optimizer");
  if (c.model.max_tokens < 1) throw ConfigError("model.max_tokens must be >= 1");
  if (c.model.blocks < 1) throw ConfigError("model.blocks must be >= 1");
  if (c.stage2.warmup_epochs < 0 || c.stage2.patience < 1) throw ConfigError("stage2 warm-up/patience out of range");
  if (!(c.stage2.holdout_fraction > 0.0 && c.stage2.holdout_fraction < 1.0)) {
    throw ConfigError("stage2.holdout_fraction must lie in (0, 1)");
  }
  if (c.diffusion.t_infer < 1 || c.diffusion.t_infer > c.diffusion.steps) {
    throw ConfigError("diffusion.t_infer must lie in [1, T]");
  }
  if (c.lr_schedule != "constant") throw ConfigError("only the constant learning-rate schedule is supported");
  check_level_selection(c.diffusion.level_selection);
  (void)build_schedule(c.diffusion.steps, c.diffusion.beta_start, c.diffusion.beta_end);
}

}  // namespace mdsm
