#include "zeco/config.hpp"

#include <sstream>

#include <boost/algorithm/string.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "zeco/error.hpp"

namespace zeco {

namespace pt = boost::property_tree;

RunConfig::RunConfig() {
  values_ = {
      {"run.seed", "0"},
      {"run.out", "runs/desk"},
      {"run.condition_mode", "zerofusion"},

      {"data.n_train", "8"},
      {"data.n_test", "4"},
      {"data.grid", "32,32,32"},
      {"data.head_axes", "12,14,13"},
      {"data.tumor_count", "1,2"},
      {"data.tumor_radius", "3.5,5"},
      {"data.noise_scale", "0.08"},
      {"data.modality", "flair-like"},

      {"stm.base_channels", "16"},
      {"stm.channel_multipliers", "1,2,4"},
      {"stm.res_blocks", "1"},
      {"stm.latent_channels", "4"},
      {"stm.codebook_size", "64"},
      {"stm.disc_base_channels", "16"},
      {"stm.disc_patch_level", "3"},
      {"stm.lambda_a", "0.1"},
      {"stm.lambda_p", "1.0"},
      {"stm.lambda_cb", "1.0"},
      {"stm.lambda_cm", "0.25"},
      {"stm.steps", "3000"},
      {"stm.batch_size", "6"},
      {"stm.lr", "5e-4"},
      {"stm.disc_lr", "2e-4"},
      {"stm.warmup_steps", "500"},
      {"stm.checkpoint_interval", "1000"},
      {"stm.dead_code_window", "1000"},

      {"diffusion.T", "200"},
      {"diffusion.beta_start", "5e-4"},
      {"diffusion.beta_end", "0.1"},
      {"diffusion.base_channels", "16"},
      {"diffusion.channel_multipliers", "1,1,1,1"},
      {"diffusion.downsample", "0,0,0"},
      {"diffusion.res_blocks", "3"},
      {"diffusion.attention_per_level", "1"},
      {"diffusion.mid_res_blocks", "2"},
      {"diffusion.mid_attention", "1"},
      {"diffusion.time_embedding_dim", "64"},
      {"diffusion.steps", "2000"},
      {"diffusion.batch_size", "6"},
      {"diffusion.lr", "1e-4"},
      {"diffusion.checkpoint_interval", "1000"},

      {"zerofusion.steps", "2000"},
      {"zerofusion.batch_size", "6"},
      {"zerofusion.lr", "2.5e-5"},
      {"zerofusion.checkpoint_interval", "1000"},

      {"baseline.steps", "2000"},
      {"baseline.batch_size", "6"},
      {"baseline.lr", "1e-4"},
      {"baseline.checkpoint_interval", "1000"},

      {"ablate.seeds", "3"},
  };
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error(ErrorCode::IoError, "config file not found: " + path.string());
  pt::ptree tree;
  try {
    pt::read_ini(path.string(), tree);
  } catch (const pt::ini_parser_error& e) {
    throw Error(ErrorCode::InvalidArgument, std::string("cannot parse config: ") + e.what());
  }
  RunConfig cfg;
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw Error(ErrorCode::InvalidArgument, "config key '" + section + "' outside a section");
    for (const auto& [key, value] : body) cfg.set(section + "." + key, value.get_value<std::string>());
  }
  return cfg;
}

void RunConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw Error(ErrorCode::InvalidArgument, "override '" + assignment + "' is not of the form section.key=value");
  }
  set(boost::trim_copy(assignment.substr(0, eq)), boost::trim_copy(assignment.substr(eq + 1)));
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto it = values_.find(key);
  if (it == values_.end()) throw Error(ErrorCode::InvalidArgument, "unknown config key '" + key + "'");
  it->second = value;
}

const std::string& RunConfig::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw Error(ErrorCode::InvalidArgument, "unknown config key '" + key + "'");
  return it->second;
}

std::string RunConfig::snapshot() const {
  pt::ptree tree;
  for (const auto& [key, value] : values_) tree.put(key, value);
  std::ostringstream os;
  pt::write_ini(os, tree);
  return os.str();
}

int RunConfig::get_int(const std::string& key) const {
  try {
    std::size_t used = 0;
    const int v = std::stoi(get(key), &used);
    if (used != get(key).size()) throw std::invalid_argument(key);
    return v;
  } catch (const std::logic_error&) {
    throw Error(ErrorCode::InvalidArgument, "config key '" + key + "' must be an integer, got '" + get(key) + "'");
  }
}

double RunConfig::get_double(const std::string& key) const {
  try {
    std::size_t used = 0;
    const double v = std::stod(get(key), &used);
    if (used != get(key).size()) throw std::invalid_argument(key);
    return v;
  } catch (const std::logic_error&) {
    throw Error(ErrorCode::InvalidArgument, "config key '" + key + "' must be a number, got '" + get(key) + "'");
  }
}

std::vector<int> RunConfig::get_ints(const std::string& key) const {
  std::vector<std::string> parts;
  boost::split(parts, get(key), boost::is_any_of(","));
  std::vector<int> out;
  for (auto& p : parts) {
    boost::trim(p);
    try {
      out.push_back(std::stoi(p));
    } catch (const std::logic_error&) {
      throw Error(ErrorCode::InvalidArgument, "config key '" + key + "' must be a comma-separated integer list");
    }
  }
  return out;
}

std::vector<double> RunConfig::get_doubles(const std::string& key) const {
  std::vector<std::string> parts;
  boost::split(parts, get(key), boost::is_any_of(","));
  std::vector<double> out;
  for (auto& p : parts) {
    boost::trim(p);
    try {
      out.push_back(std::stod(p));
    } catch (const std::logic_error&) {
      throw Error(ErrorCode::InvalidArgument, "config key '" + key + "' must be a comma-separated number list");
    }
  }
  return out;
}

std::uint64_t RunConfig::seed() const {
  try {
    return std::stoull(get("run.seed"));
  } catch (const std::logic_error&) {
    throw Error(ErrorCode::InvalidArgument, "run.seed must be a non-negative integer");
  }
}

std::filesystem::path RunConfig::out_dir() const { return get("run.out"); }

zerofusion::ConditionMode RunConfig::condition_mode() const {
  return zerofusion::parse_condition_mode(get("run.condition_mode"));
}

PhantomSpec RunConfig::phantom() const {
  PhantomSpec s;
  const auto grid = get_ints("data.grid");
  const auto axes = get_doubles("data.head_axes");
  const auto count = get_ints("data.tumor_count");
  const auto radius = get_doubles("data.tumor_radius");
  if (grid.size() != 3 || axes.size() != 3 || count.size() != 2 || radius.size() != 2) {
    throw Error(ErrorCode::InvalidArgument, "data.grid/head_axes need 3 values, tumor_count/tumor_radius need 2");
  }
  s.grid_shape = {grid[0], grid[1], grid[2]};
  s.head_axes = {axes[0], axes[1], axes[2]};
  s.tumor_count_range = {count[0], count[1]};
  s.tumor_radius_range = {radius[0], radius[1]};
  s.smooth_noise_scale = get_double("data.noise_scale");
  s.modality_tag = get("data.modality");
  s.validate();
  return s;
}

int RunConfig::n_train() const { return get_int("data.n_train"); }
int RunConfig::n_test() const { return get_int("data.n_test"); }

stm::STMConfig RunConfig::stm() const {
  stm::STMConfig c;
  c.base_channels = get_int("stm.base_channels");
  c.channel_multipliers = get_ints("stm.channel_multipliers");
  c.res_blocks = get_int("stm.res_blocks");
  c.latent_channels = get_int("stm.latent_channels");
  c.embedding_dim = c.latent_channels;
  c.codebook_size = get_int("stm.codebook_size");
  c.disc_base_channels = get_int("stm.disc_base_channels");
  c.disc_patch_level = get_int("stm.disc_patch_level");
  c.loss_weights = {get_double("stm.lambda_a"), get_double("stm.lambda_p"), get_double("stm.lambda_cb"),
                    get_double("stm.lambda_cm")};
  c.validate();
  return c;
}

stm::StmRunConfig RunConfig::stm_run() const {
  stm::StmRunConfig r;
  r.steps = get_int("stm.steps");
  r.batch_size = get_int("stm.batch_size");
  r.lr = get_double("stm.lr");
  r.disc_lr = get_double("stm.disc_lr");
  r.warmup_steps = get_int("stm.warmup_steps");
  r.checkpoint_interval = get_int("stm.checkpoint_interval");
  r.dead_code_window = get_int("stm.dead_code_window");
  r.seed = seed();
  return r;
}

diffusion::DiffusionConfig RunConfig::diffusion() const {
  diffusion::DiffusionConfig c;
  c.T = get_int("diffusion.T");
  c.beta_start = get_double("diffusion.beta_start");
  c.beta_end = get_double("diffusion.beta_end");
  auto& u = c.unet;
  u.base_channels = get_int("diffusion.base_channels");
  u.channel_multipliers = get_ints("diffusion.channel_multipliers");
  u.downsample.clear();
  for (int d : get_ints("diffusion.downsample")) u.downsample.push_back(d != 0);
  u.res_blocks = get_int("diffusion.res_blocks");
  u.attention_per_level = get_int("diffusion.attention_per_level");
  u.mid_res_blocks = get_int("diffusion.mid_res_blocks");
  u.mid_attention = get_int("diffusion.mid_attention");
  u.time_embedding_dim = get_int("diffusion.time_embedding_dim");
  u.in_channels = u.out_channels = get_int("stm.latent_channels");
  u.validate();
  c.schedule();
  return c;
}

diffusion::DiffusionRunConfig RunConfig::diffusion_run() const {
  diffusion::DiffusionRunConfig r;
  r.steps = get_int("diffusion.steps");
  r.batch_size = get_int("diffusion.batch_size");
  r.lr = get_double("diffusion.lr");
  r.checkpoint_interval = get_int("diffusion.checkpoint_interval");
  r.seed = seed();
  return r;
}

zerofusion::ConditionalRunConfig RunConfig::zerofusion_run() const {
  zerofusion::ConditionalRunConfig r;
  r.steps = get_int("zerofusion.steps");
  r.batch_size = get_int("zerofusion.batch_size");
  r.lr = get_double("zerofusion.lr");
  r.checkpoint_interval = get_int("zerofusion.checkpoint_interval");
  r.seed = seed();
  r.ckpt_name = "zerofusion";
  return r;
}

zerofusion::ConditionalRunConfig RunConfig::baseline_run() const {
  zerofusion::ConditionalRunConfig r;
  r.steps = get_int("baseline.steps");
  r.batch_size = get_int("baseline.batch_size");
  r.lr = get_double("baseline.lr");
  r.checkpoint_interval = get_int("baseline.checkpoint_interval");
  r.seed = seed();
  r.ckpt_name = "concat_baseline";
  return r;
}

int RunConfig::ablate_seeds() const { return get_int("ablate.seeds"); }

}  // namespace zeco
