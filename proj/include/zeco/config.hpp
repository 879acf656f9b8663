#pragma once

// Run configuration: one sectioned key/value file ("[section]" headers,
// "key = value" lines) drives every stage. Every key has a built-in default;
// the resolved snapshot lists all of them, so it alone reproduces a run.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "zeco/diffusion.hpp"
#include "zeco/stm.hpp"
#include "zeco/volume.hpp"
#include "zeco/zerofusion.hpp"

namespace zeco {

class RunConfig {
 public:
  /// Built-in desk-scale profile.
  RunConfig();

  /// Defaults overlaid with the file's keys; unknown keys are rejected.
  static RunConfig load(const std::filesystem::path& path);
  /// "section.key=value"; the key must exist.
  void apply_override(const std::string& assignment);
  void set(const std::string& key, const std::string& value);
  const std::string& get(const std::string& key) const;

  /// Complete resolved configuration in the same file format.
  std::string snapshot() const;
  const std::map<std::string, std::string>& values() const { return values_; }

  std::uint64_t seed() const;
  std::filesystem::path out_dir() const;
  zerofusion::ConditionMode condition_mode() const;

  PhantomSpec phantom() const;
  int n_train() const;
  int n_test() const;

  stm::STMConfig stm() const;
  stm::StmRunConfig stm_run() const;
  diffusion::DiffusionConfig diffusion() const;
  diffusion::DiffusionRunConfig diffusion_run() const;
  zerofusion::ConditionalRunConfig zerofusion_run() const;
  zerofusion::ConditionalRunConfig baseline_run() const;
  int ablate_seeds() const;

 private:
  int get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  std::vector<int> get_ints(const std::string& key) const;
  std::vector<double> get_doubles(const std::string& key) const;

  std::map<std::string, std::string> values_;
};

}  // namespace zeco
