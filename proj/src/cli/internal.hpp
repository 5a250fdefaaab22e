#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "sparsedict/types.hpp"

namespace sparsedict::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

// Bad flags, config keys or parameter values. Exit code 2.
class UsageError : public Error {
 public:
  using Error::Error;
};

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  unsigned threads = 0;  // 0 = all hardware threads
};

// Merges a TOML file into the selected subcommand. Top-level scalars apply to
// every subcommand; a [name] table applies to that subcommand only and wins
// over top-level keys. Values already given as flags are kept.
void apply_config_file(const fs::path& path, CLI::App& app, CLI::App& selected);

// Records what a run read and wrote; written as JSON beside the outputs.
class Manifest {
 public:
  Manifest(std::string subcommand, fs::path path);

  void config(const CLI::App& sub);
  void input(const std::string& role, const fs::path& path);
  void output(const std::string& role, const fs::path& path);
  void set(const std::string& key, json value);
  const fs::path& path() const { return path_; }
  void write();

 private:
  fs::path path_;
  json doc_;
  std::chrono::steady_clock::time_point start_;
};

struct Context {
  const Common& common;
  CLI::App& sub;
  std::ostream& out;
};

struct Command {
  CLI::App* app = nullptr;
  std::vector<std::string> required;  // long flag names
  std::function<void(Context&)> run;
  Common* common = nullptr;  // owned by the run closure
};

// Each registers its options (bound into state owned by the returned
// closure) on a new subcommand of `app`.
Command add_synth(CLI::App& app);
Command add_train(CLI::App& app);
Command add_eval(CLI::App& app);
Command add_baseline(CLI::App& app);
Command add_histogram(CLI::App& app);
Command add_logit_effect(CLI::App& app);
Command add_interp(CLI::App& app);
Command add_patch(CLI::App& app);
Command add_tree(CLI::App& app);

// Helpers shared by the commands.
void require_file(const std::string& flag, const fs::path& path);
void require_directory(const std::string& flag, const fs::path& path);
void prepare_output(const fs::path& path);
void write_json(const json& doc, const fs::path& path);
std::string csv_field(const std::string& text);
std::string format_double(double value);
unsigned resolve_threads(const Common& common);

}  // namespace sparsedict::cli
