#include <algorithm>
#include <map>

#include <toml.hpp>

#include "internal.hpp"

namespace sparsedict::cli {

namespace {

std::string flag_for_key(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return "--" + key;
}

CLI::Option* configurable_option(CLI::App& sub, const std::string& key) {
  std::string flag = flag_for_key(key);
  if (flag == "--config" || flag == "--help") return nullptr;
  return sub.get_option_no_throw(flag);
}

std::string scalar_text(const toml::node& node, const std::string& where) {
  if (auto s = node.as_string()) return s->get();
  if (auto i = node.as_integer()) return std::to_string(i->get());
  if (auto f = node.as_floating_point()) return format_double(f->get());
  if (auto b = node.as_boolean()) return b->get() ? "true" : "false";
  throw UsageError("config key '" + where + "' must be a string, number or boolean");
}

std::vector<std::string> value_texts(const toml::node& node, const std::string& where) {
  std::vector<std::string> out;
  if (auto arr = node.as_array()) {
    for (const auto& element : *arr) out.push_back(scalar_text(element, where));
  } else {
    out.push_back(scalar_text(node, where));
  }
  return out;
}

CLI::App* find_subcommand(CLI::App& app, const std::string& name) {
  for (auto* sub : app.get_subcommands([](const CLI::App*) { return true; })) {
    if (sub->get_name() == name) return sub;
  }
  return nullptr;
}

}  // namespace

void apply_config_file(const fs::path& path, CLI::App& app, CLI::App& selected) {
  require_file("--config", path);
  toml::table table;
  try {
    table = toml::parse_file(path.string());
  } catch (const toml::parse_error& e) {
    throw UsageError("cannot parse config " + path.string() + " at line " +
                     std::to_string(e.source().begin.line) + ": " + std::string(e.description()));
  }

  // Every key is checked, including sections for other subcommands, so a
  // typo anywhere in an experiment file is caught.
  std::map<std::string, std::vector<std::string>> top_level;
  std::map<std::string, std::vector<std::string>> section;
  for (auto&& [key_view, node] : table) {
    std::string key(key_view.str());
    if (auto sub_table = node.as_table()) {
      CLI::App* sub = find_subcommand(app, key);
      if (!sub) throw UsageError("config " + path.string() + ": unknown section [" + key + "]");
      for (auto&& [inner_view, inner] : *sub_table) {
        std::string inner_key(inner_view.str());
        std::string where = key + "." + inner_key;
        if (!configurable_option(*sub, inner_key)) {
          throw UsageError("config " + path.string() + ": unknown key '" + where + "'");
        }
        auto values = value_texts(inner, where);
        if (sub == &selected) section[inner_key] = std::move(values);
      }
    } else {
      if (!configurable_option(selected, key)) {
        throw UsageError("config " + path.string() + ": unknown key '" + key + "'");
      }
      top_level[key] = value_texts(node, key);
    }
  }
  for (auto& [key, values] : top_level) section.try_emplace(key, values);

  for (const auto& [key, values] : section) {
    CLI::Option* opt = configurable_option(selected, key);
    if (opt->count() > 0) continue;  // the flag wins
    try {
      for (const auto& v : values) opt->add_result(v);
      opt->run_callback();
    } catch (const CLI::Error& e) {
      throw UsageError("config " + path.string() + ": bad value for '" + key + "': " + e.what());
    }
  }
}

}  // namespace sparsedict::cli
