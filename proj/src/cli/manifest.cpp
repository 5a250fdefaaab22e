#include <charconv>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>
#include <thread>

#include <openssl/evp.h>

#include "internal.hpp"
#include "sparsedict/cli.hpp"

namespace sparsedict::cli {

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for hashing");
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 initialization failed");
  }
  std::vector<char> buffer(1 << 16);
  while (in) {
    in.read(buffer.data(), static_cast<std::streamsize>(buffer.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buffer.data(), static_cast<std::size_t>(in.gcount()));
  }
  if (in.bad()) throw IoError("read error while hashing " + path.string());
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int length = 0;
  EVP_DigestFinal_ex(ctx.get(), digest, &length);
  std::ostringstream hex;
  for (unsigned int i = 0; i < length; ++i) {
    hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return hex.str();
}

Manifest::Manifest(std::string subcommand, fs::path path)
    : path_(std::move(path)), start_(std::chrono::steady_clock::now()) {
  std::time_t now = std::time(nullptr);
  std::tm utc{};
  gmtime_r(&now, &utc);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", &utc);
  doc_ = {{"subcommand", std::move(subcommand)},
          {"started_at", stamp},
          {"config", json::object()},
          {"inputs", json::array()},
          {"outputs", json::array()}};
}

void Manifest::config(const CLI::App& sub) {
  json cfg = json::object();
  for (const CLI::Option* opt : sub.get_options()) {
    if (opt->get_lnames().empty()) continue;
    const std::string& name = opt->get_lnames().front();
    if (name == "help") continue;
    if (opt->get_expected_max() == 0) {
      cfg[name] = opt->as<bool>();
    } else if (opt->count() > 0) {
      const auto& results = opt->results();
      cfg[name] = results.size() == 1 && opt->get_expected_max() <= 1 ? json(results.front()) : json(results);
    } else {
      cfg[name] = opt->get_default_str();
    }
  }
  doc_["config"] = std::move(cfg);
}

void Manifest::input(const std::string& role, const fs::path& path) {
  doc_["inputs"].push_back({{"role", role}, {"path", path.string()}, {"sha256", sha256_file(path)}});
}

void Manifest::output(const std::string& role, const fs::path& path) {
  doc_["outputs"].push_back({{"role", role}, {"path", path.string()}});
}

void Manifest::set(const std::string& key, json value) { doc_[key] = std::move(value); }

void Manifest::write() {
  std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start_;
  doc_["wall_time_seconds"] = elapsed.count();
  write_json(doc_, path_);
}

void require_file(const std::string& flag, const fs::path& path) {
  if (path.empty()) throw UsageError(flag + " is required");
  std::error_code ec;
  if (!fs::is_regular_file(path, ec)) {
    throw IoError(flag + ": input file not found: " + path.string());
  }
}

void require_directory(const std::string& flag, const fs::path& path) {
  std::error_code ec;
  if (!fs::is_directory(path, ec)) throw IoError(flag + ": directory not found: " + path.string());
}

void prepare_output(const fs::path& path) {
  fs::path parent = path.parent_path();
  if (parent.empty()) return;
  std::error_code ec;
  fs::create_directories(parent, ec);
  if (ec) throw IoError("cannot create output directory " + parent.string() + ": " + ec.message());
}

void write_json(const json& doc, const fs::path& path) {
  prepare_output(path);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << doc.dump(2) << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

std::string csv_field(const std::string& text) {
  bool quote = text.empty() ? false : (text.front() == ' ' || text.back() == ' ');
  quote = quote || text.find_first_of(",\"\r\n") != std::string::npos;
  if (!quote) return text;
  std::string out = "\"";
  for (char c : text) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

// Shortest text that reads back to the same double.
std::string format_double(double value) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, value);
  if (ec != std::errc()) return std::to_string(value);
  return std::string(buf, end);
}

unsigned resolve_threads(const Common& common) {
  if (common.threads > 0) return common.threads;
  return std::max(1u, std::thread::hardware_concurrency());
}

}  // namespace sparsedict::cli
