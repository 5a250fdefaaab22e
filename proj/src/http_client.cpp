// Eigen must come before httplib: <resolv.h> defines a `_res` macro.
#include "sparsedict/autointerp.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <httplib.h>
#include <nlohmann/json.hpp>

namespace sparsedict::interp {

using json = nlohmann::json;

namespace {

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open prompt template " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string env_or_empty(const char* name) {
  const char* value = std::getenv(name);
  return value ? std::string(value) : std::string();
}

// Splits "scheme://host[:port]/path" into ("scheme://host[:port]", "/path").
std::pair<std::string, std::string> split_url(const std::string& url) {
  auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw ArgumentError("endpoint URL needs a scheme: " + url);
  auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, ""};
  std::string path = url.substr(path_start);
  while (!path.empty() && path.back() == '/') path.pop_back();
  return {url.substr(0, path_start), path};
}

}  // namespace

// Single pass, so substituted text is never rescanned for placeholders.
std::string render_template(std::string text, const std::map<std::string, std::string>& values) {
  std::string out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto open = text.find('{', pos);
    if (open == std::string::npos) break;
    auto close = text.find('}', open + 1);
    if (close == std::string::npos) break;
    out.append(text, pos, open - pos);
    auto it = values.find(text.substr(open + 1, close - open - 1));
    if (it != values.end()) {
      out += it->second;
      pos = close + 1;
    } else {
      out += '{';
      pos = open + 1;
    }
  }
  out.append(text, pos, std::string::npos);
  return out;
}

PromptTemplates PromptTemplates::load(const std::filesystem::path& dir) {
  return PromptTemplates{read_text(dir / "explain.txt"), read_text(dir / "simulate.txt")};
}

HttpClientConfig HttpClientConfig::from_environment() {
  HttpClientConfig config;
  config.endpoint = env_or_empty("SPARSEDICT_API_URL");
  config.model = env_or_empty("SPARSEDICT_API_MODEL");
  config.api_key = env_or_empty("SPARSEDICT_API_KEY");
  if (config.endpoint.empty()) throw ArgumentError("SPARSEDICT_API_URL is not set");
  if (config.model.empty()) throw ArgumentError("SPARSEDICT_API_MODEL is not set");
  return config;
}

HttpSimulatorClient::HttpSimulatorClient(HttpClientConfig config, PromptTemplates prompts,
                                         Transcript* transcript)
    : config_(std::move(config)), prompts_(std::move(prompts)), transcript_(transcript) {
  split_url(config_.endpoint);
}

std::string HttpSimulatorClient::complete(const std::string& prompt) {
  auto [base, path] = split_url(config_.endpoint);
  httplib::Client client(base);
  auto seconds = std::chrono::duration_cast<std::chrono::seconds>(config_.timeout);
  auto micros = std::chrono::duration_cast<std::chrono::microseconds>(config_.timeout - seconds);
  client.set_connection_timeout(seconds.count(), micros.count());
  client.set_read_timeout(seconds.count(), micros.count());
  client.set_write_timeout(seconds.count(), micros.count());

  httplib::Headers headers;
  if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);
  json body = {
      {"model", config_.model},
      {"temperature", 0},
      {"messages", json::array({{{"role", "user"}, {"content", prompt}}})},
  };
  const std::string request = body.dump();
  auto result = client.Post(path + "/chat/completions", headers, request, "application/json");

  json log = {{"kind", "http"}, {"url", config_.endpoint + "/chat/completions"}, {"request", body}};
  if (!result) {
    log["error"] = httplib::to_string(result.error());
    if (transcript_) transcript_->append(log.dump());
    throw TransientClientError("HTTP request failed: " + httplib::to_string(result.error()));
  }
  log["status"] = result->status;
  log["response"] = result->body;
  if (transcript_) transcript_->append(log.dump());

  if (result->status == 429 || result->status >= 500) {
    throw TransientClientError("HTTP " + std::to_string(result->status));
  }
  if (result->status != 200) {
    throw Error("HTTP " + std::to_string(result->status) + ": " + result->body);
  }
  try {
    auto reply = json::parse(result->body);
    return reply.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const json::exception& e) {
    throw Error(std::string("malformed chat-completions response: ") + e.what());
  }
}

std::string HttpSimulatorClient::explain(const std::vector<RescaledFragment>& examples) {
  std::string tokens_block;
  std::string levels_block;
  for (const auto& frag : examples) {
    if (!tokens_block.empty()) tokens_block += '\n';
    tokens_block += format_levels(frag.tokens, frag.levels);
    for (std::size_t i = 0; i < frag.levels.size(); ++i) {
      levels_block += (i ? " " : "") + std::to_string(frag.levels[i]);
    }
    levels_block += '\n';
  }
  return complete(render_template(prompts_.explain, {{"tokens", tokens_block}, {"levels", levels_block}}));
}

std::string HttpSimulatorClient::simulate(const std::string& explanation, const SimulationItem& item) {
  std::string tokens_block;
  for (const auto& token : item.tokens) {
    tokens_block += escape_token(token);
    tokens_block += '\n';
  }
  return complete(
      render_template(prompts_.simulate, {{"explanation", explanation}, {"tokens", tokens_block}}));
}

}  // namespace sparsedict::interp
