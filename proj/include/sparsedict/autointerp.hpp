#pragma once

// Explain-then-simulate interpretability scoring for one feature:
//   1. take the first 64 tokens of each corpus line and record the feature's
//      activation per token, keeping fragments whose activations vary;
//   2. show the top 5 fragments (levels 0..10) to an explainer;
//   3. ask a simulator to predict levels on held-out fragments from the
//      explanation alone;
//   4. score = Pearson correlation of simulated and actual levels, pooled
//      over all scored tokens.
// Features with fewer than 20 varying fragments are skipped.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "sparsedict/activation_store.hpp"
#include "sparsedict/dictionary.hpp"
#include "sparsedict/types.hpp"

namespace sparsedict::interp {

inline constexpr std::size_t kFragmentLength = 64;
inline constexpr std::size_t kTopFragments = 20;
inline constexpr std::size_t kExplainFragments = 5;
inline constexpr std::size_t kScoreTopFragments = 5;
inline constexpr std::size_t kScoreRandomFragments = 5;
inline constexpr std::size_t kRandomOnlyFragments = 10;
inline constexpr int kMaxLevel = 10;

class ProtocolError : public Error {
 public:
  ProtocolError(const std::string& what, std::string transcript_ref)
      : Error(what + " (transcript: " + transcript_ref + ")"), transcript_ref_(std::move(transcript_ref)) {}
  const std::string& transcript_ref() const { return transcript_ref_; }

 private:
  std::string transcript_ref_;
};

// Raised by clients for failures worth retrying (connection loss, 429, 5xx).
class TransientClientError : public Error {
 public:
  using Error::Error;
};

// A client failure that survived all retries, or a non-retryable failure.
class ClientError : public Error {
 public:
  ClientError(Index feature, const std::string& what)
      : Error("feature " + std::to_string(feature) + ": " + what), feature_(feature) {}
  Index feature() const { return feature_; }

 private:
  Index feature_;
};

struct Fragment {
  std::vector<std::string> tokens;
  std::vector<float> activations;
  std::int64_t doc_id = 0;
  std::int64_t offset = 0;  // row index of the first token in the dataset
  double max_activation = 0.0;
};

struct RescaledFragment {
  std::vector<std::string> tokens;
  std::vector<int> levels;
  std::int64_t doc_id = 0;
};

enum class ScoringMode { top_and_random, random_only };

std::string to_string(ScoringMode mode);
ScoringMode scoring_mode_from_string(const std::string& name);

struct InterpScore {
  Index feature_index = 0;
  ScoringMode mode = ScoringMode::top_and_random;
  bool skipped = false;
  std::optional<double> correlation;  // nullopt = undefined
  std::int64_t n_fragments_scored = 0;
  std::string explanation;
};

// One window per corpus line (consecutive rows sharing a doc id), taken from
// the line start. Lines shorter than 64 tokens and windows whose activations
// are constant are dropped. Only the first `max_lines` lines are considered.
std::vector<Fragment> extract_fragments(Index feature, const Dictionary& dict, const Matrix& data,
                                        const TokenStream& tokens, std::size_t max_lines);

// level = floor(10 * a / global_max + 1/2), clipped to [0, 10].
std::vector<RescaledFragment> rescale_levels(const std::vector<Fragment>& fragments,
                                             double global_max);

struct Selection {
  bool skipped = false;
  std::vector<std::size_t> explain;  // indices into the fragment list
  std::vector<std::size_t> score;
};

// Ranks by max activation (ties by doc id). The top 5 are explained; the
// top-and-random set is ranks 6..10 plus 5 seeded draws from outside the top
// 20, the random-only set is 10 such draws. Fewer draws are taken when the
// pool outside the top 20 is smaller.
Selection select_scoring_sets(const std::vector<Fragment>& fragments, ScoringMode mode,
                              std::uint64_t seed);

// Pooled Pearson correlation over every token of every fragment.
std::optional<double> score_simulation(const std::vector<std::vector<int>>& actual,
                                       const std::vector<std::vector<int>>& simulated);

// Appends JSON objects, one per line. Thread-safe.
class Transcript {
 public:
  Transcript() = default;  // discards entries
  explicit Transcript(std::filesystem::path path);

  // Returns a reference "<path>#<entry>" for error messages.
  std::string append(const std::string& json_line);
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::mutex mutex_;
  std::size_t entries_ = 0;
};

struct SimulationItem {
  std::int64_t doc_id = 0;
  std::vector<std::string> tokens;
};

// Explainer/simulator backend. Simulator responses use the wire format of
// one "token<TAB>level" line per token.
class SimulatorClient {
 public:
  virtual ~SimulatorClient() = default;
  virtual std::string explain(const std::vector<RescaledFragment>& examples) = 0;
  virtual std::string simulate(const std::string& explanation, const SimulationItem& item) = 0;
};

// Escapes a token for a single wire line (JSON string escaping, no quotes).
std::string escape_token(const std::string& token);
std::string format_levels(const std::vector<std::string>& tokens, const std::vector<int>& levels);
// Parses and validates a simulator response; throws ProtocolError.
std::vector<int> parse_levels(const std::string& response, std::size_t expected,
                              const std::string& transcript_ref);

using AnswerKey = std::map<std::int64_t, std::vector<int>>;

class PerfectMock : public SimulatorClient {
 public:
  explicit PerfectMock(AnswerKey key) : key_(std::move(key)) {}
  std::string explain(const std::vector<RescaledFragment>& examples) override;
  std::string simulate(const std::string& explanation, const SimulationItem& item) override;

 private:
  AnswerKey key_;
};

class ConstantMock : public SimulatorClient {
 public:
  explicit ConstantMock(int level = 5) : level_(level) {}
  std::string explain(const std::vector<RescaledFragment>& examples) override;
  std::string simulate(const std::string& explanation, const SimulationItem& item) override;

 private:
  int level_;
};

// True levels plus a uniform jitter in {-1, 0, +1}, clipped to [0, 10].
// The jitter stream depends only on (seed, doc id).
class NoisyMock : public SimulatorClient {
 public:
  NoisyMock(AnswerKey key, std::uint64_t seed) : key_(std::move(key)), seed_(seed) {}
  std::string explain(const std::vector<RescaledFragment>& examples) override;
  std::string simulate(const std::string& explanation, const SimulationItem& item) override;

 private:
  AnswerKey key_;
  std::uint64_t seed_;
};

struct PromptTemplates {
  std::string explain;   // placeholders: {tokens}, {levels}
  std::string simulate;  // placeholders: {explanation}, {tokens}

  static PromptTemplates load(const std::filesystem::path& dir);
};

std::string render_template(std::string text, const std::map<std::string, std::string>& values);

struct HttpClientConfig {
  std::string endpoint;  // base URL, e.g. https://api.openai.com/v1
  std::string model;
  std::string api_key;
  std::chrono::milliseconds timeout{60000};

  // SPARSEDICT_API_URL, SPARSEDICT_API_MODEL, SPARSEDICT_API_KEY.
  static HttpClientConfig from_environment();
};

// OpenAI-compatible chat-completions client.
class HttpSimulatorClient : public SimulatorClient {
 public:
  HttpSimulatorClient(HttpClientConfig config, PromptTemplates prompts,
                      Transcript* transcript = nullptr);
  std::string explain(const std::vector<RescaledFragment>& examples) override;
  std::string simulate(const std::string& explanation, const SimulationItem& item) override;

  // Sends one chat completion and returns choices[0].message.content.
  std::string complete(const std::string& prompt);

 private:
  HttpClientConfig config_;
  PromptTemplates prompts_;
  Transcript* transcript_;
};

struct InterpOptions {
  ScoringMode mode = ScoringMode::top_and_random;
  std::size_t max_lines = 50000;
  std::uint64_t seed = 0;
  int max_retries = 3;
  std::chrono::milliseconds backoff{500};
  std::function<void(std::chrono::milliseconds)> sleep;  // defaults to this_thread::sleep_for
};

struct InterpTask {
  Index feature = 0;
  ScoringMode mode = ScoringMode::top_and_random;
  bool skipped = false;
  double global_max = 0.0;
  std::vector<Fragment> fragments;
  Selection selection;
  std::vector<RescaledFragment> explain_set;
  std::vector<RescaledFragment> score_set;

  AnswerKey answer_key() const;
};

InterpTask prepare_task(Index feature, const Dictionary& dict, const Matrix& data,
                        const TokenStream& tokens, const InterpOptions& options);
InterpScore score_task(const InterpTask& task, SimulatorClient& client,
                       const InterpOptions& options, Transcript& transcript);
InterpScore run_autointerp(Index feature, const Dictionary& dict, const Matrix& data,
                           const TokenStream& tokens, SimulatorClient& client,
                           const InterpOptions& options, Transcript& transcript);

// Runs several features with at most `parallelism` concurrent features.
// Transcripts go to <transcript_dir>/feature_<N>.jsonl. `make_client` is
// called once per feature.
std::vector<InterpScore> run_autointerp_many(
    const std::vector<Index>& features, const Dictionary& dict, const Matrix& data,
    const TokenStream& tokens,
    const std::function<std::unique_ptr<SimulatorClient>(const InterpTask&)>& make_client,
    const InterpOptions& options, const std::filesystem::path& transcript_dir,
    std::size_t parallelism);

}  // namespace sparsedict::interp
