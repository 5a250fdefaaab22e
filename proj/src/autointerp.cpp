#include "sparsedict/autointerp.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "sparsedict/feature_eval.hpp"
#include "sparsedict/sae.hpp"

namespace sparsedict::interp {

using json = nlohmann::json;

std::string to_string(ScoringMode mode) {
  return mode == ScoringMode::top_and_random ? "top_and_random" : "random_only";
}

ScoringMode scoring_mode_from_string(const std::string& name) {
  if (name == "top_and_random" || name == "top-random") return ScoringMode::top_and_random;
  if (name == "random_only" || name == "random") return ScoringMode::random_only;
  throw ArgumentError("unknown scoring mode '" + name + "'");
}

std::vector<Fragment> extract_fragments(Index feature, const Dictionary& dict, const Matrix& data,
                                        const TokenStream& tokens, std::size_t max_lines) {
  if (tokens.tokens.size() != tokens.doc_ids.size()) {
    throw DimensionError("token stream is malformed: tokens and doc ids differ in length");
  }
  if (static_cast<std::size_t>(data.rows()) != tokens.size()) {
    throw DimensionError("token stream has " + std::to_string(tokens.size()) +
                         " tokens but the dataset has " + std::to_string(data.rows()) + " rows");
  }
  if (feature < 0 || feature >= dict.d_hid()) throw DimensionError("feature index out of range");
  if (data.cols() != dict.d_in()) throw DimensionError("dataset width does not match dictionary");

  std::vector<Fragment> out;
  std::size_t lines = 0;
  std::size_t row = 0;
  const std::size_t n = tokens.size();
  while (row < n && lines < max_lines) {
    std::size_t end = row;
    while (end < n && tokens.doc_ids[end] == tokens.doc_ids[row]) ++end;
    ++lines;
    if (end - row >= kFragmentLength) {
      Matrix window = data.middleRows(static_cast<Index>(row), static_cast<Index>(kFragmentLength));
      Matrix codes = sae::encode_batch(dict, window);
      Fragment frag;
      frag.doc_id = tokens.doc_ids[row];
      frag.offset = static_cast<std::int64_t>(row);
      frag.tokens.assign(tokens.tokens.begin() + static_cast<std::ptrdiff_t>(row),
                         tokens.tokens.begin() + static_cast<std::ptrdiff_t>(row + kFragmentLength));
      frag.activations.resize(kFragmentLength);
      float lo = codes(0, feature);
      float hi = lo;
      for (std::size_t i = 0; i < kFragmentLength; ++i) {
        float a = codes(static_cast<Index>(i), feature);
        frag.activations[i] = a;
        lo = std::min(lo, a);
        hi = std::max(hi, a);
      }
      frag.max_activation = hi;
      if (hi > lo) out.push_back(std::move(frag));
    }
    row = end;
  }
  return out;
}

std::vector<RescaledFragment> rescale_levels(const std::vector<Fragment>& fragments,
                                             double global_max) {
  if (!(global_max > 0) || !std::isfinite(global_max)) {
    throw ArgumentError("global_max must be positive");
  }
  std::vector<RescaledFragment> out;
  out.reserve(fragments.size());
  for (const auto& frag : fragments) {
    RescaledFragment r;
    r.tokens = frag.tokens;
    r.doc_id = frag.doc_id;
    r.levels.reserve(frag.activations.size());
    for (float a : frag.activations) {
      auto level = static_cast<int>(std::floor(kMaxLevel * static_cast<double>(a) / global_max + 0.5));
      r.levels.push_back(std::clamp(level, 0, kMaxLevel));
    }
    out.push_back(std::move(r));
  }
  return out;
}

Selection select_scoring_sets(const std::vector<Fragment>& fragments, ScoringMode mode,
                              std::uint64_t seed) {
  Selection sel;
  if (fragments.size() < kTopFragments) {
    sel.skipped = true;
    return sel;
  }
  std::vector<std::size_t> ranked(fragments.size());
  std::iota(ranked.begin(), ranked.end(), std::size_t{0});
  std::stable_sort(ranked.begin(), ranked.end(), [&](std::size_t a, std::size_t b) {
    if (fragments[a].max_activation != fragments[b].max_activation) {
      return fragments[a].max_activation > fragments[b].max_activation;
    }
    return fragments[a].doc_id < fragments[b].doc_id;
  });

  sel.explain.assign(ranked.begin(), ranked.begin() + kExplainFragments);
  std::vector<std::size_t> pool(ranked.begin() + kTopFragments, ranked.end());
  std::mt19937_64 rng(seed);
  std::shuffle(pool.begin(), pool.end(), rng);

  std::size_t n_random = kRandomOnlyFragments;
  if (mode == ScoringMode::top_and_random) {
    sel.score.assign(ranked.begin() + kExplainFragments,
                     ranked.begin() + kExplainFragments + kScoreTopFragments);
    n_random = kScoreRandomFragments;
  }
  n_random = std::min(n_random, pool.size());
  sel.score.insert(sel.score.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_random));
  return sel;
}

std::optional<double> score_simulation(const std::vector<std::vector<int>>& actual,
                                       const std::vector<std::vector<int>>& simulated) {
  if (actual.size() != simulated.size()) throw DimensionError("fragment counts differ");
  std::vector<double> a;
  std::vector<double> s;
  for (std::size_t i = 0; i < actual.size(); ++i) {
    if (actual[i].size() != simulated[i].size()) {
      throw DimensionError("fragment " + std::to_string(i) + " lengths differ");
    }
    a.insert(a.end(), actual[i].begin(), actual[i].end());
    s.insert(s.end(), simulated[i].begin(), simulated[i].end());
  }
  return eval::pearson(a, s);
}

Transcript::Transcript(std::filesystem::path path) : path_(std::move(path)) {
  if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
}

std::string Transcript::append(const std::string& json_line) {
  std::lock_guard lock(mutex_);
  ++entries_;
  if (!path_.empty()) {
    std::ofstream out(path_, std::ios::app);
    if (!out) throw IoError("cannot append to transcript " + path_.string());
    out << json_line << '\n';
  }
  return (path_.empty() ? std::string("<discarded>") : path_.string()) + "#" +
         std::to_string(entries_);
}

std::string escape_token(const std::string& token) {
  std::string quoted = json(token).dump();
  return quoted.substr(1, quoted.size() - 2);
}

std::string format_levels(const std::vector<std::string>& tokens, const std::vector<int>& levels) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    out += escape_token(tokens[i]);
    out += '\t';
    out += std::to_string(i < levels.size() ? levels[i] : 0);
    out += '\n';
  }
  return out;
}

std::vector<int> parse_levels(const std::string& response, std::size_t expected,
                              const std::string& transcript_ref) {
  std::vector<int> levels;
  std::istringstream in(response);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    auto tab = line.rfind('\t');
    std::string field = tab == std::string::npos ? line : line.substr(tab + 1);
    field.erase(0, field.find_first_not_of(' '));
    field.erase(field.find_last_not_of(' ') + 1);
    int value = 0;
    std::size_t used = 0;
    try {
      value = std::stoi(field, &used);
    } catch (const std::exception&) {
      throw ProtocolError("simulator returned a non-integer level '" + field + "'", transcript_ref);
    }
    if (used != field.size()) {
      throw ProtocolError("simulator returned a non-integer level '" + field + "'", transcript_ref);
    }
    if (value < 0 || value > kMaxLevel) {
      throw ProtocolError("simulator level " + std::to_string(value) + " outside [0, 10]",
                          transcript_ref);
    }
    levels.push_back(value);
  }
  if (levels.size() != expected) {
    throw ProtocolError("simulator returned " + std::to_string(levels.size()) + " levels, expected " +
                            std::to_string(expected),
                        transcript_ref);
  }
  return levels;
}

std::string PerfectMock::explain(const std::vector<RescaledFragment>&) {
  return "perfect mock explanation";
}

std::string PerfectMock::simulate(const std::string&, const SimulationItem& item) {
  auto it = key_.find(item.doc_id);
  if (it == key_.end()) throw Error("perfect mock has no answer for doc " + std::to_string(item.doc_id));
  return format_levels(item.tokens, it->second);
}

std::string ConstantMock::explain(const std::vector<RescaledFragment>&) {
  return "constant mock explanation";
}

std::string ConstantMock::simulate(const std::string&, const SimulationItem& item) {
  return format_levels(item.tokens, std::vector<int>(item.tokens.size(), level_));
}

std::string NoisyMock::explain(const std::vector<RescaledFragment>&) {
  return "noisy mock explanation";
}

std::string NoisyMock::simulate(const std::string&, const SimulationItem& item) {
  auto it = key_.find(item.doc_id);
  if (it == key_.end()) throw Error("noisy mock has no answer for doc " + std::to_string(item.doc_id));
  std::seed_seq seq{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32),
                    static_cast<std::uint32_t>(item.doc_id),
                    static_cast<std::uint32_t>(static_cast<std::uint64_t>(item.doc_id) >> 32)};
  std::mt19937_64 rng(seq);
  std::uniform_int_distribution<int> jitter(-1, 1);
  std::vector<int> levels = it->second;
  for (int& level : levels) level = std::clamp(level + jitter(rng), 0, kMaxLevel);
  return format_levels(item.tokens, levels);
}

AnswerKey InterpTask::answer_key() const {
  AnswerKey key;
  for (const auto& frag : explain_set) key[frag.doc_id] = frag.levels;
  for (const auto& frag : score_set) key[frag.doc_id] = frag.levels;
  return key;
}

InterpTask prepare_task(Index feature, const Dictionary& dict, const Matrix& data,
                        const TokenStream& tokens, const InterpOptions& options) {
  InterpTask task;
  task.feature = feature;
  task.mode = options.mode;
  task.fragments = extract_fragments(feature, dict, data, tokens, options.max_lines);
  task.selection = select_scoring_sets(task.fragments, options.mode, options.seed);
  task.skipped = task.selection.skipped;
  if (task.skipped) return task;

  std::vector<Fragment> explain;
  std::vector<Fragment> score;
  for (auto i : task.selection.explain) explain.push_back(task.fragments[i]);
  for (auto i : task.selection.score) score.push_back(task.fragments[i]);
  for (const auto& f : explain) task.global_max = std::max(task.global_max, f.max_activation);
  for (const auto& f : score) task.global_max = std::max(task.global_max, f.max_activation);
  task.explain_set = rescale_levels(explain, task.global_max);
  task.score_set = rescale_levels(score, task.global_max);
  return task;
}

namespace {

template <typename Fn>
std::string with_retries(Index feature, const InterpOptions& options, Transcript& transcript,
                         const json& request, const char* kind, Fn&& call, std::string& ref) {
  auto sleep = options.sleep ? options.sleep
                             : [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
  for (int attempt = 0;; ++attempt) {
    json entry = {{"feature", feature}, {"kind", kind}, {"attempt", attempt}, {"request", request}};
    try {
      std::string response = call();
      entry["response"] = response;
      ref = transcript.append(entry.dump());
      return response;
    } catch (const TransientClientError& e) {
      entry["error"] = e.what();
      transcript.append(entry.dump());
      if (attempt >= options.max_retries) {
        throw ClientError(feature, std::string(kind) + " failed after " +
                                       std::to_string(attempt + 1) + " attempts: " + e.what());
      }
      sleep(options.backoff * (1LL << attempt));
    } catch (const ClientError&) {
      throw;
    } catch (const ProtocolError&) {
      throw;
    } catch (const std::exception& e) {
      entry["error"] = e.what();
      transcript.append(entry.dump());
      throw ClientError(feature, std::string(kind) + " failed: " + e.what());
    }
  }
}

}  // namespace

InterpScore score_task(const InterpTask& task, SimulatorClient& client,
                       const InterpOptions& options, Transcript& transcript) {
  InterpScore score;
  score.feature_index = task.feature;
  score.mode = task.mode;
  if (task.skipped) {
    score.skipped = true;
    return score;
  }

  json explain_request = json::array();
  for (const auto& frag : task.explain_set) {
    explain_request.push_back({{"doc", frag.doc_id}, {"tokens", frag.tokens}, {"levels", frag.levels}});
  }
  std::string ref;
  score.explanation = with_retries(task.feature, options, transcript, explain_request, "explain",
                                   [&] { return client.explain(task.explain_set); }, ref);

  std::vector<std::vector<int>> actual;
  std::vector<std::vector<int>> simulated;
  for (const auto& frag : task.score_set) {
    SimulationItem item{frag.doc_id, frag.tokens};
    json request = {{"doc", frag.doc_id}, {"explanation", score.explanation}, {"tokens", frag.tokens}};
    std::string response = with_retries(task.feature, options, transcript, request, "simulate",
                                        [&] { return client.simulate(score.explanation, item); }, ref);
    simulated.push_back(parse_levels(response, frag.tokens.size(), ref));
    actual.push_back(frag.levels);
  }
  score.n_fragments_scored = static_cast<std::int64_t>(actual.size());
  score.correlation = score_simulation(actual, simulated);
  return score;
}

InterpScore run_autointerp(Index feature, const Dictionary& dict, const Matrix& data,
                           const TokenStream& tokens, SimulatorClient& client,
                           const InterpOptions& options, Transcript& transcript) {
  auto task = prepare_task(feature, dict, data, tokens, options);
  return score_task(task, client, options, transcript);
}

std::vector<InterpScore> run_autointerp_many(
    const std::vector<Index>& features, const Dictionary& dict, const Matrix& data,
    const TokenStream& tokens,
    const std::function<std::unique_ptr<SimulatorClient>(const InterpTask&)>& make_client,
    const InterpOptions& options, const std::filesystem::path& transcript_dir,
    std::size_t parallelism) {
  std::vector<InterpScore> results(features.size());
  std::vector<std::exception_ptr> errors(features.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < features.size(); i = next++) {
      try {
        auto task = prepare_task(features[i], dict, data, tokens, options);
        Transcript transcript(transcript_dir / ("feature_" + std::to_string(features[i]) + ".jsonl"));
        auto client = make_client(task);
        results[i] = score_task(task, *client, options, transcript);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::jthread> threads;
  for (std::size_t t = 0; t < std::max<std::size_t>(1, parallelism); ++t) threads.emplace_back(worker);
  threads.clear();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return results;
}

}  // namespace sparsedict::interp
