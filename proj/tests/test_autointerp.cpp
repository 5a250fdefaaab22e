#include <doctest.h>

#include "sparsedict/autointerp.hpp"

#include <atomic>
#include <cstdlib>
#include <set>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "interp_fixture.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace sparsedict;
using namespace sparsedict::interp;
using json = nlohmann::json;

namespace {

InterpOptions quick_options(ScoringMode mode = ScoringMode::top_and_random, std::uint64_t seed = 7) {
  InterpOptions o;
  o.mode = mode;
  o.seed = seed;
  o.sleep = [](std::chrono::milliseconds) {};
  return o;
}

Fragment fragment(std::int64_t doc, double max_activation) {
  Fragment f;
  f.doc_id = doc;
  f.max_activation = max_activation;
  f.tokens = std::vector<std::string>(kFragmentLength, "t");
  f.activations = std::vector<float>(kFragmentLength, 0.0f);
  f.activations[0] = static_cast<float>(max_activation);
  return f;
}

std::vector<Fragment> fragments(int n) {
  std::vector<Fragment> out;
  for (int i = 0; i < n; ++i) out.push_back(fragment(i, 1.0 + 0.01 * ((i * 37) % n)));
  return out;
}

// Fails the first `failures` calls with a transient error.
class FlakyClient : public SimulatorClient {
 public:
  FlakyClient(AnswerKey key, int failures) : inner_(std::move(key)), failures_(failures) {}
  std::string explain(const std::vector<RescaledFragment>& examples) override {
    maybe_fail();
    return inner_.explain(examples);
  }
  std::string simulate(const std::string& e, const SimulationItem& item) override {
    maybe_fail();
    return inner_.simulate(e, item);
  }
  int calls = 0;

 private:
  void maybe_fail() {
    if (calls++ < failures_) throw TransientClientError("503 from upstream");
  }
  PerfectMock inner_;
  int failures_;
};

class FixedResponseClient : public SimulatorClient {
 public:
  explicit FixedResponseClient(std::string response) : response_(std::move(response)) {}
  std::string explain(const std::vector<RescaledFragment>&) override { return "x"; }
  std::string simulate(const std::string&, const SimulationItem&) override { return response_; }

 private:
  std::string response_;
};

std::size_t count_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  std::size_t n = 0;
  std::string line;
  while (std::getline(in, line)) ++n;
  return n;
}

}  // namespace

TEST_CASE("extract_fragments examples") {
  auto corpus = testing::make_interp_corpus(12);
  auto all = extract_fragments(0, corpus.dict, corpus.data, corpus.tokens, 50000);
  CHECK(all.size() == 12u);
  CHECK(all[3].doc_id == 3);
  CHECK(all[3].offset == 3 * 64);
  CHECK(all[3].tokens.size() == kFragmentLength);
  CHECK(all[3].max_activation == doctest::Approx(1.0 + 3.0 / 8.0));

  CHECK(extract_fragments(0, corpus.dict, corpus.data, corpus.tokens, 1).size() <= 1u);

  Matrix silent = Matrix::Constant(corpus.data.rows(), 1, -1.0f);
  CHECK(extract_fragments(0, corpus.dict, silent, corpus.tokens, 50000).empty());

  // Fires on exactly one token of line 7.
  Matrix one = Matrix::Zero(corpus.data.rows(), 1);
  one(7 * 64 + 13, 0) = 2.0f;
  auto single = extract_fragments(0, corpus.dict, one, corpus.tokens, 50000);
  REQUIRE(single.size() == 1u);
  CHECK(single[0].doc_id == 7);
  CHECK(single[0].max_activation > 0);
}

TEST_CASE("extract_fragments skips short lines and constant windows") {
  auto flat = testing::make_interp_corpus(3, 4);
  CHECK(extract_fragments(0, flat.dict, flat.data, flat.tokens, 50000).size() == 3u);
  auto short_lines = testing::make_interp_corpus(5, 0, 63);
  CHECK(extract_fragments(0, short_lines.dict, short_lines.data, short_lines.tokens, 50000).empty());
  // Only the first 64 tokens of a longer line are used.
  auto long_lines = testing::make_interp_corpus(2, 0, 100);
  auto frags = extract_fragments(0, long_lines.dict, long_lines.data, long_lines.tokens, 50000);
  REQUIRE(frags.size() == 2u);
  CHECK(frags[1].offset == 100);

  TokenStream misaligned = flat.tokens;
  misaligned.tokens.pop_back();
  misaligned.doc_ids.pop_back();
  CHECK_THROWS_AS(extract_fragments(0, flat.dict, flat.data, misaligned, 10), DimensionError);
  CHECK_THROWS_AS(extract_fragments(1, flat.dict, flat.data, flat.tokens, 10), DimensionError);
}

TEST_CASE("rescale_levels examples") {
  Fragment f;
  f.activations = {0.0f, 0.5f, 1.0f};
  f.tokens = {"a", "b", "c"};
  auto r = rescale_levels({f}, 1.0);
  CHECK(r[0].levels == std::vector<int>{0, 5, 10});
  f.activations = {0.05f, 0.049f, 2.5f};
  r = rescale_levels({f}, 2.5);
  CHECK(r[0].levels == std::vector<int>{0, 0, 10});
  f.activations = {0.125f};  // 10 * 0.125 / 0.25 = 5 exactly
  f.tokens = {"a"};
  CHECK(rescale_levels({f}, 0.25)[0].levels[0] == 5);
  f.activations = {0.15f};  // 10 * 0.15 / 1.0 = 1.5, half-up -> 2
  CHECK(rescale_levels({f}, 1.0)[0].levels[0] == 2);
  CHECK_THROWS_AS(rescale_levels({f}, 0.0), ArgumentError);
  CHECK_THROWS_AS(rescale_levels({f}, -1.0), ArgumentError);
}

TEST_CASE("property: rescaling is monotone and within range") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::uniform_real_distribution<float> u(0.0f, 5.0f);
    Fragment f;
    for (int i = 0; i < 64; ++i) {
      f.activations.push_back(u(rng));
      f.tokens.push_back("t");
    }
    double g = *std::max_element(f.activations.begin(), f.activations.end());
    auto levels = rescale_levels({f}, g)[0].levels;
    for (int i = 0; i < 64; ++i) {
      CHECK(levels[i] >= 0);
      CHECK(levels[i] <= 10);
      for (int j = 0; j < 64; ++j) {
        if (f.activations[i] <= f.activations[j]) CHECK(levels[i] <= levels[j]);
      }
    }
  }
}

TEST_CASE("selection: skip boundary at 20 fragments") {
  CHECK(select_scoring_sets(fragments(19), ScoringMode::top_and_random, 1).skipped);
  auto twenty = select_scoring_sets(fragments(20), ScoringMode::top_and_random, 1);
  CHECK_FALSE(twenty.skipped);
  CHECK(twenty.explain.size() == 5u);
  CHECK(twenty.score.size() == 5u);  // nothing outside the top 20 to draw from
  CHECK(select_scoring_sets(fragments(19), ScoringMode::random_only, 1).skipped);
}

TEST_CASE("selection: sizes, disjointness, ranking and determinism") {
  auto frags = fragments(100);
  std::vector<std::size_t> ranked(100);
  std::iota(ranked.begin(), ranked.end(), std::size_t{0});
  std::stable_sort(ranked.begin(), ranked.end(), [&](std::size_t a, std::size_t b) {
    return frags[a].max_activation > frags[b].max_activation ||
           (frags[a].max_activation == frags[b].max_activation && frags[a].doc_id < frags[b].doc_id);
  });
  std::set<std::size_t> top20(ranked.begin(), ranked.begin() + 20);

  auto tr = select_scoring_sets(frags, ScoringMode::top_and_random, 5);
  CHECK(tr.score.size() == 10u);
  CHECK(std::vector<std::size_t>(ranked.begin(), ranked.begin() + 5) == tr.explain);
  CHECK(std::vector<std::size_t>(ranked.begin() + 5, ranked.begin() + 10) ==
        std::vector<std::size_t>(tr.score.begin(), tr.score.begin() + 5));
  for (std::size_t i = 5; i < 10; ++i) CHECK(top20.count(tr.score[i]) == 0);
  std::set<std::size_t> explain(tr.explain.begin(), tr.explain.end());
  for (auto s : tr.score) CHECK(explain.count(s) == 0);

  auto ro = select_scoring_sets(frags, ScoringMode::random_only, 5);
  CHECK(ro.score.size() == 10u);
  for (auto s : ro.score) CHECK(top20.count(s) == 0);
  CHECK(std::set<std::size_t>(ro.score.begin(), ro.score.end()).size() == 10u);

  auto again = select_scoring_sets(frags, ScoringMode::random_only, 5);
  CHECK(again.score == ro.score);
  CHECK(again.explain == ro.explain);
  CHECK(select_scoring_sets(frags, ScoringMode::random_only, 6).score != ro.score);
}

TEST_CASE("selection ties are broken by doc id") {
  std::vector<Fragment> frags;
  for (int i = 0; i < 25; ++i) frags.push_back(fragment(100 - i, 1.0));
  auto sel = select_scoring_sets(frags, ScoringMode::top_and_random, 0);
  for (std::size_t i = 0; i < 5; ++i) CHECK(frags[sel.explain[i]].doc_id == 76 + std::int64_t(i));
}

TEST_CASE("score_simulation examples") {
  std::vector<std::vector<int>> actual = {{0, 5, 10}};
  CHECK(*score_simulation(actual, actual) == doctest::Approx(1.0));
  CHECK(*score_simulation(actual, {{10, 5, 0}}) == doctest::Approx(-1.0));
  auto r = score_simulation(actual, {{0, 4, 9}});
  CHECK(*r == doctest::Approx(oracle::pearson({0, 5, 10}, {0, 4, 9})));
  CHECK(*r == doctest::Approx(0.99795).epsilon(1e-4));
  CHECK_FALSE(score_simulation(actual, {{5, 5, 5}}).has_value());
  CHECK_THROWS_AS(score_simulation(actual, {{1, 2}}), DimensionError);
  CHECK_THROWS_AS(score_simulation(actual, {}), DimensionError);
}

TEST_CASE("property: scoring is symmetric and pooled") {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<std::vector<int>> a(3), b(3);
    std::vector<double> fa, fb;
    for (int f = 0; f < 3; ++f) {
      for (int t = 0; t < 8; ++t) {
        a[f].push_back(int(rng() % 11));
        b[f].push_back(int(rng() % 11));
        fa.push_back(a[f].back());
        fb.push_back(b[f].back());
      }
    }
    auto ab = score_simulation(a, b);
    auto ba = score_simulation(b, a);
    REQUIRE(ab.has_value());
    CHECK(*ab == doctest::Approx(*ba).epsilon(1e-12));
    CHECK(*ab == doctest::Approx(oracle::pearson(fa, fb)).epsilon(1e-9));
  }
}

TEST_CASE("wire format round trip and validation") {
  std::vector<std::string> tokens = {"plain", "tab\there", "new\nline", "\"q\"", "\\"};
  std::vector<int> levels = {0, 3, 10, 7, 1};
  auto text = format_levels(tokens, levels);
  CHECK(std::count(text.begin(), text.end(), '\n') == 5);
  CHECK(parse_levels(text, 5, "ref") == levels);
  CHECK(parse_levels("a\t1\r\n\nb\t2\n", 2, "ref") == std::vector<int>{1, 2});
  CHECK(escape_token("tab\there") == "tab\\there");

  try {
    parse_levels("a\t1\n", 2, "log.jsonl#4");
    FAIL("expected a protocol error");
  } catch (const ProtocolError& e) {
    CHECK(e.transcript_ref() == "log.jsonl#4");
    CHECK(std::string(e.what()).find("log.jsonl#4") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_levels("a\tfive\n", 1, "r"), ProtocolError);
  CHECK_THROWS_AS(parse_levels("a\t4.5\n", 1, "r"), ProtocolError);
  CHECK_THROWS_AS(parse_levels("a\t11\n", 1, "r"), ProtocolError);
  CHECK_THROWS_AS(parse_levels("a\t-1\n", 1, "r"), ProtocolError);
}

TEST_CASE("scoring mode names") {
  CHECK(scoring_mode_from_string("top-random") == ScoringMode::top_and_random);
  CHECK(scoring_mode_from_string("random") == ScoringMode::random_only);
  CHECK(scoring_mode_from_string(to_string(ScoringMode::random_only)) == ScoringMode::random_only);
  CHECK_THROWS_AS(scoring_mode_from_string("top"), ArgumentError);
}

TEST_CASE("full protocol with mocks") {
  testing::TempDir dir;
  auto corpus = testing::make_interp_corpus(40);
  for (auto mode : {ScoringMode::top_and_random, ScoringMode::random_only}) {
    auto options = quick_options(mode);
    auto task = prepare_task(0, corpus.dict, corpus.data, corpus.tokens, options);
    REQUIRE_FALSE(task.skipped);
    CHECK(task.explain_set.size() == 5u);
    CHECK(task.score_set.size() == 10u);
    for (const auto& f : task.explain_set) {
      CHECK(*std::max_element(f.levels.begin(), f.levels.end()) <= 10);
    }

    Transcript transcript(dir / ("perfect_" + to_string(mode) + ".jsonl"));
    PerfectMock perfect(task.answer_key());
    auto score = score_task(task, perfect, options, transcript);
    REQUIRE(score.correlation.has_value());
    CHECK(*score.correlation == doctest::Approx(1.0));
    CHECK(score.n_fragments_scored == 10);
    CHECK(score.mode == mode);
    CHECK(count_lines(transcript.path()) == 11u);  // 1 explain + 10 simulate

    Transcript none;
    ConstantMock constant;
    CHECK_FALSE(score_task(task, constant, options, none).correlation.has_value());

    NoisyMock noisy(task.answer_key(), 11);
    auto n1 = score_task(task, noisy, options, none);
    REQUIRE(n1.correlation.has_value());
    CHECK(*n1.correlation > 0.8);
    CHECK(*n1.correlation < 1.0);
    NoisyMock noisy2(task.answer_key(), 11);
    CHECK(*score_task(task, noisy2, options, none).correlation == *n1.correlation);
  }
}

TEST_CASE("random-only scoring never sees a top-20 fragment") {
  auto corpus = testing::make_interp_corpus(60);
  auto options = quick_options(ScoringMode::random_only);
  auto task = prepare_task(0, corpus.dict, corpus.data, corpus.tokens, options);
  // Line i peaks at 1 + i/8, so the top 20 are docs 40..59.
  for (const auto& f : task.score_set) CHECK(f.doc_id < 40);
  for (const auto& f : task.explain_set) CHECK(f.doc_id >= 55);
}

TEST_CASE("skipped features report without calling the client") {
  auto corpus = testing::make_interp_corpus(19, 30);
  Transcript none;
  FixedResponseClient client("unused");
  auto score = run_autointerp(0, corpus.dict, corpus.data, corpus.tokens, client, quick_options(), none);
  CHECK(score.skipped);
  CHECK_FALSE(score.correlation.has_value());
}

TEST_CASE("transient failures are retried with exponential backoff") {
  auto corpus = testing::make_interp_corpus(30);
  std::vector<std::chrono::milliseconds> sleeps;
  auto options = quick_options();
  options.sleep = [&](std::chrono::milliseconds d) { sleeps.push_back(d); };
  auto task = prepare_task(0, corpus.dict, corpus.data, corpus.tokens, options);

  testing::TempDir dir;
  Transcript transcript(dir / "t.jsonl");
  FlakyClient flaky(task.answer_key(), 2);
  auto score = score_task(task, flaky, options, transcript);
  CHECK(*score.correlation == doctest::Approx(1.0));
  CHECK(sleeps == std::vector<std::chrono::milliseconds>{std::chrono::milliseconds(500),
                                                          std::chrono::milliseconds(1000)});
  CHECK(count_lines(transcript.path()) == 13u);  // two failed attempts logged too

  FlakyClient hopeless(task.answer_key(), 1000);
  Transcript none;
  try {
    score_task(task, hopeless, options, none);
    FAIL("expected a client error");
  } catch (const ClientError& e) {
    CHECK(e.feature() == 0);
    CHECK(std::string(e.what()).find("4 attempts") != std::string::npos);
  }
  CHECK(hopeless.calls == 4);
}

TEST_CASE("malformed simulator output is a protocol error") {
  auto corpus = testing::make_interp_corpus(30);
  testing::TempDir dir;
  Transcript transcript(dir / "bad.jsonl");
  FixedResponseClient client("tok\t3\n");
  try {
    run_autointerp(0, corpus.dict, corpus.data, corpus.tokens, client, quick_options(), transcript);
    FAIL("expected a protocol error");
  } catch (const ProtocolError& e) {
    CHECK(e.transcript_ref() == (dir / "bad.jsonl").string() + "#2");
  }
}

TEST_CASE("concurrent runs match sequential runs") {
  testing::TempDir dir;
  auto corpus = testing::make_interp_corpus(30);
  // Three identical features over a 3-wide identity dictionary.
  corpus.dict = {Matrix::Ones(3, 1), Vector::Zero(3), std::nullopt};
  auto options = quick_options();
  auto make = [](const InterpTask& task) -> std::unique_ptr<SimulatorClient> {
    return std::make_unique<NoisyMock>(task.answer_key(), 5);
  };
  auto parallel = run_autointerp_many({0, 1, 2}, corpus.dict, corpus.data, corpus.tokens, make, options,
                                      dir.path(), 3);
  auto serial = run_autointerp_many({0, 1, 2}, corpus.dict, corpus.data, corpus.tokens, make, options,
                                    dir / "serial", 1);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(parallel[i].feature_index == Index(i));
    CHECK(*parallel[i].correlation == *serial[i].correlation);
    CHECK(std::filesystem::exists(dir / ("feature_" + std::to_string(i) + ".jsonl")));
  }
}

TEST_CASE("prompt templates render in a single pass") {
  CHECK(render_template("A {tokens} B {levels}", {{"tokens", "{levels}"}, {"levels", "L"}}) ==
        "A {levels} B L");
  CHECK(render_template("{unknown} {x", {{"x", "y"}}) == "{unknown} {x");
  testing::TempDir dir;
  CHECK_THROWS_AS(PromptTemplates::load(dir.path()), IoError);
  std::ofstream(dir / "explain.txt") << "E {tokens}";
  std::ofstream(dir / "simulate.txt") << "S {explanation}";
  auto t = PromptTemplates::load(dir.path());
  CHECK(t.explain == "E {tokens}");
  CHECK(t.simulate == "S {explanation}");
}

TEST_CASE("shipped prompt templates carry their placeholders") {
  auto t = PromptTemplates::load(std::filesystem::path(SPARSEDICT_PROMPT_DIR));
  CHECK(t.explain.find("{tokens}") != std::string::npos);
  CHECK(t.simulate.find("{explanation}") != std::string::npos);
  CHECK(t.simulate.find("{tokens}") != std::string::npos);
}

TEST_CASE("client configuration comes from the environment") {
  ::unsetenv("SPARSEDICT_API_URL");
  CHECK_THROWS_AS(HttpClientConfig::from_environment(), ArgumentError);
  ::setenv("SPARSEDICT_API_URL", "http://localhost:1/v1", 1);
  ::setenv("SPARSEDICT_API_MODEL", "sim-model", 1);
  ::setenv("SPARSEDICT_API_KEY", "secret", 1);
  auto cfg = HttpClientConfig::from_environment();
  CHECK(cfg.endpoint == "http://localhost:1/v1");
  CHECK(cfg.model == "sim-model");
  CHECK(cfg.api_key == "secret");
  ::unsetenv("SPARSEDICT_API_URL");
}

namespace {

// A local chat-completions endpoint that fails the first `failures`
// requests with `fail_status`, then answers simulate prompts with level 5
// for every token line and explain prompts with a fixed sentence.
class FakeEndpoint {
 public:
  FakeEndpoint(int failures, int fail_status) : failures_(failures), fail_status_(fail_status) {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      requests.push_back(json::parse(req.body));
      auth.push_back(req.get_header_value("Authorization"));
      if (seen_++ < failures_) {
        res.status = fail_status_;
        res.set_content("busy", "text/plain");
        return;
      }
      std::string prompt = requests.back()["messages"][0]["content"];
      std::string content = "it fires on w tokens";
      if (prompt.rfind("SIM", 0) == 0) {
        content.clear();
        std::istringstream in(prompt.substr(prompt.find('\n') + 1));
        std::string line;
        while (std::getline(in, line)) {
          if (!line.empty()) content += line + "\t5\n";
        }
      }
      json reply = {{"choices", json::array({{{"message", {{"role", "assistant"}, {"content", content}}}}})}};
      res.set_content(reply.dump(), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~FakeEndpoint() {
    server_.stop();
    thread_.join();
  }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1"; }

  std::vector<json> requests;
  std::vector<std::string> auth;

 private:
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  int failures_;
  int fail_status_;
  int seen_ = 0;
};

HttpSimulatorClient make_client(const std::string& url, Transcript* t = nullptr) {
  HttpClientConfig cfg{url, "sim-model", "k3y", std::chrono::milliseconds(5000)};
  PromptTemplates prompts{"EXPLAIN\n{tokens}", "SIM {explanation}\n{tokens}"};
  return HttpSimulatorClient(cfg, prompts, t);
}

}  // namespace

TEST_CASE("HTTP client speaks chat completions") {
  FakeEndpoint endpoint(0, 500);
  auto client = make_client(endpoint.url());
  CHECK(client.complete("hello") == "it fires on w tokens");
  REQUIRE(endpoint.requests.size() == 1u);
  CHECK(endpoint.requests[0]["model"] == "sim-model");
  CHECK(endpoint.requests[0]["messages"][0]["role"] == "user");
  CHECK(endpoint.requests[0]["messages"][0]["content"] == "hello");
  CHECK(endpoint.auth[0] == "Bearer k3y");
}

TEST_CASE("HTTP status classification") {
  for (int status : {500, 503, 429}) {
    FakeEndpoint endpoint(1, status);
    auto client = make_client(endpoint.url());
    CHECK_THROWS_AS(client.complete("x"), TransientClientError);
    CHECK(client.complete("x") == "it fires on w tokens");
  }
  FakeEndpoint bad(1, 400);
  auto client = make_client(bad.url());
  try {
    client.complete("x");
    FAIL("expected an error");
  } catch (const TransientClientError&) {
    FAIL("400 must not be retried");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("400") != std::string::npos);
  }
  // Nothing listening: a transport failure is transient.
  auto dead = make_client("http://127.0.0.1:1/v1");
  CHECK_THROWS_AS(dead.complete("x"), TransientClientError);
}

TEST_CASE("end-to-end run through the HTTP client with retries") {
  testing::TempDir dir;
  FakeEndpoint endpoint(2, 503);
  Transcript transcript(dir / "http.jsonl");
  auto client = make_client(endpoint.url(), &transcript);
  auto corpus = testing::make_interp_corpus(25);
  std::vector<std::chrono::milliseconds> sleeps;
  auto options = quick_options();
  options.sleep = [&](std::chrono::milliseconds d) { sleeps.push_back(d); };
  auto score = run_autointerp(0, corpus.dict, corpus.data, corpus.tokens, client, options, transcript);
  CHECK_FALSE(score.skipped);
  CHECK(score.explanation == "it fires on w tokens");
  CHECK(score.n_fragments_scored == 10);
  CHECK_FALSE(score.correlation.has_value());  // the fake simulator answers 5 everywhere
  CHECK(sleeps.size() == 2u);
  CHECK(endpoint.requests.size() == 2u + 1u + 10u);
  // Every HTTP exchange and every protocol attempt is logged.
  CHECK(count_lines(transcript.path()) == 13u + 13u);
}
