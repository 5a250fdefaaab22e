#include <algorithm>
#include <cmath>
#include <fstream>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <set>

#include "internal.hpp"
#include "sparsedict/activation_store.hpp"
#include "sparsedict/autointerp.hpp"
#include "sparsedict/baselines.hpp"
#include "sparsedict/feature_eval.hpp"
#include "sparsedict/patching.hpp"
#include "sparsedict/sae.hpp"
#include "sparsedict/synthgen.hpp"

namespace sparsedict::cli {

namespace {

fs::path sibling(const fs::path& path, const std::string& suffix) {
  fs::path out = path;
  out.replace_extension(suffix);
  return out;
}

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

std::ofstream open_text(const fs::path& path) {
  prepare_output(path);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

std::uint32_t dataset_width(const fs::path& path) { return DatasetReader(path, 1).header().d_in; }

// Rectified direction sets are encoded as ReLU(D x - D mean), so folding the
// mean into the bias gives a dictionary that encodes them exactly.
Dictionary load_encoding_dictionary(const fs::path& path) {
  DictionaryFile file = read_dictionary_file(path);
  Dictionary dict = std::move(file.dict);
  if (file.mean) dict.bias = -(dict.encoder * *file.mean);
  return dict;
}

void check_feature(const std::string& flag, Index feature, Index d_hid) {
  if (feature < 0 || feature >= d_hid) {
    throw UsageError(flag + " " + std::to_string(feature) + " is out of range [0, " +
                     std::to_string(d_hid) + ")");
  }
}

template <typename Fn>
auto as_usage(Fn&& fn) {
  try {
    return fn();
  } catch (const ArgumentError& e) {
    throw UsageError(e.what());
  }
}

CLI::Option* add_common(CLI::App* sub, Common& common);

}  // namespace

// ---------------------------------------------------------------- synth

Command add_synth(CLI::App& app) {
  struct State {
    Common common;
    synth::SyntheticConfig cfg;
    std::string out;
  };
  auto s = std::make_shared<State>();
  auto* sub = app.add_subcommand("synth", "Generate a synthetic dataset with known ground-truth features");
  add_common(sub, s->common);
  sub->add_option("--n-gt", s->cfg.n_gt, "Number of ground-truth features");
  sub->add_option("--d", s->cfg.d, "Activation dimension");
  sub->add_option("--samples", s->cfg.n_samples, "Number of samples");
  sub->add_option("--avg-active", s->cfg.avg_active, "Expected number of active features per sample");
  sub->add_option("--coeff-scale", s->cfg.coeff_scale, "Mean of the exponential coefficient magnitudes");
  sub->add_option("--noise", s->cfg.noise_sigma, "Standard deviation of isotropic Gaussian noise");
  sub->add_option("--out", s->out, "Output directory (required)");

  Command cmd{sub, {"--out"}, nullptr};
  cmd.common = &s->common;
  cmd.run = [s](Context& ctx) {
    fs::path dir = s->out;
    s->cfg.seed = ctx.common.seed;
    as_usage([&] { s->cfg.validate(); return 0; });
    fs::create_directories(dir);
    Manifest manifest("synth", dir / "manifest.json");
    manifest.config(ctx.sub);

    auto generated = synth::generate(s->cfg);
    DatasetMeta meta;
    meta.model_name = "synthetic";
    meta.source_corpus = "synthetic seed " + std::to_string(s->cfg.seed);
    meta.created_by = "sparsedict synth";
    write_dataset(generated.data, meta, dir / "data.sact");
    Dictionary truth{generated.truth, Vector::Zero(generated.truth.rows()), std::nullopt};
    write_dictionary(truth, dir / "truth.sdic", DictionaryKind::ground_truth);
    DatasetMeta code_meta = meta;
    code_meta.model_name = "synthetic-codes";
    write_dataset(Matrix(generated.codes), code_meta, dir / "codes.sact");

    manifest.output("data", dir / "data.sact");
    manifest.output("truth", dir / "truth.sdic");
    manifest.output("codes", dir / "codes.sact");
    manifest.write();
    ctx.out << "wrote " << s->cfg.n_samples << " samples (d=" << s->cfg.d << ", n_gt=" << s->cfg.n_gt
            << ") to " << dir.string() << "\n";
  };
  return cmd;
}

// ---------------------------------------------------------------- train

Command add_train(CLI::App& app) {
  struct State {
    Common common;
    std::string data, out, truth, preset;
    sae::TrainConfig cfg;
    bool untied = false;
    CLI::Option* alpha = nullptr;
  };
  auto s = std::make_shared<State>();
  auto* sub = app.add_subcommand("train", "Train a sparse autoencoder dictionary");
  add_common(sub, s->common);
  sub->add_option("--data", s->data, "Training activations (.sact, required)");
  sub->add_option("--out", s->out, "Output dictionary (.sdic, required)");
  s->alpha = sub->add_option("--alpha", s->cfg.alpha, "L1 sparsity coefficient");
  sub->add_option("--preset", s->preset, "Alpha preset; an explicit --alpha overrides it")
      ->check(CLI::IsMember({"residual", "mlp"}));
  sub->add_option("--ratio", s->cfg.ratio, "Dictionary size as a multiple of the input dimension");
  sub->add_option("--lr", s->cfg.learning_rate, "Adam learning rate");
  sub->add_option("--epochs", s->cfg.epochs, "Passes over the data");
  sub->add_option("--batch-size", s->cfg.batch_size, "Minibatch size");
  sub->add_flag("--untied", s->untied, "Learn a separate decoder");
  sub->add_flag("--dead-reinit", s->cfg.dead_reinit, "Reinitialize dead features after each epoch");
  sub->add_option("--dead-threshold", s->cfg.dead_threshold_per_10m,
                  "Dead-feature threshold in activations per 10 million samples");
  sub->add_option("--truth", s->truth, "Ground-truth dictionary (.sdic) to score recovery against");

  Command cmd{sub, {"--data", "--out"}, nullptr};
  cmd.common = &s->common;
  cmd.run = [s](Context& ctx) {
    require_file("--data", s->data);
    if (!s->truth.empty()) require_file("--truth", s->truth);
    if (s->alpha->count() == 0 && !s->preset.empty()) {
      s->cfg.alpha = s->preset == "residual" ? 8.6e-4 : 3.2e-4;
    }
    s->cfg.tied = !s->untied;
    s->cfg.seed = ctx.common.seed;
    const Index d_in = dataset_width(s->data);
    as_usage([&] { s->cfg.validate(d_in); return 0; });
    std::optional<Matrix> truth;
    if (!s->truth.empty()) {
      truth = read_dictionary(s->truth).decoder_rows();
      if (truth->cols() != d_in) throw DimensionError("--truth width does not match --data");
    }
    fs::path out = s->out;
    prepare_output(out);
    Manifest manifest("train", sibling(out, ".manifest.json"));
    manifest.config(ctx.sub);
    manifest.set("resolved_alpha", s->cfg.alpha);
    manifest.input("data", s->data);
    if (truth) manifest.input("truth", s->truth);

    Matrix data = read_all(s->data);
    auto [dict, report] = sae::train(data, s->cfg);
    write_dictionary(dict, out, DictionaryKind::learned);

    json curve = json::array();
    for (const auto& p : report.loss_curve) {
      curve.push_back({{"step", p.step},
                       {"loss", p.loss.total},
                       {"reconstruction", p.loss.reconstruction},
                       {"sparsity", p.loss.sparsity}});
    }
    json doc = {{"alpha", s->cfg.alpha},
                {"ratio", s->cfg.ratio},
                {"d_in", d_in},
                {"d_hid", dict.d_hid()},
                {"tied", s->cfg.tied},
                {"learning_rate", s->cfg.learning_rate},
                {"epochs", s->cfg.epochs},
                {"batch_size", s->cfg.batch_size},
                {"seed", s->cfg.seed},
                {"steps", report.steps},
                {"final_loss", report.final_loss},
                {"final_reconstruction_loss", report.final_reconstruction_loss},
                {"final_sparsity_loss", report.final_sparsity_loss},
                {"mean_l0", report.mean_l0},
                {"fvu", number_or_null(report.fvu)},
                {"dead_feature_count", report.dead_feature_count},
                {"loss_curve", curve}};
    if (truth) doc["mmcs"] = synth::mmcs(dict.decoder_rows(), *truth).mmcs;
    write_json(doc, sibling(out, ".report.json"));

    manifest.output("dictionary", out);
    manifest.output("report", sibling(out, ".report.json"));
    manifest.write();
    ctx.out << "trained " << dict.d_hid() << " features in " << report.steps << " steps: loss "
            << report.final_loss << ", mean L0 " << report.mean_l0 << ", FVU " << report.fvu;
    if (doc.contains("mmcs")) ctx.out << ", MMCS " << doc["mmcs"].get<double>();
    ctx.out << "\n";
  };
  return cmd;
}

// ---------------------------------------------------------------- eval

Command add_eval(CLI::App& app) {
  struct State {
    Common common;
    std::string data, dict, out, mode = "linear", moments;
    Index topk = 0;
    std::int64_t dead_threshold = 10;
    std::size_t batch_size = 4096;
  };
  auto s = std::make_shared<State>();
  auto* sub = app.add_subcommand("eval", "Report FVU, mean L0 and dead features of a dictionary or baseline");
  add_common(sub, s->common);
  sub->add_option("--data", s->data, "Evaluation activations (.sact, required)");
  sub->add_option("--dict", s->dict, "Dictionary or baseline directions (.sdic, required)");
  sub->add_option("--out", s->out, "Report JSON (required)");
  sub->add_option("--topk", s->topk, "Keep only the K largest codes per sample (0 = all)");
  sub->add_option("--mode", s->mode, "Code mode for baseline directions")
      ->check(CLI::IsMember({"linear", "rectified"}));
  sub->add_option("--dead-threshold", s->dead_threshold, "Dead-feature threshold per 10 million samples");
  sub->add_option("--batch-size", s->batch_size, "Rows per streamed batch");
  sub->add_option("--moments", s->moments, "Optional CSV of per-feature activation moments");

  Command cmd{sub, {"--data", "--dict", "--out"}, nullptr};
  cmd.common = &s->common;
  cmd.run = [s](Context& ctx) {
    require_file("--data", s->data);
    require_file("--dict", s->dict);
    if (s->topk < 0) throw UsageError("--topk must be nonnegative");
    if (s->batch_size < 1) throw UsageError("--batch-size must be positive");
    if (s->dead_threshold < 0) throw UsageError("--dead-threshold must be nonnegative");
    DictionaryFile file = read_dictionary_file(s->dict);
    if (file.dict.d_in() != dataset_width(s->data)) throw DimensionError("--dict width does not match --data");
    if (s->topk > file.dict.d_hid()) throw UsageError("--topk exceeds the number of features");

    fs::path out = s->out;
    prepare_output(out);
    Manifest manifest("eval", sibling(out, ".manifest.json"));
    manifest.config(ctx.sub);
    manifest.input("data", s->data);
    manifest.input("dict", s->dict);

    std::optional<eval::TopKConfig> topk;
    if (s->topk > 0) topk = eval::TopKConfig{s->topk};
    const bool learned = file.kind == DictionaryKind::learned || file.kind == DictionaryKind::ground_truth;
    eval::Codec codec = learned ? eval::dictionary_codec(file.dict, topk)
                                : eval::direction_codec(baselines::from_dictionary_file(file),
                                                        s->mode == "linear" ? eval::CodeMode::linear
                                                                            : eval::CodeMode::rectified,
                                                        topk);
    DatasetReader reader(s->data, s->batch_size);
    auto report = eval::evaluate(reader, codec, static_cast<std::uint64_t>(s->dead_threshold));
    json doc = {{"kind", to_string(file.kind)},
                {"d_hid", file.dict.d_hid()},
                {"code_mode", learned ? "dictionary" : s->mode},
                {"topk", s->topk},
                {"fvu", report.fvu},
                {"mean_l0", report.mean_l0},
                {"dead_count", report.dead_count},
                {"n_samples", report.n_samples}};
    write_json(doc, out);
    manifest.output("report", out);

    if (!s->moments.empty()) {
      std::vector<eval::MomentAccumulator> acc(static_cast<std::size_t>(file.dict.d_hid()));
      reader.rewind();
      Matrix batch;
      while (reader.next(batch)) {
        Matrix codes = codec(batch).first;
        for (Index i = 0; i < codes.rows(); ++i) {
          for (Index j = 0; j < codes.cols(); ++j) acc[static_cast<std::size_t>(j)].add(codes(i, j));
        }
      }
      auto csv = open_text(s->moments);
      csv << "feature,count,mean,variance,skew,kurtosis\n";
      auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
      for (std::size_t j = 0; j < acc.size(); ++j) {
        auto m = acc[j].finish();
        csv << j << ',' << m.count << ',' << format_double(m.mean) << ',' << format_double(m.variance) << ','
            << opt(m.skew) << ',' << opt(m.kurtosis) << '\n';
      }
      manifest.output("moments", s->moments);
    }
    manifest.write();
    ctx.out << "FVU " << report.fvu << ", mean L0 " << report.mean_l0 << ", dead " << report.dead_count
            << " of " << file.dict.d_hid() << "\n";
  };
  return cmd;
}

// ---------------------------------------------------------------- baseline

Command add_baseline(CLI::App& app) {
  struct State {
    Common common;
    std::string data, out, kind = "pca";
    Index components = 0;
    Index topk = 0;
    Index ica_samples = 200000;
    std::int64_t ica_max_iter = 200;
    double ica_tol = 1e-4;
  };
  auto s = std::make_shared<State>();
  auto* sub = app.add_subcommand("baseline", "Fit PCA, ICA, random or neuron-basis directions");
  add_common(sub, s->common);
  sub->add_option("--data", s->data, "Activations (.sact, required)");
  sub->add_option("--out", s->out, "Output directions (.sdic, required)");
  sub->add_option("--kind", s->kind, "Direction family")->check(CLI::IsMember({"pca", "ica", "random", "neuron"}));
  sub->add_option("--components", s->components, "Number of directions (0 = input dimension)");
  sub->add_option("--topk", s->topk, "Keep only the K largest rectified codes when scoring (0 = all)");
  sub->add_option("--ica-samples", s->ica_samples, "Rows subsampled for ICA");
  sub->add_option("--ica-max-iter", s->ica_max_iter, "FastICA iteration limit");
  sub->add_option("--ica-tol", s->ica_tol, "FastICA convergence tolerance");

  Command cmd{sub, {"--data", "--out"}, nullptr};
  cmd.common = &s->common;
  cmd.run = [s](Context& ctx) {
    require_file("--data", s->data);
    const Index d_in = dataset_width(s->data);
    const Index k = s->components == 0 ? d_in : s->components;
    if (k < 1 || k > d_in) throw UsageError("--components must lie in [0, " + std::to_string(d_in) + "]");
    if (s->kind == "neuron" && k != d_in) throw UsageError("--kind neuron requires --components equal to d_in");
    if (s->topk < 0 || s->topk > k) throw UsageError("--topk must lie in [0, --components]");
    if (s->ica_samples < 1) throw UsageError("--ica-samples must be positive");

    fs::path out = s->out;
    prepare_output(out);
    Manifest manifest("baseline", sibling(out, ".manifest.json"));
    manifest.config(ctx.sub);
    manifest.input("data", s->data);

    Matrix data = read_all(s->data);
    baselines::DirectionSet dirs;
    if (s->kind == "pca") {
      dirs = baselines::fit_pca(data, k);
    } else if (s->kind == "ica") {
      Matrix sample = data;
      if (data.rows() > s->ica_samples) {
        std::vector<Index> rows(static_cast<std::size_t>(data.rows()));
        std::iota(rows.begin(), rows.end(), Index{0});
        std::mt19937_64 rng(ctx.common.seed);
        std::shuffle(rows.begin(), rows.end(), rng);
        rows.resize(static_cast<std::size_t>(s->ica_samples));
        std::sort(rows.begin(), rows.end());
        sample = data(rows, Eigen::all);
      }
      baselines::IcaConfig cfg{k, s->ica_max_iter, s->ica_tol, ctx.common.seed};
      dirs = as_usage([&] { return baselines::fit_ica(sample, cfg); });
    } else {
      dirs = baselines::make_fixed_directions(baselines::direction_kind_from_string(s->kind), d_in, k,
                                              ctx.common.seed);
    }
    baselines::write_direction_set(dirs, out);

    std::optional<baselines::TopKConfig> topk;
    if (s->topk > 0) topk = baselines::TopKConfig{s->topk};
    Matrix codes = baselines::project_codes_batch(dirs, data, topk);
    json doc = {{"kind", s->kind},
                {"components", k},
                {"topk", s->topk},
                {"fvu_linear", eval::fvu(dirs, data, eval::CodeMode::linear)},
                {"fvu_rectified", eval::fvu(dirs, data, eval::CodeMode::rectified, topk)},
                {"mean_l0_rectified", eval::mean_l0(codes)}};
    if (s->kind == "pca") {
      doc["explained_variance"] = std::vector<double>(dirs.explained_variance.data(),
                                                      dirs.explained_variance.data() + dirs.explained_variance.size());
    }
    if (s->kind == "ica") {
      doc["converged"] = dirs.converged;
      doc["iterations"] = dirs.iterations;
    }
    write_json(doc, sibling(out, ".report.json"));
    manifest.output("directions", out);
    manifest.output("report", sibling(out, ".report.json"));
    manifest.write();
    ctx.out << s->kind << ": " << k << " directions, FVU " << doc["fvu_linear"].get<double>() << "\n";
  };
  return cmd;
}

// ---------------------------------------------------------------- histogram

Command add_histogram(CLI::App& app) {
  struct State {
    Common common;
    std::string data, dict, tokens, out;
    Index feature = 0;
    Index bins = 10;
  };
  auto s = std::make_shared<State>();
  auto* sub = app.add_subcommand("histogram", "Per-token activation histogram of one feature");
  add_common(sub, s->common);
  sub->add_option("--data", s->data, "Activations (.sact, required)");
  sub->add_option("--dict", s->dict, "Dictionary (.sdic, required)");
  sub->add_option("--tokens", s->tokens, "Token stream aligned with --data (JSON lines, required)");
  sub->add_option("--feature", s->feature, "Feature index");
  sub->add_option("--bins", s->bins, "Number of equal-width bins");
  sub->add_option("--out", s->out, "Output CSV (required)");

  Command cmd{sub, {"--data", "--dict", "--tokens", "--out"}, nullptr};
  cmd.common = &s->common;
  cmd.run = [s](Context& ctx) {
    require_file("--data", s->data);
    require_file("--dict", s->dict);
    require_file("--tokens", s->tokens);
    if (s->bins < 1) throw UsageError("--bins must be positive");
    Dictionary dict = load_encoding_dictionary(s->dict);
    check_feature("--feature", s->feature, dict.d_hid());
    fs::path out = s->out;
    prepare_output(out);
    Manifest manifest("histogram", sibling(out, ".manifest.json"));
    manifest.config(ctx.sub);
    manifest.input("data", s->data);
    manifest.input("dict", s->dict);
    manifest.input("tokens", s->tokens);

    Matrix data = read_all(s->data);
    TokenStream tokens = read_token_stream(s->tokens);
    auto hist = eval::token_histogram(s->feature, dict, data, tokens.tokens, s->bins);
    auto csv = open_text(out);
    csv << "token,bin_low,bin_high,count\n";
    for (const auto& [token, counts] : hist.counts) {
      for (std::size_t b = 0; b < counts.size(); ++b) {
        csv << csv_field(token) << ',' << format_double(hist.bin_edges[b]) << ','
            << format_double(hist.bin_edges[b + 1]) << ',' << counts[b] << '\n';
      }
    }
    csv.close();
    manifest.output("histogram", out);
    manifest.write();
    ctx.out << "feature " << s->feature << ": " << hist.total() << " active positions over "
            << hist.counts.size() << " distinct tokens\n";
  };
  return cmd;
}

// ---------------------------------------------------------------- logit-effect

Command add_logit_effect(CLI::App& app) {
  struct State {
    Common common;
    std::string dict, unembed, vocab, out, data, effect_out;
    Index feature = 0;
    Index top = 20;
    Index row = -1;
  };
  auto s = std::make_shared<State>();
  auto* sub = app.add_subcommand("logit-effect", "Rank tokens by a feature's direct effect on the logits");
  add_common(sub, s->common);
  sub->add_option("--dict", s->dict, "Dictionary (.sdic, required)");
  sub->add_option("--unembed", s->unembed, "Unembedding matrix, vocab x d_in (.sact, required)");
  sub->add_option("--vocab", s->vocab, "Vocabulary (JSON lines, required)");
  sub->add_option("--feature", s->feature, "Feature index");
  sub->add_option("--top", s->top, "Number of tokens to report");
  sub->add_option("--out", s->out, "Output CSV of top tokens by unembed * f (required)");
  sub->add_option("--data", s->data, "Activations for an ablation at one position (.sact)");
  sub->add_option("--row", s->row, "Row of --data to ablate the feature at (-1 = none)");
  sub->add_option("--effect-out", s->effect_out, "Output CSV of the ablation's most suppressed tokens");

  Command cmd{sub, {"--dict", "--unembed", "--vocab", "--out"}, nullptr};
  cmd.common = &s->common;
  cmd.run = [s](Context& ctx) {
    require_file("--dict", s->dict);
    require_file("--unembed", s->unembed);
    require_file("--vocab", s->vocab);
    const bool ablate = s->row >= 0;
    if (ablate) {
      require_file("--data", s->data);
      if (s->effect_out.empty()) throw UsageError("--row needs --effect-out");
    }
    Dictionary dict = load_encoding_dictionary(s->dict);
    check_feature("--feature", s->feature, dict.d_hid());
    auto vocab = read_vocab(s->vocab);
    if (s->top < 1 || s->top > static_cast<Index>(vocab.size())) {
      throw UsageError("--top must lie in [1, vocabulary size]");
    }
    fs::path out = s->out;
    prepare_output(out);
    Manifest manifest("logit-effect", sibling(out, ".manifest.json"));
    manifest.config(ctx.sub);
    manifest.input("dict", s->dict);
    manifest.input("unembed", s->unembed);
    manifest.input("vocab", s->vocab);

    Matrix unembed = read_all(s->unembed);
    if (unembed.rows() != static_cast<Index>(vocab.size())) {
      throw DimensionError("--unembed has " + std::to_string(unembed.rows()) + " rows but --vocab has " +
                           std::to_string(vocab.size()) + " tokens");
    }
    auto ranked = eval::unembed_feature(s->feature, dict, unembed, vocab, s->top);
    auto csv = open_text(out);
    csv << "rank,token_id,token,logit\n";
    for (std::size_t i = 0; i < ranked.size(); ++i) {
      csv << i + 1 << ',' << ranked[i].token_id << ',' << csv_field(ranked[i].token) << ','
          << format_double(ranked[i].logit) << '\n';
    }
    csv.close();
    manifest.output("ranking", out);

    if (ablate) {
      manifest.input("data", s->data);
      DatasetReader reader(s->data, 1);
      if (static_cast<std::uint64_t>(s->row) >= reader.count()) throw UsageError("--row is out of range");
      Vector x(reader.d_in());
      reader.read_row(static_cast<std::uint64_t>(s->row), {x.data(), static_cast<std::size_t>(x.size())});
      Vector delta = eval::logit_effect(s->feature, dict, x, unembed);
      std::vector<Index> order(static_cast<std::size_t>(delta.size()));
      std::iota(order.begin(), order.end(), Index{0});
      std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return delta(a) < delta(b); });
      auto effect = open_text(s->effect_out);
      effect << "token_id,token,logit_delta\n";
      for (Index i = 0; i < s->top; ++i) {
        Index t = order[static_cast<std::size_t>(i)];
        effect << t << ',' << csv_field(vocab[static_cast<std::size_t>(t)]) << ',' << format_double(delta(t))
               << '\n';
      }
      manifest.output("effect", s->effect_out);
    }
    manifest.write();
    ctx.out << "feature " << s->feature << " top token: " << ranked.front().token << "\n";
  };
  return cmd;
}

// ---------------------------------------------------------------- interp

Command add_interp(CLI::App& app) {
  struct State {
    Common common;
    std::string data, dict, tokens, out, mode = "top-random", mock, prompts = "prompts";
    std::vector<Index> features;
    std::size_t max_lines = 50000;
    int retries = 3;
    std::int64_t backoff_ms = 500;
  };
  auto s = std::make_shared<State>();
  auto* sub = app.add_subcommand("interp", "Explain-and-simulate interpretability scoring");
  add_common(sub, s->common);
  sub->add_option("--data", s->data, "Activations (.sact, required)");
  sub->add_option("--dict", s->dict, "Dictionary (.sdic, required)");
  sub->add_option("--tokens", s->tokens, "Token stream aligned with --data (JSON lines, required)");
  sub->add_option("--feature", s->features, "Feature indices (repeat or comma separate, required)")
      ->delimiter(',');
  sub->add_option("--mode", s->mode, "Scoring fragments")->check(CLI::IsMember({"top-random", "random"}));
  sub->add_option("--mock", s->mock, "Offline simulator instead of the HTTP endpoint")
      ->check(CLI::IsMember({"perfect", "constant", "noisy"}));
  sub->add_option("--prompts", s->prompts, "Directory holding explain.txt and simulate.txt");
  sub->add_option("--max-lines", s->max_lines, "Corpus lines scanned for fragments");
  sub->add_option("--retries", s->retries, "Retries for transient client failures");
  sub->add_option("--backoff-ms", s->backoff_ms, "Initial retry backoff, doubled per attempt");
  sub->add_option("--out", s->out, "Output directory for scores and transcripts (required)");

  Command cmd{sub, {"--data", "--dict", "--tokens", "--feature", "--out"}, nullptr};
  cmd.common = &s->common;
  cmd.run = [s](Context& ctx) {
    require_file("--data", s->data);
    require_file("--dict", s->dict);
    require_file("--tokens", s->tokens);
    std::optional<interp::HttpClientConfig> http;
    std::optional<interp::PromptTemplates> prompts;
    if (s->mock.empty()) {
      require_directory("--prompts", s->prompts);
      prompts = interp::PromptTemplates::load(s->prompts);
      http = as_usage([] { return interp::HttpClientConfig::from_environment(); });
    }
    if (s->retries < 0) throw UsageError("--retries must be nonnegative");
    if (s->backoff_ms < 0) throw UsageError("--backoff-ms must be nonnegative");
    Dictionary dict = load_encoding_dictionary(s->dict);
    for (Index f : s->features) check_feature("--feature", f, dict.d_hid());

    fs::path dir = s->out;
    fs::create_directories(dir);
    Manifest manifest("interp", dir / "manifest.json");
    manifest.config(ctx.sub);
    manifest.input("data", s->data);
    manifest.input("dict", s->dict);
    manifest.input("tokens", s->tokens);
    if (http) manifest.set("endpoint", {{"url", http->endpoint}, {"model", http->model}});

    Matrix data = read_all(s->data);
    TokenStream tokens = read_token_stream(s->tokens);
    interp::InterpOptions options;
    options.mode = interp::scoring_mode_from_string(s->mode);
    options.max_lines = s->max_lines;
    options.seed = ctx.common.seed;
    options.max_retries = s->retries;
    options.backoff = std::chrono::milliseconds(s->backoff_ms);

    const std::string mock = s->mock;
    const std::uint64_t seed = ctx.common.seed;
    auto make_client = [&](const interp::InterpTask& task) -> std::unique_ptr<interp::SimulatorClient> {
      if (mock == "perfect") return std::make_unique<interp::PerfectMock>(task.answer_key());
      if (mock == "constant") return std::make_unique<interp::ConstantMock>();
      if (mock == "noisy") return std::make_unique<interp::NoisyMock>(task.answer_key(), seed);
      return std::make_unique<interp::HttpSimulatorClient>(*http, *prompts);
    };
    auto scores = interp::run_autointerp_many(s->features, dict, data, tokens, make_client, options, dir,
                                              resolve_threads(ctx.common));

    auto csv = open_text(dir / "scores.csv");
    csv << "feature,mode,skipped,correlation,n_scored,explanation\n";
    json rows = json::array();
    for (const auto& sc : scores) {
      csv << sc.feature_index << ',' << s->mode << ',' << (sc.skipped ? "true" : "false") << ','
          << (sc.correlation ? format_double(*sc.correlation) : std::string("undefined")) << ','
          << sc.n_fragments_scored << ',' << csv_field(sc.explanation) << '\n';
      ctx.out << "feature " << sc.feature_index << ": "
              << (sc.skipped ? std::string("skipped (fewer than 20 varying fragments)")
                             : sc.correlation ? "correlation " + format_double(*sc.correlation)
                                              : std::string("correlation undefined"))
              << "\n";
      manifest.output("transcript", dir / ("feature_" + std::to_string(sc.feature_index) + ".jsonl"));
    }
    csv.close();
    manifest.output("scores", dir / "scores.csv");
    manifest.write();
  };
  return cmd;
}

// ---------------------------------------------------------------- patch

namespace {

std::vector<patching::PatchCase> read_patch_cases(const fs::path& manifest_path, const Dictionary& dict,
                                                  const patching::ModelOracle& oracle,
                                                  std::vector<fs::path>* files) {
  std::ifstream in(manifest_path);
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError("--cases: " + manifest_path.string() + " is not valid JSON: " + e.what());
  }
  if (!doc.is_object() || !doc.contains("cases") || !doc["cases"].is_array() || doc["cases"].empty()) {
    throw FormatError("--cases: " + manifest_path.string() + " needs a nonempty \"cases\" array");
  }
  const fs::path base_dir = manifest_path.parent_path();
  std::vector<std::pair<fs::path, fs::path>> pairs;
  for (const auto& entry : doc["cases"]) {
    if (!entry.is_object() || !entry.contains("base") || !entry.contains("target") ||
        !entry["base"].is_string() || !entry["target"].is_string()) {
      throw FormatError("--cases: each case needs \"base\" and \"target\" paths");
    }
    fs::path b = base_dir / entry["base"].get<std::string>();
    fs::path t = base_dir / entry["target"].get<std::string>();
    require_file("--cases base", b);
    require_file("--cases target", t);
    pairs.emplace_back(b, t);
  }
  std::vector<patching::PatchCase> cases;
  for (const auto& [b, t] : pairs) {
    files->push_back(b);
    files->push_back(t);
    cases.push_back(patching::make_patch_case(read_all(b), read_all(t), dict, oracle));
  }
  return cases;
}

}  // namespace

Command add_patch(CLI::App& app) {
  struct State {
    Common common;
    std::string dict, cases, unembed, out, ordering = "independent";
    std::vector<Index> candidates;
    std::size_t budget = 0;
  };
  auto s = std::make_shared<State>();
  auto* sub = app.add_subcommand("patch", "Order features by how much patching them moves logits to the target");
  add_common(sub, s->common);
  sub->add_option("--dict", s->dict, "Dictionary (.sdic, required)");
  sub->add_option("--cases", s->cases, "JSON manifest of base/target .sact pairs (required)");
  sub->add_option("--unembed", s->unembed, "Unembedding of the linear oracle, vocab x d_in (.sact, required)");
  sub->add_option("--candidates", s->candidates, "Candidate features (default: all)")->delimiter(',');
  sub->add_option("--budget", s->budget, "Features to add (0 = all candidates)");
  sub->add_option("--ordering", s->ordering, "Subset selection")
      ->check(CLI::IsMember({"independent", "greedy"}));
  sub->add_option("--out", s->out, "Output CSV (required)");

  Command cmd{sub, {"--dict", "--cases", "--unembed", "--out"}, nullptr};
  cmd.common = &s->common;
  cmd.run = [s](Context& ctx) {
    require_file("--dict", s->dict);
    require_file("--cases", s->cases);
    require_file("--unembed", s->unembed);
    Dictionary dict = load_encoding_dictionary(s->dict);
    std::vector<Index> candidates = s->candidates;
    if (candidates.empty()) {
      candidates.resize(static_cast<std::size_t>(dict.d_hid()));
      std::iota(candidates.begin(), candidates.end(), Index{0});
    }
    for (Index f : candidates) check_feature("--candidates", f, dict.d_hid());
    std::size_t n_unique = std::set<Index>(candidates.begin(), candidates.end()).size();
    std::size_t budget = s->budget == 0 ? n_unique : s->budget;
    if (budget > n_unique) throw UsageError("--budget exceeds the number of distinct candidates");

    patching::ToyOracle oracle(read_all(s->unembed));
    if (oracle.d_in() != dict.d_in()) throw DimensionError("--unembed width does not match --dict");
    std::vector<fs::path> case_files;
    auto cases = read_patch_cases(s->cases, dict, oracle, &case_files);

    fs::path out = s->out;
    prepare_output(out);
    Manifest manifest("patch", sibling(out, ".manifest.json"));
    manifest.config(ctx.sub);
    manifest.input("dict", s->dict);
    manifest.input("cases", s->cases);
    manifest.input("unembed", s->unembed);
    for (const auto& f : case_files) manifest.input("case", f);

    auto mode = s->ordering == "greedy" ? patching::OrderingMode::greedy : patching::OrderingMode::independent;
    auto ord = patching::greedy_feature_ordering(cases, dict, oracle, candidates, mode, budget);
    auto csv = open_text(out);
    csv << "n_features,mean_kl,mean_edit_magnitude\n";
    for (std::size_t n = 0; n < ord.mean_kl.size(); ++n) {
      csv << n << ',' << format_double(ord.mean_kl[n]) << ',' << format_double(ord.mean_edit[n]) << '\n';
    }
    csv.close();
    json order = {{"ordering", s->ordering}, {"features", ord.features}};
    if (!ord.singleton_reduction.empty()) {
      std::vector<Index> sorted(candidates);
      std::sort(sorted.begin(), sorted.end());
      sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
      json reductions = json::array();
      for (std::size_t i = 0; i < sorted.size(); ++i) {
        reductions.push_back({{"feature", sorted[i]}, {"kl_reduction", ord.singleton_reduction[i]}});
      }
      order["singleton_reduction"] = reductions;
    }
    write_json(order, sibling(out, ".ordering.json"));
    manifest.output("curve", out);
    manifest.output("ordering", sibling(out, ".ordering.json"));
    manifest.write();
    ctx.out << "mean KL " << ord.mean_kl.front() << " -> " << ord.mean_kl.back() << " after " << budget
            << " features\n";
  };
  return cmd;
}

// ---------------------------------------------------------------- tree

namespace {

json tree_json(const patching::CausalTreeNode& node) {
  json children = json::array();
  for (const auto& child : node.children) children.push_back(tree_json(child));
  return {{"layer", node.layer},
          {"feature", node.feature},
          {"effect", node.effect},
          {"max_activation", node.max_activation},
          {"n_contexts", node.n_contexts},
          {"children", children}};
}

}  // namespace

Command add_tree(CLI::App& app) {
  struct State {
    Common common;
    std::vector<std::string> dicts, data, transitions;
    std::string out;
    bool relu = false;
    Index layer = 1;
    Index feature = 0;
    std::size_t depth = 1;
    std::size_t fanout = 3;
    std::size_t contexts = 20;
  };
  auto s = std::make_shared<State>();
  auto* sub = app.add_subcommand("tree", "Trace which earlier-layer features drive a feature");
  add_common(sub, s->common);
  sub->add_option("--dicts", s->dicts, "One dictionary per layer, in layer order (required)");
  sub->add_option("--data", s->data, "One aligned activation file per layer (required)");
  sub->add_option("--transitions", s->transitions,
                  "Layer maps W_l (d_l x d_{l+1} .sact); x_{l+1} = x_l W_l (required)");
  sub->add_flag("--relu", s->relu, "Apply ReLU after each layer map");
  sub->add_option("--layer", s->layer, "Target layer");
  sub->add_option("--feature", s->feature, "Target feature");
  sub->add_option("--depth", s->depth, "Levels to expand");
  sub->add_option("--fanout", s->fanout, "Children per node");
  sub->add_option("--contexts", s->contexts, "Maximum contexts per node");
  sub->add_option("--out", s->out, "Output JSON (required)");

  Command cmd{sub, {"--dicts", "--data", "--transitions", "--out"}, nullptr};
  cmd.common = &s->common;
  cmd.run = [s](Context& ctx) {
    for (const auto& p : s->dicts) require_file("--dicts", p);
    for (const auto& p : s->data) require_file("--data", p);
    for (const auto& p : s->transitions) require_file("--transitions", p);
    if (s->data.size() != s->dicts.size()) throw UsageError("--data needs one file per --dicts entry");
    if (s->transitions.size() + 1 != s->dicts.size()) {
      throw UsageError("--transitions needs one file per consecutive pair of layers");
    }
    if (s->layer < 0 || s->layer >= static_cast<Index>(s->dicts.size())) throw UsageError("--layer is out of range");
    if (s->fanout < 1 || s->contexts < 1) throw UsageError("--fanout and --contexts must be positive");

    std::vector<Dictionary> dicts;
    for (const auto& p : s->dicts) dicts.push_back(load_encoding_dictionary(p));
    check_feature("--feature", s->feature, dicts[static_cast<std::size_t>(s->layer)].d_hid());

    fs::path out = s->out;
    prepare_output(out);
    Manifest manifest("tree", sibling(out, ".manifest.json"));
    manifest.config(ctx.sub);
    for (const auto& p : s->dicts) manifest.input("dict", p);
    for (const auto& p : s->data) manifest.input("data", p);
    for (const auto& p : s->transitions) manifest.input("transition", p);

    std::vector<Matrix> data;
    for (const auto& p : s->data) data.push_back(read_all(p));
    std::vector<Matrix> maps;
    for (const auto& p : s->transitions) maps.push_back(read_all(p));
    for (std::size_t l = 0; l < maps.size(); ++l) {
      if (maps[l].rows() != dicts[l].d_in() || maps[l].cols() != dicts[l + 1].d_in()) {
        throw DimensionError("--transitions entry " + std::to_string(l) + " has the wrong shape");
      }
    }
    const bool relu = s->relu;
    patching::LayerTransition propagate = [&maps, relu](Index from, const Matrix& x) {
      Matrix next = x * maps[static_cast<std::size_t>(from)];
      if (relu) next = next.cwiseMax(0.0f);
      return next;
    };
    patching::CausalTreeOptions options{s->depth, s->fanout, s->contexts};
    auto tree = patching::build_causal_tree(s->layer, s->feature, dicts, data, propagate, options);
    write_json(tree_json(tree), out);
    manifest.output("tree", out);
    manifest.write();
    ctx.out << "layer " << s->layer << " feature " << s->feature << ": " << tree.children.size()
            << " upstream features, " << tree.n_contexts << " contexts\n";
  };
  return cmd;
}

namespace {

CLI::Option* add_common(CLI::App* sub, Common& common) {
  sub->add_option("--seed", common.seed, "Random seed");
  sub->add_option("--threads", common.threads, "Worker thread cap (0 = all cores)");
  return sub->add_option("--config", common.config, "TOML config file; flags override its values");
}

}  // namespace

}  // namespace sparsedict::cli
