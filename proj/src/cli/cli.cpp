#include "sparsedict/cli.hpp"

#include <map>

#include <Eigen/Core>

#include "internal.hpp"

namespace sparsedict::cli {

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Sparse dictionary learning on language-model activations", "sparsedict"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  app.fallthrough(false);

  std::vector<Command> commands = {add_synth(app),     add_train(app),        add_eval(app),
                                   add_baseline(app),  add_histogram(app),    add_logit_effect(app),
                                   add_interp(app),    add_patch(app),        add_tree(app)};

  std::vector<std::string> storage;
  storage.reserve(args.size() + 1);
  storage.push_back("sparsedict");
  storage.insert(storage.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : storage) argv.push_back(a.data());

  auto usage = [&]() -> std::string {
    for (const auto& c : commands) {
      if (c.app->parsed()) return c.app->help();
    }
    return app.help();
  };

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << usage();
    return 2;
  }

  Command* selected = nullptr;
  for (auto& c : commands) {
    if (c.app->parsed()) selected = &c;
  }
  try {
    if (!selected) throw UsageError("no subcommand given");
    if (!selected->common->config.empty()) apply_config_file(selected->common->config, app, *selected->app);
    for (const auto& flag : selected->required) {
      if (selected->app->get_option(flag)->count() == 0) {
        throw UsageError(flag + " is required (as a flag or a config key)");
      }
    }
    Eigen::setNbThreads(static_cast<int>(resolve_threads(*selected->common)));
    Context ctx{*selected->common, *selected->app, out};
    selected->run(ctx);
    return 0;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n\n" << usage();
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace sparsedict::cli
