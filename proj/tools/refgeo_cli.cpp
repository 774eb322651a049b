#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "refgeo/cli.hpp"

int main(int argc, char** argv) {
    namespace cli = refgeo::cli;
    CLI::App app{"refgeo: refusal direction and cone experiments on a toy transformer"};
    app.require_subcommand(1, 1);

    std::string config_path;
    std::vector<std::string> overrides;
    std::string out_dir;
    std::optional<std::uint64_t> seed;

    for (const auto& [name, fn] : cli::commands()) {
        auto* sub = app.add_subcommand(name, "run " + name);
        sub->add_option("-c,--config", config_path, "JSON config file");
        sub->add_option("-s,--set", overrides, "override a config field, e.g. optim.lr=0.005");
        sub->add_option("-o,--out", out_dir, "output directory (overrides out_dir)");
        sub->add_option("--seed", seed, "random seed (overrides seed)");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : cli::config_error;
    }
    const std::string command = app.get_subcommands().front()->get_name();

    refgeo::json config = refgeo::json::object();
    try {
        if (!config_path.empty()) config = refgeo::load_json(config_path);
        for (const auto& o : overrides) cli::apply_override(config, o);
        if (!out_dir.empty()) config["out_dir"] = out_dir;
        if (seed) config["seed"] = *seed;
    } catch (const cli::ConfigError& e) {
        std::cerr << e.what() << "\n";
        return cli::config_error;
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return cli::config_error;
    }
    return cli::dispatch(command, config);
}
