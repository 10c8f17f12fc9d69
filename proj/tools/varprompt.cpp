// varprompt <experiment> [flags]

#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>

#include "varprompt/config.hpp"
#include "varprompt/harness.hpp"

namespace vp = varprompt;

int main(int argc, char** argv) {
    CLI::App app{"Variational prompt smoothing experiments"};
    app.set_version_flag("--version", std::string(vp::kVersion));

    std::string experiment;
    std::string experiments;
    for (auto& e : vp::experiment_names()) experiments += (experiments.empty() ? "" : ", ") + e;
    app.add_option("experiment", experiment, "one of: " + experiments)->required();

    std::string config_path;
    app.add_option("--config", config_path, "flat key = value file");

    std::map<std::string, std::string> values;
    std::map<std::string, CLI::Option*> options;
    std::map<std::string, bool> flags;
    const vp::ExperimentConfig defaults;
    for (auto& k : vp::config_keys()) {
        if (k.name == "experiment") continue;
        const std::string help = k.help + " (default: " + k.get(defaults) + ")";
        if (k.is_flag) {
            flags[k.name] = k.get(defaults) == "true";
            options[k.name] = app.add_flag("--" + k.name + ",!--no-" + k.name, flags[k.name], help);
        } else {
            options[k.name] = app.add_option("--" + k.name, values[k.name], help);
        }
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "varprompt: " << e.what() << "\n";
        return vp::kExitConfig;
    }

    vp::ExperimentConfig cfg;
    try {
        cfg = vp::default_config();
        if (!config_path.empty()) vp::apply_config_file(cfg, config_path);
        vp::set_key(cfg, "experiment", experiment);
        for (auto& [name, opt] : options) {
            if (opt->count() == 0) continue;
            if (flags.count(name)) vp::set_key(cfg, name, flags[name] ? "true" : "false");
            else vp::set_key(cfg, name, values[name]);
        }
        vp::validate(cfg);
    } catch (const vp::ConfigError& e) {
        std::cerr << "varprompt: " << e.what() << "\n";
        return vp::kExitConfig;
    }
    return vp::run(cfg);
}
