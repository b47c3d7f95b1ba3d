#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "milcl/analysis.hpp"
#include "milcl/data.hpp"
#include "milcl/errors.hpp"
#include "milcl/metrics.hpp"
#include "milcl/trainer.hpp"

namespace fs = std::filesystem;
using namespace milcl;

namespace {

// Precedence: --seed flag, then MILCL_SEED, then the config file.
std::optional<std::uint64_t> env_seed() {
    const char* env = std::getenv("MILCL_SEED");
    if (env == nullptr) return std::nullopt;
    return std::stoull(env);
}

std::uint64_t resolve_seed(std::uint64_t config_seed,
                           const std::optional<std::uint64_t>& flag_seed) {
    if (flag_seed) return *flag_seed;
    if (const auto env = env_seed()) return *env;
    return config_seed;
}

std::vector<MilModel> load_session_models(const std::string& run_dir) {
    std::vector<MilModel> models;
    for (std::size_t t = 0;; ++t) {
        const fs::path p =
            fs::path(run_dir) / ("session_" + std::to_string(t) + ".milm");
        if (!fs::exists(p)) break;
        models.push_back(load_model(p.string()));
    }
    if (models.empty())
        throw FormatError("no session checkpoints found in " + run_dir);
    return models;
}

int cmd_gen_data(const std::string& config_path, const std::string& out_dir,
                 const std::optional<std::uint64_t>& seed) {
    SynthConfig cfg = synth_config_from_json_file(config_path);
    cfg.seed = resolve_seed(cfg.seed, seed);
    gen_synthetic(cfg, out_dir);
    std::cout << "generated dataset in " << out_dir << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& method, const std::string& out_dir,
              const std::optional<std::uint64_t>& seed) {
    TrainConfig cfg = train_config_from_json_file(config_path);
    if (!method.empty()) cfg.method = method_from_name(method);
    cfg.seed = resolve_seed(cfg.seed, seed);
    run_experiment(data_dir, cfg, out_dir);
    std::cout << "run written to " << out_dir << "\n";
    return 0;
}

int cmd_eval(const std::string& run_dir, const std::string& data_dir) {
    std::ifstream mf(fs::path(run_dir) / "run_manifest.json");
    if (!mf) throw FormatError("missing run_manifest.json in " + run_dir);
    const nlohmann::json manifest = nlohmann::json::parse(mf);
    const TaskStream stream = load_task_stream(data_dir);

    MilModel model = [&] {
        if (manifest.at("method").get<std::string>() == "joint")
            return load_model((fs::path(run_dir) / "joint.milm").string());
        return load_session_models(run_dir).back();
    }();

    double sum = 0.0;
    for (const TaskDataset& task : stream) {
        const double acc = evaluate(model, task.test);
        std::cout << "task " << task.task << " balanced_acc " << acc << "\n";
        sum += acc;
    }
    const double aacc_val = sum / static_cast<double>(stream.size());
    std::cout << "aacc " << aacc_val << "\n";
    return 0;
}

int cmd_decouple(const std::string& run_dir, const std::string& data_dir,
                 const std::string& out_csv) {
    const std::vector<MilModel> models = load_session_models(run_dir);
    const TaskStream stream = load_task_stream(data_dir);
    const DecoupleGrid grid = decouple_grid(models, stream.front().test);
    write_decouple_csv(grid, out_csv);
    std::cout << "wrote " << out_csv << "\n";
    return 0;
}

int cmd_grad_trace(const std::string& run_dir, const std::string& out_csv,
                   std::size_t window) {
    std::vector<StepRecord> steps;
    for (std::size_t t = 0;; ++t) {
        const fs::path p = fs::path(run_dir) /
                           ("session_" + std::to_string(t) + "_steps.csv");
        if (!fs::exists(p)) break;
        const SessionLog log = read_session_log_csv(p.string());
        steps.insert(steps.end(), log.steps.begin(), log.steps.end());
    }
    if (steps.empty())
        throw FormatError("no session step logs found in " + run_dir);
    write_gradtrace_csv(grad_trace(steps, window), out_csv);
    std::cout << "wrote " << out_csv << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"continual learning for attention MIL on patch features"};
    app.require_subcommand(1);

    std::optional<std::uint64_t> seed;
    app.add_option("--seed", seed, "override config seed");

    std::string config_path, data_dir, out_path, run_dir, method;
    std::size_t window = 50;

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
    gen->add_option("--config", config_path, "SynthConfig JSON")->required();
    gen->add_option("--out", out_path, "output dataset directory")->required();

    auto* train = app.add_subcommand("train", "run a CL experiment");
    train->add_option("--config", config_path, "TrainConfig JSON")->required();
    train->add_option("--data", data_dir, "dataset directory")->required();
    train->add_option("--method", method, "finetune|er|ours|joint")
        ->check(CLI::IsMember({"finetune", "er", "ours", "joint"}));
    train->add_option("--out", out_path, "run output directory")->required();

    auto* eval_cmd = app.add_subcommand("eval", "re-evaluate a finished run");
    eval_cmd->add_option("--run", run_dir, "run directory")->required();
    eval_cmd->add_option("--data", data_dir, "dataset directory")->required();

    auto* decouple = app.add_subcommand(
        "decouple", "attention/classifier decoupling grid on task 1");
    decouple->add_option("--run", run_dir, "run directory")->required();
    decouple->add_option("--data", data_dir, "dataset directory")->required();
    decouple->add_option("--out", out_path, "output CSV path")->required();

    auto* gtrace = app.add_subcommand("grad-trace",
                                      "windowed gradient-norm summaries");
    gtrace->add_option("--run", run_dir, "run directory")->required();
    gtrace->add_option("--out", out_path, "output CSV path")->required();
    gtrace->add_option("--window", window, "steps per window");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n" << app.help();
        return 1;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(config_path, out_path, seed);
        if (train->parsed())
            return cmd_train(config_path, data_dir, method, out_path, seed);
        if (eval_cmd->parsed()) return cmd_eval(run_dir, data_dir);
        if (decouple->parsed())
            return cmd_decouple(run_dir, data_dir, out_path);
        if (gtrace->parsed()) return cmd_grad_trace(run_dir, out_path, window);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
