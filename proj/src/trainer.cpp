#include "milcl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "io_util.hpp"
#include "json.hpp"

namespace fs = std::filesystem;

namespace milcl {

Method method_from_name(const std::string& name) {
    if (name == "finetune") return Method::Finetune;
    if (name == "er") return Method::ER;
    if (name == "ours") return Method::Ours;
    if (name == "joint") return Method::Joint;
    throw std::invalid_argument("unknown method: " + name);
}

std::string method_name(Method m) {
    switch (m) {
        case Method::Finetune: return "finetune";
        case Method::ER: return "er";
        case Method::Ours: return "ours";
        case Method::Joint: return "joint";
    }
    return "?";
}

TrainConfig train_config_from_json_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("cannot open config " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("config " + path + ": " + e.what());
    }
    static const std::set<std::string> known = {
        "alpha", "beta", "temperature", "strategy", "pseudo_bag_k",
        "pool_capacity_total", "epochs", "patience", "hidden_dim", "lr",
        "beta1", "beta2", "eps", "weight_decay", "seed", "method",
        "insert_once_per_bag", "refresh_teacher_at_task_end"};
    for (const auto& [key, _] : j.items())
        if (!known.contains(key))
            throw FormatError("config " + path + ": unknown key \"" + key + "\"");
    TrainConfig cfg;
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("alpha", cfg.alpha);
    get("beta", cfg.beta);
    get("temperature", cfg.temperature);
    if (j.contains("strategy"))
        cfg.strategy.kind = strategy_from_name(j.at("strategy").get<std::string>());
    get("pseudo_bag_k", cfg.strategy.k);
    get("pool_capacity_total", cfg.pool_capacity_total);
    get("epochs", cfg.epochs);
    get("patience", cfg.patience);
    get("hidden_dim", cfg.hidden_dim);
    get("lr", cfg.adam.lr);
    get("beta1", cfg.adam.beta1);
    get("beta2", cfg.adam.beta2);
    get("eps", cfg.adam.eps);
    get("weight_decay", cfg.adam.weight_decay);
    get("seed", cfg.seed);
    if (j.contains("method"))
        cfg.method = method_from_name(j.at("method").get<std::string>());
    get("insert_once_per_bag", cfg.insert_once_per_bag);
    get("refresh_teacher_at_task_end", cfg.refresh_teacher_at_task_end);
    if (cfg.epochs < 1)
        throw std::invalid_argument("TrainConfig.epochs: must be >= 1");
    if (cfg.patience > cfg.epochs)
        throw std::invalid_argument("TrainConfig.patience: must be <= epochs");
    return cfg;
}

std::string train_config_to_json(const TrainConfig& cfg) {
    nlohmann::ordered_json j;
    j["alpha"] = cfg.alpha;
    j["beta"] = cfg.beta;
    j["temperature"] = cfg.temperature;
    j["strategy"] = strategy_name(cfg.strategy.kind);
    j["pseudo_bag_k"] = cfg.strategy.k;
    j["pool_capacity_total"] = cfg.pool_capacity_total;
    j["epochs"] = cfg.epochs;
    j["patience"] = cfg.patience;
    j["hidden_dim"] = cfg.hidden_dim;
    j["lr"] = cfg.adam.lr;
    j["beta1"] = cfg.adam.beta1;
    j["beta2"] = cfg.adam.beta2;
    j["eps"] = cfg.adam.eps;
    j["weight_decay"] = cfg.adam.weight_decay;
    j["seed"] = cfg.seed;
    j["method"] = method_name(cfg.method);
    j["insert_once_per_bag"] = cfg.insert_once_per_bag;
    j["refresh_teacher_at_task_end"] = cfg.refresh_teacher_at_task_end;
    return j.dump(2);
}

std::uint64_t config_digest(const TrainConfig& cfg) {
    // FNV-1a over the canonical JSON echo.
    const std::string s = train_config_to_json(cfg);
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001B3ULL;
    }
    return h;
}

double evaluate(const MilModel& model, const std::vector<Bag>& bags) {
    if (bags.empty()) throw std::invalid_argument("evaluate: empty bag set");
    std::map<int, std::pair<std::size_t, std::size_t>> per_class;  // correct, total
    for (const Bag& bag : bags) {
        auto& [correct, total] = per_class[bag.label];
        ++total;
        if (predict(bag, model) == bag.label) ++correct;
    }
    double sum = 0.0;
    for (const auto& [label, counts] : per_class)
        sum += static_cast<double>(counts.first) /
               static_cast<double>(counts.second);
    return sum / static_cast<double>(per_class.size());
}

namespace {

void adam_block(Vec& m, Vec& v, std::span<double> params,
                std::span<const double> grads, double bc1, double bc2,
                const AdamConfig& cfg) {
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        const double mh = m[i] / bc1;
        const double vh = v[i] / bc2;
        params[i] -= cfg.lr * (mh / (std::sqrt(vh) + cfg.eps) +
                               cfg.weight_decay * params[i]);
    }
}

double block_grad_norm(const MilGradients& g, bool attention) {
    double acc = 0.0;
    if (attention) {
        acc += l2_norm_sq(g.d_w);
        acc += l2_norm_sq(g.d_v1.data);
        acc += l2_norm_sq(g.d_v2.data);
    } else {
        acc += l2_norm_sq(g.d_weight.data);
        acc += l2_norm_sq(g.d_bias);
    }
    return std::sqrt(acc);
}

}  // namespace

ModelOptimizer::ModelOptimizer(const MilModel& model, AdamConfig cfg)
    : cfg_(cfg),
      m_v1_(model.theta.v1.data.size(), 0.0),
      v_v1_(model.theta.v1.data.size(), 0.0),
      m_v2_(model.theta.v2.data.size(), 0.0),
      v_v2_(model.theta.v2.data.size(), 0.0),
      m_w_(model.theta.w.size(), 0.0),
      v_w_(model.theta.w.size(), 0.0),
      m_weight_(model.phi.weight.data.size(), 0.0),
      v_weight_(model.phi.weight.data.size(), 0.0),
      m_bias_(model.phi.bias.size(), 0.0),
      v_bias_(model.phi.bias.size(), 0.0) {}

void ModelOptimizer::append_head_classes(std::size_t new_class_count,
                                         std::size_t dim) {
    m_weight_.resize(m_weight_.size() + new_class_count * dim, 0.0);
    v_weight_.resize(v_weight_.size() + new_class_count * dim, 0.0);
    m_bias_.resize(m_bias_.size() + new_class_count, 0.0);
    v_bias_.resize(v_bias_.size() + new_class_count, 0.0);
}

void ModelOptimizer::step(MilModel& model, const MilGradients& grads) {
    if (m_weight_.size() != model.phi.weight.data.size())
        throw std::invalid_argument("ModelOptimizer: head shape mismatch");
    ++step_count_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
    adam_block(m_v1_, v_v1_, model.theta.v1.data, grads.d_v1.data, bc1, bc2, cfg_);
    adam_block(m_v2_, v_v2_, model.theta.v2.data, grads.d_v2.data, bc1, bc2, cfg_);
    adam_block(m_w_, v_w_, model.theta.w, grads.d_w, bc1, bc2, cfg_);
    adam_block(m_weight_, v_weight_, model.phi.weight.data,
               grads.d_weight.data, bc1, bc2, cfg_);
    adam_block(m_bias_, v_bias_, model.phi.bias, grads.d_bias, bc1, bc2, cfg_);
}

namespace {

struct WorkItem {
    const Bag* bag = nullptr;          // current-task sample
    MemoryEntryPtr entry;              // or a replayed pseudo-bag
};

}  // namespace

SessionLog train_task(MilModel& model, const TaskDataset& task,
                      PseudoBagPool* pool, const TrainConfig& cfg,
                      ModelOptimizer& opt, std::uint64_t& global_step) {
    if (task.train.empty())
        throw std::invalid_argument("train_task: empty task");

    const bool uses_pool = pool != nullptr;
    const bool distills = cfg.method == Method::Ours;
    // Replay only what was in the pool when the session started; entries
    // inserted during this session wait until the next one.
    const std::vector<MemoryEntryPtr> replay =
        uses_pool ? pool->entries() : std::vector<MemoryEntryPtr>{};

    Rng shuffle_rng(derive_seed(cfg.seed, 0x1000 + static_cast<std::uint64_t>(task.task)));
    Rng strategy_rng(derive_seed(cfg.seed, 0x2000 + static_cast<std::uint64_t>(task.task)));

    SessionLog log;
    log.task = task.task;

    MilModel best_model = model;
    double best_val = -1.0;
    double best_val_ce = std::numeric_limits<double>::infinity();
    std::size_t epochs_since_best = 0;

    // Mean CE over a bag set, forward passes only.
    auto mean_ce = [](const MilModel& m, const std::vector<Bag>& bags) {
        double sum = 0.0;
        for (const Bag& bag : bags) {
            const AttentionOutputs out = forward_attention(bag.features, m.theta);
            sum += cross_entropy(forward_classifier(out.bag_feature, m.phi),
                                 static_cast<std::size_t>(bag.label));
        }
        return bags.empty() ? 0.0 : sum / static_cast<double>(bags.size());
    };

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<WorkItem> items;
        items.reserve(task.train.size() + replay.size());
        for (const Bag& bag : task.train) items.push_back({&bag, nullptr});
        for (const MemoryEntryPtr& e : replay) items.push_back({nullptr, e});
        for (std::size_t i = items.size(); i > 1; --i)
            std::swap(items[i - 1], items[shuffle_rng.index_below(i)]);

        for (const WorkItem& item : items) {
            BackwardResult res;
            if (item.bag != nullptr) {
                res = backward(item.bag->features, item.bag->label, model);
            } else {
                DistillTargets targets;
                targets.temperature = cfg.temperature;
                if (distills) {
                    targets.alpha = cfg.alpha;
                    targets.beta = cfg.beta;
                    targets.attn_logits = &item.entry->teacher_attn_logits;
                    targets.class_logits = &item.entry->teacher_class_logits;
                } else {
                    // Plain experience replay: CE only on the stored sample.
                    targets.alpha = 0.0;
                    targets.beta = 0.0;
                }
                res = backward(item.entry->features, item.entry->label, model,
                               &targets);
            }
            StepRecord rec;
            rec.step = ++global_step;
            rec.task = task.task;
            rec.loss = res.loss;
            rec.attn_grad_norm = block_grad_norm(res.grads, true);
            rec.classifier_grad_norm = block_grad_norm(res.grads, false);
            log.steps.push_back(rec);

            opt.step(model, res.grads);

            if (uses_pool && !cfg.insert_once_per_bag && item.bag != nullptr) {
                pool->insert(distill(*item.bag, res.attn, res.logits,
                                     cfg.strategy, strategy_rng));
            }
        }

        const double val_acc =
            task.val.empty() ? 1.0 : evaluate(model, task.val);
        const double val_ce = mean_ce(model, task.val);
        log.epochs.push_back({epoch, val_acc, val_ce});
        // Balanced accuracy decides; validation CE breaks accuracy ties so a
        // saturated accuracy does not freeze training at the first hit.
        const bool improved =
            val_acc > best_val || (val_acc == best_val && val_ce < best_val_ce);
        if (improved) {
            best_val = val_acc;
            best_val_ce = val_ce;
            best_model = model;
            epochs_since_best = 0;
        } else if (++epochs_since_best >= cfg.patience) {
            break;
        }
    }
    model = best_model;

    if (uses_pool && cfg.insert_once_per_bag) {
        // One distillation pass per bag with the restored best model.
        std::vector<std::size_t> order(task.train.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.index_below(i)]);
        for (std::size_t i : order) {
            const Bag& bag = task.train[i];
            const AttentionOutputs out = forward_attention(bag.features, model.theta);
            const Vec logits = forward_classifier(out.bag_feature, model.phi);
            pool->insert(distill(bag, out, logits, cfg.strategy, strategy_rng));
        }
    }
    if (uses_pool && cfg.refresh_teacher_at_task_end)
        pool->refresh_teacher(model);

    return log;
}

ClRunResult run_cl(const TaskStream& stream, const TrainConfig& cfg) {
    if (stream.empty()) throw std::invalid_argument("run_cl: empty stream");
    const std::size_t dim = stream.front().train.front().dim();

    Rng init_rng(derive_seed(cfg.seed, 0));
    MilModel model = init_model(dim, cfg.hidden_dim, 0, init_rng);
    ModelOptimizer opt(model, cfg.adam);

    const bool uses_pool =
        cfg.method == Method::ER || cfg.method == Method::Ours;
    PseudoBagPool pool(cfg.pool_capacity_total, derive_seed(cfg.seed, 0x3000));

    ClRunResult result;
    result.matrix.task_count = stream.size();
    std::uint64_t global_step = 0;

    for (std::size_t t = 0; t < stream.size(); ++t) {
        const TaskDataset& task = stream[t];
        model.phi = expand_head(model.phi, task.class_ids.size());
        opt.append_head_classes(task.class_ids.size(), dim);

        SessionLog log = train_task(model, task, uses_pool ? &pool : nullptr,
                                    cfg, opt, global_step);
        result.logs.push_back(std::move(log));
        result.session_models.push_back(model);

        Vec row(t + 1);
        for (std::size_t j = 0; j <= t; ++j)
            row[j] = evaluate(model, stream[j].test);
        result.matrix.rows.push_back(std::move(row));
    }
    if (uses_pool) result.pool = std::move(pool);
    return result;
}

JointRunResult run_joint(const TaskStream& stream, const TrainConfig& cfg) {
    if (stream.empty()) throw std::invalid_argument("run_joint: empty stream");
    const std::size_t dim = stream.front().train.front().dim();

    TaskDataset merged;
    merged.task = 0;
    for (const TaskDataset& task : stream) {
        merged.class_ids.insert(merged.class_ids.end(), task.class_ids.begin(),
                                task.class_ids.end());
        merged.train.insert(merged.train.end(), task.train.begin(),
                            task.train.end());
        merged.val.insert(merged.val.end(), task.val.begin(), task.val.end());
    }

    Rng init_rng(derive_seed(cfg.seed, 0));
    MilModel model = init_model(dim, cfg.hidden_dim, 0, init_rng);
    ModelOptimizer opt(model, cfg.adam);
    model.phi = expand_head(model.phi, merged.class_ids.size());
    opt.append_head_classes(merged.class_ids.size(), dim);

    std::uint64_t global_step = 0;
    JointRunResult result;
    result.log = train_task(model, merged, nullptr, cfg, opt, global_step);
    result.per_task_acc.resize(stream.size());
    for (std::size_t j = 0; j < stream.size(); ++j)
        result.per_task_acc[j] = evaluate(model, stream[j].test);
    result.model = std::move(model);
    return result;
}

void write_session_log_csv(const SessionLog& log, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw FormatError("cannot open " + path);
    os << "step,task,ce,attn_kl,logits_kl,total,is_replay,"
          "attn_grad_norm,classifier_grad_norm\n";
    os.precision(17);
    for (const StepRecord& r : log.steps)
        os << r.step << ',' << r.task << ',' << r.loss.ce << ','
           << r.loss.attn_kl << ',' << r.loss.logits_kl << ',' << r.loss.total
           << ',' << (r.loss.is_replay ? 1 : 0) << ',' << r.attn_grad_norm
           << ',' << r.classifier_grad_norm << '\n';
}

SessionLog read_session_log_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("cannot open " + path);
    std::string line;
    if (!std::getline(is, line) ||
        line != "step,task,ce,attn_kl,logits_kl,total,is_replay,"
                "attn_grad_norm,classifier_grad_norm")
        throw FormatError("session log " + path + ": bad header");
    SessionLog log;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        StepRecord r;
        char comma;
        int is_replay = 0;
        ss >> r.step >> comma >> r.task >> comma >> r.loss.ce >> comma >>
            r.loss.attn_kl >> comma >> r.loss.logits_kl >> comma >>
            r.loss.total >> comma >> is_replay >> comma >> r.attn_grad_norm >>
            comma >> r.classifier_grad_norm;
        if (ss.fail())
            throw FormatError("session log " + path + ": malformed row: " + line);
        r.loss.is_replay = is_replay != 0;
        log.task = r.task;
        log.steps.push_back(r);
    }
    return log;
}

void run_experiment(const std::string& data_dir, const TrainConfig& cfg,
                    const std::string& out_dir) {
    const TaskStream stream = load_task_stream(data_dir);
    fs::create_directories(out_dir);

    nlohmann::ordered_json manifest;
    manifest["config"] = nlohmann::ordered_json::parse(train_config_to_json(cfg));
    manifest["config_digest"] = config_digest(cfg);
    manifest["data_dir"] = data_dir;
    manifest["method"] = method_name(cfg.method);

    auto sidecar = [&](const std::string& ckpt_path, std::size_t session) {
        nlohmann::ordered_json side;
        side["seed"] = cfg.seed;
        side["session"] = session;
        side["config_digest"] = config_digest(cfg);
        std::ofstream js(ckpt_path + ".json");
        js << side.dump(2) << "\n";
    };

    if (cfg.method == Method::Joint) {
        const JointRunResult result = run_joint(stream, cfg);
        const std::string ckpt = (fs::path(out_dir) / "joint.milm").string();
        save_model(result.model, ckpt);
        sidecar(ckpt, 0);
        write_session_log_csv(result.log,
                              (fs::path(out_dir) / "session_0_steps.csv").string());
        manifest["joint_per_task_acc"] = result.per_task_acc;
        double mean = 0.0;
        for (double v : result.per_task_acc) mean += v;
        manifest["aacc"] = mean / static_cast<double>(result.per_task_acc.size());
        manifest["checkpoints"] = std::vector<std::string>{ckpt};
    } else {
        const ClRunResult result = run_cl(stream, cfg);
        std::vector<std::string> ckpts;
        for (std::size_t t = 0; t < result.session_models.size(); ++t) {
            const std::string ckpt =
                (fs::path(out_dir) / ("session_" + std::to_string(t) + ".milm"))
                    .string();
            save_model(result.session_models[t], ckpt);
            sidecar(ckpt, t);
            ckpts.push_back(ckpt);
            write_session_log_csv(
                result.logs[t],
                (fs::path(out_dir) /
                 ("session_" + std::to_string(t) + "_steps.csv"))
                    .string());
        }
        if (result.pool)
            result.pool->save((fs::path(out_dir) / "pool.milp").string());
        manifest["checkpoints"] = ckpts;
        manifest["matrix"] = result.matrix.rows;
        manifest["aacc"] = aacc(result.matrix);
        if (result.matrix.task_count >= 2) manifest["bwt"] = bwt(result.matrix);
    }

    std::ofstream os(fs::path(out_dir) / "run_manifest.json");
    os << manifest.dump(2) << "\n";
}

}  // namespace milcl
