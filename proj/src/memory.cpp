#include "milcl/memory.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "io_util.hpp"
#include "json.hpp"

namespace milcl {

StrategyKind strategy_from_name(const std::string& name) {
    if (name == "random") return StrategyKind::Random;
    if (name == "max") return StrategyKind::Max;
    if (name == "maxmin") return StrategyKind::MaxMin;
    if (name == "maxrand") return StrategyKind::MaxRand;
    if (name == "maxminrand") return StrategyKind::MaxMinRand;
    throw std::invalid_argument("unknown selection strategy: " + name);
}

std::string strategy_name(StrategyKind kind) {
    switch (kind) {
        case StrategyKind::Random: return "random";
        case StrategyKind::Max: return "max";
        case StrategyKind::MaxMin: return "maxmin";
        case StrategyKind::MaxRand: return "maxrand";
        case StrategyKind::MaxMinRand: return "maxminrand";
    }
    return "?";
}

namespace {

// Indices ordered by attention descending / ascending, ties toward the
// lower index in both directions.
std::vector<std::size_t> order_desc(const Vec& a) {
    std::vector<std::size_t> idx(a.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t i, std::size_t j) { return a[i] > a[j]; });
    return idx;
}

std::vector<std::size_t> order_asc(const Vec& a) {
    std::vector<std::size_t> idx(a.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t i, std::size_t j) { return a[i] < a[j]; });
    return idx;
}

}  // namespace

std::vector<std::size_t> select_indices(const Vec& attention,
                                        const SelectionStrategy& strategy,
                                        Rng& rng) {
    if (strategy.k == 0)
        throw std::invalid_argument("select_indices: K must be >= 1");
    const std::size_t n = attention.size();
    if (n == 0) throw std::invalid_argument("select_indices: empty attention");
    double sum = 0.0;
    for (double v : attention) {
        if (!(v >= 0.0))
            throw std::invalid_argument("select_indices: attention not a "
                                        "probability vector");
        sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-6)
        throw std::invalid_argument("select_indices: attention not normalized");

    const std::size_t kk = std::min(strategy.k, n);
    std::vector<bool> taken(n, false);
    std::size_t taken_count = 0;

    auto take_ordered = [&](const std::vector<std::size_t>& order,
                            std::size_t want) {
        for (std::size_t i = 0; i < order.size() && want > 0 &&
                                taken_count < kk; ++i) {
            if (!taken[order[i]]) {
                taken[order[i]] = true;
                ++taken_count;
                --want;
            }
        }
    };
    auto take_random = [&](std::size_t want) {
        std::vector<std::size_t> remaining;
        for (std::size_t i = 0; i < n; ++i)
            if (!taken[i]) remaining.push_back(i);
        want = std::min({want, remaining.size(), kk - taken_count});
        for (std::size_t picked = 0; picked < want; ++picked) {
            const std::size_t j =
                picked + rng.index_below(remaining.size() - picked);
            std::swap(remaining[picked], remaining[j]);
            taken[remaining[picked]] = true;
            ++taken_count;
        }
    };

    switch (strategy.kind) {
        case StrategyKind::Random:
            take_random(kk);
            break;
        case StrategyKind::Max:
            take_ordered(order_desc(attention), kk);
            break;
        case StrategyKind::MaxMin:
            take_ordered(order_desc(attention), (kk + 1) / 2);
            take_ordered(order_asc(attention), kk / 2);
            break;
        case StrategyKind::MaxRand:
            take_ordered(order_desc(attention), (kk + 1) / 2);
            take_random(kk / 2);
            break;
        case StrategyKind::MaxMinRand: {
            const std::size_t quarter = (kk + 3) / 4;
            take_ordered(order_desc(attention), quarter);
            take_ordered(order_asc(attention), quarter);
            take_random(kk - taken_count);
            break;
        }
    }

    std::vector<std::size_t> out;
    out.reserve(kk);
    for (std::size_t i = 0; i < n; ++i)
        if (taken[i]) out.push_back(i);
    return out;
}

MemoryEntry distill(const Bag& bag, const AttentionOutputs& teacher_outputs,
                    const Vec& teacher_class_logits,
                    const SelectionStrategy& strategy, Rng& rng) {
    const std::vector<std::size_t> sel =
        select_indices(teacher_outputs.attention, strategy, rng);
    MemoryEntry entry;
    entry.label = bag.label;
    entry.task = bag.task;
    entry.bag_id = bag.bag_id;
    entry.features = Mat(sel.size(), bag.dim());
    entry.teacher_attn_logits.resize(sel.size());
    for (std::size_t r = 0; r < sel.size(); ++r) {
        const auto src = bag.features.row(sel[r]);
        std::copy(src.begin(), src.end(), entry.features.row(r).begin());
        entry.teacher_attn_logits[r] = teacher_outputs.raw_scores[sel[r]];
    }
    entry.teacher_class_logits = teacher_class_logits;
    return entry;
}

PseudoBagPool::PseudoBagPool(std::size_t total_budget, std::uint64_t seed)
    : total_budget_(total_budget), seed_(seed), rng_(seed) {}

void PseudoBagPool::register_class(int label) {
    if (buckets_.contains(label)) return;
    buckets_[label] = Bucket{};
    rebalance();
}

void PseudoBagPool::rebalance() {
    per_class_capacity_ = buckets_.empty() ? 0 : total_budget_ / buckets_.size();
    for (auto& [label, bucket] : buckets_) {
        while (bucket.entries.size() > per_class_capacity_) {
            const std::size_t victim = rng_.index_below(bucket.entries.size());
            bucket.entries.erase(bucket.entries.begin() +
                                 static_cast<std::ptrdiff_t>(victim));
        }
    }
}

void PseudoBagPool::insert(MemoryEntry entry) {
    register_class(entry.label);
    Bucket& bucket = buckets_[entry.label];
    ++bucket.seen;
    if (bucket.entries.size() < per_class_capacity_) {
        bucket.entries.push_back(
            std::make_shared<const MemoryEntry>(std::move(entry)));
        return;
    }
    if (per_class_capacity_ == 0) return;
    // Algorithm R: slot j < capacity with probability capacity/seen.
    const std::size_t j = rng_.index_below(bucket.seen);
    if (j < per_class_capacity_)
        bucket.entries[j] = std::make_shared<const MemoryEntry>(std::move(entry));
}

std::vector<MemoryEntryPtr> PseudoBagPool::entries() const {
    std::vector<MemoryEntryPtr> out;
    for (const auto& [label, bucket] : buckets_)
        out.insert(out.end(), bucket.entries.begin(), bucket.entries.end());
    return out;
}

std::vector<MemoryEntryPtr> PseudoBagPool::iterate(Rng& rng) const {
    std::vector<MemoryEntryPtr> out = entries();
    for (std::size_t i = out.size(); i > 1; --i)
        std::swap(out[i - 1], out[rng.index_below(i)]);
    return out;
}

std::size_t PseudoBagPool::size() const {
    std::size_t total = 0;
    for (const auto& [label, bucket] : buckets_) total += bucket.entries.size();
    return total;
}

std::size_t PseudoBagPool::seen_count(int label) const {
    const auto it = buckets_.find(label);
    return it == buckets_.end() ? 0 : it->second.seen;
}

void PseudoBagPool::refresh_teacher(const MilModel& model) {
    for (auto& [label, bucket] : buckets_) {
        for (auto& ptr : bucket.entries) {
            MemoryEntry updated = *ptr;
            const AttentionOutputs out =
                forward_attention(updated.features, model.theta);
            updated.teacher_attn_logits = out.raw_scores;
            updated.teacher_class_logits =
                forward_classifier(out.bag_feature, model.phi);
            ptr = std::make_shared<const MemoryEntry>(std::move(updated));
        }
    }
}

void PseudoBagPool::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("pool save: cannot open " + path);
    const std::vector<MemoryEntryPtr> all = entries();
    io::write_bytes(os, "MILP", 4);
    io::write_u32(os, 1);
    io::write_u32(os, static_cast<std::uint32_t>(all.size()));
    for (const auto& e : all) {
        io::write_i32(os, e->label);
        io::write_i32(os, e->task);
        io::write_u32(os, static_cast<std::uint32_t>(e->features.rows));
        io::write_u32(os, static_cast<std::uint32_t>(e->features.cols));
        io::write_u32(os, static_cast<std::uint32_t>(e->teacher_class_logits.size()));
        io::write_u32(os, static_cast<std::uint32_t>(e->bag_id.size()));
        io::write_bytes(os, e->bag_id.data(), e->bag_id.size());
        for (double v : e->features.data) io::write_f64(os, v);
        for (double v : e->teacher_attn_logits) io::write_f64(os, v);
        for (double v : e->teacher_class_logits) io::write_f64(os, v);
    }
    if (!os) throw FormatError("pool save: write failed for " + path);

    nlohmann::ordered_json side;
    side["seed"] = seed_;
    side["total_budget"] = total_budget_;
    side["per_class_capacity"] = per_class_capacity_;
    nlohmann::ordered_json seen = nlohmann::ordered_json::object();
    for (const auto& [label, bucket] : buckets_)
        seen[std::to_string(label)] = bucket.seen;
    side["seen_counts"] = seen;
    std::ofstream js(path + ".json");
    js << side.dump(2) << "\n";
}

PseudoBagPool PseudoBagPool::load(const std::string& path) {
    std::ifstream js(path + ".json");
    if (!js) throw FormatError("pool load: missing sidecar " + path + ".json");
    const nlohmann::json side = nlohmann::json::parse(js);

    PseudoBagPool pool(side.at("total_budget").get<std::size_t>(),
                       side.at("seed").get<std::uint64_t>());
    for (const auto& [key, value] : side.at("seen_counts").items())
        pool.buckets_[std::stoi(key)].seen = value.get<std::size_t>();
    pool.per_class_capacity_ =
        pool.buckets_.empty() ? 0 : pool.total_budget_ / pool.buckets_.size();

    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("pool load: cannot open " + path);
    io::expect_magic(is, "MILP", "pool load");
    const std::uint32_t version = io::read_u32(is, "pool load");
    if (version != 1)
        throw FormatError("pool load: unsupported version at offset 4");
    const std::uint32_t count = io::read_u32(is, "pool load");
    for (std::uint32_t i = 0; i < count; ++i) {
        MemoryEntry e;
        e.label = io::read_i32(is, "pool load");
        e.task = io::read_i32(is, "pool load");
        const std::uint32_t kp = io::read_u32(is, "pool load");
        const std::uint32_t d = io::read_u32(is, "pool load");
        const std::uint32_t c = io::read_u32(is, "pool load");
        const std::uint32_t id_len = io::read_u32(is, "pool load");
        e.bag_id.resize(id_len);
        if (id_len > 0) io::read_bytes(is, e.bag_id.data(), id_len, "pool load");
        e.features = Mat(kp, d);
        e.teacher_attn_logits.resize(kp);
        e.teacher_class_logits.resize(c);
        for (double& v : e.features.data) v = io::read_f64(is, "pool load");
        for (double& v : e.teacher_attn_logits) v = io::read_f64(is, "pool load");
        for (double& v : e.teacher_class_logits) v = io::read_f64(is, "pool load");
        pool.buckets_[e.label].entries.push_back(
            std::make_shared<const MemoryEntry>(std::move(e)));
    }
    return pool;
}

}  // namespace milcl
