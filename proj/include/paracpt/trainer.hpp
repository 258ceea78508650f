#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "paracpt/common.hpp"
#include "paracpt/model.hpp"
#include "paracpt/optim.hpp"
#include "paracpt/packing.hpp"
#include "paracpt/sft.hpp"

namespace paracpt {

enum class Phase { cpt, sft };

inline std::string phase_name(Phase p) { return p == Phase::cpt ? "cpt" : "sft"; }

inline Phase parse_phase(const std::string& s)
{
    if (s == "cpt") {
        return Phase::cpt;
    }
    if (s == "sft") {
        return Phase::sft;
    }
    throw Error("unknown phase: " + s);
}

struct TrainConfig {
    Phase phase = Phase::cpt;
    double peak_lr = 1.5e-3;
    double warmup_ratio = 0.01;
    ScheduleKind schedule = ScheduleKind::cosine;
    double weight_decay = 0.1;
    double grad_clip = 1.0;
    std::size_t batch_size = 16;
    std::size_t epochs = 1;
    std::size_t validate_every = 100;
    std::optional<AdapterSpec> adapter;
    std::uint64_t seed = 0;
    double beta1 = 0.9;
    std::optional<double> beta2; // phase default when unset: 0.95 for CPT, 0.999 for SFT
    double eps = 1e-8;
    // Stop after this fraction of the scheduled steps; the schedule itself
    // still spans the full run, so this yields the intermediate checkpoint.
    double stop_fraction = 1.0;

    static TrainConfig cpt_defaults()
    {
        TrainConfig c;
        c.phase = Phase::cpt;
        c.peak_lr = 1.5e-3;
        c.schedule = ScheduleKind::cosine;
        return c;
    }

    static TrainConfig sft_defaults()
    {
        TrainConfig c;
        c.phase = Phase::sft;
        c.peak_lr = 3e-4;
        c.schedule = ScheduleKind::inverse_sqrt;
        return c;
    }

    double effective_beta2() const { return beta2.value_or(phase == Phase::cpt ? 0.95 : 0.999); }

    void validate() const
    {
        if (!(peak_lr > 0.0)) {
            throw Error("peak_lr must be positive");
        }
        if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0)) {
            throw Error("warmup_ratio must lie in [0, 1)");
        }
        if (!(grad_clip > 0.0)) {
            throw Error("grad_clip must be positive");
        }
        if (batch_size == 0 || validate_every == 0) {
            throw Error("batch_size and validate_every must be positive");
        }
        if (!(stop_fraction > 0.0 && stop_fraction <= 1.0)) {
            throw Error("stop_fraction must lie in (0, 1]");
        }
    }
};

template <class T>
struct Checkpoint {
    Transformer<T> model;
    std::size_t step = 0;
    double validation_loss = 0.0;
};

struct StepInfo {
    std::size_t step = 0;
    std::size_t total_steps = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    std::optional<double> validation_loss;
};

class TrainingDiverged : public Error {
public:
    TrainingDiverged(std::size_t last_finite_step, const std::string& msg)
        : Error(msg), last_finite_step_(last_finite_step)
    {}
    std::size_t last_finite_step() const { return last_finite_step_; }

private:
    std::size_t last_finite_step_;
};

inline TrainingExample example_from_window(const PackedWindow& w)
{
    return TrainingExample{w.input_ids, w.target_ids, std::vector<float>(w.input_ids.size(), 1.0f)};
}

/// Shifts an SFT sequence into next-token form; weight[i] = mask[i+1].
inline TrainingExample example_from_sft(const SftExample& ex)
{
    const std::size_t n = ex.input_ids.size();
    if (n < 2) {
        throw Error("SFT example must have at least two tokens");
    }
    TrainingExample out;
    out.input.assign(ex.input_ids.begin(), ex.input_ids.end() - 1);
    out.target.assign(ex.input_ids.begin() + 1, ex.input_ids.end());
    out.weight.resize(n - 1);
    for (std::size_t i = 0; i + 1 < n; ++i) {
        out.weight[i] = ex.loss_mask[i + 1] ? 1.0f : 0.0f;
    }
    return out;
}

/// Mean next-token NLL over the window's c positions.
template <class T>
double cpt_loss(const Transformer<T>& model, const PackedWindow& window)
{
    if (window.input_ids.size() != model.config().context_len) {
        throw Error("cpt_loss: window length differs from the model context");
    }
    return model.nll(example_from_window(window)) / static_cast<double>(window.input_ids.size());
}

/// Token-weighted mean NLL over a set of examples.
template <class T>
double mean_loss(const Transformer<T>& model, const std::vector<TrainingExample>& examples)
{
    constexpr std::size_t chunk = 16;
    double total = 0.0;
    double weight = 0.0;
    for (std::size_t i = 0; i < examples.size(); i += chunk) {
        const auto part = std::span<const TrainingExample>(examples).subspan(i, std::min(chunk, examples.size() - i));
        total += model.nll(part);
        for (const auto& ex : part) {
            weight += ex.weight_sum();
        }
    }
    if (weight <= 0.0) {
        throw Error("mean_loss: no supervised tokens");
    }
    return total / weight;
}

inline std::size_t steps_per_epoch(std::size_t n, std::size_t batch) { return (n + batch - 1) / batch; }

template <class T>
using StepCallback = std::type_identity_t<std::function<void(const StepInfo&, const Transformer<T>&)>>;

/// Runs one training phase over the full schedule and returns, for each
/// requested fraction f, the lowest-validation-loss checkpoint seen up to
/// step max(1, ceil(f * total)). Validation runs at step 0, every
/// `validate_every` steps and at every snapshot step, so the snapshot for f
/// equals the result of a run stopped at f.
template <class T>
std::vector<Checkpoint<T>> train_phase_snapshots(Transformer<T> model, const std::vector<TrainingExample>& data,
                                                 const std::vector<TrainingExample>& val, const TrainConfig& cfg,
                                                 const std::vector<double>& fractions,
                                                 const StepCallback<T>& on_step = {})
{
    cfg.validate();
    if (data.empty()) {
        throw Error("train_phase: no training examples");
    }
    if (val.empty()) {
        throw Error("train_phase: no validation examples");
    }
    if (fractions.empty()) {
        throw Error("train_phase: no snapshot fractions");
    }
    if (cfg.adapter && !model.has_adapters()) {
        model.apply_adapters(*cfg.adapter, mix_seed(cfg.seed, 1));
    }

    const std::size_t per_epoch = steps_per_epoch(data.size(), cfg.batch_size);
    const std::size_t total = per_epoch * cfg.epochs;
    std::vector<std::size_t> stops;
    for (double f : fractions) {
        if (!(f > 0.0 && f <= 1.0)) {
            throw Error("snapshot fraction must lie in (0, 1]");
        }
        stops.push_back(total == 0 ? 0 : std::max<std::size_t>(1, fraction_count(f, total)));
    }
    const std::size_t last = *std::max_element(stops.begin(), stops.end());
    const LrSchedule schedule(cfg.schedule, cfg.peak_lr, cfg.warmup_ratio, std::max<std::size_t>(total, 1));

    Checkpoint<T> best{model, 0, mean_loss(model, val)};
    if (!std::isfinite(best.validation_loss)) {
        throw TrainingDiverged(0, "initial validation loss is not finite");
    }
    if (on_step) {
        on_step(StepInfo{0, total, 0.0, 0.0, best.validation_loss}, model);
    }
    std::vector<std::optional<Checkpoint<T>>> snaps(stops.size());
    auto take_snapshots = [&](std::size_t step) {
        for (std::size_t i = 0; i < stops.size(); ++i) {
            if (stops[i] == step) {
                snaps[i] = best;
            }
        }
    };
    take_snapshots(0);

    AdamW<T> opt(model, AdamWConfig{cfg.beta1, cfg.effective_beta2(), cfg.eps, cfg.weight_decay});
    Rng order_rng(mix_seed(cfg.seed, 0));
    Rng dropout_rng(mix_seed(cfg.seed, 2));
    const bool dropout = model.has_adapters() && model.adapter_spec()->dropout > 0.0;

    std::vector<std::size_t> order(data.size());
    std::size_t step = 0;
    std::size_t last_finite = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs && step < last; ++epoch) {
        for (std::size_t i = 0; i < order.size(); ++i) {
            order[i] = i;
        }
        order_rng.shuffle(order);
        for (std::size_t b = 0; b < per_epoch && step < last; ++b) {
            const std::size_t begin = b * cfg.batch_size;
            const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
            std::vector<TrainingExample> batch;
            batch.reserve(end - begin);
            double weight = 0.0;
            for (std::size_t k = begin; k < end; ++k) {
                batch.push_back(data[order[k]]);
                weight += batch.back().weight_sum();
            }
            ++step;
            StepInfo info{step, total, schedule.at(step), 0.0, std::nullopt};
            if (weight > 0.0) {
                auto grads = model.zero_gradients();
                info.train_loss = model.accumulate_gradients(std::span<const TrainingExample>(batch),
                                                             static_cast<T>(1.0 / weight), grads,
                                                             dropout ? &dropout_rng : nullptr) /
                                  weight;
                if (!std::isfinite(info.train_loss)) {
                    throw TrainingDiverged(last_finite, "training loss became non-finite at step " +
                                                            std::to_string(step) + " (last finite step " +
                                                            std::to_string(last_finite) + ")");
                }
                last_finite = step;
                clip_grad_norm(grads, cfg.grad_clip);
                opt.step(model, grads, info.lr);
            }
            const bool is_stop = std::find(stops.begin(), stops.end(), step) != stops.end();
            if (step % cfg.validate_every == 0 || is_stop) {
                const double v = mean_loss(model, val);
                if (!std::isfinite(v)) {
                    throw TrainingDiverged(last_finite,
                                           "validation loss became non-finite at step " + std::to_string(step));
                }
                info.validation_loss = v;
                if (v < best.validation_loss) {
                    best = Checkpoint<T>{model, step, v};
                }
            }
            take_snapshots(step);
            if (on_step) {
                on_step(info, model);
            }
        }
    }
    std::vector<Checkpoint<T>> out;
    out.reserve(snaps.size());
    for (auto& s : snaps) {
        out.push_back(std::move(*s));
    }
    return out;
}

/// Runs one training phase and returns the checkpoint with the lowest
/// validation loss (validated at step 0, every `validate_every` steps and at
/// the last step). Loss per step is the batch's token-weighted mean.
template <class T>
Checkpoint<T> train_phase(Transformer<T> model, const std::vector<TrainingExample>& data,
                          const std::vector<TrainingExample>& val, const TrainConfig& cfg,
                          const StepCallback<T>& on_step = {})
{
    return std::move(train_phase_snapshots(std::move(model), data, val, cfg, {cfg.stop_fraction}, on_step).front());
}

// Checkpoint file: "BFCK", u16 version, model config, optional adapter
// spec, step, validation loss, then every tensor (u32 rows, u32 cols,
// f32 values row-major) in declaration order. Little-endian throughout.
inline constexpr std::uint16_t kCheckpointVersion = 1;

template <class T>
void save_checkpoint(const Checkpoint<T>& ck, const std::string& path)
{
    auto os = open_output(path, true);
    const auto& m = ck.model;
    const auto& c = m.config();
    binio::write_magic(os, "BFCK");
    binio::write_le<std::uint16_t>(os, kCheckpointVersion);
    for (std::size_t v : {c.vocab_size, c.context_len, c.embed_dim, c.n_layers, c.n_heads, c.ffn_dim}) {
        binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(v));
    }
    binio::write_le<std::uint64_t>(os, c.seed);
    binio::write_le<std::uint8_t>(os, m.has_adapters() ? 1 : 0);
    if (m.has_adapters()) {
        const auto& a = *m.adapter_spec();
        binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(a.rank));
        binio::write_f64(os, a.alpha);
        binio::write_f64(os, a.dropout);
        std::uint32_t mask = 0;
        for (auto r : a.targets) {
            mask |= 1u << static_cast<unsigned>(r);
        }
        binio::write_le<std::uint32_t>(os, mask);
    }
    binio::write_le<std::uint64_t>(os, ck.step);
    binio::write_f64(os, ck.validation_loss);
    binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(m.params().size()));
    for (const auto& p : m.params()) {
        binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.value.rows()));
        binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.value.cols()));
        for (Eigen::Index i = 0; i < p.value.size(); ++i) {
            binio::write_f32(os, static_cast<float>(p.value.data()[i]));
        }
    }
    if (!os) {
        throw Error("write failed: " + path);
    }
}

template <class T = float>
Checkpoint<T> load_checkpoint(const std::string& path)
{
    auto is = open_input(path, true);
    binio::expect_magic(is, "BFCK", path);
    const auto version = binio::read_le<std::uint16_t>(is);
    if (version != kCheckpointVersion) {
        throw Error(path + ": unsupported checkpoint version " + std::to_string(version));
    }
    ModelConfig c;
    c.vocab_size = binio::read_le<std::uint32_t>(is);
    c.context_len = binio::read_le<std::uint32_t>(is);
    c.embed_dim = binio::read_le<std::uint32_t>(is);
    c.n_layers = binio::read_le<std::uint32_t>(is);
    c.n_heads = binio::read_le<std::uint32_t>(is);
    c.ffn_dim = binio::read_le<std::uint32_t>(is);
    c.seed = binio::read_le<std::uint64_t>(is);
    Transformer<T> model(c);
    if (binio::read_le<std::uint8_t>(is) != 0) {
        AdapterSpec a;
        a.rank = binio::read_le<std::uint32_t>(is);
        a.alpha = binio::read_f64(is);
        a.dropout = binio::read_f64(is);
        const auto mask = binio::read_le<std::uint32_t>(is);
        a.targets.clear();
        for (unsigned r = 0; r < 6; ++r) {
            if (mask & (1u << r)) {
                a.targets.insert(static_cast<MatrixRole>(r));
            }
        }
        model.apply_adapters(a, 0);
    }
    Checkpoint<T> ck{std::move(model), 0, 0.0};
    ck.step = binio::read_le<std::uint64_t>(is);
    ck.validation_loss = binio::read_f64(is);
    const auto count = binio::read_le<std::uint32_t>(is);
    auto& params = ck.model.params();
    if (count != params.size()) {
        throw Error(path + ": tensor count mismatch");
    }
    for (auto& p : params) {
        const auto rows = binio::read_le<std::uint32_t>(is);
        const auto cols = binio::read_le<std::uint32_t>(is);
        if (rows != p.value.rows() || cols != p.value.cols()) {
            throw Error(path + ": shape mismatch for " + p.name);
        }
        for (Eigen::Index i = 0; i < p.value.size(); ++i) {
            p.value.data()[i] = static_cast<T>(binio::read_f32(is));
        }
    }
    return ck;
}

} // namespace paracpt
