#pragma once

// Mini-batch training: Adam, linear warmup into a constant rate, global-norm
// clipping, periodic masked validation loss, early stopping, best-checkpoint
// return. Batches are padded to the per-batch maximum; samples are sorted by
// length inside shuffle buckets to limit padding waste.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rcturn/model.hpp"
#include "rcturn/sequencing.hpp"

namespace rcturn {

struct TrainConfig {
    Variant variant = Variant::baseline;
    int batch_size = 64;
    int max_steps = 1500;
    int eval_interval = 150;
    int patience = 5;
    double learning_rate = 3e-3;
    int warmup_steps = 100;
    double gradient_clip_norm = 1.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
        if (learning_rate <= 0) throw std::invalid_argument("learning_rate must be > 0");
        if (max_steps < 1 || eval_interval < 1 || patience < 0)
            throw std::invalid_argument("max_steps/eval_interval must be >= 1, patience >= 0");
        if (gradient_clip_norm < 0) throw std::invalid_argument("gradient_clip_norm must be >= 0");
    }
};

struct TrainLog {
    struct Record {
        int step = 0;
        double train_loss = 0.0;
        double val_loss = 0.0;
    };
    std::vector<Record> records;
    int best_step = 0;
    double best_val_loss = 0.0;
    int steps_run = 0;
    double wall_clock_ms = 0.0; // in-memory and manifest only, not in the log file

    // Line-delimited records; timing deliberately excluded so re-runs are
    // bit-identical.
    std::string serialize() const {
        std::ostringstream os;
        for (const auto& r : records) {
            char line[160];
            std::snprintf(line, sizeof line,
                          "{\"step\":%d,\"train_loss\":%.9g,\"val_loss\":%.9g}", r.step,
                          r.train_loss, r.val_loss);
            os << line << '\n';
        }
        char final_line[160];
        std::snprintf(final_line, sizeof final_line,
                      "{\"best_step\":%d,\"best_val_loss\":%.9g,\"steps_run\":%d}", best_step,
                      best_val_loss, steps_run);
        os << final_line << '\n';
        return os.str();
    }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write train log: " + path);
        out << serialize();
    }
};

struct TrainResult {
    ModelF model; // parameters of the best-validation step
    TrainLog log;
};

// Masked mean NLL over a whole sample set, invariant to how it is batched:
// per-position terms accumulate in dataset order.
inline double masked_eval_loss(const ModelF& model, const std::vector<EncodedSequence>& samples,
                               int batch_size) {
    double total = 0.0;
    std::size_t terms = 0;
    std::vector<const EncodedSequence*> ptrs;
    for (std::size_t start = 0; start < samples.size();
         start += static_cast<std::size_t>(batch_size)) {
        ptrs.clear();
        const std::size_t end =
            std::min(samples.size(), start + static_cast<std::size_t>(batch_size));
        for (std::size_t i = start; i < end; ++i) ptrs.push_back(&samples[i]);
        const Batch batch = make_batch(ptrs);
        std::size_t n = 0;
        for (auto m : batch.loss_mask)
            if (m) ++n;
        total += model.eval_loss(batch) * static_cast<double>(n);
        terms += n;
    }
    if (terms == 0) throw std::invalid_argument("evaluation set has no loss positions");
    return total / static_cast<double>(terms);
}

namespace detail {

// Shuffle sample order, then sort by length within fixed-size buckets.
inline std::vector<std::size_t> epoch_order(const std::vector<EncodedSequence>& samples,
                                            int batch_size, Rng& rng) {
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    const std::size_t bucket = static_cast<std::size_t>(batch_size) * 8;
    for (std::size_t start = 0; start < order.size(); start += bucket) {
        const auto end = std::min(order.size(), start + bucket);
        std::stable_sort(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end),
                         [&](std::size_t a, std::size_t b) {
                             return samples[a].length() < samples[b].length();
                         });
    }
    return order;
}

} // namespace detail

inline TrainResult train(ModelF model, const std::vector<EncodedSequence>& train_set,
                         const std::vector<EncodedSequence>& val_set, const TrainConfig& cfg) {
    cfg.validate();
    if (train_set.empty()) throw std::invalid_argument("training set is empty");
    if (val_set.empty()) throw std::invalid_argument("validation set is empty");

    const auto t_start = std::chrono::steady_clock::now();
    const Rng root(cfg.seed);

    constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
    std::vector<float> m(model.n_params(), 0.0f), v(model.n_params(), 0.0f);

    TrainResult result{model, {}};
    double best_val = std::numeric_limits<double>::infinity();
    int best_step = 0;
    int evals_since_best = 0;
    bool stop = false;

    std::vector<std::size_t> order;
    std::size_t cursor = 0;
    std::uint64_t epoch = 0;

    double window_loss = 0.0;
    int window_steps = 0;

    for (int step = 1; step <= cfg.max_steps && !stop; ++step) {
        if (cursor >= order.size()) {
            Rng erng = root.fork(0x45504f43ull + epoch); // per-epoch shuffle stream
            order = detail::epoch_order(train_set, cfg.batch_size, erng);
            cursor = 0;
            ++epoch;
        }
        std::vector<const EncodedSequence*> ptrs;
        for (int i = 0; i < cfg.batch_size && cursor < order.size(); ++i, ++cursor)
            ptrs.push_back(&train_set[order[cursor]]);
        const Batch batch = make_batch(ptrs);

        Rng drop_rng = root.fork(0x44524f50ull + static_cast<std::uint64_t>(step));
        ModelF::LossResult lg;
        try {
            lg = model.loss_and_grad(batch, true, &drop_rng);
        } catch (const std::runtime_error& e) {
            throw std::runtime_error("training diverged at step " + std::to_string(step) + ": " +
                                     e.what());
        }
        window_loss += lg.loss;
        ++window_steps;

        if (cfg.gradient_clip_norm > 0) {
            double sq = 0.0;
            for (float g : lg.grads) sq += static_cast<double>(g) * static_cast<double>(g);
            const double norm = std::sqrt(sq);
            if (norm > cfg.gradient_clip_norm) {
                const float scale = static_cast<float>(cfg.gradient_clip_norm / norm);
                for (float& g : lg.grads) g *= scale;
            }
        }

        const double warm =
            cfg.warmup_steps > 0 ? std::min(1.0, static_cast<double>(step) / cfg.warmup_steps)
                                 : 1.0;
        const double lr = cfg.learning_rate * warm;
        const double bc1 = 1.0 - std::pow(kBeta1, step);
        const double bc2 = 1.0 - std::pow(kBeta2, step);
        for (std::size_t i = 0; i < model.params.size(); ++i) {
            const double g = lg.grads[i];
            m[i] = static_cast<float>(kBeta1 * m[i] + (1.0 - kBeta1) * g);
            v[i] = static_cast<float>(kBeta2 * v[i] + (1.0 - kBeta2) * g * g);
            const double mh = m[i] / bc1;
            const double vh = v[i] / bc2;
            model.params[i] -= static_cast<float>(lr * mh / (std::sqrt(vh) + kEps));
        }

        if (step % cfg.eval_interval == 0 || step == cfg.max_steps) {
            const double val_loss = masked_eval_loss(model, val_set, cfg.batch_size);
            if (!std::isfinite(val_loss))
                throw std::runtime_error("training diverged: non-finite validation loss at step " +
                                         std::to_string(step));
            result.log.records.push_back(
                {step, window_steps ? window_loss / window_steps : 0.0, val_loss});
            window_loss = 0.0;
            window_steps = 0;
            if (val_loss < best_val) {
                best_val = val_loss;
                best_step = step;
                evals_since_best = 0;
                result.model.params = model.params;
            } else if (++evals_since_best >= cfg.patience && cfg.patience > 0) {
                stop = true;
            }
        }
        result.log.steps_run = step;
    }

    result.log.best_step = best_step;
    result.log.best_val_loss = best_val;
    result.log.wall_clock_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t_start)
            .count();
    return result;
}

} // namespace rcturn
