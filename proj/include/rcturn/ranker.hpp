#pragma once

// Incremental response ranker: after each incoming word of the current
// utterance, score every candidate response by the turn-shift probability the
// response-conditioned model assigns at that point, then either respond with
// the best candidate or wait for more input.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "rcturn/model.hpp"
#include "rcturn/sequencing.hpp"

namespace rcturn {

struct RankDecision {
    enum class Action { Wait, Respond };
    Action action = Action::Wait;
    std::optional<int> chosen;  // argmax candidate when responding
    std::vector<double> scores; // per-candidate turn-shift probability
    double threshold = 0.5;
};

struct RankOptions {
    Variant variant = Variant::rc;
    // respond only if the best eligible candidate beats the runner-up key by
    // at least this margin (0 disables the rule)
    double margin = 0.0;
    // optional additive per-candidate log-bias (utility weighting hook);
    // empty means all zero. Selection key = log(score) + bias; reported
    // scores and the threshold test stay raw probabilities.
    std::vector<double> utility_log_bias;
};

namespace detail {

template <typename S>
inline double candidate_ts_prob(const TransformerLM<S>& model, const std::vector<Turn>& history,
                                const std::vector<std::string>& cu_words, Speaker cu_speaker,
                                const std::vector<std::string>* response, Speaker resp_speaker,
                                const Vocab& vocab) {
    std::vector<SerialSegment> segs;
    if (response) segs.push_back({response, resp_speaker, true, false, true});
    for (const auto& h : history) segs.push_back({&h.words, h.speaker, false, false, true});
    segs.push_back({&cu_words, cu_speaker, false, true, false}); // growing CU: no final TS
    const EncodedSequence enc =
        serialize_segments(segs, vocab, LossScope::cu_only, "rank", 0,
                           static_cast<std::size_t>(model.cfg.max_seq_len));
    const Batch batch = make_batch(enc);
    const auto logits = model.forward(batch);
    return canon6(
        TransformerLM<S>::ts_prob_at(logits, static_cast<int>(enc.token_ids.size()) - 1));
}

} // namespace detail

// One ranking step on the CU prefix seen so far. The candidate score equals
// the trace value of the fully materialized sample at this position. The
// threshold may be 1.0 as a never-respond sentinel; crossing stays strict.
template <typename S>
inline RankDecision rank_step(const TransformerLM<S>& model, const std::vector<Turn>& history,
                              const std::vector<std::string>& cu_words_so_far,
                              const std::vector<std::vector<std::string>>& candidates,
                              double threshold, const Vocab& vocab,
                              const RankOptions& opts = {}) {
    if (candidates.empty()) throw std::invalid_argument("rank_step needs candidates");
    if (cu_words_so_far.empty())
        throw std::invalid_argument("rank_step needs at least one current-utterance word");
    if (!(threshold > 0.0 && threshold <= 1.0))
        throw std::invalid_argument("ranker threshold must lie in (0,1]");
    if (!opts.utility_log_bias.empty() && opts.utility_log_bias.size() != candidates.size())
        throw std::invalid_argument("utility_log_bias must match the candidate count");

    const Speaker cu_speaker = history.empty() ? Speaker::A : other(history.back().speaker);
    const Speaker resp_speaker = other(cu_speaker);

    RankDecision decision;
    decision.threshold = threshold;
    decision.scores.resize(candidates.size());
    if (opts.variant == Variant::baseline) {
        // a baseline model cannot see the candidate: identical score for all
        const double p = detail::candidate_ts_prob(model, history, cu_words_so_far, cu_speaker,
                                                   nullptr, resp_speaker, vocab);
        std::fill(decision.scores.begin(), decision.scores.end(), p);
    } else {
        for (std::size_t c = 0; c < candidates.size(); ++c) {
            if (candidates[c].empty())
                throw std::invalid_argument("candidate " + std::to_string(c) + " is empty");
            decision.scores[c] = detail::candidate_ts_prob(
                model, history, cu_words_so_far, cu_speaker, &candidates[c], resp_speaker, vocab);
        }
    }

    auto key = [&](std::size_t c) {
        const double bias = opts.utility_log_bias.empty() ? 0.0 : opts.utility_log_bias[c];
        return std::log(std::max(decision.scores[c], 1e-12)) + bias;
    };

    // eligible = strictly above threshold; choose the best key among them
    std::optional<std::size_t> best;
    for (std::size_t c = 0; c < candidates.size(); ++c) {
        if (!(decision.scores[c] > threshold)) continue;
        if (!best || key(c) > key(*best)) best = c;
    }
    if (best && opts.margin > 0.0 && candidates.size() > 1) {
        double runner_up = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < candidates.size(); ++c)
            if (c != *best) runner_up = std::max(runner_up, key(c));
        if (key(*best) - runner_up < opts.margin) best.reset();
    }
    if (best) {
        decision.action = RankDecision::Action::Respond;
        decision.chosen = static_cast<int>(*best);
    }
    return decision;
}

// One decision per incoming word; each equals rank_step on the prefix.
template <typename S>
inline std::vector<RankDecision> rank_session(const TransformerLM<S>& model,
                                              const std::vector<Turn>& history,
                                              const std::vector<std::string>& word_stream,
                                              const std::vector<std::vector<std::string>>& candidates,
                                              double threshold, const Vocab& vocab,
                                              const RankOptions& opts = {}) {
    std::vector<RankDecision> decisions;
    decisions.reserve(word_stream.size());
    std::vector<std::string> prefix;
    for (const auto& w : word_stream) {
        prefix.push_back(w);
        decisions.push_back(rank_step(model, history, prefix, candidates, threshold, vocab, opts));
    }
    return decisions;
}

inline nlohmann::json rank_decision_to_json(const std::string& word, const RankDecision& d) {
    nlohmann::json j{{"word", word},
                     {"action", d.action == RankDecision::Action::Respond ? "respond" : "wait"},
                     {"threshold", d.threshold},
                     {"scores", d.scores}};
    if (d.chosen)
        j["chosen"] = *d.chosen;
    else
        j["chosen"] = nullptr;
    return j;
}

} // namespace rcturn
