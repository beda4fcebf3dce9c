#pragma once

// Turn-level evaluation: threshold optimization over a validation split and
// the five metrics TL-Acc, NRR, BR, R-PPL, OSR. Crossing is strict (>). The
// three threshold outcomes partition the turns exactly; OSR uses a strict
// maximum at the end index, ties counting against the model.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rcturn/model.hpp"
#include "rcturn/sequencing.hpp"

namespace rcturn {

enum class Outcome { CorrectShift, BargeIn, NoResponse };

inline const char* outcome_name(Outcome o) {
    switch (o) {
        case Outcome::CorrectShift: return "correct_shift";
        case Outcome::BargeIn: return "barge_in";
        default: return "no_response";
    }
}

struct TurnOutcome {
    Outcome kind = Outcome::NoResponse;
    std::optional<int> first_cross_index;
};

inline TurnOutcome classify_turn(const TsTrace& trace, double threshold) {
    if (trace.probs.empty()) throw std::invalid_argument("cannot classify an empty trace");
    if (!(threshold > 0.0 && threshold < 1.0))
        throw std::invalid_argument("threshold must lie strictly inside (0,1)");
    for (int i = 0; i < static_cast<int>(trace.probs.size()); ++i) {
        if (trace.probs[static_cast<std::size_t>(i)] > threshold) {
            return {i == trace.end_index ? Outcome::CorrectShift : Outcome::BargeIn, i};
        }
    }
    return {Outcome::NoResponse, std::nullopt};
}

// Strict maximum at the end index; an earlier tie disqualifies the turn.
inline bool strict_max_at_end(const TsTrace& trace) {
    const double p_end = trace.probs[static_cast<std::size_t>(trace.end_index)];
    for (int i = 0; i < trace.end_index; ++i)
        if (trace.probs[static_cast<std::size_t>(i)] >= p_end) return false;
    return true;
}

// Grid {0.01, ..., 0.99} maximizing turn-level accuracy, lowest tie wins.
inline double optimize_threshold(const std::vector<TsTrace>& traces) {
    if (traces.empty()) throw std::invalid_argument("cannot optimize a threshold on no traces");
    int best_count = -1;
    int best_grid = 1;
    for (int g = 1; g <= 99; ++g) {
        const double th = g / 100.0;
        int correct = 0;
        for (const auto& t : traces)
            if (classify_turn(t, th).kind == Outcome::CorrectShift) ++correct;
        if (correct > best_count) {
            best_count = correct;
            best_grid = g;
        }
    }
    return best_grid / 100.0;
}

// ---------------------------------------------------------------------------
// response perplexity
// ---------------------------------------------------------------------------

// exp of the mean NLL the scorer assigns to each response token, conditioned
// on context + TS + preceding response tokens (baseline serialization order).
// Over-long contexts are truncated from the left and flagged.
inline double response_ppl(const ModelF& scorer, std::vector<TokenId> ctx_ids,
                           std::vector<std::uint8_t> ctx_speakers, Speaker cu_speaker,
                           const std::vector<TokenId>& resp_ids, Speaker resp_speaker,
                           bool* truncated = nullptr) {
    if (resp_ids.empty()) throw std::invalid_argument("response_ppl needs a non-empty response");
    if (ctx_ids.size() != ctx_speakers.size())
        throw std::invalid_argument("context ids and speakers must align");

    const std::size_t max_len = static_cast<std::size_t>(scorer.cfg.max_seq_len);
    const std::size_t fixed = 1 + resp_ids.size(); // TS + response
    if (ctx_ids.size() + fixed > max_len) {
        const std::size_t keep = max_len - fixed;
        ctx_ids.erase(ctx_ids.begin(), ctx_ids.end() - static_cast<std::ptrdiff_t>(keep));
        ctx_speakers.erase(ctx_speakers.begin(),
                           ctx_speakers.end() - static_cast<std::ptrdiff_t>(keep));
        if (truncated) *truncated = true;
    }

    EncodedSequence seq;
    seq.dialog_id = "rppl";
    for (std::size_t i = 0; i < ctx_ids.size(); ++i) {
        seq.token_ids.push_back(ctx_ids[i]);
        seq.speaker_ids.push_back(ctx_speakers[i]);
    }
    seq.token_ids.push_back(kTsId);
    seq.speaker_ids.push_back(static_cast<std::uint8_t>(cu_speaker));
    for (TokenId id : resp_ids) {
        seq.token_ids.push_back(id);
        seq.speaker_ids.push_back(static_cast<std::uint8_t>(resp_speaker));
    }
    seq.response_flags.assign(seq.token_ids.size(), 0);
    seq.loss_mask.assign(seq.token_ids.size(), 0);

    const Batch batch = make_batch(seq);
    const auto logits = scorer.forward(batch);

    const std::size_t resp_start = ctx_ids.size() + 1;
    double nll = 0.0;
    for (std::size_t j = 0; j < resp_ids.size(); ++j) {
        const int row = static_cast<int>(resp_start + j) - 1;
        const float mx = logits.row(row).maxCoeff();
        double lse = 0.0;
        for (int vv = 0; vv < logits.cols(); ++vv)
            lse += std::exp(static_cast<double>(logits(row, vv) - mx));
        nll += static_cast<double>(mx) + std::log(lse) -
               static_cast<double>(logits(row, resp_ids[j]));
    }
    return std::exp(nll / static_cast<double>(resp_ids.size()));
}

// ---------------------------------------------------------------------------
// metrics report
// ---------------------------------------------------------------------------

struct GroupCounts {
    std::int64_t n = 0, correct = 0, barge = 0, no_response = 0, osr = 0;

    double tl_acc() const { return n ? double(correct) / double(n) : 0.0; }
    double nrr() const { return n ? double(no_response) / double(n) : 0.0; }
    double br() const { return n ? double(barge) / double(n) : 0.0; }
    double osr_rate() const { return n ? double(osr) / double(n) : 0.0; }
};

struct MetricsReport {
    std::string model_label;
    double threshold = 0.5;
    GroupCounts overall;
    std::map<std::string, GroupCounts> by_group; // scenario breakdown when tags exist
    std::optional<double> r_ppl;                 // mean response perplexity over the
                                                 // divergence subset
    std::int64_t r_ppl_n = 0;
    bool r_ppl_context_truncated = false;

    std::int64_t n_turns() const { return overall.n; }
    double tl_acc() const { return overall.tl_acc(); }
    double nrr() const { return overall.nrr(); }
    double br() const { return overall.br(); }
    double osr() const { return overall.osr_rate(); }
};

// Scenario breakdown key. The designated scenario CU carries question_final;
// late/early splits on whether the trace runs past the early completion.
inline std::string breakdown_group(const TsTrace& t) {
    if (!t.tags.is_object() || !t.tags.contains("scenario") || !t.tags.contains("question_final"))
        return "other";
    const std::string scn = t.tags["scenario"].get<std::string>();
    if (!t.tags.contains("early_end_index")) return scn;
    const int early = t.tags["early_end_index"].get<int>();
    return scn + (t.end_index > early ? "_late" : "_early");
}

struct RpplInputs {
    const ModelF* scorer = nullptr; // always the baseline checkpoint
    const Vocab* vocab = nullptr;
    // samples aligned one-to-one with this model's traces
    const std::vector<Sample>* samples = nullptr;
    const std::vector<TsTrace>* counterpart_traces = nullptr;
    double counterpart_threshold = 0.5;
};

// A turn enters the R-PPL average iff at least one of the two models fails
// to produce CorrectShift on it. The scoring context is H plus CU truncated
// at this model's first crossing (full CU if it never crossed), then TS.
inline void add_response_ppl(MetricsReport& report, const std::vector<TsTrace>& traces,
                             double threshold, const RpplInputs& in) {
    if (!in.scorer || !in.vocab || !in.samples || !in.counterpart_traces)
        throw std::invalid_argument("response perplexity needs scorer, vocab, samples and "
                                    "counterpart traces");
    if (in.samples->size() != traces.size() || in.counterpart_traces->size() != traces.size())
        throw std::invalid_argument("traces, samples and counterpart traces must align");

    double sum = 0.0;
    std::int64_t n = 0;
    bool truncated = false;
    for (std::size_t i = 0; i < traces.size(); ++i) {
        const auto& trace = traces[i];
        const auto& other = (*in.counterpart_traces)[i];
        if (trace.dialog_id != other.dialog_id || trace.cu_index != other.cu_index)
            throw std::invalid_argument("counterpart traces do not cover the same turns");
        const auto mine = classify_turn(trace, threshold);
        const auto theirs = classify_turn(other, in.counterpart_threshold);
        if (mine.kind == Outcome::CorrectShift && theirs.kind == Outcome::CorrectShift) continue;

        const Sample& s = (*in.samples)[i];
        std::vector<TokenId> ctx;
        std::vector<std::uint8_t> spk;
        for (const auto& h : s.history) {
            for (const auto& w : h.words) {
                ctx.push_back(in.vocab->id_of(w));
                spk.push_back(static_cast<std::uint8_t>(h.speaker));
            }
            ctx.push_back(kTsId);
            spk.push_back(static_cast<std::uint8_t>(h.speaker));
        }
        const int cut = mine.first_cross_index ? *mine.first_cross_index : trace.end_index;
        for (int w = 0; w <= cut; ++w) {
            ctx.push_back(in.vocab->id_of(s.current.words[static_cast<std::size_t>(w)]));
            spk.push_back(static_cast<std::uint8_t>(s.current.speaker));
        }

        bool trunc = false;
        sum += response_ppl(*in.scorer, ctx, spk, s.current.speaker,
                            in.vocab->encode(s.response.words), s.response.speaker, &trunc);
        truncated = truncated || trunc;
        ++n;
    }
    if (n > 0) report.r_ppl = sum / static_cast<double>(n);
    report.r_ppl_n = n;
    report.r_ppl_context_truncated = truncated;
}

inline MetricsReport evaluate(const std::vector<TsTrace>& traces, double threshold,
                              const RpplInputs* rppl = nullptr,
                              const std::string& model_label = "") {
    if (traces.empty()) throw std::invalid_argument("cannot evaluate an empty trace set");
    MetricsReport report;
    report.model_label = model_label;
    report.threshold = threshold;
    for (const auto& t : traces) {
        const auto outcome = classify_turn(t, threshold);
        const bool osr = strict_max_at_end(t);
        auto bump = [&](GroupCounts& g) {
            ++g.n;
            if (outcome.kind == Outcome::CorrectShift) ++g.correct;
            if (outcome.kind == Outcome::BargeIn) ++g.barge;
            if (outcome.kind == Outcome::NoResponse) ++g.no_response;
            if (osr) ++g.osr;
        };
        bump(report.overall);
        bump(report.by_group[breakdown_group(t)]);
    }
    if (rppl) add_response_ppl(report, traces, threshold, *rppl);
    return report;
}

// ---------------------------------------------------------------------------
// trace export / import
// ---------------------------------------------------------------------------

inline std::string trace_to_json_line(const TsTrace& t) {
    std::ostringstream os;
    os << "{\"dialog_id\":" << nlohmann::json(t.dialog_id).dump() << ",\"cu_index\":" << t.cu_index
       << ",\"words\":" << nlohmann::json(t.words).dump() << ",\"probs\":[";
    for (std::size_t i = 0; i < t.probs.size(); ++i) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.6f", t.probs[i]);
        os << (i ? "," : "") << buf;
    }
    os << "],\"end_index\":" << t.end_index << "}";
    return os.str();
}

inline void save_traces(const std::vector<TsTrace>& traces, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write trace file: " + path);
    out << "{\"format\":\"rcturn-traces\",\"version\":" << kTraceFormatVersion << "}\n";
    for (const auto& t : traces) out << trace_to_json_line(t) << '\n';
}

inline std::vector<TsTrace> load_traces(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open trace file: " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("empty trace file: " + path);
    {
        const auto header = nlohmann::json::parse(line);
        if (!header.is_object() || header.value("format", "") != "rcturn-traces" ||
            header.value("version", -1) != kTraceFormatVersion)
            throw std::runtime_error("unsupported trace file header: " + line);
    }
    std::vector<TsTrace> traces;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error("malformed trace record at line " + std::to_string(line_no) +
                                     ": " + e.what());
        }
        TsTrace t;
        t.dialog_id = j.at("dialog_id").get<std::string>();
        t.cu_index = j.at("cu_index").get<int>();
        t.words = j.at("words").get<std::vector<std::string>>();
        t.probs = j.at("probs").get<std::vector<double>>();
        t.end_index = j.at("end_index").get<int>();
        traces.push_back(std::move(t));
    }
    return traces;
}

// ---------------------------------------------------------------------------
// report files
// ---------------------------------------------------------------------------

inline nlohmann::json metrics_to_json(const MetricsReport& r) {
    auto group_json = [](const GroupCounts& g) {
        return nlohmann::json{{"n", g.n},
                              {"correct_shift", g.correct},
                              {"barge_in", g.barge},
                              {"no_response", g.no_response},
                              {"osr_hits", g.osr},
                              {"tl_acc", g.tl_acc()},
                              {"nrr", g.nrr()},
                              {"br", g.br()},
                              {"osr", g.osr_rate()}};
    };
    nlohmann::json j{{"format", "rcturn-metrics"},
                     {"version", kReportFormatVersion},
                     {"model", r.model_label},
                     {"threshold", r.threshold},
                     {"overall", group_json(r.overall)}};
    nlohmann::json groups = nlohmann::json::object();
    for (const auto& [name, g] : r.by_group) groups[name] = group_json(g);
    j["by_group"] = groups;
    if (r.r_ppl) {
        j["r_ppl"] = *r.r_ppl;
        j["r_ppl_n"] = r.r_ppl_n;
        j["r_ppl_context_truncated"] = r.r_ppl_context_truncated;
    }
    return j;
}

inline void save_metrics(const MetricsReport& r, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write metrics report: " + path);
    out << metrics_to_json(r).dump(2) << '\n';
}

// Human-readable table in the style of the aggregate results table: one
// metric per row, one column per model.
inline std::string metrics_table(const std::vector<MetricsReport>& reports) {
    std::ostringstream os;
    os << std::left << std::setw(10) << "Metric";
    for (const auto& r : reports)
        os << std::right << std::setw(14) << (r.model_label.empty() ? "model" : r.model_label);
    os << '\n';
    auto row = [&](const char* name, auto getter, const char* suffix) {
        os << std::left << std::setw(10) << name;
        for (const auto& r : reports) {
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.2f%s", getter(r), suffix);
            os << std::right << std::setw(14) << buf;
        }
        os << '\n';
    };
    row("TL-Acc", [](const MetricsReport& r) { return 100.0 * r.tl_acc(); }, "%");
    row("NRR", [](const MetricsReport& r) { return 100.0 * r.nrr(); }, "%");
    row("BR", [](const MetricsReport& r) { return 100.0 * r.br(); }, "%");
    os << std::left << std::setw(10) << "R-PPL";
    for (const auto& r : reports) {
        char buf[32];
        if (r.r_ppl)
            std::snprintf(buf, sizeof buf, "%.3f", *r.r_ppl);
        else
            std::snprintf(buf, sizeof buf, "-");
        os << std::right << std::setw(14) << buf;
    }
    os << '\n';
    row("OSR", [](const MetricsReport& r) { return 100.0 * r.osr(); }, "%");
    os << std::left << std::setw(10) << "threshold";
    for (const auto& r : reports) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.2f", r.threshold);
        os << std::right << std::setw(14) << buf;
    }
    os << '\n';
    return os.str();
}

} // namespace rcturn
