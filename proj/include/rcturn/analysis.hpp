#pragma once

// Divergence analysis: turns where the baseline barges in but the
// response-conditioned model shifts correctly, ranked by the probability gap
// at the baseline's crossing point, then quantified two ways — how often the
// full turn ends as a question while the barged prefix does not, and how
// semantically close the response sits to the missed tail of the turn. The
// question judgment and the embedding are pluggable.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "rcturn/evaluation.hpp"
#include "rcturn/model.hpp"

namespace rcturn {

struct DivergenceCase {
    std::string dialog_id;
    int cu_index = 0;
    int base_cross_index = 0; // baseline's first crossing
    int end_index = 0;
    double delta = 0.0; // p_base - p_rc at base_cross_index
    std::vector<std::string> words;      // full CU
    std::vector<std::string> tail_words; // CU words after base_cross_index through end
    std::vector<std::string> response_words;
    nlohmann::json tags;
};

inline std::vector<std::string> case_prefix(const DivergenceCase& c) {
    return {c.words.begin(), c.words.begin() + c.base_cross_index + 1};
}

// Keeps turns where baseline = BargeIn and rc = CorrectShift; sorts by delta
// descending, ties by dialog id then cu_index.
inline std::vector<DivergenceCase> divergence_cases(const std::vector<TsTrace>& base_traces,
                                                    const std::vector<TsTrace>& rc_traces,
                                                    double base_threshold, double rc_threshold,
                                                    const std::vector<Sample>& samples) {
    if (base_traces.size() != rc_traces.size())
        throw std::invalid_argument("trace sets differ in size");

    std::map<std::pair<std::string, int>, const TsTrace*> rc_index;
    for (const auto& t : rc_traces) rc_index[{t.dialog_id, t.cu_index}] = &t;
    std::map<std::pair<std::string, int>, const Sample*> sample_index;
    for (const auto& s : samples) sample_index[{s.dialog_id, s.cu_index}] = &s;

    std::vector<DivergenceCase> cases;
    for (const auto& base : base_traces) {
        const auto key = std::make_pair(base.dialog_id, base.cu_index);
        const auto rc_it = rc_index.find(key);
        if (rc_it == rc_index.end())
            throw std::invalid_argument("trace sets do not cover the same turns (missing " +
                                        base.dialog_id + ":" + std::to_string(base.cu_index) +
                                        ")");
        const TsTrace& rc = *rc_it->second;

        const auto base_outcome = classify_turn(base, base_threshold);
        if (base_outcome.kind != Outcome::BargeIn) continue;
        if (classify_turn(rc, rc_threshold).kind != Outcome::CorrectShift) continue;

        const auto s_it = sample_index.find(key);
        if (s_it == sample_index.end())
            throw std::invalid_argument("no sample found for trace " + base.dialog_id + ":" +
                                        std::to_string(base.cu_index));

        DivergenceCase c;
        c.dialog_id = base.dialog_id;
        c.cu_index = base.cu_index;
        c.base_cross_index = *base_outcome.first_cross_index;
        c.end_index = base.end_index;
        c.delta = base.probs[static_cast<std::size_t>(c.base_cross_index)] -
                  rc.probs[static_cast<std::size_t>(c.base_cross_index)];
        c.words = base.words;
        c.tail_words.assign(c.words.begin() + c.base_cross_index + 1, c.words.end());
        c.response_words = s_it->second->response.words;
        c.tags = s_it->second->tags;
        cases.push_back(std::move(c));
    }

    std::sort(cases.begin(), cases.end(), [](const DivergenceCase& a, const DivergenceCase& b) {
        if (a.delta != b.delta) return a.delta > b.delta;
        if (a.dialog_id != b.dialog_id) return a.dialog_id < b.dialog_id;
        return a.cu_index < b.cu_index;
    });
    return cases;
}

struct TopBottom {
    std::vector<DivergenceCase> top, bottom;
    std::size_t n_requested = 0;
    std::size_t n_used = 0;
    bool overlap = false;
    bool scaled = false;
};

inline TopBottom top_bottom(const std::vector<DivergenceCase>& cases, std::size_t n = 1000) {
    if (n < 1) throw std::invalid_argument("subset size must be >= 1");
    if (cases.empty()) throw std::invalid_argument("no divergence cases to split");
    TopBottom tb;
    tb.n_requested = n;
    tb.n_used = std::min(n, cases.size());
    tb.overlap = cases.size() < 2 * tb.n_used;
    tb.top.assign(cases.begin(), cases.begin() + static_cast<std::ptrdiff_t>(tb.n_used));
    tb.bottom.assign(cases.end() - static_cast<std::ptrdiff_t>(tb.n_used), cases.end());
    return tb;
}

// Shrinks n to half the case count so top and bottom stay disjoint; the
// scaled flag records that the requested size was cut.
inline TopBottom top_bottom_auto(const std::vector<DivergenceCase>& cases, std::size_t n = 1000) {
    if (cases.empty()) throw std::invalid_argument("no divergence cases to split");
    std::size_t n_eff = std::min(n, cases.size() / 2);
    if (n_eff == 0) n_eff = 1;
    TopBottom tb = top_bottom(cases, n_eff);
    tb.n_requested = n;
    tb.scaled = n_eff < n;
    return tb;
}

// ---------------------------------------------------------------------------
// annotators: is a word sequence question-final?
// ---------------------------------------------------------------------------

struct Annotator {
    virtual ~Annotator() = default;
    virtual bool question_final(const std::vector<std::string>& words,
                                const DivergenceCase& c) const = 0;
    virtual std::string name() const = 0;
};

// Reads the generator's tags: the full turn is question-final iff tagged so;
// any proper prefix is not.
struct OracleAnnotator final : Annotator {
    bool question_final(const std::vector<std::string>& words,
                        const DivergenceCase& c) const override {
        if (!c.tags.is_object() || !c.tags.contains("question_final"))
            throw std::runtime_error("oracle annotator: case " + c.dialog_id + ":" +
                                     std::to_string(c.cu_index) + " carries no question tag");
        if (words.size() < c.words.size()) return false;
        return c.tags["question_final"].get<bool>();
    }
    std::string name() const override { return "oracle"; }
};

// True iff any of the final 10 words is an interrogative starter.
struct HeuristicAnnotator final : Annotator {
    static const std::set<std::string>& starters() {
        static const std::set<std::string> s = {"what", "how",  "why",   "where", "when",
                                                "who",  "whom", "whose", "which"};
        return s;
    }
    bool question_final(const std::vector<std::string>& words,
                        const DivergenceCase&) const override {
        const std::size_t from = words.size() > 10 ? words.size() - 10 : 0;
        for (std::size_t i = from; i < words.size(); ++i)
            if (starters().count(words[i])) return true;
        return false;
    }
    std::string name() const override { return "heuristic"; }
};

// External per-turn annotations, the integration point for an outside
// punctuation model. Line-delimited records:
//   {"dialog_id": text, "cu_index": int,
//    "full_question_final": bool, "prefix_question_final": bool}
struct ImportedAnnotator final : Annotator {
    struct Entry {
        bool full = false, prefix = false;
    };
    std::map<std::pair<std::string, int>, Entry> entries;

    static ImportedAnnotator from_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot open annotation file: " + path);
        ImportedAnnotator a;
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty()) continue;
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(line);
            } catch (const nlohmann::json::exception& e) {
                throw std::runtime_error("malformed annotation at line " +
                                         std::to_string(line_no) + ": " + e.what());
            }
            a.entries[{j.at("dialog_id").get<std::string>(), j.at("cu_index").get<int>()}] = {
                j.at("full_question_final").get<bool>(),
                j.at("prefix_question_final").get<bool>()};
        }
        return a;
    }

    bool question_final(const std::vector<std::string>& words,
                        const DivergenceCase& c) const override {
        const auto it = entries.find({c.dialog_id, c.cu_index});
        if (it == entries.end())
            throw std::runtime_error("no imported annotation for case " + c.dialog_id + ":" +
                                     std::to_string(c.cu_index));
        return words.size() >= c.words.size() ? it->second.full : it->second.prefix;
    }
    std::string name() const override { return "import"; }
};

// Fraction of cases whose full turn is question-final while the prefix cut at
// the baseline crossing is not.
inline double question_shift_ratio(const std::vector<DivergenceCase>& subset,
                                   const Annotator& annotator) {
    if (subset.empty()) throw std::invalid_argument("question_shift_ratio on an empty subset");
    std::int64_t hits = 0;
    for (const auto& c : subset)
        if (annotator.question_final(c.words, c) && !annotator.question_final(case_prefix(c), c))
            ++hits;
    return static_cast<double>(hits) / static_cast<double>(subset.size());
}

// ---------------------------------------------------------------------------
// embedders and semantic matching
// ---------------------------------------------------------------------------

struct Embedder {
    virtual ~Embedder() = default;
    virtual Eigen::VectorXd embed(const std::vector<std::string>& words) const = 0;
    virtual std::string name() const = 0;
};

// Mean-pooled final-layer hidden states of a scorer checkpoint. Words are fed
// as a bare speaker-A sequence without TS.
struct HiddenStateEmbedder final : Embedder {
    const ModelF* model = nullptr;
    const Vocab* vocab = nullptr;

    HiddenStateEmbedder(const ModelF& m, const Vocab& v) : model(&m), vocab(&v) {}

    Eigen::VectorXd embed(const std::vector<std::string>& words) const override {
        if (words.empty()) throw std::invalid_argument("cannot embed an empty word sequence");
        EncodedSequence seq;
        seq.dialog_id = "embed";
        for (const auto& w : words) {
            seq.token_ids.push_back(vocab->id_of(w));
            seq.speaker_ids.push_back(0);
        }
        seq.response_flags.assign(seq.token_ids.size(), 0);
        seq.loss_mask.assign(seq.token_ids.size(), 0);
        ForwardCache<float> cache;
        const Batch batch = make_batch(seq);
        (void)model->forward(batch, false, nullptr, &cache);
        Eigen::VectorXd out = cache.lnf_out.colwise().mean().transpose().cast<double>();
        if (out.norm() == 0.0) throw std::runtime_error("embedder produced a zero vector");
        return out;
    }
    std::string name() const override { return "hidden-state"; }
};

// Mean of token embedding rows.
struct EmbeddingMeanEmbedder final : Embedder {
    const ModelF* model = nullptr;
    const Vocab* vocab = nullptr;

    EmbeddingMeanEmbedder(const ModelF& m, const Vocab& v) : model(&m), vocab(&v) {}

    Eigen::VectorXd embed(const std::vector<std::string>& words) const override {
        if (words.empty()) throw std::invalid_argument("cannot embed an empty word sequence");
        auto tok = model->view("tok_emb");
        Eigen::VectorXd acc = Eigen::VectorXd::Zero(model->cfg.d_model);
        for (const auto& w : words)
            acc += tok.row(vocab->id_of(w)).transpose().cast<double>();
        acc /= static_cast<double>(words.size());
        if (acc.norm() == 0.0) throw std::runtime_error("embedder produced a zero vector");
        return acc;
    }
    std::string name() const override { return "embedding-mean"; }
};

inline double cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    const double na = a.norm(), nb = b.norm();
    if (na == 0.0 || nb == 0.0)
        throw std::invalid_argument("cosine similarity of a zero vector is undefined");
    return a.dot(b) / (na * nb);
}

// Mean cosine similarity between the response and the CU tail the baseline
// missed.
inline double semantic_match_score(const std::vector<DivergenceCase>& subset,
                                   const Embedder& embedder) {
    if (subset.empty()) throw std::invalid_argument("semantic_match_score on an empty subset");
    double sum = 0.0;
    for (const auto& c : subset)
        sum += cosine_similarity(embedder.embed(c.response_words), embedder.embed(c.tail_words));
    return sum / static_cast<double>(subset.size());
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

struct AnalysisReport {
    std::size_t n_cases = 0;
    std::size_t n_requested = 0;
    std::size_t n_used = 0;
    bool overlap = false;
    bool scaled = false;
    std::string annotator;
    std::string embedder;
    double question_shift_ratio_top = 0.0;
    double question_shift_ratio_bottom = 0.0;
    double semantic_similarity_top = 0.0;
    double semantic_similarity_bottom = 0.0;

    nlohmann::json to_json() const {
        return nlohmann::json{{"format", "rcturn-analysis"},
                              {"version", kReportFormatVersion},
                              {"n_cases", n_cases},
                              {"subset_requested", n_requested},
                              {"subset_used", n_used},
                              {"subsets_overlap", overlap},
                              {"subset_scaled_down", scaled},
                              {"annotator", annotator},
                              {"embedder", embedder},
                              {"question_shift_ratio", {{"top", question_shift_ratio_top},
                                                        {"bottom", question_shift_ratio_bottom}}},
                              {"semantic_similarity", {{"top", semantic_similarity_top},
                                                       {"bottom", semantic_similarity_bottom}}},
                              // the similarity reading; distance = 1 - similarity
                              {"semantic_distance", {{"top", 1.0 - semantic_similarity_top},
                                                     {"bottom", 1.0 - semantic_similarity_bottom}}}};
    }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write analysis report: " + path);
        out << to_json().dump(2) << '\n';
    }
};

inline AnalysisReport analyze(const std::vector<DivergenceCase>& cases, std::size_t n,
                              const Annotator& annotator, const Embedder& embedder,
                              bool auto_scale = true) {
    const TopBottom tb = auto_scale ? top_bottom_auto(cases, n) : top_bottom(cases, n);
    AnalysisReport rep;
    rep.n_cases = cases.size();
    rep.n_requested = tb.n_requested;
    rep.n_used = tb.n_used;
    rep.overlap = tb.overlap;
    rep.scaled = tb.scaled;
    rep.annotator = annotator.name();
    rep.embedder = embedder.name();
    rep.question_shift_ratio_top = question_shift_ratio(tb.top, annotator);
    rep.question_shift_ratio_bottom = question_shift_ratio(tb.bottom, annotator);
    rep.semantic_similarity_top = semantic_match_score(tb.top, embedder);
    rep.semantic_similarity_bottom = semantic_match_score(tb.bottom, embedder);
    return rep;
}

} // namespace rcturn
