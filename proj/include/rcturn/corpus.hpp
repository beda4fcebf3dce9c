#pragma once

// Dialog corpus handling: the line-delimited interchange format, text
// normalization, the synthetic scenario generator and deterministic splits.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "rcturn/rng.hpp"

namespace rcturn {

enum class Speaker : std::uint8_t { A = 0, B = 1 };

inline Speaker other(Speaker s) { return s == Speaker::A ? Speaker::B : Speaker::A; }
inline char speaker_char(Speaker s) { return s == Speaker::A ? 'A' : 'B'; }

struct Turn {
    Speaker speaker = Speaker::A;
    std::vector<std::string> words;
    nlohmann::json tags; // object or null

    bool has_tag(const std::string& key) const { return tags.is_object() && tags.contains(key); }
};

struct Dialog {
    std::string id;
    std::vector<Turn> turns;
    std::string source;
    nlohmann::json tags; // dialog-level, optional
};

struct CorpusSplit {
    std::vector<Dialog> train, val, test;
};

// Lowercase, strip punctuation in place (not as separator), split on
// whitespace. Bytes >= 0x80 pass through untouched. Idempotent.
inline std::vector<std::string> normalize_text(const std::string& text) {
    std::vector<std::string> words;
    std::string cur;
    for (unsigned char c : text) {
        if (c < 0x80 && std::isspace(c)) {
            if (!cur.empty()) {
                words.push_back(cur);
                cur.clear();
            }
        } else if (c < 0x80 && !std::isalnum(c)) {
            // punctuation: removed, does not split the word
        } else {
            cur.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : static_cast<char>(c));
        }
    }
    if (!cur.empty()) words.push_back(cur);
    return words;
}

inline std::string join_words(const std::vector<std::string>& words) {
    std::string out;
    for (std::size_t i = 0; i < words.size(); ++i) {
        if (i) out.push_back(' ');
        out += words[i];
    }
    return out;
}

// Invariant checks, used by tests and the generator.
inline bool turn_is_valid(const Turn& t) {
    if (t.words.empty()) return false;
    for (const auto& w : t.words) {
        if (w.empty()) return false;
        for (unsigned char c : w)
            if (c < 0x80 && (!std::isalnum(c) || std::isupper(c))) return false;
    }
    return true;
}

inline bool dialog_is_valid(const Dialog& d) {
    if (d.turns.size() < 3) return false;
    for (std::size_t i = 0; i < d.turns.size(); ++i) {
        if (!turn_is_valid(d.turns[i])) return false;
        if (i > 0 && d.turns[i].speaker == d.turns[i - 1].speaker) return false;
    }
    return true;
}

struct LoadReport {
    std::size_t records_read = 0;
    std::size_t dialogs_loaded = 0;
    std::size_t dropped_short = 0;      // fewer than 3 turns after merging
    std::size_t dropped_empty_turn = 0; // a turn normalized to nothing
    std::size_t turns_merged = 0;
};

namespace detail {

inline Speaker parse_speaker(const nlohmann::json& j, std::size_t line_no) {
    if (j.is_string()) {
        const auto s = j.get<std::string>();
        if (s == "A") return Speaker::A;
        if (s == "B") return Speaker::B;
    }
    throw std::runtime_error("malformed dialog record at line " + std::to_string(line_no) +
                             ": speaker must be \"A\" or \"B\"");
}

} // namespace detail

// One dialog per line:
//   {"id": text, "turns": [{"speaker": "A"|"B", "text": text, "tags": obj?}, ...], "tags": obj?}
// Text is normalized, consecutive same-speaker turns merge, dialogs that end
// up shorter than 3 turns are dropped and counted. A turn that normalizes to
// nothing drops the whole dialog (counted, not fatal). Malformed records are
// fatal and name the line.
inline std::vector<Dialog> load_corpus(const std::string& path, const std::string& source_label,
                                       LoadReport* report = nullptr) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open corpus file: " + path);

    LoadReport rep;
    std::vector<Dialog> dialogs;
    std::string line;
    std::size_t line_no = 0;

    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        ++rep.records_read;

        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error("malformed dialog record at line " + std::to_string(line_no) +
                                     ": " + e.what());
        }
        if (!j.is_object() || !j.contains("id") || !j["id"].is_string() || !j.contains("turns") ||
            !j["turns"].is_array()) {
            throw std::runtime_error("malformed dialog record at line " + std::to_string(line_no) +
                                     ": need {\"id\", \"turns\"}");
        }

        Dialog d;
        d.id = j["id"].get<std::string>();
        d.source = source_label;
        if (j.contains("tags")) d.tags = j["tags"];

        bool empty_turn = false;
        for (const auto& tj : j["turns"]) {
            if (!tj.is_object() || !tj.contains("speaker") || !tj.contains("text") ||
                !tj["text"].is_string()) {
                throw std::runtime_error("malformed dialog record at line " +
                                         std::to_string(line_no) +
                                         ": turn needs {\"speaker\", \"text\"}");
            }
            Turn t;
            t.speaker = detail::parse_speaker(tj["speaker"], line_no);
            t.words = normalize_text(tj["text"].get<std::string>());
            if (tj.contains("tags")) t.tags = tj["tags"];
            if (t.words.empty()) {
                empty_turn = true;
                break;
            }
            d.turns.push_back(std::move(t));
        }
        if (empty_turn) {
            ++rep.dropped_empty_turn;
            continue;
        }

        // merge consecutive same-speaker turns; earlier tag keys win
        std::vector<Turn> merged;
        for (auto& t : d.turns) {
            if (!merged.empty() && merged.back().speaker == t.speaker) {
                auto& dst = merged.back();
                dst.words.insert(dst.words.end(), t.words.begin(), t.words.end());
                if (t.tags.is_object()) {
                    if (!dst.tags.is_object()) dst.tags = nlohmann::json::object();
                    for (auto it = t.tags.begin(); it != t.tags.end(); ++it)
                        if (!dst.tags.contains(it.key())) dst.tags[it.key()] = it.value();
                }
                ++rep.turns_merged;
            } else {
                merged.push_back(std::move(t));
            }
        }
        d.turns = std::move(merged);

        if (d.turns.size() < 3) {
            ++rep.dropped_short;
            continue;
        }
        ++rep.dialogs_loaded;
        dialogs.push_back(std::move(d));
    }

    if (report) *report = rep;
    return dialogs;
}

inline nlohmann::json dialog_to_json(const Dialog& d) {
    nlohmann::json turns = nlohmann::json::array();
    for (const auto& t : d.turns) {
        nlohmann::json tj{{"speaker", std::string(1, speaker_char(t.speaker))},
                          {"text", join_words(t.words)}};
        if (t.tags.is_object() && !t.tags.empty()) tj["tags"] = t.tags;
        turns.push_back(std::move(tj));
    }
    nlohmann::json j{{"id", d.id}, {"turns", std::move(turns)}};
    if (d.tags.is_object() && !d.tags.empty()) j["tags"] = d.tags;
    return j;
}

inline void save_corpus(const std::vector<Dialog>& dialogs, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write corpus file: " + path);
    for (const auto& d : dialogs) out << dialog_to_json(d).dump() << '\n';
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

enum class Scenario { SQ, SEM, SIMPLE };

inline const char* scenario_name(Scenario s) {
    switch (s) {
        case Scenario::SQ: return "SQ";
        case Scenario::SEM: return "SEM";
        default: return "SIMPLE";
    }
}

struct SynthConfig {
    std::size_t n_dialogs = 0;
    double mix_sq = 0.4, mix_sem = 0.4, mix_simple = 0.2; // must sum to 1
    double ambiguity_rate = 0.5; // fraction of SQ/SEM current utterances ending early
    // how often a SEM topic-only request still gets the attribute-level fact
    double sem_answer_noise = 0.1;
    std::vector<std::string> topics = {
        "rome",   "paris",  "london", "berlin",   "madrid", "lisbon", "vienna",
        "prague", "dublin", "oslo",   "stockholm","helsinki","warsaw", "budapest",
        "athens", "cairo",  "tokyo",  "kyoto",    "delhi",  "hanoi",  "sydney",
        "toronto","chicago","boston", "france"};
    std::vector<std::string> attributes = {"economy", "weather",      "museums", "history",
                                           "food",    "music",        "architecture",
                                           "nightlife", "parks",      "harbor"};
    std::vector<std::string> times = {"today",  "tomorrow", "tonight", "soon",
                                      "friday", "saturday", "sunday",  "monday"};
    std::uint64_t seed = 0;

    void validate() const {
        if (std::abs(mix_sq + mix_sem + mix_simple - 1.0) > 1e-9)
            throw std::invalid_argument("scenario mix proportions must sum to 1");
        if (mix_sq < 0 || mix_sem < 0 || mix_simple < 0)
            throw std::invalid_argument("scenario mix proportions must be non-negative");
        if (ambiguity_rate < 0 || ambiguity_rate > 1)
            throw std::invalid_argument("ambiguity_rate must lie in [0,1]");
        if (sem_answer_noise < 0 || sem_answer_noise > 1)
            throw std::invalid_argument("sem_answer_noise must lie in [0,1]");
        if (topics.empty() || attributes.empty() || times.empty())
            throw std::invalid_argument("lexicons must be non-empty");
    }
};

// Template text is frozen; tests/golden/synth_templates.txt must match.
namespace synth {

inline constexpr double kResponseTailRate = 0.3;

inline const char* kSqPrompt = "what are your plans";
inline const char* kSemPrompt = "ask me anything";
inline const char* kCloser = "thanks bye";
inline const char* kResponseTail = "my friend"; // optional continuation of turn 3
inline const char* kSqAck = "sounds nice enjoy your trip";
inline const char* kSqQuestion0 = "what should i do there";

inline std::vector<std::string> sq_statement(const std::string& topic, const std::string& time) {
    return {"i", "will", "visit", topic, time};
}
inline std::vector<std::string> sq_question1(const std::string& attr) {
    return {"how", "is", "the", attr, "there"};
}
inline std::vector<std::string> sq_answer0(const std::string& attr) {
    return {"you", "should", "go", "walking", "and", "see", "the", attr, "there"};
}
inline std::vector<std::string> sq_answer1(const std::string& attr) {
    return {"the", attr, "there", "is", "really", "lovely"};
}
inline std::vector<std::string> sem_request_short(const std::string& topic) {
    return {"tell", "me", "about", topic};
}
inline std::vector<std::string> sem_request_long(const std::string& topic, const std::string& attr) {
    return {"tell", "me", "about", topic, "s", attr};
}
inline std::vector<std::string> sem_topic_fact(const std::string& topic) {
    return {topic, "is", "a", "fine", "place", "with", "a", "long", "history"};
}
inline std::vector<std::string> sem_attr_fact(const std::string& topic, const std::string& attr) {
    return {"people", "say", "the", attr, "of", topic, "has", "seen", "big", "changes", "lately"};
}
inline std::vector<std::string> simple_question(const std::string& topic) {
    return {"what", "is", "the", "capital", "of", topic};
}
// fact phrase keyed by topic; R = "it is" + fact
inline std::vector<std::string> simple_answer(const std::string& topic) {
    return {"it", "is", "the", "capital", "of", topic};
}

} // namespace synth

// Deterministic given seed. Per dialog a fixed number of draws is consumed in
// a fixed order regardless of branch, so per-dialog content depends only on
// (seed, index).
inline std::vector<Dialog> generate_synthetic(const SynthConfig& cfg) {
    cfg.validate();
    std::vector<Dialog> out;
    out.reserve(cfg.n_dialogs);
    Rng rng(cfg.seed);

    auto pick = [&](const std::vector<std::string>& lex, double u) -> const std::string& {
        std::size_t i = static_cast<std::size_t>(u * static_cast<double>(lex.size()));
        if (i >= lex.size()) i = lex.size() - 1;
        return lex[i];
    };

    for (std::size_t n = 0; n < cfg.n_dialogs; ++n) {
        // fixed draw order: scenario, topic, time, attribute, qtype, early, noise, tail
        const double u_scn = rng.real01();
        const double u_topic = rng.real01();
        const double u_time = rng.real01();
        const double u_attr = rng.real01();
        const double u_qtype = rng.real01();
        const double u_early = rng.real01();
        const double u_noise = rng.real01();
        const double u_tail = rng.real01();

        Scenario scn = Scenario::SIMPLE;
        if (u_scn < cfg.mix_sq)
            scn = Scenario::SQ;
        else if (u_scn < cfg.mix_sq + cfg.mix_sem)
            scn = Scenario::SEM;

        const std::string& topic = pick(cfg.topics, u_topic);
        const std::string& time = pick(cfg.times, u_time);
        const std::string& attr = pick(cfg.attributes, u_attr);
        const bool early = u_early < cfg.ambiguity_rate;
        const bool tail = u_tail < synth::kResponseTailRate;

        Dialog d;
        {
            std::ostringstream id;
            id << "synth-" << std::setw(6) << std::setfill('0') << n;
            d.id = id.str();
        }
        d.source = "synthetic";

        auto add_turn = [&](Speaker sp, std::vector<std::string> words, nlohmann::json tags) {
            Turn t;
            t.speaker = sp;
            t.words = std::move(words);
            t.tags = std::move(tags);
            d.turns.push_back(std::move(t));
        };
        const nlohmann::json scn_tag{{"scenario", scenario_name(scn)}};

        if (scn == Scenario::SQ) {
            auto cu = synth::sq_statement(topic, time);
            const int early_end = static_cast<int>(cu.size()) - 1;
            const bool qtype1 = u_qtype < 0.5;
            if (!early) {
                auto q = qtype1 ? synth::sq_question1(attr)
                                : normalize_text(synth::kSqQuestion0);
                cu.insert(cu.end(), q.begin(), q.end());
            }
            std::vector<std::string> resp =
                early ? normalize_text(synth::kSqAck)
                      : (qtype1 ? synth::sq_answer1(attr) : synth::sq_answer0(attr));
            if (tail) {
                auto t = normalize_text(synth::kResponseTail);
                resp.insert(resp.end(), t.begin(), t.end());
            }
            add_turn(Speaker::B, normalize_text(synth::kSqPrompt), scn_tag);
            add_turn(Speaker::A, cu,
                     nlohmann::json{{"scenario", "SQ"},
                                    {"early_end_index", early_end},
                                    {"question_final", !early}});
            add_turn(Speaker::B, resp, scn_tag);
            add_turn(Speaker::A, normalize_text(synth::kCloser), scn_tag);
        } else if (scn == Scenario::SEM) {
            auto cu = early ? synth::sem_request_short(topic)
                            : synth::sem_request_long(topic, attr);
            const int early_end = 3; // index of the topic word
            const bool attr_answer = !early || u_noise < cfg.sem_answer_noise;
            std::vector<std::string> resp = attr_answer ? synth::sem_attr_fact(topic, attr)
                                                        : synth::sem_topic_fact(topic);
            if (tail) {
                auto t = normalize_text(synth::kResponseTail);
                resp.insert(resp.end(), t.begin(), t.end());
            }
            add_turn(Speaker::B, normalize_text(synth::kSemPrompt), scn_tag);
            add_turn(Speaker::A, cu,
                     nlohmann::json{{"scenario", "SEM"},
                                    {"early_end_index", early_end},
                                    {"question_final", false}});
            add_turn(Speaker::B, resp, scn_tag);
            add_turn(Speaker::A, normalize_text(synth::kCloser), scn_tag);
        } else {
            add_turn(Speaker::B, normalize_text(synth::kSemPrompt), scn_tag);
            add_turn(Speaker::A, synth::simple_question(topic),
                     nlohmann::json{{"scenario", "SIMPLE"}, {"question_final", true}});
            add_turn(Speaker::B, synth::simple_answer(topic), scn_tag);
        }

        out.push_back(std::move(d));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

// Seeded shuffle then contiguous partition; val/test sizes floor-allocated,
// remainder goes to train.
inline CorpusSplit split_corpus(std::vector<Dialog> dialogs, const std::array<double, 3>& ratios,
                                std::uint64_t seed) {
    double sum = ratios[0] + ratios[1] + ratios[2];
    if (ratios[0] < 0 || ratios[1] < 0 || ratios[2] < 0 || std::abs(sum - 1.0) > 1e-9)
        throw std::invalid_argument("split ratios must be non-negative and sum to 1");
    std::size_t nonzero = 0;
    for (double r : ratios)
        if (r > 0) ++nonzero;
    if (dialogs.size() < nonzero)
        throw std::invalid_argument("fewer dialogs than nonzero split partitions");

    Rng rng(seed);
    rng.shuffle(dialogs);

    const std::size_t n = dialogs.size();
    const std::size_t n_val = static_cast<std::size_t>(static_cast<double>(n) * ratios[1]);
    const std::size_t n_test = static_cast<std::size_t>(static_cast<double>(n) * ratios[2]);
    const std::size_t n_train = n - n_val - n_test;

    CorpusSplit split;
    split.train.assign(dialogs.begin(), dialogs.begin() + static_cast<std::ptrdiff_t>(n_train));
    split.val.assign(dialogs.begin() + static_cast<std::ptrdiff_t>(n_train),
                     dialogs.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    split.test.assign(dialogs.begin() + static_cast<std::ptrdiff_t>(n_train + n_val),
                      dialogs.end());
    return split;
}

} // namespace rcturn
