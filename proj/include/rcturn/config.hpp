#pragma once

// Flat "key = value" configuration files, UTF-8, '#' comments. Unknown keys
// are errors so typos cannot silently change an experiment.

#include <array>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rcturn/corpus.hpp"
#include "rcturn/model.hpp"
#include "rcturn/training.hpp"

namespace rcturn {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline std::map<std::string, std::string> parse_kv_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file: " + path);
    std::map<std::string, std::string> kv;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const std::string t = trim(line);
        if (t.empty()) continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                     ": expected key = value");
        const std::string key = trim(t.substr(0, eq));
        const std::string value = trim(t.substr(eq + 1));
        if (key.empty())
            throw std::runtime_error(path + ":" + std::to_string(line_no) + ": empty key");
        if (kv.count(key))
            throw std::runtime_error(path + ":" + std::to_string(line_no) + ": duplicate key " +
                                     key);
        kv[key] = value;
    }
    return kv;
}

class KvConfig {
public:
    KvConfig(std::map<std::string, std::string> kv, std::string origin)
        : kv_(std::move(kv)), origin_(std::move(origin)) {}

    static KvConfig from_file(const std::string& path) { return {parse_kv_file(path), path}; }

    bool has(const std::string& key) const { return kv_.count(key) > 0; }

    std::string get_str(const std::string& key, const std::string& fallback) {
        used_.insert(key);
        const auto it = kv_.find(key);
        return it == kv_.end() ? fallback : it->second;
    }
    long long get_int(const std::string& key, long long fallback) {
        used_.insert(key);
        const auto it = kv_.find(key);
        if (it == kv_.end()) return fallback;
        try {
            std::size_t pos = 0;
            const long long v = std::stoll(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("trailing characters");
            return v;
        } catch (const std::exception&) {
            throw std::runtime_error(origin_ + ": key " + key + " is not an integer: " +
                                     it->second);
        }
    }
    double get_real(const std::string& key, double fallback) {
        used_.insert(key);
        const auto it = kv_.find(key);
        if (it == kv_.end()) return fallback;
        try {
            std::size_t pos = 0;
            const double v = std::stod(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("trailing characters");
            return v;
        } catch (const std::exception&) {
            throw std::runtime_error(origin_ + ": key " + key + " is not a number: " + it->second);
        }
    }
    std::vector<std::string> get_words(const std::string& key,
                                       const std::vector<std::string>& fallback) {
        used_.insert(key);
        const auto it = kv_.find(key);
        if (it == kv_.end()) return fallback;
        std::vector<std::string> out;
        std::istringstream is(it->second);
        std::string w;
        while (std::getline(is, w, ',')) {
            const std::string t = trim(w);
            if (!t.empty()) out.push_back(t);
        }
        return out;
    }

    // Call after reading every supported key.
    void reject_unknown() const {
        for (const auto& [k, v] : kv_)
            if (!used_.count(k))
                throw std::runtime_error(origin_ + ": unknown configuration key: " + k);
    }

private:
    std::map<std::string, std::string> kv_;
    std::string origin_;
    std::set<std::string> used_;
};

inline SynthConfig synth_config_from_file(const std::string& path) {
    SynthConfig cfg;
    auto c = KvConfig::from_file(path);
    cfg.n_dialogs = static_cast<std::size_t>(c.get_int("n_dialogs", 0));
    cfg.mix_sq = c.get_real("mix_sq", cfg.mix_sq);
    cfg.mix_sem = c.get_real("mix_sem", cfg.mix_sem);
    cfg.mix_simple = c.get_real("mix_simple", cfg.mix_simple);
    cfg.ambiguity_rate = c.get_real("ambiguity_rate", cfg.ambiguity_rate);
    cfg.sem_answer_noise = c.get_real("sem_answer_noise", cfg.sem_answer_noise);
    cfg.topics = c.get_words("topics", cfg.topics);
    cfg.attributes = c.get_words("attributes", cfg.attributes);
    cfg.times = c.get_words("times", cfg.times);
    cfg.seed = static_cast<std::uint64_t>(c.get_int("seed", 0));
    c.reject_unknown();
    return cfg;
}

inline ModelConfig model_config_from_file(const std::string& path, int vocab_size) {
    ModelConfig cfg;
    cfg.vocab_size = vocab_size;
    auto c = KvConfig::from_file(path);
    cfg.d_model = static_cast<int>(c.get_int("d_model", cfg.d_model));
    cfg.n_layers = static_cast<int>(c.get_int("n_layers", cfg.n_layers));
    cfg.n_heads = static_cast<int>(c.get_int("n_heads", cfg.n_heads));
    cfg.d_ff = static_cast<int>(c.get_int("d_ff", cfg.d_ff));
    cfg.max_seq_len = static_cast<int>(c.get_int("max_seq_len", cfg.max_seq_len));
    cfg.dropout_rate = c.get_real("dropout_rate", cfg.dropout_rate);
    cfg.seed = static_cast<std::uint64_t>(c.get_int("seed", 0));
    c.reject_unknown();
    return cfg;
}

inline TrainConfig train_config_from_file(const std::string& path) {
    TrainConfig cfg;
    auto c = KvConfig::from_file(path);
    cfg.variant = parse_variant(c.get_str("variant", variant_name(cfg.variant)));
    cfg.batch_size = static_cast<int>(c.get_int("batch_size", cfg.batch_size));
    cfg.max_steps = static_cast<int>(c.get_int("max_steps", cfg.max_steps));
    cfg.eval_interval = static_cast<int>(c.get_int("eval_interval", cfg.eval_interval));
    cfg.patience = static_cast<int>(c.get_int("patience", cfg.patience));
    cfg.learning_rate = c.get_real("learning_rate", cfg.learning_rate);
    cfg.warmup_steps = static_cast<int>(c.get_int("warmup_steps", cfg.warmup_steps));
    cfg.gradient_clip_norm = c.get_real("gradient_clip_norm", cfg.gradient_clip_norm);
    cfg.seed = static_cast<std::uint64_t>(c.get_int("seed", 0));
    c.reject_unknown();
    return cfg;
}

} // namespace rcturn
