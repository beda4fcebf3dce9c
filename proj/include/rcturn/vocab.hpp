#pragma once

// Word-level vocabulary with reserved PAD/UNK/TS ids. TS is the only special
// in-sequence token; speaker identity and response role are additive
// embedding channels handled by the model, not vocabulary entries.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "rcturn/corpus.hpp"
#include "rcturn/hash.hpp"
#include "rcturn/version.hpp"

namespace rcturn {

using TokenId = std::int32_t;

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kUnkId = 1;
inline constexpr TokenId kTsId = 2;
inline constexpr TokenId kNumReserved = 3;

inline constexpr const char* kPadSurface = "⟨pad⟩";
inline constexpr const char* kUnkSurface = "⟨unk⟩";
inline constexpr const char* kTsSurface = "⟨ts⟩";

class Vocab {
public:
    Vocab() {
        entries_ = {{kPadSurface, 0}, {kUnkSurface, 0}, {kTsSurface, 0}};
        rebuild_index();
    }

    // Frequency-sorted (desc), ties broken lexicographically, truncated to
    // max_size including the reserved ids.
    static Vocab build(const std::vector<Dialog>& dialogs, std::size_t min_count,
                       std::size_t max_size) {
        if (min_count < 1) throw std::invalid_argument("min_count must be >= 1");
        if (max_size <= static_cast<std::size_t>(kNumReserved))
            throw std::invalid_argument("max_size must exceed the reserved token count");

        std::map<std::string, std::uint64_t> freq;
        for (const auto& d : dialogs)
            for (const auto& t : d.turns)
                for (const auto& w : t.words) ++freq[w];

        std::vector<std::pair<std::string, std::uint64_t>> items;
        for (auto& [w, c] : freq)
            if (c >= min_count) items.emplace_back(w, c);
        std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
            if (a.second != b.second) return a.second > b.second;
            return a.first < b.first;
        });
        if (items.size() > max_size - kNumReserved) items.resize(max_size - kNumReserved);

        Vocab v;
        for (auto& [w, c] : items) v.entries_.emplace_back(w, c);
        v.rebuild_index();
        return v;
    }

    std::size_t size() const { return entries_.size(); }

    TokenId id_of(const std::string& word) const {
        auto it = index_.find(word);
        return it == index_.end() ? kUnkId : it->second;
    }

    const std::string& word_of(TokenId id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= entries_.size())
            throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
        return entries_[static_cast<std::size_t>(id)].first;
    }

    std::vector<TokenId> encode(const std::vector<std::string>& words) const {
        std::vector<TokenId> ids;
        ids.reserve(words.size());
        for (const auto& w : words) ids.push_back(id_of(w));
        return ids;
    }

    std::vector<std::string> decode(const std::vector<TokenId>& ids) const {
        std::vector<std::string> words;
        words.reserve(ids.size());
        for (TokenId id : ids) words.push_back(word_of(id));
        return words;
    }

    // UTF-8 text: header "rcturn-vocab <version> <size>", then per entry
    // "<id>\t<word>\t<count>", reserved tokens first.
    std::string serialize() const {
        std::ostringstream os;
        os << "rcturn-vocab " << kVocabFormatVersion << ' ' << entries_.size() << '\n';
        for (std::size_t i = 0; i < entries_.size(); ++i)
            os << i << '\t' << entries_[i].first << '\t' << entries_[i].second << '\n';
        return os.str();
    }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write vocabulary file: " + path);
        out << serialize();
    }

    static Vocab load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw std::runtime_error("cannot open vocabulary file: " + path);
        std::string header;
        if (!std::getline(in, header)) throw std::runtime_error("empty vocabulary file: " + path);
        std::istringstream hs(header);
        std::string tag;
        int version = 0;
        std::size_t size = 0;
        hs >> tag >> version >> size;
        if (tag != "rcturn-vocab" || version != kVocabFormatVersion)
            throw std::runtime_error("unsupported vocabulary header: " + header);

        Vocab v;
        v.entries_.clear();
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const auto t1 = line.find('\t');
            const auto t2 = line.find('\t', t1 + 1);
            if (t1 == std::string::npos || t2 == std::string::npos)
                throw std::runtime_error("malformed vocabulary entry: " + line);
            const std::size_t id = std::stoul(line.substr(0, t1));
            if (id != v.entries_.size())
                throw std::runtime_error("vocabulary ids must be dense and ordered");
            v.entries_.emplace_back(line.substr(t1 + 1, t2 - t1 - 1),
                                    std::stoull(line.substr(t2 + 1)));
        }
        if (v.entries_.size() != size)
            throw std::runtime_error("vocabulary size does not match header");
        if (v.entries_.size() < static_cast<std::size_t>(kNumReserved) ||
            v.entries_[0].first != kPadSurface || v.entries_[1].first != kUnkSurface ||
            v.entries_[2].first != kTsSurface)
            throw std::runtime_error("vocabulary reserved tokens missing or reordered");
        v.rebuild_index();
        return v;
    }

    // Identity hash carried by checkpoints.
    std::uint64_t hash() const { return fnv1a64(serialize()); }

    std::uint64_t count_of(TokenId id) const {
        return entries_.at(static_cast<std::size_t>(id)).second;
    }

private:
    void rebuild_index() {
        index_.clear();
        for (std::size_t i = 0; i < entries_.size(); ++i)
            index_[entries_[i].first] = static_cast<TokenId>(i);
    }

    std::vector<std::pair<std::string, std::uint64_t>> entries_; // id -> (word, count)
    std::unordered_map<std::string, TokenId> index_;
};

} // namespace rcturn
