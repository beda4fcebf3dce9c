#pragma once

// (H, CU, R) sample extraction and serialization to model-ready sequences.
// Baseline order: H TS CU TS. Response-conditioned order: R TS H TS CU TS,
// with the loss masked to CU word tokens plus CU's terminating TS. Every
// turn present in a serialization ends with exactly one TS.

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rcturn/corpus.hpp"
#include "rcturn/version.hpp"
#include "rcturn/vocab.hpp"

namespace rcturn {

struct Sample {
    std::string dialog_id;
    int cu_index = 0; // turn index of CU within the dialog
    std::vector<Turn> history;
    Turn current;
    Turn response;
    nlohmann::json tags; // CU turn tags, with dialog tags merged underneath
};

enum class Variant { baseline, rc };

inline const char* variant_name(Variant v) { return v == Variant::baseline ? "baseline" : "rc"; }

inline Variant parse_variant(const std::string& s) {
    if (s == "baseline") return Variant::baseline;
    if (s == "rc") return Variant::rc;
    throw std::invalid_argument("unknown variant: " + s + " (expected baseline|rc)");
}

struct EncodedSequence {
    std::string dialog_id;
    int cu_index = 0;
    std::vector<TokenId> token_ids;
    std::vector<std::uint8_t> speaker_ids;    // 0 = A, 1 = B
    std::vector<std::uint8_t> response_flags; // true on R words and R's TS
    std::vector<std::uint8_t> loss_mask;      // loss_mask[0] is always false
    std::vector<std::int32_t> cu_word_positions;
    std::int32_t cu_end_position = -1; // index of the TS terminating CU

    std::size_t length() const { return token_ids.size(); }

    bool operator==(const EncodedSequence& o) const {
        return dialog_id == o.dialog_id && cu_index == o.cu_index && token_ids == o.token_ids &&
               speaker_ids == o.speaker_ids && response_flags == o.response_flags &&
               loss_mask == o.loss_mask && cu_word_positions == o.cu_word_positions &&
               cu_end_position == o.cu_end_position;
    }
};

// Sliding window with step 1: the window's last turn is R, the one before it
// CU, everything earlier is H. A dialog with T turns yields
// max(0, T - window_size + 1) samples.
inline std::vector<Sample> extract_samples(const Dialog& dialog, int window_size = 3) {
    if (window_size < 3) throw std::invalid_argument("window_size must be >= 3");
    std::vector<Sample> samples;
    const int t = static_cast<int>(dialog.turns.size());
    for (int start = 0; start + window_size <= t; ++start) {
        Sample s;
        s.dialog_id = dialog.id;
        s.cu_index = start + window_size - 2;
        s.history.assign(dialog.turns.begin() + start,
                         dialog.turns.begin() + s.cu_index);
        s.current = dialog.turns[static_cast<std::size_t>(s.cu_index)];
        s.response = dialog.turns[static_cast<std::size_t>(s.cu_index + 1)];
        if (dialog.tags.is_object()) s.tags = dialog.tags;
        if (s.current.tags.is_object()) {
            if (!s.tags.is_object()) s.tags = nlohmann::json::object();
            for (auto it = s.current.tags.begin(); it != s.current.tags.end(); ++it)
                s.tags[it.key()] = it.value();
        }
        samples.push_back(std::move(s));
    }
    return samples;
}

inline std::vector<Sample> extract_samples(const std::vector<Dialog>& dialogs,
                                           int window_size = 3) {
    std::vector<Sample> all;
    for (const auto& d : dialogs) {
        auto s = extract_samples(d, window_size);
        all.insert(all.end(), std::make_move_iterator(s.begin()),
                   std::make_move_iterator(s.end()));
    }
    return all;
}

enum class LossScope { full_lm, cu_only };

namespace detail {

struct SerialSegment {
    const std::vector<std::string>* words;
    Speaker speaker;
    bool is_response;
    bool is_cu;
    bool terminate; // emit the turn-final TS
};

// Single serializer behind both encodings: baseline and rc differ only in
// segment order and presence of R.
inline EncodedSequence serialize_segments(const std::vector<SerialSegment>& segments,
                                          const Vocab& vocab, LossScope scope,
                                          const std::string& dialog_id, int cu_index,
                                          std::size_t max_len) {
    EncodedSequence enc;
    enc.dialog_id = dialog_id;
    enc.cu_index = cu_index;

    auto push = [&](TokenId id, Speaker sp, bool resp, bool cu_target) {
        const std::size_t pos = enc.token_ids.size();
        enc.token_ids.push_back(id);
        enc.speaker_ids.push_back(static_cast<std::uint8_t>(sp));
        enc.response_flags.push_back(resp ? 1 : 0);
        bool in_loss = scope == LossScope::full_lm ? pos >= 1 : cu_target;
        if (pos == 0) in_loss = false;
        enc.loss_mask.push_back(in_loss ? 1 : 0);
    };

    for (const auto& seg : segments) {
        for (const auto& w : *seg.words) {
            if (seg.is_cu)
                enc.cu_word_positions.push_back(static_cast<std::int32_t>(enc.token_ids.size()));
            push(vocab.id_of(w), seg.speaker, seg.is_response, seg.is_cu);
        }
        if (seg.terminate) {
            if (seg.is_cu) enc.cu_end_position = static_cast<std::int32_t>(enc.token_ids.size());
            push(kTsId, seg.speaker, seg.is_response, seg.is_cu);
        }
    }

    if (max_len > 0 && enc.token_ids.size() > max_len)
        throw std::runtime_error("encoded sequence for sample " + dialog_id + ":" +
                                 std::to_string(cu_index) + " has length " +
                                 std::to_string(enc.token_ids.size()) +
                                 " exceeding model max length " + std::to_string(max_len));
    return enc;
}

} // namespace detail

// H TS CU TS (no R). With full_lm_loss every position from 1 on is a target,
// matching ordinary LM finetuning; otherwise targets are restricted to CU.
inline EncodedSequence encode_baseline(const Sample& s, const Vocab& vocab,
                                       bool full_lm_loss = true, std::size_t max_len = 0) {
    std::vector<detail::SerialSegment> segs;
    for (const auto& h : s.history) segs.push_back({&h.words, h.speaker, false, false, true});
    segs.push_back({&s.current.words, s.current.speaker, false, true, true});
    return detail::serialize_segments(segs, vocab,
                                      full_lm_loss ? LossScope::full_lm : LossScope::cu_only,
                                      s.dialog_id, s.cu_index, max_len);
}

// R TS H TS CU TS with loss over CU only; response flags cover R's words and
// R's TS. The first counted prediction is the first CU word, made from H's
// terminating TS.
inline EncodedSequence encode_rc(const Sample& s, const Vocab& vocab, std::size_t max_len = 0) {
    std::vector<detail::SerialSegment> segs;
    segs.push_back({&s.response.words, s.response.speaker, true, false, true});
    for (const auto& h : s.history) segs.push_back({&h.words, h.speaker, false, false, true});
    segs.push_back({&s.current.words, s.current.speaker, false, true, true});
    return detail::serialize_segments(segs, vocab, LossScope::cu_only, s.dialog_id, s.cu_index,
                                      max_len);
}

// rc serialization with R removed entirely. Equals encode_baseline in
// CU-only mode token for token; exists so the shared-code-path property is
// testable and for wiring a baseline model into response-conditioned
// interfaces.
inline EncodedSequence encode_rc_without_response(const Sample& s, const Vocab& vocab,
                                                  std::size_t max_len = 0) {
    std::vector<detail::SerialSegment> segs;
    for (const auto& h : s.history) segs.push_back({&h.words, h.speaker, false, false, true});
    segs.push_back({&s.current.words, s.current.speaker, false, true, true});
    return detail::serialize_segments(segs, vocab, LossScope::cu_only, s.dialog_id, s.cu_index,
                                      max_len);
}

inline EncodedSequence encode(const Sample& s, const Vocab& vocab, Variant variant,
                              bool baseline_full_lm = true, std::size_t max_len = 0) {
    return variant == Variant::baseline ? encode_baseline(s, vocab, baseline_full_lm, max_len)
                                        : encode_rc(s, vocab, max_len);
}

// ---------------------------------------------------------------------------
// Prepared-sample cache: versioned binary, little-endian ids, packed bits.
// On-the-fly encoding must produce identical records; the cache is only an
// optimization.
// ---------------------------------------------------------------------------

namespace detail {

inline void write_u32le(std::ostream& out, std::uint32_t v) {
    char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                 static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    out.write(b, 4);
}

inline std::uint32_t read_u32le(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw std::runtime_error("sample cache truncated");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void write_bits(std::ostream& out, const std::vector<std::uint8_t>& bits) {
    std::uint8_t acc = 0;
    int fill = 0;
    for (std::uint8_t b : bits) {
        if (b) acc |= static_cast<std::uint8_t>(1u << fill);
        if (++fill == 8) {
            out.put(static_cast<char>(acc));
            acc = 0;
            fill = 0;
        }
    }
    if (fill) out.put(static_cast<char>(acc));
}

inline std::vector<std::uint8_t> read_bits(std::istream& in, std::size_t n) {
    std::vector<std::uint8_t> bits(n, 0);
    const std::size_t n_bytes = (n + 7) / 8;
    std::vector<char> raw(n_bytes);
    in.read(raw.data(), static_cast<std::streamsize>(n_bytes));
    if (!in) throw std::runtime_error("sample cache truncated");
    for (std::size_t i = 0; i < n; ++i)
        bits[i] = (static_cast<std::uint8_t>(raw[i / 8]) >> (i % 8)) & 1u;
    return bits;
}

} // namespace detail

inline constexpr char kCacheMagic[8] = {'R', 'C', 'T', 'C', 'A', 'C', 'H', 'E'};

inline void save_sample_cache(const std::vector<EncodedSequence>& records,
                              const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write sample cache: " + path);
    out.write(kCacheMagic, 8);
    detail::write_u32le(out, kSampleCacheFormatVersion);
    detail::write_u32le(out, static_cast<std::uint32_t>(records.size()));
    for (const auto& r : records) {
        detail::write_u32le(out, static_cast<std::uint32_t>(r.dialog_id.size()));
        out.write(r.dialog_id.data(), static_cast<std::streamsize>(r.dialog_id.size()));
        detail::write_u32le(out, static_cast<std::uint32_t>(r.cu_index));
        detail::write_u32le(out, static_cast<std::uint32_t>(r.token_ids.size()));
        for (TokenId id : r.token_ids) detail::write_u32le(out, static_cast<std::uint32_t>(id));
        detail::write_bits(out, r.speaker_ids);
        detail::write_bits(out, r.response_flags);
        detail::write_bits(out, r.loss_mask);
        detail::write_u32le(out, static_cast<std::uint32_t>(r.cu_word_positions.size()));
        for (auto p : r.cu_word_positions) detail::write_u32le(out, static_cast<std::uint32_t>(p));
        detail::write_u32le(out, static_cast<std::uint32_t>(r.cu_end_position));
    }
    if (!out) throw std::runtime_error("failed while writing sample cache: " + path);
}

inline std::vector<EncodedSequence> load_sample_cache(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open sample cache: " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::string(magic, 8) != std::string(kCacheMagic, 8))
        throw std::runtime_error("not a sample cache file: " + path);
    const auto version = detail::read_u32le(in);
    if (version != kSampleCacheFormatVersion)
        throw std::runtime_error("unsupported sample cache version " + std::to_string(version));
    const auto count = detail::read_u32le(in);
    std::vector<EncodedSequence> records;
    records.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        EncodedSequence r;
        const auto id_len = detail::read_u32le(in);
        r.dialog_id.resize(id_len);
        in.read(r.dialog_id.data(), id_len);
        r.cu_index = static_cast<int>(detail::read_u32le(in));
        const auto n = detail::read_u32le(in);
        r.token_ids.resize(n);
        for (auto& t : r.token_ids) t = static_cast<TokenId>(detail::read_u32le(in));
        r.speaker_ids = detail::read_bits(in, n);
        r.response_flags = detail::read_bits(in, n);
        r.loss_mask = detail::read_bits(in, n);
        const auto npos = detail::read_u32le(in);
        r.cu_word_positions.resize(npos);
        for (auto& p : r.cu_word_positions) p = static_cast<std::int32_t>(detail::read_u32le(in));
        r.cu_end_position = static_cast<std::int32_t>(detail::read_u32le(in));
        if (!in) throw std::runtime_error("sample cache truncated");
        records.push_back(std::move(r));
    }
    return records;
}

} // namespace rcturn
