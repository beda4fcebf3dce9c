#pragma once

// Trace rendering: a two-column TSV and a dependency-free SVG bar chart with
// the words on the x axis, an optional threshold line and the ground-truth
// end marked. Output is byte-deterministic for identical input.

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rcturn/model.hpp"

namespace rcturn {

inline std::string trace_tsv(const TsTrace& trace) {
    if (trace.probs.empty()) throw std::invalid_argument("cannot render an empty trace");
    std::ostringstream os;
    for (std::size_t i = 0; i < trace.words.size(); ++i) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.6f", trace.probs[i]);
        os << trace.words[i] << '\t' << buf << '\n';
    }
    return os.str();
}

namespace detail {

inline std::string svg_num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

inline std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out.push_back(c);
        }
    }
    return out;
}

} // namespace detail

// One or two series over the same words (the two-model contrast). threshold
// < 0 omits the line.
inline std::string trace_svg(const std::vector<const TsTrace*>& traces, double threshold,
                             const std::vector<std::string>& labels) {
    if (traces.empty() || traces.size() > 2)
        throw std::invalid_argument("trace_svg renders one or two series");
    for (const auto* t : traces)
        if (!t || t->probs.empty()) throw std::invalid_argument("cannot render an empty trace");
    if (traces.size() == 2 && traces[0]->words != traces[1]->words)
        throw std::invalid_argument("overlayed traces must cover the same words");
    if (labels.size() != traces.size())
        throw std::invalid_argument("one label per series required");

    const auto& words = traces[0]->words;
    const int n = static_cast<int>(words.size());
    const int series = static_cast<int>(traces.size());
    const double bar_w = 22.0, gap = 10.0, left = 46.0, top = 18.0;
    const double plot_h = 160.0, label_h = 74.0;
    const double group_w = bar_w * series + gap;
    const double width = left + group_w * n + 14.0;
    const double height = top + plot_h + label_h;
    const char* colors[2] = {"#4878cf", "#d65f5f"};

    using detail::svg_num;
    using detail::xml_escape;
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << svg_num(width) << "\" height=\""
       << svg_num(height) << "\" viewBox=\"0 0 " << svg_num(width) << ' ' << svg_num(height)
       << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";

    // y axis with 0, 0.5, 1 gridlines
    for (double gv : {0.0, 0.5, 1.0}) {
        const double y = top + plot_h * (1.0 - gv);
        os << "<line x1=\"" << svg_num(left - 4) << "\" y1=\"" << svg_num(y) << "\" x2=\""
           << svg_num(width - 8) << "\" y2=\"" << svg_num(y)
           << "\" stroke=\"#cccccc\" stroke-width=\"1\"/>\n";
        os << "<text x=\"" << svg_num(left - 8) << "\" y=\"" << svg_num(y + 4)
           << "\" font-size=\"11\" text-anchor=\"end\" font-family=\"sans-serif\">" << svg_num(gv)
           << "</text>\n";
    }

    for (int i = 0; i < n; ++i) {
        for (int s = 0; s < series; ++s) {
            const double p = traces[static_cast<std::size_t>(s)]->probs[static_cast<std::size_t>(i)];
            const double h = plot_h * p;
            const double x = left + group_w * i + bar_w * s;
            os << "<rect x=\"" << svg_num(x) << "\" y=\"" << svg_num(top + plot_h - h)
               << "\" width=\"" << svg_num(bar_w - 2) << "\" height=\"" << svg_num(h)
               << "\" fill=\"" << colors[s] << "\"/>\n";
        }
        const double cx = left + group_w * i + (group_w - gap) / 2.0;
        const bool is_end = i == traces[0]->end_index;
        os << "<text x=\"" << svg_num(cx) << "\" y=\"" << svg_num(top + plot_h + 12)
           << "\" font-size=\"11\" font-family=\"sans-serif\" text-anchor=\"end\""
           << (is_end ? " font-weight=\"bold\"" : "") << " transform=\"rotate(-45 " << svg_num(cx)
           << ' ' << svg_num(top + plot_h + 12) << ")\">" << xml_escape(words[static_cast<std::size_t>(i)])
           << "</text>\n";
        if (is_end) { // ground-truth end marker
            os << "<polygon points=\"" << svg_num(cx - 5) << ',' << svg_num(top + plot_h + 16)
               << ' ' << svg_num(cx + 5) << ',' << svg_num(top + plot_h + 16) << ' ' << svg_num(cx)
               << ',' << svg_num(top + plot_h + 8) << "\" fill=\"#2c2c2c\"/>\n";
        }
    }

    if (threshold >= 0.0) {
        const double y = top + plot_h * (1.0 - threshold);
        os << "<line x1=\"" << svg_num(left) << "\" y1=\"" << svg_num(y) << "\" x2=\""
           << svg_num(width - 8) << "\" y2=\"" << svg_num(y)
           << "\" stroke=\"#444444\" stroke-width=\"1\" stroke-dasharray=\"5,3\"/>\n";
    }

    for (int s = 0; s < series; ++s) {
        const double y = top + 14.0 * s;
        os << "<rect x=\"" << svg_num(left + 6) << "\" y=\"" << svg_num(y - 9)
           << "\" width=\"10\" height=\"10\" fill=\"" << colors[s] << "\"/>\n";
        os << "<text x=\"" << svg_num(left + 20) << "\" y=\"" << svg_num(y)
           << "\" font-size=\"11\" font-family=\"sans-serif\">"
           << xml_escape(labels[static_cast<std::size_t>(s)]) << "</text>\n";
    }

    os << "</svg>\n";
    return os.str();
}

inline std::string trace_svg(const TsTrace& trace, double threshold, const std::string& label) {
    return trace_svg(std::vector<const TsTrace*>{&trace}, threshold, {label});
}

inline void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write file: " + path);
    out << content;
}

} // namespace rcturn
