#pragma once

// Per-stage run manifests: invocation, seed, input/output hashes, tool
// version. Timing and timestamps live in a "volatile" member so two runs of
// the same invocation can be compared bit-for-bit after dropping it.

#include <chrono>
#include <ctime>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "rcturn/hash.hpp"
#include "rcturn/version.hpp"

namespace rcturn {

struct Manifest {
    std::string command;
    std::vector<std::string> argv;
    std::uint64_t seed = 0;
    std::map<std::string, std::string> inputs;  // path -> fnv1a64 hex
    std::map<std::string, std::string> outputs; // path -> fnv1a64 hex
    nlohmann::json extra = nlohmann::json::object();

    void add_input(const std::string& path) { inputs[path] = hex64(hash_file(path)); }
    void add_output(const std::string& path) { outputs[path] = hex64(hash_file(path)); }

    nlohmann::json to_json(double duration_ms) const {
        const auto now = std::chrono::system_clock::now();
        const std::time_t tt = std::chrono::system_clock::to_time_t(now);
        char stamp[32];
        std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&tt));
        return nlohmann::json{{"format", "rcturn-manifest"},
                              {"version", kVersion},
                              {"command", command},
                              {"argv", argv},
                              {"seed", seed},
                              {"inputs", inputs},
                              {"outputs", outputs},
                              {"extra", extra},
                              {"volatile", {{"timestamp", stamp}, {"duration_ms", duration_ms}}}};
    }

    void save(const std::string& path, double duration_ms) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write manifest: " + path);
        out << to_json(duration_ms).dump(2) << '\n';
    }
};

// Comparison view: everything except the volatile section.
inline nlohmann::json manifest_comparable(const nlohmann::json& manifest) {
    nlohmann::json j = manifest;
    j.erase("volatile");
    return j;
}

inline nlohmann::json load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open manifest: " + path);
    nlohmann::json j;
    in >> j;
    return j;
}

} // namespace rcturn
