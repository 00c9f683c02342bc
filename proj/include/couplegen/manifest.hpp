#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace couplegen::io {

// Every CLI run ends by writing one of these next to its artifacts: enough
// to reconstruct the run (config snapshot, seed, code version, determinism
// state) and to audit what it produced (path + content digest per output,
// metric values, network-evaluation count, wall time). Written atomically.
struct RunManifest {
    std::string command;             // subcommand plus canonical flags
    std::string config_json;         // canonical validated config snapshot
    std::uint64_t seed = 0;
    std::string code_version;        // source revision the binary was built from
    bool deterministic = false;      // deterministic-mode toggle state
    int threads = 1;                 // worker count in effect

    struct Output {
        std::string path;
        std::string sha256;
        std::uint64_t bytes = 0;
    };
    std::vector<Output> outputs;
    std::map<std::string, double> metrics;
    std::map<std::string, std::string> notes;  // protocol digests, free-form
    std::int64_t nfe = -1;                     // per-sample network evaluations; -1 = n/a
    double wall_seconds = 0.0;

    // Hashes the file now and appends it to outputs.
    void add_output(const std::string& path);

    void write(const std::string& path) const;  // atomic JSON document
    static RunManifest read(const std::string& path);
};

// Source revision baked in at build time ("unknown" outside a checkout).
std::string code_version();

}  // namespace couplegen::io
