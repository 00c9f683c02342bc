#include "couplegen/manifest.hpp"

#include <json.hpp>

#include <filesystem>
#include <stdexcept>

#include "couplegen/core_types.hpp"
#include "couplegen/serialize.hpp"

#ifndef COUPLEGEN_GIT_REV
#define COUPLEGEN_GIT_REV "unknown"
#endif

namespace couplegen::io {

using nlohmann::json;

std::string code_version() { return COUPLEGEN_GIT_REV; }

void RunManifest::add_output(const std::string& path) {
    Output o;
    o.path = path;
    o.sha256 = sha256_file(path);
    o.bytes = std::uint64_t(std::filesystem::file_size(path));
    outputs.push_back(std::move(o));
}

void RunManifest::write(const std::string& path) const {
    json j;
    j["schema_version"] = 1;
    j["command"] = command;
    j["config"] = config_json.empty() ? json::object() : json::parse(config_json);
    j["seed"] = seed;
    j["code_version"] = code_version;
    j["deterministic"] = deterministic;
    j["threads"] = threads;
    j["nfe"] = nfe;
    j["wall_seconds"] = wall_seconds;
    j["outputs"] = json::array();
    for (const Output& o : outputs)
        j["outputs"].push_back({{"path", o.path}, {"sha256", o.sha256}, {"bytes", o.bytes}});
    j["metrics"] = metrics;
    j["notes"] = notes;
    write_file_atomic(path, j.dump(2) + "\n");
}

RunManifest RunManifest::read(const std::string& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw CheckFailure("manifest " + path + " is not valid JSON: " + e.what());
    }
    RunManifest m;
    m.command = j.value("command", "");
    m.config_json = j.contains("config") ? j["config"].dump() : "";
    m.seed = j.value("seed", std::uint64_t(0));
    m.code_version = j.value("code_version", "");
    m.deterministic = j.value("deterministic", false);
    m.threads = j.value("threads", 1);
    m.nfe = j.value("nfe", std::int64_t(-1));
    m.wall_seconds = j.value("wall_seconds", 0.0);
    for (const json& o : j.value("outputs", json::array())) {
        Output out;
        out.path = o.value("path", "");
        out.sha256 = o.value("sha256", "");
        out.bytes = o.value("bytes", std::uint64_t(0));
        m.outputs.push_back(std::move(out));
    }
    if (j.contains("metrics"))
        for (auto it = j["metrics"].begin(); it != j["metrics"].end(); ++it)
            m.metrics[it.key()] = it.value().get<double>();
    if (j.contains("notes"))
        for (auto it = j["notes"].begin(); it != j["notes"].end(); ++it)
            m.notes[it.key()] = it.value().get<std::string>();
    return m;
}

}  // namespace couplegen::io
