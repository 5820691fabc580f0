#pragma once

// Run manifest: a JSON record written before a command produces outputs and
// finalized afterwards, carrying everything needed to reproduce the run.

#include <chrono>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#ifndef RARECAST_GIT_DESCRIBE
#define RARECAST_GIT_DESCRIBE "unknown"
#endif

namespace rarecast::manifest {

inline std::string iso8601_now() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

class RunManifest {
  public:
    RunManifest(std::string path, std::string command_line, std::string scenario_hash,
                nlohmann::json config, std::uint64_t seed)
        : path_(std::move(path)) {
        doc_["command_line"] = std::move(command_line);
        doc_["scenario_hash"] = std::move(scenario_hash);
        doc_["config"] = std::move(config);
        doc_["seed"] = seed;
        doc_["git_describe"] = RARECAST_GIT_DESCRIBE;
        doc_["start"] = iso8601_now();
        doc_["outputs"] = nlohmann::json::array();
    }

    /// Declare an output file; call before writing it.
    void add_output(const std::string& file) {
        doc_["outputs"].push_back(file);
        write();
    }

    void finalize() {
        doc_["end"] = iso8601_now();
        write();
    }

    void write() const {
        std::ofstream out(path_);
        out << doc_.dump(2) << '\n';
    }

  private:
    std::string path_;
    nlohmann::json doc_;
};

}  // namespace rarecast::manifest
