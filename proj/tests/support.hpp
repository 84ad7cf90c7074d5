#pragma once

// SPDX-License-Identifier: Apache-2.0

// Shared helpers for the unit and acceptance tests.

#include "vqa/backend.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace vqa::test {

inline std::filesystem::path fixture_dir() { return VQA_FIXTURE_DIR; }
inline std::filesystem::path source_dir() { return VQA_SOURCE_DIR; }

/// Header-only PNG: enough bytes for the size sniffer, no pixel data.
inline ImagePtr tiny_png(const std::string& name, int w = 64, int h = 48) {
    std::string b("\x89PNG\r\n\x1a\n", 8);
    b += std::string("\0\0\0\x0d", 4) + "IHDR";
    for (int v : {w, h})
        for (int shift = 24; shift >= 0; shift -= 8)
            b.push_back(static_cast<char>((v >> shift) & 0xff));
    b += std::string("\x08\x02\0\0\0", 5);
    return std::make_shared<const Image>(decode_image(name, b));
}

struct Line {
    std::string role;
    std::vector<std::string> match;
    std::string response;
};

inline ScriptedScenario scenario(const std::vector<Line>& lines, const std::string& exhaustion = "error") {
    nlohmann::json doc;
    doc["exhaustion"] = exhaustion;
    doc["entries"] = nlohmann::json::array();
    for (const auto& l : lines) {
        nlohmann::json e{{"response", l.response}};
        if (!l.role.empty())
            e["role"] = l.role;
        if (!l.match.empty())
            e["match"] = l.match;
        doc["entries"].push_back(e);
    }
    return ScriptedScenario::from_json(doc);
}

inline std::shared_ptr<ScriptedBackend> scripted(const std::vector<Line>& lines,
                                                 const std::string& exhaustion = "error") {
    return std::make_shared<ScriptedBackend>(scenario(lines, exhaustion));
}

inline BackendRouter route_all(const std::shared_ptr<ChatBackend>& backend) {
    BackendRouter router;
    router.assign_all(backend);
    return router;
}

/// Scratch directory removed at scope exit.
class TempDir {
public:
    TempDir() {
        static std::mt19937_64 rng{std::random_device{}()};
        path_ = std::filesystem::temp_directory_path() / ("vqa-test-" + std::to_string(rng()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const noexcept { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline void write_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << text;
}

inline std::string coe_reply(const std::string& evidence, const std::string& step, const std::string& answer) {
    return "Evidence:\n- " + evidence + "\nReasoning:\n1. " + step + "\nAnswer: " + answer;
}

}  // namespace vqa::test
