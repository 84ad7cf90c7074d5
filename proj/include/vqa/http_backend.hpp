#pragma once

// SPDX-License-Identifier: Apache-2.0

// OpenAI-compatible chat-completions client.
//
// One POST per attempt to <base>/v1/chat/completions with the JSON fields
// model, messages, temperature and max_tokens. Images travel inline as
// base64 data URLs inside image_url content parts. The reply text is read
// from choices[0].message.content.

#include "vqa/backend.hpp"
#include "vqa/error.hpp"

#include <httplib.h>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdlib>
#include <functional>
#include <string>
#include <thread>
#include <vector>

namespace vqa {

struct HttpBackendConfig {
    std::string url;          // e.g. http://127.0.0.1:8080 or https://api.example.com/v1
    std::string model;
    std::string api_key_env;  // name of the environment variable holding the bearer token; may be empty
    int max_attempts = 3;     // first try plus retries
    std::chrono::milliseconds initial_backoff{500};
    int timeout_seconds = 120;
};

inline nlohmann::json build_chat_request(const std::string& model, const std::vector<ChatMessage>& messages,
                                         const DecodeParams& decode) {
    nlohmann::json msgs = nlohmann::json::array();
    for (const auto& m : messages) {
        nlohmann::json jm;
        jm["role"] = std::string(to_string(m.role));
        if (m.image) {
            nlohmann::json parts = nlohmann::json::array();
            parts.push_back({{"type", "text"}, {"text", m.text}});
            parts.push_back({{"type", "image_url"},
                             {"image_url",
                              {{"url", "data:" + m.image->media_type + ";base64," + base64_encode(m.image->bytes)}}}});
            jm["content"] = std::move(parts);
        } else {
            jm["content"] = m.text;
        }
        msgs.push_back(std::move(jm));
    }
    return {{"model", model}, {"messages", std::move(msgs)}, {"temperature", decode.temperature},
            {"max_tokens", decode.max_tokens}};
}

/// Extracts choices[0].message.content; throws BackendError on any shape mismatch.
inline std::string parse_chat_response(const std::string& body) {
    try {
        auto doc = nlohmann::json::parse(body);
        const auto& content = doc.at("choices").at(0).at("message").at("content");
        if (content.is_string())
            return content.get<std::string>();
        // some servers echo content parts back
        std::string text;
        for (const auto& part : content)
            if (part.value("type", "") == "text")
                text += part.at("text").get<std::string>();
        return text;
    } catch (const nlohmann::json::exception& e) {
        throw BackendError(std::string("malformed chat-completions response: ") + e.what());
    }
}

namespace detail {

struct SplitUrl {
    std::string origin;  // scheme://host[:port]
    std::string path;    // endpoint path
};

inline SplitUrl split_endpoint(const std::string& url) {
    auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos)
        throw ConfigError("backend url lacks a scheme: " + url);
    auto path_start = url.find('/', scheme_end + 3);
    SplitUrl out;
    out.origin = url.substr(0, path_start);
    std::string base = path_start == std::string::npos ? std::string() : url.substr(path_start);
    while (!base.empty() && base.back() == '/')
        base.pop_back();
    if (base.ends_with("/chat/completions"))
        out.path = base;
    else if (base.ends_with("/v1"))
        out.path = base + "/chat/completions";
    else
        out.path = base + "/v1/chat/completions";
    return out;
}

inline bool transient_status(int status) { return status == 408 || status == 429 || status >= 500; }

}  // namespace detail

class HttpBackend : public ChatBackend {
public:
    using Sleeper = std::function<void(std::chrono::milliseconds)>;

    explicit HttpBackend(HttpBackendConfig config, Sleeper sleeper = {})
        : config_(std::move(config)), sleeper_(std::move(sleeper)), endpoint_(detail::split_endpoint(config_.url)) {
        if (config_.max_attempts < 1)
            throw ConfigError("max_attempts must be >= 1");
        if (!sleeper_)
            sleeper_ = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
    }

    const HttpBackendConfig& config() const noexcept { return config_; }

protected:
    std::string do_complete(BackendRole, const std::vector<ChatMessage>& messages, const DecodeParams& decode) override {
        const std::string body = build_chat_request(config_.model, messages, decode).dump();

        httplib::Headers headers;
        if (!config_.api_key_env.empty()) {
            if (const char* key = std::getenv(config_.api_key_env.c_str()); key && *key)
                headers.emplace("Authorization", std::string("Bearer ") + key);
        }

        std::string last_error;
        auto backoff = config_.initial_backoff;
        for (int attempt = 1; attempt <= config_.max_attempts; ++attempt) {
            if (attempt > 1) {
                sleeper_(backoff);
                backoff *= 2;
            }
            httplib::Client client(endpoint_.origin);
            client.set_connection_timeout(config_.timeout_seconds, 0);
            client.set_read_timeout(config_.timeout_seconds, 0);
            client.set_write_timeout(config_.timeout_seconds, 0);

            auto res = client.Post(endpoint_.path, headers, body, "application/json");
            if (!res) {
                last_error = "transport error: " + httplib::to_string(res.error());
                continue;
            }
            if (res->status >= 200 && res->status < 300)
                return parse_chat_response(res->body);
            last_error = "HTTP " + std::to_string(res->status);
            if (!detail::transient_status(res->status))
                throw BackendError(endpoint_.origin + endpoint_.path + " returned " + last_error + ": " +
                                   res->body.substr(0, 200));
        }
        throw BackendError(endpoint_.origin + endpoint_.path + " failed after " + std::to_string(config_.max_attempts) +
                           " attempts: " + last_error);
    }

private:
    HttpBackendConfig config_;
    Sleeper sleeper_;
    detail::SplitUrl endpoint_;
};

}  // namespace vqa
