#pragma once

// SPDX-License-Identifier: Apache-2.0

/**
 * @file backend.hpp
 * @brief Model access: roles, messages, scripted replay backend, call log, grounding.
 *
 * All model traffic goes through a Session, which routes each call to the
 * backend configured for its role and appends a call record (prompt hash,
 * response hash) before the next call can be issued.
 *
 * The HTTP client for OpenAI-compatible servers lives in http_backend.hpp so
 * that translation units which only replay scripts do not pay for it.
 */

#include "vqa/core.hpp"
#include "vqa/error.hpp"
#include "vqa/prompts.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <regex>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace vqa {

// ---------------------------------------------------------------------------
// Hashing and encoding helpers

/// 64-bit FNV-1a; stable across platforms and runs.
inline std::uint64_t fnv1a64(std::string_view data, std::uint64_t seed = 0xcbf29ce484222325ULL) noexcept {
    std::uint64_t h = seed;
    for (unsigned char c : data) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4)
        out[static_cast<std::size_t>(i)] = digits[v & 0xf];
    return out;
}

inline std::string content_hash(std::string_view data) { return hex64(fnv1a64(data)); }

inline std::string base64_encode(std::string_view data) {
    static constexpr char table[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((data.size() + 2) / 3 * 4);
    std::size_t i = 0;
    for (; i + 2 < data.size(); i += 3) {
        auto n = (std::uint32_t(std::uint8_t(data[i])) << 16) | (std::uint32_t(std::uint8_t(data[i + 1])) << 8) |
                 std::uint32_t(std::uint8_t(data[i + 2]));
        out += table[(n >> 18) & 63];
        out += table[(n >> 12) & 63];
        out += table[(n >> 6) & 63];
        out += table[n & 63];
    }
    if (i < data.size()) {
        std::uint32_t n = std::uint32_t(std::uint8_t(data[i])) << 16;
        if (i + 1 < data.size())
            n |= std::uint32_t(std::uint8_t(data[i + 1])) << 8;
        out += table[(n >> 18) & 63];
        out += table[(n >> 12) & 63];
        out += (i + 1 < data.size()) ? table[(n >> 6) & 63] : '=';
        out += '=';
    }
    return out;
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw FormatError("cannot open " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

// ---------------------------------------------------------------------------
// Images

struct Image {
    std::string name;        // reference used in prompts and logs (file name)
    std::string bytes;
    std::string media_type;  // image/png, image/jpeg, image/gif
    int width = 0;
    int height = 0;
};

namespace detail {

inline std::uint32_t be32(std::string_view b, std::size_t at) {
    return (std::uint32_t(std::uint8_t(b[at])) << 24) | (std::uint32_t(std::uint8_t(b[at + 1])) << 16) |
           (std::uint32_t(std::uint8_t(b[at + 2])) << 8) | std::uint32_t(std::uint8_t(b[at + 3]));
}

inline std::uint16_t be16(std::string_view b, std::size_t at) {
    return static_cast<std::uint16_t>((std::uint16_t(std::uint8_t(b[at])) << 8) | std::uint8_t(b[at + 1]));
}

inline bool sniff_jpeg_size(std::string_view b, int& w, int& h) {
    std::size_t pos = 2;
    while (pos + 4 <= b.size()) {
        if (std::uint8_t(b[pos]) != 0xFF)
            return false;
        std::uint8_t marker = std::uint8_t(b[pos + 1]);
        if (marker == 0xFF) {
            ++pos;
            continue;
        }
        if (marker == 0x01 || (marker >= 0xD0 && marker <= 0xD9)) {
            pos += 2;
            continue;
        }
        std::uint16_t len = be16(b, pos + 2);
        bool sof = marker >= 0xC0 && marker <= 0xCF && marker != 0xC4 && marker != 0xC8 && marker != 0xCC;
        if (sof) {
            if (pos + 9 > b.size())
                return false;
            h = be16(b, pos + 5);
            w = be16(b, pos + 7);
            return true;
        }
        pos += 2 + len;
    }
    return false;
}

}  // namespace detail

/// Identifies the container format and pixel size from the header bytes.
inline Image decode_image(std::string name, std::string bytes) {
    Image img{std::move(name), std::move(bytes), {}, 0, 0};
    std::string_view b = img.bytes;
    if (b.size() >= 24 && b.substr(0, 8) == std::string_view("\x89PNG\r\n\x1a\n", 8)) {
        img.media_type = "image/png";
        img.width = static_cast<int>(detail::be32(b, 16));
        img.height = static_cast<int>(detail::be32(b, 20));
    } else if (b.size() >= 4 && std::uint8_t(b[0]) == 0xFF && std::uint8_t(b[1]) == 0xD8) {
        img.media_type = "image/jpeg";
        if (!detail::sniff_jpeg_size(b, img.width, img.height))
            throw PreconditionError("image " + img.name + ": truncated JPEG header");
    } else if (b.size() >= 10 && (b.substr(0, 6) == "GIF87a" || b.substr(0, 6) == "GIF89a")) {
        img.media_type = "image/gif";
        img.width = std::uint8_t(b[6]) | (std::uint8_t(b[7]) << 8);
        img.height = std::uint8_t(b[8]) | (std::uint8_t(b[9]) << 8);
    } else {
        throw PreconditionError("image " + img.name + " is not a decodable PNG, JPEG or GIF");
    }
    if (img.width <= 0 || img.height <= 0)
        throw PreconditionError("image " + img.name + " has no pixels");
    return img;
}

using ImagePtr = std::shared_ptr<const Image>;

inline ImagePtr load_image(const std::filesystem::path& path) {
    return std::make_shared<const Image>(decode_image(path.filename().string(), read_file(path)));
}

// ---------------------------------------------------------------------------
// Roles and messages

enum class BackendRole { vrd_model, analyzer_ga, captioner_gc, paraphraser, reasoner, teacher_llm, judge_f, grounder };

inline constexpr std::array<BackendRole, 8> kAllRoles = {
    BackendRole::vrd_model, BackendRole::analyzer_ga, BackendRole::captioner_gc, BackendRole::paraphraser,
    BackendRole::reasoner,  BackendRole::teacher_llm, BackendRole::judge_f,      BackendRole::grounder};

inline std::string_view to_string(BackendRole role) {
    switch (role) {
    case BackendRole::vrd_model: return "vrd_model";
    case BackendRole::analyzer_ga: return "analyzer_ga";
    case BackendRole::captioner_gc: return "captioner_gc";
    case BackendRole::paraphraser: return "paraphraser";
    case BackendRole::reasoner: return "reasoner";
    case BackendRole::teacher_llm: return "teacher_llm";
    case BackendRole::judge_f: return "judge_f";
    case BackendRole::grounder: return "grounder";
    }
    return "unknown";
}

inline std::optional<BackendRole> parse_role(std::string_view name) {
    for (auto role : kAllRoles)
        if (to_string(role) == name)
            return role;
    return std::nullopt;
}

enum class MessageRole { system, user, assistant };

inline std::string_view to_string(MessageRole r) {
    switch (r) {
    case MessageRole::system: return "system";
    case MessageRole::user: return "user";
    case MessageRole::assistant: return "assistant";
    }
    return "user";
}

struct ChatMessage {
    MessageRole role = MessageRole::user;
    std::string text;
    std::shared_ptr<const Image> image;  // user messages only

    static ChatMessage user(std::string text, std::shared_ptr<const Image> image = nullptr) {
        return {MessageRole::user, std::move(text), std::move(image)};
    }
    static ChatMessage assistant(std::string text) { return {MessageRole::assistant, std::move(text), nullptr}; }
    static ChatMessage system(std::string text) { return {MessageRole::system, std::move(text), nullptr}; }
};

struct DecodeParams {
    double temperature = 0.0;
    int max_tokens = 512;
};

/// Decode defaults per role: deterministic everywhere except teacher sampling.
inline DecodeParams default_decode(BackendRole role) {
    DecodeParams p;
    if (role == BackendRole::teacher_llm)
        p.temperature = 0.7;
    return p;
}

inline void check_messages(const std::vector<ChatMessage>& messages) {
    if (messages.empty())
        throw PreconditionError("complete: message list is empty");
    for (const auto& m : messages) {
        if (m.image && m.role != MessageRole::user)
            throw PreconditionError("complete: images are only permitted on user messages");
    }
}

/// A chat/vision model endpoint. Implementations must be safe to call concurrently.
class ChatBackend {
public:
    virtual ~ChatBackend() = default;

    std::string complete(BackendRole role, const std::vector<ChatMessage>& messages, const DecodeParams& decode) {
        check_messages(messages);
        return do_complete(role, messages, decode);
    }

    std::string complete(BackendRole role, const std::vector<ChatMessage>& messages) {
        return complete(role, messages, default_decode(role));
    }

protected:
    virtual std::string do_complete(BackendRole role, const std::vector<ChatMessage>& messages,
                                    const DecodeParams& decode) = 0;
};

// ---------------------------------------------------------------------------
// Scripted replay

enum class ExhaustionPolicy { error, repeat_last };

struct ScriptedEntry {
    std::vector<std::string> match;  // every substring must occur; empty => ordinal entry
    std::optional<BackendRole> role;
    std::string response;
};

struct ScriptedScenario {
    std::vector<ScriptedEntry> entries;
    ExhaustionPolicy exhaustion = ExhaustionPolicy::error;

    bool ordinal() const {
        return !entries.empty() && entries.front().match.empty() && !entries.front().role;
    }

    /// Parses the JSON scenario format:
    /// {"exhaustion": "error"|"repeat_last", "entries": [{"match": [..], "role": "..", "response": ".."}]}
    static ScriptedScenario from_json(const nlohmann::json& doc) {
        ScriptedScenario sc;
        if (!doc.is_object() || !doc.contains("entries") || !doc["entries"].is_array())
            throw FormatError("scenario: expected an object with an \"entries\" array");
        auto policy = doc.value("exhaustion", std::string("error"));
        if (policy == "error")
            sc.exhaustion = ExhaustionPolicy::error;
        else if (policy == "repeat_last")
            sc.exhaustion = ExhaustionPolicy::repeat_last;
        else
            throw FormatError("scenario: unknown exhaustion policy " + policy);

        std::size_t index = 0;
        for (const auto& e : doc["entries"]) {
            ScriptedEntry entry;
            if (!e.contains("response") || !e["response"].is_string())
                throw FormatError("scenario entry " + std::to_string(index) + ": missing string \"response\"");
            entry.response = e["response"].get<std::string>();
            if (e.contains("match")) {
                if (e["match"].is_string())
                    entry.match.push_back(e["match"].get<std::string>());
                else
                    entry.match = e["match"].get<std::vector<std::string>>();
            }
            if (e.contains("role")) {
                auto r = parse_role(e["role"].get<std::string>());
                if (!r)
                    throw FormatError("scenario entry " + std::to_string(index) + ": unknown role");
                entry.role = r;
            }
            sc.entries.push_back(std::move(entry));
            ++index;
        }
        bool first_ordinal = sc.ordinal();
        for (const auto& e : sc.entries) {
            bool is_ordinal = e.match.empty() && !e.role;
            if (is_ordinal != first_ordinal)
                throw FormatError("scenario mixes ordinal and matcher-keyed entries");
        }
        return sc;
    }

    static ScriptedScenario load(const std::filesystem::path& path) {
        try {
            return from_json(nlohmann::json::parse(read_file(path)));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("scenario " + path.string() + ": " + e.what());
        }
    }
};

/// Text a scripted matcher is tested against: role tag, then each message with its image name.
inline std::string match_subject(BackendRole role, const std::vector<ChatMessage>& messages) {
    std::string s = "[" + std::string(to_string(role)) + "]\n";
    for (const auto& m : messages) {
        s += to_string(m.role);
        s += ": ";
        s += m.text;
        s += '\n';
        if (m.image)
            s += "<image:" + m.image->name + ">\n";
    }
    return s;
}

/// Deterministic backend replaying canned responses.
///
/// Matcher-keyed scenarios consume the first unused entry whose role and
/// substrings all match, so repeated identical requests walk through
/// successive entries. Ordinal scenarios serve entries strictly in order and
/// refuse overlapping calls.
class ScriptedBackend : public ChatBackend {
public:
    explicit ScriptedBackend(ScriptedScenario scenario)
        : scenario_(std::move(scenario)), used_(scenario_.entries.size(), false) {}

    std::size_t calls() const {
        std::lock_guard lock(mu_);
        return calls_;
    }

    std::size_t remaining() const {
        std::lock_guard lock(mu_);
        return static_cast<std::size_t>(std::count(used_.begin(), used_.end(), false));
    }

protected:
    std::string do_complete(BackendRole role, const std::vector<ChatMessage>& messages, const DecodeParams&) override {
        if (scenario_.ordinal()) {
            if (in_flight_.fetch_add(1) != 0) {
                in_flight_.fetch_sub(1);
                throw BackendError("ordinal scripted scenario used concurrently");
            }
            struct Release {
                std::atomic<int>& n;
                ~Release() { n.fetch_sub(1); }
            } release{in_flight_};
            return next_ordinal();
        }
        return next_matching(role, match_subject(role, messages));
    }

private:
    std::string next_ordinal() {
        std::lock_guard lock(mu_);
        ++calls_;
        if (cursor_ < scenario_.entries.size()) {
            used_[cursor_] = true;
            return scenario_.entries[cursor_++].response;
        }
        if (scenario_.exhaustion == ExhaustionPolicy::repeat_last && !scenario_.entries.empty())
            return scenario_.entries.back().response;
        throw ScenarioExhausted("scripted scenario exhausted after " + std::to_string(cursor_) + " responses");
    }

    bool matches(const ScriptedEntry& e, BackendRole role, const std::string& subject) const {
        if (e.role && *e.role != role)
            return false;
        for (const auto& needle : e.match)
            if (subject.find(needle) == std::string::npos)
                return false;
        return true;
    }

    std::string next_matching(BackendRole role, const std::string& subject) {
        std::lock_guard lock(mu_);
        ++calls_;
        std::optional<std::size_t> last_used;
        for (std::size_t i = 0; i < scenario_.entries.size(); ++i) {
            if (!matches(scenario_.entries[i], role, subject))
                continue;
            if (!used_[i]) {
                used_[i] = true;
                return scenario_.entries[i].response;
            }
            last_used = i;
        }
        if (last_used && scenario_.exhaustion == ExhaustionPolicy::repeat_last)
            return scenario_.entries[*last_used].response;
        auto head = subject.substr(0, subject.find('\n', subject.find('\n') + 1));
        throw ScenarioExhausted("no scripted response left for request " + head);
    }

    ScriptedScenario scenario_;
    mutable std::mutex mu_;
    std::vector<bool> used_;
    std::size_t cursor_ = 0;
    std::size_t calls_ = 0;
    std::atomic<int> in_flight_{0};
};

// ---------------------------------------------------------------------------
// Score parsing

/// First decimal number in the text, which must lie in [0,1].
inline ValidityScore parse_score(std::string_view model_text) {
    static const std::regex number(R"([-+]?(?:\d+(?:\.\d*)?|\.\d+))");
    std::string text(model_text);
    std::smatch m;
    if (!std::regex_search(text, m, number))
        throw ParseError("no score found in model output");
    double v = std::stod(m.str());
    if (v < 0.0 || v > 1.0)
        throw ParseError("score " + m.str() + " outside [0,1]");
    return ValidityScore(v);
}

// ---------------------------------------------------------------------------
// Routing and call log

/// Maps every role to one backend and its decode parameters.
class BackendRouter {
public:
    void assign(BackendRole role, std::shared_ptr<ChatBackend> backend, std::optional<DecodeParams> decode = {}) {
        routes_[role] = Route{std::move(backend), decode.value_or(default_decode(role))};
    }

    void assign_all(const std::shared_ptr<ChatBackend>& backend) {
        for (auto role : kAllRoles)
            assign(role, backend);
    }

    bool configured(BackendRole role) const { return routes_.contains(role) && routes_.at(role).backend; }

    ChatBackend& backend(BackendRole role) const {
        auto it = routes_.find(role);
        if (it == routes_.end() || !it->second.backend)
            throw ConfigError("no backend configured for role " + std::string(to_string(role)));
        return *it->second.backend;
    }

    DecodeParams decode(BackendRole role) const {
        auto it = routes_.find(role);
        return it == routes_.end() ? default_decode(role) : it->second.decode;
    }

private:
    struct Route {
        std::shared_ptr<ChatBackend> backend;
        DecodeParams decode;
    };
    std::map<BackendRole, Route> routes_;
};

struct CallRecord {
    std::string stage;
    std::string role;
    std::string prompt_hash;
    std::string response_hash;  // empty when the call failed
    std::string error;

    friend bool operator==(const CallRecord&, const CallRecord&) = default;
};

inline std::string request_hash(BackendRole role, const std::vector<ChatMessage>& messages, const DecodeParams& d) {
    std::string canon(to_string(role));
    canon += '\0';
    for (const auto& m : messages) {
        canon += to_string(m.role);
        canon += '\0';
        canon += m.text;
        canon += '\0';
        if (m.image) {
            canon += m.image->name;
            canon += '\0';
            canon += hex64(fnv1a64(m.image->bytes));
        }
        canon += '\0';
    }
    std::ostringstream dp;
    dp << d.temperature << ',' << d.max_tokens;
    canon += dp.str();
    return content_hash(canon);
}

/// Number of times a malformed model response is re-requested before giving up.
inline constexpr int kMaxReasks = 2;

/// Per-sample model access with an append-only call log.
class Session {
public:
    explicit Session(const BackendRouter& router, std::string sample_id = {})
        : router_(router), sample_id_(std::move(sample_id)) {}

    const std::string& sample_id() const noexcept { return sample_id_; }
    const BackendRouter& router() const noexcept { return router_; }

    void set_stage(std::string stage) { stage_ = std::move(stage); }
    const std::string& stage() const noexcept { return stage_; }

    std::string complete(BackendRole role, const std::vector<ChatMessage>& messages) {
        auto decode = router_.decode(role);
        check_messages(messages);
        calls_.push_back({stage_, std::string(to_string(role)), request_hash(role, messages, decode), {}, {}});
        try {
            auto text = router_.backend(role).complete(role, messages, decode);
            calls_.back().response_hash = content_hash(text);
            return text;
        } catch (const std::exception& e) {
            calls_.back().error = e.what();
            throw;
        }
    }

    /// Issues the request and parses the reply; on ParseError re-asks up to
    /// `max_reasks` times, quoting the bad reply back to the model.
    template <typename Parser>
    auto complete_parsed(BackendRole role, std::vector<ChatMessage> messages, Parser&& parse,
                         int max_reasks = kMaxReasks) -> decltype(parse(std::string{})) {
        for (int attempt = 0;; ++attempt) {
            auto text = complete(role, messages);
            try {
                return parse(text);
            } catch (const ParseError& e) {
                if (attempt >= max_reasks)
                    throw;
                messages.push_back(ChatMessage::assistant(text));
                messages.push_back(ChatMessage::user(std::string("Your previous reply could not be used (") +
                                                     e.what() +
                                                     "). Answer again, following the required format exactly."));
            }
        }
    }

    void warn(std::string message) { warnings_.push_back(std::move(message)); }
    void flag(std::string name) {
        if (std::find(flags_.begin(), flags_.end(), name) == flags_.end())
            flags_.push_back(std::move(name));
    }
    bool flagged(std::string_view name) const { return std::find(flags_.begin(), flags_.end(), name) != flags_.end(); }

    const std::vector<CallRecord>& calls() const noexcept { return calls_; }
    const std::vector<std::string>& warnings() const noexcept { return warnings_; }
    const std::vector<std::string>& flags() const noexcept { return flags_; }

private:
    const BackendRouter& router_;
    std::string sample_id_;
    std::string stage_;
    std::vector<CallRecord> calls_;
    std::vector<std::string> warnings_;
    std::vector<std::string> flags_;
};

// ---------------------------------------------------------------------------
// Grounding

struct BoundingBox {
    int x = 0;
    int y = 0;
    int w = 0;
    int h = 0;
    std::string label;

    Region region() const { return {x, y, w, h}; }
    friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

/// Drops boxes that have no area, leave the image, or carry an unrequested label.
inline std::vector<BoundingBox> validate_boxes(std::vector<BoundingBox> boxes, const Image& image,
                                               const std::vector<std::string>& requested, Session& session) {
    std::vector<BoundingBox> kept;
    for (auto& box : boxes) {
        std::string why;
        if (std::find(requested.begin(), requested.end(), box.label) == requested.end())
            why = "label not requested";
        else if (box.w <= 0 || box.h <= 0)
            why = "zero-area box";
        else if (box.x < 0 || box.y < 0 || (image.width > 0 && box.x + box.w > image.width) ||
                 (image.height > 0 && box.y + box.h > image.height))
            why = "box outside image bounds";
        if (!why.empty()) {
            session.warn("grounder: dropped box for '" + box.label + "': " + why);
            continue;
        }
        kept.push_back(std::move(box));
    }
    return kept;
}

/// Supplies entity regions for an image; stands in for a dedicated detection network.
class Grounder {
public:
    virtual ~Grounder() = default;

    std::vector<BoundingBox> propose_regions(Session& session, const ImagePtr& image,
                                             const std::vector<std::string>& entity_names) {
        if (!image)
            throw PreconditionError("propose_regions: no image");
        if (entity_names.empty())
            throw PreconditionError("propose_regions: entity list is empty");
        return validate_boxes(raw_regions(session, image, entity_names), *image, entity_names, session);
    }

protected:
    virtual std::vector<BoundingBox> raw_regions(Session& session, const ImagePtr& image,
                                                 const std::vector<std::string>& entity_names) = 0;
};

/// Fixed boxes keyed by image name.
class FixtureGrounder : public Grounder {
public:
    using Table = std::map<std::string, std::vector<BoundingBox>>;

    explicit FixtureGrounder(Table boxes) : boxes_(std::move(boxes)) {}

    /// {"image.png": [{"label": "man", "x": 1, "y": 2, "w": 3, "h": 4}, ...], ...}
    static FixtureGrounder load(const std::filesystem::path& path) {
        Table table;
        try {
            auto doc = nlohmann::json::parse(read_file(path));
            for (const auto& [image, list] : doc.items()) {
                for (const auto& b : list)
                    table[image].push_back({b.at("x").get<int>(), b.at("y").get<int>(), b.at("w").get<int>(),
                                            b.at("h").get<int>(), b.at("label").get<std::string>()});
            }
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("grounding fixture " + path.string() + ": " + e.what());
        }
        return FixtureGrounder(std::move(table));
    }

protected:
    std::vector<BoundingBox> raw_regions(Session&, const ImagePtr& image,
                                         const std::vector<std::string>& entity_names) override {
        std::vector<BoundingBox> out;
        auto it = boxes_.find(image->name);
        if (it == boxes_.end())
            return out;
        for (const auto& box : it->second)
            if (std::find(entity_names.begin(), entity_names.end(), box.label) != entity_names.end())
                out.push_back(box);
        return out;
    }

private:
    Table boxes_;
};

namespace detail {

inline std::string trim(std::string_view s) {
    auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos)
        return {};
    auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

/// Removes a leading list marker such as "- ", "* ", "3. " or "3) ".
inline std::string strip_bullet(std::string_view line) {
    std::string s = trim(line);
    if (s.size() >= 2 && (s[0] == '-' || s[0] == '*') && s[1] == ' ')
        return trim(std::string_view(s).substr(2));
    std::size_t i = 0;
    while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i])))
        ++i;
    if (i > 0 && i + 1 < s.size() && (s[i] == '.' || s[i] == ')') && s[i + 1] == ' ')
        return trim(std::string_view(s).substr(i + 2));
    return s;
}

inline std::vector<std::string> split_lines(std::string_view text) {
    std::vector<std::string> lines;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        auto nl = text.find('\n', pos);
        if (nl == std::string_view::npos) {
            lines.emplace_back(text.substr(pos));
            break;
        }
        lines.emplace_back(text.substr(pos, nl - pos));
        pos = nl + 1;
    }
    for (auto& l : lines)
        if (!l.empty() && l.back() == '\r')
            l.pop_back();
    return lines;
}

inline std::string join(const std::vector<std::string>& parts, std::string_view sep) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i)
            out += sep;
        out += parts[i];
    }
    return out;
}

inline std::string lower(std::string_view s) {
    std::string out(s);
    for (auto& c : out)
        c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

}  // namespace detail

/// Parses "name: x, y, w, h" lines. Lines that do not fit are ParseErrors.
inline std::vector<BoundingBox> parse_box_lines(std::string_view text) {
    static const std::regex line_re(R"(^(.+?)\s*:\s*\(?\s*(-?\d+)\s*,\s*(-?\d+)\s*,\s*(-?\d+)\s*,\s*(-?\d+)\s*\)?$)");
    std::vector<BoundingBox> boxes;
    for (const auto& raw : detail::split_lines(text)) {
        auto line = detail::strip_bullet(raw);
        if (line.empty())
            continue;
        std::smatch m;
        if (!std::regex_match(line, m, line_re))
            throw ParseError("unrecognized box line: " + line);
        boxes.push_back({std::stoi(m[2]), std::stoi(m[3]), std::stoi(m[4]), std::stoi(m[5]), detail::trim(m.str(1))});
    }
    return boxes;
}

/// Asks the grounder-role backend for boxes.
class ModelGrounder : public Grounder {
public:
    explicit ModelGrounder(PromptSet prompts) : prompts_(std::move(prompts)) {}

protected:
    std::vector<BoundingBox> raw_regions(Session& session, const ImagePtr& image,
                                         const std::vector<std::string>& entity_names) override {
        auto prompt = prompts_.render("grounding", {{"entity_list", detail::join(entity_names, ", ")}});
        return session.complete_parsed(BackendRole::grounder, {ChatMessage::user(prompt, image)},
                                       [](const std::string& t) { return parse_box_lines(t); });
    }

private:
    PromptSet prompts_;
};

}  // namespace vqa
