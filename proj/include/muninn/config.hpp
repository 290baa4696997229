#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "muninn/serialize.hpp"

namespace muninn {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Plain-text sectioned key-value configuration:
//
//   # comment
//   [section]
//   key = value
//
// Parsing preserves section/key order; serialization is canonical (one
// "key = value" per line), so parse -> serialize -> parse is a fixed point.
class ConfigDoc {
   public:
    struct Section {
        std::string name;
        std::vector<std::pair<std::string, std::string>> entries;
    };

    static ConfigDoc parse(const std::string& text) {
        ConfigDoc doc;
        std::istringstream in(text);
        std::string line;
        int lineno = 0;
        Section* cur = nullptr;
        while (std::getline(in, line)) {
            ++lineno;
            std::string s = trim(line);
            if (s.empty() || s[0] == '#') continue;
            if (s.front() == '[') {
                if (s.back() != ']')
                    throw ConfigError("line " + std::to_string(lineno) + ": unterminated section header");
                const std::string name = trim(s.substr(1, s.size() - 2));
                if (name.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty section name");
                doc.sections_.push_back({name, {}});
                cur = &doc.sections_.back();
                continue;
            }
            const auto eq = s.find('=');
            if (eq == std::string::npos)
                throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
            if (cur == nullptr)
                throw ConfigError("line " + std::to_string(lineno) + ": entry outside any [section]");
            const std::string key = trim(s.substr(0, eq));
            const std::string value = trim(s.substr(eq + 1));
            if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
            cur->entries.emplace_back(key, value);
        }
        return doc;
    }

    std::string serialize() const {
        std::string out;
        for (const auto& sec : sections_) {
            out += "[" + sec.name + "]\n";
            for (const auto& [k, v] : sec.entries) out += k + " = " + v + "\n";
            out += "\n";
        }
        return out;
    }

    std::optional<std::string> get(const std::string& section, const std::string& key) const {
        for (const auto& sec : sections_)
            if (sec.name == section)
                for (const auto& [k, v] : sec.entries)
                    if (k == key) return v;
        return std::nullopt;
    }

    void set(const std::string& section, const std::string& key, const std::string& value) {
        for (auto& sec : sections_)
            if (sec.name == section) {
                for (auto& [k, v] : sec.entries)
                    if (k == key) {
                        v = value;
                        return;
                    }
                sec.entries.emplace_back(key, value);
                return;
            }
        sections_.push_back({section, {{key, value}}});
    }

    const std::vector<Section>& sections() const { return sections_; }

    std::uint64_t hash() const { return fnv1a64(serialize()); }

   private:
    static std::string trim(const std::string& s) {
        std::size_t b = 0, e = s.size();
        while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
        while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
        return s.substr(b, e - b);
    }

    std::vector<Section> sections_;
};

namespace cfgdetail {
inline double to_double(const std::string& section, const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing characters");
        return x;
    } catch (const std::exception&) {
        throw ConfigError("[" + section + "] " + key + ": not a number: '" + v + "'");
    }
}
inline long long to_int(const std::string& section, const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const long long x = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing characters");
        return x;
    } catch (const std::exception&) {
        throw ConfigError("[" + section + "] " + key + ": not an integer: '" + v + "'");
    }
}
}  // namespace cfgdetail

// Typed accessor with defaults; unknown keys are tolerated, malformed values
// are not.
class ConfigView {
   public:
    explicit ConfigView(const ConfigDoc& doc) : doc_(doc) {}

    std::string str(const std::string& sec, const std::string& key, const std::string& dflt) const {
        return doc_.get(sec, key).value_or(dflt);
    }
    std::string require_str(const std::string& sec, const std::string& key) const {
        const auto v = doc_.get(sec, key);
        if (!v) throw ConfigError("missing required key [" + sec + "] " + key);
        return *v;
    }
    double num(const std::string& sec, const std::string& key, double dflt) const {
        const auto v = doc_.get(sec, key);
        return v ? cfgdetail::to_double(sec, key, *v) : dflt;
    }
    long long integer(const std::string& sec, const std::string& key, long long dflt) const {
        const auto v = doc_.get(sec, key);
        return v ? cfgdetail::to_int(sec, key, *v) : dflt;
    }
    bool flag(const std::string& sec, const std::string& key, bool dflt) const {
        const auto v = doc_.get(sec, key);
        if (!v) return dflt;
        if (*v == "true" || *v == "1" || *v == "yes") return true;
        if (*v == "false" || *v == "0" || *v == "no") return false;
        throw ConfigError("[" + sec + "] " + key + ": not a boolean: '" + *v + "'");
    }

   private:
    const ConfigDoc& doc_;
};

}  // namespace muninn
