#pragma once

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "barack/errors.hpp"

namespace barack {

/// Flat "key = value" configuration with '#' comments. Dotted keys act as
/// namespaces ("stage2.lr = 0.1"); section() strips a prefix.
class Config {
  public:
    Config() = default;

    static Config parse(std::istream& in) {
        Config c;
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const std::size_t hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            const std::string trimmed = trim(line);
            if (trimmed.empty()) continue;
            const std::size_t eq = trimmed.find('=');
            if (eq == std::string::npos)
                throw ConfigError("config line " + std::to_string(lineno) +
                                  ": expected key = value");
            const std::string key = trim(trimmed.substr(0, eq));
            if (key.empty())
                throw ConfigError("config line " + std::to_string(lineno) +
                                  ": empty key");
            c.kv_[key] = trim(trimmed.substr(eq + 1));
        }
        return c;
    }

    static Config parse_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw IoError("cannot open config: " + path);
        return parse(in);
    }

    bool has(const std::string& key) const { return kv_.count(key) > 0; }

    void set(const std::string& key, const std::string& value) { kv_[key] = value; }

    std::string get_str(const std::string& key, const std::string& fallback) const {
        const auto it = kv_.find(key);
        return it == kv_.end() ? fallback : it->second;
    }

    std::string require_str(const std::string& key) const {
        const auto it = kv_.find(key);
        if (it == kv_.end()) throw ConfigError("missing config key: " + key);
        return it->second;
    }

    double get_double(const std::string& key, double fallback) const {
        return has(key) ? to_double(key, kv_.at(key)) : fallback;
    }

    long get_int(const std::string& key, long fallback) const {
        return has(key) ? to_int(key, kv_.at(key)) : fallback;
    }

    bool get_bool(const std::string& key, bool fallback) const {
        if (!has(key)) return fallback;
        const std::string& v = kv_.at(key);
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        throw ConfigError("config key " + key + ": expected a boolean, got '" + v + "'");
    }

    std::vector<double> get_double_list(const std::string& key,
                                        std::vector<double> fallback) const {
        if (!has(key)) return fallback;
        std::vector<double> out;
        for (const std::string& tok : split_commas(kv_.at(key)))
            out.push_back(to_double(key, tok));
        return out;
    }

    std::vector<long> get_int_list(const std::string& key,
                                   std::vector<long> fallback) const {
        if (!has(key)) return fallback;
        std::vector<long> out;
        for (const std::string& tok : split_commas(kv_.at(key)))
            out.push_back(to_int(key, tok));
        return out;
    }

    /// Keys beginning with "prefix." with the prefix stripped.
    Config section(const std::string& prefix) const {
        Config c;
        const std::string p = prefix + ".";
        for (const auto& [k, v] : kv_)
            if (k.rfind(p, 0) == 0) c.kv_[k.substr(p.size())] = v;
        return c;
    }

    const std::map<std::string, std::string>& items() const { return kv_; }

  private:
    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return "";
        const auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

    static std::vector<std::string> split_commas(const std::string& s) {
        std::vector<std::string> out;
        std::stringstream ss(s);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            tok = trim(tok);
            if (!tok.empty()) out.push_back(tok);
        }
        return out;
    }

    static double to_double(const std::string& key, const std::string& v) {
        char* end = nullptr;
        const double d = std::strtod(v.c_str(), &end);
        if (end == v.c_str() || *end != '\0')
            throw ConfigError("config key " + key + ": expected a number, got '" + v +
                              "'");
        return d;
    }

    static long to_int(const std::string& key, const std::string& v) {
        char* end = nullptr;
        const long i = std::strtol(v.c_str(), &end, 10);
        if (end == v.c_str() || *end != '\0')
            throw ConfigError("config key " + key + ": expected an integer, got '" + v +
                              "'");
        return i;
    }

    std::map<std::string, std::string> kv_;
};

} // namespace barack
