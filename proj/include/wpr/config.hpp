#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace wpr::config {

/// Flat key-value config file: one `key = value` per line, `#` comments,
/// blank lines ignored. Keys are dotted paths ("model.embed_dim").
class KeyValues {
  public:
    static KeyValues from_file(const std::string& path);
    static KeyValues from_string(const std::string& text);

    bool has(const std::string& key) const;
    std::string get_str(const std::string& key) const;
    std::string get_str(const std::string& key, const std::string& fallback) const;
    double get_double(const std::string& key) const;
    double get_double(const std::string& key, double fallback) const;
    std::int64_t get_int(const std::string& key) const;
    std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    std::vector<double> get_double_list(const std::string& key,
                                        const std::vector<double>& fallback) const;
    std::vector<std::string> get_str_list(const std::string& key) const;

    /// Keys that start with `prefix`.
    std::vector<std::string> keys_with_prefix(const std::string& prefix) const;

    /// Raw file contents, used for config fingerprinting.
    const std::string& text() const { return text_; }

  private:
    std::map<std::string, std::string> values_;
    std::string text_;
};

}  // namespace wpr::config
