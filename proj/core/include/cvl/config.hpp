#pragma once

#include <map>
#include <string>
#include <vector>

namespace cvl {

// Flat key=value text config. Lines are `key=value`; blank lines and
// lines starting with '#' are skipped. Keys are unique.
class flat_config {
  public:
    static flat_config from_file(const std::string & path);
    static flat_config from_string(const std::string & text);

    bool has(const std::string & key) const;
    std::string get(const std::string & key) const;
    std::string get_or(const std::string & key, const std::string & fallback) const;
    int64_t get_int(const std::string & key) const;
    int64_t get_int_or(const std::string & key, int64_t fallback) const;
    double get_double(const std::string & key) const;
    double get_double_or(const std::string & key, double fallback) const;
    bool get_bool_or(const std::string & key, bool fallback) const;
    // Comma-separated integer list.
    std::vector<int> get_int_list(const std::string & key) const;
    std::vector<int> get_int_list_or(const std::string & key,
                                     const std::vector<int> & fallback) const;

    void set(const std::string & key, const std::string & value);
    std::string to_string() const;

    const std::map<std::string, std::string> & items() const { return values_; }

  private:
    std::map<std::string, std::string> values_;
};

}  // namespace cvl
