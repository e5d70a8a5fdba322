#include "cvl/config.hpp"

#include <fstream>
#include <sstream>

#include "cvl/tensor.hpp"

namespace cvl {

namespace {

std::string trim(const std::string & s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) {
        return "";
    }
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

}  // namespace

flat_config flat_config::from_file(const std::string & path) {
    std::ifstream f(path);
    check(f.good(), "config: cannot open '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return from_string(ss.str());
}

flat_config flat_config::from_string(const std::string & text) {
    flat_config cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') {
            continue;
        }
        const size_t eq = t.find('=');
        check(eq != std::string::npos,
              "config: line " + std::to_string(lineno) + " is not key=value: '" + t + "'");
        const std::string key = trim(t.substr(0, eq));
        check(!key.empty(), "config: empty key at line " + std::to_string(lineno));
        check(cfg.values_.find(key) == cfg.values_.end(),
              "config: duplicate key '" + key + "' at line " + std::to_string(lineno));
        cfg.values_[key] = trim(t.substr(eq + 1));
    }
    return cfg;
}

bool flat_config::has(const std::string & key) const {
    return values_.find(key) != values_.end();
}

std::string flat_config::get(const std::string & key) const {
    auto it = values_.find(key);
    check(it != values_.end(), "config: missing key '" + key + "'");
    return it->second;
}

std::string flat_config::get_or(const std::string & key, const std::string & fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
}

int64_t flat_config::get_int(const std::string & key) const {
    const std::string v = get(key);
    try {
        return std::stoll(v);
    } catch (const std::exception &) {
        fail("config: key '" + key + "' is not an integer: '" + v + "'");
    }
}

int64_t flat_config::get_int_or(const std::string & key, int64_t fallback) const {
    return has(key) ? get_int(key) : fallback;
}

double flat_config::get_double(const std::string & key) const {
    const std::string v = get(key);
    try {
        return std::stod(v);
    } catch (const std::exception &) {
        fail("config: key '" + key + "' is not a number: '" + v + "'");
    }
}

double flat_config::get_double_or(const std::string & key, double fallback) const {
    return has(key) ? get_double(key) : fallback;
}

bool flat_config::get_bool_or(const std::string & key, bool fallback) const {
    if (!has(key)) {
        return fallback;
    }
    const std::string v = get(key);
    if (v == "true" || v == "1" || v == "yes") {
        return true;
    }
    if (v == "false" || v == "0" || v == "no") {
        return false;
    }
    fail("config: key '" + key + "' is not a boolean: '" + v + "'");
}

std::vector<int> flat_config::get_int_list(const std::string & key) const {
    const std::string v = get(key);
    std::vector<int> out;
    std::istringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const std::string t = trim(item);
        check(!t.empty(), "config: empty element in list '" + key + "'");
        try {
            out.push_back(std::stoi(t));
        } catch (const std::exception &) {
            fail("config: list '" + key + "' has non-integer element '" + t + "'");
        }
    }
    check(!out.empty(), "config: list '" + key + "' is empty");
    return out;
}

std::vector<int> flat_config::get_int_list_or(const std::string & key,
                                              const std::vector<int> & fallback) const {
    return has(key) ? get_int_list(key) : fallback;
}

void flat_config::set(const std::string & key, const std::string & value) {
    values_[key] = value;
}

std::string flat_config::to_string() const {
    std::ostringstream os;
    for (const auto & [k, v] : values_) {
        os << k << "=" << v << "\n";
    }
    return os.str();
}

}  // namespace cvl
