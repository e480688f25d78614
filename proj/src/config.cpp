#include "spcl/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace spcl {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

KeyValueConfig KeyValueConfig::parse_text(const std::string& text) {
    KeyValueConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        if (trim(line).empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::runtime_error("config line " + std::to_string(lineno) +
                                     ": expected key = value");
        }
        const std::string key = trim(line.substr(0, eq));
        if (key.empty()) {
            throw std::runtime_error("config line " + std::to_string(lineno) + ": empty key");
        }
        cfg.kv_[key] = trim(line.substr(eq + 1));
    }
    return cfg;
}

KeyValueConfig KeyValueConfig::parse_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read config " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_text(buf.str());
}

void KeyValueConfig::set(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw std::runtime_error("--set expects key=value, got '" + assignment + "'");
    }
    kv_[trim(assignment.substr(0, eq))] = trim(assignment.substr(eq + 1));
}

double KeyValueConfig::get_double(const std::string& key, double fallback) const {
    touched_.insert(key);
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    try {
        std::size_t pos = 0;
        const double v = std::stod(it->second, &pos);
        if (pos != it->second.size()) throw std::invalid_argument(it->second);
        return v;
    } catch (const std::exception&) {
        throw std::runtime_error("config: key '" + key + "' is not a number: '" + it->second + "'");
    }
}

int KeyValueConfig::get_int(const std::string& key, int fallback) const {
    const double v = get_double(key, static_cast<double>(fallback));
    const int i = static_cast<int>(v);
    if (static_cast<double>(i) != v) {
        throw std::runtime_error("config: key '" + key + "' must be an integer");
    }
    return i;
}

std::uint64_t KeyValueConfig::get_u64(const std::string& key, std::uint64_t fallback) const {
    touched_.insert(key);
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    try {
        return std::stoull(it->second);
    } catch (const std::exception&) {
        throw std::runtime_error("config: key '" + key + "' is not an unsigned integer");
    }
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) const {
    touched_.insert(key);
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    const std::string& v = it->second;
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw std::runtime_error("config: key '" + key + "' must be true/false/1/0");
}

std::string KeyValueConfig::get_string(const std::string& key, const std::string& fallback) const {
    touched_.insert(key);
    auto it = kv_.find(key);
    return it == kv_.end() ? fallback : it->second;
}

void KeyValueConfig::finish() const {
    std::string unknown;
    for (const auto& [key, value] : kv_) {
        if (!touched_.count(key)) unknown += (unknown.empty() ? "" : ", ") + key;
    }
    if (!unknown.empty()) throw std::runtime_error("config: unrecognized keys: " + unknown);
}

TrainConfig train_config_from(const KeyValueConfig& cfg) {
    TrainConfig t;
    t.lr0 = cfg.get_double("lr0", t.lr0);
    t.momentum = cfg.get_double("momentum", t.momentum);
    t.weight_decay = cfg.get_double("weight_decay", t.weight_decay);
    t.poly_power = cfg.get_double("poly_power", t.poly_power);
    t.iters_a = cfg.get_int("iters_a", t.iters_a);
    t.iters_b = cfg.get_int("iters_b", t.iters_b);
    t.iters_c = cfg.get_int("iters_c", t.iters_c);
    t.batch_source = cfg.get_int("batch_source", t.batch_source);
    t.batch_target = cfg.get_int("batch_target", t.batch_target);
    t.lambda = cfg.get_double("lambda", t.lambda);
    t.tau = cfg.get_double("tau", t.tau);
    t.alpha = cfg.get_double("alpha", t.alpha);
    t.threshold_refresh = cfg.get_int("threshold_refresh", t.threshold_refresh);
    t.seed = cfg.get_u64("seed", t.seed);
    t.aug_flip = cfg.get_bool("aug_flip", t.aug_flip);
    t.aug_jitter = cfg.get_bool("aug_jitter", t.aug_jitter);
    t.eval_every = cfg.get_int("eval_every", t.eval_every);
    t.feature_dim = cfg.get_int("feature_dim", t.feature_dim);
    t.use_cl_s = cfg.get_bool("use_cl_s", t.use_cl_s);
    t.use_cl_t = cfg.get_bool("use_cl_t", t.use_cl_t);
    t.validate();
    return t;
}

}  // namespace spcl
