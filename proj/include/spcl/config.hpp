#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>

#include "spcl/trainer.hpp"

namespace spcl {

/// Flat `key = value` config with `#` comments. Every key must be consumed
/// by a typed getter; finish() turns leftovers into a hard error.
class KeyValueConfig {
public:
    static KeyValueConfig parse_file(const std::filesystem::path& path);
    static KeyValueConfig parse_text(const std::string& text);

    /// Applies a `key=value` override (the --set flag).
    void set(const std::string& assignment);

    bool has(const std::string& key) const { return kv_.count(key) > 0; }
    double get_double(const std::string& key, double fallback) const;
    int get_int(const std::string& key, int fallback) const;
    std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    std::string get_string(const std::string& key, const std::string& fallback) const;

    /// Throws naming any key that was never consumed.
    void finish() const;

private:
    std::map<std::string, std::string> kv_;
    mutable std::set<std::string> touched_;
};

/// Training keys (lr0, momentum, weight_decay, poly_power, iters_a/b/c,
/// batch_source/target, lambda, tau, alpha, threshold_refresh, seed,
/// aug_flip, aug_jitter, eval_every, feature_dim), all optional with the
/// documented defaults.
TrainConfig train_config_from(const KeyValueConfig& cfg);

}  // namespace spcl
