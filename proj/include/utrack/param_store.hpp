#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>

#include "utrack/array.hpp"
#include "utrack/rng.hpp"
#include "utrack/tape.hpp"

namespace utrack {

// Named parameter arrays. Iteration is lexicographic by name, which fixes
// the serialization order and the optimizer's update order.
class ParamStore {
public:
    void set(const std::string& name, Array value);
    const Array& at(const std::string& name) const;
    Array& mutable_at(const std::string& name);
    bool contains(const std::string& name) const { return params_.count(name) != 0; }
    std::size_t count() const { return params_.size(); }

    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }
    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }

private:
    std::map<std::string, Array> params_;
};

// Per-array FNV-1a over the raw bytes; order-independent equality witness
// for freeze checks and reproducibility tests.
std::map<std::string, std::uint64_t> fingerprints(const ParamStore& store);

// Uniform in +/- sqrt(6 / (fan_in + fan_out)).
Array xavier_uniform(const std::vector<std::size_t>& shape, std::size_t fan_in,
                     std::size_t fan_out, Rng& rng);

// Binds parameters to leaves on one tape, memoized per name so that every
// use of a parameter shares a single node and gradients accumulate.
class ParamVars {
public:
    ParamVars(Tape& tape, const ParamStore& store) : tape_(&tape), store_(&store) {}

    Var operator()(const std::string& name);

    // Registers an existing leaf as the node for `name`; later uses share it.
    void bind(const std::string& name, Var v) { bound_.insert_or_assign(name, v); }

    const std::unordered_map<std::string, Var>& bound() const { return bound_; }
    const ParamStore& store() const { return *store_; }

private:
    Tape* tape_;
    const ParamStore* store_;
    std::unordered_map<std::string, Var> bound_;
};

}  // namespace utrack
