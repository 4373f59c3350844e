#include "utrack/param_store.hpp"

#include <cmath>
#include <cstring>

#include "utrack/error.hpp"

namespace utrack {

void ParamStore::set(const std::string& name, Array value) {
    if (name.empty() || name.find_first_of(" \t\n") != std::string::npos) {
        throw ContractError("ParamStore: invalid name '" + name + "'");
    }
    if (!value.all_finite()) {
        throw NumericError("ParamStore: non-finite values in '" + name + "'");
    }
    params_.insert_or_assign(name, std::move(value));
}

const Array& ParamStore::at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractError("ParamStore: missing parameter '" + name + "'");
    return it->second;
}

Array& ParamStore::mutable_at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractError("ParamStore: missing parameter '" + name + "'");
    return it->second;
}

std::map<std::string, std::uint64_t> fingerprints(const ParamStore& store) {
    std::map<std::string, std::uint64_t> out;
    for (const auto& [name, arr] : store) {
        std::uint64_t h = 1469598103934665603ULL;
        const auto* bytes = reinterpret_cast<const unsigned char*>(arr.data().data());
        const std::size_t n = arr.size() * sizeof(double);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= bytes[i];
            h *= 1099511628211ULL;
        }
        out[name] = h;
    }
    return out;
}

Array xavier_uniform(const std::vector<std::size_t>& shape, std::size_t fan_in,
                     std::size_t fan_out, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Array out(shape);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = rng.uniform(-bound, bound);
    return out;
}

Var ParamVars::operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    const Var v = tape_->leaf(store_->at(name));
    bound_.emplace(name, v);
    return v;
}

}  // namespace utrack
