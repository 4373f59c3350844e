#pragma once

#include <string>

#include "utrack/param_store.hpp"

namespace utrack {

// Single-file format: a text header with one line per array -- name, rank,
// extents, element count, in lexicographic name order -- then a DATA marker
// and the raw little-endian 64-bit floats concatenated in the same order.
// Save/load round-trips byte-identically.
void save_weights(const ParamStore& store, const std::string& path);
ParamStore load_weights(const std::string& path);

}  // namespace utrack
