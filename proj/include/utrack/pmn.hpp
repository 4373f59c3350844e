#pragma once

#include <cstddef>
#include <vector>

#include "utrack/array.hpp"
#include "utrack/box.hpp"
#include "utrack/param_store.hpp"
#include "utrack/tape.hpp"

namespace utrack {

// Channel-pooled appearance vector of one template.
struct Prototype {
    Array vector;             // [C]
    long source_frame = -1;
    double confidence = 1.0;  // classifier score at insertion time
};

// Ordered prototype store, oldest first, bounded capacity with first-in
// first-out eviction.
class PrototypeBank {
public:
    explicit PrototypeBank(std::size_t capacity);

    void insert(Prototype p);  // evicts the oldest when full
    std::size_t size() const { return entries_.size(); }
    std::size_t capacity() const { return capacity_; }
    bool empty() const { return entries_.empty(); }
    const Prototype& entry(std::size_t i) const { return entries_[i]; }  // 0 = oldest
    const std::vector<Prototype>& entries() const { return entries_; }

private:
    std::size_t capacity_;
    std::vector<Prototype> entries_;
};

// Spatial foreground mask: 0 inside the box, the masked-out sentinel
// elsewhere; at least one live cell.
struct TargetMask {
    Array values;  // [1 x H x W]
};

// Box given in heat-grid units; a cell is live when its center falls inside.
// Degenerate boxes fall back to the single cell under the box center.
TargetMask make_target_mask(const BoundingBox& box_grid, std::size_t grid_h, std::size_t grid_w);

void init_pmn_params(ParamStore& store, std::size_t channels, std::size_t hidden, Rng& rng,
                     std::size_t cim_kernel = 3);

Prototype extract_prototype(const Array& template_feat);  // GAP to [C]
Var extract_prototype(Tape& t, Var template_feat);

// Certainty map from the bounded uncertainty view: sigmoid(conv(1 - u)).
// Inputs must lie in [0, 1]; outputs are strictly inside (0, 1).
Array confidence_inversion(const Array& unc_norm, const ParamStore& params);
Var confidence_inversion(Tape& t, Var unc_norm, ParamVars& params);

// Concat the search features with the certainty channel (features first),
// then project back to C channels with a 1x1 convolution.
Var fuse_features(Tape& t, Var certainty, Var search_feat, ParamVars& params);

// Mask-restricted softmax attention of the prototype over the fused feature
// columns; the result is a convex combination of the live columns.
Array reweight_prototype(const Array& proto, const Array& fused, const TargetMask& mask);
Var reweight_prototype(Tape& t, Var proto, Var fused, const TargetMask& mask);

double cosine_similarity(const Array& a, const Array& b);

// Indices of the top-k bank entries by cosine similarity to the query,
// highest first; ties prefer the newer entry. k is clamped to the bank size.
std::vector<std::size_t> topk_by_similarity(const Array& query, const PrototypeBank& bank,
                                            std::size_t k);

struct MemoryReadResult {
    Var aggregated;                     // [C]
    std::vector<std::size_t> selected;  // bank indices used as the group
};

// Retrieval plus single-query cross-attention over the selected group with a
// residual connection. The value projection is applied to the query
// prototype; set value_from_group for the variant that projects the group
// instead. Throws on an empty bank: callers fall back to the query.
MemoryReadResult memory_read(Tape& t, Var p_star, const PrototypeBank& bank, std::size_t k,
                             ParamVars& params, bool value_from_group = false);

// Two affine layers with ReLU, 2-way softmax; returns the positive-class
// probability.
Var confidence_score(Tape& t, Var p_hat, ParamVars& params);

// Binary cross-entropy over a batch, probabilities clamped to
// [1e-12, 1 - 1e-12].
double prototype_loss(const std::vector<double>& p, const std::vector<int>& y);
Var prototype_loss(Tape& t, const std::vector<Var>& p, const std::vector<int>& y);

// Appends the prototype when its score strictly exceeds the threshold;
// otherwise returns the bank unchanged.
PrototypeBank memory_update(PrototypeBank bank, Prototype proto, double p, double threshold);

}  // namespace utrack
