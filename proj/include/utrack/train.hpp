#pragma once

#include <map>
#include <vector>

#include "utrack/config.hpp"
#include "utrack/param_store.hpp"
#include "utrack/synth.hpp"

namespace utrack {

// Fresh parameters for every module, seeded.
ParamStore init_all_params(const RunConfig& cfg, std::uint64_t seed);

// Training corpus: mostly clean constant-velocity sequences, a share of them
// carrying one scripted occlusion span (and occasionally deformation).
std::vector<SyntheticSequence> make_training_corpus(const RunConfig& cfg, std::uint64_t seed);

// One localization training sample: paired crops plus the supervision box in
// search-patch pixels. On occluded frames the supervision is perturbed, so
// those targets are noisy by construction.
struct TrainSample {
    Array template_img;
    Array search_patch;
    BoundingBox target;
    EventTag tag = EventTag::kClean;
};

TrainSample sample_stage1(const std::vector<SyntheticSequence>& data, const RunConfig& cfg,
                          Rng& rng, bool corrupt_occluded = true);

// Mean stage-1 objective over a batch; fills `grads` (per parameter name)
// when given.
double stage1_batch_loss(const RunConfig& cfg, const ParamStore& params,
                         const std::vector<TrainSample>& batch,
                         std::map<std::string, Array>* grads);

struct Stage1Log {
    std::vector<double> losses;
    double probe_before = 0.0;
    double probe_after = 0.0;
    bool diverged = false;
};

// Trains the encoder and the localization decoder in place. On divergence
// the last finite parameter state is restored.
Stage1Log train_stage1(const RunConfig& cfg, ParamStore& params,
                       const std::vector<SyntheticSequence>& data);

// Template/search pair with a same-sequence (1) or cross-sequence (0) label.
struct PairSample {
    int label = 0;
    std::size_t template_seq = 0, template_frame = 0;
    std::size_t search_seq = 0, search_frame = 0;
};

// Balanced pair stream: positives pair a clean template frame with a clean
// search frame of the same sequence, negatives draw the search from another
// sequence.
class Stage2Sampler {
public:
    Stage2Sampler(const std::vector<SyntheticSequence>& data, std::uint64_t seed);
    PairSample next();

private:
    const std::vector<SyntheticSequence>* data_;
    std::vector<std::vector<std::size_t>> clean_frames_;
    Rng rng_;
};

struct Stage2Log {
    std::vector<double> losses;
    double holdout_accuracy = 0.0;
    bool diverged = false;
};

// Trains the memory network with the encoder and decoder frozen; reports
// held-out pair accuracy.
Stage2Log train_stage2(const RunConfig& cfg, ParamStore& params,
                       const std::vector<SyntheticSequence>& data);

struct SigmaStats {
    double mean_clean = 0.0;
    double mean_occluded = 0.0;
    std::size_t n_clean = 0, n_occluded = 0;
};

// Predicted sigma (mean of the four coordinates) on uncorrupted probe crops,
// split by the frame's event tag.
SigmaStats measure_sigma_by_event(const RunConfig& cfg, const ParamStore& params,
                                  const std::vector<SyntheticSequence>& data,
                                  std::size_t samples, std::uint64_t seed);

}  // namespace utrack
