#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "utrack/array.hpp"
#include "utrack/box.hpp"

namespace utrack {

enum class EventTag { kClean, kOccluded, kDeformed, kOutOfView };

const char* to_string(EventTag tag);
EventTag parse_event_tag(const std::string& s);

// Inclusive frame span carrying one event tag.
struct EventSpan {
    std::size_t begin = 0, end = 0;
    EventTag tag = EventTag::kClean;
};

struct SequenceSpec {
    std::size_t length = 60;
    std::size_t frame_size = 64;
    double target_min = 12.0, target_max = 20.0;
    double speed_min = 0.4, speed_max = 1.2;
    std::vector<EventSpan> events;
    double occlusion_coverage = 0.95;  // fraction of the target area overdrawn
    double deform_amp = 0.35;          // anisotropic width/height swing

    // Pinned motion for scripted trajectories; random when unset.
    std::optional<std::array<double, 2>> start_center;
    std::optional<std::array<double, 2>> velocity;
    std::optional<std::array<double, 2>> target_size;
};

// A textured rectangle moving over a textured background. Deterministic for
// a fixed (spec, seed); frames are [3 x H x W] with values in [0, 1].
struct SyntheticSequence {
    std::vector<Array> frames;
    std::vector<BoundingBox> gt;
    std::vector<EventTag> events;
    std::uint64_t seed = 0;

    std::size_t length() const { return frames.size(); }
};

SyntheticSequence gen_synthetic(const SequenceSpec& spec, std::uint64_t seed);

// "occluded:20-32,deformed:40-45" -> spans (inclusive frame ranges).
std::vector<EventSpan> parse_event_script(const std::string& script);

void save_sequence(const SyntheticSequence& seq, const std::string& path);
SyntheticSequence load_sequence(const std::string& path);

}  // namespace utrack
