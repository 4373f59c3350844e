#include "utrack/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "utrack/error.hpp"
#include "utrack/rng.hpp"

namespace utrack {

const char* to_string(EventTag tag) {
    switch (tag) {
        case EventTag::kClean: return "clean";
        case EventTag::kOccluded: return "occluded";
        case EventTag::kDeformed: return "deformed";
        case EventTag::kOutOfView: return "out_of_view";
    }
    return "clean";
}

EventTag parse_event_tag(const std::string& s) {
    if (s == "clean") return EventTag::kClean;
    if (s == "occluded") return EventTag::kOccluded;
    if (s == "deformed") return EventTag::kDeformed;
    if (s == "out_of_view") return EventTag::kOutOfView;
    throw InputError("unknown event tag '" + s + "'");
}

std::vector<EventSpan> parse_event_script(const std::string& script) {
    std::vector<EventSpan> spans;
    std::istringstream in(script);
    std::string item;
    while (std::getline(in, item, ',')) {
        if (item.empty()) continue;
        const auto colon = item.find(':');
        const auto dash = item.find('-', colon == std::string::npos ? 0 : colon);
        if (colon == std::string::npos || dash == std::string::npos) {
            throw InputError("event script item '" + item + "' is not tag:begin-end");
        }
        EventSpan s;
        s.tag = parse_event_tag(item.substr(0, colon));
        s.begin = static_cast<std::size_t>(std::stoul(item.substr(colon + 1, dash - colon - 1)));
        s.end = static_cast<std::size_t>(std::stoul(item.substr(dash + 1)));
        if (s.end < s.begin) throw InputError("event span '" + item + "' ends before it begins");
        spans.push_back(s);
    }
    return spans;
}

namespace {

struct Wave {
    double fx, fy, phase, amp;
};

// Smooth periodic field per channel; cheap, deterministic texture.
struct Texture {
    std::array<double, 3> base{};
    std::array<std::array<Wave, 3>, 3> waves{};

    static Texture random(Rng& rng, double base_lo, double base_hi) {
        Texture t;
        for (std::size_t c = 0; c < 3; ++c) {
            t.base[c] = rng.uniform(base_lo, base_hi);
            for (auto& w : t.waves[c]) {
                w = Wave{rng.uniform(0.15, 0.9), rng.uniform(0.15, 0.9),
                         rng.uniform(0.0, 6.283185307179586), rng.uniform(0.04, 0.11)};
            }
        }
        return t;
    }

    double sample(std::size_t c, double x, double y) const {
        double v = base[c];
        for (const auto& w : t_waves(c)) v += w.amp * std::sin(w.fx * x + w.fy * y + w.phase);
        return std::clamp(v, 0.0, 1.0);
    }

private:
    const std::array<Wave, 3>& t_waves(std::size_t c) const { return waves[c]; }
};

EventTag tag_for_frame(const SequenceSpec& spec, std::size_t f) {
    for (const EventSpan& s : spec.events) {
        if (f >= s.begin && f <= s.end) return s.tag;
    }
    return EventTag::kClean;
}

void paint_box(Array& frame, const BoundingBox& box, const Texture& tex, bool anchor_to_box) {
    const std::size_t h = frame.extent(1), w = frame.extent(2);
    const long x0 = std::max(0L, static_cast<long>(std::ceil(box.x_tl)));
    const long x1 = std::min(static_cast<long>(w) - 1, static_cast<long>(std::floor(box.x_br)));
    const long y0 = std::max(0L, static_cast<long>(std::ceil(box.y_tl)));
    const long y1 = std::min(static_cast<long>(h) - 1, static_cast<long>(std::floor(box.y_br)));
    for (long y = y0; y <= y1; ++y) {
        for (long x = x0; x <= x1; ++x) {
            // Anchoring the texture to box coordinates makes it ride along
            // with the target and stretch under deformation.
            const double tx = anchor_to_box ? (static_cast<double>(x) - box.x_tl) * 24.0 /
                                                  std::max(box.width(), 1.0)
                                            : static_cast<double>(x);
            const double ty = anchor_to_box ? (static_cast<double>(y) - box.y_tl) * 24.0 /
                                                  std::max(box.height(), 1.0)
                                            : static_cast<double>(y);
            for (std::size_t c = 0; c < 3; ++c) {
                frame.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) =
                    tex.sample(c, tx, ty);
            }
        }
    }
}

}  // namespace

SyntheticSequence gen_synthetic(const SequenceSpec& spec, std::uint64_t seed) {
    if (spec.length == 0) throw ConfigError("gen_synthetic: empty sequence");
    if (spec.target_max >= static_cast<double>(spec.frame_size)) {
        throw ConfigError("gen_synthetic: target does not fit inside the frame");
    }
    for (const EventSpan& s : spec.events) {
        if (s.end >= spec.length) {
            throw ConfigError("gen_synthetic: event span exceeds sequence length");
        }
    }
    Rng rng(seed ^ 0x5eedba5eULL);

    const Texture bg = Texture::random(rng, 0.25, 0.75);
    Texture target = Texture::random(rng, 0.05, 0.95);
    // Push the target palette away from the background so sequences stay
    // separable from one another and from their own backdrop.
    for (std::size_t c = 0; c < 3; ++c) {
        if (std::abs(target.base[c] - bg.base[c]) < 0.25) {
            target.base[c] = bg.base[c] > 0.5 ? bg.base[c] - 0.35 : bg.base[c] + 0.35;
        }
    }
    // One shared occluder look: flat gray with faint stripes.
    Texture occluder;
    occluder.base = {0.5, 0.5, 0.5};
    for (std::size_t c = 0; c < 3; ++c) {
        occluder.waves[c] = {Wave{0.7, 0.0, 0.0, 0.05}, Wave{0.0, 0.7, 1.1, 0.05},
                             Wave{0.3, 0.3, 2.3, 0.02}};
    }

    const double fsize = static_cast<double>(spec.frame_size);
    const double w0 = spec.target_size ? (*spec.target_size)[0]
                                       : rng.uniform(spec.target_min, spec.target_max);
    const double h0 = spec.target_size ? (*spec.target_size)[1]
                                       : rng.uniform(spec.target_min, spec.target_max);
    double vx, vy;
    if (spec.velocity) {
        vx = (*spec.velocity)[0];
        vy = (*spec.velocity)[1];
    } else {
        const double speed = rng.uniform(spec.speed_min, spec.speed_max);
        const double angle = rng.uniform(0.0, 6.283185307179586);
        vx = speed * std::cos(angle);
        vy = speed * std::sin(angle);
    }
    const double margin_x = w0 / 2.0 + 1.0, margin_y = h0 / 2.0 + 1.0;
    double cx = spec.start_center ? (*spec.start_center)[0]
                                  : rng.uniform(margin_x, fsize - margin_x);
    double cy = spec.start_center ? (*spec.start_center)[1]
                                  : rng.uniform(margin_y, fsize - margin_y);

    SyntheticSequence seq;
    seq.seed = seed;
    std::size_t deform_phase = 0;
    for (std::size_t f = 0; f < spec.length; ++f) {
        const EventTag tag = tag_for_frame(spec, f);

        double wf = w0, hf = h0;
        if (tag == EventTag::kDeformed) {
            const double s = std::sin(2.0 * 3.14159265358979323846 *
                                      static_cast<double>(++deform_phase) / 12.0);
            wf = w0 * (1.0 + spec.deform_amp * s);
            hf = h0 * (1.0 - spec.deform_amp * s);
        } else {
            deform_phase = 0;
        }

        double draw_cx = cx, draw_cy = cy;
        if (tag == EventTag::kOutOfView) {
            draw_cx = cx + fsize;  // pushed fully past the right border
        }
        BoundingBox box = BoundingBox::from_center(draw_cx, draw_cy, wf, hf);
        if (tag != EventTag::kOutOfView) {
            box = {std::clamp(box.x_tl, 0.0, fsize - 1.0), std::clamp(box.y_tl, 0.0, fsize - 1.0),
                   std::clamp(box.x_br, 0.0, fsize - 1.0), std::clamp(box.y_br, 0.0, fsize - 1.0)};
        }

        Array frame({3, spec.frame_size, spec.frame_size});
        for (std::size_t y = 0; y < spec.frame_size; ++y)
            for (std::size_t x = 0; x < spec.frame_size; ++x)
                for (std::size_t c = 0; c < 3; ++c)
                    frame.at(c, y, x) = bg.sample(c, static_cast<double>(x), static_cast<double>(y));

        paint_box(frame, box, target, true);
        if (tag == EventTag::kOccluded) {
            const double scale = std::sqrt(spec.occlusion_coverage);
            paint_box(frame, BoundingBox::from_center(draw_cx, draw_cy, wf * scale, hf * scale),
                      occluder, false);
        }

        seq.frames.push_back(std::move(frame));
        seq.gt.push_back(box);
        seq.events.push_back(tag);

        cx += vx;
        cy += vy;
        if (cx < margin_x || cx > fsize - margin_x) {
            vx = -vx;
            cx = std::clamp(cx, margin_x, fsize - margin_x);
        }
        if (cy < margin_y || cy > fsize - margin_y) {
            vy = -vy;
            cy = std::clamp(cy, margin_y, fsize - margin_y);
        }
    }
    return seq;
}

void save_sequence(const SyntheticSequence& seq, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw InputError("save_sequence: cannot write '" + path + "'");
    f << "USEQ1\n" << seq.length() << " " << seq.frames[0].extent(1) << " "
      << seq.frames[0].extent(2) << " " << seq.seed << "\n";
    for (std::size_t i = 0; i < seq.length(); ++i) {
        const BoundingBox& b = seq.gt[i];
        char line[160];
        std::snprintf(line, sizeof(line), "%.17g %.17g %.17g %.17g %s\n", b.x_tl, b.y_tl, b.x_br,
                      b.y_br, to_string(seq.events[i]));
        f << line;
    }
    f << "DATA\n";
    for (const Array& frame : seq.frames) {
        f.write(reinterpret_cast<const char*>(frame.data().data()),
                static_cast<std::streamsize>(frame.size() * sizeof(double)));
    }
    if (!f) throw InputError("save_sequence: write failed for '" + path + "'");
}

SyntheticSequence load_sequence(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw InputError("load_sequence: cannot open '" + path + "'");
    std::string magic;
    std::getline(f, magic);
    if (magic != "USEQ1") throw InputError("load_sequence: '" + path + "' is not a sequence file");
    std::size_t n = 0, h = 0, w = 0;
    std::uint64_t seed = 0;
    f >> n >> h >> w >> seed;
    SyntheticSequence seq;
    seq.seed = seed;
    for (std::size_t i = 0; i < n; ++i) {
        BoundingBox b;
        std::string tag;
        f >> b.x_tl >> b.y_tl >> b.x_br >> b.y_br >> tag;
        seq.gt.push_back(b);
        seq.events.push_back(parse_event_tag(tag));
    }
    std::string line;
    std::getline(f, line);  // end of the last header line
    std::getline(f, line);
    if (line != "DATA") throw InputError("load_sequence: missing DATA marker in '" + path + "'");
    for (std::size_t i = 0; i < n; ++i) {
        Array frame({3, h, w});
        f.read(reinterpret_cast<char*>(frame.data().data()),
               static_cast<std::streamsize>(frame.size() * sizeof(double)));
        if (!f) throw InputError("load_sequence: truncated frame data in '" + path + "'");
        seq.frames.push_back(std::move(frame));
    }
    return seq;
}

}  // namespace utrack
