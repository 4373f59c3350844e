#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "utrack/array.hpp"

namespace utrack {

// Handle to a value recorded on a Tape.
struct Var {
    std::int32_t id = -1;
    bool valid() const { return id >= 0; }
};

// Record of a forward computation. Every primitive appends one node holding
// its output value, a forward closure that recomputes the output from the
// input values (used by replay), and a backward closure mapping the output
// adjoint to one adjoint contribution per input. Nodes are stored in
// topological order by construction; a tape is single-owner while recording.
class Tape {
public:
    using Inputs = std::vector<const Array*>;
    using ForwardFn = std::function<Array(const Inputs&)>;
    using BackwardFn = std::function<std::vector<Array>(const Array& grad_out, const Inputs& in,
                                                        const Array& out)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) = default;
    Tape& operator=(Tape&&) = default;

    Var leaf(Array value);
    Var leaf(double scalar_value);

    Var record(const char* op, std::vector<Var> inputs, Array output, ForwardFn forward,
               BackwardFn backward);

    const Array& value(Var v) const;
    double scalar(Var v) const;  // value must hold exactly one element
    std::size_t size() const { return nodes_.size(); }
    const char* op_name(Var v) const;

    // Reverse accumulation seeded at a scalar output. Returns one adjoint
    // array per node (zeros where the output does not depend on the node).
    std::vector<Array> backward(Var output) const;

    // Recomputes every node in order; true when all results are bit-identical
    // to the stored values.
    bool replay_matches() const;

private:
    struct Node {
        const char* op;
        std::vector<Var> inputs;
        Array value;
        ForwardFn forward;
        BackwardFn backward;
    };

    const Node& node(Var v) const;

    std::vector<Node> nodes_;
};

using Gradients = std::vector<Array>;

}  // namespace utrack
