#include "utrack/tape.hpp"

#include "utrack/error.hpp"

namespace utrack {

Var Tape::leaf(Array value) {
    nodes_.push_back(Node{"leaf", {}, std::move(value), nullptr, nullptr});
    return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

Var Tape::leaf(double scalar_value) { return leaf(Array::scalar(scalar_value)); }

Var Tape::record(const char* op, std::vector<Var> inputs, Array output, ForwardFn forward,
                 BackwardFn backward) {
    for (Var v : inputs) {
        if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size()) {
            throw ContractError(std::string("tape: invalid input handle for op ") + op);
        }
    }
    nodes_.push_back(Node{op, std::move(inputs), std::move(output), std::move(forward),
                          std::move(backward)});
    return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

const Tape::Node& Tape::node(Var v) const {
    if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size()) {
        throw ContractError("tape: invalid handle");
    }
    return nodes_[static_cast<std::size_t>(v.id)];
}

const Array& Tape::value(Var v) const { return node(v).value; }

double Tape::scalar(Var v) const {
    const Array& a = node(v).value;
    if (a.size() != 1) {
        throw ContractError("tape: scalar read on non-scalar node of shape " + a.shape_str());
    }
    return a[0];
}

const char* Tape::op_name(Var v) const { return node(v).op; }

std::vector<Array> Tape::backward(Var output) const {
    const Node& out = node(output);
    if (out.value.size() != 1) {
        throw ContractError("backward: seed must be scalar, got shape " + out.value.shape_str());
    }
    std::vector<Array> adjoints(nodes_.size());
    std::vector<bool> touched(nodes_.size(), false);
    for (std::size_t i = 0; i < nodes_.size(); ++i) adjoints[i] = Array(nodes_[i].value.shape());
    adjoints[static_cast<std::size_t>(output.id)][0] = 1.0;
    touched[static_cast<std::size_t>(output.id)] = true;

    for (std::size_t i = static_cast<std::size_t>(output.id) + 1; i-- > 0;) {
        const Node& n = nodes_[i];
        if (!touched[i] || n.inputs.empty()) continue;
        Inputs in;
        in.reserve(n.inputs.size());
        for (Var v : n.inputs) in.push_back(&nodes_[static_cast<std::size_t>(v.id)].value);
        std::vector<Array> contrib = n.backward(adjoints[i], in, n.value);
        if (contrib.size() != n.inputs.size()) {
            throw ContractError(std::string("backward: op ") + n.op +
                                " returned wrong number of input gradients");
        }
        for (std::size_t j = 0; j < n.inputs.size(); ++j) {
            const std::size_t id = static_cast<std::size_t>(n.inputs[j].id);
            Array& dst = adjoints[id];
            const Array& src = contrib[j];
            if (!dst.same_shape(src)) {
                throw ContractError(std::string("backward: op ") + n.op + " produced gradient " +
                                    src.shape_str() + " for input of shape " + dst.shape_str());
            }
            for (std::size_t e = 0; e < dst.size(); ++e) dst[e] += src[e];
            touched[id] = true;
        }
    }
    return adjoints;
}

bool Tape::replay_matches() const {
    for (const Node& n : nodes_) {
        if (n.inputs.empty()) continue;
        Inputs in;
        in.reserve(n.inputs.size());
        for (Var v : n.inputs) in.push_back(&nodes_[static_cast<std::size_t>(v.id)].value);
        const Array redone = n.forward(in);
        if (!redone.bit_equal(n.value)) return false;
    }
    return true;
}

}  // namespace utrack
