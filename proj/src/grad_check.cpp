#include "utrack/grad_check.hpp"

#include <cmath>

#include "utrack/error.hpp"

namespace utrack {

namespace {

double evaluate(const ScalarFn& f, const std::vector<Array>& point) {
    Tape t;
    std::vector<Var> leaves;
    leaves.reserve(point.size());
    for (const Array& a : point) leaves.push_back(t.leaf(a));
    const double v = t.scalar(f(t, leaves));
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite evaluation");
    return v;
}

}  // namespace

GradCheckReport grad_check(const ScalarFn& f, const std::vector<Array>& point, double eps) {
    if (eps <= 0.0) throw ContractError("grad_check: eps must be positive");

    Tape t;
    std::vector<Var> leaves;
    leaves.reserve(point.size());
    for (const Array& a : point) leaves.push_back(t.leaf(a));
    const Var out = f(t, leaves);
    if (!std::isfinite(t.scalar(out))) throw NumericError("grad_check: non-finite evaluation");
    const Gradients adj = t.backward(out);

    GradCheckReport report;
    std::vector<Array> probe = point;
    for (std::size_t a = 0; a < probe.size(); ++a) {
        for (std::size_t i = 0; i < probe[a].size(); ++i) {
            const double orig = probe[a][i];
            probe[a][i] = orig + eps;
            const double fp = evaluate(f, probe);
            probe[a][i] = orig - eps;
            const double fm = evaluate(f, probe);
            probe[a][i] = orig;

            const double numeric = (fp - fm) / (2.0 * eps);
            const double analytic = adj[static_cast<std::size_t>(leaves[a].id)][i];
            const double denom = std::max({1.0, std::abs(analytic), std::abs(numeric)});
            const double rel = std::abs(analytic - numeric) / denom;
            if (rel > report.max_rel_error) {
                report = {rel, a, i, analytic, numeric};
            }
        }
    }
    return report;
}

}  // namespace utrack
