#include "utrack/kalman.hpp"

#include <cmath>

#include "utrack/error.hpp"
#include "utrack/ops.hpp"

namespace utrack {

namespace {

constexpr std::size_t kDim = 8;
constexpr std::size_t kMeas = 4;

Array identity(std::size_t n) {
    Array m({n, n});
    for (std::size_t i = 0; i < n; ++i) m.at(i, i) = 1.0;
    return m;
}

Array transition() {
    Array f = identity(kDim);
    for (std::size_t i = 0; i < kMeas; ++i) f.at(i, i + kMeas) = 1.0;
    return f;
}

Array symmetrize(const Array& m) {
    Array out(m.shape());
    for (std::size_t i = 0; i < m.extent(0); ++i)
        for (std::size_t j = 0; j < m.extent(1); ++j) out.at(i, j) = 0.5 * (m.at(i, j) + m.at(j, i));
    return out;
}

// Gaussian elimination with partial pivoting; rhs columns solved in place.
Array solve(Array a, Array rhs) {
    const std::size_t n = a.extent(0), m = rhs.extent(1);
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t piv = col;
        for (std::size_t r = col + 1; r < n; ++r) {
            if (std::abs(a.at(r, col)) > std::abs(a.at(piv, col))) piv = r;
        }
        if (std::abs(a.at(piv, col)) < 1e-300) {
            throw NumericError("kalman: singular innovation covariance");
        }
        if (piv != col) {
            for (std::size_t j = 0; j < n; ++j) std::swap(a.at(col, j), a.at(piv, j));
            for (std::size_t j = 0; j < m; ++j) std::swap(rhs.at(col, j), rhs.at(piv, j));
        }
        const double d = a.at(col, col);
        for (std::size_t r = 0; r < n; ++r) {
            if (r == col) continue;
            const double q = a.at(r, col) / d;
            if (q == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) a.at(r, j) -= q * a.at(col, j);
            for (std::size_t j = 0; j < m; ++j) rhs.at(r, j) -= q * rhs.at(col, j);
        }
    }
    for (std::size_t r = 0; r < n; ++r) {
        const double d = a.at(r, r);
        for (std::size_t j = 0; j < m; ++j) rhs.at(r, j) /= d;
    }
    return rhs;
}

void check_state(const KalmanState& s) {
    if (s.mean.size() != kDim || s.covariance.rank() != 2 || s.covariance.extent(0) != kDim ||
        s.covariance.extent(1) != kDim) {
        throw ShapeError("kalman: state must be mean [8] and covariance [8x8]");
    }
    if (!s.mean.all_finite() || !s.covariance.all_finite()) {
        throw NumericError("kalman: non-finite state");
    }
    if (max_symmetry_error(s.covariance) > 1e-6 || min_symmetric_eigenvalue(s.covariance) < -1e-6) {
        throw NumericError("kalman: covariance not symmetric positive semidefinite");
    }
}

}  // namespace

KalmanState kalman_init(const BoundingBox& box, const KalmanConfig& cfg) {
    KalmanState s{Array({kDim}), Array({kDim, kDim})};
    const auto z = box_to_cxcywh(box);
    for (std::size_t i = 0; i < kMeas; ++i) s.mean[i] = z[i];
    for (std::size_t i = 0; i < kMeas; ++i) {
        s.covariance.at(i, i) = cfg.init_pos;
        s.covariance.at(i + kMeas, i + kMeas) = cfg.init_vel;
    }
    return s;
}

KalmanState kalman_step(const KalmanState& state,
                        const std::optional<std::array<double, 4>>& observation,
                        const KalmanConfig& cfg) {
    check_state(state);
    const Array f = transition();

    // Predict.
    Array mean = matmul(f, Array({kDim, 1}, state.mean.data()));
    Array cov = matmul(matmul(f, state.covariance), transpose2d(f));
    for (std::size_t i = 0; i < kMeas; ++i) {
        cov.at(i, i) += cfg.process_pos;
        cov.at(i + kMeas, i + kMeas) += cfg.process_vel;
    }

    if (observation) {
        // Innovation y = z - H m with H = [I 0].
        Array innov({kMeas, 1});
        for (std::size_t i = 0; i < kMeas; ++i) innov.at(i, 0) = (*observation)[i] - mean.at(i, 0);

        // S = H P H^T + R is the top-left block plus the measurement noise.
        Array s_mat({kMeas, kMeas});
        for (std::size_t i = 0; i < kMeas; ++i) {
            for (std::size_t j = 0; j < kMeas; ++j) s_mat.at(i, j) = cov.at(i, j);
            s_mat.at(i, i) += cfg.measurement;
        }

        // K = P H^T S^{-1}, via S^T X^T = (P H^T)^T.
        Array pht({kDim, kMeas});
        for (std::size_t i = 0; i < kDim; ++i)
            for (std::size_t j = 0; j < kMeas; ++j) pht.at(i, j) = cov.at(i, j);
        Array gain = transpose2d(solve(transpose2d(s_mat), transpose2d(pht)));

        Array corr = matmul(gain, innov);
        for (std::size_t i = 0; i < kDim; ++i) mean.at(i, 0) += corr.at(i, 0);

        // Joseph form: (I - K H) P (I - K H)^T + K R K^T.
        Array ikh = identity(kDim);
        for (std::size_t i = 0; i < kDim; ++i)
            for (std::size_t j = 0; j < kMeas; ++j) ikh.at(i, j) -= gain.at(i, j);
        cov = matmul(matmul(ikh, cov), transpose2d(ikh));
        for (std::size_t i = 0; i < kDim; ++i)
            for (std::size_t j = 0; j < kDim; ++j) {
                double acc = 0.0;
                for (std::size_t q = 0; q < kMeas; ++q)
                    acc += gain.at(i, q) * cfg.measurement * gain.at(j, q);
                cov.at(i, j) += acc;
            }
    }

    cov = symmetrize(cov);
    KalmanState out{Array({kDim}, mean.data()), std::move(cov)};
    out.mean[2] = std::max(out.mean[2], 0.0);
    out.mean[3] = std::max(out.mean[3], 0.0);
    return out;
}

BoundingBox kalman_box(const KalmanState& state) {
    return BoundingBox::from_center(state.mean[0], state.mean[1], state.mean[2], state.mean[3]);
}

std::array<double, 4> box_to_cxcywh(const BoundingBox& box) {
    return {box.cx(), box.cy(), box.width(), box.height()};
}

double max_symmetry_error(const Array& m) {
    double worst = 0.0;
    for (std::size_t i = 0; i < m.extent(0); ++i)
        for (std::size_t j = 0; j < m.extent(1); ++j)
            worst = std::max(worst, std::abs(m.at(i, j) - m.at(j, i)));
    return worst;
}

double min_symmetric_eigenvalue(const Array& m) {
    const std::size_t n = m.extent(0);
    Array a = symmetrize(m);
    for (std::size_t sweep = 0; sweep < 64; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += a.at(p, q) * a.at(p, q);
        if (off < 1e-24) break;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a.at(p, q);
                if (std::abs(apq) < 1e-300) continue;
                const double theta = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
                const double sgn = theta >= 0.0 ? 1.0 : -1.0;
                const double tau = sgn / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(tau * tau + 1.0);
                const double s = tau * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a.at(k, p), akq = a.at(k, q);
                    a.at(k, p) = c * akp - s * akq;
                    a.at(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a.at(p, k), aqk = a.at(q, k);
                    a.at(p, k) = c * apk - s * aqk;
                    a.at(q, k) = s * apk + c * aqk;
                }
            }
        }
    }
    double mn = a.at(0, 0);
    for (std::size_t i = 1; i < n; ++i) mn = std::min(mn, a.at(i, i));
    return mn;
}

}  // namespace utrack
