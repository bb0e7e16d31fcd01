#pragma once

// IsoFLOP analysis: per-budget quadratic fits of loss against log model
// size, and the power-law regression over the per-budget optima. All fits
// use natural logs; the log base cancels in the exponent and only rescales
// the intercept.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mdm {

struct RunRecord {
    double n_params = 0.0;  // N
    double tokens = 0.0;    // D
    double flops = 0.0;     // C = 6*N*D
    double loss = 0.0;      // validation loss, nats/token

    void validate() const {
        if (!(n_params > 0.0) || !(tokens > 0.0) || !(loss > 0.0)) {
            throw std::invalid_argument("RunRecord: N, D, loss must be positive");
        }
        const double derived = 6.0 * n_params * tokens;
        if (std::abs(flops - derived) > 1e-6 * derived) {
            throw std::invalid_argument("RunRecord: C does not equal 6*N*D within 1e-6");
        }
    }
};

// loss ~ a*(ln N)^2 + b*ln N + c. A valid interior minimum needs a > 0;
// degenerate fits are flagged, never extrapolated.
struct QuadFit {
    double a = 0.0;
    double b = 0.0;
    double c = 0.0;
    bool degenerate = false;
    double n_star = 0.0;  // exp(-b / 2a)
    double l_star = 0.0;  // c - b^2 / 4a
    double residual = 0.0;
};

namespace detail {

// Solve a small dense system by Gaussian elimination with partial pivoting.
inline std::vector<double> solve_linear(std::vector<double> m, std::vector<double> rhs, int n) {
    for (int col = 0; col < n; ++col) {
        int pivot = col;
        for (int r = col + 1; r < n; ++r) {
            if (std::abs(m[static_cast<std::size_t>(r * n + col)]) >
                std::abs(m[static_cast<std::size_t>(pivot * n + col)])) {
                pivot = r;
            }
        }
        if (m[static_cast<std::size_t>(pivot * n + col)] == 0.0) {
            throw std::invalid_argument("solve_linear: singular system");
        }
        for (int c = 0; c < n; ++c) {
            std::swap(m[static_cast<std::size_t>(col * n + c)], m[static_cast<std::size_t>(pivot * n + c)]);
        }
        std::swap(rhs[static_cast<std::size_t>(col)], rhs[static_cast<std::size_t>(pivot)]);
        for (int r = col + 1; r < n; ++r) {
            const double f = m[static_cast<std::size_t>(r * n + col)] /
                             m[static_cast<std::size_t>(col * n + col)];
            for (int c = col; c < n; ++c) {
                m[static_cast<std::size_t>(r * n + c)] -= f * m[static_cast<std::size_t>(col * n + c)];
            }
            rhs[static_cast<std::size_t>(r)] -= f * rhs[static_cast<std::size_t>(col)];
        }
    }
    std::vector<double> x(static_cast<std::size_t>(n));
    for (int r = n - 1; r >= 0; --r) {
        double v = rhs[static_cast<std::size_t>(r)];
        for (int c = r + 1; c < n; ++c) {
            v -= m[static_cast<std::size_t>(r * n + c)] * x[static_cast<std::size_t>(c)];
        }
        x[static_cast<std::size_t>(r)] = v / m[static_cast<std::size_t>(r * n + r)];
    }
    return x;
}

} // namespace detail

// Least-squares quadratic of loss on ln N over (N, loss) points.
inline QuadFit quad_fit(std::span<const std::pair<double, double>> points) {
    std::vector<double> distinct;
    for (const auto& [n, loss] : points) {
        if (!(n > 0.0)) throw std::invalid_argument("quad_fit: N must be positive");
        if (!(loss > 0.0)) throw std::invalid_argument("quad_fit: loss must be positive");
        if (std::find(distinct.begin(), distinct.end(), n) == distinct.end()) distinct.push_back(n);
    }
    if (distinct.size() < 3) {
        throw std::invalid_argument("quad_fit: need at least 3 distinct N values");
    }

    // Normal equations for [a, b, c] against basis [u^2, u, 1], u = ln N.
    double s[5] = {0, 0, 0, 0, 0};  // sums of u^0..u^4
    double t[3] = {0, 0, 0};        // sums of loss * u^0..u^2
    for (const auto& [n, loss] : points) {
        const double u = std::log(n);
        double up = 1.0;
        for (int p = 0; p <= 4; ++p) {
            s[p] += up;
            if (p <= 2) t[p] += loss * up;
            up *= u;
        }
    }
    const std::vector<double> m = {s[4], s[3], s[2], s[3], s[2], s[1], s[2], s[1], s[0]};
    const std::vector<double> rhs = {t[2], t[1], t[0]};
    const std::vector<double> coef = detail::solve_linear(m, rhs, 3);

    QuadFit fit;
    fit.a = coef[0];
    fit.b = coef[1];
    fit.c = coef[2];
    for (const auto& [n, loss] : points) {
        const double u = std::log(n);
        const double r = loss - (fit.a * u * u + fit.b * u + fit.c);
        fit.residual += r * r;
    }
    if (fit.a > 0.0) {
        fit.n_star = std::exp(-fit.b / (2.0 * fit.a));
        fit.l_star = fit.c - fit.b * fit.b / (4.0 * fit.a);
    } else {
        fit.degenerate = true;
        fit.n_star = std::numeric_limits<double>::quiet_NaN();
        fit.l_star = std::numeric_limits<double>::quiet_NaN();
    }
    return fit;
}

// Optimal loss follows e^beta * C^alpha.
struct PowerLawFit {
    double alpha = 0.0;
    double beta = 0.0;

    double loss_at(double flops) const { return std::exp(beta) * std::pow(flops, alpha); }
    double flops_at(double loss) const { return std::exp((std::log(loss) - beta) / alpha); }
};

// Ordinary least squares of ln L* on ln C.
inline PowerLawFit power_law_fit(std::span<const std::pair<double, double>> pairs) {
    if (pairs.size() < 2) {
        throw std::invalid_argument("power_law_fit: need at least 2 budgets");
    }
    double sx = 0, sy = 0;
    for (const auto& [c, loss] : pairs) {
        if (!(c > 0.0) || !(loss > 0.0)) {
            throw std::invalid_argument("power_law_fit: inputs must be positive");
        }
        sx += std::log(c);
        sy += std::log(loss);
    }
    const double mx = sx / static_cast<double>(pairs.size());
    const double my = sy / static_cast<double>(pairs.size());
    double sxx = 0, sxy = 0;
    for (const auto& [c, loss] : pairs) {
        const double dx = std::log(c) - mx;
        sxx += dx * dx;
        sxy += dx * (std::log(loss) - my);
    }
    if (sxx == 0.0) {
        throw std::invalid_argument("power_law_fit: budgets are all identical");
    }
    PowerLawFit fit;
    fit.alpha = sxy / sxx;
    fit.beta = my - fit.alpha * mx;
    return fit;
}

// Constant-factor compute gap: how many times more compute fit_a needs than
// fit_b to reach loss_level. Requires decreasing laws (alpha < 0).
inline double compute_gap(const PowerLawFit& fit_a, const PowerLawFit& fit_b, double loss_level) {
    if (!(fit_a.alpha < 0.0) || !(fit_b.alpha < 0.0)) {
        throw std::domain_error("compute_gap: both laws must have alpha < 0");
    }
    if (!(loss_level > 0.0)) {
        throw std::domain_error("compute_gap: loss level must be positive");
    }
    return fit_a.flops_at(loss_level) / fit_b.flops_at(loss_level);
}

// --- IsoFLOP pipeline ------------------------------------------------------

struct BudgetFit {
    double flops = 0.0;
    QuadFit fit;
    int points = 0;
    bool usable = false;  // enough points and a proper minimum
};

struct IsoflopAnalysis {
    std::vector<BudgetFit> budgets;
    PowerLawFit law;
    bool law_valid = false;
    std::vector<std::pair<double, double>> optima;  // (C, L*_C)
};

// Group runs into budgets (C equal within 1e-6 relative), fit a parabola per
// budget, and regress the optima. Budgets with fewer than 3 sizes or a
// degenerate parabola are reported but excluded from the law.
inline IsoflopAnalysis isoflop_analysis(std::vector<RunRecord> runs) {
    if (runs.empty()) throw std::invalid_argument("isoflop_analysis: no runs");
    for (const RunRecord& r : runs) r.validate();
    std::sort(runs.begin(), runs.end(),
              [](const RunRecord& x, const RunRecord& y) { return x.flops < y.flops; });

    IsoflopAnalysis out;
    std::size_t i = 0;
    while (i < runs.size()) {
        std::size_t j = i;
        std::vector<std::pair<double, double>> points;
        while (j < runs.size() && std::abs(runs[j].flops - runs[i].flops) <= 1e-6 * runs[i].flops) {
            points.emplace_back(runs[j].n_params, runs[j].loss);
            ++j;
        }
        BudgetFit bf;
        bf.flops = runs[i].flops;
        bf.points = static_cast<int>(points.size());
        std::vector<double> distinct;
        for (const auto& [n, l] : points) {
            if (std::find(distinct.begin(), distinct.end(), n) == distinct.end()) distinct.push_back(n);
        }
        if (distinct.size() >= 3) {
            bf.fit = quad_fit(points);
            bf.usable = !bf.fit.degenerate;
        }
        if (bf.usable) out.optima.emplace_back(bf.flops, bf.fit.l_star);
        out.budgets.push_back(bf);
        i = j;
    }
    if (out.optima.size() >= 2) {
        out.law = power_law_fit(out.optima);
        out.law_valid = true;
    }
    return out;
}

} // namespace mdm
