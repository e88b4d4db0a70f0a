#pragma once

#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "dpc/graph.hpp"
#include "dpc/rng.hpp"
#include "dpc/tensor.hpp"

// Central finite-difference gradient verification. Always runs in double:
// FD checks in 32-bit drown in rounding noise.

namespace dpc {

struct GradCheckEntry {
    std::string parameter;
    std::size_t index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_err = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_rel_err = 0.0;
    double tolerance = 0.0;
    bool pass = false;
    bool aborted = false;
    std::string diagnosis;

    std::string summary() const {
        std::ostringstream os;
        if (aborted) {
            os << "gradcheck ABORTED: " << diagnosis;
            return os.str();
        }
        os << "gradcheck " << (pass ? "PASS" : "FAIL") << ": " << entries.size()
           << " coordinates, max rel err " << max_rel_err << " (tolerance " << tolerance << ")";
        return os.str();
    }
};

// Relative error with a floor: coordinates where both sides are below the
// floor compare absolutely, otherwise FD roundoff on near-zero gradients
// produces spurious failures.
inline double fd_rel_err(double analytic, double numeric, double floor_mag = 1e-6) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor_mag});
    return std::abs(analytic - numeric) / denom;
}

// build_loss must construct the full forward pass on the given tape and
// return the scalar loss. It is called many times with perturbed parameter
// values, so it must be a pure function of the parameter tensors.
inline GradCheckReport grad_check(const std::function<ValueT<double>(TapeT<double>&)>& build_loss,
                                  const std::vector<ParameterT<double>*>& params, double h,
                                  double tolerance, std::size_t max_coords_per_param = SIZE_MAX,
                                  std::uint64_t sample_seed = 0, double rel_floor = 1e-6) {
    GradCheckReport report;
    report.tolerance = tolerance;
    if (!(h > 0.0)) throw ContractViolation("grad_check: step h must be positive");

    auto eval = [&]() -> double {
        TapeT<double> tape;
        return build_loss(tape).scalar();
    };

    // Determinism probe: two independent forward passes must agree bitwise.
    const double probe1 = eval();
    const double probe2 = eval();
    if (!(probe1 == probe2)) {
        report.aborted = true;
        std::ostringstream os;
        os << "non-deterministic loss function: forward passes gave " << probe1 << " and "
           << probe2;
        report.diagnosis = os.str();
        return report;
    }

    for (ParameterT<double>* p : params) p->zero_grad();
    {
        TapeT<double> tape;
        ValueT<double> loss = build_loss(tape);
        tape.backward(loss);
    }

    Rng sampler(sample_seed);
    for (ParameterT<double>* p : params) {
        if (!p->trainable) {
            throw ContractViolation("grad_check: parameter '" + p->name + "' is not trainable");
        }
        std::vector<std::size_t> coords;
        const std::size_t n = p->value.size();
        if (n <= max_coords_per_param) {
            coords.resize(n);
            for (std::size_t i = 0; i < n; ++i) coords[i] = i;
        } else {
            // sampled subset with recorded indices, no repeats
            std::vector<std::size_t> all(n);
            for (std::size_t i = 0; i < n; ++i) all[i] = i;
            deterministic_shuffle(all, sampler);
            coords.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(max_coords_per_param));
            std::sort(coords.begin(), coords.end());
        }

        for (std::size_t idx : coords) {
            const double saved = p->value.values[idx];
            p->value.values[idx] = saved + h;
            const double lp = eval();
            p->value.values[idx] = saved - h;
            const double lm = eval();
            p->value.values[idx] = saved;

            GradCheckEntry e;
            e.parameter = p->name;
            e.index = idx;
            e.analytic = p->grad.values[idx];
            e.numeric = (lp - lm) / (2.0 * h);
            e.rel_err = fd_rel_err(e.analytic, e.numeric, rel_floor);
            report.max_rel_err = std::max(report.max_rel_err, e.rel_err);
            report.entries.push_back(std::move(e));
        }
    }

    report.pass = report.max_rel_err <= tolerance;
    return report;
}

} // namespace dpc
