#pragma once

// Parametric leakage-current simulator standing in for the physics model of a
// segmented power line. Each line segment contributes a 50 Hz sinusoid whose
// amplitude is proportional to the segment capacitance, plus a third harmonic
// for spectral structure:
//
//   s[t] = sum_s A_s sin(2 pi f t / f_s + phi_s)
//        + h  sum_s A_s sin(6 pi f t / f_s + 3 phi_s) + noise
//
// A fault scales one segment's capacitance by kappa in [2, 10]; healthy
// windows scale every segment by a small drift kappa in [0.8, 2). Twin
// instances perturb capacitances (relative) and phases (absolute, radians) by
// up to +/- divergence, standing in for repeated stochastic calibrations of
// the same physical line.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "twinuq/adf.hpp"
#include "twinuq/errors.hpp"
#include "twinuq/rng.hpp"
#include "twinuq/tensor.hpp"

namespace twinuq {

struct TwinParams {
    std::size_t segment_count = 6;
    std::vector<double> capacitance;  // per segment, arbitrary units
    std::vector<double> phase;        // per segment, radians
    double frequency = 50.0;          // Hz
    double sample_rate = 1280.0;      // Hz, > 2f
    double noise_std = 0.05;          // sensor noise
    double harmonic = 0.1;            // third-harmonic coefficient
    int twin_id = 0;

    void validate() const {
        if (segment_count < 1) throw contract_error("TwinParams: need at least one segment");
        if (capacitance.size() != segment_count || phase.size() != segment_count) {
            throw contract_error("TwinParams: parameter arrays do not match segment count");
        }
        for (double c : capacitance) {
            if (c <= 0.0) throw contract_error("TwinParams: capacitance must be positive");
        }
        if (sample_rate <= 2.0 * frequency) {
            throw contract_error("TwinParams: sample rate must exceed twice the fundamental");
        }
        if (noise_std < 0.0) throw contract_error("TwinParams: noise std must be non-negative");
    }
};

// Nominal geometry of the line model. The phase spacing between neighbouring
// segments is deliberately comparable to the calibration divergence so that
// twin instances shift class geometry relative to each other.
inline TwinParams nominal_twin(std::size_t segments, double sample_rate = 1280.0,
                               double noise_std = 0.05) {
    TwinParams p;
    p.segment_count = segments;
    p.sample_rate = sample_rate;
    p.noise_std = noise_std;
    p.capacitance.resize(segments);
    p.phase.resize(segments);
    for (std::size_t s = 0; s < segments; ++s) {
        p.capacitance[s] = 1.0 + 0.08 * static_cast<double>(s);
        p.phase[s] = 0.4 + 0.45 * static_cast<double>(s);
    }
    p.validate();
    return p;
}

struct FaultSpec {
    int class_label = 0;  // 0 = healthy, 1..S = faulted segment index
    double kappa = 1.0;

    void validate(std::size_t segments) const {
        if (class_label < 0 || static_cast<std::size_t>(class_label) > segments) {
            throw contract_error("FaultSpec: class " + std::to_string(class_label) + " outside [0, " +
                                 std::to_string(segments) + "]");
        }
        if (class_label == 0) {
            if (kappa < 0.8 || kappa >= 2.0) {
                throw contract_error("FaultSpec: healthy kappa " + std::to_string(kappa) +
                                     " outside [0.8, 2)");
            }
        } else if (kappa < 2.0 || kappa > 10.0) {
            throw contract_error("FaultSpec: faulty kappa " + std::to_string(kappa) + " outside [2, 10]");
        }
    }
};

struct LabeledWindow {
    std::vector<float> samples;  // length round(0.2 * sample_rate) = 10 cycles
    int class_label = 0;
    float kappa = 1.0f;
    int twin_id = 0;
};

inline std::size_t window_length(double sample_rate) {
    return static_cast<std::size_t>(std::lround(0.2 * sample_rate));
}

// Draws n_twins instances around the nominal geometry:
//   c_s^(i) = c_s (1 + delta u),  phi_s^(i) = phi_s + delta u',  u ~ U(-1, 1).
// Twin ids are 1-based to match the usual instance numbering.
inline std::vector<TwinParams> calibrate_twin_instances(std::size_t n_twins, double divergence,
                                                        std::uint64_t seed, const TwinParams& nominal) {
    if (n_twins < 1) throw contract_error("calibrate_twin_instances: need at least one twin");
    if (divergence < 0.0) throw contract_error("calibrate_twin_instances: divergence must be >= 0");
    nominal.validate();
    std::vector<TwinParams> out;
    out.reserve(n_twins);
    for (std::size_t i = 0; i < n_twins; ++i) {
        Rng rng(derive_seed(seed, {0x71714u, i}));
        TwinParams p = nominal;
        p.twin_id = static_cast<int>(i + 1);
        for (std::size_t s = 0; s < p.segment_count; ++s) {
            p.capacitance[s] = nominal.capacitance[s] * (1.0 + divergence * rng.uniform(-1.0, 1.0));
            p.phase[s] = nominal.phase[s] + divergence * rng.uniform(-1.0, 1.0);
        }
        p.validate();
        out.push_back(std::move(p));
    }
    return out;
}

// One labeled window. `rng` supplies only the sensor noise; sharing its seed
// across twins makes the same condition directly comparable between
// instances.
inline LabeledWindow simulate_window(const TwinParams& twin, const FaultSpec& fault, Rng& rng) {
    twin.validate();
    fault.validate(twin.segment_count);
    const std::size_t n = window_length(twin.sample_rate);
    const double w1 = 2.0 * std::numbers::pi * twin.frequency / twin.sample_rate;

    std::vector<double> amplitude(twin.segment_count);
    for (std::size_t s = 0; s < twin.segment_count; ++s) {
        const bool scaled = fault.class_label == 0 || static_cast<std::size_t>(fault.class_label) == s + 1;
        amplitude[s] = twin.capacitance[s] * (scaled ? fault.kappa : 1.0);
    }

    LabeledWindow window;
    window.samples.resize(n);
    window.class_label = fault.class_label;
    window.kappa = static_cast<float>(fault.kappa);
    window.twin_id = twin.twin_id;
    for (std::size_t t = 0; t < n; ++t) {
        double v = 0.0;
        for (std::size_t s = 0; s < twin.segment_count; ++s) {
            v += amplitude[s] * std::sin(w1 * static_cast<double>(t) + twin.phase[s]);
            v += twin.harmonic * amplitude[s] *
                 std::sin(3.0 * w1 * static_cast<double>(t) + 3.0 * twin.phase[s]);
        }
        if (twin.noise_std > 0.0) v += twin.noise_std * rng.normal();
        window.samples[t] = static_cast<float>(v);
    }
    return window;
}

// Deterministic fault condition for dataset slot `condition`: classes cycle
// round-robin (balanced within +/- 1), kappa is drawn uniformly from the
// class-appropriate range.
inline FaultSpec condition_fault(std::size_t condition, std::size_t segments, std::uint64_t seed) {
    FaultSpec fault;
    fault.class_label = static_cast<int>(condition % (segments + 1));
    Rng rng(derive_seed(seed, {0xFA017u, condition}));
    fault.kappa = fault.class_label == 0 ? rng.uniform(0.8, 2.0) : rng.uniform(2.0, 10.0);
    return fault;
}

inline std::uint64_t condition_noise_seed(std::size_t condition, std::uint64_t seed) {
    return derive_seed(seed, {0x901E5u, condition});
}

// All windows for one twin instance, conditions 0..n_per_twin-1. The noise
// stream depends on the condition only, so every twin sees the same noise for
// the same condition and cross-twin variance isolates parameter divergence.
inline std::vector<LabeledWindow> generate_twin_windows(const TwinParams& twin, std::size_t n_per_twin,
                                                        std::uint64_t seed) {
    std::vector<LabeledWindow> out;
    out.reserve(n_per_twin);
    for (std::size_t j = 0; j < n_per_twin; ++j) {
        FaultSpec fault = condition_fault(j, twin.segment_count, seed);
        Rng noise(condition_noise_seed(j, seed));
        out.push_back(simulate_window(twin, fault, noise));
    }
    return out;
}

// Same condition simulated under every twin, reduced to the point-wise mean
// and unbiased variance: the (mu_x, Sigma_x) input pair for ADF models.
inline GaussianActivation multi_twin_stats(const std::vector<TwinParams>& twins, const FaultSpec& fault,
                                           std::uint64_t noise_seed) {
    if (twins.size() < 2) {
        throw contract_error("multi_twin_stats: need at least 2 twins, variance is undefined for " +
                             std::to_string(twins.size()));
    }
    std::vector<std::vector<float>> rows;
    rows.reserve(twins.size());
    for (const TwinParams& twin : twins) {
        Rng noise(noise_seed);
        rows.push_back(simulate_window(twin, fault, noise).samples);
    }
    const std::size_t n = rows.front().size();
    std::vector<double> mean(n, 0.0), var(n, 0.0);
    for (const auto& r : rows)
        for (std::size_t t = 0; t < n; ++t) mean[t] += static_cast<double>(r[t]);
    for (double& m : mean) m /= static_cast<double>(rows.size());
    for (const auto& r : rows)
        for (std::size_t t = 0; t < n; ++t) {
            const double d = static_cast<double>(r[t]) - mean[t];
            var[t] += d * d;
        }
    for (double& v : var) v /= static_cast<double>(rows.size() - 1);
    return GaussianActivation(Tensor({n}, std::move(mean)), Tensor({n}, std::move(var)));
}

// Point-wise mean and unbiased variance across already-generated windows of
// the same condition (one per twin).
inline GaussianActivation window_stats(const std::vector<const LabeledWindow*>& windows) {
    if (windows.size() < 2) {
        throw contract_error("window_stats: need at least 2 twins, variance is undefined for " +
                             std::to_string(windows.size()));
    }
    const std::size_t n = windows.front()->samples.size();
    std::vector<double> mean(n, 0.0), var(n, 0.0);
    for (const LabeledWindow* w : windows)
        for (std::size_t t = 0; t < n; ++t) mean[t] += static_cast<double>(w->samples[t]);
    for (double& m : mean) m /= static_cast<double>(windows.size());
    for (const LabeledWindow* w : windows)
        for (std::size_t t = 0; t < n; ++t) {
            const double d = static_cast<double>(w->samples[t]) - mean[t];
            var[t] += d * d;
        }
    for (double& v : var) v /= static_cast<double>(windows.size() - 1);
    return GaussianActivation(Tensor({n}, std::move(mean)), Tensor({n}, std::move(var)));
}

}  // namespace twinuq
