#pragma once

// Evaluation protocols: accuracy, reliability diagrams with expected
// calibration error, variance-versus-scaling-factor tables, cross-twin
// generalization and the fixed-variance deployment study.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "twinuq/checkpoint.hpp"
#include "twinuq/dataset_io.hpp"
#include "twinuq/errors.hpp"
#include "twinuq/parallel.hpp"
#include "twinuq/train.hpp"
#include "twinuq/uncertainty.hpp"

namespace twinuq {

// Fraction of correct argmax predictions on mean logits; ties break toward the
// lowest class index. HET and ADF models predict from their mean logits.
inline double evaluate_accuracy(Model& model, const SampleSet& set) {
    return accuracy_from_logits(eval_logits(model, set), set.labels);
}

// ---------------------------------------------------------------------------
// Reliability diagram and ECE
// ---------------------------------------------------------------------------

struct ReliabilityBin {
    double low = 0.0, high = 0.0;
    double mean_confidence = 0.0;  // undefined when count == 0
    double accuracy = 0.0;         // undefined when count == 0
    std::size_t count = 0;
};

struct ReliabilityBins {
    std::vector<ReliabilityBin> bins;
    double ece = 0.0;
    std::size_t total = 0;
    bool under_confident = false;  // >= 70% of populated bins have accuracy > confidence
};

// Equal-width right-closed bins over [0, 1]; confidence 0 lands in the first
// bin. ECE is the count-weighted mean absolute confidence/accuracy gap.
inline ReliabilityBins reliability_diagram(const std::vector<double>& confidences,
                                           const std::vector<bool>& correct, std::size_t n_bins = 10) {
    if (confidences.size() != correct.size()) {
        throw contract_error("reliability_diagram: confidence/correctness length mismatch");
    }
    if (n_bins == 0) throw contract_error("reliability_diagram: need at least one bin");
    ReliabilityBins out;
    out.bins.resize(n_bins);
    std::vector<double> conf_sum(n_bins, 0.0);
    std::vector<std::size_t> hits(n_bins, 0);
    for (std::size_t b = 0; b < n_bins; ++b) {
        out.bins[b].low = static_cast<double>(b) / static_cast<double>(n_bins);
        out.bins[b].high = static_cast<double>(b + 1) / static_cast<double>(n_bins);
    }
    for (std::size_t i = 0; i < confidences.size(); ++i) {
        const double c = confidences[i];
        if (c < 0.0 || c > 1.0) {
            throw contract_error("reliability_diagram: confidence " + std::to_string(c) +
                                 " outside [0, 1]");
        }
        std::size_t b = 0;
        if (c > 0.0) {
            b = static_cast<std::size_t>(std::ceil(c * static_cast<double>(n_bins))) - 1;
            if (b >= n_bins) b = n_bins - 1;
        }
        out.bins[b].count += 1;
        conf_sum[b] += c;
        hits[b] += correct[i] ? 1u : 0u;
    }
    out.total = confidences.size();
    std::size_t populated = 0, under = 0;
    for (std::size_t b = 0; b < n_bins; ++b) {
        if (out.bins[b].count == 0) continue;
        ++populated;
        out.bins[b].mean_confidence = conf_sum[b] / static_cast<double>(out.bins[b].count);
        out.bins[b].accuracy = static_cast<double>(hits[b]) / static_cast<double>(out.bins[b].count);
        out.ece += (static_cast<double>(out.bins[b].count) / static_cast<double>(out.total)) *
                   std::abs(out.bins[b].accuracy - out.bins[b].mean_confidence);
        if (out.bins[b].accuracy > out.bins[b].mean_confidence) ++under;
    }
    out.under_confident = populated > 0 && 10 * under >= 7 * populated;
    return out;
}

// ---------------------------------------------------------------------------
// Per-sample records and variance-versus-kappa table
// ---------------------------------------------------------------------------

struct PerSampleRecord {
    int pred = 0;
    int label = 0;
    double confidence = 0.0;
    double sigma2_al = 0.0;
    double sigma2_ep = 0.0;
    double sigma2_total = 0.0;
    double kappa = 0.0;
    int twin_id = 0;
};

struct KappaBucket {
    double low = 0.0, high = 0.0;
    std::size_t count_correct = 0, count_incorrect = 0;
    // Null when the bucket is empty.
    std::optional<double> mean_al, mean_ep;
};

// kappa bucketed at width 0.5 over [0.8, 10]; rows are emitted for empty
// buckets too (count 0, null means).
inline std::vector<KappaBucket> variance_vs_kappa(const std::vector<PerSampleRecord>& records) {
    constexpr double lo = 0.8, width = 0.5;
    const std::size_t n_buckets = 19;  // covers [0.8, 10.3)
    std::vector<KappaBucket> buckets(n_buckets);
    std::vector<double> al(n_buckets, 0.0), ep(n_buckets, 0.0);
    for (std::size_t b = 0; b < n_buckets; ++b) {
        buckets[b].low = lo + width * static_cast<double>(b);
        buckets[b].high = buckets[b].low + width;
    }
    for (const PerSampleRecord& r : records) {
        double pos = (r.kappa - lo) / width;
        std::size_t b = pos <= 0.0 ? 0 : static_cast<std::size_t>(pos);
        if (b >= n_buckets) b = n_buckets - 1;
        if (r.pred == r.label)
            buckets[b].count_correct += 1;
        else
            buckets[b].count_incorrect += 1;
        al[b] += r.sigma2_al;
        ep[b] += r.sigma2_ep;
    }
    for (std::size_t b = 0; b < n_buckets; ++b) {
        const std::size_t count = buckets[b].count_correct + buckets[b].count_incorrect;
        if (count > 0) {
            buckets[b].mean_al = al[b] / static_cast<double>(count);
            buckets[b].mean_ep = ep[b] / static_cast<double>(count);
        }
    }
    return buckets;
}

// ---------------------------------------------------------------------------
// Full evaluation with uncertainty decomposition
// ---------------------------------------------------------------------------

struct EvaluationReport {
    double accuracy = 0.0;  // mean-logit argmax accuracy (no MC)
    std::size_t n_samples = 0;
    std::size_t k_passes = 0;
    std::size_t t_samples = 0;
    bool epistemic_degenerate = false;  // K == 1: sigma2_ep reported as 0
    std::vector<PerSampleRecord> samples;
    ReliabilityBins reliability;
    std::vector<KappaBucket> kappa_table;
    std::optional<double> mean_al_healthy, mean_al_faulty;
};

// K MC-dropout passes per sample with per-sample deterministic seed streams;
// samples may be processed concurrently, aggregation is in index order.
inline EvaluationReport evaluate_with_uncertainty(Model& model, const SampleSet& set, std::size_t k_passes,
                                                  std::size_t t_samples, std::uint64_t seed) {
    if (set.size() == 0) throw contract_error("evaluate_with_uncertainty: empty evaluation set");
    EvaluationReport report;
    report.accuracy = evaluate_accuracy(model, set);
    report.n_samples = set.size();
    report.k_passes = k_passes;
    report.t_samples = t_samples;
    report.epistemic_degenerate = k_passes < 2;
    report.samples.resize(set.size());

    const std::size_t width = set.means.dim(1);
    parallel_for(set.size(), [&](std::size_t i) {
        std::vector<double> mean_row(width), var_row;
        for (std::size_t j = 0; j < width; ++j) mean_row[j] = set.means.at(i, j);
        if (model.kind == ModelKind::adf) {
            var_row.resize(width);
            for (std::size_t j = 0; j < width; ++j)
                var_row[j] = set.has_variance() ? set.variances.at(i, j) : 0.0;
        }
        // Concurrent passes share frozen parameters; each sample derives its
        // own seed so results are schedule-independent.
        Model local = model;  // layers share parameter tensors (read-only here)
        McDropoutResult mc =
            mc_dropout_predict(local, mean_row, var_row, k_passes, t_samples, derive_seed(seed, {i}));
        UncertaintyReport u = assemble_report(model.kind, mc, t_samples);
        PerSampleRecord rec;
        rec.pred = u.predicted_class;
        rec.label = set.labels[i];
        rec.confidence = u.confidence;
        rec.sigma2_al = u.sigma2_al;
        rec.sigma2_ep = u.sigma2_ep;
        rec.sigma2_total = u.sigma2_total;
        rec.kappa = static_cast<double>(set.kappas[i]);
        rec.twin_id = set.twin_ids[i];
        report.samples[i] = rec;
    });

    std::vector<double> confidences;
    std::vector<bool> correct;
    confidences.reserve(set.size());
    double al_healthy = 0.0, al_faulty = 0.0;
    std::size_t n_healthy = 0, n_faulty = 0;
    for (const PerSampleRecord& r : report.samples) {
        confidences.push_back(r.confidence);
        correct.push_back(r.pred == r.label);
        if (r.kappa < 2.0) {
            al_healthy += r.sigma2_al;
            ++n_healthy;
        } else {
            al_faulty += r.sigma2_al;
            ++n_faulty;
        }
    }
    report.reliability = reliability_diagram(confidences, correct);
    report.kappa_table = variance_vs_kappa(report.samples);
    if (n_healthy) report.mean_al_healthy = al_healthy / static_cast<double>(n_healthy);
    if (n_faulty) report.mean_al_faulty = al_faulty / static_cast<double>(n_faulty);
    return report;
}

// ---------------------------------------------------------------------------
// Evaluation-set assembly for a checkpoint
// ---------------------------------------------------------------------------

// Test-split condition indices under the checkpoint's own split seed: labels
// are per-condition, identical for every twin by construction.
inline SplitIndices checkpoint_split(const Dataset& ds, const TrainConfig& cfg) {
    std::vector<int> labels(ds.n_conditions());
    for (std::size_t c = 0; c < labels.size(); ++c) labels[c] = ds.window(0, c).class_label;
    return split_dataset(labels, cfg.split_fractions, cfg.seed);
}

inline std::vector<std::size_t> twin_indices_from_ids(const Dataset& ds, const std::vector<int>& ids) {
    std::vector<std::size_t> out;
    for (int id : ids) {
        bool found = false;
        for (std::size_t i = 0; i < ds.manifest.twins.size(); ++i) {
            if (ds.manifest.twins[i].twin_id == id) {
                out.push_back(i);
                found = true;
                break;
            }
        }
        if (!found) {
            throw config_error("twin id " + std::to_string(id) + " not present in dataset (has " +
                               std::to_string(ds.manifest.n_twins) + " twins)");
        }
    }
    return out;
}

// Average input variance over the checkpoint's training twins and all
// conditions: the deployment-time constant of the fixed-variance study.
inline double dataset_average_variance(const Dataset& ds, const std::vector<int>& train_twin_ids) {
    auto idx = twin_indices_from_ids(ds, train_twin_ids);
    if (idx.size() < 2) {
        throw config_error("dataset-average variance needs >= 2 training twins, got " +
                           std::to_string(idx.size()));
    }
    std::vector<std::size_t> all(ds.n_conditions());
    for (std::size_t c = 0; c < all.size(); ++c) all[c] = c;
    SampleSet stats = fused_set(ds, idx, all, InputKind::twin_stats);
    double sum = 0.0;
    for (double v : stats.variances.data()) sum += v;
    return sum / static_cast<double>(stats.variances.numel());
}

// Builds the evaluation inputs matching a checkpoint's input kind for the
// given twins. ADF checkpoints evaluated on a single twin fall back to the
// fixed-variance form (windows as means, constant input variance).
inline SampleSet evaluation_set(const Dataset& ds, const CheckpointMeta& meta,
                                const std::vector<int>& twin_ids, const std::vector<std::size_t>& conditions,
                                std::optional<double> fixed_variance = std::nullopt) {
    auto idx = twin_indices_from_ids(ds, twin_ids);
    switch (meta.input_kind) {
        case InputKind::raw:
            return raw_window_set(ds, idx, conditions);
        case InputKind::twin_mean:
            return fused_set(ds, idx, conditions, InputKind::twin_mean);
        default: {
            if (idx.size() >= 2 && !fixed_variance) {
                return fused_set(ds, idx, conditions, InputKind::twin_stats);
            }
            double v = fixed_variance ? *fixed_variance
                                      : dataset_average_variance(ds, meta.train_twin_ids);
            SampleSet set = idx.size() >= 2 ? fused_set(ds, idx, conditions, InputKind::twin_mean)
                                            : raw_window_set(ds, idx, conditions);
            set.kind = InputKind::twin_stats;
            set.variances = Tensor::full(set.means.shape(), v);
            return set;
        }
    }
}

// ---------------------------------------------------------------------------
// Cross-twin generalization, fixed-variance study, information fusion
// ---------------------------------------------------------------------------

struct CrossTwinRow {
    std::string subject;  // "in_distribution", "twin_<id>", or "twins_<i>+<j>..."
    double accuracy = 0.0;
    std::size_t n = 0;
};

// Accuracy on each held-out twin plus the in-distribution test-split
// reference. Held-out twins are evaluated over all conditions; the
// in-distribution row uses the checkpoint's own test split.
inline std::vector<CrossTwinRow> cross_twin_eval(Model& model, const CheckpointMeta& meta,
                                                 const Dataset& ds, const std::vector<int>& eval_twin_ids) {
    if (ds.manifest.window_len != meta.input_len) {
        throw contract_error("cross_twin_eval: dataset window length " +
                             std::to_string(ds.manifest.window_len) + " does not match checkpoint input " +
                             std::to_string(meta.input_len));
    }
    if (ds.manifest.n_classes() != meta.n_classes || ds.manifest.class_names != meta.class_names) {
        throw contract_error("cross_twin_eval: class map mismatch between dataset and checkpoint");
    }
    SplitIndices split = checkpoint_split(ds, meta.config);
    std::vector<std::size_t> all(ds.n_conditions());
    for (std::size_t c = 0; c < all.size(); ++c) all[c] = c;

    std::vector<CrossTwinRow> rows;
    {
        SampleSet in_dist = evaluation_set(ds, meta, meta.train_twin_ids, split.test);
        rows.push_back(CrossTwinRow{"in_distribution", evaluate_accuracy(model, in_dist), in_dist.size()});
    }
    for (int id : eval_twin_ids) {
        SampleSet held_out = evaluation_set(ds, meta, {id}, all);
        rows.push_back(
            CrossTwinRow{"twin_" + std::to_string(id), evaluate_accuracy(model, held_out), held_out.size()});
    }
    if (eval_twin_ids.size() >= 2 && meta.input_kind == InputKind::twin_stats) {
        SampleSet fused = evaluation_set(ds, meta, eval_twin_ids, all);
        std::string name = "twins";
        for (int id : eval_twin_ids) name += "_" + std::to_string(id);
        rows.push_back(CrossTwinRow{name, evaluate_accuracy(model, fused), fused.size()});
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Report files
// ---------------------------------------------------------------------------

namespace detail {

// Shortest round-trippable decimal form, deterministic across runs.
inline std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    double back = std::strtod(buf, nullptr);
    if (back == v) {
        for (int prec = 1; prec <= 16; ++prec) {
            char probe[32];
            std::snprintf(probe, sizeof(probe), "%.*g", prec, v);
            if (std::strtod(probe, nullptr) == v) return probe;
        }
    }
    return buf;
}

}  // namespace detail

inline nlohmann::json report_to_json(const EvaluationReport& r, const CheckpointMeta& meta) {
    nlohmann::json samples = nlohmann::json::array();
    for (const PerSampleRecord& s : r.samples) {
        samples.push_back(nlohmann::json{{"pred", s.pred},
                                         {"label", s.label},
                                         {"confidence", s.confidence},
                                         {"sigma2_al", s.sigma2_al},
                                         {"sigma2_ep", s.sigma2_ep},
                                         {"sigma2_total", s.sigma2_total},
                                         {"kappa", s.kappa},
                                         {"twin_id", s.twin_id}});
    }
    nlohmann::json summary{{"ece", r.reliability.ece},
                           {"under_confident", r.reliability.under_confident},
                           {"mean_sigma2_al_healthy",
                            r.mean_al_healthy ? nlohmann::json(*r.mean_al_healthy) : nlohmann::json()},
                           {"mean_sigma2_al_faulty",
                            r.mean_al_faulty ? nlohmann::json(*r.mean_al_faulty) : nlohmann::json()}};
    return nlohmann::json{{"schema_version", 1},
                          {"model_kind", to_string(meta.kind)},
                          {"architecture", to_string(meta.arch)},
                          {"accuracy", r.accuracy},
                          {"n_samples", r.n_samples},
                          {"k_passes", r.k_passes},
                          {"t_samples", r.t_samples},
                          {"epistemic_degenerate", r.epistemic_degenerate},
                          {"summary", summary},
                          {"samples", samples}};
}

inline void write_report_json(const std::filesystem::path& path, const EvaluationReport& r,
                              const CheckpointMeta& meta) {
    std::ofstream out(path);
    if (!out) throw io_error("cannot write report " + path.string());
    out << report_to_json(r, meta).dump(2) << '\n';
    if (!out) throw io_error("failed writing report " + path.string());
}

inline void write_reliability_csv(const std::filesystem::path& path, const ReliabilityBins& bins) {
    std::ofstream out(path);
    if (!out) throw io_error("cannot write reliability table " + path.string());
    out << "bin_low,bin_high,confidence,accuracy,count\n";
    for (const ReliabilityBin& b : bins.bins) {
        out << detail::fmt_double(b.low) << ',' << detail::fmt_double(b.high) << ',';
        if (b.count > 0) {
            out << detail::fmt_double(b.mean_confidence) << ',' << detail::fmt_double(b.accuracy);
        } else {
            out << ',';
        }
        out << ',' << b.count << '\n';
    }
    if (!out) throw io_error("failed writing reliability table " + path.string());
}

inline void write_kappa_csv(const std::filesystem::path& path, const std::vector<KappaBucket>& buckets) {
    std::ofstream out(path);
    if (!out) throw io_error("cannot write variance table " + path.string());
    out << "kappa_low,kappa_high,mean_al,mean_ep,count_correct,count_incorrect\n";
    for (const KappaBucket& b : buckets) {
        out << detail::fmt_double(b.low) << ',' << detail::fmt_double(b.high) << ',';
        if (b.mean_al) out << detail::fmt_double(*b.mean_al);
        out << ',';
        if (b.mean_ep) out << detail::fmt_double(*b.mean_ep);
        out << ',' << b.count_correct << ',' << b.count_incorrect << '\n';
    }
    if (!out) throw io_error("failed writing variance table " + path.string());
}

// Post-write validation backing the "exit 0 only when outputs validate" rule.
inline void validate_report_files(const std::filesystem::path& json_path,
                                  const std::filesystem::path& reliability_path,
                                  const std::filesystem::path& kappa_path) {
    std::ifstream jf(json_path);
    if (!jf) throw io_error("report validation: cannot reopen " + json_path.string());
    nlohmann::json j;
    try {
        jf >> j;
    } catch (const nlohmann::json::exception& e) {
        throw io_error("report validation: malformed JSON in " + json_path.string() + ": " + e.what());
    }
    for (const char* key : {"schema_version", "accuracy", "n_samples", "k_passes", "samples", "summary"}) {
        if (!j.contains(key)) {
            throw io_error("report validation: " + json_path.string() + " missing key '" + key + "'");
        }
    }
    const std::size_t n = j.at("n_samples").get<std::size_t>();
    if (j.at("samples").size() != n) {
        throw io_error("report validation: sample count mismatch in " + json_path.string());
    }
    for (const auto& s : j.at("samples")) {
        const double al = s.at("sigma2_al").get<double>();
        const double ep = s.at("sigma2_ep").get<double>();
        const double total = s.at("sigma2_total").get<double>();
        if (total != al + ep) {
            throw io_error("report validation: sigma2_total != sigma2_al + sigma2_ep in " +
                           json_path.string());
        }
    }
    auto check_csv = [](const std::filesystem::path& p, const std::string& header,
                        std::size_t expected_rows) {
        std::ifstream f(p);
        if (!f) throw io_error("report validation: cannot reopen " + p.string());
        std::string line;
        if (!std::getline(f, line) || line != header) {
            throw io_error("report validation: bad header in " + p.string());
        }
        std::size_t rows = 0;
        while (std::getline(f, line))
            if (!line.empty()) ++rows;
        if (rows != expected_rows) {
            throw io_error("report validation: expected " + std::to_string(expected_rows) + " rows in " +
                           p.string() + ", found " + std::to_string(rows));
        }
    };
    check_csv(reliability_path, "bin_low,bin_high,confidence,accuracy,count", 10);
    check_csv(kappa_path, "kappa_low,kappa_high,mean_al,mean_ep,count_correct,count_incorrect", 19);
}

struct FixedVarianceResult {
    double accuracy_fixed = 0.0;
    double accuracy_per_sample = 0.0;
    double fixed_value = 0.0;
};

// Replaces every per-sample input variance with the constant v (default: the
// dataset-average input variance) and re-evaluates the ADF model.
inline FixedVarianceResult fixed_variance_eval(Model& model, const SampleSet& stats_set, double v) {
    if (model.kind != ModelKind::adf) throw contract_error("fixed_variance_eval: requires an ADF model");
    if (!stats_set.has_variance()) {
        throw contract_error("fixed_variance_eval: evaluation set carries no per-sample variances");
    }
    if (v < 0.0) throw contract_error("fixed_variance_eval: variance must be >= 0");
    FixedVarianceResult r;
    r.fixed_value = v;
    r.accuracy_per_sample = evaluate_accuracy(model, stats_set);
    SampleSet fixed = stats_set;
    fixed.variances = Tensor::full(stats_set.variances.shape(), v);
    r.accuracy_fixed = evaluate_accuracy(model, fixed);
    return r;
}

}  // namespace twinuq
