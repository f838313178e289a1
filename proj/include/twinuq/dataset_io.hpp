#pragma once

// Dataset directory format:
//   manifest.json  -- schema version, generator configuration, twin parameters
//   records.bin    -- fixed-width records, twin-major, condition-ascending:
//                     u16 class, u16 twin_id, f32 kappa, f32 x window_len
// All binary fields are little-endian; round trips are bit-exact.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "twinuq/errors.hpp"
#include "twinuq/parallel.hpp"
#include "twinuq/twin.hpp"

namespace twinuq {

static_assert(std::endian::native == std::endian::little, "record format is little-endian");

struct DatasetManifest {
    int schema_version = 1;
    std::size_t segments = 6;
    double sample_rate = 1280.0;
    std::size_t window_len = 256;
    std::size_t n_twins = 0;
    std::size_t n_per_twin = 0;
    double divergence = 0.15;
    double noise_std = 0.05;
    double harmonic = 0.1;
    std::uint64_t seed = 1;
    std::vector<std::string> class_names;
    std::vector<TwinParams> twins;

    std::size_t n_classes() const { return segments + 1; }
};

struct Dataset {
    DatasetManifest manifest;
    std::vector<LabeledWindow> windows;  // twin-major, condition-ascending

    const LabeledWindow& window(std::size_t twin_index, std::size_t condition) const {
        return windows[twin_index * manifest.n_per_twin + condition];
    }
    std::size_t n_conditions() const { return manifest.n_per_twin; }
    std::size_t n_twins() const { return manifest.n_twins; }
};

inline std::vector<std::string> default_class_names(std::size_t segments) {
    std::vector<std::string> names{"healthy"};
    for (std::size_t s = 1; s <= segments; ++s) names.push_back("fault_segment_" + std::to_string(s));
    return names;
}

// Balanced dataset over all twin instances; classes cycle per condition and
// every twin sees the identical (class, kappa, noise-seed) condition list.
inline Dataset generate_dataset(const std::vector<TwinParams>& twins, std::size_t n_per_twin,
                                std::uint64_t seed, double divergence = 0.0) {
    if (twins.empty()) throw contract_error("generate_dataset: no twin instances");
    const std::size_t segments = twins.front().segment_count;
    if (n_per_twin < segments + 1) {
        throw contract_error("generate_dataset: need at least one window per class, got " +
                             std::to_string(n_per_twin) + " for " + std::to_string(segments + 1) +
                             " classes");
    }
    Dataset ds;
    ds.manifest.segments = segments;
    ds.manifest.sample_rate = twins.front().sample_rate;
    ds.manifest.window_len = window_length(twins.front().sample_rate);
    ds.manifest.n_twins = twins.size();
    ds.manifest.n_per_twin = n_per_twin;
    ds.manifest.divergence = divergence;
    ds.manifest.noise_std = twins.front().noise_std;
    ds.manifest.harmonic = twins.front().harmonic;
    ds.manifest.seed = seed;
    ds.manifest.class_names = default_class_names(segments);
    ds.manifest.twins = twins;

    ds.windows.resize(twins.size() * n_per_twin);
    parallel_for(twins.size() * n_per_twin, [&](std::size_t item) {
        const std::size_t twin_index = item / n_per_twin;
        const std::size_t condition = item % n_per_twin;
        FaultSpec fault = condition_fault(condition, segments, seed);
        Rng noise(condition_noise_seed(condition, seed));
        ds.windows[item] = simulate_window(twins[twin_index], fault, noise);
    });
    return ds;
}

namespace detail {

inline nlohmann::json twin_to_json(const TwinParams& t) {
    return nlohmann::json{{"twin_id", t.twin_id},
                          {"segment_count", t.segment_count},
                          {"capacitance", t.capacitance},
                          {"phase", t.phase},
                          {"frequency", t.frequency},
                          {"sample_rate", t.sample_rate},
                          {"noise_std", t.noise_std},
                          {"harmonic", t.harmonic}};
}

inline TwinParams twin_from_json(const nlohmann::json& j) {
    TwinParams t;
    t.twin_id = j.at("twin_id").get<int>();
    t.segment_count = j.at("segment_count").get<std::size_t>();
    t.capacitance = j.at("capacitance").get<std::vector<double>>();
    t.phase = j.at("phase").get<std::vector<double>>();
    t.frequency = j.at("frequency").get<double>();
    t.sample_rate = j.at("sample_rate").get<double>();
    t.noise_std = j.at("noise_std").get<double>();
    t.harmonic = j.at("harmonic").get<double>();
    t.validate();
    return t;
}

template <typename T>
void write_le(std::ofstream& out, T value) {
    char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    out.write(buf, sizeof(T));
}

template <typename T>
T read_le(std::ifstream& in) {
    char buf[sizeof(T)];
    in.read(buf, sizeof(T));
    T value;
    std::memcpy(&value, buf, sizeof(T));
    return value;
}

}  // namespace detail

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
    nlohmann::json twins = nlohmann::json::array();
    for (const TwinParams& t : m.twins) twins.push_back(detail::twin_to_json(t));
    return nlohmann::json{{"schema_version", m.schema_version},
                          {"segments", m.segments},
                          {"sample_rate", m.sample_rate},
                          {"window_len", m.window_len},
                          {"n_twins", m.n_twins},
                          {"n_per_twin", m.n_per_twin},
                          {"divergence", m.divergence},
                          {"noise_std", m.noise_std},
                          {"harmonic", m.harmonic},
                          {"seed", m.seed},
                          {"class_names", m.class_names},
                          {"twins", twins}};
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
    DatasetManifest m;
    m.schema_version = j.at("schema_version").get<int>();
    if (m.schema_version != 1) {
        throw io_error("dataset manifest: unsupported schema version " +
                       std::to_string(m.schema_version));
    }
    m.segments = j.at("segments").get<std::size_t>();
    m.sample_rate = j.at("sample_rate").get<double>();
    m.window_len = j.at("window_len").get<std::size_t>();
    m.n_twins = j.at("n_twins").get<std::size_t>();
    m.n_per_twin = j.at("n_per_twin").get<std::size_t>();
    m.divergence = j.at("divergence").get<double>();
    m.noise_std = j.at("noise_std").get<double>();
    m.harmonic = j.at("harmonic").get<double>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.class_names = j.at("class_names").get<std::vector<std::string>>();
    for (const auto& t : j.at("twins")) m.twins.push_back(detail::twin_from_json(t));
    return m;
}

inline void save_dataset(const std::filesystem::path& dir, const Dataset& ds, bool force = false) {
    namespace fs = std::filesystem;
    if (fs::exists(dir) && !fs::is_empty(dir) && !force) {
        throw io_error("refusing to write into non-empty directory " + dir.string() +
                       " (pass --force to overwrite)");
    }
    fs::create_directories(dir);
    {
        std::ofstream mf(dir / "manifest.json");
        if (!mf) throw io_error("cannot write " + (dir / "manifest.json").string());
        mf << manifest_to_json(ds.manifest).dump(2) << '\n';
    }
    std::ofstream rf(dir / "records.bin", std::ios::binary);
    if (!rf) throw io_error("cannot write " + (dir / "records.bin").string());
    for (const LabeledWindow& w : ds.windows) {
        detail::write_le<std::uint16_t>(rf, static_cast<std::uint16_t>(w.class_label));
        detail::write_le<std::uint16_t>(rf, static_cast<std::uint16_t>(w.twin_id));
        detail::write_le<float>(rf, w.kappa);
        for (float s : w.samples) detail::write_le<float>(rf, s);
    }
    if (!rf) throw io_error("failed writing " + (dir / "records.bin").string());
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    const fs::path manifest_path = dir / "manifest.json";
    const fs::path records_path = dir / "records.bin";
    std::ifstream mf(manifest_path);
    if (!mf) throw io_error("cannot open " + manifest_path.string());
    nlohmann::json j;
    try {
        mf >> j;
    } catch (const nlohmann::json::exception& e) {
        throw io_error("malformed manifest " + manifest_path.string() + ": " + e.what());
    }
    Dataset ds;
    ds.manifest = manifest_from_json(j);

    std::ifstream rf(records_path, std::ios::binary);
    if (!rf) throw io_error("cannot open " + records_path.string());
    const std::size_t expected = ds.manifest.n_twins * ds.manifest.n_per_twin;
    ds.windows.reserve(expected);
    for (std::size_t i = 0; i < expected; ++i) {
        LabeledWindow w;
        w.class_label = detail::read_le<std::uint16_t>(rf);
        w.twin_id = detail::read_le<std::uint16_t>(rf);
        w.kappa = detail::read_le<float>(rf);
        w.samples.resize(ds.manifest.window_len);
        for (float& s : w.samples) s = detail::read_le<float>(rf);
        if (!rf) {
            throw io_error("truncated records file " + records_path.string() + " at record " +
                           std::to_string(i));
        }
        ds.windows.push_back(std::move(w));
    }
    char probe;
    if (rf.read(&probe, 1)) {
        throw io_error("records file " + records_path.string() + " has trailing data");
    }
    return ds;
}

}  // namespace twinuq
