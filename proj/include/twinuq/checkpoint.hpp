#pragma once

// Checkpoint file: 8-byte magic, u64 little-endian header length, JSON header
// (model identity, training configuration, metric history), then a float32
// little-endian blob holding the trainable tensors in declaration order
// followed by each batchnorm layer's running mean and variance. The loader
// validates element counts against the header. Round trips are bit-exact.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "twinuq/errors.hpp"
#include "twinuq/layers.hpp"
#include "twinuq/train.hpp"

namespace twinuq {

inline constexpr char kCheckpointMagic[8] = {'T', 'W', 'I', 'N', 'U', 'Q', 'C', '1'};

struct CheckpointMeta {
    int schema_version = 1;
    ModelKind kind = ModelKind::plain;
    Arch arch = Arch::fc;
    std::size_t input_len = 0;
    std::size_t n_classes = 0;
    double dropout_p = 0.2;
    std::size_t kernel_width = 15;
    InputKind input_kind = InputKind::raw;
    std::vector<int> train_twin_ids;  // 1-based instance ids
    std::vector<std::string> class_names;
    TrainConfig config;
    std::vector<EpochMetrics> history;
    std::size_t best_epoch = 0;
    double best_val_loss = 0.0;
    double best_val_accuracy = 0.0;
};

namespace detail {

inline nlohmann::json config_to_json(const TrainConfig& c) {
    return nlohmann::json{{"kind", to_string(c.kind)},
                          {"arch", to_string(c.arch)},
                          {"learning_rate", c.learning_rate},
                          {"epochs", c.epochs},
                          {"batch_size", c.batch_size},
                          {"plateau_patience", c.plateau_patience},
                          {"lr_decay_factor", c.lr_decay_factor},
                          {"split_fractions", c.split_fractions},
                          {"seed", c.seed},
                          {"dropout_p", c.dropout_p},
                          {"t_train", c.t_train},
                          {"t_eval", c.t_eval}};
}

inline TrainConfig config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.kind = model_kind_from_string(j.at("kind").get<std::string>());
    c.arch = arch_from_string(j.at("arch").get<std::string>());
    c.learning_rate = j.at("learning_rate").get<double>();
    c.epochs = j.at("epochs").get<std::size_t>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.plateau_patience = j.at("plateau_patience").get<std::size_t>();
    c.lr_decay_factor = j.at("lr_decay_factor").get<double>();
    auto f = j.at("split_fractions").get<std::vector<double>>();
    if (f.size() != 3) throw io_error("checkpoint: split_fractions must have 3 entries");
    c.split_fractions = {f[0], f[1], f[2]};
    c.seed = j.at("seed").get<std::uint64_t>();
    c.dropout_p = j.at("dropout_p").get<double>();
    c.t_train = j.at("t_train").get<std::size_t>();
    c.t_eval = j.at("t_eval").get<std::size_t>();
    return c;
}

inline std::size_t running_stat_count(const Model& m) {
    std::size_t n = 0;
    for (const Layer& l : m.trunk)
        if (l.kind == LayerKind::batchnorm) n += 2 * l.running_mean.size();
    return n;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const Model& model,
                            const CheckpointMeta& meta) {
    nlohmann::json history = nlohmann::json::array();
    for (const EpochMetrics& e : meta.history) {
        history.push_back(nlohmann::json{{"train_loss", e.train_loss},
                                         {"val_loss", e.val_loss},
                                         {"val_accuracy", e.val_accuracy},
                                         {"lr", e.lr}});
    }
    const std::size_t trainable = model.parameter_count();
    const std::size_t blob_count = trainable + detail::running_stat_count(model);
    nlohmann::json header{{"schema_version", meta.schema_version},
                          {"kind", to_string(meta.kind)},
                          {"arch", to_string(meta.arch)},
                          {"input_len", meta.input_len},
                          {"n_classes", meta.n_classes},
                          {"dropout_p", meta.dropout_p},
                          {"kernel_width", meta.kernel_width},
                          {"input_kind", to_string(meta.input_kind)},
                          {"train_twin_ids", meta.train_twin_ids},
                          {"class_names", meta.class_names},
                          {"config", detail::config_to_json(meta.config)},
                          {"history", history},
                          {"best_epoch", meta.best_epoch},
                          {"best_val_loss", meta.best_val_loss},
                          {"best_val_accuracy", meta.best_val_accuracy},
                          {"trainable_count", trainable},
                          {"blob_count", blob_count}};
    const std::string header_text = header.dump(2);

    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot write checkpoint " + path.string());
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    const std::uint64_t len = header_text.size();
    char lenbuf[8];
    std::memcpy(lenbuf, &len, 8);
    out.write(lenbuf, 8);
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));

    auto write_f32 = [&out](double v) {
        const float f = static_cast<float>(v);
        char buf[4];
        std::memcpy(buf, &f, 4);
        out.write(buf, 4);
    };
    for (const Tensor& p : model.parameters())
        for (std::size_t i = 0; i < p.numel(); ++i) write_f32(p.at(i));
    for (const Layer& l : model.trunk) {
        if (l.kind == LayerKind::batchnorm) {
            for (double v : l.running_mean) write_f32(v);
            for (double v : l.running_var) write_f32(v);
        }
    }
    if (!out) throw io_error("failed writing checkpoint " + path.string());
}

struct LoadedCheckpoint {
    Model model;
    CheckpointMeta meta;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open checkpoint " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
        throw io_error("not a twinuq checkpoint: " + path.string());
    }
    char lenbuf[8];
    in.read(lenbuf, 8);
    std::uint64_t len = 0;
    std::memcpy(&len, lenbuf, 8);
    std::string header_text(len, '\0');
    in.read(header_text.data(), static_cast<std::streamsize>(len));
    if (!in) throw io_error("truncated checkpoint header in " + path.string());

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_text);
    } catch (const nlohmann::json::exception& e) {
        throw io_error("malformed checkpoint header in " + path.string() + ": " + e.what());
    }

    LoadedCheckpoint loaded;
    CheckpointMeta& meta = loaded.meta;
    meta.schema_version = header.at("schema_version").get<int>();
    if (meta.schema_version != 1) {
        throw io_error("unsupported checkpoint schema version in " + path.string());
    }
    meta.kind = model_kind_from_string(header.at("kind").get<std::string>());
    meta.arch = arch_from_string(header.at("arch").get<std::string>());
    meta.input_len = header.at("input_len").get<std::size_t>();
    meta.n_classes = header.at("n_classes").get<std::size_t>();
    meta.dropout_p = header.at("dropout_p").get<double>();
    meta.kernel_width = header.at("kernel_width").get<std::size_t>();
    meta.input_kind = input_kind_from_string(header.at("input_kind").get<std::string>());
    meta.train_twin_ids = header.at("train_twin_ids").get<std::vector<int>>();
    meta.class_names = header.at("class_names").get<std::vector<std::string>>();
    meta.config = detail::config_from_json(header.at("config"));
    for (const auto& e : header.at("history")) {
        meta.history.push_back(EpochMetrics{e.at("train_loss").get<double>(), e.at("val_loss").get<double>(),
                                            e.at("val_accuracy").get<double>(), e.at("lr").get<double>()});
    }
    meta.best_epoch = header.at("best_epoch").get<std::size_t>();
    meta.best_val_loss = header.at("best_val_loss").get<double>();
    meta.best_val_accuracy = header.at("best_val_accuracy").get<double>();

    Rng init_rng(0);  // weights are overwritten below
    loaded.model = build_model(meta.arch, meta.kind, meta.input_len, meta.n_classes, init_rng,
                               meta.dropout_p, meta.kernel_width);

    const std::size_t trainable = header.at("trainable_count").get<std::size_t>();
    const std::size_t blob_count = header.at("blob_count").get<std::size_t>();
    if (loaded.model.parameter_count() != trainable ||
        trainable + detail::running_stat_count(loaded.model) != blob_count) {
        throw io_error("checkpoint " + path.string() + " parameter count mismatch: header says " +
                       std::to_string(trainable) + " trainable / " + std::to_string(blob_count) +
                       " total, architecture has " + std::to_string(loaded.model.parameter_count()) +
                       " / " +
                       std::to_string(loaded.model.parameter_count() +
                                      detail::running_stat_count(loaded.model)));
    }

    auto read_f32 = [&in, &path]() {
        char buf[4];
        in.read(buf, 4);
        if (!in) throw io_error("truncated checkpoint blob in " + path.string());
        float f;
        std::memcpy(&f, buf, 4);
        return static_cast<double>(f);
    };
    for (Tensor& p : loaded.model.parameters()) {
        std::vector<double> values(p.numel());
        for (double& v : values) v = read_f32();
        p.assign(values);
    }
    for (Layer& l : loaded.model.trunk) {
        if (l.kind == LayerKind::batchnorm) {
            for (double& v : l.running_mean) v = read_f32();
            for (double& v : l.running_var) v = read_f32();
        }
    }
    char probe;
    if (in.read(&probe, 1)) throw io_error("checkpoint " + path.string() + " has trailing data");
    return loaded;
}

}  // namespace twinuq
