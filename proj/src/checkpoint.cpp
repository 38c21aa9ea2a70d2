#include "labpred/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace labpred {

using nlohmann::ordered_json;

namespace {

constexpr char kMagic[8] = {'L', 'A', 'B', 'P', 'R', 'E', 'D', '1'};

ordered_json config_to_json(const ModelConfig& c) {
    ordered_json j;
    j["n_layers"] = c.n_layers;
    j["n_heads"] = c.n_heads;
    j["d_model"] = c.d_model;
    j["d_ff"] = c.d_ff;
    j["max_seq_len"] = c.max_seq_len;
    j["vocab_size"] = c.vocab_size;
    j["dropout"] = c.dropout;
    return j;
}

ModelConfig config_from_json(const ordered_json& j) {
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.dropout = j.at("dropout").get<double>();
    return c;
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelParams& params,
                     const CheckpointMeta& meta) {
    ordered_json header;
    header["format"] = 1;
    header["config"] = config_to_json(params.config);
    ordered_json jm;
    jm["vocab_hash"] = meta.vocab_hash;
    jm["seed"] = meta.seed;
    jm["steps"] = meta.steps;
    jm["epochs"] = meta.epochs;
    jm["best_epoch"] = meta.best_epoch;
    jm["best_val_loss"] = meta.best_val_loss;
    jm["time_mode"] = meta.time_mode;
    jm["value_mode"] = meta.value_mode;
    jm["quantile_bins"] = meta.quantile_bins;
    jm["binning"] = meta.binning;
    jm["include_types"] = meta.include_types;
    jm["full_ar"] = meta.full_ar;
    header["meta"] = std::move(jm);
    ordered_json tensors = ordered_json::array();
    params.visit([&tensors](const char* name, const float*, Eigen::Index size) {
        ordered_json t;
        t["name"] = name;
        t["size"] = static_cast<int64_t>(size);
        tensors.push_back(std::move(t));
    });
    header["tensors"] = std::move(tensors);
    std::string header_text = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error(path + ": cannot open for writing");
    out.write(kMagic, sizeof kMagic);
    uint64_t len = header_text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    params.visit([&out](const char*, const float* data, Eigen::Index size) {
        out.write(reinterpret_cast<const char*>(data),
                  static_cast<std::streamsize>(size_t(size) * sizeof(float)));
    });
    if (!out) throw std::runtime_error(path + ": write failed");
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error(path + ": cannot open");
    char magic[8];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
        throw std::runtime_error(path + ": not a model checkpoint");
    uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof len);
    if (!in || len == 0 || len > (1u << 30))
        throw std::runtime_error(path + ": corrupt header length");
    std::string header_text(len, '\0');
    in.read(header_text.data(), static_cast<std::streamsize>(len));
    if (!in) throw std::runtime_error(path + ": truncated header");

    ordered_json header;
    try {
        header = ordered_json::parse(header_text);
    } catch (const ordered_json::parse_error& e) {
        throw std::runtime_error(path + ": bad header: " + e.what());
    }
    if (header.at("format").get<int>() != 1)
        throw std::runtime_error(path + ": unsupported checkpoint format");

    LoadedCheckpoint loaded;
    loaded.params = ModelParams::shaped(config_from_json(header.at("config")));
    const ordered_json& jm = header.at("meta");
    loaded.meta.vocab_hash = jm.at("vocab_hash").get<uint64_t>();
    loaded.meta.seed = jm.at("seed").get<uint64_t>();
    loaded.meta.steps = jm.at("steps").get<long>();
    loaded.meta.epochs = jm.at("epochs").get<int>();
    loaded.meta.best_epoch = jm.at("best_epoch").get<int>();
    loaded.meta.best_val_loss = jm.at("best_val_loss").get<double>();
    loaded.meta.time_mode = jm.at("time_mode").get<std::string>();
    loaded.meta.value_mode = jm.at("value_mode").get<std::string>();
    loaded.meta.quantile_bins = jm.at("quantile_bins").get<int>();
    loaded.meta.binning = jm.at("binning").get<std::string>();
    loaded.meta.include_types = jm.at("include_types").get<std::vector<std::string>>();
    loaded.meta.full_ar = jm.at("full_ar").get<bool>();

    size_t expected = 0;
    for (const ordered_json& t : header.at("tensors"))
        expected += t.at("size").get<size_t>();
    if (expected != loaded.params.parameter_count())
        throw std::runtime_error(path + ": tensor directory does not match the model config");

    bool ok = true;
    loaded.params.visit([&](const char*, float* data, Eigen::Index size) {
        in.read(reinterpret_cast<char*>(data),
                static_cast<std::streamsize>(size_t(size) * sizeof(float)));
        if (!in) ok = false;
    });
    if (!ok) throw std::runtime_error(path + ": truncated tensor data");
    return loaded;
}

}  // namespace labpred
