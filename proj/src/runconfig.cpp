#include "voxelseg/runconfig.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace voxelseg {

using nlohmann::json;

namespace {

// Wraps one JSON object with known-key bookkeeping; leftover keys are
// reported with their dotted path.
class StrictObject {
  public:
    StrictObject(const json& j, std::string prefix) : j_(j), prefix_(std::move(prefix)) {
        if (!j_.is_object())
            throw ConfigError("config: " + (prefix_.empty() ? "document" : prefix_) +
                              " must be a JSON object");
    }

    template <typename T>
    void get(const char* key, T& out) {
        seen_.push_back(key);
        if (auto it = j_.find(key); it != j_.end()) {
            try {
                out = it->get<T>();
            } catch (const json::exception&) {
                throw ConfigError("config: bad value type for " + dotted(key));
            }
        }
    }

    bool has(const char* key) const { return j_.contains(key); }

    const json* child(const char* key) {
        seen_.push_back(key);
        if (auto it = j_.find(key); it != j_.end()) return &*it;
        return nullptr;
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            bool known = false;
            for (const auto& k : seen_)
                if (k == it.key()) known = true;
            if (!known) throw ConfigError("config: unknown key " + dotted(it.key().c_str()));
        }
    }

    std::string dotted(const char* key) const {
        return prefix_.empty() ? key : prefix_ + "." + key;
    }

  private:
    const json& j_;
    std::string prefix_;
    std::vector<std::string> seen_;
};

void parse_network(const json& j, NetworkConfig& n) {
    StrictObject o(j, "network");
    o.get("input_height", n.input_height);
    o.get("input_width", n.input_width);
    o.get("input_depth", n.input_depth);
    o.get("stages", n.stages);
    o.get("channels", n.channels);
    o.get("convs_per_stage", n.convs_per_stage);
    o.get("dropout_p", n.dropout_p);
    o.get("num_classes", n.num_classes);
    o.finish();
}

void parse_train(const json& j, TrainConfig& t) {
    StrictObject o(j, "train");
    std::string opt = t.optimizer == OptimizerKind::adam ? "adam" : "sgd_momentum";
    o.get("optimizer", opt);
    if (opt == "adam") t.optimizer = OptimizerKind::adam;
    else if (opt == "sgd_momentum") t.optimizer = OptimizerKind::sgd_momentum;
    else throw ConfigError("config: train.optimizer must be adam or sgd_momentum");
    o.get("learning_rate", t.learning_rate);
    o.get("momentum", t.momentum);
    o.get("beta1", t.beta1);
    o.get("beta2", t.beta2);
    o.get("adam_eps", t.adam_eps);
    o.get("max_epochs", t.max_epochs);
    o.get("patience", t.patience);
    o.get("batch_size", t.batch_size);
    o.get("augment", t.augment);
    o.finish();
}

void parse_loss(const json& j, LossParams& l) {
    StrictObject o(j, "loss");
    o.get("w0", l.w0);
    o.get("sigma", l.sigma);
    o.get("squared_distance", l.squared_distance);
    o.finish();
}

void parse_crf(const json& j, CrfParams& c) {
    StrictObject o(j, "crf");
    o.get("w1", c.w1);
    o.get("w2", c.w2);
    o.get("theta_alpha", c.theta_alpha);
    o.get("theta_beta", c.theta_beta);
    o.get("theta_gamma", c.theta_gamma);
    o.get("neighborhood_radius", c.neighborhood_radius);
    o.get("band_width", c.band_width);
    o.get("iterations", c.iterations);
    o.finish();
}

void parse_folds(const json& j, RunConfig::Folds& f) {
    StrictObject o(j, "folds");
    o.get("k", f.k);
    o.get("validation_count", f.validation_count);
    o.get("index", f.index);
    o.finish();
}

}  // namespace

std::string RunConfig::effective_cache_dir() const {
    if (const char* env = std::getenv("VOXELSEG_CACHE"); env && *env) return env;
    if (!cache_dir.empty()) return cache_dir;
    return (std::filesystem::path(dataset_root) / ".augcache").string();
}

void RunConfig::validate() const {
    network.validate();
    train.validate();
    loss.validate();
    crf.validate();
    if (threads < 1) throw ConfigError("config: threads must be >= 1");
    if (folds.k < 2) throw ConfigError("config: folds.k must be >= 2");
}

RunConfig parse_run_config(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }

    RunConfig c;
    StrictObject o(j, "");
    o.get("seed", c.seed);
    std::string dtype = "f64";
    o.get("dtype", dtype);
    if (dtype == "f64") c.dtype = DType::f64;
    else if (dtype == "f32") c.dtype = DType::f32;
    else throw ConfigError("config: dtype must be f64 or f32");
    o.get("threads", c.threads);
    o.get("dataset_root", c.dataset_root);
    o.get("cache_dir", c.cache_dir);
    o.get("output_dir", c.output_dir);
    if (const json* n = o.child("network")) parse_network(*n, c.network);
    if (const json* t = o.child("train")) parse_train(*t, c.train);
    if (const json* l = o.child("loss")) parse_loss(*l, c.loss);
    if (const json* r = o.child("crf")) parse_crf(*r, c.crf);
    if (const json* f = o.child("folds")) parse_folds(*f, c.folds);
    o.finish();

    c.train.seed = c.seed;
    c.train.loss = c.loss;
    return c;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config file: " + path);
    std::ostringstream buf;
    buf << is.rdbuf();
    return parse_run_config(buf.str());
}

std::string print_run_config(const RunConfig& c) {
    json j;
    j["seed"] = c.seed;
    j["dtype"] = c.dtype == DType::f64 ? "f64" : "f32";
    j["threads"] = c.threads;
    j["dataset_root"] = c.dataset_root;
    j["cache_dir"] = c.cache_dir;
    j["output_dir"] = c.output_dir;
    j["network"] = {{"input_height", c.network.input_height},
                    {"input_width", c.network.input_width},
                    {"input_depth", c.network.input_depth},
                    {"stages", c.network.stages},
                    {"channels", c.network.channels},
                    {"convs_per_stage", c.network.convs_per_stage},
                    {"dropout_p", c.network.dropout_p},
                    {"num_classes", c.network.num_classes}};
    j["train"] = {{"optimizer", c.train.optimizer == OptimizerKind::adam ? "adam" : "sgd_momentum"},
                  {"learning_rate", c.train.learning_rate},
                  {"momentum", c.train.momentum},
                  {"beta1", c.train.beta1},
                  {"beta2", c.train.beta2},
                  {"adam_eps", c.train.adam_eps},
                  {"max_epochs", c.train.max_epochs},
                  {"patience", c.train.patience},
                  {"batch_size", c.train.batch_size},
                  {"augment", c.train.augment}};
    j["loss"] = {{"w0", c.loss.w0},
                 {"sigma", c.loss.sigma},
                 {"squared_distance", c.loss.squared_distance}};
    j["crf"] = {{"w1", c.crf.w1},
                {"w2", c.crf.w2},
                {"theta_alpha", c.crf.theta_alpha},
                {"theta_beta", c.crf.theta_beta},
                {"theta_gamma", c.crf.theta_gamma},
                {"neighborhood_radius", c.crf.neighborhood_radius},
                {"band_width", c.crf.band_width},
                {"iterations", c.crf.iterations}};
    j["folds"] = {{"k", c.folds.k},
                  {"validation_count", c.folds.validation_count},
                  {"index", c.folds.index}};
    return j.dump(2) + "\n";
}

std::string apply_overrides(const std::string& json_text,
                            const std::vector<std::string>& overrides) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    for (const auto& ov : overrides) {
        const auto eq = ov.find('=');
        if (eq == std::string::npos)
            throw ConfigError("override must look like key=value, got: " + ov);
        const std::string key = ov.substr(0, eq);
        const std::string value = ov.substr(eq + 1);

        json parsed;
        try {
            parsed = json::parse(value);
        } catch (const json::exception&) {
            parsed = value;  // plain string
        }

        json* node = &j;
        std::istringstream parts(key);
        std::string part;
        std::vector<std::string> path;
        while (std::getline(parts, part, '.')) path.push_back(part);
        if (path.empty()) throw ConfigError("override has an empty key: " + ov);
        for (std::size_t i = 0; i + 1 < path.size(); ++i) node = &(*node)[path[i]];
        (*node)[path.back()] = parsed;
    }
    return j.dump();
}

}  // namespace voxelseg
