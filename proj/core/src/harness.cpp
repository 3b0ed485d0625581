#include "inflight/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "inflight/errors.hpp"

namespace inflight {

namespace {

using nlohmann::json;

void reject_unknown_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    for (const auto& [key, value] : j.items())
        if (!allowed.contains(key)) throw ConfigError("unknown key \"" + key + "\" in " + where);
}

DatasetSpec dataset_from_json(const json& j) {
    reject_unknown_keys(j,
                        {"kind", "train_images", "train_labels", "test_images", "test_labels", "train_cache",
                         "test_cache", "num_classes", "per_class_train", "per_class_test", "height", "width",
                         "channels"},
                        "dataset");
    DatasetSpec ds;
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "idx") {
        ds.kind = DatasetSpec::Kind::idx;
        ds.train_images = j.at("train_images").get<std::string>();
        ds.train_labels = j.at("train_labels").get<std::string>();
        ds.test_images = j.at("test_images").get<std::string>();
        ds.test_labels = j.at("test_labels").get<std::string>();
    } else if (kind == "cache") {
        ds.kind = DatasetSpec::Kind::cache;
        ds.train_cache = j.at("train_cache").get<std::string>();
        ds.test_cache = j.at("test_cache").get<std::string>();
    } else if (kind == "synthetic") {
        ds.kind = DatasetSpec::Kind::synthetic;
        ds.num_classes = j.value("num_classes", ds.num_classes);
        ds.per_class_train = j.value("per_class_train", ds.per_class_train);
        ds.per_class_test = j.value("per_class_test", ds.per_class_test);
        ds.height = j.value("height", ds.height);
        ds.width = j.value("width", ds.width);
        ds.channels = j.value("channels", ds.channels);
    } else {
        throw ConfigError("unknown dataset kind \"" + kind + "\"");
    }
    return ds;
}

json dataset_to_json(const DatasetSpec& ds) {
    json j;
    switch (ds.kind) {
        case DatasetSpec::Kind::idx:
            j["kind"] = "idx";
            j["train_images"] = ds.train_images.string();
            j["train_labels"] = ds.train_labels.string();
            j["test_images"] = ds.test_images.string();
            j["test_labels"] = ds.test_labels.string();
            break;
        case DatasetSpec::Kind::cache:
            j["kind"] = "cache";
            j["train_cache"] = ds.train_cache.string();
            j["test_cache"] = ds.test_cache.string();
            break;
        case DatasetSpec::Kind::synthetic:
            j["kind"] = "synthetic";
            j["num_classes"] = ds.num_classes;
            j["per_class_train"] = ds.per_class_train;
            j["per_class_test"] = ds.per_class_test;
            j["height"] = ds.height;
            j["width"] = ds.width;
            j["channels"] = ds.channels;
            break;
    }
    return j;
}

PatternSpec pattern_spec_from_json(const json& j) {
    reject_unknown_keys(j, {"kind", "amplitude", "row", "col", "box_size", "path"}, "attack.pattern");
    PatternSpec ps;
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "chessboard") {
        ps.kind = PatternSpec::Kind::chessboard;
        ps.amplitude = j.value("amplitude", ps.amplitude);
    } else if (kind == "single_pixel") {
        ps.kind = PatternSpec::Kind::single_pixel;
        ps.row = j.value("row", ps.row);
        ps.col = j.value("col", ps.col);
    } else if (kind == "white_box") {
        ps.kind = PatternSpec::Kind::white_box;
        ps.box_size = j.value("box_size", ps.box_size);
    } else if (kind == "file") {
        ps.kind = PatternSpec::Kind::file;
        ps.path = j.at("path").get<std::string>();
    } else {
        throw ConfigError("unknown pattern kind \"" + kind + "\"");
    }
    return ps;
}

json pattern_spec_to_json(const PatternSpec& ps) {
    json j;
    switch (ps.kind) {
        case PatternSpec::Kind::none:
            throw ConfigError("attack pattern kind is unset");
        case PatternSpec::Kind::chessboard:
            j["kind"] = "chessboard";
            j["amplitude"] = ps.amplitude;
            break;
        case PatternSpec::Kind::single_pixel:
            j["kind"] = "single_pixel";
            j["row"] = ps.row;
            j["col"] = ps.col;
            break;
        case PatternSpec::Kind::white_box:
            j["kind"] = "white_box";
            j["box_size"] = ps.box_size;
            break;
        case PatternSpec::Kind::file:
            j["kind"] = "file";
            j["path"] = ps.path.string();
            break;
    }
    return j;
}

}  // namespace

void ExperimentConfig::validate() const {
    switch (dataset.kind) {
        case DatasetSpec::Kind::idx:
            if (dataset.train_images.empty() || dataset.train_labels.empty() || dataset.test_images.empty() ||
                dataset.test_labels.empty())
                throw ConfigError("idx dataset needs all four file paths");
            break;
        case DatasetSpec::Kind::cache:
            if (dataset.train_cache.empty() || dataset.test_cache.empty())
                throw ConfigError("cache dataset needs train_cache and test_cache paths");
            break;
        case DatasetSpec::Kind::synthetic:
            if (dataset.num_classes < 2) throw ConfigError("synthetic dataset needs >= 2 classes");
            if (dataset.per_class_train < 1 || dataset.per_class_test < 1)
                throw ConfigError("synthetic dataset needs >= 1 sample per class per partition");
            if (dataset.height < 1 || dataset.width < 1 || dataset.channels < 1)
                throw ConfigError("synthetic dataset dimensions must be positive");
            break;
    }
    if (split.per_class_defense < 1) throw ConfigError("per_class_defense must be >= 1");

    if (attack) {
        if (attack->pattern.kind == PatternSpec::Kind::none) throw ConfigError("attack section needs a pattern");
        if (attack->target_class < 0) throw ConfigError("target_class must be >= 0");
        if (attack->per_source_poison_count < 1) throw ConfigError("per_source_poison_count must be >= 1");
        for (int s : attack->source_classes) {
            if (s < 0) throw ConfigError("source class indices must be >= 0");
            if (s == attack->target_class)
                throw ConfigError("source class " + std::to_string(s) + " equals the target class");
        }
    } else {
        if (recovery.mode != RecoverySection::Mode::oracle || baselines.enabled)
            throw ConfigError("recovery and baselines need an attack section");
    }

    train.validate();
    if (recovery.mode != RecoverySection::Mode::oracle) recovery.config.validate();

    if (detector.tap.empty()) throw ConfigError("detector tap must be set");
    if (detector.k_candidates.empty()) throw ConfigError("detector k_candidates must be nonempty");
    for (int k : detector.k_candidates)
        if (k < 1) throw ConfigError("detector component counts must be >= 1");
    if (!(detector.variance_floor > 0.0)) throw ConfigError("variance_floor must be positive");
    if (detector.min_samples < 2) throw ConfigError("detector min_samples must be >= 2");

    if (baselines.enabled) {
        if (baselines.strip_blends < 1) throw ConfigError("strip_blends must be >= 1");
        if (!(baselines.strip_alpha > 0.0 && baselines.strip_alpha < 1.0))
            throw ConfigError("strip_alpha must lie in (0,1)");
        if (!(baselines.nc_top_fraction > 0.0 && baselines.nc_top_fraction <= 1.0))
            throw ConfigError("nc_top_fraction must lie in (0,1]");
        if (!(baselines.target_fpr > 0.0 && baselines.target_fpr < 1.0))
            throw ConfigError("baseline target_fpr must lie in (0,1)");
    }

    if (output_dir.empty()) throw ConfigError("output_dir must be set");
}

ExperimentConfig config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config parse failed: ") + e.what());
    }

    try {
        reject_unknown_keys(
            j, {"dataset", "split", "attack", "train", "recovery", "detector", "baselines", "output_dir", "seed",
                "deterministic"},
            "config");

        ExperimentConfig cfg;
        cfg.dataset = dataset_from_json(j.at("dataset"));

        if (j.contains("split")) {
            reject_unknown_keys(j["split"], {"per_class_defense"}, "split");
            cfg.split.per_class_defense = j["split"].value("per_class_defense", cfg.split.per_class_defense);
        }

        if (j.contains("attack")) {
            const json& ja = j["attack"];
            reject_unknown_keys(ja, {"pattern", "target_class", "source_classes", "per_source_poison_count"},
                                "attack");
            AttackSection a;
            a.pattern = pattern_spec_from_json(ja.at("pattern"));
            a.target_class = ja.at("target_class").get<int>();
            a.source_classes = ja.value("source_classes", std::vector<int>{});
            a.per_source_poison_count = ja.at("per_source_poison_count").get<int>();
            cfg.attack = std::move(a);
        }

        if (j.contains("train")) {
            const json& jt = j["train"];
            reject_unknown_keys(jt, {"epochs", "batch_size", "learning_rate", "lr_decay_factor", "lr_decay_period"},
                                "train");
            cfg.train.epochs = jt.value("epochs", cfg.train.epochs);
            cfg.train.batch_size = jt.value("batch_size", cfg.train.batch_size);
            cfg.train.learning_rate = jt.value("learning_rate", cfg.train.learning_rate);
            cfg.train.lr_decay_factor = jt.value("lr_decay_factor", cfg.train.lr_decay_factor);
            cfg.train.lr_decay_period = jt.value("lr_decay_period", cfg.train.lr_decay_period);
        }

        if (j.contains("recovery")) {
            const json& jr = j["recovery"];
            reject_unknown_keys(jr,
                                {"mode", "max_iterations", "step_size", "lambda", "success_threshold", "mask_init",
                                 "pattern_init"},
                                "recovery");
            const std::string mode = jr.value("mode", std::string("oracle"));
            if (mode == "oracle")
                cfg.recovery.mode = RecoverySection::Mode::oracle;
            else if (mode == "additive")
                cfg.recovery.mode = RecoverySection::Mode::additive;
            else if (mode == "patch")
                cfg.recovery.mode = RecoverySection::Mode::patch;
            else
                throw ConfigError("unknown recovery mode \"" + mode + "\"");
            RecoveryConfig& rc = cfg.recovery.config;
            rc.mode = cfg.recovery.mode == RecoverySection::Mode::patch ? RecoveryConfig::Mode::patch
                                                                        : RecoveryConfig::Mode::additive;
            rc.max_iterations = jr.value("max_iterations", rc.max_iterations);
            rc.step_size = jr.value("step_size", rc.step_size);
            rc.lambda = jr.value("lambda", rc.lambda);
            rc.success_threshold = jr.value("success_threshold", rc.success_threshold);
            rc.mask_init = jr.value("mask_init", rc.mask_init);
            rc.pattern_init = jr.value("pattern_init", rc.pattern_init);
        }

        if (j.contains("detector")) {
            const json& jd = j["detector"];
            reject_unknown_keys(jd, {"tap", "k_candidates", "variance_floor", "min_samples"}, "detector");
            cfg.detector.tap = jd.value("tap", cfg.detector.tap);
            cfg.detector.k_candidates = jd.value("k_candidates", cfg.detector.k_candidates);
            cfg.detector.variance_floor = jd.value("variance_floor", cfg.detector.variance_floor);
            cfg.detector.min_samples = jd.value("min_samples", cfg.detector.min_samples);
        }

        if (j.contains("baselines")) {
            const json& jb = j["baselines"];
            reject_unknown_keys(jb, {"enabled", "strip_blends", "strip_alpha", "nc_top_fraction", "target_fpr"},
                                "baselines");
            cfg.baselines.enabled = jb.value("enabled", cfg.baselines.enabled);
            cfg.baselines.strip_blends = jb.value("strip_blends", cfg.baselines.strip_blends);
            cfg.baselines.strip_alpha = jb.value("strip_alpha", cfg.baselines.strip_alpha);
            cfg.baselines.nc_top_fraction = jb.value("nc_top_fraction", cfg.baselines.nc_top_fraction);
            cfg.baselines.target_fpr = jb.value("target_fpr", cfg.baselines.target_fpr);
        }

        cfg.output_dir = j.at("output_dir").get<std::string>();
        cfg.seed = j.value("seed", std::uint64_t{0});
        cfg.deterministic = j.value("deterministic", true);
        cfg.validate();
        return cfg;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config missing or mistyped field: ") + e.what());
    }
}

std::string config_to_json(const ExperimentConfig& cfg) {
    json j;
    j["dataset"] = dataset_to_json(cfg.dataset);
    j["split"]["per_class_defense"] = cfg.split.per_class_defense;
    if (cfg.attack) {
        json ja;
        ja["pattern"] = pattern_spec_to_json(cfg.attack->pattern);
        ja["target_class"] = cfg.attack->target_class;
        ja["source_classes"] = cfg.attack->source_classes;
        ja["per_source_poison_count"] = cfg.attack->per_source_poison_count;
        j["attack"] = std::move(ja);
    }
    j["train"] = {{"epochs", cfg.train.epochs},
                  {"batch_size", cfg.train.batch_size},
                  {"learning_rate", cfg.train.learning_rate},
                  {"lr_decay_factor", cfg.train.lr_decay_factor},
                  {"lr_decay_period", cfg.train.lr_decay_period}};
    {
        json jr;
        switch (cfg.recovery.mode) {
            case RecoverySection::Mode::oracle: jr["mode"] = "oracle"; break;
            case RecoverySection::Mode::additive: jr["mode"] = "additive"; break;
            case RecoverySection::Mode::patch: jr["mode"] = "patch"; break;
        }
        if (cfg.recovery.mode != RecoverySection::Mode::oracle) {
            jr["max_iterations"] = cfg.recovery.config.max_iterations;
            jr["step_size"] = cfg.recovery.config.step_size;
            jr["lambda"] = cfg.recovery.config.lambda;
            jr["success_threshold"] = cfg.recovery.config.success_threshold;
            if (cfg.recovery.mode == RecoverySection::Mode::patch) {
                jr["mask_init"] = cfg.recovery.config.mask_init;
                jr["pattern_init"] = cfg.recovery.config.pattern_init;
            }
        }
        j["recovery"] = std::move(jr);
    }
    j["detector"] = {{"tap", cfg.detector.tap},
                     {"k_candidates", cfg.detector.k_candidates},
                     {"variance_floor", cfg.detector.variance_floor},
                     {"min_samples", cfg.detector.min_samples}};
    j["baselines"] = {{"enabled", cfg.baselines.enabled},
                      {"strip_blends", cfg.baselines.strip_blends},
                      {"strip_alpha", cfg.baselines.strip_alpha},
                      {"nc_top_fraction", cfg.baselines.nc_top_fraction},
                      {"target_fpr", cfg.baselines.target_fpr}};
    j["output_dir"] = cfg.output_dir.string();
    j["seed"] = cfg.seed;
    j["deterministic"] = cfg.deterministic;
    return j.dump(2);
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return config_from_json(ss.str());
}

std::string report_to_json(const MetricsReport& report) {
    json j;
    j["schema_version"] = report.schema_version;
    j["seed"] = report.seed;
    j["deterministic"] = report.deterministic;
    j["config"] = json::parse(report.config_echo);
    j["acc"] = report.acc;
    if (report.asr_gt) j["asr_gt"] = *report.asr_gt;
    if (report.asr_re) j["asr_re"] = *report.asr_re;
    if (report.tpr) j["tpr"] = *report.tpr;
    if (report.fpr) j["fpr"] = *report.fpr;
    if (report.sia) j["sia"] = *report.sia;
    if (report.recovery_flip_fraction) {
        j["recovery"]["flip_fraction"] = *report.recovery_flip_fraction;
        if (report.recovery_mask_support) j["recovery"]["mask_support"] = *report.recovery_mask_support;
    }
    if (!report.baselines.empty()) {
        json jb;
        for (const auto& [name, bm] : report.baselines) {
            jb[name] = {{"threshold", bm.threshold},
                        {"direction", bm.direction},
                        {"achieved_calibration_fpr", bm.achieved_calibration_fpr},
                        {"degenerate", bm.degenerate},
                        {"tpr", bm.tpr},
                        {"fpr", bm.fpr}};
        }
        j["baselines"] = std::move(jb);
    }
    j["train_loss"] = report.train_loss;
    if (!report.timing.empty()) j["timing"] = report.timing;
    return j.dump(2);
}

MetricsReport report_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw FormatError(std::string("report parse failed: ") + e.what());
    }
    try {
        MetricsReport r;
        r.schema_version = j.at("schema_version").get<int>();
        if (r.schema_version != 1) throw FormatError("unsupported report schema_version");
        r.seed = j.at("seed").get<std::uint64_t>();
        r.deterministic = j.at("deterministic").get<bool>();
        r.config_echo = j.at("config").dump(2);
        r.acc = j.at("acc").get<double>();
        if (j.contains("asr_gt")) r.asr_gt = j["asr_gt"].get<double>();
        if (j.contains("asr_re")) r.asr_re = j["asr_re"].get<double>();
        if (j.contains("tpr")) r.tpr = j["tpr"].get<double>();
        if (j.contains("fpr")) r.fpr = j["fpr"].get<double>();
        if (j.contains("sia")) r.sia = j["sia"].get<double>();
        if (j.contains("recovery")) {
            r.recovery_flip_fraction = j["recovery"].at("flip_fraction").get<double>();
            if (j["recovery"].contains("mask_support")) r.recovery_mask_support = j["recovery"]["mask_support"].get<int>();
        }
        if (j.contains("baselines")) {
            for (const auto& [name, jb] : j["baselines"].items()) {
                BaselineMetrics bm;
                bm.threshold = jb.at("threshold").get<double>();
                bm.direction = jb.at("direction").get<std::string>();
                bm.achieved_calibration_fpr = jb.at("achieved_calibration_fpr").get<double>();
                bm.degenerate = jb.at("degenerate").get<bool>();
                bm.tpr = jb.at("tpr").get<double>();
                bm.fpr = jb.at("fpr").get<double>();
                r.baselines[name] = bm;
            }
        }
        r.train_loss = j.at("train_loss").get<std::vector<double>>();
        if (j.contains("timing")) r.timing = j["timing"].get<std::map<std::string, double>>();
        return r;
    } catch (const json::exception& e) {
        throw FormatError(std::string("report missing or mistyped field: ") + e.what());
    }
}

}  // namespace inflight
