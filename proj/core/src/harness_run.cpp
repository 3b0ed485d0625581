#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "inflight/errors.hpp"
#include "inflight/harness.hpp"
#include "inflight/rng.hpp"

namespace inflight {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

constexpr const char* kLockFile = "run.lock";
constexpr const char* kConfigFile = "config.json";
constexpr const char* kModelFile = "model.bin";
constexpr const char* kTrainLossFile = "train_loss.csv";
constexpr const char* kSplitFile = "split.json";
constexpr const char* kGtPatternFile = "gt_pattern.json";
constexpr const char* kPoisonedTrainFile = "poisoned_train.bin";
constexpr const char* kPoisonIndicesFile = "poison_indices.json";
constexpr const char* kDeltaHatFile = "delta_hat.json";
constexpr const char* kDeltaHatFailedFile = "delta_hat_failed.json";
constexpr const char* kRecoveryTraceFile = "recovery_trace.csv";
constexpr const char* kRecoverySummaryFile = "recovery_summary.json";
constexpr const char* kDetectorFile = "detector.json";
constexpr const char* kVerdictsTriggeredFile = "verdicts_triggered.jsonl";
constexpr const char* kVerdictsCleanFile = "verdicts_clean.jsonl";
constexpr const char* kPredictionsCleanFile = "predictions_clean.csv";
constexpr const char* kPredictionsAsrReFile = "predictions_asr_re.csv";
constexpr const char* kBaselineScoresFile = "baseline_scores.csv";
constexpr const char* kReportFile = "report.json";

struct StageTimer {
    std::map<std::string, double>* sink;
    std::string key;
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    StageTimer(std::map<std::string, double>* s, std::string k) : sink(s), key(std::move(k)) {}
    ~StageTimer() {
        if (sink)
            (*sink)[key] += std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
};

std::string fmt(double v) {
    std::ostringstream ss;
    ss << std::setprecision(17) << v;
    return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("write failed for " + path.string());
}

BackdoorPattern pattern_from_spec(const PatternSpec& ps, int h, int w, int c) {
    switch (ps.kind) {
        case PatternSpec::Kind::chessboard:
            return make_chessboard(h, w, c, ps.amplitude);
        case PatternSpec::Kind::single_pixel: {
            const int row = ps.row < 0 ? h / 2 : ps.row;
            const int col = ps.col < 0 ? w / 2 : ps.col;
            return make_single_pixel(h, w, c, row, col);
        }
        case PatternSpec::Kind::white_box:
            return make_white_box(h, w, c, ps.box_size);
        case PatternSpec::Kind::file:
            return load_pattern(ps.path);
        case PatternSpec::Kind::none:
            break;
    }
    throw AttackError("attack pattern kind is unset");
}

std::vector<int> resolved_sources(const AttackSection& attack, int num_classes) {
    if (!attack.source_classes.empty()) return attack.source_classes;
    std::vector<int> all;
    for (int c = 0; c < num_classes; ++c)
        if (c != attack.target_class) all.push_back(c);
    return all;
}

const char* decision_name(const StreamVerdict& sv) {
    if (!sv.verdict) return "pass";
    return sv.verdict->reject ? "reject" : "accept";
}

void write_verdict_stream(const fs::path& path, const DetectorReport& rep, const std::vector<int>& true_labels) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    for (std::size_t i = 0; i < rep.items.size(); ++i) {
        const StreamVerdict& sv = rep.items[i];
        json line;
        line["index"] = sv.index;
        line["prediction"] = sv.prediction;
        line["decision"] = decision_name(sv);
        line["true_source"] = true_labels[i];
        if (sv.verdict) {
            line["inferred_source"] = sv.verdict->inferred_source;
            line["log_likelihoods"] = sv.verdict->log_likelihoods;
        }
        out << line.dump() << "\n";
    }
    if (!out) throw IoError("write failed for " + path.string());
}

void write_predictions_csv(const fs::path& path, const std::vector<int>& labels, const std::vector<int>& predictions) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << "index,label,prediction\n";
    for (std::size_t i = 0; i < labels.size(); ++i)
        out << i << "," << labels[i] << "," << predictions[i] << "\n";
    if (!out) throw IoError("write failed for " + path.string());
}

template <typename Fn>
auto stage(Stage s, Fn&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(s, e.what());
    }
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) out.push_back(field);
    return out;
}

}  // namespace

// One run owns its output directory; a leftover lock means another run is
// (or was, if it crashed) using it.
struct RunLock {
    fs::path path;
    explicit RunLock(const fs::path& p) : path(p) {
        const int fd = ::open(p.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd < 0)
            throw IoError("cannot acquire run lock " + p.string() +
                          " (another run active, or a stale lock from a crashed run — remove it manually)");
        ::close(fd);
    }
    ~RunLock() {
        std::error_code ec;
        fs::remove(path, ec);
    }
};

ExperimentRun::ExperimentRun(ExperimentConfig cfg) : cfg_(std::move(cfg)), dir_(cfg_.output_dir) {
    stage(Stage::config, [&] { cfg_.validate(); });
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw StageError(Stage::io, "cannot create output directory " + dir_.string());
    stage(Stage::io, [&] { lock_ = std::make_unique<RunLock>(dir_ / kLockFile); });

    report_.seed = cfg_.seed;
    report_.deterministic = cfg_.deterministic;
    report_.config_echo = config_to_json(cfg_);
    stage(Stage::io, [&] { write_text(dir_ / kConfigFile, report_.config_echo + "\n"); });
    if (!cfg_.deterministic) timing_ = &report_.timing;
}

ExperimentRun::~ExperimentRun() = default;

void ExperimentRun::ensure_data() {
    if (data_ready_) return;
    StageTimer t(timing_, "data");
    stage(Stage::data, [&] {
        switch (cfg_.dataset.kind) {
            case DatasetSpec::Kind::idx:
                train_ = load_idx(cfg_.dataset.train_images, cfg_.dataset.train_labels);
                test_ = load_idx(cfg_.dataset.test_images, cfg_.dataset.test_labels);
                break;
            case DatasetSpec::Kind::cache:
                train_ = load_dataset(cfg_.dataset.train_cache);
                test_ = load_dataset(cfg_.dataset.test_cache);
                break;
            case DatasetSpec::Kind::synthetic:
                train_ = generate_synthetic(cfg_.dataset.num_classes, cfg_.dataset.per_class_train,
                                            cfg_.dataset.height, cfg_.dataset.width, cfg_.dataset.channels,
                                            derive_seed(cfg_.seed, "data_train"));
                test_ = generate_synthetic(cfg_.dataset.num_classes, cfg_.dataset.per_class_test, cfg_.dataset.height,
                                           cfg_.dataset.width, cfg_.dataset.channels,
                                           derive_seed(cfg_.seed, "data_test"));
                break;
        }
        if (train_.num_classes != test_.num_classes) {
            // Class universes must agree; take the wider one so labels index
            // consistently (IDX partitions can disagree when a class is absent).
            const int classes = std::max(train_.num_classes, test_.num_classes);
            train_.num_classes = classes;
            test_.num_classes = classes;
        }
        split_ = split_defense_test(test_, SplitSpec{cfg_.split.per_class_defense, derive_seed(cfg_.seed, "split")});
        json js;
        js["defense_indices"] = split_.defense_indices;
        js["test_indices"] = split_.test_indices;
        write_text(dir_ / kSplitFile, js.dump() + "\n");
        data_ready_ = true;
    });
}

void ExperimentRun::ensure_pattern() {
    if (!cfg_.attack || attack_spec_) return;
    ensure_data();
    StageTimer t(timing_, "attack");
    stage(Stage::attack, [&] {
        sources_ = resolved_sources(*cfg_.attack, train_.num_classes);
        AttackSpec spec;
        spec.target_class = cfg_.attack->target_class;
        spec.source_classes = sources_;
        spec.per_source_poison_count = cfg_.attack->per_source_poison_count;
        spec.pattern = pattern_from_spec(cfg_.attack->pattern, train_.height(), train_.width(), train_.channels());
        spec.seed = derive_seed(cfg_.seed, "poison");
        spec.validate(train_);
        save_pattern(dir_ / kGtPatternFile, spec.pattern);
        attack_spec_ = std::move(spec);
    });
}

void ExperimentRun::ensure_poisoned() {
    if (train_poisoned_) return;
    ensure_data();
    ensure_pattern();
    if (!attack_spec_) {
        train_poisoned_ = true;
        return;
    }
    StageTimer t(timing_, "attack");
    stage(Stage::attack, [&] {
        PoisonResult pr = poison(train_, *attack_spec_);
        // Hygiene: poisoning must replace exactly the agreed number of
        // training samples and never grow the set.
        if (pr.poisoned.size() != train_.size() ||
            pr.poison_indices.size() !=
                sources_.size() * static_cast<std::size_t>(attack_spec_->per_source_poison_count))
            throw AttackError("poison bookkeeping inconsistent with the attack spec");
        train_ = std::move(pr.poisoned);
        poison_indices_ = std::move(pr.poison_indices);
        train_poisoned_ = true;
    });
}

void ExperimentRun::ensure_model() {
    if (model_) return;
    const fs::path p = dir_ / kModelFile;
    if (!fs::exists(p)) throw StageError(Stage::io, "missing " + p.string() + " (run the train stage first)");
    stage(Stage::io, [&] { model_ = Model::load(p); });
}

void ExperimentRun::ensure_delta() {
    if (delta_hat_ || !cfg_.attack) return;
    if (cfg_.recovery.mode == RecoverySection::Mode::oracle) {
        ensure_pattern();
        delta_hat_ = attack_spec_->pattern;
        return;
    }
    const fs::path p = dir_ / kDeltaHatFile;
    if (!fs::exists(p)) throw StageError(Stage::io, "missing " + p.string() + " (run the recover stage first)");
    stage(Stage::io, [&] {
        delta_hat_ = load_pattern(p);
        const fs::path sp = dir_ / kRecoverySummaryFile;
        if (fs::exists(sp)) {
            const json j = json::parse(read_file(sp));
            report_.recovery_flip_fraction = j.at("flip_fraction").get<double>();
            if (j.contains("mask_support")) report_.recovery_mask_support = j["mask_support"].get<int>();
        }
    });
}

void ExperimentRun::ensure_detector() {
    if (detector_ || !cfg_.attack) return;
    const fs::path p = dir_ / kDetectorFile;
    if (!fs::exists(p)) throw StageError(Stage::io, "missing " + p.string() + " (run the detect stage first)");
    stage(Stage::io, [&] { detector_ = load_detector(p); });
}

void ExperimentRun::run_data() { ensure_data(); }

void ExperimentRun::run_attack(bool materialize) {
    ensure_poisoned();
    if (!attack_spec_ || !materialize) return;
    StageTimer t(timing_, "attack");
    stage(Stage::attack, [&] {
        save_dataset(dir_ / kPoisonedTrainFile, train_);
        json js;
        js["poison_indices"] = poison_indices_;
        write_text(dir_ / kPoisonIndicesFile, js.dump() + "\n");
    });
}

void ExperimentRun::run_train() {
    ensure_poisoned();
    StageTimer t(timing_, "train");
    stage(Stage::train, [&] {
        TrainConfig tc = cfg_.train;
        tc.seed = derive_seed(cfg_.seed, "train");
        TrainResult tr = train(train_, tc);
        model_ = std::move(tr.model);
        report_.train_loss = tr.epoch_loss;
        model_->save(dir_ / kModelFile);
        std::ostringstream csv;
        csv << "epoch,mean_loss\n";
        for (std::size_t e = 0; e < tr.epoch_loss.size(); ++e) csv << e << "," << fmt(tr.epoch_loss[e]) << "\n";
        write_text(dir_ / kTrainLossFile, csv.str());
    });
}

void ExperimentRun::run_recover() {
    if (!cfg_.attack) return;
    ensure_pattern();
    StageTimer t(timing_, "recover");
    const int target = attack_spec_->target_class;
    auto write_trace = [&](const RecoveryResult& rr) {
        std::ostringstream csv;
        csv << "iteration,objective,flip_fraction,mask_l1\n";
        for (const auto& pt : rr.trace)
            csv << pt.iteration << "," << fmt(pt.objective) << "," << fmt(pt.flip_fraction) << "," << fmt(pt.mask_l1)
                << "\n";
        write_text(dir_ / kRecoveryTraceFile, csv.str());
    };
    stage(Stage::recover, [&] {
        if (cfg_.recovery.mode == RecoverySection::Mode::oracle) {
            delta_hat_ = attack_spec_->pattern;
        } else {
            ensure_model();
            std::vector<std::size_t> nontarget;
            for (std::size_t i = 0; i < split_.defense.size(); ++i)
                if (split_.defense.labels[i] != target) nontarget.push_back(i);
            const LabeledDataset defense_nontarget = split_.defense.subset(nontarget);

            RecoveryConfig rc = cfg_.recovery.config;
            rc.seed = derive_seed(cfg_.seed, "recover");
            rc.mode = cfg_.recovery.mode == RecoverySection::Mode::patch ? RecoveryConfig::Mode::patch
                                                                         : RecoveryConfig::Mode::additive;
            try {
                RecoveryResult rr = rc.mode == RecoveryConfig::Mode::additive
                                        ? estimate_additive(*model_, target, defense_nontarget, rc)
                                        : estimate_patch(*model_, target, defense_nontarget, rc);
                write_trace(rr);
                report_.recovery_flip_fraction = rr.flip_fraction;
                if (rc.mode == RecoveryConfig::Mode::patch) report_.recovery_mask_support = rr.mask_support;
                json js;
                js["flip_fraction"] = rr.flip_fraction;
                if (rc.mode == RecoveryConfig::Mode::patch) js["mask_support"] = rr.mask_support;
                write_text(dir_ / kRecoverySummaryFile, js.dump() + "\n");
                delta_hat_ = std::move(rr.pattern);
            } catch (const RecoveryFailure& rf) {
                write_trace(rf.best);
                save_pattern(dir_ / kDeltaHatFailedFile, rf.best.pattern);
                throw;
            }
        }
        save_pattern(dir_ / kDeltaHatFile, *delta_hat_);
    });
}

void ExperimentRun::run_detect() {
    if (!cfg_.attack) return;
    ensure_model();
    ensure_delta();
    ensure_data();
    StageTimer t(timing_, "detect");
    stage(Stage::detect, [&] {
        DetectorConfig dc = cfg_.detector;
        dc.seed = derive_seed(cfg_.seed, "detect");
        detector_ = build_detector(*model_, split_.defense, *delta_hat_, attack_spec_->target_class, dc);
        save_detector(dir_ / kDetectorFile, *detector_);
    });
}

void ExperimentRun::run_evaluate() {
    ensure_data();
    ensure_model();
    if (cfg_.attack) {
        ensure_pattern();
        ensure_delta();
        ensure_detector();
    }
    StageTimer t(timing_, "evaluate");
    stage(Stage::evaluate, [&] {
        // Hygiene: the defense/evaluation split must partition the test set.
        std::set<std::size_t> def(split_.defense_indices.begin(), split_.defense_indices.end());
        for (std::size_t i : split_.test_indices)
            if (def.contains(i))
                throw MetricError("defense and evaluation partitions overlap at index " + std::to_string(i));
        if (split_.defense_indices.size() + split_.test_indices.size() != test_.size())
            throw MetricError("defense/evaluation partitions do not cover the test set");

        if (!cfg_.attack) {
            const std::vector<int> preds = model_->predict_batch(split_.test.images);
            write_predictions_csv(dir_ / kPredictionsCleanFile, split_.test.labels, preds);
            std::size_t hits = 0;
            for (std::size_t i = 0; i < preds.size(); ++i)
                if (preds[i] == split_.test.labels[i]) ++hits;
            report_.acc = static_cast<double>(hits) / static_cast<double>(preds.size());
            return;
        }

        const int target = attack_spec_->target_class;

        // Clean evaluation stream over the full held-out test partition.
        clean_report_ = detector_report(*detector_, *model_, split_.test.images);
        {
            std::vector<int> preds;
            preds.reserve(clean_report_.items.size());
            for (const auto& sv : clean_report_.items) preds.push_back(sv.prediction);
            write_predictions_csv(dir_ / kPredictionsCleanFile, split_.test.labels, preds);
            std::size_t hits = 0;
            for (std::size_t i = 0; i < preds.size(); ++i)
                if (preds[i] == split_.test.labels[i]) ++hits;
            report_.acc = static_cast<double>(hits) / static_cast<double>(preds.size());
        }
        write_verdict_stream(dir_ / kVerdictsCleanFile, clean_report_, split_.test.labels);

        // Triggered stream: every held-out source-class image with the
        // ground-truth pattern embedded.
        std::vector<std::size_t> source_idx;
        const std::set<int> source_ids(sources_.begin(), sources_.end());
        for (std::size_t i = 0; i < split_.test.size(); ++i)
            if (source_ids.contains(split_.test.labels[i])) source_idx.push_back(i);
        source_set_ = split_.test.subset(source_idx);
        if (source_set_.size() == 0) throw MetricError("no held-out source-class images for trigger evaluation");

        std::vector<Image> triggered;
        triggered.reserve(source_set_.size());
        for (const Image& x : source_set_.images) triggered.push_back(embed(x, attack_spec_->pattern));
        triggered_report_ = detector_report(*detector_, *model_, triggered);
        write_verdict_stream(dir_ / kVerdictsTriggeredFile, triggered_report_, source_set_.labels);

        {
            std::size_t to_target = 0;
            for (const auto& sv : triggered_report_.items)
                if (sv.prediction == target) ++to_target;
            report_.asr_gt = static_cast<double>(to_target) / static_cast<double>(triggered_report_.items.size());
        }
        if (cfg_.recovery.mode != RecoverySection::Mode::oracle) {
            std::vector<Image> re_embedded;
            re_embedded.reserve(source_set_.size());
            for (const Image& x : source_set_.images) re_embedded.push_back(embed(x, *delta_hat_));
            const std::vector<int> preds = model_->predict_batch(re_embedded);
            write_predictions_csv(dir_ / kPredictionsAsrReFile, source_set_.labels, preds);
            std::size_t to_target = 0;
            for (int p : preds)
                if (p == target) ++to_target;
            report_.asr_re = static_cast<double>(to_target) / static_cast<double>(preds.size());
        }

        std::vector<Verdict> triggered_verdicts, clean_verdicts;
        std::vector<int> true_sources;
        for (const auto& sv : triggered_report_.items)
            if (sv.verdict) {
                triggered_verdicts.push_back(*sv.verdict);
                true_sources.push_back(source_set_.labels[sv.index]);
            }
        for (const auto& sv : clean_report_.items)
            if (sv.verdict) clean_verdicts.push_back(*sv.verdict);

        const DetectionMetrics dm = compute_detection_metrics(triggered_verdicts, clean_verdicts, true_sources);
        report_.tpr = dm.tpr;
        report_.fpr = dm.fpr;
        report_.sia = dm.sia;
    });
    if (cfg_.baselines.enabled && cfg_.attack) evaluate_baselines();
    write_report();
}

void ExperimentRun::evaluate_baselines() {
    StageTimer t(timing_, "baselines");
    stage(Stage::evaluate, [&] {
        const int target = attack_spec_->target_class;

        std::vector<Image> blend_pool;
        for (std::size_t i = 0; i < split_.defense.size(); ++i)
            if (split_.defense.labels[i] != target) blend_pool.push_back(split_.defense.images[i]);

        const std::vector<std::size_t> neurons =
            select_backdoor_neurons(*model_, split_.defense, *delta_hat_, target, cfg_.baselines.nc_top_fraction);

        // Evaluation pools: exactly the target-predicted sub-streams the main
        // detector saw, keyed by their stream indices.
        std::vector<std::size_t> clean_pool_idx, trig_pool_idx;
        for (const auto& sv : clean_report_.items)
            if (sv.verdict) clean_pool_idx.push_back(sv.index);
        for (const auto& sv : triggered_report_.items)
            if (sv.verdict) trig_pool_idx.push_back(sv.index);
        if (clean_pool_idx.empty() || trig_pool_idx.empty())
            throw BaselineError("baseline evaluation needs nonempty target-predicted pools");

        std::vector<Image> trig_images;
        trig_images.reserve(trig_pool_idx.size());
        for (std::size_t i : trig_pool_idx) trig_images.push_back(embed(source_set_.images[i], attack_spec_->pattern));

        const std::uint64_t strip_seed = derive_seed(cfg_.seed, "strip");
        struct Scored {
            std::string name;
            ScoreDirection direction;
            std::vector<double> clean, triggered;
        };
        std::vector<Scored> all;

        {
            Scored s{"strip", ScoreDirection::trigger_if_below, {}, {}};
            for (std::size_t i : clean_pool_idx)
                s.clean.push_back(strip_score(*model_, split_.test.images[i], blend_pool, cfg_.baselines.strip_blends,
                                              cfg_.baselines.strip_alpha,
                                              derive_seed(strip_seed, "clean_" + std::to_string(i))));
            for (std::size_t k = 0; k < trig_pool_idx.size(); ++k)
                s.triggered.push_back(strip_score(*model_, trig_images[k], blend_pool, cfg_.baselines.strip_blends,
                                                  cfg_.baselines.strip_alpha,
                                                  derive_seed(strip_seed, "trig_" + std::to_string(trig_pool_idx[k]))));
            all.push_back(std::move(s));
        }
        {
            Scored s{"b3d", ScoreDirection::trigger_if_below, {}, {}};
            for (std::size_t i : clean_pool_idx) s.clean.push_back(b3d_score(*model_, split_.test.images[i], *delta_hat_));
            for (const Image& x : trig_images) s.triggered.push_back(b3d_score(*model_, x, *delta_hat_));
            all.push_back(std::move(s));
        }
        {
            Scored s{"nc_activation", ScoreDirection::trigger_if_above, {}, {}};
            for (std::size_t i : clean_pool_idx)
                s.clean.push_back(nc_activation_score(*model_, split_.test.images[i], neurons));
            for (const Image& x : trig_images) s.triggered.push_back(nc_activation_score(*model_, x, neurons));
            all.push_back(std::move(s));
        }

        std::ostringstream csv;
        csv << "baseline,pool,index,score,flagged\n";
        for (const Scored& s : all) {
            const ScoreThreshold th = calibrate_threshold(s.clean, s.direction, cfg_.baselines.target_fpr);
            std::size_t clean_flagged = 0, trig_flagged = 0;
            for (std::size_t k = 0; k < s.clean.size(); ++k) {
                const bool f = th.flags(s.clean[k]);
                clean_flagged += f;
                csv << s.name << ",clean," << clean_pool_idx[k] << "," << fmt(s.clean[k]) << "," << (f ? 1 : 0) << "\n";
            }
            for (std::size_t k = 0; k < s.triggered.size(); ++k) {
                const bool f = th.flags(s.triggered[k]);
                trig_flagged += f;
                csv << s.name << ",triggered," << trig_pool_idx[k] << "," << fmt(s.triggered[k]) << "," << (f ? 1 : 0)
                    << "\n";
            }
            BaselineMetrics bm;
            bm.threshold = th.value;
            bm.direction = s.direction == ScoreDirection::trigger_if_below ? "below" : "above";
            bm.achieved_calibration_fpr = th.achieved_fpr;
            bm.degenerate = th.degenerate;
            bm.tpr = static_cast<double>(trig_flagged) / static_cast<double>(s.triggered.size());
            bm.fpr = static_cast<double>(clean_flagged) / static_cast<double>(s.clean.size());
            report_.baselines[s.name] = bm;
        }
        write_text(dir_ / kBaselineScoresFile, csv.str());
    });
}

void ExperimentRun::write_report() {
    stage(Stage::io, [&] {
        // A staged invocation may not have trained in this process; pick the
        // loss curve up from the artifact so the report is complete either way.
        if (report_.train_loss.empty() && fs::exists(dir_ / kTrainLossFile)) {
            std::ifstream in(dir_ / kTrainLossFile);
            std::string line;
            std::getline(in, line);
            while (std::getline(in, line)) {
                if (line.empty()) continue;
                const auto f = split_csv_line(line);
                if (f.size() != 2) throw FormatError("malformed loss row: " + line);
                report_.train_loss.push_back(std::stod(f[1]));
            }
        }
        write_text(dir_ / kReportFile, report_to_json(report_) + "\n");
    });
}

void ExperimentRun::run_all() {
    run_data();
    run_attack(false);
    run_train();
    run_recover();
    run_detect();
    run_evaluate();
}

MetricsReport run_experiment(const ExperimentConfig& cfg) {
    ExperimentRun run(cfg);
    run.run_all();
    return run.report();
}

namespace {

struct VerdictLine {
    std::size_t index = 0;
    int prediction = -1;
    std::string decision;
    int true_source = -1;
    int inferred_source = -1;
    std::vector<double> log_likelihoods;
};

std::vector<VerdictLine> read_verdict_stream(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<VerdictLine> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        VerdictLine v;
        v.index = j.at("index").get<std::size_t>();
        v.prediction = j.at("prediction").get<int>();
        v.decision = j.at("decision").get<std::string>();
        v.true_source = j.at("true_source").get<int>();
        if (j.contains("inferred_source")) v.inferred_source = j["inferred_source"].get<int>();
        if (j.contains("log_likelihoods")) v.log_likelihoods = j["log_likelihoods"].get<std::vector<double>>();
        out.push_back(std::move(v));
    }
    return out;
}

void compare(std::vector<std::string>& mismatches, const std::string& what, double reported, double recounted) {
    if (reported != recounted) mismatches.push_back(what + ": report " + fmt(reported) + ", recount " + fmt(recounted));
}

// Re-derive the argmax decision (ties toward target, then smallest index)
// from an emitted log-likelihood vector.
std::pair<bool, int> replay_decision(const std::vector<double>& ll, int target) {
    int best = target;
    for (int c = 0; c < static_cast<int>(ll.size()); ++c)
        if (ll[static_cast<std::size_t>(c)] > ll[static_cast<std::size_t>(best)] ||
            (ll[static_cast<std::size_t>(c)] == ll[static_cast<std::size_t>(best)] && best != target && c < best))
            best = c;
    return {best != target, best};
}

}  // namespace

std::vector<std::string> recount_run(const std::filesystem::path& run_dir) {
    const MetricsReport report = report_from_json(read_file(run_dir / kReportFile));
    const json config = json::parse(report.config_echo);

    std::vector<std::string> mismatches;

    // ACC from the clean prediction stream.
    {
        std::ifstream in(run_dir / kPredictionsCleanFile);
        if (!in) throw IoError("cannot open " + (run_dir / kPredictionsCleanFile).string());
        std::string line;
        std::getline(in, line);  // header
        std::size_t hits = 0, total = 0;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const auto f = split_csv_line(line);
            if (f.size() != 3) throw FormatError("malformed prediction row: " + line);
            if (std::stoi(f[1]) == std::stoi(f[2])) ++hits;
            ++total;
        }
        if (total == 0) throw FormatError("empty clean prediction stream");
        compare(mismatches, "acc", report.acc, static_cast<double>(hits) / static_cast<double>(total));
    }

    if (report.tpr || report.asr_gt) {
        const int target = config.at("attack").at("target_class").get<int>();
        const auto triggered = read_verdict_stream(run_dir / kVerdictsTriggeredFile);
        const auto clean = read_verdict_stream(run_dir / kVerdictsCleanFile);
        if (triggered.empty() || clean.empty()) throw FormatError("empty verdict stream");

        std::size_t to_target = 0, rejected = 0, source_correct = 0, with_verdict = 0;
        for (const auto& v : triggered) {
            if (v.prediction == target) ++to_target;
            if (v.decision == "pass") continue;
            ++with_verdict;
            auto [reject, inferred] = replay_decision(v.log_likelihoods, target);
            if (v.decision != (reject ? "reject" : "accept") || inferred != v.inferred_source)
                mismatches.push_back("triggered verdict " + std::to_string(v.index) +
                                     " does not replay from its log-likelihoods");
            if (v.decision == "reject") {
                ++rejected;
                if (v.inferred_source == v.true_source) ++source_correct;
            }
        }
        if (report.asr_gt)
            compare(mismatches, "asr_gt", *report.asr_gt,
                    static_cast<double>(to_target) / static_cast<double>(triggered.size()));
        if (report.tpr) {
            if (with_verdict == 0) {
                mismatches.push_back("report has tpr but the triggered stream holds no verdicts");
            } else {
                compare(mismatches, "tpr", *report.tpr,
                        static_cast<double>(rejected) / static_cast<double>(with_verdict));
                compare(mismatches, "sia", *report.sia,
                        static_cast<double>(source_correct) / static_cast<double>(with_verdict));
            }
        }

        std::size_t clean_rejected = 0, clean_with_verdict = 0;
        for (const auto& v : clean) {
            if (v.decision == "pass") continue;
            ++clean_with_verdict;
            auto [reject, inferred] = replay_decision(v.log_likelihoods, target);
            if (v.decision != (reject ? "reject" : "accept") || inferred != v.inferred_source)
                mismatches.push_back("clean verdict " + std::to_string(v.index) +
                                     " does not replay from its log-likelihoods");
            if (v.decision == "reject") ++clean_rejected;
        }
        if (report.fpr) {
            if (clean_with_verdict == 0)
                mismatches.push_back("report has fpr but the clean stream holds no verdicts");
            else
                compare(mismatches, "fpr", *report.fpr,
                        static_cast<double>(clean_rejected) / static_cast<double>(clean_with_verdict));
        }
    }

    if (report.asr_re) {
        const int target = config.at("attack").at("target_class").get<int>();
        std::ifstream in(run_dir / kPredictionsAsrReFile);
        if (!in) throw IoError("cannot open " + (run_dir / kPredictionsAsrReFile).string());
        std::string line;
        std::getline(in, line);
        std::size_t hits = 0, total = 0;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const auto f = split_csv_line(line);
            if (f.size() != 3) throw FormatError("malformed prediction row: " + line);
            if (std::stoi(f[2]) == target) ++hits;
            ++total;
        }
        if (total == 0) throw FormatError("empty recovered-pattern prediction stream");
        compare(mismatches, "asr_re", *report.asr_re, static_cast<double>(hits) / static_cast<double>(total));
    }

    if (!report.baselines.empty()) {
        std::ifstream in(run_dir / kBaselineScoresFile);
        if (!in) throw IoError("cannot open " + (run_dir / kBaselineScoresFile).string());
        std::string line;
        std::getline(in, line);
        struct Tally {
            std::size_t clean_flagged = 0, clean_total = 0, trig_flagged = 0, trig_total = 0;
        };
        std::map<std::string, Tally> tallies;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const auto f = split_csv_line(line);
            if (f.size() != 5) throw FormatError("malformed baseline score row: " + line);
            const auto it = report.baselines.find(f[0]);
            if (it == report.baselines.end()) {
                mismatches.push_back("baseline " + f[0] + " in score stream but not in report");
                continue;
            }
            const double score = std::stod(f[3]);
            const bool flagged = f[4] == "1";
            const bool expect =
                it->second.direction == "below" ? score < it->second.threshold : score > it->second.threshold;
            if (flagged != expect)
                mismatches.push_back("baseline " + f[0] + " flag at index " + f[2] +
                                     " does not replay from score and threshold");
            Tally& tl = tallies[f[0]];
            if (f[1] == "clean") {
                ++tl.clean_total;
                tl.clean_flagged += flagged;
            } else {
                ++tl.trig_total;
                tl.trig_flagged += flagged;
            }
        }
        for (const auto& [name, bm] : report.baselines) {
            const auto it = tallies.find(name);
            if (it == tallies.end()) {
                mismatches.push_back("baseline " + name + " missing from score stream");
                continue;
            }
            if (it->second.clean_total == 0 || it->second.trig_total == 0) {
                mismatches.push_back("baseline " + name + " has an empty pool in the score stream");
                continue;
            }
            compare(mismatches, name + ".tpr", bm.tpr,
                    static_cast<double>(it->second.trig_flagged) / static_cast<double>(it->second.trig_total));
            compare(mismatches, name + ".fpr", bm.fpr,
                    static_cast<double>(it->second.clean_flagged) / static_cast<double>(it->second.clean_total));
        }
    }

    return mismatches;
}

}  // namespace inflight
