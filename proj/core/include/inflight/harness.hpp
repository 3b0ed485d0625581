#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "inflight/attack.hpp"
#include "inflight/baselines.hpp"
#include "inflight/dataset.hpp"
#include "inflight/detector.hpp"
#include "inflight/metrics.hpp"
#include "inflight/net.hpp"
#include "inflight/recovery.hpp"

namespace inflight {

// Dataset source: IDX file pairs, a cached container, or the synthetic
// generator.
struct DatasetSpec {
    enum class Kind { idx, cache, synthetic };
    Kind kind = Kind::synthetic;
    // idx
    std::filesystem::path train_images, train_labels, test_images, test_labels;
    // cache
    std::filesystem::path train_cache, test_cache;
    // synthetic
    int num_classes = 4;
    int per_class_train = 200;
    int per_class_test = 100;
    int height = 16, width = 16, channels = 1;
};

struct PatternSpec {
    enum class Kind { none, chessboard, single_pixel, white_box, file };
    Kind kind = Kind::none;
    double amplitude = 3.0 / 255.0;  // chessboard
    int row = -1, col = -1;          // single_pixel; -1 = image center
    int box_size = 3;                // white_box
    std::filesystem::path path;      // file
};

struct AttackSection {
    PatternSpec pattern;
    int target_class = 0;
    std::vector<int> source_classes;  // empty = all non-target classes
    int per_source_poison_count = 0;
};

struct RecoverySection {
    enum class Mode { oracle, additive, patch };
    Mode mode = Mode::oracle;
    RecoveryConfig config;
};

struct BaselineSection {
    bool enabled = false;
    int strip_blends = 20;
    double strip_alpha = 0.5;
    double nc_top_fraction = 0.05;
    double target_fpr = 0.05;
};

struct ExperimentConfig {
    DatasetSpec dataset;
    SplitSpec split;
    std::optional<AttackSection> attack;
    TrainConfig train;
    RecoverySection recovery;
    DetectorConfig detector;
    BaselineSection baselines;
    std::filesystem::path output_dir;
    std::uint64_t seed = 0;
    bool deterministic = true;

    // Structural validation (no dataset access). Throws ConfigError.
    void validate() const;
};

// Strict parser: unknown keys are errors.
ExperimentConfig config_from_json(const std::string& text);
std::string config_to_json(const ExperimentConfig& cfg);
ExperimentConfig load_config(const std::filesystem::path& path);

struct BaselineMetrics {
    double threshold = 0.0;
    std::string direction;
    double achieved_calibration_fpr = 0.0;
    bool degenerate = false;
    double tpr = 0.0;
    double fpr = 0.0;
};

struct MetricsReport {
    int schema_version = 1;
    std::uint64_t seed = 0;
    bool deterministic = true;
    std::string config_echo;  // canonical JSON of the config
    double acc = 0.0;
    std::optional<double> asr_gt;
    std::optional<double> asr_re;
    std::optional<double> tpr, fpr, sia;
    std::optional<double> recovery_flip_fraction;
    std::optional<int> recovery_mask_support;
    std::map<std::string, BaselineMetrics> baselines;
    std::vector<double> train_loss;
    // Wall-clock seconds per stage; omitted in deterministic mode so that
    // identical config+seed yields byte-identical reports.
    std::map<std::string, double> timing;
};

std::string report_to_json(const MetricsReport& report);
MetricsReport report_from_json(const std::string& text);

struct RunLock;

// Stage-resumable pipeline over one run directory. Each stage method
// ensures its inputs -- recomputing cheap deterministic stages in memory
// and loading expensive ones (model, recovered pattern, detector) from the
// artifacts an earlier invocation wrote -- then emits this stage's
// artifacts. The constructor validates the config, creates the output
// directory, acquires the run lock, and writes config.json. Failures are
// rethrown as StageError; partial artifacts are left in place.
class ExperimentRun {
  public:
    explicit ExperimentRun(ExperimentConfig cfg);
    ~ExperimentRun();
    ExperimentRun(const ExperimentRun&) = delete;
    ExperimentRun& operator=(const ExperimentRun&) = delete;

    void run_data();                          // split.json
    void run_attack(bool materialize = false);  // gt_pattern.json (+ poisoned cache)
    void run_train();                         // model.bin, train_loss.csv
    void run_recover();                       // delta_hat.json, recovery_trace.csv
    void run_detect();                        // detector.json
    void run_evaluate();                      // streams, metrics, baselines, report.json
    void run_all();

    const MetricsReport& report() const { return report_; }

  private:
    void ensure_data();
    void ensure_pattern();
    void ensure_poisoned();
    void ensure_model();
    void ensure_delta();
    void ensure_detector();
    void evaluate_baselines();
    void write_report();

    ExperimentConfig cfg_;
    std::filesystem::path dir_;
    MetricsReport report_;
    std::map<std::string, double>* timing_ = nullptr;
    std::unique_ptr<RunLock> lock_;

    bool data_ready_ = false;
    LabeledDataset train_, test_;
    SplitResult split_;
    std::vector<int> sources_;
    std::optional<AttackSpec> attack_spec_;
    bool train_poisoned_ = false;
    std::vector<std::size_t> poison_indices_;
    std::optional<Model> model_;
    std::optional<BackdoorPattern> delta_hat_;
    std::optional<Detector> detector_;
    LabeledDataset source_set_;
    DetectorReport clean_report_, triggered_report_;
};

// One-call wrapper: runs every stage in order and returns the report.
MetricsReport run_experiment(const ExperimentConfig& cfg);

// Independent recount: re-derives every rate in report.json from the
// emitted per-image streams and compares exactly. Returns the list of
// mismatches (empty = report reproduced).
std::vector<std::string> recount_run(const std::filesystem::path& run_dir);

}  // namespace inflight
