#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "bdforge/common.hpp"

namespace bdforge {

inline constexpr const char* kToolkitVersion = "0.1.0";
inline constexpr int kReportSchemaVersion = 1;

/// Attack-side metric suite. All values are raw fractions in [0, 1]; the
/// *_count fields record each metric's denominator so every number in a
/// report traces back to a concrete sample set.
struct MetricsReport {
    double cac = 0.0;  ///< clean model on the clean test split
    double bac = 0.0;  ///< backdoored model on the clean test split
    double asr = 0.0;  ///< backdoored model hitting the target on curated inputs
    double rac = 0.0;  ///< backdoored model recovering the original label anyway
    long long cac_count = 0;
    long long bac_count = 0;
    long long asr_count = 0;
    long long rac_count = 0;

    /// Every metric must lie in [0, 1] and asr + rac may not exceed 1 (a
    /// curated sample cannot hit the target and its distinct original label
    /// at once). Counts must be non-negative.
    void validate() const;
};

/// Detector confusion summary. Poisoned is the positive class; dac is plain
/// verdict accuracy over every evaluated sample, and the 0/0 cases of rec
/// and f1 resolve to 0 so a do-nothing detector never outscores a working
/// one.
struct DetectionReport {
    long long tp = 0;
    long long fp = 0;
    long long tn = 0;
    long long fn = 0;
    double dac = 0.0;
    double rec = 0.0;
    double f1 = 0.0;
};

/// Everything one experiment cell records. The JSON report deliberately
/// omits the timestamps (they live in the cell manifest instead) so that
/// re-running an identical cell emits identical bytes.
struct RunRecord {
    std::string experiment_id;
    std::string cell_id;
    std::string attack = "none";
    std::string defense = "none";
    std::string variant = "normal";  ///< normal | noise | mislabel
    std::string modality;
    std::string defense_status = "none";  ///< none | applied | skipped: inapplicable
    nlohmann::json attack_config;         ///< machine copies of the configs the cell ran with
    nlohmann::json defense_config;
    nlohmann::json noise_config;
    nlohmann::json training_config;
    std::uint64_t global_seed = 0;
    std::uint64_t cell_seed = 0;
    std::string toolkit_version = kToolkitVersion;
    std::map<std::string, std::string> timestamps;  ///< stage -> ISO 8601, manifest-only
    std::optional<MetricsReport> metrics_before;    ///< attack-time metrics
    std::optional<MetricsReport> metrics_after;     ///< post-defense metrics
    std::optional<DetectionReport> detection;
};

// --- Metric computations ---------------------------------------------------

/// Fraction of exact matches. Throws ConfigError on empty or mismatched
/// inputs.
double accuracy(const std::vector<int>& predictions, const std::vector<int>& labels);

/// Attack success rate over a curated set: the fraction of predictions equal
/// to the target label. The original labels are required so the curated-set
/// contract is enforceable: any sample whose original label already equals
/// the target would inflate the rate and is rejected.
double asr(const std::vector<int>& predictions, const std::vector<int>& original_labels,
           int target_label);

/// Robustness accuracy over a curated set: the fraction of triggered inputs
/// still classified as their original label.
double rac(const std::vector<int>& predictions, const std::vector<int>& original_labels);

/// Confusion counts and derived rates for a detector verdict against ground
/// truth, with poisoned as the positive class.
DetectionReport detection_metrics(const std::vector<bool>& verdict_flags,
                                  const std::vector<bool>& ground_truth_flags);

// --- Report emission ---------------------------------------------------------

enum class ReportFormat { Json, Csv, Both };

/// Serialize a record to the canonical report object (schema-versioned,
/// alphabetical keys, timestamps excluded).
nlohmann::json record_to_json(const RunRecord& record);

/// Inverse of record_to_json. Throws ConfigError when the schema version
/// does not match kReportSchemaVersion.
RunRecord record_from_json(const nlohmann::json& j);

/// Writes report.json and/or report.csv under `dir` (created if missing) and
/// returns the paths written. JSON carries raw reals; the CSV renders
/// percentages with two decimals, one row per cell.
std::vector<std::string> emit_report(const RunRecord& record, const std::string& dir,
                                     ReportFormat format = ReportFormat::Both);

/// Parse a report.json back into a record (schema check included).
RunRecord load_report(const std::string& path);

/// The CSV grid shape shared by single-cell reports and aggregated tables.
std::string report_csv_header();
std::string report_csv_row(const RunRecord& record);

}  // namespace bdforge
