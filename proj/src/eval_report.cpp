#include "bdforge/eval_report.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

using nlohmann::json;

namespace bdforge {

namespace {

void check_unit(const char* name, double v) {
    if (!(v >= 0.0 && v <= 1.0)) {
        throw ConfigError(std::string(name) + " must lie in [0, 1], got " + std::to_string(v));
    }
}

void check_count(const char* name, long long v) {
    if (v < 0) {
        throw ConfigError(std::string(name) + " must be non-negative, got " + std::to_string(v));
    }
}

}  // namespace

void MetricsReport::validate() const {
    check_unit("cac", cac);
    check_unit("bac", bac);
    check_unit("asr", asr);
    check_unit("rac", rac);
    if (asr + rac > 1.0 + 1e-12) {
        throw ConfigError("asr + rac exceeds 1: a curated sample cannot hit the target and its"
                          " distinct original label at once");
    }
    check_count("cac_count", cac_count);
    check_count("bac_count", bac_count);
    check_count("asr_count", asr_count);
    check_count("rac_count", rac_count);
}

double accuracy(const std::vector<int>& predictions, const std::vector<int>& labels) {
    if (predictions.empty()) throw ConfigError("accuracy needs at least one prediction");
    if (predictions.size() != labels.size()) {
        throw ConfigError("accuracy got " + std::to_string(predictions.size()) +
                          " predictions for " + std::to_string(labels.size()) + " labels");
    }
    long long hits = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i) hits += predictions[i] == labels[i];
    return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

double asr(const std::vector<int>& predictions, const std::vector<int>& original_labels,
           int target_label) {
    if (predictions.empty()) throw ConfigError("attack success rate needs a non-empty curated set");
    if (predictions.size() != original_labels.size()) {
        throw ConfigError("attack success rate got " + std::to_string(predictions.size()) +
                          " predictions for " + std::to_string(original_labels.size()) +
                          " original labels");
    }
    for (std::size_t i = 0; i < original_labels.size(); ++i) {
        if (original_labels[i] == target_label) {
            throw ConfigError("curated sample " + std::to_string(i) +
                              " already carries the target label " + std::to_string(target_label) +
                              "; the curated-set contract excludes such samples");
        }
    }
    long long hits = 0;
    for (int p : predictions) hits += p == target_label;
    return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

double rac(const std::vector<int>& predictions, const std::vector<int>& original_labels) {
    if (predictions.empty()) throw ConfigError("robustness accuracy needs a non-empty curated set");
    if (predictions.size() != original_labels.size()) {
        throw ConfigError("robustness accuracy got " + std::to_string(predictions.size()) +
                          " predictions for " + std::to_string(original_labels.size()) +
                          " original labels");
    }
    long long hits = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        hits += predictions[i] == original_labels[i];
    }
    return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

DetectionReport detection_metrics(const std::vector<bool>& verdict_flags,
                                  const std::vector<bool>& ground_truth_flags) {
    if (verdict_flags.empty()) throw ConfigError("detection metrics need at least one verdict");
    if (verdict_flags.size() != ground_truth_flags.size()) {
        throw ConfigError("detection metrics got " + std::to_string(verdict_flags.size()) +
                          " verdicts for " + std::to_string(ground_truth_flags.size()) +
                          " ground-truth flags");
    }
    DetectionReport r;
    for (std::size_t i = 0; i < verdict_flags.size(); ++i) {
        const bool flagged = verdict_flags[i], truth = ground_truth_flags[i];
        r.tp += flagged && truth;
        r.fp += flagged && !truth;
        r.tn += !flagged && !truth;
        r.fn += !flagged && truth;
    }
    const double total = static_cast<double>(verdict_flags.size());
    r.dac = static_cast<double>(r.tp + r.tn) / total;
    r.rec = r.tp + r.fn > 0 ? static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fn) : 0.0;
    const double prec =
        r.tp + r.fp > 0 ? static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fp) : 0.0;
    r.f1 = prec + r.rec > 0.0 ? 2.0 * prec * r.rec / (prec + r.rec) : 0.0;
    return r;
}

// --- Serialization -------------------------------------------------------------

namespace {

json metrics_to_json(const MetricsReport& m) {
    json j;
    j["cac"] = m.cac;
    j["bac"] = m.bac;
    j["asr"] = m.asr;
    j["rac"] = m.rac;
    j["counts"] = {{"cac", m.cac_count}, {"bac", m.bac_count}, {"asr", m.asr_count},
                   {"rac", m.rac_count}};
    return j;
}

MetricsReport metrics_from_json(const json& j) {
    MetricsReport m;
    m.cac = j.at("cac").get<double>();
    m.bac = j.at("bac").get<double>();
    m.asr = j.at("asr").get<double>();
    m.rac = j.at("rac").get<double>();
    const json& counts = j.at("counts");
    m.cac_count = counts.at("cac").get<long long>();
    m.bac_count = counts.at("bac").get<long long>();
    m.asr_count = counts.at("asr").get<long long>();
    m.rac_count = counts.at("rac").get<long long>();
    m.validate();
    return m;
}

json detection_to_json(const DetectionReport& d) {
    json j;
    j["tp"] = d.tp;
    j["fp"] = d.fp;
    j["tn"] = d.tn;
    j["fn"] = d.fn;
    j["dac"] = d.dac;
    j["rec"] = d.rec;
    j["f1"] = d.f1;
    // dac has no universally agreed denominator; name ours so rows from
    // different toolkits are comparable
    j["dac_denominator"] = "all_evaluated_samples";
    return j;
}

DetectionReport detection_from_json(const json& j) {
    DetectionReport d;
    d.tp = j.at("tp").get<long long>();
    d.fp = j.at("fp").get<long long>();
    d.tn = j.at("tn").get<long long>();
    d.fn = j.at("fn").get<long long>();
    d.dac = j.at("dac").get<double>();
    d.rec = j.at("rec").get<double>();
    d.f1 = j.at("f1").get<double>();
    return d;
}

/// "77.10"-style rendering of a fraction as a percentage.
std::string percent(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v * 100.0);
    return buf;
}

void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw PipelineError("cannot open " + path + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw PipelineError("short write to " + path);
}

}  // namespace

json record_to_json(const RunRecord& record) {
    json j;
    j["schema_version"] = kReportSchemaVersion;
    j["toolkit_version"] = record.toolkit_version;
    j["experiment_id"] = record.experiment_id;
    j["cell_id"] = record.cell_id;
    j["attack"] = record.attack;
    j["defense"] = record.defense;
    j["variant"] = record.variant;
    j["modality"] = record.modality;
    j["defense_status"] = record.defense_status;
    j["seeds"] = {{"global", record.global_seed}, {"cell", record.cell_seed}};
    j["configs"] = {
        {"attack", record.attack_config.is_null() ? json() : record.attack_config},
        {"defense", record.defense_config.is_null() ? json() : record.defense_config},
        {"noise", record.noise_config.is_null() ? json() : record.noise_config},
        {"training", record.training_config.is_null() ? json() : record.training_config},
    };
    j["metrics"] = {
        {"before", record.metrics_before ? metrics_to_json(*record.metrics_before) : json()},
        {"after", record.metrics_after ? metrics_to_json(*record.metrics_after) : json()},
    };
    j["detection"] = record.detection ? detection_to_json(*record.detection) : json();
    return j;
}

RunRecord record_from_json(const json& j) {
    const int version = j.at("schema_version").get<int>();
    if (version != kReportSchemaVersion) {
        throw ConfigError("unsupported report schema version " + std::to_string(version) +
                          ", this toolkit reads version " + std::to_string(kReportSchemaVersion));
    }
    RunRecord r;
    r.toolkit_version = j.at("toolkit_version").get<std::string>();
    r.experiment_id = j.at("experiment_id").get<std::string>();
    r.cell_id = j.at("cell_id").get<std::string>();
    r.attack = j.at("attack").get<std::string>();
    r.defense = j.at("defense").get<std::string>();
    r.variant = j.at("variant").get<std::string>();
    r.modality = j.at("modality").get<std::string>();
    r.defense_status = j.at("defense_status").get<std::string>();
    r.global_seed = j.at("seeds").at("global").get<std::uint64_t>();
    r.cell_seed = j.at("seeds").at("cell").get<std::uint64_t>();
    const json& configs = j.at("configs");
    r.attack_config = configs.at("attack");
    r.defense_config = configs.at("defense");
    r.noise_config = configs.at("noise");
    r.training_config = configs.at("training");
    const json& metrics = j.at("metrics");
    if (!metrics.at("before").is_null()) r.metrics_before = metrics_from_json(metrics.at("before"));
    if (!metrics.at("after").is_null()) r.metrics_after = metrics_from_json(metrics.at("after"));
    if (!j.at("detection").is_null()) r.detection = detection_from_json(j.at("detection"));
    return r;
}

std::string report_csv_header() {
    return "experiment,cell,attack,defense,variant,status,"
           "cac,bac,asr,rac,bac_after,asr_after,rac_after,dac,rec,f1";
}

std::string report_csv_row(const RunRecord& record) {
    std::ostringstream row;
    row << record.experiment_id << ',' << record.cell_id << ',' << record.attack << ','
        << record.defense << ',' << record.variant << ',' << record.defense_status << ',';
    if (record.metrics_before) {
        const MetricsReport& m = *record.metrics_before;
        row << percent(m.cac) << ',' << percent(m.bac) << ',' << percent(m.asr) << ','
            << percent(m.rac);
    } else {
        row << ",,,";
    }
    row << ',';
    if (record.metrics_after) {
        const MetricsReport& m = *record.metrics_after;
        row << percent(m.bac) << ',' << percent(m.asr) << ',' << percent(m.rac);
    } else {
        row << ",,";
    }
    row << ',';
    if (record.detection) {
        const DetectionReport& d = *record.detection;
        row << percent(d.dac) << ',' << percent(d.rec) << ',' << percent(d.f1);
    } else {
        row << ",,";
    }
    return row.str();
}

std::vector<std::string> emit_report(const RunRecord& record, const std::string& dir,
                                     ReportFormat format) {
    if (record.metrics_before) record.metrics_before->validate();
    if (record.metrics_after) record.metrics_after->validate();
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw PipelineError("cannot create report directory " + dir + ": " + ec.message());

    std::vector<std::string> written;
    if (format == ReportFormat::Json || format == ReportFormat::Both) {
        const std::string path = dir + "/report.json";
        write_file(path, record_to_json(record).dump(2) + "\n");
        written.push_back(path);
    }
    if (format == ReportFormat::Csv || format == ReportFormat::Both) {
        const std::string path = dir + "/report.csv";
        write_file(path, report_csv_header() + "\n" + report_csv_row(record) + "\n");
        written.push_back(path);
    }
    return written;
}

RunRecord load_report(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw PipelineError("cannot open report " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw FormatError("report " + path + " is not valid JSON: " + e.what());
    }
    try {
        return record_from_json(j);
    } catch (const json::exception& e) {
        throw FormatError("report " + path + " is missing fields: " + e.what());
    }
}

}  // namespace bdforge
