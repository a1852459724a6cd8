#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "json.hpp"

#include "bdforge/data_hub.hpp"
#include "bdforge/noise_lab.hpp"

namespace bdforge {

// --- Trigger variants -------------------------------------------------------

struct ImagePatch {
    int row = 0;
    int col = 0;
    int height = 3;
    int width = 3;
    double pixel_value = 1.0;
};

struct ImageBlend {
    Tensor pattern;  // [H,W,C], same shape as the victim images
    double alpha = 0.1;
};

enum class TextPosition { Front, End, Random };

std::string text_position_name(TextPosition p);
TextPosition text_position_from_name(const std::string& name);

struct TextWord {
    std::string token = "cf";
    TextPosition position = TextPosition::Front;
};

struct TextSentence {
    std::string sentence = "I watched this 3D movie";
    TextPosition position = TextPosition::End;
};

struct AudioBlendNoise {
    double alpha = 0.2;
    std::uint64_t seed = 0;  // the trigger carries its own noise seed
};

struct AudioTone {
    double frequency = 7800.0;  // near-Nyquist stand-in for an inaudible tone
    double amplitude = 0.25;
    double duration_s = 1.0;
    double offset_s = 0.0;
};

using TriggerSpec =
    std::variant<ImagePatch, ImageBlend, TextWord, TextSentence, AudioBlendNoise, AudioTone>;

Modality trigger_modality(const TriggerSpec& trigger);
std::string trigger_variant_name(const TriggerSpec& trigger);
/// Checks the trigger's own invariants (alpha range, Nyquist bound, ...).
void validate_trigger(const TriggerSpec& trigger);

// --- Attack configuration ----------------------------------------------------

enum class LabelMode { Dirty, Clean };

std::string label_mode_name(LabelMode m);
LabelMode label_mode_from_name(const std::string& name);

struct AttackConfig {
    TriggerSpec trigger;
    int target_label = 0;
    double poison_ratio = 0.1;
    LabelMode label_mode = LabelMode::Dirty;
    std::uint64_t seed = 0;

    void validate() const;
};

struct PoisonManifest {
    int format_version = 1;
    std::string dataset_provenance;
    int class_count = 0;
    Modality modality = Modality::Image;
    AttackConfig attack;
    std::vector<int> poison_indices;  // sorted, unique dataset ids
    bool has_noise = false;
    NoiseConfig noise;
};

// --- Operations ---------------------------------------------------------------

/// Seed-deterministic uniform sample (without replacement) of
/// round(ratio * eligible) indices. Eligible pool: whole dataset in dirty
/// mode, target-label samples in clean mode. Returned sorted ascending.
std::vector<int> select_poison_indices(const Dataset& ds, const AttackConfig& cfg);

/// Stamps the trigger onto one sample and sets is_poisoned. `seed` feeds
/// position randomization for text triggers; `vocab` is required for text so
/// the sample can be re-tokenized.
Sample apply_trigger(const Sample& s, const TriggerSpec& trigger, std::uint64_t seed = 0,
                     const Vocabulary* vocab = nullptr);

/// Full poisoning pass. In dirty mode selected samples get label :=
/// target_label (original_label untouched). For text datasets `vocab` is
/// extended with the trigger tokens before re-tokenization.
std::pair<Dataset, PoisonManifest> poison_dataset(const Dataset& ds, const AttackConfig& cfg,
                                                  Vocabulary* vocab = nullptr);

/// Evaluation set for attack metrics: drops samples whose original label is
/// the target, triggers every remaining sample, keeps original labels.
Dataset build_curated_test(const Dataset& test, const AttackConfig& cfg,
                           const Vocabulary* vocab = nullptr);

// --- Poisoned-dataset store ----------------------------------------------------
// Directory layout: manifest.json (version, config, index set, checksums)
// + samples.jsonl (one record per sample; image/audio payloads as base64 of
// little-endian float32, text as raw strings + token ids).

void save_poisoned(const Dataset& ds, const PoisonManifest& manifest, const std::string& dir);
std::pair<Dataset, PoisonManifest> load_poisoned(const std::string& dir);

// JSON views reused by the store and the experiment reports.
nlohmann::json trigger_to_json(const TriggerSpec& trigger);
TriggerSpec trigger_from_json(const nlohmann::json& j);
nlohmann::json attack_to_json(const AttackConfig& cfg);
AttackConfig attack_from_json(const nlohmann::json& j);
nlohmann::json noise_to_json(const NoiseConfig& cfg);
NoiseConfig noise_from_json(const nlohmann::json& j);

}  // namespace bdforge
