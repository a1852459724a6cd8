#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "bdforge/tensor.hpp"

namespace bdforge {

enum class Modality { Image, Text, Audio };

std::string modality_name(Modality m);
Modality modality_from_name(const std::string& name);

/// Canonical audio rate: small enough for desk-scale 1-D processing, large
/// enough to host a near-Nyquist tone trigger.
constexpr int kCanonicalAudioRate = 16000;

struct Sample {
    int id = 0;
    Modality modality = Modality::Image;
    Tensor payload;              // image [H,W,C] in [0,1]; audio [N] in [-1,1]; unused for text
    std::vector<int> tokens;     // text only
    std::string raw;             // text only
    int sample_rate = 0;         // audio only
    int label = 0;
    int original_label = 0;      // equals label until poisoning/corruption
    bool is_poisoned = false;
    bool is_label_corrupted = false;
};

struct Vocabulary {
    static constexpr int kPadId = 0;
    static constexpr int kUnkId = 1;

    std::unordered_map<std::string, int> token_to_id;
    std::vector<std::string> id_to_token;  // [0]="<pad>", [1]="<unk>"

    Vocabulary();
    int size() const { return static_cast<int>(id_to_token.size()); }
    int id_of(const std::string& token) const;
    int add(const std::string& token);

    /// Lowercased whitespace tokens with a minimum-frequency cutoff.
    static Vocabulary build(const std::vector<std::string>& sentences, int min_freq = 1);
};

struct Dataset {
    std::vector<Sample> samples;
    int class_count = 0;
    Modality modality = Modality::Image;
    std::string provenance;

    std::size_t size() const { return samples.size(); }
    /// Enforces the structural invariants: ids 0..n-1, labels in range,
    /// uniform modality, payload ranges.
    void validate() const;
};

// Text preprocessing: lowercasing + whitespace tokenization.
std::vector<std::string> tokenize_words(const std::string& text);
std::vector<int> tokens_to_ids(const std::vector<std::string>& words, const Vocabulary& vocab);
void retokenize(Sample& s, const Vocabulary& vocab);

// --- Loaders -------------------------------------------------------------

/// IDX container (big-endian magic 0x00000803 images / 0x00000801 labels).
Dataset load_idx_images(const std::string& image_path, const std::string& label_path);

/// Tab-separated `label<TAB>sentence` lines, UTF-8.
std::pair<Dataset, Vocabulary> load_tsv_text(const std::string& path, int min_freq = 1);

struct AudioClip {
    std::vector<double> wave;  // [-1,1]
    int sample_rate = 0;
};

/// RIFF/WAVE, PCM 16-bit, mono; resampled to the canonical rate by linear
/// interpolation when the file rate differs.
AudioClip load_wav(const std::string& path);

// --- Synthetic generators ------------------------------------------------

Dataset synth_image_dataset(int classes, int per_class, int side, std::uint64_t seed,
                            double jitter = 0.1);

std::pair<Dataset, Vocabulary> synth_text_dataset(int classes, int per_class, std::uint64_t seed);

struct AudioSynthConfig {
    int components = 2;               // sine partials per class (1 = pure tone)
    double noise_amplitude = 0.01;
    bool gain_spread = true;          // per-sample overall gain in [0.6, 0.95]
    bool phase_jitter = true;         // per-sample carrier phase
    bool amplitude_modulation = true; // class-rate envelope carrying class identity
};

Dataset synth_audio_dataset(int classes, int per_class, double duration_s, int rate,
                            std::uint64_t seed, const AudioSynthConfig& cfg = {});

/// Per-class carrier frequency used by the audio generator.
double synth_audio_frequency(int class_index);

// --- Split ----------------------------------------------------------------

/// Stratified, seed-deterministic, disjoint and exhaustive; per-class counts
/// preserved within +-1. Sample ids are reassigned 0..n-1 in each part.
std::pair<Dataset, Dataset> split(const Dataset& ds, double train_fraction, std::uint64_t seed);

}  // namespace bdforge
