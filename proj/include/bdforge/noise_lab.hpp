#pragma once

#include <cstdint>
#include <set>
#include <string>

#include "bdforge/data_hub.hpp"

namespace bdforge {

enum class TextNoiseLevel { Character, Word, Sentence };

std::string text_noise_level_name(TextNoiseLevel level);
TextNoiseLevel text_noise_level_from_name(const std::string& name);

/// Degradation emulator settings. Fractions select *samples*; the Gaussian
/// is applied elementwise to selected payloads and clipped to the payload
/// range afterwards.
struct NoiseConfig {
    double data_noise_fraction = 0.0;
    double gaussian_mean = 0.0;
    double gaussian_variance = 0.0;
    double label_noise_fraction = 0.0;
    double text_cer = 0.0;
    std::set<TextNoiseLevel> text_levels;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Adds i.i.d. Gaussian noise to exactly round(fraction*n) seed-chosen image
/// or audio samples, clipping to [0,1] / [-1,1]. Text datasets are rejected.
Dataset apply_data_noise(const Dataset& ds, const NoiseConfig& cfg);

/// Flips exactly round(fraction*n) seed-chosen labels to a uniformly random
/// *different* class. original_label is preserved, is_label_corrupted set.
Dataset corrupt_labels(const Dataset& ds, double fraction, std::uint64_t seed);

/// Character/word/sentence-level corruption of one text sample; the sample
/// is re-tokenized against `vocab` afterwards.
Sample perturb_text(const Sample& s, double cer, const std::set<TextNoiseLevel>& levels,
                    std::uint64_t seed, const Vocabulary& vocab);

/// Applies the full noise configuration to a dataset of any modality:
/// Gaussian payload noise (image/audio) or text perturbation, then label
/// corruption. This is the orchestrator's single entry point.
Dataset apply_noise_config(const Dataset& ds, const NoiseConfig& cfg, const Vocabulary* vocab);

}  // namespace bdforge
