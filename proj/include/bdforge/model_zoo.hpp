#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "bdforge/data_hub.hpp"
#include "bdforge/tape.hpp"
#include "bdforge/tensor.hpp"

namespace bdforge {

/// Geometry of one of the three per-modality classifiers.
///
///   image: conv(3x3,8) -> ReLU -> maxpool2 -> conv(3x3,16) -> ReLU
///          -> maxpool2 -> flatten -> dense(class_count)
///   text:  embedding(embed_dim) -> mean over tokens -> dense(text_hidden)
///          -> ReLU -> dense(class_count)
///   audio: frame into audio_frame-sample windows -> per-frame log energy
///          -> dense(audio_hidden) -> ReLU -> dense(class_count)
struct ModelSpec {
    Modality modality = Modality::Image;
    int class_count = 2;

    int image_side = 16;
    int image_channels = 1;

    int vocab_size = 0;
    int embed_dim = 32;
    int text_hidden = 64;

    int audio_samples = kCanonicalAudioRate;
    int audio_frame = 64;
    int audio_hidden = 64;

    /// Flattened size after the two conv/pool stages.
    int image_flat_dim() const;
    /// Number of energy features per clip.
    int audio_feature_dim() const;

    void validate() const;
};

/// A model is its spec plus named parameter tensors.
struct Model {
    ModelSpec spec;
    std::map<std::string, Tensor> params;
};

struct TrainConfig {
    int epochs = 10;
    double learning_rate = 0.05;
    double momentum = 0.9;
    /// Classic L2 regularization folded into the gradient before the
    /// momentum update; 0 disables it and reproduces plain SGD exactly.
    double weight_decay = 0.0;
    int batch_size = 32;
    std::uint64_t seed = 0;

    void validate(std::size_t dataset_size) const;
};

/// Optional observers and controls. loss_per_sample fires exactly once per
/// sample per epoch with the raw (unweighted) loss of the forward pass that
/// produced the update; epoch_end fires once per epoch with that epoch's
/// mean objective and accuracy; batch_end fires after each optimizer step.
/// loss_weight, when set, scales each sample's loss contribution before
/// averaging (weight 1 everywhere reproduces plain training bit-for-bit;
/// negative weights turn descent into ascent for that sample).
struct TrainHooks {
    std::function<void(int epoch, const Sample& sample, double loss)> loss_per_sample;
    std::function<void(int epoch, double mean_loss, double accuracy)> epoch_end;
    std::function<void(int epoch, int batch)> batch_end;
    std::function<double(int epoch, const Sample& sample)> loss_weight;
};

struct TrainHistory {
    std::vector<double> loss;
    std::vector<double> accuracy;
};

/// Convenience: spec matching a dataset's modality and geometry. Text
/// datasets need the vocabulary that produced their token ids.
ModelSpec spec_for(const Dataset& ds, const Vocabulary* vocab = nullptr);

/// Seed-deterministic initialization: hidden weights uniform in
/// +-1/sqrt(fan_in), hidden biases zero, and the final dense layer all
/// zero so a fresh model outputs uniform probabilities.
Model build_model(const ModelSpec& spec, std::uint64_t seed);

/// Mini-batch SGD with momentum over softmax cross-entropy. The shuffle
/// order is fixed by cfg.seed. Throws a pipeline error naming the epoch
/// and batch if the loss stops being finite.
TrainHistory train(Model& model, const Dataset& data, const TrainConfig& cfg,
                   const TrainHooks& hooks = {});

/// Softmax probabilities for one sample, shape [class_count].
Tensor predict(const Model& model, const Sample& sample);
/// Argmax label with lowest-index tie-break.
int predict_label(const Model& model, const Sample& sample);
/// Probabilities for every sample, shape [n, class_count]. Results are
/// bit-identical for any batch_size.
Tensor predict_proba(const Model& model, const Dataset& ds, int batch_size = 64);
/// Predicted labels for every sample.
std::vector<int> predict_batch(const Model& model, const Dataset& ds, int batch_size = 64);

/// Penultimate-layer representation of every sample (image: flattened
/// conv features; text/audio: hidden ReLU output), shape [n, dim].
Tensor representations(const Model& model, const Dataset& ds, int batch_size = 64);

/// Log energy per audio_frame-sample window, padded with silence to the
/// spec's clip length; shape [audio_feature_dim].
Tensor audio_energy_features(const Tensor& wave, const ModelSpec& spec);

/// Logits for an image batch already on a tape (x is [B,H,W,C]); model
/// parameters are recorded as constants on x's tape. Lets a caller
/// differentiate a loss with respect to the model *input*.
Var image_logits_on_tape(const Model& model, Var x);

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Checkpoint file: magic, little-endian u32 header length, JSON header
/// (spec, version, history, parameter names and shapes), then each
/// parameter's values as little-endian 64-bit floats in header order.
void save_checkpoint(const Model& model, const TrainHistory& history, const std::string& path);

/// Round-trips a model bit-exactly. If expected_class_count >= 0 the
/// stored spec must match it.
std::pair<Model, TrainHistory> load_checkpoint(const std::string& path,
                                               int expected_class_count = -1);

}  // namespace bdforge
