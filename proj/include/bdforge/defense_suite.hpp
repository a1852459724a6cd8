#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "bdforge/data_hub.hpp"
#include "bdforge/model_zoo.hpp"
#include "bdforge/tensor.hpp"

namespace bdforge {

// Seven defenses against backdoored training runs, grouped by stage:
// in-training (abl_train), post-training with data (strip_detect, ac_detect,
// ft_defend, fp_defend, nc_*) and post-training data-free (clp_defend).
// Detectors return per-sample verdicts; mitigators return a new model and
// never modify the model they are given.

/// Input filtering by superposition: a sample blended half-and-half with a
/// clean image keeps a confident (low-entropy) prediction only when a
/// trigger dominates the output.
struct StripConfig {
    int overlay_count = 16;             // blends averaged per scored sample
    double false_rejection_rate = 0.05; // quantile of clean scores used as threshold
    std::uint64_t seed = 0;
    void validate() const;
};

/// Per-class activation clustering: poisoned samples form a small, separated
/// cluster inside their (target) class.
struct AcConfig {
    int projection_dims = 8;             // principal directions kept per class
    double cluster_size_threshold = 0.35; // flag the small cluster below this fraction
    int restarts = 10;                    // seeded 2-means restarts
    std::uint64_t seed = 0;
    void validate() const;
};

/// Fine-tuning on verified-clean data; also reused as the fine-tune stage of
/// other defenses. clean_fraction documents how large a clean subset the
/// orchestrator should reserve; ft_defend itself trains on whatever it gets.
struct FtConfig {
    int epochs = 10;
    double clean_fraction = 0.1;
    double learning_rate = 0.05;
    double momentum = 0.9;
    double weight_decay = 0.0;           // L2 term; erodes weights the clean data never exercises
    int batch_size = 32;                 // clamped to the subset size
    std::uint64_t seed = 0;
    void validate() const;
};

/// Fine-pruning: zero the channels/units least active on clean data, then
/// fine-tune with the pruning mask re-applied after every optimizer step.
struct FpConfig {
    double prune_fraction = 0.3;
    int ft_epochs = 10;
    double learning_rate = 0.05;
    double momentum = 0.9;
    int batch_size = 32;
    std::uint64_t seed = 0;
    void validate() const;
};

/// Anti-backdoor learning: isolate the fastest-learned fraction of the
/// training set after a short warm-up, then keep training normally on the
/// remainder while running gradient ascent on the isolated samples.
struct AblConfig {
    int isolation_epochs = 2;
    double isolation_fraction = 0.1;     // gamma; must stay below 0.5
    int unlearn_epochs = 5;
    void validate() const;
};

/// Channel-Lipschitz pruning: channels whose weight matrix has an outlying
/// spectral norm are pruned, no data and no fine-tuning required.
struct ClpConfig {
    double u = 3.0;                      // std-dev multiplier above the mean
    void validate() const;
};

/// Trigger reversal: per label, optimize a mask/pattern pair that flips a
/// clean batch to that label; an abnormally small mask exposes the backdoor.
struct NcConfig {
    double mask_weight = 0.01;           // L1 penalty on the mask
    int steps = 300;
    double learning_rate = 0.1;
    double momentum = 0.0;               // heavy-ball acceleration for the mask descent
    double anomaly_threshold = 2.0;      // on the MAD-normalized index
    void validate() const;
};

struct DefenseConfig {
    StripConfig strip;
    AcConfig ac;
    FtConfig ft;
    FpConfig fp;
    AblConfig abl;
    ClpConfig clp;
    NcConfig nc;
    void validate() const;
};

/// Per-sample detector output. Suspects score low: flags[i] holds exactly
/// when scores[i] < threshold.
struct DetectionVerdict {
    std::vector<bool> flags;
    std::vector<double> scores;
    double threshold = 0.0;
};

/// One reversed trigger: mask in [0,1] over the image plane, pattern in
/// [0,1] per pixel and channel, and the mask's L1 norm.
struct NcReversal {
    Tensor mask;
    Tensor pattern;
    double mask_norm = 0.0;
};

/// Reversal results across labels. anomaly_indices are >= 0; a label is
/// flagged exactly when its index exceeds the threshold AND its norm lies
/// below the median (small masks are suspicious, large ones are not).
struct NCOutcome {
    std::vector<Tensor> masks;           // empty when built from norms alone
    std::vector<Tensor> patterns;
    std::vector<double> mask_norms;
    std::vector<double> anomaly_indices;
    std::vector<int> flagged_labels;     // ascending
    double median_norm = 0.0;
    double anomaly_threshold = 2.0;
};

struct AblResult {
    Model model;
    std::vector<int> isolated_indices;   // ascending positions into the dataset
    TrainHistory history;
};

/// Score every input by the mean prediction entropy over overlay_count
/// half-and-half blends with random members of clean_pool; the threshold is
/// the false_rejection_rate-quantile of the pool's own scores. Image
/// modality only. Scores lie in [0, ln class_count].
DetectionVerdict strip_detect(const Model& model, const Dataset& inputs,
                              const Dataset& clean_pool, const StripConfig& cfg = {});

/// Per class: center penultimate activations, project onto the top
/// principal directions, split with seeded 2-means; when the smaller
/// cluster's size fraction falls below cluster_size_threshold its members
/// are flagged. Classes with fewer than 4 samples are skipped with a
/// warning. A sample's score is its own cluster's size fraction (1.0 for
/// skipped or zero-variance classes).
DetectionVerdict ac_detect(const Model& model, const Dataset& training_set,
                           const AcConfig& cfg = {});

/// Continue SGD on a verified-clean subset. epochs == 0 returns an
/// unchanged copy.
Model ft_defend(const Model& model, const Dataset& clean_subset, const FtConfig& cfg = {});

/// Rank conv channels (image: last conv layer) or hidden units (text/audio)
/// by mean absolute activation over clean_subset, zero the least active
/// prune_fraction (incoming weights and bias), then fine-tune with the
/// pruned weights pinned to zero.
Model fp_defend(const Model& model, const Dataset& clean_subset, const FpConfig& cfg = {});

/// Train from scratch on a (presumed poisoned) dataset: after
/// isolation_epochs, the isolation_fraction of samples with the lowest mean
/// per-sample loss so far is isolated; training continues for
/// unlearn_epochs with ordinary descent on the remainder and ascent on the
/// isolated set. isolation_fraction == 0 reproduces plain train() exactly.
AblResult abl_train(const Dataset& poisoned, const TrainConfig& train_cfg,
                    const AblConfig& cfg = {}, std::uint64_t model_seed = 0,
                    const Vocabulary* vocab = nullptr);

/// Zero every channel/unit whose spectral norm exceeds
/// mean + u * population-std of its layer's norms (strictly). Data-free.
Model clp_defend(const Model& model, const ClpConfig& cfg = {});

/// Reverse a trigger for one label over a clean image batch: minimize
/// mean cross-entropy toward `label` of (1-m)*x + m*p plus
/// mask_weight * ||m||_1, with m and p sigmoid-reparameterized so they stay
/// in [0,1] at every step. Gradient descent (optionally with momentum) for
/// cfg.steps steps.
NcReversal nc_reverse(const Model& model, const Dataset& clean_batch, int label,
                      const NcConfig& cfg = {});

/// MAD-based anomaly scoring of per-label mask norms (needs >= 3 labels):
/// index = |norm - median| / (1.4826 * max(MAD, 1e-9)); flag labels with
/// index > threshold and norm < median.
NCOutcome nc_detect(const std::vector<double>& mask_norms, double anomaly_threshold = 2.0);

/// nc_reverse for every label followed by nc_detect; masks and patterns are
/// kept in the outcome.
NCOutcome nc_analyze(const Model& model, const Dataset& clean_batch, const NcConfig& cfg = {});

/// Unlearn flagged triggers: fine-tune on the clean subset augmented with
/// copies stamped with each flagged label's reversed trigger but keeping
/// their true labels.
Model nc_mitigate(const Model& model, const NCOutcome& outcome, const Dataset& clean_subset,
                  const FtConfig& ft = {});

// Building blocks, exposed so their numeric behavior can be pinned directly.

/// Entropy in nats of a probability vector; 0 * ln 0 counts as 0.
double shannon_entropy(const Tensor& probs);

/// Largest singular value via power iteration (steps iterations, stopping
/// early once successive estimates differ by less than tol).
double spectral_norm(const Tensor& matrix, int steps = 50, double tol = 1e-8);

/// Per-output-channel spectral norms of a [KH,KW,Ci,Co] kernel, each channel
/// flattened to its [Ci, KH*KW] matrix.
std::vector<double> channel_spectral_norms(const Tensor& conv_kernel);

/// Per-column Euclidean norms of a [D,U] weight matrix (the spectral norm of
/// a single unit's 1 x D weight row).
std::vector<double> unit_spectral_norms(const Tensor& dense_weight);

/// Seeded 2-means over row vectors with restarts; returns 0/1 assignments
/// of the best run by within-cluster sum of squares.
std::vector<int> two_means(const Tensor& points, std::uint64_t seed, int restarts = 10);

/// Center rows and project onto the top min(dims, d) principal directions
/// found by power iteration with deflation.
Tensor principal_projection(const Tensor& rows, int dims, std::uint64_t seed);

/// Clustering step of ac_detect for one class: returns per-row flags and
/// per-row own-cluster-size fractions.
std::pair<std::vector<bool>, std::vector<double>> small_cluster_flags(const Tensor& rows,
                                                                      const AcConfig& cfg,
                                                                      std::uint64_t seed);

/// Mean absolute activation per prunable channel/unit over a clean subset
/// (the ranking key used by fp_defend).
std::vector<double> fp_activation_means(const Model& model, const Dataset& clean_subset);

}  // namespace bdforge
