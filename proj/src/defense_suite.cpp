#include "bdforge/defense_suite.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "bdforge/common.hpp"
#include "bdforge/kernels.hpp"
#include "bdforge/optim.hpp"
#include "bdforge/tape.hpp"

namespace bdforge {

namespace {

void require_fraction(double v, const std::string& name) {
    if (!(v >= 0.0 && v <= 1.0)) {
        throw ConfigError(name + " must lie in [0, 1], got " + std::to_string(v));
    }
}

void require_train_knobs(double lr, double momentum, int batch, const std::string& who) {
    if (!(lr > 0.0)) throw ConfigError(who + ": learning rate must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) {
        throw ConfigError(who + ": momentum must lie in [0, 1)");
    }
    if (batch < 1) throw ConfigError(who + ": batch size must be at least 1");
}

double entropy_row(const double* p, int k) {
    double h = 0.0;
    for (int j = 0; j < k; ++j) {
        if (p[j] > 0.0) h -= p[j] * std::log(p[j]);
    }
    return h;
}

double vec_norm(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

/// train() hands hooks references into the dataset's own sample vector, so
/// pointer arithmetic recovers the sample's position.
std::size_t sample_index(const Dataset& ds, const Sample& s) {
    const Sample* p = &s;
    const Sample* base = ds.samples.data();
    if (p < base || p >= base + ds.samples.size()) {
        throw PipelineError("sample reference does not belong to the training set");
    }
    return static_cast<std::size_t>(p - base);
}

TrainConfig fine_tune_config(int epochs, double lr, double momentum, double weight_decay,
                             int batch, std::uint64_t seed, std::size_t n) {
    TrainConfig tc;
    tc.epochs = epochs;
    tc.learning_rate = lr;
    tc.momentum = momentum;
    tc.weight_decay = weight_decay;
    tc.batch_size = static_cast<int>(
        std::min<std::size_t>(static_cast<std::size_t>(batch), n));
    tc.seed = seed;
    return tc;
}

/// Units a defense can prune: the last conv layer's output channels for
/// image models, the hidden layer's units otherwise.
struct PrunableLayer {
    std::string kernel_name;
    std::string bias_name;
    bool conv = false;
    int units = 0;
};

PrunableLayer prunable_layer(const Model& model) {
    PrunableLayer out;
    if (model.spec.modality == Modality::Image) {
        out.kernel_name = "conv2.kernel";
        out.bias_name = "conv2.bias";
        out.conv = true;
        out.units = model.params.at("conv2.kernel").extent(3);
    } else {
        out.kernel_name = "hidden.weight";
        out.bias_name = "hidden.bias";
        out.conv = false;
        out.units = model.params.at("hidden.weight").extent(1);
    }
    return out;
}

void zero_unit(Model& model, const PrunableLayer& layer, int unit) {
    Tensor& k = model.params.at(layer.kernel_name);
    if (layer.conv) {
        for (int kh = 0; kh < k.extent(0); ++kh) {
            for (int kw = 0; kw < k.extent(1); ++kw) {
                for (int ci = 0; ci < k.extent(2); ++ci) {
                    k.at(kh, kw, ci, unit) = 0.0;
                }
            }
        }
    } else {
        for (int d = 0; d < k.extent(0); ++d) k.at(d, unit) = 0.0;
    }
    model.params.at(layer.bias_name).at(unit) = 0.0;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    if (n % 2 == 1) return v[n / 2];
    return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Tensor blend_payload(const Tensor& x, const Tensor& mask, const Tensor& pattern) {
    Tensor out = x;
    const int h = x.extent(0), w = x.extent(1), c = x.extent(2);
    for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
            const double m = mask.at(i, j);
            for (int ch = 0; ch < c; ++ch) {
                out.at(i, j, ch) = (1.0 - m) * x.at(i, j, ch) + m * pattern.at(i, j, ch);
            }
        }
    }
    return out;
}

}  // namespace

void StripConfig::validate() const {
    if (overlay_count < 1) throw ConfigError("overlay count must be at least 1");
    require_fraction(false_rejection_rate, "false rejection rate");
}

void AcConfig::validate() const {
    if (projection_dims < 1) throw ConfigError("projection dims must be at least 1");
    if (!(cluster_size_threshold >= 0.0 && cluster_size_threshold <= 0.5)) {
        throw ConfigError("cluster size threshold must lie in [0, 0.5]; a 'smaller' "
                          "cluster never holds more than half the class");
    }
    if (restarts < 1) throw ConfigError("clustering needs at least 1 restart");
}

void FtConfig::validate() const {
    if (epochs < 0) throw ConfigError("fine-tune epochs must be non-negative");
    require_fraction(clean_fraction, "clean fraction");
    require_train_knobs(learning_rate, momentum, batch_size, "fine-tuning");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be non-negative");
}

void FpConfig::validate() const {
    if (!(prune_fraction >= 0.0 && prune_fraction < 1.0)) {
        throw ConfigError("prune fraction must lie in [0, 1), got " +
                          std::to_string(prune_fraction));
    }
    if (ft_epochs < 0) throw ConfigError("fine-tune epochs must be non-negative");
    require_train_knobs(learning_rate, momentum, batch_size, "fine-pruning");
}

void AblConfig::validate() const {
    if (isolation_epochs < 0) throw ConfigError("isolation epochs must be non-negative");
    if (unlearn_epochs < 0) throw ConfigError("unlearn epochs must be non-negative");
    if (!(isolation_fraction >= 0.0)) {
        throw ConfigError("isolation fraction must be non-negative");
    }
    if (isolation_fraction >= 0.5) {
        throw ConfigError("isolation fraction must stay below 0.5; isolating half the "
                          "training set exceeds any plausible poison mass");
    }
    if (isolation_fraction > 0.0 && isolation_epochs < 1) {
        throw ConfigError("isolating samples requires at least one isolation epoch");
    }
}

void ClpConfig::validate() const {
    if (!(u > 0.0)) throw ConfigError("std-dev multiplier u must be positive");
}

void NcConfig::validate() const {
    if (!(mask_weight > 0.0)) throw ConfigError("mask weight must be positive");
    if (steps < 1) throw ConfigError("reversal needs at least 1 step");
    if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
    if (!(anomaly_threshold >= 0.0)) throw ConfigError("anomaly threshold must be non-negative");
}

void DefenseConfig::validate() const {
    strip.validate();
    ac.validate();
    ft.validate();
    fp.validate();
    abl.validate();
    clp.validate();
    nc.validate();
}

double shannon_entropy(const Tensor& probs) {
    return entropy_row(probs.data(), static_cast<int>(probs.size()));
}

namespace {

/// Mean blend entropy per sample of `ds`, overlays drawn from `pool` with
/// replacement through `rng`.
std::vector<double> strip_scores(const Model& model, const Dataset& ds, const Dataset& pool,
                                 int overlays, Rng& rng) {
    Dataset blends;
    blends.modality = Modality::Image;
    blends.class_count = model.spec.class_count;
    blends.samples.reserve(ds.size() * static_cast<std::size_t>(overlays));
    int next_id = 0;
    for (const Sample& s : ds.samples) {
        for (int k = 0; k < overlays; ++k) {
            const Sample& overlay =
                pool.samples[rng.uniform_int(static_cast<int>(pool.size()))];
            if (!s.payload.same_shape(overlay.payload)) {
                throw ShapeError("overlay shape " + overlay.payload.shape_str() +
                                 " does not match input shape " + s.payload.shape_str());
            }
            Sample b;
            b.id = next_id++;
            b.modality = Modality::Image;
            b.label = 0;
            b.payload = s.payload;
            for (std::size_t i = 0; i < b.payload.size(); ++i) {
                b.payload.data()[i] = 0.5 * s.payload.data()[i] + 0.5 * overlay.payload.data()[i];
            }
            blends.samples.push_back(std::move(b));
        }
    }
    const Tensor probs = predict_proba(model, blends, 64);
    const int k = model.spec.class_count;
    std::vector<double> scores(ds.size(), 0.0);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        double sum = 0.0;
        for (int o = 0; o < overlays; ++o) {
            const std::size_t row = i * static_cast<std::size_t>(overlays) + o;
            sum += entropy_row(probs.data() + row * static_cast<std::size_t>(k), k);
        }
        scores[i] = sum / overlays;
    }
    return scores;
}

}  // namespace

DetectionVerdict strip_detect(const Model& model, const Dataset& inputs,
                              const Dataset& clean_pool, const StripConfig& cfg) {
    cfg.validate();
    if (model.spec.modality != Modality::Image || inputs.modality != Modality::Image ||
        clean_pool.modality != Modality::Image) {
        throw ConfigError("superposition scoring is defined for the image modality only");
    }
    if (clean_pool.samples.empty()) throw ConfigError("clean overlay pool is empty");

    Rng rng(derive_seed(cfg.seed, 0x73747270ULL));
    DetectionVerdict verdict;
    verdict.scores = strip_scores(model, inputs, clean_pool, cfg.overlay_count, rng);
    std::vector<double> clean_scores =
        strip_scores(model, clean_pool, clean_pool, cfg.overlay_count, rng);

    std::sort(clean_scores.begin(), clean_scores.end());
    std::size_t idx = static_cast<std::size_t>(
        cfg.false_rejection_rate * static_cast<double>(clean_scores.size()));
    if (idx >= clean_scores.size()) idx = clean_scores.size() - 1;
    verdict.threshold = clean_scores[idx];

    verdict.flags.resize(verdict.scores.size());
    for (std::size_t i = 0; i < verdict.scores.size(); ++i) {
        verdict.flags[i] = verdict.scores[i] < verdict.threshold;
    }
    return verdict;
}

Tensor principal_projection(const Tensor& rows, int dims, std::uint64_t seed) {
    if (rows.rank() != 2) {
        throw ShapeError("expected a [n, d] matrix of row vectors, got " + rows.shape_str());
    }
    if (dims < 1) throw ConfigError("projection dims must be at least 1");
    const int n = rows.extent(0), d = rows.extent(1);
    const int k = std::min(dims, d);

    Tensor centered = rows;
    for (int j = 0; j < d; ++j) {
        double mean = 0.0;
        for (int i = 0; i < n; ++i) mean += rows.at(i, j);
        mean /= n;
        for (int i = 0; i < n; ++i) centered.at(i, j) -= mean;
    }

    Tensor cov = kernels::matmul_tn(centered, centered);  // [d, d]
    Tensor directions = Tensor::zeros({d, k});
    Rng rng(derive_seed(seed, 0x70636164ULL));
    std::vector<double> v(static_cast<std::size_t>(d));
    std::vector<double> w(static_cast<std::size_t>(d));
    for (int j = 0; j < k; ++j) {
        for (int i = 0; i < d; ++i) v[static_cast<std::size_t>(i)] = rng.normal();
        double nv = vec_norm(v);
        if (nv < 1e-300) v[0] = nv = 1.0;
        for (double& x : v) x /= nv;

        double lambda = 0.0;
        for (int it = 0; it < 100; ++it) {
            for (int r = 0; r < d; ++r) {
                double acc = 0.0;
                for (int c = 0; c < d; ++c) acc += cov.at(r, c) * v[static_cast<std::size_t>(c)];
                w[static_cast<std::size_t>(r)] = acc;
            }
            const double nw = vec_norm(w);
            if (nw < 1e-300) {
                lambda = 0.0;
                break;
            }
            for (int r = 0; r < d; ++r) v[static_cast<std::size_t>(r)] = w[static_cast<std::size_t>(r)] / nw;
            if (std::abs(nw - lambda) < 1e-10) {
                lambda = nw;
                break;
            }
            lambda = nw;
        }
        for (int r = 0; r < d; ++r) directions.at(r, j) = v[static_cast<std::size_t>(r)];
        for (int r = 0; r < d; ++r) {
            for (int c = 0; c < d; ++c) {
                cov.at(r, c) -= lambda * v[static_cast<std::size_t>(r)] * v[static_cast<std::size_t>(c)];
            }
        }
    }
    return kernels::matmul(centered, directions);  // [n, k]
}

std::vector<int> two_means(const Tensor& points, std::uint64_t seed, int restarts) {
    if (points.rank() != 2) {
        throw ShapeError("expected a [n, d] matrix of row vectors, got " + points.shape_str());
    }
    if (restarts < 1) throw ConfigError("clustering needs at least 1 restart");
    const int n = points.extent(0), d = points.extent(1);
    if (n <= 1) return std::vector<int>(static_cast<std::size_t>(std::max(n, 0)), 0);

    const auto dist2 = [&](int row, const std::vector<double>& center) {
        double s = 0.0;
        for (int c = 0; c < d; ++c) {
            const double diff = points.at(row, c) - center[static_cast<std::size_t>(c)];
            s += diff * diff;
        }
        return s;
    };

    Rng rng(derive_seed(seed, 0x326d6e73ULL));
    std::vector<int> best(static_cast<std::size_t>(n), 0);
    double best_wcss = std::numeric_limits<double>::infinity();

    for (int r = 0; r < restarts; ++r) {
        const int i0 = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n)));
        int i1 = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n - 1)));
        if (i1 >= i0) ++i1;
        std::vector<std::vector<double>> centers(2, std::vector<double>(static_cast<std::size_t>(d)));
        for (int c = 0; c < d; ++c) {
            centers[0][static_cast<std::size_t>(c)] = points.at(i0, c);
            centers[1][static_cast<std::size_t>(c)] = points.at(i1, c);
        }

        std::vector<int> assign(static_cast<std::size_t>(n), 0);
        for (int iter = 0; iter < 100; ++iter) {
            bool changed = false;
            for (int i = 0; i < n; ++i) {
                const int a = dist2(i, centers[1]) < dist2(i, centers[0]) ? 1 : 0;
                if (a != assign[static_cast<std::size_t>(i)]) {
                    assign[static_cast<std::size_t>(i)] = a;
                    changed = true;
                }
            }
            // An emptied cluster adopts the point farthest from the other center.
            for (int side = 0; side < 2; ++side) {
                if (std::count(assign.begin(), assign.end(), side) > 0) continue;
                int farthest = 0;
                double far_d = -1.0;
                for (int i = 0; i < n; ++i) {
                    const double dd = dist2(i, centers[1 - side]);
                    if (dd > far_d) {
                        far_d = dd;
                        farthest = i;
                    }
                }
                assign[static_cast<std::size_t>(farthest)] = side;
                changed = true;
            }
            for (int side = 0; side < 2; ++side) {
                std::fill(centers[side].begin(), centers[side].end(), 0.0);
                int count = 0;
                for (int i = 0; i < n; ++i) {
                    if (assign[static_cast<std::size_t>(i)] != side) continue;
                    ++count;
                    for (int c = 0; c < d; ++c) {
                        centers[side][static_cast<std::size_t>(c)] += points.at(i, c);
                    }
                }
                for (double& x : centers[side]) x /= count;
            }
            if (!changed) break;
        }

        double wcss = 0.0;
        for (int i = 0; i < n; ++i) wcss += dist2(i, centers[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])]);
        if (wcss < best_wcss) {
            best_wcss = wcss;
            best = assign;
        }
    }
    return best;
}

std::pair<std::vector<bool>, std::vector<double>> small_cluster_flags(const Tensor& rows,
                                                                      const AcConfig& cfg,
                                                                      std::uint64_t seed) {
    cfg.validate();
    if (rows.rank() != 2) {
        throw ShapeError("expected a [n, d] matrix of row vectors, got " + rows.shape_str());
    }
    const int n = rows.extent(0), d = rows.extent(1);
    std::vector<bool> flags(static_cast<std::size_t>(n), false);
    std::vector<double> scores(static_cast<std::size_t>(n), 1.0);
    if (n == 0) return {flags, scores};

    double variance = 0.0;
    for (int j = 0; j < d; ++j) {
        double mean = 0.0;
        for (int i = 0; i < n; ++i) mean += rows.at(i, j);
        mean /= n;
        for (int i = 0; i < n; ++i) {
            const double diff = rows.at(i, j) - mean;
            variance += diff * diff;
        }
    }
    if (variance < 1e-12) return {flags, scores};  // homogeneous class: nothing to split

    const Tensor projected = principal_projection(rows, cfg.projection_dims, derive_seed(seed, 1));
    const std::vector<int> assign = two_means(projected, derive_seed(seed, 2), cfg.restarts);
    const int n1 = static_cast<int>(std::count(assign.begin(), assign.end(), 1));
    const int n0 = n - n1;
    const double frac0 = static_cast<double>(n0) / n;
    const double frac1 = static_cast<double>(n1) / n;
    const int small = n0 <= n1 ? 0 : 1;
    const double small_frac = std::min(frac0, frac1);
    for (int i = 0; i < n; ++i) {
        const int a = assign[static_cast<std::size_t>(i)];
        scores[static_cast<std::size_t>(i)] = a == 0 ? frac0 : frac1;
        flags[static_cast<std::size_t>(i)] = a == small && small_frac < cfg.cluster_size_threshold;
    }
    return {flags, scores};
}

DetectionVerdict ac_detect(const Model& model, const Dataset& training_set, const AcConfig& cfg) {
    cfg.validate();
    const Tensor reps = representations(model, training_set);
    const int dim = reps.extent(1);
    const std::size_t n = training_set.size();

    DetectionVerdict verdict;
    verdict.threshold = cfg.cluster_size_threshold;
    verdict.flags.assign(n, false);
    verdict.scores.assign(n, 1.0);

    for (int c = 0; c < training_set.class_count; ++c) {
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < n; ++i) {
            if (training_set.samples[i].label == c) members.push_back(i);
        }
        if (members.empty()) continue;
        if (members.size() < 4) {
            std::cerr << "ac_detect: class " << c << " has only " << members.size()
                      << " samples, skipped\n";
            continue;
        }
        Tensor rows = Tensor::zeros({static_cast<int>(members.size()), dim});
        for (std::size_t i = 0; i < members.size(); ++i) {
            std::copy(reps.data() + members[i] * static_cast<std::size_t>(dim),
                      reps.data() + (members[i] + 1) * static_cast<std::size_t>(dim),
                      rows.data() + i * static_cast<std::size_t>(dim));
        }
        const auto [flags, scores] = small_cluster_flags(rows, cfg, derive_seed(cfg.seed, static_cast<std::uint64_t>(c)));
        for (std::size_t i = 0; i < members.size(); ++i) {
            verdict.flags[members[i]] = flags[i];
            verdict.scores[members[i]] = scores[i];
        }
    }
    return verdict;
}

Model ft_defend(const Model& model, const Dataset& clean_subset, const FtConfig& cfg) {
    cfg.validate();
    if (clean_subset.samples.empty()) throw ConfigError("clean subset is empty");
    Model out = model;
    const TrainConfig tc = fine_tune_config(cfg.epochs, cfg.learning_rate, cfg.momentum,
                                            cfg.weight_decay, cfg.batch_size, cfg.seed,
                                            clean_subset.size());
    train(out, clean_subset, tc);
    return out;
}

std::vector<double> fp_activation_means(const Model& model, const Dataset& clean_subset) {
    if (clean_subset.samples.empty()) throw ConfigError("clean subset is empty");
    const PrunableLayer layer = prunable_layer(model);
    const Tensor reps = representations(model, clean_subset);
    const int n = reps.extent(0), dim = reps.extent(1);
    if (dim % layer.units != 0) {
        throw ShapeError("representation width " + std::to_string(dim) +
                         " is not a multiple of the unit count " + std::to_string(layer.units));
    }
    std::vector<double> means(static_cast<std::size_t>(layer.units), 0.0);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < dim; ++j) {
            means[static_cast<std::size_t>(j % layer.units)] += std::abs(reps.at(i, j));
        }
    }
    const double denom = static_cast<double>(n) * (dim / layer.units);
    for (double& m : means) m /= denom;
    return means;
}

Model fp_defend(const Model& model, const Dataset& clean_subset, const FpConfig& cfg) {
    cfg.validate();
    if (clean_subset.samples.empty()) throw ConfigError("clean subset is empty");
    Model out = model;
    const PrunableLayer layer = prunable_layer(out);

    const std::vector<double> means = fp_activation_means(out, clean_subset);
    std::vector<int> order(means.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return means[static_cast<std::size_t>(a)] < means[static_cast<std::size_t>(b)];
    });
    const long long prune_count = round_half_up(cfg.prune_fraction * layer.units);
    std::vector<int> pruned(order.begin(), order.begin() + prune_count);
    for (int u : pruned) zero_unit(out, layer, u);

    if (cfg.ft_epochs > 0) {
        const TrainConfig tc = fine_tune_config(cfg.ft_epochs, cfg.learning_rate, cfg.momentum,
                                                0.0, cfg.batch_size, cfg.seed,
                                                clean_subset.size());
        TrainHooks hooks;
        hooks.batch_end = [&out, &layer, &pruned](int, int) {
            for (int u : pruned) zero_unit(out, layer, u);
        };
        train(out, clean_subset, tc, hooks);
    }
    return out;
}

AblResult abl_train(const Dataset& poisoned, const TrainConfig& train_cfg, const AblConfig& cfg,
                    std::uint64_t model_seed, const Vocabulary* vocab) {
    cfg.validate();
    const std::size_t n = poisoned.size();
    if (n == 0) throw ConfigError("training set is empty");

    AblResult result;
    result.model = build_model(spec_for(poisoned, vocab), model_seed);

    const long long isolate_count = round_half_up(cfg.isolation_fraction * static_cast<double>(n));
    std::vector<double> loss_sums(n, 0.0);
    std::vector<char> isolated(n, 0);
    bool ranked = false;
    const auto rank_isolated = [&] {
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return loss_sums[a] < loss_sums[b];  // fastest-learned (lowest mean loss) first
        });
        for (long long i = 0; i < isolate_count; ++i) isolated[order[static_cast<std::size_t>(i)]] = 1;
        ranked = true;
    };

    TrainConfig full = train_cfg;
    full.epochs = cfg.isolation_epochs + cfg.unlearn_epochs;

    TrainHooks hooks;
    hooks.loss_per_sample = [&](int epoch, const Sample& s, double loss) {
        if (epoch < cfg.isolation_epochs) loss_sums[sample_index(poisoned, s)] += loss;
    };
    hooks.loss_weight = [&](int epoch, const Sample& s) -> double {
        if (epoch < cfg.isolation_epochs) return 1.0;
        if (!ranked) rank_isolated();
        return isolated[sample_index(poisoned, s)] ? -1.0 : 1.0;
    };

    result.history = train(result.model, poisoned, full, hooks);
    if (!ranked && cfg.isolation_epochs > 0) rank_isolated();  // unlearn_epochs == 0

    for (std::size_t i = 0; i < n; ++i) {
        if (isolated[i]) result.isolated_indices.push_back(static_cast<int>(i));
    }
    return result;
}

double spectral_norm(const Tensor& matrix, int steps, double tol) {
    if (matrix.rank() != 2) {
        throw ShapeError("spectral norm needs a rank-2 matrix, got " + matrix.shape_str());
    }
    if (steps < 1) throw ConfigError("power iteration needs at least 1 step");
    if (!(tol > 0.0)) throw ConfigError("tolerance must be positive");
    const int r = matrix.extent(0), c = matrix.extent(1);

    Rng rng(derive_seed(0x7370776fULL, 0));
    std::vector<double> v(static_cast<std::size_t>(c));
    for (double& x : v) x = rng.normal();
    double nv = vec_norm(v);
    if (nv < 1e-300) v[0] = nv = 1.0;
    for (double& x : v) x /= nv;

    std::vector<double> w(static_cast<std::size_t>(r));
    std::vector<double> z(static_cast<std::size_t>(c));
    double sigma = 0.0, prev = -1.0;
    for (int it = 0; it < steps; ++it) {
        for (int i = 0; i < r; ++i) {
            double acc = 0.0;
            for (int j = 0; j < c; ++j) acc += matrix.at(i, j) * v[static_cast<std::size_t>(j)];
            w[static_cast<std::size_t>(i)] = acc;
        }
        sigma = vec_norm(w);
        if (sigma < 1e-300) {
            // Current direction is in the null space; restart from a new one.
            for (double& x : v) x = rng.normal();
            nv = vec_norm(v);
            if (nv < 1e-300) return 0.0;
            for (double& x : v) x /= nv;
            sigma = 0.0;
            continue;
        }
        for (int j = 0; j < c; ++j) {
            double acc = 0.0;
            for (int i = 0; i < r; ++i) acc += matrix.at(i, j) * w[static_cast<std::size_t>(i)];
            z[static_cast<std::size_t>(j)] = acc;
        }
        const double nz = vec_norm(z);
        if (nz < 1e-300) break;
        for (int j = 0; j < c; ++j) v[static_cast<std::size_t>(j)] = z[static_cast<std::size_t>(j)] / nz;
        if (std::abs(sigma - prev) < tol) break;
        prev = sigma;
    }
    return sigma;
}

std::vector<double> channel_spectral_norms(const Tensor& conv_kernel) {
    if (conv_kernel.rank() != 4) {
        throw ShapeError("expected a [KH,KW,Ci,Co] kernel, got " + conv_kernel.shape_str());
    }
    const int kh = conv_kernel.extent(0), kw = conv_kernel.extent(1);
    const int ci = conv_kernel.extent(2), co = conv_kernel.extent(3);
    std::vector<double> sigmas(static_cast<std::size_t>(co), 0.0);
    for (int c = 0; c < co; ++c) {
        Tensor m = Tensor::zeros({ci, kh * kw});
        for (int i = 0; i < kh; ++i) {
            for (int j = 0; j < kw; ++j) {
                for (int in = 0; in < ci; ++in) {
                    m.at(in, i * kw + j) = conv_kernel.at(i, j, in, c);
                }
            }
        }
        sigmas[static_cast<std::size_t>(c)] = spectral_norm(m);
    }
    return sigmas;
}

std::vector<double> unit_spectral_norms(const Tensor& dense_weight) {
    if (dense_weight.rank() != 2) {
        throw ShapeError("expected a [D,U] weight matrix, got " + dense_weight.shape_str());
    }
    const int d = dense_weight.extent(0), u = dense_weight.extent(1);
    std::vector<double> sigmas(static_cast<std::size_t>(u), 0.0);
    for (int j = 0; j < u; ++j) {
        double s = 0.0;
        for (int i = 0; i < d; ++i) s += dense_weight.at(i, j) * dense_weight.at(i, j);
        sigmas[static_cast<std::size_t>(j)] = std::sqrt(s);
    }
    return sigmas;
}

namespace {

void clp_prune_layer(Model& model, const std::string& kernel_name, const std::string& bias_name,
                     bool conv, double u) {
    const Tensor& kernel = model.params.at(kernel_name);
    const std::vector<double> sigmas =
        conv ? channel_spectral_norms(kernel) : unit_spectral_norms(kernel);
    const double count = static_cast<double>(sigmas.size());
    double mean = 0.0;
    for (double s : sigmas) mean += s;
    mean /= count;
    double var = 0.0;
    for (double s : sigmas) var += (s - mean) * (s - mean);
    const double stdev = std::sqrt(var / count);  // population spread
    const double threshold = mean + u * stdev;

    PrunableLayer layer{kernel_name, bias_name, conv, static_cast<int>(sigmas.size())};
    for (std::size_t c = 0; c < sigmas.size(); ++c) {
        if (sigmas[c] > threshold) zero_unit(model, layer, static_cast<int>(c));
    }
}

}  // namespace

Model clp_defend(const Model& model, const ClpConfig& cfg) {
    cfg.validate();
    Model out = model;
    if (out.spec.modality == Modality::Image) {
        clp_prune_layer(out, "conv1.kernel", "conv1.bias", true, cfg.u);
        clp_prune_layer(out, "conv2.kernel", "conv2.bias", true, cfg.u);
    } else {
        clp_prune_layer(out, "hidden.weight", "hidden.bias", false, cfg.u);
    }
    return out;
}

NcReversal nc_reverse(const Model& model, const Dataset& clean_batch, int label,
                      const NcConfig& cfg) {
    cfg.validate();
    model.spec.validate();
    if (model.spec.modality != Modality::Image) {
        throw ConfigError("trigger reversal is defined for image models only");
    }
    if (clean_batch.modality != Modality::Image || clean_batch.samples.empty()) {
        throw ConfigError("trigger reversal needs a non-empty clean image batch");
    }
    if (label < 0 || label >= model.spec.class_count) {
        throw ConfigError("label " + std::to_string(label) + " is outside [0, " +
                          std::to_string(model.spec.class_count) + ")");
    }
    const int b = static_cast<int>(clean_batch.size());
    const int h = model.spec.image_side, w = model.spec.image_side;
    const int c = model.spec.image_channels;
    Tensor x = Tensor::zeros({b, h, w, c});
    const std::vector<int> want{h, w, c};
    for (int i = 0; i < b; ++i) {
        const Sample& s = clean_batch.samples[static_cast<std::size_t>(i)];
        if (s.payload.shape() != want) {
            throw ShapeError("sample " + std::to_string(s.id) + " has shape " +
                             s.payload.shape_str() + ", expected " + Tensor::zeros(want).shape_str());
        }
        std::copy(s.payload.data(), s.payload.data() + s.payload.size(),
                  x.data() + static_cast<std::size_t>(i) * s.payload.size());
    }
    const std::vector<int> labels(static_cast<std::size_t>(b), label);

    // Optimize pre-sigmoid variables so mask and pattern stay inside [0,1].
    std::map<std::string, Tensor> vars;
    vars.emplace("mask", Tensor::full({h, w}, std::log(1.0 / 9.0)));  // sigmoid -> 0.1
    vars.emplace("pattern", Tensor::zeros({h, w, c}));                // sigmoid -> 0.5
    SgdOptimizer descent(cfg.learning_rate, cfg.momentum);

    for (int step = 0; step < cfg.steps; ++step) {
        Tape tape;
        Var vm = tape.leaf(vars.at("mask"));
        Var vp = tape.leaf(vars.at("pattern"));
        Var mask = ops::sigmoid(vm);
        Var pattern = ops::sigmoid(vp);
        Var blended = ops::mask_blend(tape.constant(x), mask, pattern);
        Var logits = image_logits_on_tape(model, blended);
        Var attack = ops::mean_all(ops::softmax_xent(logits, labels));
        Var objective = ops::add(attack, ops::scale(ops::sum_all(mask), cfg.mask_weight));
        const double value = tape.value(objective).scalar_value();
        if (!std::isfinite(value)) {
            throw PipelineError("trigger reversal aborted: non-finite loss at step " +
                                std::to_string(step));
        }
        GradMap grads = tape.backward(objective);
        std::map<std::string, Tensor> named;
        named.emplace("mask", std::move(grads.at(vm.id)));
        named.emplace("pattern", std::move(grads.at(vp.id)));
        descent.step(vars, named);
    }

    NcReversal out;
    out.mask = vars.at("mask");
    for (std::size_t i = 0; i < out.mask.size(); ++i) {
        out.mask.data()[i] = sigmoid(out.mask.data()[i]);
        out.mask_norm += out.mask.data()[i];
    }
    out.pattern = vars.at("pattern");
    for (std::size_t i = 0; i < out.pattern.size(); ++i) {
        out.pattern.data()[i] = sigmoid(out.pattern.data()[i]);
    }
    return out;
}

NCOutcome nc_detect(const std::vector<double>& mask_norms, double anomaly_threshold) {
    if (mask_norms.size() < 3) {
        throw ConfigError("anomaly scoring needs at least 3 labels, got " +
                          std::to_string(mask_norms.size()));
    }
    NCOutcome out;
    out.mask_norms = mask_norms;
    out.anomaly_threshold = anomaly_threshold;
    out.median_norm = median_of(mask_norms);

    std::vector<double> deviations(mask_norms.size());
    for (std::size_t i = 0; i < mask_norms.size(); ++i) {
        deviations[i] = std::abs(mask_norms[i] - out.median_norm);
    }
    const double mad = median_of(deviations);
    const double scale = 1.4826 * std::max(mad, 1e-9);
    out.anomaly_indices.resize(mask_norms.size());
    for (std::size_t i = 0; i < mask_norms.size(); ++i) {
        out.anomaly_indices[i] = deviations[i] / scale;
        if (out.anomaly_indices[i] > anomaly_threshold && mask_norms[i] < out.median_norm) {
            out.flagged_labels.push_back(static_cast<int>(i));
        }
    }
    return out;
}

NCOutcome nc_analyze(const Model& model, const Dataset& clean_batch, const NcConfig& cfg) {
    std::vector<NcReversal> reversals;
    std::vector<double> norms;
    for (int label = 0; label < model.spec.class_count; ++label) {
        reversals.push_back(nc_reverse(model, clean_batch, label, cfg));
        norms.push_back(reversals.back().mask_norm);
    }
    NCOutcome out = nc_detect(norms, cfg.anomaly_threshold);
    for (NcReversal& r : reversals) {
        out.masks.push_back(std::move(r.mask));
        out.patterns.push_back(std::move(r.pattern));
    }
    return out;
}

Model nc_mitigate(const Model& model, const NCOutcome& outcome, const Dataset& clean_subset,
                  const FtConfig& ft) {
    ft.validate();
    if (clean_subset.samples.empty()) throw ConfigError("clean subset is empty");
    if (outcome.flagged_labels.empty()) return ft_defend(model, clean_subset, ft);
    if (outcome.masks.size() != outcome.mask_norms.size()) {
        throw ConfigError("outcome carries no reversed masks; run the full analysis first");
    }

    Dataset augmented = clean_subset;
    int next_id = 0;
    for (const Sample& s : clean_subset.samples) next_id = std::max(next_id, s.id + 1);
    for (int label : outcome.flagged_labels) {
        const Tensor& mask = outcome.masks[static_cast<std::size_t>(label)];
        const Tensor& pattern = outcome.patterns[static_cast<std::size_t>(label)];
        for (const Sample& s : clean_subset.samples) {
            Sample stamped = s;
            stamped.id = next_id++;
            stamped.payload = blend_payload(s.payload, mask, pattern);
            augmented.samples.push_back(std::move(stamped));  // keeps its true label
        }
    }
    return ft_defend(model, augmented, ft);
}

}  // namespace bdforge
