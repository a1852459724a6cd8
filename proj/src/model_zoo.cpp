#include "bdforge/model_zoo.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "bdforge/optim.hpp"

namespace bdforge {

namespace {

using nlohmann::json;

constexpr char kCheckpointMagic[4] = {'B', 'F', 'C', 'K'};
constexpr double kEnergyFloor = 1e-6;

struct ParamInit {
    std::string name;
    std::vector<int> shape;
    double init_bound;  // uniform +-bound; 0 means zero-initialized
};

/// Architecture-order parameter layout; the single source of truth for
/// names, shapes, and initialization scales.
std::vector<ParamInit> param_layout(const ModelSpec& spec) {
    const int k = spec.class_count;
    std::vector<ParamInit> layout;
    switch (spec.modality) {
        case Modality::Image: {
            const int ci = spec.image_channels;
            layout.push_back({"conv1.kernel", {3, 3, ci, 8}, 1.0 / std::sqrt(9.0 * ci)});
            layout.push_back({"conv1.bias", {8}, 0.0});
            layout.push_back({"conv2.kernel", {3, 3, 8, 16}, 1.0 / std::sqrt(72.0)});
            layout.push_back({"conv2.bias", {16}, 0.0});
            layout.push_back({"out.weight", {spec.image_flat_dim(), k}, 0.0});
            layout.push_back({"out.bias", {k}, 0.0});
            break;
        }
        case Modality::Text: {
            layout.push_back({"embed.table",
                              {spec.vocab_size, spec.embed_dim},
                              1.0 / std::sqrt(static_cast<double>(spec.embed_dim))});
            layout.push_back({"hidden.weight",
                              {spec.embed_dim, spec.text_hidden},
                              1.0 / std::sqrt(static_cast<double>(spec.embed_dim))});
            layout.push_back({"hidden.bias", {spec.text_hidden}, 0.0});
            layout.push_back({"out.weight", {spec.text_hidden, k}, 0.0});
            layout.push_back({"out.bias", {k}, 0.0});
            break;
        }
        case Modality::Audio: {
            const int f = spec.audio_feature_dim();
            layout.push_back({"hidden.weight",
                              {f, spec.audio_hidden},
                              1.0 / std::sqrt(static_cast<double>(f))});
            layout.push_back({"hidden.bias", {spec.audio_hidden}, 0.0});
            layout.push_back({"out.weight", {spec.audio_hidden, k}, 0.0});
            layout.push_back({"out.bias", {k}, 0.0});
            break;
        }
    }
    return layout;
}

std::map<std::string, Var> bind_params(Tape& t, const Model& m, bool trainable) {
    std::map<std::string, Var> out;
    for (const auto& [name, tensor] : m.params) {
        out.emplace(name, trainable ? t.leaf(tensor) : t.constant(tensor));
    }
    return out;
}

Var param(const std::map<std::string, Var>& p, const std::string& name) {
    const auto it = p.find(name);
    if (it == p.end()) {
        throw Error("model is missing parameter '" + name + "'");
    }
    return it->second;
}

struct ForwardOut {
    Var logits;
    Var penultimate;
};

ForwardOut image_forward(const std::map<std::string, Var>& p, const ModelSpec& spec, Var x) {
    Tape& t = *x.tape;
    Var h = ops::relu(ops::add(ops::conv2d(x, param(p, "conv1.kernel")), param(p, "conv1.bias")));
    h = ops::maxpool2(h);
    h = ops::relu(ops::add(ops::conv2d(h, param(p, "conv2.kernel")), param(p, "conv2.bias")));
    h = ops::maxpool2(h);
    const int batch = t.value(h).shape()[0];
    Var flat = ops::reshape(h, {batch, spec.image_flat_dim()});
    Var logits = ops::add(ops::matmul(flat, param(p, "out.weight")), param(p, "out.bias"));
    return {logits, flat};
}

ForwardOut dense_head(const std::map<std::string, Var>& p, Var features) {
    Var h = ops::relu(
        ops::add(ops::matmul(features, param(p, "hidden.weight")), param(p, "hidden.bias")));
    Var logits = ops::add(ops::matmul(h, param(p, "out.weight")), param(p, "out.bias"));
    return {logits, h};
}

Tensor stack_images(const ModelSpec& spec, const std::vector<const Sample*>& batch) {
    const int b = static_cast<int>(batch.size());
    const int side = spec.image_side, ch = spec.image_channels;
    Tensor x = Tensor::zeros({b, side, side, ch});
    const std::size_t per = static_cast<std::size_t>(side) * side * ch;
    for (int i = 0; i < b; ++i) {
        const Tensor& pay = batch[static_cast<std::size_t>(i)]->payload;
        if (pay.rank() != 3 || pay.shape()[0] != side || pay.shape()[1] != side ||
            pay.shape()[2] != ch) {
            throw ShapeError("image sample " + std::to_string(batch[static_cast<std::size_t>(i)]->id) +
                             " has shape " + pay.shape_str() + ", model expects [" +
                             std::to_string(side) + ", " + std::to_string(side) + ", " +
                             std::to_string(ch) + "]");
        }
        std::copy(pay.data(), pay.data() + per, x.data() + static_cast<std::size_t>(i) * per);
    }
    return x;
}

Tensor stack_audio_features(const ModelSpec& spec, const std::vector<const Sample*>& batch) {
    const int b = static_cast<int>(batch.size());
    const int f = spec.audio_feature_dim();
    Tensor x = Tensor::zeros({b, f});
    for (int i = 0; i < b; ++i) {
        const Tensor feat = audio_energy_features(batch[static_cast<std::size_t>(i)]->payload, spec);
        std::copy(feat.data(), feat.data() + static_cast<std::size_t>(f),
                  x.data() + static_cast<std::size_t>(i) * static_cast<std::size_t>(f));
    }
    return x;
}

void gather_tokens(const ModelSpec& spec, const std::vector<const Sample*>& batch,
                   std::vector<std::vector<int>>& ids, std::vector<int>& lengths) {
    ids.clear();
    lengths.clear();
    for (const Sample* s : batch) {
        std::vector<int> row = s->tokens;
        for (int& t : row) {
            if (t < 0 || t >= spec.vocab_size) t = Vocabulary::kUnkId;
        }
        if (row.empty()) row.push_back(Vocabulary::kPadId);  // empty text reads as padding
        lengths.push_back(static_cast<int>(row.size()));
        ids.push_back(std::move(row));
    }
}

ForwardOut forward(Tape& t, const Model& m, const std::map<std::string, Var>& p,
                   const std::vector<const Sample*>& batch) {
    for (const Sample* s : batch) {
        if (s->modality != m.spec.modality) {
            throw ConfigError("sample " + std::to_string(s->id) + " is " +
                              modality_name(s->modality) + " but the model expects " +
                              modality_name(m.spec.modality));
        }
    }
    switch (m.spec.modality) {
        case Modality::Image:
            return image_forward(p, m.spec, t.constant(stack_images(m.spec, batch)));
        case Modality::Text: {
            std::vector<std::vector<int>> ids;
            std::vector<int> lengths;
            gather_tokens(m.spec, batch, ids, lengths);
            Var emb = ops::embedding(param(p, "embed.table"), ids);
            return dense_head(p, ops::mean_tokens(emb, lengths));
        }
        case Modality::Audio:
            return dense_head(p, t.constant(stack_audio_features(m.spec, batch)));
    }
    throw Error("unreachable modality");
}

std::vector<const Sample*> whole_dataset(const Dataset& ds, std::size_t begin, std::size_t end) {
    std::vector<const Sample*> out;
    out.reserve(end - begin);
    for (std::size_t i = begin; i < end; ++i) out.push_back(&ds.samples[i]);
    return out;
}

int argmax_row(const Tensor& m, int row) {
    const int k = m.shape()[1];
    int best = 0;
    for (int j = 1; j < k; ++j) {
        if (m.at(row, j) > m.at(row, best)) best = j;
    }
    return best;
}

json spec_to_json(const ModelSpec& s) {
    return json{{"modality", modality_name(s.modality)},
                {"class_count", s.class_count},
                {"image_side", s.image_side},
                {"image_channels", s.image_channels},
                {"vocab_size", s.vocab_size},
                {"embed_dim", s.embed_dim},
                {"text_hidden", s.text_hidden},
                {"audio_samples", s.audio_samples},
                {"audio_frame", s.audio_frame},
                {"audio_hidden", s.audio_hidden}};
}

ModelSpec spec_from_json(const json& j) {
    ModelSpec s;
    s.modality = modality_from_name(j.at("modality").get<std::string>());
    s.class_count = j.at("class_count").get<int>();
    s.image_side = j.at("image_side").get<int>();
    s.image_channels = j.at("image_channels").get<int>();
    s.vocab_size = j.at("vocab_size").get<int>();
    s.embed_dim = j.at("embed_dim").get<int>();
    s.text_hidden = j.at("text_hidden").get<int>();
    s.audio_samples = j.at("audio_samples").get<int>();
    s.audio_frame = j.at("audio_frame").get<int>();
    s.audio_hidden = j.at("audio_hidden").get<int>();
    return s;
}

}  // namespace

int ModelSpec::image_flat_dim() const {
    const int c1 = image_side - 2;   // conv 3x3, valid
    const int p1 = c1 / 2;           // maxpool2, floor
    const int c2 = p1 - 2;
    const int p2 = c2 / 2;
    if (p2 < 1) {
        throw ConfigError("image_side " + std::to_string(image_side) +
                          " is too small for two conv/pool stages");
    }
    return p2 * p2 * 16;
}

int ModelSpec::audio_feature_dim() const { return audio_samples / audio_frame; }

void ModelSpec::validate() const {
    if (class_count < 2) {
        throw ConfigError("class_count must be at least 2, got " + std::to_string(class_count));
    }
    switch (modality) {
        case Modality::Image:
            if (image_channels < 1) throw ConfigError("image_channels must be positive");
            (void)image_flat_dim();
            break;
        case Modality::Text:
            if (vocab_size < 2) {
                throw ConfigError("vocab_size must cover the padding and unknown tokens, got " +
                                  std::to_string(vocab_size));
            }
            if (embed_dim < 1 || text_hidden < 1) {
                throw ConfigError("text model dimensions must be positive");
            }
            break;
        case Modality::Audio:
            if (audio_frame < 1 || audio_samples < audio_frame) {
                throw ConfigError("audio clip of " + std::to_string(audio_samples) +
                                  " samples cannot be framed into " + std::to_string(audio_frame) +
                                  "-sample windows");
            }
            if (audio_hidden < 1) throw ConfigError("audio_hidden must be positive");
            break;
    }
}

void TrainConfig::validate(std::size_t dataset_size) const {
    if (epochs < 0) throw ConfigError("epochs must be non-negative, got " + std::to_string(epochs));
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
    if (batch_size < 1) throw ConfigError("batch_size must be positive");
    if (static_cast<std::size_t>(batch_size) > dataset_size) {
        throw ConfigError("batch_size " + std::to_string(batch_size) + " exceeds dataset size " +
                          std::to_string(dataset_size));
    }
}

ModelSpec spec_for(const Dataset& ds, const Vocabulary* vocab) {
    if (ds.samples.empty()) {
        throw ConfigError("cannot derive a model spec from an empty dataset");
    }
    ModelSpec s;
    s.modality = ds.modality;
    s.class_count = ds.class_count;
    const Tensor& first = ds.samples.front().payload;
    switch (ds.modality) {
        case Modality::Image:
            if (first.rank() != 3 || first.shape()[0] != first.shape()[1]) {
                throw ShapeError("image payloads must be square [side, side, channels], got " +
                                 first.shape_str());
            }
            s.image_side = first.shape()[0];
            s.image_channels = first.shape()[2];
            break;
        case Modality::Text:
            if (vocab == nullptr) {
                throw ConfigError("a text model spec needs the dataset's vocabulary");
            }
            s.vocab_size = static_cast<int>(vocab->size());
            break;
        case Modality::Audio:
            s.audio_samples = static_cast<int>(first.size());
            break;
    }
    s.validate();
    return s;
}

Model build_model(const ModelSpec& spec, std::uint64_t seed) {
    spec.validate();
    Model m;
    m.spec = spec;
    Rng rng(seed);
    for (const ParamInit& p : param_layout(spec)) {
        Tensor t = Tensor::zeros(p.shape);
        if (p.init_bound > 0.0) {
            for (std::size_t i = 0; i < t.size(); ++i) {
                t.data()[i] = rng.uniform(-p.init_bound, p.init_bound);
            }
        }
        m.params.emplace(p.name, std::move(t));
    }
    return m;
}

Tensor audio_energy_features(const Tensor& wave, const ModelSpec& spec) {
    if (wave.rank() != 1) {
        throw ShapeError("audio payloads must be rank-1 waveforms, got " + wave.shape_str());
    }
    const int frames = spec.audio_feature_dim();
    const std::size_t n = wave.size();
    Tensor out = Tensor::zeros({frames});
    for (int f = 0; f < frames; ++f) {
        double energy = 0.0;
        for (int i = 0; i < spec.audio_frame; ++i) {
            const std::size_t idx =
                static_cast<std::size_t>(f) * static_cast<std::size_t>(spec.audio_frame) +
                static_cast<std::size_t>(i);
            const double v = idx < n ? wave.data()[idx] : 0.0;  // short clips read as silence
            energy += v * v;
        }
        out.at(f) = std::log(kEnergyFloor + energy / static_cast<double>(spec.audio_frame));
    }
    return out;
}

TrainHistory train(Model& model, const Dataset& data, const TrainConfig& cfg,
                   const TrainHooks& hooks) {
    model.spec.validate();
    cfg.validate(data.size());
    if (data.modality != model.spec.modality) {
        throw ConfigError("dataset modality " + modality_name(data.modality) +
                          " does not match model modality " + modality_name(model.spec.modality));
    }
    if (data.class_count != model.spec.class_count) {
        throw ConfigError("dataset has " + std::to_string(data.class_count) +
                          " classes but the model expects " +
                          std::to_string(model.spec.class_count));
    }

    const std::size_t n = data.size();
    SgdOptimizer opt(cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    Rng shuffle_rng(derive_seed(cfg.seed, 0x73687566ULL));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});

    TrainHistory hist;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double loss_sum = 0.0;
        std::size_t correct = 0;
        const std::size_t batches = (n + static_cast<std::size_t>(cfg.batch_size) - 1) /
                                    static_cast<std::size_t>(cfg.batch_size);
        for (std::size_t b = 0; b < batches; ++b) {
            const std::size_t begin = b * static_cast<std::size_t>(cfg.batch_size);
            const std::size_t end = std::min(n, begin + static_cast<std::size_t>(cfg.batch_size));
            std::vector<const Sample*> batch;
            std::vector<int> labels;
            batch.reserve(end - begin);
            for (std::size_t i = begin; i < end; ++i) {
                batch.push_back(&data.samples[order[i]]);
                labels.push_back(data.samples[order[i]].label);
            }

            Tape tape;
            auto pvars = bind_params(tape, model, true);
            ForwardOut f = forward(tape, model, pvars, batch);
            Var raw_losses = ops::softmax_xent(f.logits, labels);
            Var losses = raw_losses;
            if (hooks.loss_weight) {
                Tensor w = Tensor::zeros({static_cast<int>(batch.size())});
                bool all_unit = true;
                for (std::size_t i = 0; i < batch.size(); ++i) {
                    const double wi = hooks.loss_weight(epoch, *batch[i]);
                    w.data()[i] = wi;
                    if (wi != 1.0) all_unit = false;
                }
                if (!all_unit) {
                    losses = ops::mul(losses, tape.constant(std::move(w)));
                }
            }
            Var loss = ops::mean_all(losses);
            const double loss_value = tape.value(loss).scalar_value();
            if (!std::isfinite(loss_value)) {
                throw PipelineError("training aborted: non-finite loss at epoch " +
                                    std::to_string(epoch) + ", batch " + std::to_string(b));
            }

            GradMap grads = tape.backward(loss);
            std::map<std::string, Tensor> named;
            for (const auto& [name, var] : pvars) {
                named.emplace(name, std::move(grads.at(var.id)));
            }
            opt.step(model.params, named);

            const Tensor& logit_values = tape.value(f.logits);
            const Tensor& raw_values = tape.value(raw_losses);
            const Tensor& objective_values = tape.value(losses);
            for (std::size_t i = 0; i < batch.size(); ++i) {
                loss_sum += objective_values.data()[i];
                if (argmax_row(logit_values, static_cast<int>(i)) == batch[i]->label) ++correct;
                if (hooks.loss_per_sample) {
                    hooks.loss_per_sample(epoch, *batch[i], raw_values.data()[i]);
                }
            }
            if (hooks.batch_end) hooks.batch_end(epoch, static_cast<int>(b));
        }
        const double mean_loss = loss_sum / static_cast<double>(n);
        const double accuracy = static_cast<double>(correct) / static_cast<double>(n);
        hist.loss.push_back(mean_loss);
        hist.accuracy.push_back(accuracy);
        if (hooks.epoch_end) hooks.epoch_end(epoch, mean_loss, accuracy);
    }
    return hist;
}

Tensor predict_proba(const Model& model, const Dataset& ds, int batch_size) {
    if (batch_size < 1) throw ConfigError("batch_size must be positive");
    const std::size_t n = ds.size();
    Tensor out = Tensor::zeros({static_cast<int>(n), model.spec.class_count});
    for (std::size_t begin = 0; begin < n; begin += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(n, begin + static_cast<std::size_t>(batch_size));
        Tape tape;
        auto pvars = bind_params(tape, model, false);
        ForwardOut f = forward(tape, model, pvars, whole_dataset(ds, begin, end));
        const Tensor probs = ops::softmax_rows(tape.value(f.logits));
        std::copy(probs.data(), probs.data() + probs.size(),
                  out.data() + begin * static_cast<std::size_t>(model.spec.class_count));
    }
    return out;
}

Tensor predict(const Model& model, const Sample& sample) {
    Tape tape;
    auto pvars = bind_params(tape, model, false);
    ForwardOut f = forward(tape, model, pvars, {&sample});
    const Tensor probs = ops::softmax_rows(tape.value(f.logits));
    Tensor row = Tensor::zeros({model.spec.class_count});
    std::copy(probs.data(), probs.data() + probs.size(), row.data());
    return row;
}

int predict_label(const Model& model, const Sample& sample) {
    const Tensor probs = predict(model, sample);
    int best = 0;
    for (int j = 1; j < model.spec.class_count; ++j) {
        if (probs.at(j) > probs.at(best)) best = j;
    }
    return best;
}

std::vector<int> predict_batch(const Model& model, const Dataset& ds, int batch_size) {
    const Tensor probs = predict_proba(model, ds, batch_size);
    std::vector<int> labels(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        labels[i] = argmax_row(probs, static_cast<int>(i));
    }
    return labels;
}

Tensor representations(const Model& model, const Dataset& ds, int batch_size) {
    if (batch_size < 1) throw ConfigError("batch_size must be positive");
    const std::size_t n = ds.size();
    Tensor out;
    for (std::size_t begin = 0; begin < n; begin += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(n, begin + static_cast<std::size_t>(batch_size));
        Tape tape;
        auto pvars = bind_params(tape, model, false);
        ForwardOut f = forward(tape, model, pvars, whole_dataset(ds, begin, end));
        const Tensor& rep = tape.value(f.penultimate);
        const int dim = rep.shape()[1];
        if (out.size() == 0) out = Tensor::zeros({static_cast<int>(n), dim});
        std::copy(rep.data(), rep.data() + rep.size(),
                  out.data() + begin * static_cast<std::size_t>(dim));
    }
    return out;
}

Var image_logits_on_tape(const Model& model, Var x) {
    if (model.spec.modality != Modality::Image) {
        throw ConfigError("input-gradient forward passes are defined for image models only");
    }
    if (x.tape == nullptr) throw Error("image_logits_on_tape: unbound input");
    auto pvars = bind_params(*x.tape, model, false);
    return image_forward(pvars, model.spec, x).logits;
}

void save_checkpoint(const Model& model, const TrainHistory& history, const std::string& path) {
    json header;
    header["format_version"] = kCheckpointVersion;
    header["spec"] = spec_to_json(model.spec);
    header["history"] = json{{"loss", history.loss}, {"accuracy", history.accuracy}};
    json params = json::array();
    for (const auto& [name, tensor] : model.params) {
        params.push_back(json{{"name", name}, {"shape", tensor.shape()}});
    }
    header["params"] = params;
    const std::string head = header.dump();

    std::string bytes;
    bytes.append(kCheckpointMagic, sizeof(kCheckpointMagic));
    append_u32_le(bytes, static_cast<std::uint32_t>(head.size()));
    bytes += head;
    for (const auto& [name, tensor] : model.params) {
        for (std::size_t i = 0; i < tensor.size(); ++i) {
            append_f64_le(bytes, tensor.data()[i]);
        }
    }

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("failed writing checkpoint to '" + path + "'");
}

std::pair<Model, TrainHistory> load_checkpoint(const std::string& path, int expected_class_count) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open checkpoint '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    const std::string bytes = ss.str();

    if (bytes.size() < sizeof(kCheckpointMagic) + 4 ||
        std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
        throw FormatError("'" + path + "' is not a checkpoint file");
    }
    const auto* raw = reinterpret_cast<const std::uint8_t*>(bytes.data());
    std::size_t pos = sizeof(kCheckpointMagic);
    const std::uint32_t head_len = read_u32_le(raw + pos);
    pos += 4;
    if (bytes.size() < pos + head_len) {
        throw FormatError("checkpoint '" + path + "' truncated inside the header");
    }
    json header;
    try {
        header = json::parse(bytes.substr(pos, head_len));
    } catch (const json::exception& e) {
        throw FormatError("checkpoint '" + path + "' has a malformed header: " + e.what());
    }
    pos += head_len;

    std::uint32_t version = 0;
    try {
        version = header.at("format_version").get<std::uint32_t>();
    } catch (const json::exception&) {
        throw FormatError("checkpoint '" + path + "' header lacks a format_version");
    }
    if (version != kCheckpointVersion) {
        throw FormatError("checkpoint version mismatch: file has " + std::to_string(version) +
                          ", reader expects " + std::to_string(kCheckpointVersion));
    }

    Model model;
    TrainHistory history;
    try {
        model.spec = spec_from_json(header.at("spec"));
        history.loss = header.at("history").at("loss").get<std::vector<double>>();
        history.accuracy = header.at("history").at("accuracy").get<std::vector<double>>();
    } catch (const json::exception& e) {
        throw FormatError("checkpoint '" + path + "' has a malformed header: " + e.what());
    }
    model.spec.validate();
    if (expected_class_count >= 0 && model.spec.class_count != expected_class_count) {
        throw ShapeError("checkpoint is for " + std::to_string(model.spec.class_count) +
                         " classes but " + std::to_string(expected_class_count) +
                         " were expected");
    }

    std::map<std::string, std::vector<int>> expected;
    for (const ParamInit& p : param_layout(model.spec)) expected.emplace(p.name, p.shape);

    if (!header.contains("params") || !header["params"].is_array()) {
        throw FormatError("checkpoint '" + path + "' header lacks a parameter list");
    }
    for (const json& pj : header["params"]) {
        std::string name;
        std::vector<int> shape;
        try {
            name = pj.at("name").get<std::string>();
            shape = pj.at("shape").get<std::vector<int>>();
        } catch (const json::exception& e) {
            throw FormatError("checkpoint '" + path + "' has a malformed header: " + e.what());
        }
        const auto it = expected.find(name);
        if (it == expected.end()) {
            throw ShapeError("checkpoint carries unexpected parameter '" + name + "'");
        }
        if (it->second != shape) {
            throw ShapeError("checkpoint parameter '" + name + "' has the wrong shape");
        }
        const std::size_t count = shape_product(shape);
        if (bytes.size() < pos + count * 8) {
            throw FormatError("checkpoint '" + path + "' truncated inside parameter '" + name +
                              "'");
        }
        Tensor t = Tensor::zeros(shape);
        for (std::size_t i = 0; i < count; ++i) {
            t.data()[i] = read_f64_le(raw + pos);
            pos += 8;
        }
        model.params.emplace(name, std::move(t));
        expected.erase(it);
    }
    if (!expected.empty()) {
        throw ShapeError("checkpoint is missing parameter '" + expected.begin()->first + "'");
    }
    if (pos != bytes.size()) {
        throw FormatError("checkpoint '" + path + "' has trailing bytes");
    }
    return {std::move(model), std::move(history)};
}

}  // namespace bdforge
