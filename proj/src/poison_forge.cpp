#include "bdforge/poison_forge.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "bdforge/common.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace bdforge {

std::string text_position_name(TextPosition p) {
    switch (p) {
        case TextPosition::Front: return "front";
        case TextPosition::End: return "end";
        case TextPosition::Random: return "random";
    }
    throw Error("text_position_name: invalid position");
}

TextPosition text_position_from_name(const std::string& name) {
    if (name == "front") return TextPosition::Front;
    if (name == "end") return TextPosition::End;
    if (name == "random") return TextPosition::Random;
    throw ConfigError("unknown text position '" + name + "'");
}

std::string label_mode_name(LabelMode m) {
    return m == LabelMode::Dirty ? "dirty" : "clean";
}

LabelMode label_mode_from_name(const std::string& name) {
    if (name == "dirty") return LabelMode::Dirty;
    if (name == "clean") return LabelMode::Clean;
    throw ConfigError("unknown label mode '" + name + "'");
}

Modality trigger_modality(const TriggerSpec& trigger) {
    if (std::holds_alternative<ImagePatch>(trigger) || std::holds_alternative<ImageBlend>(trigger)) {
        return Modality::Image;
    }
    if (std::holds_alternative<TextWord>(trigger) || std::holds_alternative<TextSentence>(trigger)) {
        return Modality::Text;
    }
    return Modality::Audio;
}

std::string trigger_variant_name(const TriggerSpec& trigger) {
    if (std::holds_alternative<ImagePatch>(trigger)) return "image_patch";
    if (std::holds_alternative<ImageBlend>(trigger)) return "image_blend";
    if (std::holds_alternative<TextWord>(trigger)) return "text_word";
    if (std::holds_alternative<TextSentence>(trigger)) return "text_sentence";
    if (std::holds_alternative<AudioBlendNoise>(trigger)) return "audio_blend_noise";
    return "audio_tone";
}

void validate_trigger(const TriggerSpec& trigger) {
    if (const auto* p = std::get_if<ImagePatch>(&trigger)) {
        if (p->row < 0 || p->col < 0 || p->height < 1 || p->width < 1) {
            throw ConfigError("image patch geometry must be non-negative with positive size");
        }
        if (p->pixel_value < 0.0 || p->pixel_value > 1.0) {
            throw ConfigError("image patch pixel_value must lie in [0,1]");
        }
    } else if (const auto* b = std::get_if<ImageBlend>(&trigger)) {
        if (b->alpha < 0.0 || b->alpha > 1.0) {
            throw ConfigError("image blend alpha must lie in [0,1]");
        }
        if (b->pattern.rank() != 3) {
            throw ConfigError("image blend pattern must be a rank-3 [H,W,C] tensor");
        }
    } else if (const auto* w = std::get_if<TextWord>(&trigger)) {
        if (w->token.empty()) {
            throw ConfigError("text word trigger token must be non-empty");
        }
    } else if (const auto* s = std::get_if<TextSentence>(&trigger)) {
        if (s->sentence.empty()) {
            throw ConfigError("text sentence trigger must be non-empty");
        }
    } else if (const auto* n = std::get_if<AudioBlendNoise>(&trigger)) {
        if (n->alpha < 0.0 || n->alpha > 1.0) {
            throw ConfigError("audio blend alpha must lie in [0,1]");
        }
    } else if (const auto* t = std::get_if<AudioTone>(&trigger)) {
        if (t->frequency <= 0.0 || t->frequency >= kCanonicalAudioRate / 2.0) {
            throw ConfigError("audio tone frequency must lie below the Nyquist rate " +
                              std::to_string(kCanonicalAudioRate / 2));
        }
        if (t->amplitude < 0.0 || t->amplitude > 1.0) {
            throw ConfigError("audio tone amplitude must lie in [0,1]");
        }
        if (t->duration_s <= 0.0 || t->offset_s < 0.0) {
            throw ConfigError("audio tone needs positive duration and non-negative offset");
        }
    }
}

void AttackConfig::validate() const {
    validate_trigger(trigger);
    if (target_label < 0) {
        throw ConfigError("attack target_label must be non-negative");
    }
    if (poison_ratio < 0.0 || poison_ratio > 1.0) {
        throw ConfigError("attack poison_ratio must lie in [0,1]");
    }
}

std::vector<int> select_poison_indices(const Dataset& ds, const AttackConfig& cfg) {
    cfg.validate();
    if (cfg.target_label >= ds.class_count) {
        throw ConfigError("attack target_label " + std::to_string(cfg.target_label) +
                          " outside [0, " + std::to_string(ds.class_count) + ")");
    }
    std::vector<int> eligible;
    for (const Sample& s : ds.samples) {
        if (cfg.label_mode == LabelMode::Dirty || s.label == cfg.target_label) {
            eligible.push_back(s.id);
        }
    }
    if (eligible.empty()) {
        throw PipelineError("select_poison_indices: eligible pool is empty");
    }
    Rng rng(cfg.seed);
    rng.shuffle(eligible);
    const auto k = static_cast<std::size_t>(
        round_half_up(cfg.poison_ratio * static_cast<double>(eligible.size())));
    eligible.resize(std::min(k, eligible.size()));
    std::sort(eligible.begin(), eligible.end());
    return eligible;
}

namespace {

std::string insert_text(const std::string& raw, const std::string& piece, TextPosition pos,
                        Rng& rng) {
    const std::vector<std::string> words = tokenize_words(raw);
    // Duplicate guard: skip when the piece already sits at the requested edge.
    const std::vector<std::string> piece_words = tokenize_words(piece);
    auto leads_with_piece = [&]() {
        if (words.size() < piece_words.size()) return false;
        return std::equal(piece_words.begin(), piece_words.end(), words.begin());
    };
    auto ends_with_piece = [&]() {
        if (words.size() < piece_words.size()) return false;
        return std::equal(piece_words.rbegin(), piece_words.rend(), words.rbegin());
    };
    if (pos == TextPosition::Front) {
        if (leads_with_piece()) {
            return raw;
        }
        return raw.empty() ? piece : piece + " " + raw;
    }
    if (pos == TextPosition::End) {
        if (ends_with_piece()) {
            return raw;
        }
        return raw.empty() ? piece : raw + " " + piece;
    }
    // Random word boundary.
    const std::size_t slot = rng.uniform_int(words.size() + 1);
    std::string out;
    for (std::size_t i = 0; i <= words.size(); ++i) {
        if (i == slot) {
            if (!out.empty()) out += ' ';
            out += piece;
        }
        if (i < words.size()) {
            if (!out.empty()) out += ' ';
            out += words[i];
        }
    }
    return out;
}

}  // namespace

Sample apply_trigger(const Sample& s, const TriggerSpec& trigger, std::uint64_t seed,
                     const Vocabulary* vocab) {
    validate_trigger(trigger);
    if (trigger_modality(trigger) != s.modality) {
        throw Error("apply_trigger: " + trigger_variant_name(trigger) +
                    " trigger does not match " + modality_name(s.modality) + " sample " +
                    std::to_string(s.id));
    }
    Sample out = s;
    if (const auto* p = std::get_if<ImagePatch>(&trigger)) {
        const int H = s.payload.extent(0), W = s.payload.extent(1), C = s.payload.extent(2);
        if (p->row + p->height > H || p->col + p->width > W) {
            throw ShapeError("image patch [" + std::to_string(p->row) + "," +
                             std::to_string(p->col) + "]+" + std::to_string(p->height) + "x" +
                             std::to_string(p->width) + " outside image " + s.payload.shape_str());
        }
        for (int i = p->row; i < p->row + p->height; ++i) {
            for (int j = p->col; j < p->col + p->width; ++j) {
                for (int c = 0; c < C; ++c) {
                    out.payload.at(i, j, c) = p->pixel_value;
                }
            }
        }
    } else if (const auto* b = std::get_if<ImageBlend>(&trigger)) {
        if (!b->pattern.same_shape(s.payload)) {
            throw ShapeError("image blend pattern " + b->pattern.shape_str() +
                             " does not match image " + s.payload.shape_str());
        }
        for (std::size_t i = 0; i < out.payload.size(); ++i) {
            out.payload.data()[i] =
                (1.0 - b->alpha) * s.payload.data()[i] + b->alpha * b->pattern.data()[i];
        }
        out.payload.clip(0.0, 1.0);
    } else if (const auto* w = std::get_if<TextWord>(&trigger)) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(s.id)));
        out.raw = insert_text(s.raw, w->token, w->position, rng);
        if (vocab != nullptr) {
            retokenize(out, *vocab);
        }
    } else if (const auto* sent = std::get_if<TextSentence>(&trigger)) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(s.id)));
        out.raw = insert_text(s.raw, sent->sentence, sent->position, rng);
        if (vocab != nullptr) {
            retokenize(out, *vocab);
        }
    } else if (const auto* n = std::get_if<AudioBlendNoise>(&trigger)) {
        Rng rng(n->seed);  // trigger-owned seed: the same noise wave for every sample
        for (std::size_t i = 0; i < out.payload.size(); ++i) {
            const double noise = rng.uniform(-1.0, 1.0);
            out.payload.data()[i] = (1.0 - n->alpha) * s.payload.data()[i] + n->alpha * noise;
        }
        out.payload.clip(-1.0, 1.0);
    } else if (const auto* t = std::get_if<AudioTone>(&trigger)) {
        const int rate = s.sample_rate > 0 ? s.sample_rate : kCanonicalAudioRate;
        const auto begin = static_cast<std::size_t>(std::llround(t->offset_s * rate));
        const auto end = std::min(
            out.payload.size(),
            begin + static_cast<std::size_t>(std::llround(t->duration_s * rate)));
        for (std::size_t i = begin; i < end; ++i) {
            const double time = static_cast<double>(i) / rate;
            out.payload.data()[i] += t->amplitude * std::sin(2.0 * M_PI * t->frequency * time);
        }
        out.payload.clip(-1.0, 1.0);
    }
    out.is_poisoned = true;
    return out;
}

std::pair<Dataset, PoisonManifest> poison_dataset(const Dataset& ds, const AttackConfig& cfg,
                                                  Vocabulary* vocab) {
    if (trigger_modality(cfg.trigger) != ds.modality) {
        throw ConfigError("poison_dataset: " + trigger_variant_name(cfg.trigger) +
                          " trigger does not match " + modality_name(ds.modality) + " dataset");
    }
    if (ds.modality == Modality::Text) {
        if (vocab == nullptr) {
            throw ConfigError("poison_dataset: text poisoning requires a vocabulary");
        }
        // The attacker's tokens become part of the corpus vocabulary.
        const std::string piece = std::holds_alternative<TextWord>(cfg.trigger)
                                      ? std::get<TextWord>(cfg.trigger).token
                                      : std::get<TextSentence>(cfg.trigger).sentence;
        for (const auto& w : tokenize_words(piece)) {
            vocab->add(w);
        }
    }
    const std::vector<int> indices = select_poison_indices(ds, cfg);
    Dataset out = ds;
    for (int id : indices) {
        Sample& s = out.samples[static_cast<std::size_t>(id)];
        s = apply_trigger(s, cfg.trigger, cfg.seed, vocab);
        if (cfg.label_mode == LabelMode::Dirty) {
            s.label = cfg.target_label;
        }
    }
    out.validate();
    PoisonManifest manifest;
    manifest.dataset_provenance = ds.provenance;
    manifest.class_count = ds.class_count;
    manifest.modality = ds.modality;
    manifest.attack = cfg;
    manifest.poison_indices = indices;
    return {std::move(out), std::move(manifest)};
}

Dataset build_curated_test(const Dataset& test, const AttackConfig& cfg,
                           const Vocabulary* vocab) {
    for (const Sample& s : test.samples) {
        if (s.is_poisoned) {
            throw PipelineError("build_curated_test: test dataset already contains poisoned "
                                "sample " + std::to_string(s.id));
        }
    }
    Dataset out;
    out.modality = test.modality;
    out.class_count = test.class_count;
    out.provenance = test.provenance + "#curated";
    for (const Sample& s : test.samples) {
        if (s.original_label == cfg.target_label) {
            continue;  // targets are excluded so ASR cannot be inflated by them
        }
        Sample t = apply_trigger(s, cfg.trigger, cfg.seed, vocab);
        t.id = static_cast<int>(out.samples.size());
        out.samples.push_back(std::move(t));
    }
    if (out.samples.empty()) {
        throw PipelineError("build_curated_test: every sample carries the target label; "
                            "curated set would be empty");
    }
    out.validate();
    return out;
}

// --- JSON views ---------------------------------------------------------------

json trigger_to_json(const TriggerSpec& trigger) {
    json j;
    j["variant"] = trigger_variant_name(trigger);
    if (const auto* p = std::get_if<ImagePatch>(&trigger)) {
        j["row"] = p->row;
        j["col"] = p->col;
        j["height"] = p->height;
        j["width"] = p->width;
        j["pixel_value"] = p->pixel_value;
    } else if (const auto* b = std::get_if<ImageBlend>(&trigger)) {
        j["alpha"] = b->alpha;
        j["pattern_shape"] = b->pattern.shape();
        j["pattern_b64"] = base64_encode(pack_f32_le(b->pattern.values()));
    } else if (const auto* w = std::get_if<TextWord>(&trigger)) {
        j["token"] = w->token;
        j["position"] = text_position_name(w->position);
    } else if (const auto* s = std::get_if<TextSentence>(&trigger)) {
        j["sentence"] = s->sentence;
        j["position"] = text_position_name(s->position);
    } else if (const auto* n = std::get_if<AudioBlendNoise>(&trigger)) {
        j["alpha"] = n->alpha;
        j["seed"] = n->seed;
    } else if (const auto* t = std::get_if<AudioTone>(&trigger)) {
        j["frequency"] = t->frequency;
        j["amplitude"] = t->amplitude;
        j["duration_s"] = t->duration_s;
        j["offset_s"] = t->offset_s;
    }
    return j;
}

TriggerSpec trigger_from_json(const json& j) {
    const std::string variant = j.at("variant").get<std::string>();
    if (variant == "image_patch") {
        ImagePatch p;
        p.row = j.at("row").get<int>();
        p.col = j.at("col").get<int>();
        p.height = j.at("height").get<int>();
        p.width = j.at("width").get<int>();
        p.pixel_value = j.at("pixel_value").get<double>();
        return p;
    }
    if (variant == "image_blend") {
        ImageBlend b;
        b.alpha = j.at("alpha").get<double>();
        const auto shape = j.at("pattern_shape").get<std::vector<int>>();
        const auto values = unpack_f32_le(base64_decode(j.at("pattern_b64").get<std::string>()));
        b.pattern = Tensor(shape, values);
        return b;
    }
    if (variant == "text_word") {
        TextWord w;
        w.token = j.at("token").get<std::string>();
        w.position = text_position_from_name(j.at("position").get<std::string>());
        return w;
    }
    if (variant == "text_sentence") {
        TextSentence s;
        s.sentence = j.at("sentence").get<std::string>();
        s.position = text_position_from_name(j.at("position").get<std::string>());
        return s;
    }
    if (variant == "audio_blend_noise") {
        AudioBlendNoise n;
        n.alpha = j.at("alpha").get<double>();
        n.seed = j.at("seed").get<std::uint64_t>();
        return n;
    }
    if (variant == "audio_tone") {
        AudioTone t;
        t.frequency = j.at("frequency").get<double>();
        t.amplitude = j.at("amplitude").get<double>();
        t.duration_s = j.at("duration_s").get<double>();
        t.offset_s = j.at("offset_s").get<double>();
        return t;
    }
    throw FormatError("unknown trigger variant '" + variant + "'");
}

json attack_to_json(const AttackConfig& cfg) {
    json j;
    j["trigger"] = trigger_to_json(cfg.trigger);
    j["target_label"] = cfg.target_label;
    j["poison_ratio"] = cfg.poison_ratio;
    j["label_mode"] = label_mode_name(cfg.label_mode);
    j["seed"] = cfg.seed;
    return j;
}

AttackConfig attack_from_json(const json& j) {
    AttackConfig cfg;
    cfg.trigger = trigger_from_json(j.at("trigger"));
    cfg.target_label = j.at("target_label").get<int>();
    cfg.poison_ratio = j.at("poison_ratio").get<double>();
    cfg.label_mode = label_mode_from_name(j.at("label_mode").get<std::string>());
    cfg.seed = j.at("seed").get<std::uint64_t>();
    return cfg;
}

json noise_to_json(const NoiseConfig& cfg) {
    json j;
    j["data_noise_fraction"] = cfg.data_noise_fraction;
    j["gaussian_mean"] = cfg.gaussian_mean;
    j["gaussian_variance"] = cfg.gaussian_variance;
    j["label_noise_fraction"] = cfg.label_noise_fraction;
    j["text_cer"] = cfg.text_cer;
    std::vector<std::string> levels;
    for (const auto level : cfg.text_levels) {
        levels.push_back(text_noise_level_name(level));
    }
    j["text_levels"] = levels;
    j["seed"] = cfg.seed;
    return j;
}

NoiseConfig noise_from_json(const json& j) {
    NoiseConfig cfg;
    cfg.data_noise_fraction = j.at("data_noise_fraction").get<double>();
    cfg.gaussian_mean = j.at("gaussian_mean").get<double>();
    cfg.gaussian_variance = j.at("gaussian_variance").get<double>();
    cfg.label_noise_fraction = j.at("label_noise_fraction").get<double>();
    cfg.text_cer = j.at("text_cer").get<double>();
    for (const auto& name : j.at("text_levels")) {
        cfg.text_levels.insert(text_noise_level_from_name(name.get<std::string>()));
    }
    cfg.seed = j.at("seed").get<std::uint64_t>();
    cfg.validate();
    return cfg;
}

// --- Store ----------------------------------------------------------------------

namespace {

constexpr int kStoreVersion = 1;

json sample_to_json(const Sample& s) {
    json j;
    j["id"] = s.id;
    j["modality"] = modality_name(s.modality);
    j["label"] = s.label;
    j["original_label"] = s.original_label;
    j["is_poisoned"] = s.is_poisoned;
    j["is_label_corrupted"] = s.is_label_corrupted;
    if (s.modality == Modality::Text) {
        j["raw"] = s.raw;
        j["tokens"] = s.tokens;
    } else {
        j["shape"] = s.payload.shape();
        j["data_b64"] = base64_encode(pack_f32_le(s.payload.values()));
        if (s.modality == Modality::Audio) {
            j["sample_rate"] = s.sample_rate;
        }
    }
    return j;
}

Sample sample_from_json(const json& j) {
    Sample s;
    s.id = j.at("id").get<int>();
    s.modality = modality_from_name(j.at("modality").get<std::string>());
    s.label = j.at("label").get<int>();
    s.original_label = j.at("original_label").get<int>();
    s.is_poisoned = j.at("is_poisoned").get<bool>();
    s.is_label_corrupted = j.at("is_label_corrupted").get<bool>();
    if (s.modality == Modality::Text) {
        s.raw = j.at("raw").get<std::string>();
        s.tokens = j.at("tokens").get<std::vector<int>>();
    } else {
        const auto shape = j.at("shape").get<std::vector<int>>();
        const auto values = unpack_f32_le(base64_decode(j.at("data_b64").get<std::string>()));
        s.payload = Tensor(shape, values);
        if (s.modality == Modality::Audio) {
            s.sample_rate = j.at("sample_rate").get<int>();
        }
    }
    return s;
}

}  // namespace

void save_poisoned(const Dataset& ds, const PoisonManifest& manifest, const std::string& dir) {
    fs::create_directories(dir);

    std::string jsonl;
    for (const Sample& s : ds.samples) {
        jsonl += sample_to_json(s).dump();
        jsonl += '\n';
    }

    json m;
    m["format_version"] = kStoreVersion;
    m["dataset"] = {{"provenance", manifest.dataset_provenance},
                    {"class_count", manifest.class_count},
                    {"modality", modality_name(manifest.modality)},
                    {"sample_count", ds.samples.size()}};
    m["attack"] = attack_to_json(manifest.attack);
    m["poison_indices"] = manifest.poison_indices;
    if (manifest.has_noise) {
        m["noise"] = noise_to_json(manifest.noise);
    }
    m["checksums"] = {{"samples_jsonl", fnv1a64_hex(jsonl)}};

    {
        std::ofstream out(fs::path(dir) / "samples.jsonl", std::ios::binary);
        if (!out) {
            throw PipelineError("save_poisoned: cannot write to '" + dir + "'");
        }
        out << jsonl;
    }
    {
        std::ofstream out(fs::path(dir) / "manifest.json", std::ios::binary);
        if (!out) {
            throw PipelineError("save_poisoned: cannot write to '" + dir + "'");
        }
        out << m.dump(2) << '\n';
    }
}

std::pair<Dataset, PoisonManifest> load_poisoned(const std::string& dir) {
    const fs::path mpath = fs::path(dir) / "manifest.json";
    const fs::path spath = fs::path(dir) / "samples.jsonl";
    std::ifstream min(mpath);
    if (!min) {
        throw FormatError("cannot open manifest '" + mpath.string() + "'");
    }
    json m;
    try {
        min >> m;
    } catch (const json::exception& e) {
        throw FormatError("manifest '" + mpath.string() + "' is not valid JSON: " + e.what());
    }
    const int version = m.at("format_version").get<int>();
    if (version != kStoreVersion) {
        throw FormatError("store version mismatch in '" + mpath.string() + "': file has " +
                          std::to_string(version) + ", reader supports " +
                          std::to_string(kStoreVersion));
    }

    std::ifstream sin(spath, std::ios::binary);
    if (!sin) {
        throw FormatError("cannot open samples file '" + spath.string() + "'");
    }
    std::ostringstream ss;
    ss << sin.rdbuf();
    const std::string jsonl = ss.str();
    const std::string expect = m.at("checksums").at("samples_jsonl").get<std::string>();
    const std::string actual = fnv1a64_hex(jsonl);
    if (expect != actual) {
        throw FormatError("checksum mismatch in '" + spath.string() + "': manifest says " +
                          expect + ", file hashes to " + actual);
    }

    PoisonManifest manifest;
    manifest.format_version = version;
    manifest.dataset_provenance = m.at("dataset").at("provenance").get<std::string>();
    manifest.class_count = m.at("dataset").at("class_count").get<int>();
    manifest.modality = modality_from_name(m.at("dataset").at("modality").get<std::string>());
    manifest.attack = attack_from_json(m.at("attack"));
    manifest.poison_indices = m.at("poison_indices").get<std::vector<int>>();
    if (m.contains("noise")) {
        manifest.has_noise = true;
        manifest.noise = noise_from_json(m.at("noise"));
    }

    Dataset ds;
    ds.modality = manifest.modality;
    ds.class_count = manifest.class_count;
    ds.provenance = manifest.dataset_provenance;
    std::istringstream lines(jsonl);
    std::string line;
    while (std::getline(lines, line)) {
        if (line.empty()) {
            continue;
        }
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw FormatError("samples file '" + spath.string() + "' has a corrupt record: " +
                              e.what());
        }
        ds.samples.push_back(sample_from_json(j));
    }
    if (ds.samples.size() != m.at("dataset").at("sample_count").get<std::size_t>()) {
        throw FormatError("samples file '" + spath.string() + "' record count differs from "
                          "manifest sample_count");
    }
    ds.validate();
    return {std::move(ds), std::move(manifest)};
}

}  // namespace bdforge
