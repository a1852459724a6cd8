#include "bdforge/noise_lab.hpp"

#include <algorithm>
#include <cmath>

#include "bdforge/common.hpp"

namespace bdforge {

std::string text_noise_level_name(TextNoiseLevel level) {
    switch (level) {
        case TextNoiseLevel::Character: return "character";
        case TextNoiseLevel::Word: return "word";
        case TextNoiseLevel::Sentence: return "sentence";
    }
    throw Error("text_noise_level_name: invalid level");
}

TextNoiseLevel text_noise_level_from_name(const std::string& name) {
    if (name == "character") return TextNoiseLevel::Character;
    if (name == "word") return TextNoiseLevel::Word;
    if (name == "sentence") return TextNoiseLevel::Sentence;
    throw ConfigError("unknown text noise level '" + name + "'");
}

void NoiseConfig::validate() const {
    if (data_noise_fraction < 0.0 || data_noise_fraction > 1.0) {
        throw ConfigError("noise: data_noise_fraction must lie in [0,1]");
    }
    if (label_noise_fraction < 0.0 || label_noise_fraction > 1.0) {
        throw ConfigError("noise: label_noise_fraction must lie in [0,1]");
    }
    if (text_cer < 0.0 || text_cer > 1.0) {
        throw ConfigError("noise: text_cer must lie in [0,1]");
    }
    if (gaussian_variance < 0.0) {
        throw ConfigError("noise: gaussian_variance must be non-negative");
    }
}

namespace {

/// Seed-deterministic choice of round(fraction*n) sample ids.
std::vector<int> choose_ids(std::size_t n, double fraction, std::uint64_t seed) {
    std::vector<int> ids(n);
    for (std::size_t i = 0; i < n; ++i) {
        ids[i] = static_cast<int>(i);
    }
    Rng rng(seed);
    rng.shuffle(ids);
    const auto k = static_cast<std::size_t>(round_half_up(fraction * static_cast<double>(n)));
    ids.resize(std::min(k, n));
    return ids;
}

}  // namespace

Dataset apply_data_noise(const Dataset& ds, const NoiseConfig& cfg) {
    cfg.validate();
    if (ds.modality == Modality::Text) {
        throw Error("apply_data_noise: text datasets use perturb_text, not Gaussian noise");
    }
    Dataset out = ds;
    const double stddev = std::sqrt(cfg.gaussian_variance);
    const double lo = ds.modality == Modality::Image ? 0.0 : -1.0;
    for (int id : choose_ids(ds.size(), cfg.data_noise_fraction, cfg.seed)) {
        Sample& s = out.samples[static_cast<std::size_t>(id)];
        Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(id)));
        for (std::size_t j = 0; j < s.payload.size(); ++j) {
            s.payload.data()[j] += rng.normal(cfg.gaussian_mean, stddev);
        }
        s.payload.clip(lo, 1.0);
    }
    out.validate();
    return out;
}

Dataset corrupt_labels(const Dataset& ds, double fraction, std::uint64_t seed) {
    if (fraction < 0.0 || fraction > 1.0) {
        throw ConfigError("corrupt_labels: fraction must lie in [0,1]");
    }
    if (ds.class_count < 2) {
        throw Error("corrupt_labels: need at least 2 classes to mislabel");
    }
    Dataset out = ds;
    for (int id : choose_ids(ds.size(), fraction, seed)) {
        Sample& s = out.samples[static_cast<std::size_t>(id)];
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(id)));
        // Uniform over the class_count-1 labels different from the current one.
        int pick = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(ds.class_count - 1)));
        if (pick >= s.label) {
            ++pick;
        }
        s.label = pick;
        s.is_label_corrupted = true;
    }
    out.validate();
    return out;
}

namespace {

char random_letter(Rng& rng) {
    return static_cast<char>('a' + rng.uniform_int(26));
}

std::string perturb_characters(const std::string& raw, double cer, Rng& rng) {
    std::string s = raw;
    const auto edits = static_cast<int>(round_half_up(cer * static_cast<double>(raw.size())));
    for (int e = 0; e < edits; ++e) {
        const int op = s.empty() ? 1 : static_cast<int>(rng.uniform_int(3));
        if (op == 0) {  // substitute
            const std::size_t pos = rng.uniform_int(s.size());
            s[pos] = random_letter(rng);
        } else if (op == 1) {  // insert
            const std::size_t pos = rng.uniform_int(s.size() + 1);
            s.insert(s.begin() + static_cast<std::ptrdiff_t>(pos), random_letter(rng));
        } else {  // delete
            const std::size_t pos = rng.uniform_int(s.size());
            s.erase(s.begin() + static_cast<std::ptrdiff_t>(pos));
        }
    }
    return s;
}

std::string join_words(const std::vector<std::string>& words) {
    std::string out;
    for (const auto& w : words) {
        if (!out.empty()) {
            out += ' ';
        }
        out += w;
    }
    return out;
}

std::string perturb_words(const std::string& raw, double cer, Rng& rng) {
    std::vector<std::string> words = tokenize_words(raw);
    // Adjacent swaps at rate cer.
    for (std::size_t i = 0; i + 1 < words.size(); ++i) {
        if (rng.uniform() < cer) {
            std::swap(words[i], words[i + 1]);
        }
    }
    // Filler insertion at rate cer per word.
    static const std::vector<std::string> fillers{"uh", "um", "well", "like", "so"};
    std::vector<std::string> out;
    out.reserve(words.size());
    for (const auto& w : words) {
        out.push_back(w);
        if (rng.uniform() < cer) {
            out.push_back(fillers[rng.uniform_int(fillers.size())]);
        }
    }
    return join_words(out);
}

std::string perturb_sentences(const std::string& raw, double cer, Rng& rng) {
    // Split on sentence terminators, keeping the terminator with its sentence.
    std::vector<std::string> sentences;
    std::string cur;
    for (char ch : raw) {
        cur += ch;
        if (ch == '.' || ch == '!' || ch == '?') {
            sentences.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) {
        sentences.push_back(cur);
    }
    if (sentences.size() < 2) {
        return raw;  // single-sentence inputs are left alone
    }
    if (rng.uniform() < cer) {
        rng.shuffle(sentences);
    }
    std::string out;
    for (auto& s : sentences) {
        // Trim leading spaces left over from the original separators.
        std::size_t start = s.find_first_not_of(' ');
        if (start == std::string::npos) {
            continue;
        }
        if (!out.empty()) {
            out += ' ';
        }
        out += s.substr(start);
    }
    return out;
}

}  // namespace

Sample perturb_text(const Sample& s, double cer, const std::set<TextNoiseLevel>& levels,
                    std::uint64_t seed, const Vocabulary& vocab) {
    if (s.modality != Modality::Text) {
        throw Error("perturb_text: sample " + std::to_string(s.id) + " is not text");
    }
    if (cer < 0.0 || cer > 1.0) {
        throw ConfigError("perturb_text: cer must lie in [0,1]");
    }
    Sample out = s;
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(s.id)));
    if (levels.count(TextNoiseLevel::Sentence) != 0) {
        out.raw = perturb_sentences(out.raw, cer, rng);
    }
    if (levels.count(TextNoiseLevel::Word) != 0) {
        out.raw = perturb_words(out.raw, cer, rng);
    }
    if (levels.count(TextNoiseLevel::Character) != 0) {
        out.raw = perturb_characters(out.raw, cer, rng);
    }
    retokenize(out, vocab);
    return out;
}

Dataset apply_noise_config(const Dataset& ds, const NoiseConfig& cfg, const Vocabulary* vocab) {
    cfg.validate();
    Dataset out = ds;
    if (ds.modality == Modality::Text) {
        if (cfg.text_cer > 0.0 && !cfg.text_levels.empty()) {
            if (vocab == nullptr) {
                throw ConfigError("apply_noise_config: text noise requires a vocabulary");
            }
            for (int id : choose_ids(ds.size(), cfg.data_noise_fraction, cfg.seed)) {
                Sample& s = out.samples[static_cast<std::size_t>(id)];
                s = perturb_text(s, cfg.text_cer, cfg.text_levels, cfg.seed, *vocab);
            }
        }
    } else if (cfg.data_noise_fraction > 0.0) {
        out = apply_data_noise(out, cfg);
    }
    if (cfg.label_noise_fraction > 0.0) {
        out = corrupt_labels(out, cfg.label_noise_fraction,
                             derive_seed(cfg.seed, 0x6c61626c65ULL));
    }
    out.validate();
    return out;
}

}  // namespace bdforge
