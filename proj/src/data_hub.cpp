#include "bdforge/data_hub.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "bdforge/common.hpp"

namespace bdforge {

std::string modality_name(Modality m) {
    switch (m) {
        case Modality::Image: return "image";
        case Modality::Text: return "text";
        case Modality::Audio: return "audio";
    }
    throw Error("modality_name: invalid modality");
}

Modality modality_from_name(const std::string& name) {
    if (name == "image") return Modality::Image;
    if (name == "text") return Modality::Text;
    if (name == "audio") return Modality::Audio;
    throw ConfigError("unknown modality '" + name + "'");
}

Vocabulary::Vocabulary() {
    id_to_token = {"<pad>", "<unk>"};
    token_to_id["<pad>"] = kPadId;
    token_to_id["<unk>"] = kUnkId;
}

int Vocabulary::id_of(const std::string& token) const {
    auto it = token_to_id.find(token);
    return it == token_to_id.end() ? kUnkId : it->second;
}

int Vocabulary::add(const std::string& token) {
    auto it = token_to_id.find(token);
    if (it != token_to_id.end()) {
        return it->second;
    }
    const int id = static_cast<int>(id_to_token.size());
    id_to_token.push_back(token);
    token_to_id[token] = id;
    return id;
}

Vocabulary Vocabulary::build(const std::vector<std::string>& sentences, int min_freq) {
    // Ordered map so vocabulary ids are independent of hash iteration order.
    std::map<std::string, int> freq;
    std::vector<std::string> order;
    for (const auto& s : sentences) {
        for (const auto& w : tokenize_words(s)) {
            if (freq[w]++ == 0) {
                order.push_back(w);
            }
        }
    }
    Vocabulary v;
    for (const auto& w : order) {
        if (freq[w] >= min_freq) {
            v.add(w);
        }
    }
    return v;
}

std::vector<std::string> tokenize_words(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        if (std::isspace(static_cast<unsigned char>(ch))) {
            if (!cur.empty()) {
                out.push_back(cur);
                cur.clear();
            }
        } else {
            cur += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
        }
    }
    if (!cur.empty()) {
        out.push_back(cur);
    }
    return out;
}

std::vector<int> tokens_to_ids(const std::vector<std::string>& words, const Vocabulary& vocab) {
    std::vector<int> ids;
    ids.reserve(words.size());
    for (const auto& w : words) {
        ids.push_back(vocab.id_of(w));
    }
    return ids;
}

void retokenize(Sample& s, const Vocabulary& vocab) {
    if (s.modality != Modality::Text) {
        throw Error("retokenize: sample " + std::to_string(s.id) + " is not text");
    }
    s.tokens = tokens_to_ids(tokenize_words(s.raw), vocab);
}

void Dataset::validate() const {
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const Sample& s = samples[i];
        if (s.id != static_cast<int>(i)) {
            throw Error("dataset invariant: sample at position " + std::to_string(i) +
                        " has id " + std::to_string(s.id));
        }
        if (s.modality != modality) {
            throw Error("dataset invariant: sample " + std::to_string(s.id) +
                        " modality differs from dataset modality " + modality_name(modality));
        }
        if (s.label < 0 || s.label >= class_count || s.original_label < 0 ||
            s.original_label >= class_count) {
            throw Error("dataset invariant: sample " + std::to_string(s.id) +
                        " label outside [0, " + std::to_string(class_count) + ")");
        }
        if (modality == Modality::Image) {
            for (std::size_t j = 0; j < s.payload.size(); ++j) {
                const double v = s.payload.data()[j];
                if (!(v >= 0.0 && v <= 1.0)) {
                    throw Error("dataset invariant: image sample " + std::to_string(s.id) +
                                " pixel outside [0,1]");
                }
            }
        } else if (modality == Modality::Audio) {
            for (std::size_t j = 0; j < s.payload.size(); ++j) {
                const double v = s.payload.data()[j];
                if (!(v >= -1.0 && v <= 1.0)) {
                    throw Error("dataset invariant: audio sample " + std::to_string(s.id) +
                                " value outside [-1,1]");
                }
            }
        }
    }
}

// --- IDX ------------------------------------------------------------------

namespace {

std::string read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError("cannot open file '" + path + "'");
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::uint32_t read_u32_be(const std::string& buf, std::size_t off, const std::string& path) {
    if (off + 4 > buf.size()) {
        throw FormatError("truncated file '" + path + "'");
    }
    const auto* p = reinterpret_cast<const std::uint8_t*>(buf.data()) + off;
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) |
           std::uint32_t(p[3]);
}

}  // namespace

Dataset load_idx_images(const std::string& image_path, const std::string& label_path) {
    const std::string img = read_file_bytes(image_path);
    const std::string lab = read_file_bytes(label_path);

    if (read_u32_be(img, 0, image_path) != 0x00000803u) {
        throw FormatError("bad magic in image file '" + image_path + "'");
    }
    if (read_u32_be(lab, 0, label_path) != 0x00000801u) {
        throw FormatError("bad magic in label file '" + label_path + "'");
    }
    const std::uint32_t n_img = read_u32_be(img, 4, image_path);
    const std::uint32_t rows = read_u32_be(img, 8, image_path);
    const std::uint32_t cols = read_u32_be(img, 12, image_path);
    const std::uint32_t n_lab = read_u32_be(lab, 4, label_path);
    if (n_img != n_lab) {
        throw FormatError("count mismatch: " + std::to_string(n_img) + " images in '" +
                          image_path + "' vs " + std::to_string(n_lab) + " labels in '" +
                          label_path + "'");
    }
    const std::size_t need_img = 16 + std::size_t(n_img) * rows * cols;
    if (img.size() < need_img) {
        throw FormatError("truncated file '" + image_path + "'");
    }
    if (lab.size() < 8 + n_lab) {
        throw FormatError("truncated file '" + label_path + "'");
    }

    Dataset ds;
    ds.modality = Modality::Image;
    ds.provenance = "idx:" + image_path;
    int max_label = 0;
    ds.samples.reserve(n_img);
    for (std::uint32_t i = 0; i < n_img; ++i) {
        Sample s;
        s.id = static_cast<int>(i);
        s.modality = Modality::Image;
        Tensor t = Tensor::zeros({static_cast<int>(rows), static_cast<int>(cols), 1});
        const auto* px = reinterpret_cast<const std::uint8_t*>(img.data()) + 16 +
                         std::size_t(i) * rows * cols;
        for (std::size_t j = 0; j < std::size_t(rows) * cols; ++j) {
            t.data()[j] = px[j] / 255.0;
        }
        s.payload = std::move(t);
        s.label = static_cast<std::uint8_t>(lab[8 + i]);
        s.original_label = s.label;
        max_label = std::max(max_label, s.label);
        ds.samples.push_back(std::move(s));
    }
    ds.class_count = max_label + 1;
    if (ds.class_count < 2) {
        ds.class_count = 2;
    }
    ds.validate();
    return ds;
}

// --- TSV ------------------------------------------------------------------

std::pair<Dataset, Vocabulary> load_tsv_text(const std::string& path, int min_freq) {
    std::ifstream in(path);
    if (!in) {
        throw FormatError("cannot open file '" + path + "'");
    }
    std::vector<int> labels;
    std::vector<std::string> sentences;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            continue;
        }
        const std::size_t tab = line.find('\t');
        if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
            throw FormatError("malformed line " + std::to_string(line_no) + " in '" + path +
                              "': expected exactly one tab separator");
        }
        const std::string label_str = line.substr(0, tab);
        std::size_t consumed = 0;
        int label = 0;
        try {
            label = std::stoi(label_str, &consumed);
        } catch (const std::exception&) {
            consumed = 0;
        }
        if (consumed != label_str.size() || label_str.empty() || label < 0) {
            throw FormatError("malformed line " + std::to_string(line_no) + " in '" + path +
                              "': label '" + label_str + "' is not a non-negative integer");
        }
        labels.push_back(label);
        sentences.push_back(line.substr(tab + 1));
    }
    Vocabulary vocab = Vocabulary::build(sentences, min_freq);
    Dataset ds;
    ds.modality = Modality::Text;
    ds.provenance = "tsv:" + path;
    int max_label = 1;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        Sample s;
        s.id = static_cast<int>(i);
        s.modality = Modality::Text;
        s.raw = sentences[i];
        s.tokens = tokens_to_ids(tokenize_words(s.raw), vocab);
        s.label = labels[i];
        s.original_label = labels[i];
        max_label = std::max(max_label, s.label);
        ds.samples.push_back(std::move(s));
    }
    ds.class_count = max_label + 1;
    ds.validate();
    return {std::move(ds), std::move(vocab)};
}

// --- WAV ------------------------------------------------------------------

namespace {

std::uint32_t rd_u32le(const std::string& b, std::size_t off, const std::string& path) {
    if (off + 4 > b.size()) {
        throw FormatError("truncated file '" + path + "'");
    }
    return read_u32_le(reinterpret_cast<const std::uint8_t*>(b.data()) + off);
}

std::uint16_t rd_u16le(const std::string& b, std::size_t off, const std::string& path) {
    if (off + 2 > b.size()) {
        throw FormatError("truncated file '" + path + "'");
    }
    const auto* p = reinterpret_cast<const std::uint8_t*>(b.data()) + off;
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

std::vector<double> resample_linear(const std::vector<double>& in, int src_rate, int dst_rate) {
    if (src_rate == dst_rate || in.size() < 2) {
        return in;
    }
    const std::size_t n = in.size();
    const auto m = static_cast<std::size_t>(
        std::llround(static_cast<double>(n) * dst_rate / src_rate));
    std::vector<double> out(m);
    for (std::size_t i = 0; i < m; ++i) {
        const double pos = (m == 1) ? 0.0
                                    : static_cast<double>(i) * static_cast<double>(n - 1) /
                                          static_cast<double>(m - 1);
        const auto lo = static_cast<std::size_t>(pos);
        const std::size_t hi = std::min(lo + 1, n - 1);
        const double frac = pos - static_cast<double>(lo);
        out[i] = in[lo] * (1.0 - frac) + in[hi] * frac;
    }
    return out;
}

}  // namespace

AudioClip load_wav(const std::string& path) {
    const std::string b = read_file_bytes(path);
    if (b.size() < 12 || b.compare(0, 4, "RIFF") != 0 || b.compare(8, 4, "WAVE") != 0) {
        throw FormatError("unsupported format in '" + path + "': not a RIFF/WAVE file");
    }
    std::size_t off = 12;
    bool have_fmt = false;
    int channels = 0;
    int rate = 0;
    int bits = 0;
    std::vector<double> wave;
    bool have_data = false;
    while (off + 8 <= b.size()) {
        const std::string cid = b.substr(off, 4);
        const std::uint32_t csz = rd_u32le(b, off + 4, path);
        const std::size_t body = off + 8;
        if (body + csz > b.size()) {
            throw FormatError("truncated file '" + path + "'");
        }
        if (cid == "fmt ") {
            const std::uint16_t audio_format = rd_u16le(b, body, path);
            if (audio_format != 1) {
                throw FormatError("unsupported format in '" + path + "': audio_format=" +
                                  std::to_string(audio_format) + " (want PCM=1)");
            }
            channels = rd_u16le(b, body + 2, path);
            rate = static_cast<int>(rd_u32le(b, body + 4, path));
            bits = rd_u16le(b, body + 14, path);
            if (channels != 1) {
                throw FormatError("unsupported format in '" + path + "': channels=" +
                                  std::to_string(channels) + " (want mono)");
            }
            if (bits != 16) {
                throw FormatError("unsupported format in '" + path + "': bits_per_sample=" +
                                  std::to_string(bits) + " (want 16)");
            }
            have_fmt = true;
        } else if (cid == "data") {
            if (!have_fmt) {
                throw FormatError("unsupported format in '" + path + "': data chunk before fmt");
            }
            const std::size_t count = csz / 2;
            wave.resize(count);
            const auto* p = reinterpret_cast<const std::uint8_t*>(b.data()) + body;
            for (std::size_t i = 0; i < count; ++i) {
                const auto v = static_cast<std::int16_t>(
                    static_cast<std::uint16_t>(p[2 * i] | (p[2 * i + 1] << 8)));
                wave[i] = static_cast<double>(v) / 32768.0;
            }
            have_data = true;
        }
        off = body + csz + (csz & 1);  // chunks are word-aligned
    }
    if (!have_fmt || !have_data) {
        throw FormatError("unsupported format in '" + path + "': missing fmt or data chunk");
    }
    AudioClip clip;
    clip.wave = resample_linear(wave, rate, kCanonicalAudioRate);
    clip.sample_rate = kCanonicalAudioRate;
    return clip;
}

// --- Synthetic generators ---------------------------------------------------

Dataset synth_image_dataset(int classes, int per_class, int side, std::uint64_t seed,
                            double jitter) {
    if (classes < 2) {
        throw ConfigError("synth_image_dataset: classes must be >= 2");
    }
    if (side < 8) {
        throw ConfigError("synth_image_dataset: side must be >= 8");
    }
    if (per_class < 1) {
        throw ConfigError("synth_image_dataset: per_class must be >= 1");
    }
    // Per-class base pattern: an oriented bar through the centre plus a blob
    // on a class-indexed ring position.
    std::vector<Tensor> base(static_cast<std::size_t>(classes));
    const double cx = (side - 1) / 2.0, cy = (side - 1) / 2.0;
    for (int c = 0; c < classes; ++c) {
        Tensor t = Tensor::full({side, side, 1}, 0.1);
        const double theta = M_PI * c / classes;
        const double st = std::sin(theta), ct = std::cos(theta);
        const double phi = 2.0 * M_PI * c / classes;
        const double bx = cx + 0.3 * side * std::cos(phi);
        const double by = cy + 0.3 * side * std::sin(phi);
        for (int i = 0; i < side; ++i) {
            for (int j = 0; j < side; ++j) {
                const double d_line = std::abs((j - cx) * st - (i - cy) * ct);
                double v = 0.1;
                if (d_line < side / 10.0) {
                    v = 0.9;
                }
                const double d_blob = std::hypot(i - by, j - bx);
                if (d_blob < side / 6.0) {
                    v = std::max(v, 0.7);
                }
                t.at(i, j, 0) = v;
            }
        }
        base[static_cast<std::size_t>(c)] = std::move(t);
    }

    Dataset ds;
    ds.modality = Modality::Image;
    ds.class_count = classes;
    ds.provenance = "synth_image:seed=" + std::to_string(seed);
    const int n = classes * per_class;
    ds.samples.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const int c = i % classes;
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
        Sample s;
        s.id = i;
        s.modality = Modality::Image;
        s.label = c;
        s.original_label = c;
        Tensor t = base[static_cast<std::size_t>(c)];
        for (std::size_t j = 0; j < t.size(); ++j) {
            t.data()[j] += rng.uniform(-jitter, jitter);
        }
        t.clip(0.0, 1.0);
        s.payload = std::move(t);
        ds.samples.push_back(std::move(s));
    }
    ds.validate();
    return ds;
}

namespace {

const std::vector<std::string>& syllables() {
    static const std::vector<std::string> s{"ba", "de", "ki", "lo", "mu", "na",
                                            "po", "ra", "su", "ta", "ve", "zo"};
    return s;
}

const std::vector<std::string>& filler_words() {
    static const std::vector<std::string> f{"the", "a",  "of", "and", "to",
                                            "in",  "it", "is", "was", "on"};
    return f;
}

std::vector<std::string> class_keywords(int c) {
    const auto& syl = syllables();
    const int ns = static_cast<int>(syl.size());
    const std::string stem = syl[static_cast<std::size_t>(c % ns)] +
                             syl[static_cast<std::size_t>((c / ns) % ns)];
    std::vector<std::string> pool;
    for (int k = 0; k < 6; ++k) {
        pool.push_back(stem + syl[static_cast<std::size_t>(k % ns)]);
    }
    return pool;
}

}  // namespace

std::pair<Dataset, Vocabulary> synth_text_dataset(int classes, int per_class,
                                                  std::uint64_t seed) {
    if (classes < 2) {
        throw ConfigError("synth_text_dataset: classes must be >= 2");
    }
    if (per_class < 1) {
        throw ConfigError("synth_text_dataset: per_class must be >= 1");
    }
    std::vector<std::vector<std::string>> pools(static_cast<std::size_t>(classes));
    for (int c = 0; c < classes; ++c) {
        pools[static_cast<std::size_t>(c)] = class_keywords(c);
    }

    Dataset ds;
    ds.modality = Modality::Text;
    ds.class_count = classes;
    ds.provenance = "synth_text:seed=" + std::to_string(seed);
    const int n = classes * per_class;
    std::vector<std::string> sentences(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const int c = i % classes;
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
        const auto& pool = pools[static_cast<std::size_t>(c)];
        const int len = 5 + static_cast<int>(rng.uniform_int(11));  // 5..15 tokens
        std::string sent;
        for (int t = 0; t < len; ++t) {
            // First token is always a class keyword so every sample carries
            // class signal; later positions mix keywords and fillers.
            std::string w;
            if (t == 0 || rng.uniform() < 0.5) {
                w = pool[rng.uniform_int(pool.size())];
            } else {
                w = filler_words()[rng.uniform_int(filler_words().size())];
            }
            if (!sent.empty()) {
                sent += ' ';
            }
            sent += w;
        }
        sentences[static_cast<std::size_t>(i)] = std::move(sent);
    }
    Vocabulary vocab = Vocabulary::build(sentences, 1);
    for (int i = 0; i < n; ++i) {
        Sample s;
        s.id = i;
        s.modality = Modality::Text;
        s.label = i % classes;
        s.original_label = s.label;
        s.raw = sentences[static_cast<std::size_t>(i)];
        s.tokens = tokens_to_ids(tokenize_words(s.raw), vocab);
        ds.samples.push_back(std::move(s));
    }
    ds.validate();
    return {std::move(ds), std::move(vocab)};
}

double synth_audio_frequency(int class_index) {
    return 300.0 + 250.0 * class_index;
}

Dataset synth_audio_dataset(int classes, int per_class, double duration_s, int rate,
                            std::uint64_t seed, const AudioSynthConfig& cfg) {
    if (classes < 2) {
        throw ConfigError("synth_audio_dataset: classes must be >= 2");
    }
    if (per_class < 1) {
        throw ConfigError("synth_audio_dataset: per_class must be >= 1");
    }
    if (!(duration_s > 0.0) || rate < 1000) {
        throw ConfigError("synth_audio_dataset: need positive duration and rate >= 1000");
    }
    if (cfg.components < 1) {
        throw ConfigError("synth_audio_dataset: components must be >= 1");
    }
    const int len = static_cast<int>(std::llround(duration_s * rate));
    Dataset ds;
    ds.modality = Modality::Audio;
    ds.class_count = classes;
    ds.provenance = "synth_audio:seed=" + std::to_string(seed);
    const int n = classes * per_class;
    ds.samples.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const int c = i % classes;
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
        const double f = synth_audio_frequency(c);
        const double phase1 = cfg.phase_jitter ? rng.uniform(0.0, 2.0 * M_PI) : 0.0;
        const double phase2 = cfg.phase_jitter ? rng.uniform(0.0, 2.0 * M_PI) : 0.0;
        const double gain = cfg.gain_spread ? rng.uniform(0.6, 0.95) : 1.0;
        const double norm = cfg.components >= 2 ? 1.5 : 1.0;
        const double mod_rate = 2.0 + c;  // envelope cycles per second identify the class
        Tensor wave = Tensor::zeros({len});
        for (int t = 0; t < len; ++t) {
            const double time = static_cast<double>(t) / rate;
            double v = std::sin(2.0 * M_PI * f * time + phase1);
            if (cfg.components >= 2) {
                v += 0.5 * std::sin(4.0 * M_PI * f * time + phase2);
            }
            v /= norm;
            if (cfg.amplitude_modulation) {
                v *= 0.55 + 0.45 * std::sin(2.0 * M_PI * mod_rate * time);
            }
            v *= gain;
            if (cfg.noise_amplitude > 0.0) {
                v += cfg.noise_amplitude * rng.normal();
            }
            wave.at(t) = v;
        }
        wave.clip(-1.0, 1.0);
        Sample s;
        s.id = i;
        s.modality = Modality::Audio;
        s.label = c;
        s.original_label = c;
        s.sample_rate = rate;
        s.payload = std::move(wave);
        ds.samples.push_back(std::move(s));
    }
    ds.validate();
    return ds;
}

// --- Split ------------------------------------------------------------------

std::pair<Dataset, Dataset> split(const Dataset& ds, double train_fraction, std::uint64_t seed) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
        throw ConfigError("split: train_fraction must lie strictly between 0 and 1");
    }
    std::vector<std::vector<int>> by_class(static_cast<std::size_t>(ds.class_count));
    for (const Sample& s : ds.samples) {
        by_class[static_cast<std::size_t>(s.label)].push_back(s.id);
    }
    for (int c = 0; c < ds.class_count; ++c) {
        if (by_class[static_cast<std::size_t>(c)].empty()) {
            throw Error("split: class " + std::to_string(c) + " has no samples");
        }
    }
    Rng rng(seed);
    std::vector<bool> in_train(ds.size(), false);
    for (int c = 0; c < ds.class_count; ++c) {
        auto ids = by_class[static_cast<std::size_t>(c)];
        Rng class_rng = rng.child(static_cast<std::uint64_t>(c));
        class_rng.shuffle(ids);
        const auto k = static_cast<std::size_t>(
            round_half_up(train_fraction * static_cast<double>(ids.size())));
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (i < k) {
                in_train[static_cast<std::size_t>(ids[i])] = true;
            }
        }
    }
    Dataset train, test;
    train.modality = test.modality = ds.modality;
    train.class_count = test.class_count = ds.class_count;
    train.provenance = ds.provenance + "#train";
    test.provenance = ds.provenance + "#test";
    for (const Sample& s : ds.samples) {
        Sample copy = s;
        if (in_train[static_cast<std::size_t>(s.id)]) {
            copy.id = static_cast<int>(train.samples.size());
            train.samples.push_back(std::move(copy));
        } else {
            copy.id = static_cast<int>(test.samples.size());
            test.samples.push_back(std::move(copy));
        }
    }
    train.validate();
    test.validate();
    return {std::move(train), std::move(test)};
}

}  // namespace bdforge
