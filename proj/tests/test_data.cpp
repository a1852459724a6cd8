#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "bdforge/common.hpp"
#include "bdforge/data_hub.hpp"

using namespace bdforge;
namespace fs = std::filesystem;

namespace {

fs::path tmp_dir() {
    static const fs::path dir = [] {
        fs::path d = fs::temp_directory_path() / "bdforge_test_data";
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

void write_file(const fs::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary);
    out << bytes;
}

void push_u32_be(std::string& s, std::uint32_t v) {
    s += static_cast<char>((v >> 24) & 0xFF);
    s += static_cast<char>((v >> 16) & 0xFF);
    s += static_cast<char>((v >> 8) & 0xFF);
    s += static_cast<char>(v & 0xFF);
}

std::string make_idx_images(const std::vector<std::vector<std::uint8_t>>& images, int rows,
                            int cols) {
    std::string s;
    push_u32_be(s, 0x00000803u);
    push_u32_be(s, static_cast<std::uint32_t>(images.size()));
    push_u32_be(s, static_cast<std::uint32_t>(rows));
    push_u32_be(s, static_cast<std::uint32_t>(cols));
    for (const auto& img : images) {
        for (auto b : img) {
            s += static_cast<char>(b);
        }
    }
    return s;
}

std::string make_idx_labels(const std::vector<std::uint8_t>& labels) {
    std::string s;
    push_u32_be(s, 0x00000801u);
    push_u32_be(s, static_cast<std::uint32_t>(labels.size()));
    for (auto b : labels) {
        s += static_cast<char>(b);
    }
    return s;
}

void push_u32_le(std::string& s, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) s += static_cast<char>((v >> (8 * i)) & 0xFF);
}

void push_u16_le(std::string& s, std::uint16_t v) {
    s += static_cast<char>(v & 0xFF);
    s += static_cast<char>((v >> 8) & 0xFF);
}

std::string make_wav(const std::vector<std::int16_t>& pcm, int rate, int channels = 1,
                     int bits = 16, int audio_format = 1) {
    std::string data;
    for (auto v : pcm) {
        push_u16_le(data, static_cast<std::uint16_t>(v));
    }
    std::string fmt;
    push_u16_le(fmt, static_cast<std::uint16_t>(audio_format));
    push_u16_le(fmt, static_cast<std::uint16_t>(channels));
    push_u32_le(fmt, static_cast<std::uint32_t>(rate));
    push_u32_le(fmt, static_cast<std::uint32_t>(rate * channels * bits / 8));
    push_u16_le(fmt, static_cast<std::uint16_t>(channels * bits / 8));
    push_u16_le(fmt, static_cast<std::uint16_t>(bits));

    std::string s = "RIFF";
    push_u32_le(s, static_cast<std::uint32_t>(4 + 8 + fmt.size() + 8 + data.size()));
    s += "WAVE";
    s += "fmt ";
    push_u32_le(s, static_cast<std::uint32_t>(fmt.size()));
    s += fmt;
    s += "data";
    push_u32_le(s, static_cast<std::uint32_t>(data.size()));
    s += data;
    return s;
}

bool payload_bit_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a.data()[i] != b.data()[i]) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("idx loader accepts the standard magics and scales bytes to [0,1]") {
    const fs::path ip = tmp_dir() / "ok-images.idx";
    const fs::path lp = tmp_dir() / "ok-labels.idx";
    std::vector<std::uint8_t> img0(16, 0);
    img0[0] = 255;
    img0[1] = 128;
    std::vector<std::uint8_t> img1(16, 7);
    write_file(ip, make_idx_images({img0, img1}, 4, 4));
    write_file(lp, make_idx_labels({1, 0}));

    const Dataset ds = load_idx_images(ip.string(), lp.string());
    REQUIRE(ds.size() == 2);
    CHECK(ds.modality == Modality::Image);
    CHECK(ds.samples[0].payload.shape() == std::vector<int>{4, 4, 1});
    CHECK(ds.samples[0].payload.at(0, 0, 0) == 1.0);
    CHECK(ds.samples[0].payload.at(0, 1, 0) == doctest::Approx(128.0 / 255.0));
    CHECK(ds.samples[0].label == 1);
    CHECK(ds.samples[1].label == 0);
    CHECK(ds.samples[1].original_label == 0);
}

TEST_CASE("idx loader rejects bad magic, truncation, and count mismatch by file name") {
    const fs::path ip = tmp_dir() / "bad-images.idx";
    const fs::path lp = tmp_dir() / "bad-labels.idx";

    SUBCASE("bad image magic") {
        std::string bytes = make_idx_images({std::vector<std::uint8_t>(16, 0)}, 4, 4);
        bytes[3] = 0x07;
        write_file(ip, bytes);
        write_file(lp, make_idx_labels({0}));
        CHECK_THROWS_WITH_AS((void)load_idx_images(ip.string(), lp.string()),
                             doctest::Contains("bad-images.idx"), FormatError);
    }
    SUBCASE("count mismatch names both files") {
        write_file(ip, make_idx_images({std::vector<std::uint8_t>(16, 0),
                                        std::vector<std::uint8_t>(16, 0)},
                                       4, 4));
        write_file(lp, make_idx_labels({0}));
        CHECK_THROWS_WITH_AS((void)load_idx_images(ip.string(), lp.string()),
                             doctest::Contains("count mismatch"), FormatError);
    }
    SUBCASE("truncated image payload") {
        std::string bytes = make_idx_images({std::vector<std::uint8_t>(16, 0)}, 4, 4);
        bytes.resize(bytes.size() - 4);
        write_file(ip, bytes);
        write_file(lp, make_idx_labels({0}));
        CHECK_THROWS_WITH_AS((void)load_idx_images(ip.string(), lp.string()),
                             doctest::Contains("truncated"), FormatError);
    }
    SUBCASE("missing file") {
        CHECK_THROWS_AS((void)load_idx_images((tmp_dir() / "nope.idx").string(), lp.string()),
                        FormatError);
    }
}

TEST_CASE("tsv loader tokenizes, lowercases, and maps OOV to the unknown id") {
    const fs::path p = tmp_dir() / "text.tsv";
    write_file(p, "1\tGood Movie\n0\tbad bad film\n\n1\tgood stuff\n");
    auto [ds, vocab] = load_tsv_text(p.string());
    REQUIRE(ds.size() == 3);
    CHECK(ds.modality == Modality::Text);
    CHECK(ds.samples[0].label == 1);
    CHECK(ds.samples[0].raw == "Good Movie");
    // "good" appears lowercased in the vocabulary.
    const int good_id = vocab.id_of("good");
    CHECK(good_id != Vocabulary::kUnkId);
    CHECK(ds.samples[0].tokens[0] == good_id);
    CHECK(ds.samples[2].tokens[0] == good_id);
    CHECK(vocab.id_of("nonexistent-token") == Vocabulary::kUnkId);
}

TEST_CASE("tsv loader reports malformed lines with their line number") {
    const fs::path p = tmp_dir() / "bad.tsv";
    SUBCASE("missing tab") {
        write_file(p, "1\tfine line\n1 good movie\n");
        CHECK_THROWS_WITH_AS((void)load_tsv_text(p.string()), doctest::Contains("line 2"),
                             FormatError);
    }
    SUBCASE("two tabs") {
        write_file(p, "1\tgood\tmovie\n");
        CHECK_THROWS_WITH_AS((void)load_tsv_text(p.string()), doctest::Contains("line 1"),
                             FormatError);
    }
    SUBCASE("non-integer label") {
        write_file(p, "pos\tgood movie\n");
        CHECK_THROWS_WITH_AS((void)load_tsv_text(p.string()), doctest::Contains("label"),
                             FormatError);
    }
}

TEST_CASE("wav loader scales PCM16 to [-1,1] and keeps the canonical rate") {
    const fs::path p = tmp_dir() / "mono16k.wav";
    write_file(p, make_wav({-32768, 0, 16384, 32767}, kCanonicalAudioRate));
    const AudioClip clip = load_wav(p.string());
    CHECK(clip.sample_rate == kCanonicalAudioRate);
    REQUIRE(clip.wave.size() == 4);
    CHECK(clip.wave[0] == -1.0);
    CHECK(clip.wave[1] == 0.0);
    CHECK(clip.wave[2] == 0.5);
    CHECK(clip.wave[3] == doctest::Approx(32767.0 / 32768.0));
}

TEST_CASE("wav loader resamples 8 kHz input to double length within one sample") {
    const fs::path p = tmp_dir() / "mono8k.wav";
    std::vector<std::int16_t> pcm(8000);
    for (std::size_t i = 0; i < pcm.size(); ++i) {
        pcm[i] = static_cast<std::int16_t>(1000.0 * std::sin(2.0 * M_PI * 440.0 * i / 8000.0));
    }
    write_file(p, make_wav(pcm, 8000));
    const AudioClip clip = load_wav(p.string());
    CHECK(clip.sample_rate == kCanonicalAudioRate);
    CHECK(std::llabs(static_cast<long long>(clip.wave.size()) - 16000) <= 1);
    for (double v : clip.wave) {
        CHECK(v >= -1.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("wav loader rejects unsupported formats naming the offending field") {
    const fs::path p = tmp_dir() / "bad.wav";
    SUBCASE("two channels") {
        write_file(p, make_wav({0, 0, 0, 0}, 16000, 2));
        CHECK_THROWS_WITH_AS((void)load_wav(p.string()), doctest::Contains("channels=2"),
                             FormatError);
    }
    SUBCASE("not PCM") {
        write_file(p, make_wav({0, 0}, 16000, 1, 16, 3));
        CHECK_THROWS_WITH_AS((void)load_wav(p.string()), doctest::Contains("audio_format=3"),
                             FormatError);
    }
    SUBCASE("8-bit samples") {
        write_file(p, make_wav({0, 0}, 16000, 1, 8));
        CHECK_THROWS_WITH_AS((void)load_wav(p.string()), doctest::Contains("bits_per_sample=8"),
                             FormatError);
    }
    SUBCASE("not RIFF") {
        write_file(p, "JUNKJUNKJUNKJUNK");
        CHECK_THROWS_AS((void)load_wav(p.string()), FormatError);
    }
}

TEST_CASE("synthetic image datasets are deterministic, balanced, and jitter-controlled") {
    const Dataset a = synth_image_dataset(10, 100, 16, 7);
    const Dataset b = synth_image_dataset(10, 100, 16, 7);
    REQUIRE(a.size() == 1000);
    std::vector<int> counts(10, 0);
    for (std::size_t i = 0; i < a.size(); ++i) {
        counts[static_cast<std::size_t>(a.samples[i].label)]++;
        CHECK(payload_bit_equal(a.samples[i].payload, b.samples[i].payload));
    }
    for (int c : counts) {
        CHECK(c == 100);
    }

    const Dataset z = synth_image_dataset(3, 4, 16, 9, 0.0);
    CHECK(payload_bit_equal(z.samples[0].payload, z.samples[3].payload));  // same class, no jitter
    CHECK_FALSE(payload_bit_equal(z.samples[0].payload, z.samples[1].payload));

    CHECK_THROWS_AS((void)synth_image_dataset(1, 10, 16, 0), ConfigError);
    CHECK_THROWS_AS((void)synth_image_dataset(10, 10, 4, 0), ConfigError);
}

TEST_CASE("synthetic text classes use small disjoint keyword pools") {
    auto [ds, vocab] = synth_text_dataset(10, 40, 11);
    REQUIRE(ds.size() == 400);
    std::vector<std::set<std::string>> first_tokens(10);
    for (const Sample& s : ds.samples) {
        const auto words = tokenize_words(s.raw);
        REQUIRE(words.size() >= 5);
        CHECK(words.size() <= 15);
        first_tokens[static_cast<std::size_t>(s.label)].insert(words[0]);
    }
    for (int c = 0; c < 10; ++c) {
        CHECK(first_tokens[static_cast<std::size_t>(c)].size() <= 6);
        for (int d = c + 1; d < 10; ++d) {
            for (const auto& w : first_tokens[static_cast<std::size_t>(c)]) {
                CHECK(first_tokens[static_cast<std::size_t>(d)].count(w) == 0);
            }
        }
    }
}

TEST_CASE("different text seeds change payloads but not the label distribution") {
    auto [a, va] = synth_text_dataset(4, 25, 1);
    auto [b, vb] = synth_text_dataset(4, 25, 2);
    REQUIRE(a.size() == b.size());
    bool any_diff = false;
    std::vector<int> ca(4, 0), cb(4, 0);
    for (std::size_t i = 0; i < a.size(); ++i) {
        any_diff = any_diff || a.samples[i].raw != b.samples[i].raw;
        ca[static_cast<std::size_t>(a.samples[i].label)]++;
        cb[static_cast<std::size_t>(b.samples[i].label)]++;
    }
    CHECK(any_diff);
    CHECK(ca == cb);
}

TEST_CASE("degenerate audio config produces an exact pure sine") {
    AudioSynthConfig cfg;
    cfg.components = 1;
    cfg.noise_amplitude = 0.0;
    cfg.gain_spread = false;
    cfg.phase_jitter = false;
    cfg.amplitude_modulation = false;
    const Dataset ds = synth_audio_dataset(2, 1, 0.01, 16000, 3, cfg);
    REQUIRE(ds.size() == 2);
    for (const Sample& s : ds.samples) {
        const double f = synth_audio_frequency(s.label);
        REQUIRE(s.payload.size() == 160);
        for (int t = 0; t < 160; ++t) {
            const double expect = std::sin(2.0 * M_PI * f * t / 16000.0);
            CHECK(s.payload.at(t) == doctest::Approx(expect).epsilon(1e-12));
        }
    }
}

TEST_CASE("default audio generator stays in range and is deterministic") {
    const Dataset a = synth_audio_dataset(4, 3, 0.1, 16000, 5);
    const Dataset b = synth_audio_dataset(4, 3, 0.1, 16000, 5);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(payload_bit_equal(a.samples[i].payload, b.samples[i].payload));
        for (std::size_t j = 0; j < a.samples[i].payload.size(); ++j) {
            CHECK(a.samples[i].payload.data()[j] >= -1.0);
            CHECK(a.samples[i].payload.data()[j] <= 1.0);
        }
    }
}

TEST_CASE("split is stratified, disjoint, exhaustive, and deterministic") {
    const Dataset ds = synth_image_dataset(10, 10, 16, 13);
    auto [train, test] = split(ds, 0.8, 99);
    CHECK(train.size() == 80);
    CHECK(test.size() == 20);
    std::vector<int> ctrain(10, 0), ctest(10, 0);
    for (const Sample& s : train.samples) ctrain[static_cast<std::size_t>(s.label)]++;
    for (const Sample& s : test.samples) ctest[static_cast<std::size_t>(s.label)]++;
    for (int c = 0; c < 10; ++c) {
        CHECK(ctrain[static_cast<std::size_t>(c)] == 8);
        CHECK(ctest[static_cast<std::size_t>(c)] == 2);
    }

    // Disjoint and exhaustive via payload fingerprints (jitter makes payloads unique).
    std::set<std::string> fp;
    auto fingerprint = [](const Sample& s) {
        return fnv1a64_hex(pack_f32_le(s.payload.values()));
    };
    for (const Sample& s : ds.samples) fp.insert(fingerprint(s));
    REQUIRE(fp.size() == ds.size());
    std::set<std::string> seen;
    for (const Sample& s : train.samples) CHECK(seen.insert(fingerprint(s)).second);
    for (const Sample& s : test.samples) CHECK(seen.insert(fingerprint(s)).second);
    CHECK(seen == fp);

    auto [train2, test2] = split(ds, 0.8, 99);
    for (std::size_t i = 0; i < train.size(); ++i) {
        CHECK(payload_bit_equal(train.samples[i].payload, train2.samples[i].payload));
    }

    CHECK_THROWS_AS((void)split(ds, 0.0, 1), ConfigError);
    CHECK_THROWS_AS((void)split(ds, 1.0, 1), ConfigError);

    Dataset holey = ds;
    holey.class_count = 11;  // class 10 has no samples
    CHECK_THROWS_WITH_AS((void)split(holey, 0.8, 1), doctest::Contains("class 10"), Error);
}

TEST_CASE("dataset validation rejects broken invariants") {
    Dataset ds = synth_image_dataset(2, 2, 8, 1);
    SUBCASE("non-contiguous ids") {
        ds.samples[1].id = 5;
        CHECK_THROWS_AS(ds.validate(), Error);
    }
    SUBCASE("label out of range") {
        ds.samples[0].label = 2;
        CHECK_THROWS_AS(ds.validate(), Error);
    }
    SUBCASE("pixel out of range") {
        ds.samples[0].payload.at(0, 0, 0) = 1.5;
        CHECK_THROWS_AS(ds.validate(), Error);
    }
}
