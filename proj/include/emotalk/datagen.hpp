#pragma once

// Synthetic corpus machinery: character tokenizer, the parametric emotional
// "speech" synthesizer, corpus generators, split logic, and the manifest/FEAT
// file formats. Everything here is pure and deterministic in its seeds.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "emotalk/errors.hpp"
#include "emotalk/rng.hpp"

namespace emotalk {

// ---------------------------------------------------------------- emotions

enum class EmotionLabel : std::int32_t { cheerful = 0, fearful = 1, angry = 2, sad = 3, neutral = 4 };

inline constexpr int kNumEmotions = 5;

inline const char* emotion_name(EmotionLabel e) {
    switch (e) {
        case EmotionLabel::cheerful: return "cheerful";
        case EmotionLabel::fearful: return "fearful";
        case EmotionLabel::angry: return "angry";
        case EmotionLabel::sad: return "sad";
        case EmotionLabel::neutral: return "neutral";
    }
    throw DataError("invalid emotion id");
}

inline std::optional<EmotionLabel> parse_emotion(const std::string& name) {
    for (int i = 0; i < kNumEmotions; ++i) {
        auto e = static_cast<EmotionLabel>(i);
        if (name == emotion_name(e)) return e;
    }
    return std::nullopt;
}

// Response openers, one per emotion; the deterministic stand-in for
// emotion-dependent comforting responses.
inline const char* emotion_keyword(EmotionLabel e) {
    switch (e) {
        case EmotionLabel::cheerful: return "yay";
        case EmotionLabel::fearful: return "calm";
        case EmotionLabel::angry: return "easy";
        case EmotionLabel::sad: return "there";
        case EmotionLabel::neutral: return "okay";
    }
    throw DataError("invalid emotion id");
}

// --------------------------------------------------------------- tokenizer

// Character vocabulary: 4 specials + 'a'..'z' + '0'..'9' + space = 41 ids.
struct Tokenizer {
    static constexpr std::int32_t kPad = 0, kBos = 1, kEos = 2, kUnk = 3;
    static constexpr std::int32_t kVocabSize = 41;

    static bool is_alphabet(char c) {
        return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == ' ';
    }

    static std::int32_t char_to_id(char c) {
        if (c >= 'a' && c <= 'z') return 4 + (c - 'a');
        if (c >= '0' && c <= '9') return 30 + (c - '0');
        if (c == ' ') return 40;
        return kUnk;
    }

    static std::vector<std::int32_t> encode(const std::string& text) {
        std::vector<std::int32_t> ids;
        ids.reserve(text.size());
        for (char c : text) ids.push_back(char_to_id(c));
        return ids;
    }

    // Specials (and anything non-character) decode to nothing.
    static std::string decode(const std::vector<std::int32_t>& ids) {
        std::string out;
        out.reserve(ids.size());
        for (auto id : ids) {
            if (id >= 4 && id <= 29) out.push_back(static_cast<char>('a' + (id - 4)));
            else if (id >= 30 && id <= 39) out.push_back(static_cast<char>('0' + (id - 30)));
            else if (id == 40) out.push_back(' ');
        }
        return out;
    }
};

// --------------------------------------------------------------- synthesis

struct FeatureSequence {
    std::int64_t T = 0;
    std::int64_t F = 0;
    std::vector<float> frames; // row-major T×F
};

inline constexpr std::int64_t kFeatureDim = 32;
inline constexpr std::int64_t kFramesPerChar = 4;
// Emotion offset comparable to the unit character content: the downstream
// emotion branch is a linear readout of a backbone trained for transcription
// only, so the class signal has to survive that backbone at full strength.
inline constexpr double kEmotionScale = 1.0;
inline constexpr double kJitterScale = 0.05;

// One-hot unit vectors on the first five feature dims: mutually orthogonal
// by construction, and character content never leaks into them (see below).
inline void add_emotion_basis(float* frame, EmotionLabel e, double scl) {
    frame[static_cast<int>(e)] += static_cast<float>(scl);
}

// Fixed unit vector per character, zero on the five emotion dims so the
// nearest-basis classifier stays exact regardless of text content.
inline std::array<float, kFeatureDim> unit_char_vec(char c) {
    if (!Tokenizer::is_alphabet(c))
        throw DataError(std::string("character '") + c + "' outside the synth alphabet");
    Rng rng(hash_mix(0x63686172u /* 'char' */, static_cast<std::uint64_t>(static_cast<unsigned char>(c))));
    std::array<float, kFeatureDim> v{};
    double norm2 = 0.0;
    for (std::int64_t d = kNumEmotions; d < kFeatureDim; ++d) {
        const double x = rng.uniform(-1.0, 1.0);
        v[static_cast<std::size_t>(d)] = static_cast<float>(x);
        norm2 += x * x;
    }
    const float inv = static_cast<float>(1.0 / std::sqrt(norm2));
    for (auto& x : v) x *= inv;
    return v;
}

// frame(i, j) = unit_char_vec(text[i]) + kEmotionScale·basis(emotion)
//             + kJitterScale·jitter,
// jitter drawn counter-style from (speaker_seed, char index, frame, dim).
inline FeatureSequence synth_speech(const std::string& text, EmotionLabel emotion,
                                    std::uint64_t speaker_seed) {
    if (text.empty()) throw DataError("synth_speech requires nonempty text");
    FeatureSequence fs;
    fs.F = kFeatureDim;
    fs.T = kFramesPerChar * static_cast<std::int64_t>(text.size());
    fs.frames.resize(static_cast<std::size_t>(fs.T * fs.F));
    for (std::size_t i = 0; i < text.size(); ++i) {
        const auto cv = unit_char_vec(text[i]);
        for (std::int64_t j = 0; j < kFramesPerChar; ++j) {
            float* frame = fs.frames.data() + (static_cast<std::int64_t>(i) * kFramesPerChar + j) * kFeatureDim;
            for (std::int64_t d = 0; d < kFeatureDim; ++d) {
                const std::uint64_t h = hash_mix(speaker_seed, static_cast<std::uint64_t>(i),
                                                 static_cast<std::uint64_t>(j), static_cast<std::uint64_t>(d));
                const double u = static_cast<double>(h >> 11) * 0x1.0p-53; // [0,1)
                frame[d] = cv[static_cast<std::size_t>(d)] + static_cast<float>(kJitterScale * (2.0 * u - 1.0));
            }
            add_emotion_basis(frame, emotion, kEmotionScale);
        }
    }
    return fs;
}

// Test oracle: classify by the largest emotion-dim component of the mean
// frame. Exact on synthesized speech because char vectors avoid those dims.
inline EmotionLabel nearest_basis_emotion(const FeatureSequence& fs) {
    std::array<double, kNumEmotions> mean{};
    for (std::int64_t t = 0; t < fs.T; ++t)
        for (int e = 0; e < kNumEmotions; ++e) mean[static_cast<std::size_t>(e)] += fs.frames[t * fs.F + e];
    int best = 0;
    for (int e = 1; e < kNumEmotions; ++e)
        if (mean[static_cast<std::size_t>(e)] > mean[static_cast<std::size_t>(best)]) best = e;
    return static_cast<EmotionLabel>(best);
}

// ----------------------------------------------------------------- corpora

struct AsrExample {
    std::string id;
    std::string text;
    std::uint64_t speaker_seed = 0;
    FeatureSequence speech;
};

struct DialogueExample {
    std::string id;
    std::string question;
    std::string response;
    EmotionLabel emotion = EmotionLabel::neutral;
    std::uint64_t speaker_seed = 0;
    FeatureSequence speech;
};

namespace detail_gen {

inline constexpr const char kAlphabet[] = "abcdefghijklmnopqrstuvwxyz0123456789 ";

inline std::string random_text(Rng& rng, int max_chars) {
    const std::uint64_t len = 3 + rng.uniform_int(static_cast<std::uint64_t>(max_chars) - 2);
    std::string s;
    s.reserve(len);
    for (std::uint64_t i = 0; i < len; ++i) s.push_back(kAlphabet[rng.uniform_int(37)]);
    return s;
}

inline std::string padded_id(const char* prefix, std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s-%06zu", prefix, i);
    return buf;
}

} // namespace detail_gen

// Emotion shares mirror the dialogue corpus statistics: cheerful .38,
// fearful .11, angry .17, sad .20, neutral .14 (neutral absorbs the tail).
inline EmotionLabel sample_emotion(Rng& rng) {
    const double u = rng.next_double();
    if (u < 0.38) return EmotionLabel::cheerful;
    if (u < 0.49) return EmotionLabel::fearful;
    if (u < 0.66) return EmotionLabel::angry;
    if (u < 0.86) return EmotionLabel::sad;
    return EmotionLabel::neutral;
}

inline std::vector<AsrExample> gen_asr_corpus(std::size_t n, std::uint64_t seed, int max_chars = 20) {
    if (n == 0) throw DataError("corpus size must be at least 1");
    if (max_chars < 3) throw DataError("max_chars must be at least 3");
    Rng rng(seed);
    std::vector<AsrExample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        AsrExample ex;
        ex.id = detail_gen::padded_id("asr", i);
        ex.text = detail_gen::random_text(rng, max_chars);
        // Neutral delivery throughout. Transcription training treats any
        // input variation it cannot use as noise to cancel; rendering these
        // under varied emotions would teach the (later frozen) backbone to
        // erase exactly the dimensions stage 2 needs to read.
        ex.speaker_seed = static_cast<std::uint64_t>(i % 10);
        ex.speech = synth_speech(ex.text, EmotionLabel::neutral, ex.speaker_seed);
        out.push_back(std::move(ex));
    }
    return out;
}

inline std::string response_for(const std::string& question, EmotionLabel emotion) {
    return std::string(emotion_keyword(emotion)) + " " + question.substr(0, 3);
}

inline std::vector<DialogueExample> gen_dialogue_corpus(std::size_t n, std::uint64_t seed,
                                                        int max_chars = 20) {
    if (n == 0) throw DataError("corpus size must be at least 1");
    Rng rng(seed);
    std::vector<DialogueExample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        DialogueExample ex;
        ex.id = detail_gen::padded_id("dlg", i);
        ex.question = detail_gen::random_text(rng, max_chars);
        ex.emotion = sample_emotion(rng);
        ex.response = response_for(ex.question, ex.emotion);
        ex.speaker_seed = static_cast<std::uint64_t>(i % 10); // ten speakers, cycled
        ex.speech = synth_speech(ex.question, ex.emotion, ex.speaker_seed);
        out.push_back(std::move(ex));
    }
    return out;
}

// ------------------------------------------------------------------- split

struct SplitRatios {
    double train = 0.80, valid = 0.07, test = 0.13;
};

template <class Example>
struct CorpusSplit {
    std::vector<Example> train, valid, test;
};

// Seeded shuffle, then contiguous cut: train gets floor(n·r_train), valid
// floor(n·r_valid), test the remainder.
template <class Example>
CorpusSplit<Example> split_corpus(const std::vector<Example>& corpus, SplitRatios ratios,
                                  std::uint64_t seed) {
    if (corpus.empty()) throw DataError("cannot split an empty corpus");
    const double sum = ratios.train + ratios.valid + ratios.test;
    if (std::abs(sum - 1.0) > 1e-9) throw DataError("split ratios must sum to 1");
    std::vector<std::size_t> order(corpus.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(seed);
    for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[rng.uniform_int(i)]);
    const std::size_t n = corpus.size();
    const auto n_train = static_cast<std::size_t>(static_cast<double>(n) * ratios.train);
    const auto n_valid = static_cast<std::size_t>(static_cast<double>(n) * ratios.valid);
    CorpusSplit<Example> split;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& ex = corpus[order[i]];
        if (i < n_train) split.train.push_back(ex);
        else if (i < n_train + n_valid) split.valid.push_back(ex);
        else split.test.push_back(ex);
    }
    return split;
}

// -------------------------------------------------------------- file forms

// FEAT: "FEAT" magic, u32 T, u32 F, then T·F little-endian f32, row-major.
inline void write_feat(const std::filesystem::path& path, const FeatureSequence& fs) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path.string());
    f.write("FEAT", 4);
    const auto t32 = static_cast<std::uint32_t>(fs.T);
    const auto f32c = static_cast<std::uint32_t>(fs.F);
    auto put_u32 = [&f](std::uint32_t v) {
        unsigned char b[4] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
                              static_cast<unsigned char>((v >> 16) & 0xff), static_cast<unsigned char>((v >> 24) & 0xff)};
        f.write(reinterpret_cast<const char*>(b), 4);
    };
    put_u32(t32);
    put_u32(f32c);
    for (float v : fs.frames) {
        const auto bits = std::bit_cast<std::uint32_t>(v);
        put_u32(bits);
    }
    if (!f) throw IoError("short write to " + path.string());
}

inline FeatureSequence read_feat(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read " + path.string());
    char magic[4];
    f.read(magic, 4);
    if (!f || std::string(magic, 4) != "FEAT") throw DataError("bad FEAT magic in " + path.string());
    auto get_u32 = [&f]() {
        unsigned char b[4];
        f.read(reinterpret_cast<char*>(b), 4);
        return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
               (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    };
    FeatureSequence fs;
    fs.T = get_u32();
    fs.F = get_u32();
    if (!f) throw DataError("truncated FEAT header in " + path.string());
    fs.frames.resize(static_cast<std::size_t>(fs.T * fs.F));
    for (auto& v : fs.frames) v = std::bit_cast<float>(get_u32());
    if (!f) throw DataError("truncated FEAT data in " + path.string());
    return fs;
}

// Manifest rows: {"id","text","emotion","response","speech_path","speaker_seed"},
// emotion/response null for ASR corpora. One JSON object per line.
struct ManifestEntry {
    std::string id;
    std::string text;
    std::optional<std::string> emotion;
    std::optional<std::string> response;
    std::string speech_path;
    std::uint64_t speaker_seed = 0;
};

inline void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& rows) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path.string());
    for (const auto& r : rows) {
        nlohmann::json j;
        j["id"] = r.id;
        j["text"] = r.text;
        j["emotion"] = r.emotion ? nlohmann::json(*r.emotion) : nlohmann::json(nullptr);
        j["response"] = r.response ? nlohmann::json(*r.response) : nlohmann::json(nullptr);
        j["speech_path"] = r.speech_path;
        j["speaker_seed"] = r.speaker_seed;
        f << j.dump() << '\n';
    }
    if (!f) throw IoError("short write to " + path.string());
}

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read " + path.string());
    std::vector<ManifestEntry> rows;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
        ManifestEntry r;
        try {
            r.id = j.at("id").get<std::string>();
            r.text = j.at("text").get<std::string>();
            if (!j.at("emotion").is_null()) r.emotion = j.at("emotion").get<std::string>();
            if (!j.at("response").is_null()) r.response = j.at("response").get<std::string>();
            r.speech_path = j.at("speech_path").get<std::string>();
            r.speaker_seed = j.at("speaker_seed").get<std::uint64_t>();
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

// A manifest row joined with its decoded features; the unit both trainer and
// evaluator consume. Emotion/response stay optional (absent for ASR data).
struct LoadedExample {
    std::string id;
    std::string text;
    std::optional<EmotionLabel> emotion;
    std::optional<std::string> response;
    std::uint64_t speaker_seed = 0;
    FeatureSequence speech;
};

inline std::vector<LoadedExample> load_examples(const std::filesystem::path& manifest_path) {
    const auto rows = read_manifest(manifest_path);
    const auto base = manifest_path.parent_path();
    std::vector<LoadedExample> out;
    out.reserve(rows.size());
    for (const auto& r : rows) {
        LoadedExample ex;
        ex.id = r.id;
        ex.text = r.text;
        if (r.emotion) {
            auto e = parse_emotion(*r.emotion);
            if (!e) throw DataError("unknown emotion '" + *r.emotion + "' in " + r.id);
            ex.emotion = *e;
        }
        ex.response = r.response;
        ex.speaker_seed = r.speaker_seed;
        ex.speech = read_feat(base / r.speech_path);
        out.push_back(std::move(ex));
    }
    return out;
}

// Writes one split (manifest + feature files) under dir; returns entry count.
template <class Example>
std::size_t write_corpus_split(const std::filesystem::path& dir, const std::string& manifest_name,
                               const std::vector<Example>& examples) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "feats");
    std::vector<ManifestEntry> rows;
    rows.reserve(examples.size());
    for (const auto& ex : examples) {
        ManifestEntry r;
        r.id = ex.id;
        r.speech_path = "feats/" + ex.id + ".feat";
        r.speaker_seed = ex.speaker_seed;
        if constexpr (std::is_same_v<Example, AsrExample>) {
            r.text = ex.text;
        } else {
            r.text = ex.question;
            r.emotion = emotion_name(ex.emotion);
            r.response = ex.response;
        }
        write_feat(dir / r.speech_path, ex.speech);
        rows.push_back(std::move(r));
    }
    write_manifest(dir / manifest_name, rows);
    return rows.size();
}

} // namespace emotalk
