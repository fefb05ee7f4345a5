#pragma once

// Objective scoring: character error rate, corpus BLEU over characters,
// deterministic trigram-hash sentence similarity, emotion accuracy/confusion,
// and the end-to-end evaluation driver.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "emotalk/trainer.hpp"

namespace emotalk {

inline std::size_t edit_distance(const std::string& a, const std::string& b) {
    const std::size_t n = a.size(), m = b.size();
    std::vector<std::size_t> prev(m + 1), cur(m + 1);
    for (std::size_t j = 0; j <= m; ++j) prev[j] = j;
    for (std::size_t i = 1; i <= n; ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= m; ++j) {
            const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    return prev[m];
}

inline double cer(const std::string& reference, const std::string& hypothesis) {
    if (reference.empty()) throw DataError("cer: reference must be nonempty");
    return static_cast<double>(edit_distance(reference, hypothesis)) /
           static_cast<double>(reference.size());
}

// Corpus CER: total edit distance over total reference length.
inline double corpus_cer(const std::vector<std::string>& references,
                         const std::vector<std::string>& hypotheses) {
    if (references.size() != hypotheses.size())
        throw DataError("corpus_cer: reference/hypothesis counts differ");
    if (references.empty()) throw DataError("corpus_cer: empty corpus");
    std::size_t dist = 0, len = 0;
    for (std::size_t i = 0; i < references.size(); ++i) {
        if (references[i].empty()) throw DataError("cer: reference must be nonempty");
        dist += edit_distance(references[i], hypotheses[i]);
        len += references[i].size();
    }
    return static_cast<double>(dist) / static_cast<double>(len);
}

namespace detail_metrics {

// Character tokens with spaces removed; n-grams become substrings.
inline std::string bleu_chars(const std::string& s) {
    std::string out;
    out.reserve(s.size());
    for (char c : s)
        if (c != ' ') out.push_back(c);
    return out;
}

inline std::map<std::string, std::size_t> ngram_counts(const std::string& s, std::size_t n) {
    std::map<std::string, std::size_t> counts;
    if (s.size() >= n)
        for (std::size_t i = 0; i + n <= s.size(); ++i) ++counts[s.substr(i, n)];
    return counts;
}

} // namespace detail_metrics

// Corpus-level BLEU in [0,100]: uniform 1/max_n weights, clipped modified
// precision, add-one smoothing for n >= 2 only, brevity penalty exp(1-r/c).
inline double corpus_bleu(const std::vector<std::string>& references,
                          const std::vector<std::string>& hypotheses, int max_n) {
    if (references.size() != hypotheses.size())
        throw DataError("corpus_bleu: reference/hypothesis counts differ");
    if (references.empty()) throw DataError("corpus_bleu: empty corpus");
    if (max_n < 1) throw DataError("corpus_bleu: max_n must be >= 1");

    std::size_t r = 0, c = 0;
    std::vector<std::size_t> matched(static_cast<std::size_t>(max_n), 0);
    std::vector<std::size_t> total(static_cast<std::size_t>(max_n), 0);
    for (std::size_t i = 0; i < references.size(); ++i) {
        const std::string ref = detail_metrics::bleu_chars(references[i]);
        const std::string hyp = detail_metrics::bleu_chars(hypotheses[i]);
        r += ref.size();
        c += hyp.size();
        for (int n = 1; n <= max_n; ++n) {
            const auto refc = detail_metrics::ngram_counts(ref, static_cast<std::size_t>(n));
            const auto hypc = detail_metrics::ngram_counts(hyp, static_cast<std::size_t>(n));
            for (const auto& [gram, count] : hypc) {
                total[static_cast<std::size_t>(n - 1)] += count;
                const auto it = refc.find(gram);
                if (it != refc.end())
                    matched[static_cast<std::size_t>(n - 1)] += std::min(count, it->second);
            }
        }
    }
    if (c == 0) return 0.0;

    double log_sum = 0.0;
    for (int n = 1; n <= max_n; ++n) {
        double num = static_cast<double>(matched[static_cast<std::size_t>(n - 1)]);
        double den = static_cast<double>(total[static_cast<std::size_t>(n - 1)]);
        if (n >= 2) { // add-one smoothing
            num += 1.0;
            den += 1.0;
        }
        if (num == 0.0 || den == 0.0) return 0.0;
        log_sum += std::log(num / den);
    }
    const double bp = (c < r) ? std::exp(1.0 - static_cast<double>(r) / static_cast<double>(c)) : 1.0;
    return 100.0 * bp * std::exp(log_sum / static_cast<double>(max_n));
}

inline constexpr int kSimBuckets = 256;

// 256-bucket bag of character trigrams over '^' + s + '$', FNV-1a hashed.
inline std::array<double, kSimBuckets> sim_embed(const std::string& s) {
    if (s.empty()) throw DataError("sim: input string must be nonempty");
    const std::string padded = "^" + s + "$";
    std::array<double, kSimBuckets> v{};
    for (std::size_t i = 0; i + 3 <= padded.size(); ++i) {
        std::uint64_t h = 14695981039346656037ull;
        for (std::size_t k = 0; k < 3; ++k) {
            h ^= static_cast<std::uint8_t>(padded[i + k]);
            h *= 1099511628211ull;
        }
        v[static_cast<std::size_t>(h % kSimBuckets)] += 1.0;
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    for (double& x : v) x /= norm;
    return v;
}

inline double sim(const std::string& reference, const std::string& hypothesis) {
    const auto a = sim_embed(reference);
    const auto b = sim_embed(hypothesis);
    double dot = 0.0;
    for (int i = 0; i < kSimBuckets; ++i) dot += a[static_cast<std::size_t>(i)] * b[static_cast<std::size_t>(i)];
    return dot;
}

struct EmotionScore {
    double accuracy = 0.0;
    std::array<std::array<int, kEmotionClasses>, kEmotionClasses> confusion{}; // [gold][pred]
};

inline EmotionScore emotion_eval(const std::vector<int>& gold, const std::vector<int>& predicted) {
    if (gold.size() != predicted.size()) throw DataError("emotion_eval: length mismatch");
    if (gold.empty()) throw DataError("emotion_eval: empty inputs");
    EmotionScore s;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < gold.size(); ++i) {
        if (gold[i] < 0 || gold[i] >= kEmotionClasses || predicted[i] < 0 ||
            predicted[i] >= kEmotionClasses)
            throw DataError("emotion_eval: label out of range");
        ++s.confusion[static_cast<std::size_t>(gold[i])][static_cast<std::size_t>(predicted[i])];
        if (gold[i] == predicted[i]) ++hits;
    }
    s.accuracy = static_cast<double>(hits) / static_cast<double>(gold.size());
    return s;
}

// Stage-dependent report: stage 1 carries cer only; stage 2 carries
// bleu/sim/emotion fields. The JSON stores sim as the raw cosine.
struct EvalReport {
    Stage stage = Stage::stage1;
    double cer = 0.0;
    double bleu1 = 0.0;
    double bleu4 = 0.0;
    double sim = 0.0;
    double emotion_accuracy = 0.0;
    std::array<std::array<int, kEmotionClasses>, kEmotionClasses> confusion{};
    std::size_t n_examples = 0;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["n_examples"] = n_examples;
        if (stage == Stage::stage1) {
            j["cer"] = cer;
        } else {
            j["bleu1"] = bleu1;
            j["bleu4"] = bleu4;
            j["sim"] = sim;
            j["emotion_accuracy"] = emotion_accuracy;
            nlohmann::json rows = nlohmann::json::array();
            for (const auto& row : confusion) rows.push_back(row);
            j["confusion"] = rows;
        }
        return j;
    }
};

struct PredictionRecord {
    std::string id;
    std::string hypothesis;
    std::string gold;
    std::optional<std::string> pred_emotion; // stage 2 only
    std::optional<std::string> gold_emotion;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["id"] = id;
        j["hypothesis"] = hypothesis;
        j["gold"] = gold;
        j["pred_emotion"] = pred_emotion ? nlohmann::json(*pred_emotion) : nlohmann::json();
        j["gold_emotion"] = gold_emotion ? nlohmann::json(*gold_emotion) : nlohmann::json();
        return j;
    }
};

struct EvalResult {
    EvalReport report;
    std::vector<PredictionRecord> predictions;
};

struct EvalOptions {
    // Echo fixture: bypass generation and score the gold response against
    // itself; validates the metric aggregation end to end.
    bool echo_fixture = false;
    int max_decode_len = 32;
};

inline int argmax_row(const GradTensor& logits) {
    const float* row = logits.data();
    int best = 0;
    for (std::int64_t i = 1; i < logits.numel(); ++i)
        if (row[i] > row[best]) best = static_cast<int>(i);
    return best;
}

// Greedy generation over a test manifest, scored per stage. Examples are
// processed and reduced in manifest order so reports are deterministic.
inline EvalResult evaluate_model(const Model& model, const std::filesystem::path& manifest,
                                 const TrainConfig& tcfg, const EvalOptions& opts = {}) {
    const Stage stage = tcfg.stage;
    const std::vector<LoadedExample> loaded = load_examples(manifest);
    if (loaded.empty()) throw DataError("empty test manifest: " + manifest.string());
    const std::vector<TrainExample> examples = prepare_examples(loaded, tcfg);

    NoGradGuard ng;
    EvalResult res;
    res.report.stage = stage;
    res.report.n_examples = examples.size();

    std::vector<std::string> refs, hyps;
    std::vector<int> gold_emotions, pred_emotions;
    double sim_sum = 0.0;

    for (std::size_t i = 0; i < examples.size(); ++i) {
        const TrainExample& ex = examples[i];
        const GradTensor speech = speech_tensor(ex.speech);
        const std::vector<GradTensor> layers = model.encode(speech);
        const GradTensor speech_dec = model.speech_to_decoder(layers);

        std::optional<GradTensor> emo_dec;
        int pred_label = -1;
        if (stage == Stage::stage2) {
            const GradTensor emo = model.emotion_vec(layers);
            emo_dec = model.emotion_to_decoder(emo);
            pred_label = argmax_row(model.emotion_logits(emo));
        }

        const std::string gold = stage == Stage::stage1 ? loaded[i].text : *loaded[i].response;
        std::string hyp;
        if (opts.echo_fixture) {
            hyp = gold;
        } else {
            const AssembledInput prefix =
                assemble_input(stage, speech_dec, emo_dec ? &*emo_dec : nullptr, ex.prompt_ids,
                               {}, model.decoder);
            hyp = Tokenizer::decode(greedy_decode(prefix, model.decoder, model.cfg.decoder,
                                                  opts.max_decode_len, Tokenizer::kEos));
        }

        PredictionRecord rec;
        rec.id = ex.id;
        rec.hypothesis = hyp;
        rec.gold = gold;
        refs.push_back(gold);
        hyps.push_back(hyp);
        if (stage == Stage::stage2) {
            gold_emotions.push_back(ex.emotion);
            pred_emotions.push_back(pred_label);
            rec.gold_emotion = emotion_name(static_cast<EmotionLabel>(ex.emotion));
            rec.pred_emotion = emotion_name(static_cast<EmotionLabel>(pred_label));
            sim_sum += hyp.empty() ? 0.0 : sim(gold, hyp);
        }
        res.predictions.push_back(std::move(rec));
    }

    if (stage == Stage::stage1) {
        res.report.cer = corpus_cer(refs, hyps);
    } else {
        res.report.bleu1 = corpus_bleu(refs, hyps, 1);
        res.report.bleu4 = corpus_bleu(refs, hyps, 4);
        res.report.sim = sim_sum / static_cast<double>(examples.size());
        const EmotionScore es = emotion_eval(gold_emotions, pred_emotions);
        res.report.emotion_accuracy = es.accuracy;
        res.report.confusion = es.confusion;
    }
    return res;
}

} // namespace emotalk
