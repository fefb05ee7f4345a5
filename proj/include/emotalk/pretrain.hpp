#pragma once

// Decoder LM pretraining. The decoder is frozen during both training stages,
// so like any frozen backbone it has to arrive already knowing the language;
// here that means next-char modelling over synthetic lines laid out exactly
// like the fine-tuning inputs, with characters standing in for the slots that
// later carry continuous embeddings. Transcription lines put the text where
// speech frames will sit (the conv stack maps 4 frames/char through two
// stride-2 layers, so lengths match 1:1); dialogue lines put a digit
// indicator where the emotion embedding will sit, which wires a circuit from
// that position to the response keyword that stage 2 can steer.

#include <cstdint>
#include <string>
#include <vector>

#include "emotalk/trainer.hpp"

namespace emotalk {

struct PretrainConfig {
    int steps = 2000;
    int batch_size = 16;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double clip_norm = 1.0;
    std::uint64_t seed = 1;
    int max_chars = 20;
    double dialogue_share = 0.5;    // fraction of dialogue-format lines
    double indicator_jitter = 0.08; // embedding noise half-width at the indicator slot
    std::string prompt_stage1 = TrainConfig{}.prompt_stage1;
    std::string prompt_stage2 = TrainConfig{}.prompt_stage2;

    void validate() const {
        if (steps < 0) throw ConfigError("pretrain steps must be >= 0");
        if (batch_size < 1) throw ConfigError("pretrain batch_size must be >= 1");
        if (!(lr > 0.0)) throw ConfigError("pretrain lr must be positive");
        if (max_chars < 3) throw ConfigError("pretrain max_chars must be at least 3");
        if (!(dialogue_share >= 0.0 && dialogue_share <= 1.0))
            throw ConfigError("dialogue_share must be in [0,1]");
        if (!(indicator_jitter >= 0.0)) throw ConfigError("indicator_jitter must be >= 0");
    }
};

// The digit token standing in for emotion class e at the indicator slot.
inline std::int32_t emotion_indicator_id(EmotionLabel e) {
    return 30 + static_cast<std::int32_t>(e);
}

// One token-only training line; ids[0] is BOS, the loss covers
// [target_begin, ids.size()) and the trailing EOS. indicator_pos marks the
// slot fine-tuning will overwrite with a continuous embedding (0 = none;
// position 0 is always BOS).
struct LmExample {
    std::vector<std::int32_t> ids;
    std::size_t target_begin = 0;
    std::size_t indicator_pos = 0;
};

inline LmExample transcription_line(const std::string& text, const std::string& prompt) {
    LmExample ex;
    ex.ids.push_back(Tokenizer::kBos);
    for (std::int32_t id : Tokenizer::encode(text)) ex.ids.push_back(id);
    for (std::int32_t id : Tokenizer::encode(prompt)) ex.ids.push_back(id);
    ex.target_begin = ex.ids.size();
    for (std::int32_t id : Tokenizer::encode(text)) ex.ids.push_back(id);
    ex.ids.push_back(Tokenizer::kEos);
    return ex;
}

inline LmExample dialogue_line(const std::string& question, EmotionLabel emotion,
                               const std::string& prompt) {
    LmExample ex;
    ex.ids.push_back(Tokenizer::kBos);
    ex.indicator_pos = ex.ids.size();
    ex.ids.push_back(emotion_indicator_id(emotion));
    for (std::int32_t id : Tokenizer::encode(question)) ex.ids.push_back(id);
    for (std::int32_t id : Tokenizer::encode(prompt)) ex.ids.push_back(id);
    ex.target_begin = ex.ids.size();
    for (std::int32_t id : Tokenizer::encode(response_for(question, emotion))) ex.ids.push_back(id);
    ex.ids.push_back(Tokenizer::kEos);
    return ex;
}

inline LmExample sample_lm_example(Rng& rng, const PretrainConfig& cfg) {
    const std::string text = detail_gen::random_text(rng, cfg.max_chars);
    if (rng.next_double() < cfg.dialogue_share)
        return dialogue_line(text, sample_emotion(rng), cfg.prompt_stage2);
    return transcription_line(text, cfg.prompt_stage1);
}

// Wraps a token line as an AssembledInput so decoder_forward/decoder_loss
// apply unchanged (same shift, same masking).
inline AssembledInput lm_input(const LmExample& ex, const DecoderParams& params) {
    if (ex.target_begin == 0 || ex.target_begin >= ex.ids.size())
        throw DataError("LM line must have a nonempty prefix and target region");
    AssembledInput inp;
    inp.stage = Stage::stage1;
    inp.embeddings = rows_select(params.tok_emb, ex.ids);
    inp.loss_mask.assign(ex.ids.size(), 0);
    inp.target_ids.assign(ex.ids.size(), kIgnoreIndex);
    for (std::size_t i = ex.target_begin; i < ex.ids.size(); ++i) {
        inp.loss_mask[i] = 1;
        inp.target_ids[i] = ex.ids[i];
    }
    return inp;
}

// Trains only decoder parameters; encoder/connector/emotion head stay at
// their init draw. Returns the model ready to freeze into stage 1.
inline Model pretrain_lm(const ModelConfig& mcfg, const PretrainConfig& cfg,
                         const LogSink& sink = {}) {
    cfg.validate();
    Model model = Model::init(mcfg, cfg.seed);
    NamedParams trainable;
    for (auto& [name, p] : model.named_params()) {
        const bool is_dec = name.rfind("decoder.", 0) == 0;
        p.set_requires_grad(is_dec);
        if (is_dec) trainable.emplace_back(name, p);
    }

    Adam opt(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
    Rng rng(hash_mix(cfg.seed, 0x70726574ULL)); // sampling stream
    const double inv = 1.0 / static_cast<double>(cfg.batch_size);
    for (int step = 1; step <= cfg.steps; ++step) {
        for (auto& [name, p] : trainable) p.zero_grad();
        double sum = 0.0;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const LmExample ex = sample_lm_example(rng, cfg);
            AssembledInput inp = lm_input(ex, model.decoder);
            if (ex.indicator_pos > 0 && cfg.indicator_jitter > 0.0) {
                // Fine-tuning swaps this row for a learned continuous vector;
                // jittering it here teaches the keyword circuit to fire over a
                // neighbourhood instead of a single point.
                const std::int64_t L = inp.embeddings.dim(0);
                const std::int64_t D = inp.embeddings.dim(1);
                std::vector<float> noise(static_cast<std::size_t>(L * D), 0.0f);
                const std::size_t row = ex.indicator_pos * static_cast<std::size_t>(D);
                for (std::size_t d = 0; d < static_cast<std::size_t>(D); ++d)
                    noise[row + d] =
                        static_cast<float>(rng.uniform(-cfg.indicator_jitter, cfg.indicator_jitter));
                inp.embeddings = add(inp.embeddings, GradTensor::from({L, D}, noise));
            }
            const GradTensor logits = decoder_forward(inp, model.decoder, model.cfg.decoder);
            const GradTensor loss = decoder_loss(logits, inp);
            scale(loss, inv).backward();
            sum += loss.item();
        }
        clip_gradients(trainable, cfg.clip_norm);
        opt.step(trainable);
        if (sink) sink(step, combine_losses(sum * inv, 0.0, 0.0));
    }
    return model;
}

} // namespace emotalk
