#pragma once

// Two-stage training: per-stage trainable partition, combined loss, Adam with
// global-norm clipping, seeded epoch shuffling. Fully deterministic.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "emotalk/checkpoint.hpp"
#include "emotalk/datagen.hpp"
#include "emotalk/model.hpp"

namespace emotalk {

struct TrainConfig {
    Stage stage = Stage::stage1;
    double alpha = 0.0; // emotion-loss weight; stage defaults 0.0 / 0.1
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double clip_norm = 1.0;
    int batch_size = 16;
    int steps = 0;
    std::uint64_t seed = 1;
    std::string prompt_stage1 = "Transcribe the speech.";
    std::string prompt_stage2 = "You are requested to provide a comforting response based on the "
                                "emotion conveyed in this speech.";

    static TrainConfig for_stage(Stage s) {
        TrainConfig c;
        c.stage = s;
        c.alpha = (s == Stage::stage2) ? 0.1 : 0.0;
        return c;
    }

    const std::string& prompt() const {
        return stage == Stage::stage1 ? prompt_stage1 : prompt_stage2;
    }

    void validate() const {
        if (stage != Stage::stage1 && stage != Stage::stage2)
            throw ConfigError("stage must be 1 or 2");
        if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must be in [0,1]");
        if (!(lr > 0.0)) throw ConfigError("lr must be positive");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (steps < 0) throw ConfigError("steps must be >= 0");
    }
};

struct LossBreakdown {
    double total = 0.0;
    double l_decoder = 0.0;
    double l_emotion = 0.0;
    double alpha = 0.0;
};

// The combination is done in 64-bit so the identity is exactly testable.
inline LossBreakdown combine_losses(double l_decoder, double l_emotion, double alpha) {
    LossBreakdown b;
    b.l_decoder = l_decoder;
    b.l_emotion = l_emotion;
    b.alpha = alpha;
    b.total = (1.0 - alpha) * l_decoder + alpha * l_emotion;
    return b;
}

// Scales all gradients so their global L2 norm is at most max_norm.
inline double clip_gradients(const NamedParams& params, double max_norm) {
    double sq = 0.0;
    for (const auto& [name, p] : params) {
        if (!p.has_grad()) continue;
        for (float g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const float s = static_cast<float>(max_norm / norm);
        for (const auto& [name, p] : params) {
            if (!p.has_grad()) continue;
            for (auto& g : p.node()->grad) g *= s;
        }
    }
    return norm;
}

// Plain Adam. Moments are kept in double and keyed by parameter name;
// parameters that never received a grad buffer are left untouched.
class Adam {
  public:
    Adam(double lr, double beta1, double beta2, double eps)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(const NamedParams& params) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (const auto& [name, p] : params) {
            if (!p.has_grad()) continue;
            auto& slot = state_[name];
            const std::size_t n = p.values().size();
            if (slot.m.empty()) {
                slot.m.assign(n, 0.0);
                slot.v.assign(n, 0.0);
            }
            const std::vector<float>& g = p.grad();
            float* w = p.node()->values.data();
            for (std::size_t i = 0; i < n; ++i) {
                const double gi = g[i];
                slot.m[i] = beta1_ * slot.m[i] + (1.0 - beta1_) * gi;
                slot.v[i] = beta2_ * slot.v[i] + (1.0 - beta2_) * gi * gi;
                const double mhat = slot.m[i] / bc1;
                const double vhat = slot.v[i] / bc2;
                w[i] = static_cast<float>(w[i] - lr_ * mhat / (std::sqrt(vhat) + eps_));
            }
        }
    }

    std::int64_t steps_taken() const { return t_; }

  private:
    struct Slot {
        std::vector<double> m, v;
    };
    double lr_, beta1_, beta2_, eps_;
    std::int64_t t_ = 0;
    std::map<std::string, Slot> state_;
};

struct TrainExample {
    std::string id;
    std::vector<std::int32_t> prompt_ids;
    std::vector<std::int32_t> target_ids; // transcript/response tokens + EOS
    std::int32_t emotion = -1;            // gold label, stage 2 only
    FeatureSequence speech;
};

inline std::vector<TrainExample> prepare_examples(const std::vector<LoadedExample>& loaded,
                                                  const TrainConfig& cfg) {
    const std::vector<std::int32_t> prompt = Tokenizer::encode(cfg.prompt());
    std::vector<TrainExample> out;
    out.reserve(loaded.size());
    for (const auto& le : loaded) {
        TrainExample ex;
        ex.id = le.id;
        ex.prompt_ids = prompt;
        ex.speech = le.speech;
        if (cfg.stage == Stage::stage1) {
            ex.target_ids = Tokenizer::encode(le.text);
        } else {
            if (!le.emotion || !le.response)
                throw DataError("stage 2 needs dialogue examples with emotion and response; \"" +
                                le.id + "\" lacks them");
            ex.target_ids = Tokenizer::encode(*le.response);
            ex.emotion = static_cast<std::int32_t>(*le.emotion);
        }
        ex.target_ids.push_back(Tokenizer::kEos);
        out.push_back(std::move(ex));
    }
    return out;
}

inline GradTensor speech_tensor(const FeatureSequence& fs) {
    return GradTensor::from({fs.T, fs.F}, fs.frames);
}

struct ExampleLosses {
    GradTensor decoder_loss;
    std::optional<GradTensor> emotion_loss;
};

inline ExampleLosses example_losses(const Model& model, const TrainExample& ex, Stage stage) {
    if (stage == Stage::stage2 && ex.emotion < 0)
        throw DataError("stage 2 batch contains an example without a gold emotion: \"" + ex.id + "\"");
    const GradTensor speech = speech_tensor(ex.speech);
    const std::vector<GradTensor> layers = model.encode(speech);
    const GradTensor speech_dec = model.speech_to_decoder(layers);

    ExampleLosses out;
    AssembledInput inp;
    if (stage == Stage::stage1) {
        inp = assemble_input(Stage::stage1, speech_dec, nullptr, ex.prompt_ids, ex.target_ids,
                             model.decoder);
    } else {
        const GradTensor emo = model.emotion_vec(layers);
        const GradTensor emo_dec = model.emotion_to_decoder(emo);
        inp = assemble_input(Stage::stage2, speech_dec, &emo_dec, ex.prompt_ids, ex.target_ids,
                             model.decoder);
        out.emotion_loss = cross_entropy(model.emotion_logits(emo), {ex.emotion});
    }
    const GradTensor logits = decoder_forward(inp, model.decoder, model.cfg.decoder);
    out.decoder_loss = decoder_loss(logits, inp);
    return out;
}

// One optimizer step over a batch: per-example backward accumulation of the
// combined loss (scaled by 1/B), then clip + Adam restricted to `trainable`.
inline LossBreakdown train_step(Model& model, const std::vector<const TrainExample*>& batch,
                                const TrainConfig& cfg, Adam& opt, const NamedParams& trainable) {
    if (batch.empty()) throw DataError("empty training batch");
    NamedParams all = model.named_params();
    for (auto& [name, p] : all) p.zero_grad();

    const double inv = 1.0 / static_cast<double>(batch.size());
    double sum_dec = 0.0, sum_emo = 0.0;
    for (const TrainExample* ex : batch) {
        ExampleLosses losses = example_losses(model, *ex, cfg.stage);
        GradTensor combined = scale(losses.decoder_loss, (1.0 - cfg.alpha) * inv);
        if (losses.emotion_loss)
            combined = add(combined, scale(*losses.emotion_loss, cfg.alpha * inv));
        combined.backward();
        sum_dec += losses.decoder_loss.item();
        if (losses.emotion_loss) sum_emo += losses.emotion_loss->item();
    }
    clip_gradients(trainable, cfg.clip_norm);
    opt.step(trainable);
    return combine_losses(sum_dec * inv, sum_emo * inv, cfg.alpha);
}

using LogSink = std::function<void(int step, const LossBreakdown&)>;

namespace detail_train {

inline void shuffle_indices(std::vector<std::size_t>& order, Rng& rng) {
    for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[rng.uniform_int(i)]);
}

} // namespace detail_train

// Runs cfg.steps full batches over the corpus behind `manifest`, reshuffling
// whenever the epoch is exhausted. Stage 2 must start from a stage-1
// checkpoint; a fresh model is drawn from (mcfg, cfg.seed) otherwise.
inline Model run_training(const std::filesystem::path& manifest, const ModelConfig& mcfg,
                          const TrainConfig& cfg, std::optional<LoadedCheckpoint> init,
                          const LogSink& sink = {}) {
    cfg.validate();
    if (cfg.stage == Stage::stage2) {
        if (!init) throw ConfigError("stage 2 training requires a stage-1 init checkpoint");
        if (init->stage != 1)
            throw ConfigError("stage 2 init checkpoint must come from stage 1, got stage " +
                              std::to_string(init->stage));
    } else if (init && init->stage != 1 && init->stage != 0) {
        throw ConfigError("stage 1 cannot resume from a stage-" + std::to_string(init->stage) +
                          " checkpoint");
    }

    Model model = init ? std::move(init->model) : Model::init(mcfg, cfg.seed);
    model.set_trainable(cfg.stage);
    NamedParams trainable;
    for (auto& [name, p] : model.named_params())
        if (Model::is_trainable(name, cfg.stage)) trainable.emplace_back(name, p);

    const std::vector<LoadedExample> loaded = load_examples(manifest);
    if (loaded.empty()) throw DataError("empty corpus manifest: " + manifest.string());
    const std::vector<TrainExample> examples = prepare_examples(loaded, cfg);

    Adam opt(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
    Rng shuffle_rng(hash_mix(cfg.seed, 0x65706f6368ULL));
    std::vector<std::size_t> order(examples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t cursor = order.size(); // forces a shuffle before the first batch

    for (int step = 1; step <= cfg.steps; ++step) {
        std::vector<const TrainExample*> batch;
        batch.reserve(static_cast<std::size_t>(cfg.batch_size));
        for (int b = 0; b < cfg.batch_size; ++b) {
            if (cursor >= order.size()) {
                detail_train::shuffle_indices(order, shuffle_rng);
                cursor = 0;
            }
            batch.push_back(&examples[order[cursor++]]);
        }
        const LossBreakdown lb = train_step(model, batch, cfg, opt, trainable);
        if (sink) sink(step, lb);
    }
    return model;
}

} // namespace emotalk
