#pragma once

// Whole-model bundle: encoder + connector + frozen decoder + emotion head,
// with JSON config round-trip and the per-stage trainable partition.

#include <cstdint>
#include <initializer_list>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "emotalk/connector.hpp"
#include "emotalk/decoder.hpp"
#include "emotalk/encoder.hpp"

namespace emotalk {

inline constexpr int kEmotionClasses = 5;

namespace detail_cfg {

// Assigns integer fields from a JSON object, rejecting anything unknown.
inline void assign_int_fields(const nlohmann::json& j, const char* section,
                              std::initializer_list<std::pair<const char*, int*>> fields) {
    if (!j.is_object()) throw ConfigError(std::string(section) + " section must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const auto& [name, ptr] : fields) {
            if (it.key() != name) continue;
            if (!it.value().is_number_integer())
                throw ConfigError(std::string(section) + "." + it.key() + " must be an integer");
            *ptr = it.value().get<int>();
            known = true;
            break;
        }
        if (!known) throw ConfigError("unknown key \"" + it.key() + "\" in " + section + " section");
    }
}

} // namespace detail_cfg

struct ModelConfig {
    EncoderConfig encoder;
    ConnectorConfig connector;
    DecoderConfig decoder;

    void validate() const {
        encoder.validate();
        connector.validate();
        decoder.validate();
        if (connector.model_dim != encoder.model_dim)
            throw ConfigError("connector model_dim " + std::to_string(connector.model_dim) +
                              " must match encoder model_dim " + std::to_string(encoder.model_dim));
        if (connector.decoder_dim != decoder.decoder_dim)
            throw ConfigError("connector decoder_dim " + std::to_string(connector.decoder_dim) +
                              " must match decoder decoder_dim " + std::to_string(decoder.decoder_dim));
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["encoder"] = {{"num_layers", encoder.num_layers},
                        {"model_dim", encoder.model_dim},
                        {"num_heads", encoder.num_heads},
                        {"ff_dim", encoder.ff_dim},
                        {"conv_layers", encoder.conv_layers},
                        {"conv_stride", encoder.conv_stride},
                        {"input_dim", encoder.input_dim},
                        {"max_positions", encoder.max_positions}};
        j["connector"] = {{"num_layers", connector.num_layers},
                          {"model_dim", connector.model_dim},
                          {"num_heads", connector.num_heads},
                          {"ff_dim", connector.ff_dim},
                          {"decoder_dim", connector.decoder_dim}};
        j["decoder"] = {{"num_layers", decoder.num_layers},
                        {"decoder_dim", decoder.decoder_dim},
                        {"num_heads", decoder.num_heads},
                        {"ff_dim", decoder.ff_dim},
                        {"vocab_size", decoder.vocab_size},
                        {"max_positions", decoder.max_positions}};
        return j;
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        if (!j.is_object()) throw ConfigError("model config must be a JSON object");
        ModelConfig c;
        for (auto it = j.begin(); it != j.end(); ++it) {
            if (it.key() == "encoder") {
                detail_cfg::assign_int_fields(it.value(), "encoder",
                                              {{"num_layers", &c.encoder.num_layers},
                                               {"model_dim", &c.encoder.model_dim},
                                               {"num_heads", &c.encoder.num_heads},
                                               {"ff_dim", &c.encoder.ff_dim},
                                               {"conv_layers", &c.encoder.conv_layers},
                                               {"conv_stride", &c.encoder.conv_stride},
                                               {"input_dim", &c.encoder.input_dim},
                                               {"max_positions", &c.encoder.max_positions}});
            } else if (it.key() == "connector") {
                detail_cfg::assign_int_fields(it.value(), "connector",
                                              {{"num_layers", &c.connector.num_layers},
                                               {"model_dim", &c.connector.model_dim},
                                               {"num_heads", &c.connector.num_heads},
                                               {"ff_dim", &c.connector.ff_dim},
                                               {"decoder_dim", &c.connector.decoder_dim}});
            } else if (it.key() == "decoder") {
                detail_cfg::assign_int_fields(it.value(), "decoder",
                                              {{"num_layers", &c.decoder.num_layers},
                                               {"decoder_dim", &c.decoder.decoder_dim},
                                               {"num_heads", &c.decoder.num_heads},
                                               {"ff_dim", &c.decoder.ff_dim},
                                               {"vocab_size", &c.decoder.vocab_size},
                                               {"max_positions", &c.decoder.max_positions}});
            } else {
                throw ConfigError("unknown key \"" + it.key() + "\" in model config");
            }
        }
        c.validate();
        return c;
    }
};

struct Model {
    ModelConfig cfg;
    EncoderParams encoder;
    ConnectorParams connector;
    DecoderParams decoder;
    GradTensor emo_head_w, emo_head_b; // model_dim -> 5 logits

    // Parameter draw order is part of the determinism contract: identical
    // (config, seed) must give identical initial checkpoints.
    static Model init(const ModelConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        Model m;
        m.cfg = cfg;
        Rng rng(seed);
        m.encoder = EncoderParams::init(cfg.encoder, rng);
        m.connector = ConnectorParams::init(cfg.connector, rng);
        m.decoder = DecoderParams::init(cfg.decoder, rng);
        m.emo_head_w = init_weight({cfg.encoder.model_dim, kEmotionClasses}, cfg.encoder.model_dim, rng);
        m.emo_head_b = init_weight({kEmotionClasses}, cfg.encoder.model_dim, rng);
        return m;
    }

    NamedParams named_params() const {
        NamedParams out;
        encoder.collect(out);
        connector.collect(out);
        decoder.collect(out);
        out.emplace_back("emotion_head.w", emo_head_w);
        out.emplace_back("emotion_head.b", emo_head_b);
        return out;
    }

    static std::vector<std::string> trainable_prefixes(Stage stage) {
        switch (stage) {
        case Stage::stage1: return {"encoder.", "connector."};
        case Stage::stage2: return {"connector.", "encoder.emotion_weights.", "emotion_head."};
        }
        throw ConfigError("unknown training stage");
    }

    static bool is_trainable(const std::string& name, Stage stage) {
        for (const auto& prefix : trainable_prefixes(stage))
            if (name.rfind(prefix, 0) == 0) return true;
        return false;
    }

    // Flags requires_grad per stage so backward skips frozen weight grads;
    // the optimizer additionally restricts its update set by name.
    void set_trainable(Stage stage) {
        NamedParams params = named_params();
        for (auto& [name, p] : params) p.set_requires_grad(is_trainable(name, stage));
    }

    std::vector<GradTensor> encode(const GradTensor& speech) const {
        return encode_layers(speech, encoder, cfg.encoder);
    }

    GradTensor speech_to_decoder(const std::vector<GradTensor>& layers) const {
        return connect_speech(weighted_layer_sum(layers, encoder.speech_weights.logits), connector,
                              cfg.connector);
    }

    GradTensor emotion_vec(const std::vector<GradTensor>& layers) const {
        return emotion_embedding(layers, encoder.emotion_weights);
    }

    GradTensor emotion_to_decoder(const GradTensor& emo) const {
        return connect_emotion(emo, connector, cfg.connector);
    }

    GradTensor emotion_logits(const GradTensor& emo) const {
        return linear(emo, emo_head_w, emo_head_b);
    }
};

} // namespace emotalk
