#pragma once

// Connection module: non-causal transformer blocks plus a projection mapping
// encoder-space speech sequences into decoder embedding space, and a separate
// linear projection for the pooled emotion embedding.

#include <string>
#include <vector>

#include "emotalk/layers.hpp"

namespace emotalk {

struct ConnectorConfig {
    int num_layers = 4;
    int model_dim = 64; // must equal encoder model_dim
    int num_heads = 4;
    int ff_dim = 128;
    int decoder_dim = 64;

    AttentionConfig attention() const { return {model_dim, num_heads, ff_dim, /*causal=*/false}; }

    void validate() const {
        if (num_layers < 1) throw ConfigError("connector num_layers must be >= 1");
        if (decoder_dim < 1) throw ConfigError("connector decoder_dim must be positive");
        attention().validate();
    }
};

struct ConnectorParams {
    std::vector<BlockParams> blocks;
    GradTensor proj_w, proj_b;         // speech path
    GradTensor emo_proj_w, emo_proj_b; // emotion path (disjoint parameters)

    static ConnectorParams init(const ConnectorConfig& cfg, Rng& rng) {
        cfg.validate();
        ConnectorParams p;
        for (int i = 0; i < cfg.num_layers; ++i) p.blocks.push_back(BlockParams::init(cfg.attention(), rng));
        p.proj_w = init_weight({cfg.model_dim, cfg.decoder_dim}, cfg.model_dim, rng);
        p.proj_b = init_weight({cfg.decoder_dim}, cfg.model_dim, rng);
        p.emo_proj_w = init_weight({cfg.model_dim, cfg.decoder_dim}, cfg.model_dim, rng);
        p.emo_proj_b = init_weight({cfg.decoder_dim}, cfg.model_dim, rng);
        return p;
    }

    void collect(NamedParams& out) const {
        for (std::size_t i = 0; i < blocks.size(); ++i)
            blocks[i].collect("connector.block." + std::to_string(i) + ".", out);
        out.emplace_back("connector.proj.w", proj_w);
        out.emplace_back("connector.proj.b", proj_b);
        out.emplace_back("connector.emotion_proj.w", emo_proj_w);
        out.emplace_back("connector.emotion_proj.b", emo_proj_b);
    }
};

// [T'×model_dim] -> [T'×decoder_dim], length-preserving.
inline GradTensor connect_speech(const GradTensor& speech_seq, const ConnectorParams& p,
                                 const ConnectorConfig& cfg) {
    if (speech_seq.rank() != 2 || speech_seq.dim(1) != cfg.model_dim)
        throw DimensionError("connector input " + shape_str(speech_seq.shape()) + " vs model_dim " +
                             std::to_string(cfg.model_dim));
    GradTensor x = speech_seq;
    const AttentionConfig acfg = cfg.attention();
    for (const auto& b : p.blocks) x = transformer_block(x, b, acfg);
    return linear(x, p.proj_w, p.proj_b);
}

// The single pooled emotion vector takes its own linear map; routing one
// vector through the sequence blocks would add nothing.
inline GradTensor connect_emotion(const GradTensor& emo, const ConnectorParams& p,
                                  const ConnectorConfig& cfg) {
    if (emo.rank() != 2 || emo.dim(0) != 1 || emo.dim(1) != cfg.model_dim)
        throw DimensionError("emotion embedding must be [1, " + std::to_string(cfg.model_dim) +
                             "], got " + shape_str(emo.shape()));
    return linear(emo, p.emo_proj_w, p.emo_proj_b);
}

} // namespace emotalk
