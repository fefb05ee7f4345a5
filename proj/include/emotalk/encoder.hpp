#pragma once

// Speech encoder: strided conv frontend, learned positional table, N
// transformer layers exposing every layer's output, and the two independent
// weighted layer aggregations (speech content vs emotion).

#include <numeric>
#include <string>
#include <vector>

#include "emotalk/layers.hpp"

namespace emotalk {

struct EncoderConfig {
    int num_layers = 4;
    int model_dim = 64;
    int num_heads = 4;
    int ff_dim = 128;
    int conv_layers = 2;
    int conv_stride = 2;
    int input_dim = 32;
    int max_positions = 128;

    AttentionConfig attention() const { return {model_dim, num_heads, ff_dim, /*causal=*/false}; }

    void validate() const {
        if (num_layers < 1) throw ConfigError("encoder num_layers must be >= 1");
        if (conv_layers < 1) throw ConfigError("encoder conv_layers must be >= 1");
        if (conv_stride < 1) throw ConfigError("encoder conv_stride must be >= 1");
        if (input_dim < 1 || max_positions < 1) throw ConfigError("encoder dims must be positive");
        attention().validate();
    }
};

enum class WeightPurpose { speech, emotion };

// Per-layer scalar logits, softmax-normalized on use. Zero-init = uniform.
struct LayerWeightSet {
    GradTensor logits;
    WeightPurpose purpose = WeightPurpose::speech;

    static LayerWeightSet init(int num_layers, WeightPurpose purpose) {
        return {GradTensor::zeros({num_layers}, true), purpose};
    }

    std::vector<float> normalized() const {
        NoGradGuard ng;
        return softmax(logits, 0).values();
    }
};

struct EncoderParams {
    std::vector<ConvLayerParams> conv;
    GradTensor pos; // learned positional table, zero-init
    std::vector<BlockParams> blocks;
    LayerWeightSet speech_weights;
    LayerWeightSet emotion_weights;

    static EncoderParams init(const EncoderConfig& cfg, Rng& rng) {
        cfg.validate();
        EncoderParams p;
        std::int64_t in = cfg.input_dim;
        for (int i = 0; i < cfg.conv_layers; ++i) {
            p.conv.push_back(ConvLayerParams::init(in, cfg.model_dim, rng));
            in = cfg.model_dim;
        }
        p.pos = GradTensor::zeros({cfg.max_positions, cfg.model_dim}, true);
        for (int i = 0; i < cfg.num_layers; ++i) p.blocks.push_back(BlockParams::init(cfg.attention(), rng));
        p.speech_weights = LayerWeightSet::init(cfg.num_layers, WeightPurpose::speech);
        p.emotion_weights = LayerWeightSet::init(cfg.num_layers, WeightPurpose::emotion);
        return p;
    }

    void collect(NamedParams& out) const {
        for (std::size_t i = 0; i < conv.size(); ++i)
            conv[i].collect("encoder.conv." + std::to_string(i) + ".", out);
        out.emplace_back("encoder.pos", pos);
        for (std::size_t i = 0; i < blocks.size(); ++i)
            blocks[i].collect("encoder.block." + std::to_string(i) + ".", out);
        out.emplace_back("encoder.speech_weights.logits", speech_weights.logits);
        out.emplace_back("encoder.emotion_weights.logits", emotion_weights.logits);
    }
};

// Runs the conv stack and all transformer layers, returning every layer's
// output (T'×model_dim each). The conv output itself is not in the list.
inline std::vector<GradTensor> encode_layers(const GradTensor& speech, const EncoderParams& p,
                                             const EncoderConfig& cfg) {
    if (speech.rank() != 2 || speech.dim(1) != cfg.input_dim)
        throw DimensionError("speech input " + shape_str(speech.shape()) + " vs feature dim " +
                             std::to_string(cfg.input_dim));
    GradTensor x = conv1d_subsample(speech, p.conv, cfg.conv_stride);
    const std::int64_t Tp = x.dim(0);
    if (Tp > cfg.max_positions)
        throw DimensionError("subsampled length " + std::to_string(Tp) +
                             " exceeds encoder max_positions " + std::to_string(cfg.max_positions));
    std::vector<std::int32_t> idx(static_cast<std::size_t>(Tp));
    std::iota(idx.begin(), idx.end(), 0);
    x = add(x, rows_select(p.pos, idx));

    std::vector<GradTensor> outputs;
    outputs.reserve(p.blocks.size());
    const AttentionConfig acfg = cfg.attention();
    for (const auto& b : p.blocks) {
        x = transformer_block(x, b, acfg);
        outputs.push_back(x);
    }
    return outputs;
}

// Emotion embedding: the second weighted sum, mean-pooled over time.
inline GradTensor emotion_embedding(const std::vector<GradTensor>& layers,
                                    const LayerWeightSet& emo_weights) {
    return mean_rows(weighted_layer_sum(layers, emo_weights.logits));
}

} // namespace emotalk
