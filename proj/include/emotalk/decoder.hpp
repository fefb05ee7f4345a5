#pragma once

// Frozen causal decoder LM plus the stage-dependent input assembly, masked
// next-token loss, and greedy decoding.

#include <numeric>
#include <string>
#include <vector>

#include "emotalk/layers.hpp"

namespace emotalk {

struct DecoderConfig {
    int num_layers = 4;
    int decoder_dim = 64;
    int num_heads = 4;
    int ff_dim = 128;
    int vocab_size = 41;
    int max_positions = 256;

    AttentionConfig attention() const { return {decoder_dim, num_heads, ff_dim, /*causal=*/true}; }

    void validate() const {
        if (num_layers < 1) throw ConfigError("decoder num_layers must be >= 1");
        if (vocab_size < 1 || max_positions < 1) throw ConfigError("decoder dims must be positive");
        attention().validate();
    }
};

enum class Stage : int { stage1 = 1, stage2 = 2 };

inline constexpr std::int32_t kIgnoreIndex = -1;

// BOS lives in the decoder's token table; fixed id so this header does not
// need the tokenizer.
inline constexpr std::int32_t kBosTokenId = 1;

// The decoder's view of one example: mixed continuous/token embeddings in the
// stage layout, with the loss mask marking exactly the R target positions.
//   stage1: [BOS][speech T'][prompt P][targets R]            L = 1+T'+P+R
//   stage2: [BOS][emotion 1][speech T'][prompt P][targets R] L = 2+T'+P+R
struct AssembledInput {
    GradTensor embeddings; // [L×decoder_dim]
    std::vector<std::uint8_t> loss_mask;  // length L
    std::vector<std::int32_t> target_ids; // length L, kIgnoreIndex off-target
    Stage stage = Stage::stage1;
};

struct DecoderParams {
    GradTensor tok_emb; // [V×D]
    GradTensor pos_emb; // [max_positions×D]
    std::vector<BlockParams> blocks;
    LayerNormParams final_ln;
    GradTensor head_w, head_b;

    static DecoderParams init(const DecoderConfig& cfg, Rng& rng) {
        cfg.validate();
        DecoderParams p;
        const double eb = 1.0 / std::sqrt(static_cast<double>(cfg.decoder_dim));
        p.tok_emb = GradTensor::rand_uniform({cfg.vocab_size, cfg.decoder_dim}, -eb, eb, rng, true);
        p.pos_emb = GradTensor::rand_uniform({cfg.max_positions, cfg.decoder_dim}, -eb, eb, rng, true);
        for (int i = 0; i < cfg.num_layers; ++i) p.blocks.push_back(BlockParams::init(cfg.attention(), rng));
        p.final_ln = LayerNormParams::init(cfg.decoder_dim);
        p.head_w = init_weight({cfg.decoder_dim, cfg.vocab_size}, cfg.decoder_dim, rng);
        p.head_b = init_weight({cfg.vocab_size}, cfg.decoder_dim, rng);
        return p;
    }

    void collect(NamedParams& out) const {
        out.emplace_back("decoder.tok_emb", tok_emb);
        out.emplace_back("decoder.pos_emb", pos_emb);
        for (std::size_t i = 0; i < blocks.size(); ++i)
            blocks[i].collect("decoder.block." + std::to_string(i) + ".", out);
        final_ln.collect("decoder.final_ln.", out);
        out.emplace_back("decoder.head.w", head_w);
        out.emplace_back("decoder.head.b", head_b);
    }
};

// Builds the stage layout. Prompt/target tokens are embedded via the decoder
// token table; speech/emotion arrive as already-projected continuous rows.
// target_ids sit at their own (teacher-forced) positions; decoder_loss shifts.
inline AssembledInput assemble_input(Stage stage, const GradTensor& speech_dec,
                                     const GradTensor* emo_dec,
                                     const std::vector<std::int32_t>& prompt_ids,
                                     const std::vector<std::int32_t>& target_ids,
                                     const DecoderParams& params) {
    if (stage == Stage::stage1 && emo_dec)
        throw AssemblyError("stage 1 input must not carry an emotion embedding");
    if (stage == Stage::stage2 && !emo_dec)
        throw AssemblyError("stage 2 input requires an emotion embedding");
    if (speech_dec.rank() != 2)
        throw AssemblyError("speech embedding must be rank 2, got " + shape_str(speech_dec.shape()));
    const std::int64_t D = speech_dec.dim(1);
    if (emo_dec && (emo_dec->rank() != 2 || emo_dec->dim(0) != 1 || emo_dec->dim(1) != D))
        throw AssemblyError("emotion embedding must be [1, " + std::to_string(D) + "], got " +
                            shape_str(emo_dec->shape()));

    std::vector<GradTensor> parts;
    parts.push_back(rows_select(params.tok_emb, {kBosTokenId}));
    if (emo_dec) parts.push_back(*emo_dec);
    parts.push_back(speech_dec);
    if (!prompt_ids.empty()) parts.push_back(rows_select(params.tok_emb, prompt_ids));
    if (!target_ids.empty()) parts.push_back(rows_select(params.tok_emb, target_ids));

    AssembledInput inp;
    inp.stage = stage;
    inp.embeddings = concat_rows(parts);
    const std::int64_t L = inp.embeddings.dim(0);
    inp.loss_mask.assign(static_cast<std::size_t>(L), 0);
    inp.target_ids.assign(static_cast<std::size_t>(L), kIgnoreIndex);
    const std::int64_t r0 = L - static_cast<std::int64_t>(target_ids.size());
    for (std::size_t i = 0; i < target_ids.size(); ++i) {
        inp.loss_mask[static_cast<std::size_t>(r0) + i] = 1;
        inp.target_ids[static_cast<std::size_t>(r0) + i] = target_ids[i];
    }
    return inp;
}

inline GradTensor decoder_forward(const AssembledInput& inp, const DecoderParams& p,
                                  const DecoderConfig& cfg) {
    const std::int64_t L = inp.embeddings.dim(0);
    if (inp.embeddings.dim(1) != cfg.decoder_dim)
        throw DimensionError("assembled input " + shape_str(inp.embeddings.shape()) +
                             " vs decoder_dim " + std::to_string(cfg.decoder_dim));
    if (L > cfg.max_positions)
        throw DimensionError("sequence length " + std::to_string(L) +
                             " exceeds decoder max_positions " + std::to_string(cfg.max_positions));
    std::vector<std::int32_t> idx(static_cast<std::size_t>(L));
    std::iota(idx.begin(), idx.end(), 0);
    GradTensor x = add(inp.embeddings, rows_select(p.pos_emb, idx));
    const AttentionConfig acfg = cfg.attention();
    for (const auto& b : p.blocks) x = transformer_block(x, b, acfg);
    x = layer_norm(x, p.final_ln.gain, p.final_ln.bias);
    return linear(x, p.head_w, p.head_b);
}

// Next-token CE on the masked positions: the logits at position i-1 predict
// the target placed at position i.
inline GradTensor decoder_loss(const GradTensor& logits, const AssembledInput& inp) {
    const std::int64_t L = logits.dim(0);
    if (static_cast<std::size_t>(L) != inp.loss_mask.size())
        throw DimensionError("logit rows " + std::to_string(L) + " vs mask length " +
                             std::to_string(inp.loss_mask.size()));
    std::vector<std::int32_t> shifted(static_cast<std::size_t>(L), kIgnoreIndex);
    for (std::int64_t i = 0; i + 1 < L; ++i)
        if (inp.loss_mask[static_cast<std::size_t>(i + 1)])
            shifted[static_cast<std::size_t>(i)] = inp.target_ids[static_cast<std::size_t>(i + 1)];
    return cross_entropy(logits, shifted, kIgnoreIndex);
}

// Argmax continuation from an R=0 prefix until eos_id or max_len tokens.
// eos_id itself is not part of the returned continuation.
inline std::vector<std::int32_t> greedy_decode(const AssembledInput& prefix, const DecoderParams& p,
                                               const DecoderConfig& cfg, int max_len,
                                               std::int32_t eos_id) {
    if (max_len < 1) throw ConfigError("greedy_decode max_len must be >= 1");
    NoGradGuard ng;
    std::vector<std::int32_t> out;
    GradTensor emb = prefix.embeddings;
    for (int step = 0; step < max_len; ++step) {
        AssembledInput cur;
        cur.stage = prefix.stage;
        cur.embeddings = emb;
        cur.loss_mask.assign(static_cast<std::size_t>(emb.dim(0)), 0);
        cur.target_ids.assign(static_cast<std::size_t>(emb.dim(0)), kIgnoreIndex);
        GradTensor logits = decoder_forward(cur, p, cfg);
        const std::int64_t V = logits.dim(1);
        const float* row = logits.data() + (logits.dim(0) - 1) * V;
        std::int32_t best = 0;
        for (std::int64_t v = 1; v < V; ++v)
            if (row[v] > row[best]) best = static_cast<std::int32_t>(v);
        if (best == eos_id) break;
        out.push_back(best);
        if (emb.dim(0) + 1 > cfg.max_positions) break; // no room to extend further
        emb = concat_rows({emb, rows_select(p.tok_emb, {best})});
    }
    return out;
}

} // namespace emotalk
