#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <map>
#include <string>
#include <vector>

#include "emotalk/pretrain.hpp"

using emotalk::ConfigError;
using emotalk::DataError;
using emotalk::dialogue_line;
using emotalk::emotion_indicator_id;
using emotalk::EmotionLabel;
using emotalk::kIgnoreIndex;
using emotalk::LmExample;
using emotalk::Model;
using emotalk::ModelConfig;
using emotalk::PretrainConfig;
using emotalk::Rng;
using emotalk::Tokenizer;
using emotalk::transcription_line;

namespace {

ModelConfig tiny_model_cfg() {
    ModelConfig mc;
    mc.encoder.num_layers = 1;
    mc.encoder.model_dim = 16;
    mc.encoder.num_heads = 2;
    mc.encoder.ff_dim = 32;
    mc.connector.num_layers = 1;
    mc.connector.model_dim = 16;
    mc.connector.num_heads = 2;
    mc.connector.ff_dim = 32;
    mc.connector.decoder_dim = 16;
    mc.decoder.num_layers = 1;
    mc.decoder.decoder_dim = 16;
    mc.decoder.num_heads = 2;
    mc.decoder.ff_dim = 32;
    mc.decoder.max_positions = 128;
    return mc;
}

std::map<std::string, std::vector<float>> snapshot(const Model& m) {
    std::map<std::string, std::vector<float>> out;
    for (const auto& [name, p] : m.named_params()) out[name] = p.values();
    return out;
}

bool same_bytes(const std::vector<float>& a, const std::vector<float>& b) {
    return a.size() == b.size() &&
           std::memcmp(a.data(), b.data(), sizeof(float) * a.size()) == 0;
}

} // namespace

TEST_CASE("transcription lines copy the text after the prompt", "[pretrain]") {
    auto ex = transcription_line("ab", "go");
    // [BOS] a b g o | a b EOS
    std::vector<std::int32_t> want = {Tokenizer::kBos};
    for (auto id : Tokenizer::encode("abgo")) want.push_back(id);
    const std::size_t begin = want.size();
    for (auto id : Tokenizer::encode("ab")) want.push_back(id);
    want.push_back(Tokenizer::kEos);
    CHECK(ex.ids == want);
    CHECK(ex.target_begin == begin);
    CHECK(ex.indicator_pos == 0); // no slot to jitter
}

TEST_CASE("dialogue lines carry the indicator digit and the response", "[pretrain]") {
    auto ex = dialogue_line("phone on", EmotionLabel::sad, "q");
    REQUIRE(ex.ids.size() >= 3);
    CHECK(ex.ids[0] == Tokenizer::kBos);
    CHECK(ex.ids[1] == emotion_indicator_id(EmotionLabel::sad));

    std::vector<std::int32_t> want = {Tokenizer::kBos, emotion_indicator_id(EmotionLabel::sad)};
    for (auto id : Tokenizer::encode("phone on")) want.push_back(id);
    for (auto id : Tokenizer::encode("q")) want.push_back(id);
    const std::size_t begin = want.size();
    for (auto id : Tokenizer::encode("there pho")) want.push_back(id);
    want.push_back(Tokenizer::kEos);
    CHECK(ex.ids == want);
    CHECK(ex.target_begin == begin);
    CHECK(ex.indicator_pos == 1);
}

TEST_CASE("indicator ids are the digit tokens 0..4", "[pretrain]") {
    CHECK(emotion_indicator_id(EmotionLabel::cheerful) == Tokenizer::char_to_id('0'));
    CHECK(emotion_indicator_id(EmotionLabel::fearful) == Tokenizer::char_to_id('1'));
    CHECK(emotion_indicator_id(EmotionLabel::angry) == Tokenizer::char_to_id('2'));
    CHECK(emotion_indicator_id(EmotionLabel::sad) == Tokenizer::char_to_id('3'));
    CHECK(emotion_indicator_id(EmotionLabel::neutral) == Tokenizer::char_to_id('4'));
}

TEST_CASE("lm_input masks exactly the target span", "[pretrain]") {
    const auto mc = tiny_model_cfg();
    auto m = Model::init(mc, 3);
    auto ex = transcription_line("ab", "go");
    auto inp = emotalk::lm_input(ex, m.decoder);

    REQUIRE(inp.embeddings.dim(0) == static_cast<std::int64_t>(ex.ids.size()));
    REQUIRE(inp.embeddings.dim(1) == mc.decoder.decoder_dim);
    for (std::size_t i = 0; i < ex.ids.size(); ++i) {
        const bool on = i >= ex.target_begin;
        CHECK(static_cast<bool>(inp.loss_mask[i]) == on);
        CHECK(inp.target_ids[i] == (on ? ex.ids[i] : kIgnoreIndex));
    }
    // embedding rows come straight from the token table
    const std::int64_t D = mc.decoder.decoder_dim;
    for (std::size_t i = 0; i < ex.ids.size(); ++i) {
        const float* got = inp.embeddings.data() + static_cast<std::int64_t>(i) * D;
        const float* want = m.decoder.tok_emb.data() + ex.ids[i] * D;
        CHECK(std::memcmp(got, want, sizeof(float) * static_cast<std::size_t>(D)) == 0);
    }

    LmExample bad;
    bad.ids = {Tokenizer::kBos, 5};
    bad.target_begin = 0;
    CHECK_THROWS_AS(emotalk::lm_input(bad, m.decoder), DataError);
    bad.target_begin = 2;
    CHECK_THROWS_AS(emotalk::lm_input(bad, m.decoder), DataError);
}

TEST_CASE("sampled lines respect the dialogue share", "[pretrain]") {
    PretrainConfig cfg;
    cfg.max_chars = 8;

    // share 0: every sample round-trips as a transcription line
    cfg.dialogue_share = 0.0;
    Rng r1(5);
    for (int i = 0; i < 20; ++i) {
        auto ex = emotalk::sample_lm_example(r1, cfg);
        REQUIRE(ex.target_begin + 1 < ex.ids.size() + 1);
        const std::vector<std::int32_t> tgt(ex.ids.begin() + static_cast<long>(ex.target_begin),
                                            ex.ids.end() - 1);
        auto rebuilt = transcription_line(Tokenizer::decode(tgt), cfg.prompt_stage1);
        CHECK(ex.ids == rebuilt.ids);
        CHECK(ex.target_begin == rebuilt.target_begin);
    }

    // share 1: every sample round-trips as a dialogue line
    cfg.dialogue_share = 1.0;
    const auto prompt_len = Tokenizer::encode(cfg.prompt_stage2).size();
    Rng r2(5);
    for (int i = 0; i < 20; ++i) {
        auto ex = emotalk::sample_lm_example(r2, cfg);
        REQUIRE(ex.ids.size() > 2);
        REQUIRE(ex.ids[1] >= 30);
        REQUIRE(ex.ids[1] <= 34);
        REQUIRE(ex.target_begin > prompt_len + 2);
        const std::vector<std::int32_t> q_ids(
            ex.ids.begin() + 2,
            ex.ids.begin() + static_cast<long>(ex.target_begin - prompt_len));
        auto rebuilt = dialogue_line(Tokenizer::decode(q_ids),
                                     static_cast<EmotionLabel>(ex.ids[1] - 30), cfg.prompt_stage2);
        CHECK(ex.ids == rebuilt.ids);
        CHECK(ex.target_begin == rebuilt.target_begin);
    }

    // same seed, same stream
    Rng a(7), b(7);
    cfg.dialogue_share = 0.5;
    for (int i = 0; i < 10; ++i) {
        auto ea = emotalk::sample_lm_example(a, cfg);
        auto eb = emotalk::sample_lm_example(b, cfg);
        CHECK(ea.ids == eb.ids);
        CHECK(ea.target_begin == eb.target_begin);
    }
}

TEST_CASE("pretrain config validation", "[pretrain]") {
    PretrainConfig c;
    c.validate();
    c.steps = -1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = PretrainConfig{};
    c.batch_size = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = PretrainConfig{};
    c.lr = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = PretrainConfig{};
    c.max_chars = 2;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = PretrainConfig{};
    c.dialogue_share = 1.5;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = PretrainConfig{};
    c.indicator_jitter = -0.1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("pretraining touches only decoder parameters, deterministically", "[pretrain]") {
    const auto mc = tiny_model_cfg();
    PretrainConfig cfg;
    cfg.steps = 5;
    cfg.batch_size = 4;
    cfg.max_chars = 6;
    cfg.seed = 11;

    auto m1 = emotalk::pretrain_lm(mc, cfg);
    auto m2 = emotalk::pretrain_lm(mc, cfg);
    const auto s1 = snapshot(m1), s2 = snapshot(m2);
    REQUIRE(s1.size() == s2.size());
    for (const auto& [name, vals] : s1) CHECK(same_bytes(vals, s2.at(name)));

    // against the untrained init: decoder moved, everything else identical
    const auto init = snapshot(Model::init(mc, cfg.seed));
    bool decoder_moved = false;
    for (const auto& [name, vals] : s1) {
        if (name.rfind("decoder.", 0) == 0) {
            if (!same_bytes(vals, init.at(name))) decoder_moved = true;
        } else {
            CHECK(same_bytes(vals, init.at(name)));
        }
    }
    CHECK(decoder_moved);
}

TEST_CASE("pretraining loss heads down from the uniform baseline", "[pretrain][slow]") {
    const auto mc = tiny_model_cfg();
    PretrainConfig cfg;
    cfg.steps = 150;
    cfg.batch_size = 8;
    cfg.max_chars = 6;
    cfg.seed = 13;

    std::vector<double> losses;
    emotalk::pretrain_lm(mc, cfg,
                         [&](int, const emotalk::LossBreakdown& lb) { losses.push_back(lb.total); });
    REQUIRE(losses.size() == 150);
    // early average near ln(41) ~ 3.71, late average clearly below
    double early = 0.0, late = 0.0;
    for (int i = 0; i < 5; ++i) early += losses[static_cast<std::size_t>(i)];
    for (int i = 145; i < 150; ++i) late += losses[static_cast<std::size_t>(i)];
    early /= 5.0;
    late /= 5.0;
    CHECK(early > 2.5);
    CHECK(late < early * 0.8);
}
