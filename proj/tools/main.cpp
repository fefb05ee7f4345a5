// emotalk CLI: corpus generation, two-stage training, evaluation, inference.
// Exit codes: 0 success, 2 usage/config error, 1 runtime error.

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "emotalk/checkpoint.hpp"
#include "emotalk/datagen.hpp"
#include "emotalk/metrics.hpp"
#include "emotalk/model.hpp"
#include "emotalk/pretrain.hpp"
#include "emotalk/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& what) : std::runtime_error(what) {}
};

// Everything an invocation needs, resolved from config file + flag overrides.
struct RunConfig {
    emotalk::ModelConfig model;
    emotalk::TrainConfig train;
    std::string data_dir;
    std::string out_dir;
    bool seed_from_config = false;
};

void assign_train_field(emotalk::TrainConfig& t, const std::string& key, const json& v,
                        bool& seed_seen) {
    auto num = [&](const char* name) {
        if (!v.is_number()) throw emotalk::ConfigError("train." + std::string(name) + " must be a number");
        return v.get<double>();
    };
    auto integer = [&](const char* name) {
        if (!v.is_number_integer()) throw emotalk::ConfigError("train." + std::string(name) + " must be an integer");
        return v.get<std::int64_t>();
    };
    if (key == "alpha") t.alpha = num("alpha");
    else if (key == "lr") t.lr = num("lr");
    else if (key == "beta1") t.beta1 = num("beta1");
    else if (key == "beta2") t.beta2 = num("beta2");
    else if (key == "adam_eps") t.adam_eps = num("adam_eps");
    else if (key == "clip_norm") t.clip_norm = num("clip_norm");
    else if (key == "batch_size") t.batch_size = static_cast<int>(integer("batch_size"));
    else if (key == "steps") t.steps = static_cast<int>(integer("steps"));
    else if (key == "seed") { t.seed = static_cast<std::uint64_t>(integer("seed")); seed_seen = true; }
    else if (key == "prompt_stage1") t.prompt_stage1 = v.get<std::string>();
    else if (key == "prompt_stage2") t.prompt_stage2 = v.get<std::string>();
    else throw emotalk::ConfigError("unknown key \"" + key + "\" in train section");
}

RunConfig load_run_config(const std::optional<std::string>& path, emotalk::Stage stage) {
    RunConfig rc;
    rc.train = emotalk::TrainConfig::for_stage(stage);
    if (!path) return rc;
    std::ifstream f(*path);
    if (!f) throw UsageError("cannot read config file: " + *path);
    json j;
    try {
        j = json::parse(f);
    } catch (const json::exception& e) {
        throw emotalk::ConfigError(std::string("config file is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw emotalk::ConfigError("config file must hold a JSON object");
    json model_sections = json::object();
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& key = it.key();
        if (key == "encoder" || key == "connector" || key == "decoder") {
            model_sections[key] = it.value();
        } else if (key == "train") {
            if (!it.value().is_object()) throw emotalk::ConfigError("train section must be a JSON object");
            for (auto t = it.value().begin(); t != it.value().end(); ++t)
                assign_train_field(rc.train, t.key(), t.value(), rc.seed_from_config);
        } else if (key == "data_dir") {
            rc.data_dir = it.value().get<std::string>();
        } else if (key == "out_dir") {
            rc.out_dir = it.value().get<std::string>();
        } else {
            throw emotalk::ConfigError("unknown key \"" + key + "\" in config file");
        }
    }
    rc.model = emotalk::ModelConfig::from_json(model_sections);
    return rc;
}

std::uint64_t env_seed_or(std::uint64_t fallback) {
    const char* env = std::getenv("ECHAT_SEED");
    if (!env || !*env) return fallback;
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (end == env || *end != '\0') throw UsageError("ECHAT_SEED must be an unsigned integer");
    return static_cast<std::uint64_t>(v);
}

struct Timer {
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    bool enabled = true;
    explicit Timer(bool on) : enabled(on) {}
    void report(const char* label) const {
        if (!enabled) return;
        const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                            std::chrono::steady_clock::now() - start)
                            .count();
        std::printf("timing: %s took %lld ms\n", label, static_cast<long long>(ms));
    }
};

void require_dir_writable(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw UsageError("cannot create output directory " + dir.string() + ": " + ec.message());
    const fs::path probe = dir / ".write-probe";
    std::ofstream f(probe);
    if (!f) throw UsageError("output directory is not writable: " + dir.string());
    f.close();
    fs::remove(probe, ec);
}

fs::path split_manifest(const std::string& data_dir, const char* split) {
    return fs::path(data_dir) / split / "manifest.jsonl";
}

// -------------------------------------------------------------- gen-data

int cmd_gen_data(const std::string& kind, std::size_t n, std::uint64_t seed,
                 const std::string& out_dir, bool no_timing) {
    Timer timer(!no_timing);
    require_dir_writable(out_dir);
    const fs::path out(out_dir);
    const std::uint64_t split_seed = emotalk::hash_mix(seed, 0x73706c6974ull);

    std::size_t n_train = 0, n_valid = 0, n_test = 0;
    if (kind == "asr") {
        auto corpus = emotalk::gen_asr_corpus(n, seed);
        auto split = emotalk::split_corpus(corpus, {}, split_seed);
        n_train = split.train.size();
        n_valid = split.valid.size();
        n_test = split.test.size();
        emotalk::write_corpus_split(out / "train", "manifest.jsonl", split.train);
        emotalk::write_corpus_split(out / "valid", "manifest.jsonl", split.valid);
        emotalk::write_corpus_split(out / "test", "manifest.jsonl", split.test);
    } else {
        auto corpus = emotalk::gen_dialogue_corpus(n, seed);
        std::size_t counts[emotalk::kNumEmotions] = {};
        for (const auto& ex : corpus) ++counts[static_cast<int>(ex.emotion)];
        std::printf("emotion    count  share\n");
        for (int e = 0; e < emotalk::kNumEmotions; ++e)
            std::printf("%-9s %6zu  %.4f\n",
                        emotalk::emotion_name(static_cast<emotalk::EmotionLabel>(e)), counts[e],
                        static_cast<double>(counts[e]) / static_cast<double>(n));
        auto split = emotalk::split_corpus(corpus, {}, split_seed);
        n_train = split.train.size();
        n_valid = split.valid.size();
        n_test = split.test.size();
        emotalk::write_corpus_split(out / "train", "manifest.jsonl", split.train);
        emotalk::write_corpus_split(out / "valid", "manifest.jsonl", split.valid);
        emotalk::write_corpus_split(out / "test", "manifest.jsonl", split.test);
    }
    std::printf("wrote %zu examples (train %zu / valid %zu / test %zu) to %s\n", n, n_train,
                n_valid, n_test, out_dir.c_str());
    timer.report("gen-data");
    return 0;
}

// -------------------------------------------------------------- pretrain

struct PretrainArgs {
    std::optional<std::string> config;
    std::optional<std::string> out_ckpt;
    std::optional<std::string> log_path;
    std::optional<std::uint64_t> seed;
    std::optional<int> steps;
    std::optional<int> batch_size;
    std::optional<double> lr;
    std::optional<double> dialogue_share;
    std::optional<double> indicator_jitter;
};

// Teaches the decoder the corpus language on token-only lines laid out like
// the later fine-tuning inputs; the result is the stage-0 base checkpoint.
int cmd_pretrain(const PretrainArgs& a, bool no_timing) {
    Timer timer(!no_timing);
    RunConfig rc = load_run_config(a.config, emotalk::Stage::stage1);

    emotalk::PretrainConfig pc;
    // keep the token lines aligned with whatever prompts fine-tuning will use
    pc.prompt_stage1 = rc.train.prompt_stage1;
    pc.prompt_stage2 = rc.train.prompt_stage2;
    if (a.seed) pc.seed = *a.seed;
    else if (rc.seed_from_config) pc.seed = rc.train.seed;
    else pc.seed = env_seed_or(pc.seed);
    if (a.steps) pc.steps = *a.steps;
    if (a.batch_size) pc.batch_size = *a.batch_size;
    if (a.lr) pc.lr = *a.lr;
    if (a.dialogue_share) pc.dialogue_share = *a.dialogue_share;
    if (a.indicator_jitter) pc.indicator_jitter = *a.indicator_jitter;

    fs::path out_path;
    if (a.out_ckpt) out_path = *a.out_ckpt;
    else if (!rc.out_dir.empty()) out_path = fs::path(rc.out_dir) / "pretrain.ckpt";
    else throw UsageError("no output checkpoint (--out or config out_dir)");
    if (out_path.has_parent_path()) require_dir_writable(out_path.parent_path());
    const fs::path log_path = a.log_path ? fs::path(*a.log_path)
                                         : fs::path(out_path.string() + ".log.jsonl");
    try {
        pc.validate();
    } catch (const emotalk::ConfigError& e) {
        throw UsageError(e.what());
    }

    std::ofstream log(log_path);
    if (!log) throw emotalk::IoError("cannot open training log: " + log_path.string());
    auto sink = [&](int step, const emotalk::LossBreakdown& lb) {
        json j;
        j["step"] = step;
        j["total"] = lb.total;
        j["l_decoder"] = lb.l_decoder;
        j["l_emotion"] = lb.l_emotion;
        j["alpha"] = lb.alpha;
        const std::string line = j.dump();
        std::cout << line << "\n";
        log << line << "\n";
    };

    emotalk::Model trained = emotalk::pretrain_lm(rc.model, pc, sink);
    emotalk::save_checkpoint(trained, 0, out_path);
    std::printf("checkpoint: %s\nlog: %s\n", out_path.string().c_str(), log_path.string().c_str());
    timer.report("pretrain");
    return 0;
}

// -------------------------------------------------------------- train

struct TrainArgs {
    int stage = 1;
    std::optional<std::string> config;
    std::optional<std::string> data_dir;
    std::optional<std::string> init_ckpt;
    std::optional<std::string> out_ckpt;
    std::optional<std::string> log_path;
    std::optional<std::uint64_t> seed;
    std::optional<int> steps;
    std::optional<int> batch_size;
    std::optional<double> lr;
    std::optional<double> alpha;
};

int cmd_train(const TrainArgs& a, bool no_timing) {
    Timer timer(!no_timing);
    const auto stage = a.stage == 1 ? emotalk::Stage::stage1 : emotalk::Stage::stage2;
    RunConfig rc = load_run_config(a.config, stage);

    if (stage == emotalk::Stage::stage2 && !a.init_ckpt)
        throw UsageError("--stage 2 requires --init: the two-stage regime fine-tunes a stage-1 "
                         "checkpoint");
    if (a.data_dir) rc.data_dir = *a.data_dir;
    if (rc.data_dir.empty()) throw UsageError("no data directory (--data or config data_dir)");
    if (a.seed) rc.train.seed = *a.seed;
    else if (!rc.seed_from_config) rc.train.seed = env_seed_or(rc.train.seed);
    if (a.steps) rc.train.steps = *a.steps;
    if (a.batch_size) rc.train.batch_size = *a.batch_size;
    if (a.lr) rc.train.lr = *a.lr;
    if (a.alpha) rc.train.alpha = *a.alpha;

    fs::path out_path;
    if (a.out_ckpt) out_path = *a.out_ckpt;
    else if (!rc.out_dir.empty())
        out_path = fs::path(rc.out_dir) / ("stage" + std::to_string(a.stage) + ".ckpt");
    else throw UsageError("no output checkpoint (--out or config out_dir)");

    const fs::path manifest = split_manifest(rc.data_dir, "train");
    if (!fs::exists(manifest)) throw UsageError("training manifest not found: " + manifest.string());
    if (a.init_ckpt && !fs::exists(*a.init_ckpt))
        throw UsageError("init checkpoint not found: " + *a.init_ckpt);
    if (out_path.has_parent_path()) require_dir_writable(out_path.parent_path());
    const fs::path log_path = a.log_path ? fs::path(*a.log_path)
                                         : fs::path(out_path.string() + ".log.jsonl");
    try {
        rc.train.validate();
    } catch (const emotalk::ConfigError& e) {
        throw UsageError(e.what());
    }

    std::optional<emotalk::LoadedCheckpoint> init;
    if (a.init_ckpt) init = emotalk::load_checkpoint(*a.init_ckpt);
    const emotalk::ModelConfig mcfg = init ? init->model.cfg : rc.model;

    std::ofstream log(log_path);
    if (!log) throw emotalk::IoError("cannot open training log: " + log_path.string());
    auto sink = [&](int step, const emotalk::LossBreakdown& lb) {
        json j;
        j["step"] = step;
        j["total"] = lb.total;
        j["l_decoder"] = lb.l_decoder;
        j["l_emotion"] = lb.l_emotion;
        j["alpha"] = lb.alpha;
        const std::string line = j.dump();
        std::cout << line << "\n";
        log << line << "\n";
    };

    emotalk::Model trained = emotalk::run_training(manifest, mcfg, rc.train, std::move(init), sink);
    emotalk::save_checkpoint(trained, a.stage, out_path);
    std::printf("checkpoint: %s\nlog: %s\n", out_path.string().c_str(), log_path.string().c_str());
    timer.report("train");
    return 0;
}

// -------------------------------------------------------------- eval

int cmd_eval(const std::string& ckpt, const std::string& data_dir, int stage,
             const std::string& report_path, bool echo_fixture, int max_decode_len,
             bool no_timing) {
    Timer timer(!no_timing);
    const fs::path manifest = split_manifest(data_dir, "test");
    if (!fs::exists(ckpt)) throw UsageError("checkpoint not found: " + ckpt);
    if (!fs::exists(manifest)) throw UsageError("test manifest not found: " + manifest.string());
    fs::path report_file(report_path);
    if (report_file.has_parent_path()) require_dir_writable(report_file.parent_path());

    emotalk::LoadedCheckpoint lc = emotalk::load_checkpoint(ckpt);
    if (lc.stage != stage)
        throw emotalk::ConfigError("checkpoint was produced by stage " + std::to_string(lc.stage) +
                                   ", cannot evaluate as stage " + std::to_string(stage));
    auto tcfg = emotalk::TrainConfig::for_stage(stage == 1 ? emotalk::Stage::stage1
                                                           : emotalk::Stage::stage2);
    emotalk::EvalOptions opts;
    opts.echo_fixture = echo_fixture;
    opts.max_decode_len = max_decode_len;
    const emotalk::EvalResult res = emotalk::evaluate_model(lc.model, manifest, tcfg, opts);

    std::ofstream rf(report_file);
    if (!rf) throw emotalk::IoError("cannot open report for writing: " + report_path);
    rf << res.report.to_json().dump(2) << "\n";

    fs::path pred_file = report_file;
    pred_file.replace_extension(".predictions.jsonl");
    std::ofstream pf(pred_file);
    if (!pf) throw emotalk::IoError("cannot open predictions for writing: " + pred_file.string());
    for (const auto& rec : res.predictions) pf << rec.to_json().dump() << "\n";

    std::printf("n_examples: %zu\n", res.report.n_examples);
    if (stage == 1) {
        std::printf("cer: %.4f\n", res.report.cer);
    } else {
        std::printf("bleu1: %.2f\nbleu4: %.2f\nsim_x100: %.2f\nemotion_accuracy: %.4f\n",
                    res.report.bleu1, res.report.bleu4, 100.0 * res.report.sim,
                    res.report.emotion_accuracy);
        std::printf("confusion (rows = gold, cols = predicted):\n");
        for (int g = 0; g < emotalk::kEmotionClasses; ++g) {
            std::printf("%-9s", emotalk::emotion_name(static_cast<emotalk::EmotionLabel>(g)));
            for (int p = 0; p < emotalk::kEmotionClasses; ++p)
                std::printf(" %5d", res.report.confusion[g][p]);
            std::printf("\n");
        }
    }
    std::printf("report: %s\npredictions: %s\n", report_path.c_str(), pred_file.string().c_str());
    timer.report("eval");
    return 0;
}

// -------------------------------------------------------------- infer

int cmd_infer(const std::string& ckpt, const std::string& text, const std::string& emotion,
              std::uint64_t speaker_seed, int max_decode_len, bool no_timing) {
    Timer timer(!no_timing);
    const auto label = emotalk::parse_emotion(emotion);
    if (!label)
        throw UsageError("unknown emotion \"" + emotion +
                         "\"; expected one of: cheerful, fearful, angry, sad, neutral");
    if (text.empty()) throw UsageError("--text must be nonempty");
    for (char c : text)
        if (!emotalk::Tokenizer::is_alphabet(c))
            throw UsageError(std::string("--text may use only [a-z0-9 ]; found '") + c + "'");
    if (!fs::exists(ckpt)) throw UsageError("checkpoint not found: " + ckpt);

    emotalk::LoadedCheckpoint lc = emotalk::load_checkpoint(ckpt);
    if (lc.stage != 2)
        throw emotalk::ConfigError("infer needs a stage-2 checkpoint, got stage " +
                                   std::to_string(lc.stage));
    const emotalk::Model& model = lc.model;
    const auto tcfg = emotalk::TrainConfig::for_stage(emotalk::Stage::stage2);

    emotalk::NoGradGuard ng;
    const auto speech = emotalk::speech_tensor(emotalk::synth_speech(text, *label, speaker_seed));
    const auto layers = model.encode(speech);
    const auto speech_dec = model.speech_to_decoder(layers);
    const auto emo = model.emotion_vec(layers);
    const auto emo_dec = model.emotion_to_decoder(emo);
    // The head's argmax is reported only; the decoder sees the continuous
    // emotion embedding, never a predicted label.
    const int pred = emotalk::argmax_row(model.emotion_logits(emo));

    const auto prefix = emotalk::assemble_input(emotalk::Stage::stage2, speech_dec, &emo_dec,
                                                emotalk::Tokenizer::encode(tcfg.prompt_stage2), {},
                                                model.decoder);
    const auto ids = emotalk::greedy_decode(prefix, model.decoder, model.cfg.decoder,
                                            max_decode_len, emotalk::Tokenizer::kEos);
    std::printf("response: %s\n", emotalk::Tokenizer::decode(ids).c_str());
    std::printf("predicted_emotion: %s\n",
                emotalk::emotion_name(static_cast<emotalk::EmotionLabel>(pred)));
    timer.report("infer");
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"emotalk: a desk-scale emotion-aware spoken-dialogue pipeline"};
    app.require_subcommand(1);
    bool no_timing = false;
    app.add_flag("--no-timing", no_timing, "suppress wall-clock timing lines");

    // gen-data
    std::string gd_kind, gd_out;
    std::size_t gd_n = 0;
    std::optional<std::uint64_t> gd_seed;
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic corpus with splits");
    gen->fallthrough();
    gen->add_option("--kind", gd_kind, "asr | dialogue")
        ->required()
        ->check(CLI::IsMember({"asr", "dialogue"}));
    gen->add_option("--n", gd_n, "number of examples")->required()->check(CLI::PositiveNumber);
    gen->add_option("--seed", gd_seed, "generator seed (default: ECHAT_SEED or 1)");
    gen->add_option("--out", gd_out, "output directory")->required();

    // pretrain
    PretrainArgs pa;
    auto* pretrain = app.add_subcommand("pretrain", "train the decoder LM base checkpoint");
    pretrain->fallthrough();
    pretrain->add_option("--config", pa.config, "JSON run config");
    pretrain->add_option("--out", pa.out_ckpt, "output checkpoint path");
    pretrain->add_option("--log", pa.log_path, "training log path (default: <out>.log.jsonl)");
    pretrain->add_option("--seed", pa.seed, "seed (default: config, ECHAT_SEED, or 1)");
    pretrain->add_option("--steps", pa.steps, "optimizer steps");
    pretrain->add_option("--batch-size", pa.batch_size, "lines per step");
    pretrain->add_option("--lr", pa.lr, "Adam learning rate");
    pretrain->add_option("--indicator-jitter", pa.indicator_jitter,
                         "embedding noise half-width at the indicator slot");
    pretrain->add_option("--dialogue-share", pa.dialogue_share,
                         "fraction of dialogue-format lines (default 0.5)");

    // train
    TrainArgs ta;
    auto* train = app.add_subcommand("train", "run one training stage");
    train->fallthrough();
    train->add_option("--stage", ta.stage, "1 | 2")->required()->check(CLI::IsMember({1, 2}));
    train->add_option("--config", ta.config, "JSON run config");
    train->add_option("--data", ta.data_dir, "corpus directory from gen-data");
    train->add_option("--init", ta.init_ckpt, "initial checkpoint (required for stage 2)");
    train->add_option("--out", ta.out_ckpt, "output checkpoint path");
    train->add_option("--log", ta.log_path, "training log path (default: <out>.log.jsonl)");
    train->add_option("--seed", ta.seed, "training seed (default: config, ECHAT_SEED, or 1)");
    train->add_option("--steps", ta.steps, "optimizer steps");
    train->add_option("--batch-size", ta.batch_size, "examples per step");
    train->add_option("--lr", ta.lr, "Adam learning rate");
    train->add_option("--alpha", ta.alpha, "emotion-loss weight override");

    // eval
    std::string ev_ckpt, ev_data, ev_report;
    int ev_stage = 1, ev_max_len = 32;
    bool ev_echo = false;
    auto* eval = app.add_subcommand("eval", "score a checkpoint on the test split");
    eval->fallthrough();
    eval->add_option("--ckpt", ev_ckpt, "checkpoint to evaluate")->required();
    eval->add_option("--data", ev_data, "corpus directory from gen-data")->required();
    eval->add_option("--stage", ev_stage, "1 | 2")->required()->check(CLI::IsMember({1, 2}));
    eval->add_option("--report", ev_report, "report JSON output path")->required();
    eval->add_flag("--echo-fixture", ev_echo, "score gold responses against themselves");
    eval->add_option("--max-decode-len", ev_max_len, "greedy decoding cap")
        ->check(CLI::PositiveNumber);

    // infer
    std::string in_ckpt, in_text, in_emotion;
    std::uint64_t in_speaker = 0;
    int in_max_len = 16;
    auto* infer = app.add_subcommand("infer", "respond to one synthesized utterance");
    infer->fallthrough();
    infer->add_option("--ckpt", in_ckpt, "stage-2 checkpoint")->required();
    infer->add_option("--text", in_text, "question text ([a-z0-9 ])")->required();
    infer->add_option("--emotion", in_emotion, "cheerful | fearful | angry | sad | neutral")
        ->required();
    infer->add_option("--speaker-seed", in_speaker, "speaker jitter seed");
    infer->add_option("--max-decode-len", in_max_len, "greedy decoding cap")
        ->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    }

    try {
        if (gen->parsed()) {
            std::uint64_t seed = gd_seed ? *gd_seed : env_seed_or(1);
            return cmd_gen_data(gd_kind, gd_n, seed, gd_out, no_timing);
        }
        if (pretrain->parsed()) return cmd_pretrain(pa, no_timing);
        if (train->parsed()) return cmd_train(ta, no_timing);
        if (eval->parsed())
            return cmd_eval(ev_ckpt, ev_data, ev_stage, ev_report, ev_echo, ev_max_len, no_timing);
        if (infer->parsed())
            return cmd_infer(in_ckpt, in_text, in_emotion, in_speaker, in_max_len, no_timing);
        std::cerr << "usage error: no subcommand\n";
        return 2;
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const emotalk::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
