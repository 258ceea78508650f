// paracpt command-line front end.

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "paracpt/paracpt.hpp"

namespace fs = std::filesystem;
using namespace paracpt;

namespace {

std::string read_file(const std::string& path)
{
    auto is = open_input(path, true);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::vector<std::string> read_lines(const std::string& path)
{
    auto is = open_input(path);
    std::vector<std::string> out;
    std::string line;
    while (std::getline(is, line)) {
        out.push_back(line);
    }
    return out;
}

void write_lines(const std::vector<std::string>& lines, const std::string& path)
{
    auto os = open_output(path, true);
    for (const auto& l : lines) {
        os << l << '\n';
    }
    if (!os) {
        throw Error("write failed: " + path);
    }
}

Direction corpus_direction(const Corpus& c, const std::string& what)
{
    if (c.pairs.empty()) {
        throw Error(what + " is empty");
    }
    const Direction d = c.pairs.front().direction;
    for (const auto& p : c.pairs) {
        if (p.direction != d) {
            throw Error(what + " mixes directions " + d.str() + " and " + p.direction.str());
        }
    }
    return d;
}

/// "auto" (by direction), "enja", "jaen" or "file:PATH"; a template file
/// holds the prompt text, whose last line is the response header.
PromptTemplate resolve_template(const std::string& spec, const Direction& d)
{
    if (spec == "auto") {
        return template_for(d);
    }
    if (spec == "enja") {
        return en_ja_template();
    }
    if (spec == "jaen") {
        return ja_en_template();
    }
    if (spec.starts_with("file:")) {
        const auto text = read_file(spec.substr(5));
        const auto nl = text.rfind('\n');
        const auto ph = text.find(kSourcePlaceholder);
        std::string header;
        if (nl != std::string::npos && ph != std::string::npos && nl > ph) {
            header = text.substr(nl + 1);
        } else if (ph != std::string::npos) {
            header = text.substr(ph + kSourcePlaceholder.size());
        }
        return PromptTemplate(d, text, header);
    }
    throw Error("unknown template: " + spec);
}

MarkerFormat marker_for(const std::string& name, const Direction& d)
{
    if (name == "interleaved") {
        return InterleavedMarker{};
    }
    if (name == "prefixed") {
        return complete_marker(default_prefixed_marker(), d.source, d.target);
    }
    if (name == "tagged") {
        return complete_marker(TaggedMarker{}, d.source, d.target);
    }
    if (name == "json") {
        return complete_marker(default_json_marker(), d.source, d.target);
    }
    throw Error("unknown format: " + name);
}

void print_json(const nlohmann::json& j) { std::cout << j.dump(2) << '\n'; }

// ------------------------------------------------------------------ filter

struct FilterArgs {
    std::string in, out, vectors;
    double low = 0.4, high = 0.95;
};

int run_filter(const FilterArgs& a)
{
    const auto corpus = load_pairs(a.in);
    Corpus scored;
    if (a.vectors.empty()) {
        scored = score_corpus(corpus, HashProjectionEmbedder());
    } else {
        scored = score_corpus(corpus, PrecomputedEmbeddings::load(a.vectors));
    }
    const auto kept = band_filter(scored, SimilarityBand(a.low, a.high));
    save_pairs(kept, a.out);
    std::cerr << "kept " << kept.size() << " of " << corpus.size() << " pairs\n";
    return 0;
}

// --------------------------------------------------------------- build-cpt

struct BuildCptArgs {
    std::string format = "interleaved", ordering = "mix", in_ab, in_ba, out, replay;
    double mix_fraction = 0.5, replay_fraction = 0.01;
    std::uint64_t seed = 0;
};

int run_build_cpt(const BuildCptArgs& a)
{
    const auto ab = load_pairs(a.in_ab);
    const Direction dir = corpus_direction(ab, a.in_ab);
    const Corpus ba = a.in_ba.empty() ? invert_direction(ab) : load_pairs(a.in_ba, dir.reversed());
    FormatSpec spec;
    if (a.ordering == "mono") {
        spec.ordering = MonoOrdering{};
    } else if (a.ordering == "ab") {
        spec.ordering = SingleDirectionOrdering{dir};
    } else if (a.ordering == "ba") {
        spec.ordering = SingleDirectionOrdering{dir.reversed()};
    } else if (a.ordering == "mix") {
        spec.ordering = MixOrdering{a.mix_fraction, a.seed};
    } else {
        throw Error("unknown ordering: " + a.ordering);
    }
    spec.marker = marker_for(a.format, dir);
    spec.validate();
    auto docs = build_cpt_corpus(ab, ba, spec);
    if (!a.replay.empty()) {
        docs = replay_mix(docs, load_documents(a.replay), a.replay_fraction, mix_seed(a.seed, 1));
    }
    save_documents(docs, a.out);
    std::cerr << "wrote " << docs.size() << " documents\n";
    return 0;
}

// -------------------------------------------------------------------- pack

struct PackArgs {
    std::string in, out, tokenizer = "byte";
    std::size_t context = 64;
};

int run_pack(const PackArgs& a)
{
    const auto tok = make_tokenizer(a.tokenizer);
    const auto stream = encode_stream(load_documents(a.in), *tok);
    const auto packed = pack_windows(stream, a.context);
    if (packed.warning) {
        std::cerr << "warning: " << *packed.warning << '\n';
    }
    save_packed(packed.windows, a.context, a.out);
    std::cerr << "wrote " << packed.windows.size() << " windows of " << a.context << " tokens\n";
    return 0;
}

// --------------------------------------------------------------- build-sft

struct BuildSftArgs {
    std::string in, out, tmpl = "auto", tokenizer = "byte";
};

int run_build_sft(const BuildSftArgs& a)
{
    const auto tok = make_tokenizer(a.tokenizer);
    const auto corpus = load_pairs(a.in);
    std::vector<SftExample> examples;
    examples.reserve(corpus.size());
    for (const auto& p : corpus.pairs) {
        examples.push_back(build_sft_example(p, resolve_template(a.tmpl, p.direction), *tok));
    }
    save_sft(examples, a.out);
    std::cerr << "wrote " << examples.size() << " SFT examples\n";
    return 0;
}

// ------------------------------------------------------------------- train

struct TrainArgs {
    std::string phase = "cpt", data, val, init = "random", out, schedule, adapter, tokenizer = "byte", log;
    std::optional<double> lr, warmup_ratio, weight_decay, grad_clip, beta2, stop_fraction;
    std::optional<std::size_t> batch_size, epochs, validate_every;
    std::uint64_t seed = 0;
    std::size_t context = 0, embed = 64, layers = 2, heads = 4, ffn = 256;
};

std::vector<TrainingExample> load_examples(Phase phase, const std::string& path, std::size_t& max_len)
{
    std::vector<TrainingExample> out;
    if (phase == Phase::cpt) {
        const auto packed = load_packed(path);
        for (const auto& w : packed.windows) {
            out.push_back(example_from_window(w));
        }
        max_len = std::max(max_len, packed.context);
    } else {
        for (const auto& ex : load_sft(path)) {
            out.push_back(example_from_sft(ex));
            max_len = std::max(max_len, out.back().input.size());
        }
    }
    return out;
}

int run_train(const TrainArgs& a)
{
    const Phase phase = parse_phase(a.phase);
    TrainConfig cfg = phase == Phase::cpt ? TrainConfig::cpt_defaults() : TrainConfig::sft_defaults();
    if (a.lr) cfg.peak_lr = *a.lr;
    if (a.warmup_ratio) cfg.warmup_ratio = *a.warmup_ratio;
    if (!a.schedule.empty()) cfg.schedule = parse_schedule(a.schedule);
    if (a.weight_decay) cfg.weight_decay = *a.weight_decay;
    if (a.grad_clip) cfg.grad_clip = *a.grad_clip;
    if (a.beta2) cfg.beta2 = *a.beta2;
    if (a.stop_fraction) cfg.stop_fraction = *a.stop_fraction;
    if (a.batch_size) cfg.batch_size = *a.batch_size;
    if (a.epochs) cfg.epochs = *a.epochs;
    if (a.validate_every) cfg.validate_every = *a.validate_every;
    if (!a.adapter.empty()) cfg.adapter = parse_adapter_string(a.adapter);
    cfg.seed = a.seed;
    cfg.validate();

    std::size_t max_len = 0;
    const auto data = load_examples(phase, a.data, max_len);
    const auto val = load_examples(phase, a.val, max_len);

    std::optional<Transformer<float>> model;
    if (a.init == "random") {
        ModelConfig m;
        m.vocab_size = make_tokenizer(a.tokenizer)->vocab_size();
        m.context_len = a.context > 0 ? a.context : std::max<std::size_t>(max_len, 64);
        m.embed_dim = a.embed;
        m.n_layers = a.layers;
        m.n_heads = a.heads;
        m.ffn_dim = a.ffn;
        m.seed = mix_seed(a.seed, 7);
        m.validate();
        model.emplace(m);
    } else if (a.init.starts_with("ckpt:")) {
        model.emplace(load_checkpoint<float>(a.init.substr(5)).model);
    } else {
        throw Error("--init must be 'random' or 'ckpt:PATH'");
    }

    std::ofstream log;
    if (!a.log.empty()) {
        log = open_output(a.log);
    }
    auto on_step = [&](const StepInfo& s, const Transformer<float>&) {
        if (!s.validation_loss) {
            return;
        }
        std::ostringstream line;
        line << "step " << s.step << '/' << s.total_steps << " lr " << s.lr << " train " << s.train_loss << " val "
             << *s.validation_loss;
        std::cerr << line.str() << '\n';
        if (log) {
            log << line.str() << '\n';
        }
    };
    const auto ck = train_phase(std::move(*model), data, val, cfg, on_step);
    save_checkpoint(ck, a.out);
    std::cerr << "selected step " << ck.step << " (validation loss " << ck.validation_loss << ")\n";
    return 0;
}

// --------------------------------------------------------------- translate

struct TranslateArgs {
    std::string ckpt, tmpl = "auto", shots = "0", in, out, tokenizer = "byte";
    std::size_t max_new = 64;
    std::uint64_t seed = 0;
};

int run_translate(const TranslateArgs& a)
{
    const auto tok = make_tokenizer(a.tokenizer);
    const auto ck = load_checkpoint<float>(a.ckpt);
    const auto corpus = load_pairs(a.in);
    const Direction dir = corpus_direction(corpus, a.in);
    const auto tmpl = resolve_template(a.tmpl, dir);

    std::vector<ParallelPair> shots;
    if (a.shots != "0") {
        const auto colon = a.shots.find(':');
        if (colon == std::string::npos) {
            throw Error("--shots must be 0 or K:PATH");
        }
        const auto k = static_cast<std::size_t>(std::stoul(a.shots.substr(0, colon)));
        const auto pool = load_pairs(a.shots.substr(colon + 1), dir);
        std::vector<std::size_t> idx(pool.size());
        for (std::size_t i = 0; i < idx.size(); ++i) {
            idx[i] = i;
        }
        Rng rng(a.seed);
        rng.shuffle(idx);
        for (std::size_t i = 0; i < std::min(k, idx.size()); ++i) {
            shots.push_back(pool.pairs[idx[i]]);
        }
    }
    TranslateOptions opts;
    opts.max_new_tokens = a.max_new;
    write_lines(translate_corpus(ck.model, corpus, tmpl, *tok, shots, opts), a.out);
    return 0;
}

// ------------------------------------------------------------------- synth

struct SynthArgs {
    std::string task = "cipher_plus_reversal", out_dir;
    std::uint64_t seed = 0;
    std::optional<std::size_t> n_train, n_val, n_test, n_sft, min_len, max_len, words;
};

int run_synth(const SynthArgs& a)
{
    nlohmann::json j{{"task", a.task}};
    if (a.n_train) j["n_train"] = *a.n_train;
    if (a.n_val) j["n_val"] = *a.n_val;
    if (a.n_test) j["n_test"] = *a.n_test;
    if (a.n_sft) j["n_sft"] = *a.n_sft;
    if (a.min_len) j["min_len"] = *a.min_len;
    if (a.max_len) j["max_len"] = *a.max_len;
    if (a.words) j["words_per_language"] = *a.words;
    auto spec = task_from_json(j);
    spec.seed = a.seed;
    const auto splits = generate(spec);
    fs::create_directories(a.out_dir);
    const fs::path dir(a.out_dir);
    const std::pair<const char*, const Corpus*> parts[] = {
        {"train", &splits.train}, {"val", &splits.val}, {"test", &splits.test}, {"sft", &splits.sft}};
    for (const auto& [name, corpus] : parts) {
        save_pairs(*corpus, (dir / (std::string(name) + ".ab.jsonl")).string());
        save_pairs(invert_direction(*corpus), (dir / (std::string(name) + ".ba.jsonl")).string());
    }
    std::cerr << "wrote " << splits.train.size() << '/' << splits.val.size() << '/' << splits.test.size() << '/'
              << splits.sft.size() << " train/val/test/sft pairs to " << a.out_dir << '\n';
    return 0;
}

// ---------------------------------------------------------------- evaluate

struct EvaluateArgs {
    std::string hyp, ref, baseline, pretokenizer = "whitespace", smoothing = "none", out;
    std::size_t bootstrap = 1000;
    std::uint64_t seed = 0;
    double alpha = 0.05;
};

int run_evaluate(const EvaluateArgs& a)
{
    const auto pre = parse_pretokenizer(a.pretokenizer);
    Smoothing sm;
    if (a.smoothing == "none") {
        sm = Smoothing::none;
    } else if (a.smoothing == "add_one") {
        sm = Smoothing::add_one;
    } else {
        throw Error("unknown smoothing: " + a.smoothing);
    }
    const auto hyp = read_lines(a.hyp);
    const auto ref = read_lines(a.ref);
    auto r = bleu_to_json(corpus_bleu(hyp, ref, pre, sm));
    nlohmann::json out{{"bleu", r}};
    if (!a.baseline.empty()) {
        const auto base = read_lines(a.baseline);
        out["baseline_bleu"] = bleu_to_json(corpus_bleu(base, ref, pre, sm));
        const auto sig = paired_bootstrap(hyp, base, ref, a.bootstrap, a.seed, pre, sm);
        out["significance"] = {{"test", "paired_bootstrap_one_sided"},
                               {"p_value", sig.p_value},
                               {"n_resamples", sig.n_resamples},
                               {"delta_observed", sig.delta_observed},
                               {"alpha", a.alpha},
                               {"significant", sig.significant(a.alpha)}};
    }
    if (a.out.empty()) {
        print_json(out);
    } else {
        auto os = open_output(a.out, true);
        os << out.dump(2) << '\n';
    }
    return 0;
}

// -------------------------------------------------------------- experiment

struct ExperimentArgs {
    std::string spec, out;
    std::optional<std::size_t> workers;
    bool quiet = false;
};

int run_experiment(const ExperimentArgs& a)
{
    auto spec = load_experiment(a.spec);
    if (a.workers) {
        spec.workers = *a.workers;
    }
    const auto matrix = run_experiment_matrix(spec, a.out, a.quiet ? nullptr : &std::cerr);
    std::cout << ExperimentRunner::render_table(matrix);
    bool all_ok = true;
    for (const auto& c : matrix.at("cells")) {
        all_ok = all_ok && c.at("status") == "ok";
    }
    return all_ok ? 0 : 2;
}

} // namespace

int main(int argc, char** argv)
{
#ifdef __GLIBC__
    // Keep freed training buffers in the heap instead of returning them to
    // the kernel on every step.
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
    CLI::App app{"Parallel-corpus continual pre-training toolkit"};
    app.require_subcommand(1);

    FilterArgs fa;
    auto* filter = app.add_subcommand("filter", "Keep pairs whose embedding similarity lies in [low, high)");
    filter->add_option("--in", fa.in, "Pair file")->required();
    filter->add_option("--out", fa.out, "Filtered pair file")->required();
    filter->add_option("--low", fa.low, "Inclusive lower bound")->capture_default_str();
    filter->add_option("--high", fa.high, "Exclusive upper bound")->capture_default_str();
    filter->add_option("--vectors", fa.vectors, "Precomputed vectors (id, src_vec, tgt_vec)");

    BuildCptArgs ba;
    auto* build_cpt = app.add_subcommand("build-cpt", "Format pairs into continual pre-training documents");
    build_cpt->add_option("--format", ba.format)->check(CLI::IsMember({"interleaved", "prefixed", "tagged", "json"}))
        ->capture_default_str();
    build_cpt->add_option("--ordering", ba.ordering)->check(CLI::IsMember({"mono", "ab", "ba", "mix"}))
        ->capture_default_str();
    build_cpt->add_option("--mix-fraction", ba.mix_fraction)->capture_default_str();
    build_cpt->add_option("--seed", ba.seed)->capture_default_str();
    build_cpt->add_option("--replay", ba.replay, "Document file to replay");
    build_cpt->add_option("--replay-fraction", ba.replay_fraction)->capture_default_str();
    build_cpt->add_option("--in-ab", ba.in_ab, "Pairs in direction A->B")->required();
    build_cpt->add_option("--in-ba", ba.in_ba, "Pairs in direction B->A (default: A->B inverted)");
    build_cpt->add_option("--out", ba.out)->required();

    PackArgs pa;
    auto* pack = app.add_subcommand("pack", "Tokenize documents into fixed-length training windows");
    pack->add_option("--in", pa.in, "Document file")->required();
    pack->add_option("--out", pa.out)->required();
    pack->add_option("--context", pa.context)->capture_default_str()->check(CLI::Range(2, 1 << 20));
    pack->add_option("--tokenizer", pa.tokenizer, "byte | vocab:PATH")->capture_default_str();

    BuildSftArgs sa;
    auto* build_sft = app.add_subcommand("build-sft", "Build prompt-masked fine-tuning examples");
    build_sft->add_option("--in", sa.in, "Pair file")->required();
    build_sft->add_option("--template", sa.tmpl, "auto | enja | jaen | file:PATH")->capture_default_str();
    build_sft->add_option("--tokenizer", sa.tokenizer)->capture_default_str();
    build_sft->add_option("--out", sa.out)->required();

    TrainArgs ta;
    auto* train = app.add_subcommand("train", "Run one training phase and keep the best validation checkpoint");
    train->add_option("--phase", ta.phase)->check(CLI::IsMember({"cpt", "sft"}))->capture_default_str();
    train->add_option("--data", ta.data, "Packed file (cpt) or SFT file (sft)")->required();
    train->add_option("--val", ta.val, "Validation file, same kind as --data")->required();
    train->add_option("--init", ta.init, "random | ckpt:PATH")->capture_default_str();
    train->add_option("--lr", ta.lr, "Peak learning rate");
    train->add_option("--schedule", ta.schedule, "cosine | inverse_sqrt");
    train->add_option("--warmup-ratio", ta.warmup_ratio);
    train->add_option("--weight-decay", ta.weight_decay);
    train->add_option("--grad-clip", ta.grad_clip);
    train->add_option("--beta2", ta.beta2);
    train->add_option("--batch-size", ta.batch_size);
    train->add_option("--epochs", ta.epochs);
    train->add_option("--validate-every", ta.validate_every);
    train->add_option("--stop-fraction", ta.stop_fraction);
    train->add_option("--adapter", ta.adapter, "r=16,alpha=32,dropout=0.05[,targets=q+k+v]");
    train->add_option("--seed", ta.seed)->capture_default_str();
    train->add_option("--tokenizer", ta.tokenizer, "Sets the vocabulary of a random init")->capture_default_str();
    train->add_option("--context", ta.context, "Context of a random init (default: data length)");
    train->add_option("--embed-dim", ta.embed)->capture_default_str();
    train->add_option("--layers", ta.layers)->capture_default_str();
    train->add_option("--heads", ta.heads)->capture_default_str();
    train->add_option("--ffn-dim", ta.ffn)->capture_default_str();
    train->add_option("--log", ta.log, "Also write validation lines here");
    train->add_option("--out", ta.out, "Checkpoint path")->required();

    TranslateArgs tra;
    auto* translate = app.add_subcommand("translate", "Greedy-decode translations, one per line");
    translate->add_option("--ckpt", tra.ckpt)->required();
    translate->add_option("--template", tra.tmpl, "auto | enja | jaen | file:PATH")->capture_default_str();
    translate->add_option("--shots", tra.shots, "0 | K:PATH")->capture_default_str();
    translate->add_option("--seed", tra.seed, "Seed for sampling shots")->capture_default_str();
    translate->add_option("--tokenizer", tra.tokenizer)->capture_default_str();
    translate->add_option("--max-new", tra.max_new)->capture_default_str();
    translate->add_option("--in", tra.in, "Pair file")->required();
    translate->add_option("--out", tra.out)->required();

    SynthArgs sya;
    auto* synth = app.add_subcommand("synth", "Generate a synthetic bilingual task");
    synth->add_option("--task", sya.task)
        ->check(CLI::IsMember({"substitution_cipher", "word_reversal", "cipher_plus_reversal"}))
        ->capture_default_str();
    synth->add_option("--seed", sya.seed)->capture_default_str();
    synth->add_option("--n-train", sya.n_train);
    synth->add_option("--n-val", sya.n_val);
    synth->add_option("--n-test", sya.n_test);
    synth->add_option("--n-sft", sya.n_sft);
    synth->add_option("--min-len", sya.min_len);
    synth->add_option("--max-len", sya.max_len);
    synth->add_option("--words-per-language", sya.words);
    synth->add_option("--out-dir", sya.out_dir)->required();

    EvaluateArgs ea;
    auto* evaluate = app.add_subcommand("evaluate", "Corpus BLEU with optional paired bootstrap");
    evaluate->add_option("--hyp", ea.hyp, "Hypotheses, one per line")->required();
    evaluate->add_option("--ref", ea.ref, "References, one per line")->required();
    evaluate->add_option("--baseline", ea.baseline, "Baseline hypotheses for significance");
    evaluate->add_option("--bootstrap", ea.bootstrap)->capture_default_str();
    evaluate->add_option("--seed", ea.seed)->capture_default_str();
    evaluate->add_option("--alpha", ea.alpha)->capture_default_str();
    evaluate->add_option("--pretokenizer", ea.pretokenizer, "whitespace | punctuation")->capture_default_str();
    evaluate->add_option("--smoothing", ea.smoothing, "none | add_one")->capture_default_str();
    evaluate->add_option("--out", ea.out, "Write the report here instead of stdout");

    ExperimentArgs xa;
    auto* experiment = app.add_subcommand("experiment", "Run an experiment matrix");
    experiment->add_option("--spec", xa.spec)->required();
    experiment->add_option("--out", xa.out)->required();
    experiment->add_option("--workers", xa.workers);
    experiment->add_flag("--quiet", xa.quiet);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*filter) return run_filter(fa);
        if (*build_cpt) return run_build_cpt(ba);
        if (*pack) return run_pack(pa);
        if (*build_sft) return run_build_sft(sa);
        if (*train) return run_train(ta);
        if (*translate) return run_translate(tra);
        if (*synth) return run_synth(sya);
        if (*evaluate) return run_evaluate(ea);
        if (*experiment) return run_experiment(xa);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
