#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <future>
#include <iomanip>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "paracpt/bleu.hpp"
#include "paracpt/common.hpp"
#include "paracpt/corpus.hpp"
#include "paracpt/decode.hpp"
#include "paracpt/formats.hpp"
#include "paracpt/model.hpp"
#include "paracpt/packing.hpp"
#include "paracpt/sft.hpp"
#include "paracpt/synthetic.hpp"
#include "paracpt/tokenizer.hpp"
#include "paracpt/trainer.hpp"

namespace paracpt {

using nlohmann::json;

// ------------------------------------------------------------ config I/O

/// "r=16,alpha=32,dropout=0.05[,targets=q+k+v]"
inline AdapterSpec parse_adapter_string(const std::string& s)
{
    AdapterSpec a;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto eq = item.find('=');
        if (eq == std::string::npos) {
            throw Error("adapter option must be key=value: " + item);
        }
        const std::string key(trim(item.substr(0, eq)));
        const std::string value(trim(item.substr(eq + 1)));
        if (key == "r" || key == "rank") {
            a.rank = static_cast<std::size_t>(std::stoul(value));
        } else if (key == "alpha") {
            a.alpha = std::stod(value);
        } else if (key == "dropout") {
            a.dropout = std::stod(value);
        } else if (key == "targets") {
            a.targets.clear();
            std::stringstream ts(value);
            std::string t;
            while (std::getline(ts, t, '+')) {
                a.targets.insert(parse_role(t));
            }
        } else {
            throw Error("unknown adapter option: " + key);
        }
    }
    return a;
}

inline json adapter_to_json(const AdapterSpec& a)
{
    json targets = json::array();
    for (auto r : a.targets) {
        targets.push_back(role_name(r));
    }
    return json{{"rank", a.rank}, {"alpha", a.alpha}, {"dropout", a.dropout}, {"targets", targets}};
}

inline AdapterSpec adapter_from_json(const json& j)
{
    if (j.is_string()) {
        return parse_adapter_string(j.get<std::string>());
    }
    AdapterSpec a;
    a.rank = j.value("rank", a.rank);
    a.alpha = j.value("alpha", a.alpha);
    a.dropout = j.value("dropout", a.dropout);
    if (j.contains("targets")) {
        a.targets.clear();
        for (const auto& t : j.at("targets")) {
            a.targets.insert(parse_role(t.get<std::string>()));
        }
    }
    return a;
}

inline void apply_train_overrides(TrainConfig& c, const json& j)
{
    static const std::set<std::string> known = {"peak_lr", "warmup_ratio", "schedule", "weight_decay", "grad_clip",
                                                "batch_size", "epochs", "validate_every", "beta1", "beta2",
                                                "eps", "adapter"};
    for (const auto& [key, value] : j.items()) {
        if (!known.contains(key)) {
            throw Error("unknown training option: " + key);
        }
    }
    c.peak_lr = j.value("peak_lr", c.peak_lr);
    c.warmup_ratio = j.value("warmup_ratio", c.warmup_ratio);
    if (j.contains("schedule")) {
        c.schedule = parse_schedule(j.at("schedule").get<std::string>());
    }
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.validate_every = j.value("validate_every", c.validate_every);
    c.beta1 = j.value("beta1", c.beta1);
    if (j.contains("beta2")) {
        c.beta2 = j.at("beta2").get<double>();
    }
    c.eps = j.value("eps", c.eps);
    if (j.contains("adapter")) {
        if (j.at("adapter").is_null()) {
            c.adapter.reset();
        } else {
            c.adapter = adapter_from_json(j.at("adapter"));
        }
    }
}

inline json train_config_to_json(const TrainConfig& c)
{
    json j{{"phase", phase_name(c.phase)},
           {"peak_lr", c.peak_lr},
           {"warmup_ratio", c.warmup_ratio},
           {"schedule", schedule_name(c.schedule)},
           {"weight_decay", c.weight_decay},
           {"grad_clip", c.grad_clip},
           {"batch_size", c.batch_size},
           {"epochs", c.epochs},
           {"validate_every", c.validate_every},
           {"beta1", c.beta1},
           {"beta2", c.effective_beta2()},
           {"eps", c.eps},
           {"seed", c.seed},
           {"stop_fraction", c.stop_fraction}};
    j["adapter"] = c.adapter ? adapter_to_json(*c.adapter) : json(nullptr);
    return j;
}

inline json model_config_to_json(const ModelConfig& m)
{
    return json{{"vocab_size", m.vocab_size}, {"context_len", m.context_len}, {"embed_dim", m.embed_dim},
                {"n_layers", m.n_layers},     {"n_heads", m.n_heads},         {"ffn_dim", m.ffn_dim}};
}

inline ModelConfig model_config_from_json(const json& j, ModelConfig m = {})
{
    m.vocab_size = j.value("vocab_size", m.vocab_size);
    m.context_len = j.value("context_len", m.context_len);
    m.embed_dim = j.value("embed_dim", m.embed_dim);
    m.n_layers = j.value("n_layers", m.n_layers);
    m.n_heads = j.value("n_heads", m.n_heads);
    m.ffn_dim = j.value("ffn_dim", m.ffn_dim);
    m.validate();
    return m;
}

inline json task_to_json(const SyntheticTaskSpec& t)
{
    json j{{"task", task_name(t.task)}, {"vocab", t.vocab},     {"min_len", t.min_len}, {"max_len", t.max_len},
           {"n_train", t.n_train},      {"n_val", t.n_val},     {"n_test", t.n_test},   {"n_sft", t.n_sft},
           {"lang_a", t.lang_a},        {"lang_b", t.lang_b}};
    j["cipher"] = t.cipher ? json(*t.cipher) : json(nullptr);
    return j;
}

/// `words_per_language: k` keeps the first k words of each half of the
/// default lexicon; `vocab` gives the full list explicitly.
inline SyntheticTaskSpec task_from_json(const json& j)
{
    SyntheticTaskSpec t;
    if (j.contains("task")) {
        t.task = parse_task(j.at("task").get<std::string>());
    }
    if (j.contains("vocab")) {
        t.vocab = j.at("vocab").get<std::vector<std::string>>();
    } else if (j.contains("words_per_language")) {
        const auto k = j.at("words_per_language").get<std::size_t>();
        const auto full = default_vocab();
        const std::size_t half = full.size() / 2;
        if (k < 4 || k > half) {
            throw Error("words_per_language must lie in [4, " + std::to_string(half) + "]");
        }
        t.vocab.assign(full.begin(), full.begin() + static_cast<std::ptrdiff_t>(k));
        t.vocab.insert(t.vocab.end(), full.begin() + static_cast<std::ptrdiff_t>(half),
                       full.begin() + static_cast<std::ptrdiff_t>(half + k));
    }
    t.min_len = j.value("min_len", t.min_len);
    t.max_len = j.value("max_len", t.max_len);
    t.n_train = j.value("n_train", t.n_train);
    t.n_val = j.value("n_val", t.n_val);
    t.n_test = j.value("n_test", t.n_test);
    t.n_sft = j.value("n_sft", t.n_sft);
    t.lang_a = j.value("lang_a", t.lang_a);
    t.lang_b = j.value("lang_b", t.lang_b);
    if (j.contains("cipher") && !j.at("cipher").is_null()) {
        t.cipher = j.at("cipher").get<std::vector<std::size_t>>();
    }
    t.validate();
    return t;
}

// -------------------------------------------------------- experiment spec

struct ReplaySpec {
    std::string ordering = "ab";
    std::string marker = "interleaved";
    double fraction = 0.01;
};

struct CptStageSpec {
    std::string ordering = "mix"; // mono | ab | ba | mix
    std::string marker = "interleaved";
    double mix_fraction = 0.5;
    std::optional<ReplaySpec> replay;
    double stop_fraction = 1.0;
    json train = json::object();
};

struct CellSpec {
    std::string name;
    std::vector<CptStageSpec> cpt;
    bool sft = true;
    json sft_train = json::object();
    std::size_t shots = 0;
    std::vector<std::string> eval{"ab", "ba"};
    json raw;
};

struct ExperimentSpec {
    std::string name = "experiment";
    SyntheticTaskSpec task;
    ModelConfig model;
    std::string tokenizer = "byte";
    TrainConfig cpt = TrainConfig::cpt_defaults();
    TrainConfig sft = TrainConfig::sft_defaults();
    std::vector<std::uint64_t> seeds{0, 1, 2};
    std::vector<std::string> sft_directions{"ab", "ba"};
    std::size_t max_new_tokens = 64;
    std::size_t bootstrap = 1000;
    double alpha = 0.05;
    PreTokenizer pretokenizer = PreTokenizer::whitespace;
    std::optional<std::string> baseline;
    std::size_t workers = 1;
    std::vector<CellSpec> cells;
};

inline void check_direction_name(const std::string& d)
{
    if (d != "ab" && d != "ba") {
        throw Error("direction must be 'ab' or 'ba': " + d);
    }
}

inline CptStageSpec stage_from_json(const json& j)
{
    CptStageSpec s;
    s.ordering = j.value("ordering", s.ordering);
    s.marker = j.value("marker", s.marker);
    s.mix_fraction = j.value("mix_fraction", s.mix_fraction);
    s.stop_fraction = j.value("stop_fraction", s.stop_fraction);
    if (j.contains("replay") && !j.at("replay").is_null()) {
        const auto& r = j.at("replay");
        ReplaySpec rs;
        rs.ordering = r.value("ordering", rs.ordering);
        rs.marker = r.value("marker", rs.marker);
        rs.fraction = r.value("fraction", rs.fraction);
        s.replay = rs;
    }
    if (j.contains("train")) {
        s.train = j.at("train");
    }
    if (!(s.stop_fraction > 0.0 && s.stop_fraction <= 1.0)) {
        throw Error("stop_fraction must lie in (0, 1]");
    }
    return s;
}

inline ExperimentSpec parse_experiment(const json& j)
{
    ExperimentSpec e;
    e.name = j.value("name", e.name);
    if (j.contains("task")) {
        e.task = task_from_json(j.at("task"));
    }
    if (j.contains("model")) {
        e.model = model_config_from_json(j.at("model"));
    }
    e.tokenizer = j.value("tokenizer", e.tokenizer);
    if (j.contains("cpt")) {
        apply_train_overrides(e.cpt, j.at("cpt"));
    }
    if (j.contains("sft")) {
        apply_train_overrides(e.sft, j.at("sft"));
    }
    if (j.contains("seeds")) {
        e.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    }
    if (e.seeds.empty()) {
        throw Error("experiment needs at least one seed");
    }
    if (j.contains("sft_directions")) {
        e.sft_directions = j.at("sft_directions").get<std::vector<std::string>>();
    }
    for (const auto& d : e.sft_directions) {
        check_direction_name(d);
    }
    e.max_new_tokens = j.value("max_new_tokens", e.max_new_tokens);
    e.bootstrap = j.value("bootstrap", e.bootstrap);
    e.alpha = j.value("alpha", e.alpha);
    if (j.contains("pretokenizer")) {
        e.pretokenizer = parse_pretokenizer(j.at("pretokenizer").get<std::string>());
    }
    if (j.contains("baseline") && !j.at("baseline").is_null()) {
        e.baseline = j.at("baseline").get<std::string>();
    }
    e.workers = j.value("workers", e.workers);
    std::set<std::string> names;
    for (const auto& cj : j.at("cells")) {
        CellSpec c;
        c.raw = cj;
        c.name = cj.at("name").get<std::string>();
        if (!names.insert(c.name).second) {
            throw Error("duplicate cell name: " + c.name);
        }
        for (const auto& sj : cj.value("cpt", json::array())) {
            c.cpt.push_back(stage_from_json(sj));
        }
        if (cj.contains("sft")) {
            if (cj.at("sft").is_boolean()) {
                c.sft = cj.at("sft").get<bool>();
            } else {
                c.sft = true;
                c.sft_train = cj.at("sft");
            }
        }
        c.shots = cj.value("shots", c.shots);
        if (cj.contains("eval")) {
            c.eval = cj.at("eval").get<std::vector<std::string>>();
        }
        for (const auto& d : c.eval) {
            check_direction_name(d);
        }
        e.cells.push_back(std::move(c));
    }
    if (e.cells.empty()) {
        throw Error("experiment has no cells");
    }
    if (e.baseline && !names.contains(*e.baseline)) {
        throw Error("baseline cell not found: " + *e.baseline);
    }
    return e;
}

inline ExperimentSpec load_experiment(const std::string& path)
{
    auto is = open_input(path);
    try {
        return parse_experiment(json::parse(is));
    } catch (const json::exception& ex) {
        throw Error(path + ": " + ex.what());
    }
}

// ----------------------------------------------------------------- runner

struct CellSeedResult {
    bool ok = false;
    std::string error;
    std::map<std::string, BleuReport> bleu;
    std::map<std::string, std::vector<std::string>> hyps;
};

inline json bleu_to_json(const BleuReport& r)
{
    return json{{"score", r.score},
                {"precisions", r.precisions},
                {"brevity_penalty", r.brevity_penalty},
                {"hyp_len", r.hyp_len},
                {"ref_len", r.ref_len},
                {"smoothing", r.smoothing == Smoothing::none ? "none" : "add_one"},
                {"pretokenizer", pretokenizer_name(r.pretokenizer)}};
}

inline BleuReport bleu_from_json(const json& j)
{
    BleuReport r;
    r.score = j.at("score").get<double>();
    r.precisions = j.at("precisions").get<std::array<double, kBleuOrder>>();
    r.brevity_penalty = j.at("brevity_penalty").get<double>();
    r.hyp_len = j.at("hyp_len").get<std::size_t>();
    r.ref_len = j.at("ref_len").get<std::size_t>();
    r.smoothing = j.at("smoothing").get<std::string>() == "none" ? Smoothing::none : Smoothing::add_one;
    r.pretokenizer = parse_pretokenizer(j.at("pretokenizer").get<std::string>());
    return r;
}

/// Runs every (cell, seed) pipeline: synthesize data, run the cell's CPT
/// stages, optionally SFT, translate the test split and score it.
/// Intermediate checkpoints live under <out>/stages/<key>, keyed by a hash
/// of everything that determines them, and per-cell results under
/// <out>/cells/<key> (CBOR, so undecodable hypothesis bytes survive); both
/// are reused when present.
class ExperimentRunner {
public:
    ExperimentRunner(ExperimentSpec spec, std::filesystem::path out_dir, std::ostream* log = nullptr)
        : spec_(std::move(spec)), out_(std::move(out_dir)), log_(log), tok_(make_tokenizer(spec_.tokenizer))
    {
        if (spec_.model.vocab_size != tok_->vocab_size()) {
            spec_.model.vocab_size = tok_->vocab_size();
        }
        spec_.model.validate();
        plan_snapshots();
    }

    const ExperimentSpec& spec() const { return spec_; }

    /// Runs all pending work and writes matrix.json and matrix.txt.
    json run()
    {
        std::filesystem::create_directories(out_ / "stages");
        std::filesystem::create_directories(out_ / "cells");
        struct Job {
            std::size_t cell;
            std::size_t seed_index;
        };
        std::vector<Job> jobs;
        for (std::size_t s = 0; s < spec_.seeds.size(); ++s) {
            for (std::size_t c = 0; c < spec_.cells.size(); ++c) {
                jobs.push_back({c, s});
            }
        }
        results_.assign(spec_.cells.size(), std::vector<CellSeedResult>(spec_.seeds.size()));
        std::atomic<std::size_t> next{0};
        auto worker = [&] {
            for (std::size_t i = next++; i < jobs.size(); i = next++) {
                const auto& job = jobs[i];
                results_[job.cell][job.seed_index] = run_cell(spec_.cells[job.cell], spec_.seeds[job.seed_index]);
            }
        };
        const std::size_t n_workers = std::max<std::size_t>(1, std::min(spec_.workers, jobs.size()));
        if (n_workers == 1) {
            worker();
        } else {
            std::vector<std::thread> threads;
            for (std::size_t w = 0; w < n_workers; ++w) {
                threads.emplace_back(worker);
            }
            for (auto& t : threads) {
                t.join();
            }
        }
        auto matrix = assemble();
        write_text(out_ / "matrix.json", matrix.dump(2) + "\n");
        write_text(out_ / "matrix.txt", render_table(matrix));
        return matrix;
    }

    std::string cell_key(const CellSpec& cell) const
    {
        json j{{"cell", cell.raw},
               {"common", common_json()},
               {"sft", train_config_to_json(spec_.sft)},
               {"sft_directions", spec_.sft_directions},
               {"max_new_tokens", spec_.max_new_tokens},
               {"pretokenizer", pretokenizer_name(spec_.pretokenizer)}};
        return hex64(fnv1a64(j.dump()));
    }

    std::filesystem::path cell_result_path(const CellSpec& cell, std::uint64_t seed) const
    {
        return out_ / "cells" / (cell.name + "-" + cell_key(cell)) / ("seed" + std::to_string(seed) + ".cbor");
    }

private:
    struct SeedData {
        SyntheticSplits splits;
        Corpus train_ba;
        Corpus val_ba;
        std::vector<TrainingExample> sft_train;
        std::vector<TrainingExample> sft_val;
    };

    void note(const std::string& msg) const
    {
        if (log_ != nullptr) {
            std::lock_guard lock(log_mutex_);
            *log_ << msg << std::endl;
        }
    }

    static void write_text(const std::filesystem::path& path, const std::string& text)
    {
        const auto tmp = path.string() + ".tmp";
        {
            auto os = open_output(tmp, true);
            os << text;
            if (!os) {
                throw Error("write failed: " + tmp);
            }
        }
        std::filesystem::rename(tmp, path);
    }

    json common_json() const
    {
        return json{{"task", task_to_json(spec_.task)},
                    {"model", model_config_to_json(spec_.model)},
                    {"tokenizer", tok_->name()}};
    }

    Direction direction(const std::string& name) const
    {
        return name == "ab" ? spec_.task.direction() : spec_.task.direction().reversed();
    }

    MarkerFormat marker(const std::string& name) const
    {
        const LanguageCode a(spec_.task.lang_a);
        const LanguageCode b(spec_.task.lang_b);
        if (name == "interleaved") {
            return InterleavedMarker{};
        }
        if (name == "prefixed") {
            return complete_marker(PrefixedMarker{}, a, b);
        }
        if (name == "tagged") {
            return complete_marker(TaggedMarker{}, a, b);
        }
        if (name == "json") {
            return complete_marker(JsonWrappedMarker{}, a, b);
        }
        throw Error("unknown marker format: " + name);
    }

    FormatSpec format(const std::string& ordering, const std::string& marker_name_, double mix_fraction,
                      std::uint64_t seed) const
    {
        FormatSpec f;
        if (ordering == "mono") {
            f.ordering = MonoOrdering{};
        } else if (ordering == "ab" || ordering == "ba") {
            f.ordering = SingleDirectionOrdering{direction(ordering)};
        } else if (ordering == "mix") {
            f.ordering = MixOrdering{mix_fraction, seed};
        } else {
            throw Error("unknown ordering: " + ordering);
        }
        f.marker = marker(marker_name_);
        f.validate();
        return f;
    }

    // ---- stage keys

    json stage_json(const CptStageSpec& s, std::size_t index) const
    {
        json j{{"ordering", s.ordering}, {"marker", s.marker}, {"mix_fraction", s.mix_fraction}, {"index", index}};
        j["replay"] = s.replay ? json{{"ordering", s.replay->ordering},
                                      {"marker", s.replay->marker},
                                      {"fraction", s.replay->fraction}}
                               : json(nullptr);
        j["train"] = train_config_to_json(stage_train_config(s, index, 0));
        return j;
    }

    TrainConfig stage_train_config(const CptStageSpec& s, std::size_t index, std::uint64_t seed) const
    {
        TrainConfig c = spec_.cpt;
        c.phase = Phase::cpt;
        apply_train_overrides(c, s.train);
        c.seed = mix_seed(seed, 100 + index);
        c.stop_fraction = 1.0;
        return c;
    }

    static std::string fraction_tag(double f)
    {
        std::ostringstream os;
        os << std::setprecision(6) << f;
        return os.str();
    }

    // Key of the run that trains stage `n-1` of `stages` (before choosing a
    // stop fraction); the checkpoint id appends "@fraction".
    std::string stage_run_key(const std::vector<CptStageSpec>& stages, std::size_t n, std::uint64_t seed) const
    {
        json j{{"common", common_json()}, {"seed", seed}, {"cpt_defaults", train_config_to_json(spec_.cpt)}};
        json chain = json::array();
        for (std::size_t i = 0; i < n; ++i) {
            auto sj = stage_json(stages[i], i);
            if (i + 1 < n) {
                sj["stop_fraction"] = stages[i].stop_fraction;
            }
            chain.push_back(sj);
        }
        j["chain"] = chain;
        return hex64(fnv1a64(j.dump()));
    }

    void plan_snapshots()
    {
        for (std::uint64_t seed : spec_.seeds) {
            for (const auto& cell : spec_.cells) {
                for (std::size_t n = 1; n <= cell.cpt.size(); ++n) {
                    snapshot_fractions_[stage_run_key(cell.cpt, n, seed)].insert(cell.cpt[n - 1].stop_fraction);
                }
            }
        }
    }

    // ---- data

    std::shared_ptr<const SeedData> seed_data(std::uint64_t seed)
    {
        std::shared_future<std::shared_ptr<const SeedData>> fut;
        std::promise<std::shared_ptr<const SeedData>> promise;
        bool owner = false;
        {
            std::lock_guard lock(mutex_);
            auto it = data_.find(seed);
            if (it == data_.end()) {
                fut = promise.get_future().share();
                data_.emplace(seed, fut);
                owner = true;
            } else {
                fut = it->second;
            }
        }
        if (owner) {
            try {
                promise.set_value(build_seed_data(seed));
            } catch (...) {
                promise.set_exception(std::current_exception());
            }
        }
        return fut.get();
    }

    std::shared_ptr<const SeedData> build_seed_data(std::uint64_t seed) const
    {
        auto d = std::make_shared<SeedData>();
        SyntheticTaskSpec t = spec_.task;
        t.seed = seed;
        d->splits = generate(t);
        d->train_ba = invert_direction(d->splits.train);
        d->val_ba = invert_direction(d->splits.val);
        for (const auto& name : spec_.sft_directions) {
            const Corpus sft = name == "ab" ? d->splits.sft : invert_direction(d->splits.sft);
            const Corpus val = name == "ab" ? d->splits.val : d->val_ba;
            const auto tmpl = template_for(direction(name));
            for (const auto& p : sft.pairs) {
                d->sft_train.push_back(example_from_sft(build_sft_example(p, tmpl, *tok_)));
            }
            for (const auto& p : val.pairs) {
                d->sft_val.push_back(example_from_sft(build_sft_example(p, tmpl, *tok_)));
            }
        }
        for (const auto& ex : d->sft_train) {
            if (ex.input.size() > spec_.model.context_len) {
                throw Error("SFT example of " + std::to_string(ex.input.size()) + " tokens exceeds context " +
                            std::to_string(spec_.model.context_len));
            }
        }
        return d;
    }

    std::vector<CptDocument> stage_documents(const SeedData& d, const CptStageSpec& s, std::size_t index,
                                             std::uint64_t seed, bool validation) const
    {
        const Corpus& ab = validation ? d.splits.val : d.splits.train;
        const Corpus& ba = validation ? d.val_ba : d.train_ba;
        const std::uint64_t salt = (validation ? 500 : 400) + index;
        auto docs = build_cpt_corpus(ab, ba, format(s.ordering, s.marker, s.mix_fraction, mix_seed(seed, salt)));
        if (s.replay && !validation) {
            const auto replay = build_cpt_corpus(
                ab, ba, format(s.replay->ordering, s.replay->marker, 0.5, mix_seed(seed, salt + 50)));
            docs = replay_mix(docs, replay, s.replay->fraction, mix_seed(seed, salt + 60));
        }
        return docs;
    }

    std::vector<TrainingExample> windows(const std::vector<CptDocument>& docs) const
    {
        const auto packed = pack_windows(encode_stream(docs, *tok_), spec_.model.context_len);
        if (packed.windows.empty()) {
            throw Error("CPT data yields no windows of context " + std::to_string(spec_.model.context_len));
        }
        std::vector<TrainingExample> out;
        out.reserve(packed.windows.size());
        for (const auto& w : packed.windows) {
            out.push_back(example_from_window(w));
        }
        return out;
    }

    // ---- checkpoints

    Transformer<float> initial_model(std::uint64_t seed) const
    {
        ModelConfig m = spec_.model;
        m.seed = mix_seed(seed, 7);
        return Transformer<float>(m);
    }

    std::filesystem::path snapshot_path(const std::string& run_key, double fraction) const
    {
        return out_ / "stages" / (run_key + "@" + fraction_tag(fraction)) / "model.bfck";
    }

    /// Model after the first n CPT stages of `stages`.
    Transformer<float> stage_model(const std::vector<CptStageSpec>& stages, std::size_t n, std::uint64_t seed)
    {
        if (n == 0) {
            return initial_model(seed);
        }
        const auto key = stage_run_key(stages, n, seed);
        const double fraction = stages[n - 1].stop_fraction;
        std::shared_future<void> fut;
        std::promise<void> promise;
        bool owner = false;
        {
            std::lock_guard lock(mutex_);
            auto it = stage_runs_.find(key);
            if (it == stage_runs_.end()) {
                fut = promise.get_future().share();
                stage_runs_.emplace(key, fut);
                owner = true;
            } else {
                fut = it->second;
            }
        }
        if (owner) {
            try {
                run_stage(stages, n, seed, key);
                promise.set_value();
            } catch (...) {
                promise.set_exception(std::current_exception());
            }
        }
        fut.get();
        return load_checkpoint<float>(snapshot_path(key, fraction).string()).model;
    }

    void run_stage(const std::vector<CptStageSpec>& stages, std::size_t n, std::uint64_t seed, const std::string& key)
    {
        const auto& fset = snapshot_fractions_.at(key);
        const std::vector<double> fractions(fset.begin(), fset.end());
        bool all_present = true;
        for (double f : fractions) {
            all_present = all_present && std::filesystem::exists(snapshot_path(key, f));
        }
        if (all_present) {
            return;
        }
        auto parent = stage_model(stages, n - 1, seed);
        const auto data = seed_data(seed);
        const auto& stage = stages[n - 1];
        const auto train = windows(stage_documents(*data, stage, n - 1, seed, false));
        const auto val = windows(stage_documents(*data, stage, n - 1, seed, true));
        const auto cfg = stage_train_config(stage, n - 1, seed);
        note("[stage " + key + "] seed " + std::to_string(seed) + " cpt " + stage.ordering + "/" + stage.marker +
             (stage.replay ? "+replay" : "") + ": " + std::to_string(train.size()) + " windows");
        auto snaps = train_phase_snapshots(std::move(parent), train, val, cfg, fractions);
        for (std::size_t i = 0; i < fractions.size(); ++i) {
            const auto path = snapshot_path(key, fractions[i]);
            std::filesystem::create_directories(path.parent_path());
            const auto tmp = path.string() + ".tmp";
            save_checkpoint(snaps[i], tmp);
            std::filesystem::rename(tmp, path);
        }
    }

    // ---- cells

    CellSeedResult run_cell(const CellSpec& cell, std::uint64_t seed)
    {
        const auto path = cell_result_path(cell, seed);
        if (std::filesystem::exists(path)) {
            try {
                return load_cell_result(path);
            } catch (const std::exception&) {
                // recompute unreadable results
            }
        }
        CellSeedResult r;
        try {
            auto model = stage_model(cell.cpt, cell.cpt.size(), seed);
            const auto data = seed_data(seed);
            if (cell.sft) {
                TrainConfig cfg = spec_.sft;
                cfg.phase = Phase::sft;
                apply_train_overrides(cfg, cell.sft_train);
                cfg.seed = mix_seed(seed, 200);
                note("[cell " + cell.name + "] seed " + std::to_string(seed) + " sft on " +
                     std::to_string(data->sft_train.size()) + " examples");
                model = train_phase(std::move(model), data->sft_train, data->sft_val, cfg).model;
            }
            for (const auto& name : cell.eval) {
                const Direction dir = direction(name);
                const Corpus test = name == "ab" ? data->splits.test : invert_direction(data->splits.test);
                std::vector<ParallelPair> shots;
                if (cell.shots > 0) {
                    const Corpus pool = name == "ab" ? data->splits.val : data->val_ba;
                    std::vector<std::size_t> idx(pool.size());
                    for (std::size_t i = 0; i < idx.size(); ++i) {
                        idx[i] = i;
                    }
                    Rng rng(mix_seed(seed, 300));
                    rng.shuffle(idx);
                    for (std::size_t i = 0; i < std::min(cell.shots, idx.size()); ++i) {
                        shots.push_back(pool.pairs[idx[i]]);
                    }
                }
                TranslateOptions opts;
                opts.max_new_tokens = spec_.max_new_tokens;
                auto hyps = translate_corpus(model, test, template_for(dir), *tok_, shots, opts);
                std::vector<std::string> refs;
                for (const auto& p : test.pairs) {
                    refs.push_back(p.target_text);
                }
                r.bleu[name] = corpus_bleu(hyps, refs, spec_.pretokenizer);
                r.hyps[name] = std::move(hyps);
            }
            r.ok = true;
            std::filesystem::create_directories(path.parent_path());
            const auto bytes = json::to_cbor(cell_result_to_json(r));
            write_text(path, std::string(bytes.begin(), bytes.end()));
            std::ostringstream msg;
            msg << "[cell " << cell.name << "] seed " << seed << " BLEU";
            for (const auto& [name, rep] : r.bleu) {
                msg << ' ' << name << '=' << std::fixed << std::setprecision(2) << rep.score;
            }
            note(msg.str());
        } catch (const std::exception& e) {
            r = CellSeedResult{};
            r.error = e.what();
            note("[cell " + cell.name + "] seed " + std::to_string(seed) + " FAILED: " + r.error);
        }
        return r;
    }

    static json cell_result_to_json(const CellSeedResult& r)
    {
        json j{{"ok", r.ok}, {"error", r.error}};
        for (const auto& [name, rep] : r.bleu) {
            j["bleu"][name] = bleu_to_json(rep);
        }
        for (const auto& [name, h] : r.hyps) {
            j["hyps"][name] = h;
        }
        return j;
    }

    static CellSeedResult load_cell_result(const std::filesystem::path& path)
    {
        auto is = open_input(path.string(), true);
        const auto j = json::from_cbor(is);
        CellSeedResult r;
        r.ok = j.at("ok").get<bool>();
        r.error = j.at("error").get<std::string>();
        if (j.contains("bleu")) {
            for (const auto& [name, rep] : j.at("bleu").items()) {
                r.bleu[name] = bleu_from_json(rep);
            }
        }
        if (j.contains("hyps")) {
            for (const auto& [name, h] : j.at("hyps").items()) {
                r.hyps[name] = h.get<std::vector<std::string>>();
            }
        }
        return r;
    }

    // ---- matrix

    std::vector<std::string> references(std::uint64_t seed, const std::string& name)
    {
        const auto data = seed_data(seed);
        const Corpus test = name == "ab" ? data->splits.test : invert_direction(data->splits.test);
        std::vector<std::string> refs;
        for (const auto& p : test.pairs) {
            refs.push_back(p.target_text);
        }
        return refs;
    }

    json assemble()
    {
        json m;
        m["experiment"] = spec_.name;
        m["seeds"] = spec_.seeds;
        m["directions"] = {{"ab", direction("ab").str()}, {"ba", direction("ba").str()}};
        m["baseline"] = spec_.baseline ? json(*spec_.baseline) : json(nullptr);
        m["significance"] = {{"test", "paired_bootstrap_one_sided"}, {"resamples", spec_.bootstrap}, {"alpha", spec_.alpha}};
        std::optional<std::size_t> base_index;
        for (std::size_t c = 0; c < spec_.cells.size(); ++c) {
            if (spec_.baseline && spec_.cells[c].name == *spec_.baseline) {
                base_index = c;
            }
        }
        json cells = json::array();
        for (std::size_t c = 0; c < spec_.cells.size(); ++c) {
            const auto& cell = spec_.cells[c];
            json cj{{"name", cell.name}, {"config", cell.raw}};
            json errors = json::array();
            std::size_t failures = 0;
            for (std::size_t s = 0; s < spec_.seeds.size(); ++s) {
                if (!results_[c][s].ok) {
                    ++failures;
                    errors.push_back({{"seed", spec_.seeds[s]}, {"error", results_[c][s].error}});
                }
            }
            cj["status"] = failures == 0 ? "ok" : (failures == spec_.seeds.size() ? "failed" : "partial");
            cj["errors"] = errors;
            for (const auto& name : cell.eval) {
                json dj;
                json per_seed = json::array();
                json reports = json::array();
                json p_values = json::array();
                std::vector<double> scores;
                std::size_t n_sig = 0;
                for (std::size_t s = 0; s < spec_.seeds.size(); ++s) {
                    const auto& r = results_[c][s];
                    if (!r.ok || !r.bleu.contains(name)) {
                        per_seed.push_back(nullptr);
                        reports.push_back(nullptr);
                        p_values.push_back(nullptr);
                        continue;
                    }
                    scores.push_back(r.bleu.at(name).score);
                    per_seed.push_back(r.bleu.at(name).score);
                    reports.push_back(bleu_to_json(r.bleu.at(name)));
                    if (base_index && *base_index != c && results_[*base_index][s].ok &&
                        results_[*base_index][s].hyps.contains(name)) {
                        const auto sig = paired_bootstrap(r.hyps.at(name), results_[*base_index][s].hyps.at(name),
                                                          references(spec_.seeds[s], name), spec_.bootstrap,
                                                          mix_seed(spec_.seeds[s], 900), spec_.pretokenizer);
                        p_values.push_back(sig.p_value);
                        n_sig += sig.significant(spec_.alpha) ? 1 : 0;
                    } else {
                        p_values.push_back(nullptr);
                    }
                }
                dj["per_seed"] = per_seed;
                dj["reports"] = reports;
                if (!scores.empty()) {
                    double mean = 0.0;
                    for (double v : scores) {
                        mean += v;
                    }
                    mean /= static_cast<double>(scores.size());
                    double var = 0.0;
                    for (double v : scores) {
                        var += (v - mean) * (v - mean);
                    }
                    dj["mean"] = mean;
                    dj["sd"] = scores.size() > 1 ? std::sqrt(var / static_cast<double>(scores.size() - 1)) : 0.0;
                } else {
                    dj["mean"] = nullptr;
                    dj["sd"] = nullptr;
                }
                if (base_index && *base_index != c) {
                    dj["p_values"] = p_values;
                    dj["n_sig"] = n_sig;
                }
                cj["results"][name] = dj;
            }
            cells.push_back(cj);
        }
        m["cells"] = cells;
        return m;
    }

    static std::string describe_cpt(const json& config)
    {
        if (!config.contains("cpt") || config.at("cpt").empty()) {
            return "-";
        }
        std::string out;
        for (const auto& s : config.at("cpt")) {
            if (!out.empty()) {
                out += " > ";
            }
            out += s.value("ordering", std::string("mix")) + "/" + s.value("marker", std::string("interleaved"));
            if (s.contains("replay")) {
                out += "+replay";
            }
            const double f = s.value("stop_fraction", 1.0);
            if (f < 1.0) {
                out += "@" + fraction_tag(f);
            }
        }
        return out;
    }

public:
    /// Aligned text rendering of a matrix: one row per cell, CPT / SFT /
    /// shots columns, then mean (sd) BLEU and significance count per
    /// direction.
    static std::string render_table(const json& m)
    {
        std::vector<std::vector<std::string>> rows;
        std::vector<std::string> header{"cell", "CPT", "SFT", "shots"};
        const bool has_sig = !m.at("baseline").is_null();
        for (const char* d : {"ab", "ba"}) {
            header.push_back("BLEU " + m.at("directions").at(d).get<std::string>());
            if (has_sig) {
                header.push_back("#sig");
            }
        }
        rows.push_back(header);
        const std::size_t n_seeds = m.at("seeds").size();
        for (const auto& c : m.at("cells")) {
            const auto& cfg = c.at("config");
            std::vector<std::string> row{c.at("name").get<std::string>(), describe_cpt(cfg),
                                         cfg.contains("sft") && cfg.at("sft") == false ? "no" : "yes",
                                         std::to_string(cfg.value("shots", 0))};
            for (const char* d : {"ab", "ba"}) {
                std::string cellv = "n/a";
                std::string sig = "";
                if (c.contains("results") && c.at("results").contains(d)) {
                    const auto& r = c.at("results").at(d);
                    if (!r.at("mean").is_null()) {
                        std::ostringstream os;
                        os << std::fixed << std::setprecision(2) << r.at("mean").get<double>() << " ("
                           << r.at("sd").get<double>() << ")";
                        cellv = os.str();
                    } else {
                        cellv = "failed";
                    }
                    if (r.contains("n_sig")) {
                        sig = std::to_string(r.at("n_sig").get<std::size_t>()) + "/" + std::to_string(n_seeds);
                    }
                }
                row.push_back(cellv);
                if (has_sig) {
                    row.push_back(sig);
                }
            }
            if (c.at("status") != "ok") {
                row[0] += " [" + c.at("status").get<std::string>() + "]";
            }
            rows.push_back(row);
        }
        std::vector<std::size_t> width(header.size(), 0);
        for (const auto& r : rows) {
            for (std::size_t i = 0; i < r.size(); ++i) {
                width[i] = std::max(width[i], r[i].size());
            }
        }
        std::ostringstream os;
        for (std::size_t k = 0; k < rows.size(); ++k) {
            for (std::size_t i = 0; i < rows[k].size(); ++i) {
                os << std::left << std::setw(static_cast<int>(width[i])) << rows[k][i];
                os << (i + 1 < rows[k].size() ? "  " : "");
            }
            os << '\n';
            if (k == 0) {
                std::size_t total = 0;
                for (auto w : width) {
                    total += w + 2;
                }
                os << std::string(total - 2, '-') << '\n';
            }
        }
        return os.str();
    }

private:
    ExperimentSpec spec_;
    std::filesystem::path out_;
    std::ostream* log_;
    std::unique_ptr<Tokenizer> tok_;
    std::map<std::string, std::set<double>> snapshot_fractions_;
    std::vector<std::vector<CellSeedResult>> results_;
    std::mutex mutex_;
    mutable std::mutex log_mutex_;
    std::map<std::uint64_t, std::shared_future<std::shared_ptr<const SeedData>>> data_;
    std::map<std::string, std::shared_future<void>> stage_runs_;
};

inline json run_experiment_matrix(const ExperimentSpec& spec, const std::filesystem::path& out_dir,
                                  std::ostream* log = nullptr)
{
    ExperimentRunner runner(spec, out_dir, log);
    return runner.run();
}

} // namespace paracpt
