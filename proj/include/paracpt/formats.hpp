#pragma once

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "paracpt/common.hpp"
#include "paracpt/corpus.hpp"

namespace paracpt {

// ---------------------------------------------------------------- orderings

struct MonoOrdering {};

struct SingleDirectionOrdering {
    Direction direction;
};

struct MixOrdering {
    double fraction_per_direction = 0.5;
    std::uint64_t seed = 0;
};

using OrderingScheme = std::variant<MonoOrdering, SingleDirectionOrdering, MixOrdering>;

// ----------------------------------------------------------------- markers

struct InterleavedMarker {};

struct PrefixedMarker {
    std::map<Direction, std::string> prefix_by_direction;
};

struct TaggedMarker {
    std::map<LanguageCode, std::string> tag_by_target_language;
};

struct JsonWrappedMarker {
    // (direction, language) -> that language's name written in the
    // direction's source language.
    std::map<std::pair<Direction, LanguageCode>, std::string> language_names;
};

using MarkerFormat = std::variant<InterleavedMarker, PrefixedMarker, TaggedMarker, JsonWrappedMarker>;

inline std::string tag_for(const LanguageCode& lang) { return "<2" + lang.str() + ">"; }

inline PrefixedMarker default_prefixed_marker()
{
    PrefixedMarker m;
    m.prefix_by_direction.emplace(Direction("en", "ja"), "translate to Japanese: ");
    m.prefix_by_direction.emplace(Direction("ja", "en"), "英語に翻訳してください: ");
    return m;
}

/// Prefix for artificial languages: "translate to <code>: ".
inline std::string synthetic_prefix(const Direction& d) { return "translate to " + d.target.str() + ": "; }

inline TaggedMarker tagged_marker_for(const std::vector<LanguageCode>& languages)
{
    TaggedMarker m;
    for (const auto& lang : languages) {
        m.tag_by_target_language.emplace(lang, tag_for(lang));
    }
    return m;
}

inline JsonWrappedMarker default_json_marker()
{
    JsonWrappedMarker m;
    const Direction enja("en", "ja");
    const Direction jaen("ja", "en");
    m.language_names[{enja, LanguageCode("en")}] = "English";
    m.language_names[{enja, LanguageCode("ja")}] = "Japanese";
    m.language_names[{jaen, LanguageCode("ja")}] = "日本語";
    m.language_names[{jaen, LanguageCode("en")}] = "英語";
    return m;
}

/// Adds prefix/tag/name entries for both directions between `a` and `b`,
/// keyed by language codes, without overriding existing entries.
inline MarkerFormat complete_marker(MarkerFormat marker, const LanguageCode& a, const LanguageCode& b)
{
    const Direction ab(a, b);
    const Direction ba(b, a);
    if (auto* p = std::get_if<PrefixedMarker>(&marker)) {
        p->prefix_by_direction.try_emplace(ab, synthetic_prefix(ab));
        p->prefix_by_direction.try_emplace(ba, synthetic_prefix(ba));
    } else if (auto* t = std::get_if<TaggedMarker>(&marker)) {
        t->tag_by_target_language.try_emplace(a, tag_for(a));
        t->tag_by_target_language.try_emplace(b, tag_for(b));
    } else if (auto* j = std::get_if<JsonWrappedMarker>(&marker)) {
        for (const auto& d : {ab, ba}) {
            j->language_names.try_emplace({d, d.source}, d.source.str());
            j->language_names.try_emplace({d, d.target}, d.target.str());
        }
    }
    return marker;
}

inline std::string marker_name(const MarkerFormat& m)
{
    static constexpr const char* names[] = {"interleaved", "prefixed", "tagged", "json"};
    return names[m.index()];
}

inline std::string ordering_name(const OrderingScheme& o)
{
    if (std::holds_alternative<MonoOrdering>(o)) {
        return "mono";
    }
    if (const auto* s = std::get_if<SingleDirectionOrdering>(&o)) {
        return s->direction.str();
    }
    return "mix";
}

struct FormatSpec {
    OrderingScheme ordering = MixOrdering{};
    MarkerFormat marker = InterleavedMarker{};
    // Joins marker, source and target segments inside one document.
    std::string separator = " ";

    void validate() const
    {
        if (std::holds_alternative<MonoOrdering>(ordering) && !std::holds_alternative<InterleavedMarker>(marker)) {
            throw Error("Mono ordering carries no direction and requires the interleaved marker");
        }
        if (const auto* mix = std::get_if<MixOrdering>(&ordering)) {
            if (!(mix->fraction_per_direction > 0.0 && mix->fraction_per_direction <= 1.0)) {
                throw Error("Mix fraction must lie in (0, 1]");
            }
        }
        if (const auto* t = std::get_if<TaggedMarker>(&marker)) {
            for (const auto& [lang, tag] : t->tag_by_target_language) {
                if (tag.size() < 4 || !tag.starts_with("<2") || !tag.ends_with(">")) {
                    throw Error("tag for " + lang.str() + " must look like <2xx>: " + tag);
                }
            }
        }
    }
};

struct CptDocument {
    std::string text;
    PairId origin_id = 0;
    std::optional<Direction> direction;

    bool operator==(const CptDocument&) const = default;
};

/// Renders one pair in the given marker format.
///   interleaved: "src tgt"
///   prefixed:    "<prefix>src tgt"
///   tagged:      "<2xx> src tgt"
///   json:        {"<L1>": "src", "<L2>": "tgt"}
inline CptDocument format_pair(const ParallelPair& pair, const MarkerFormat& marker, const std::string& separator = " ")
{
    if (trim(pair.source_text).empty() || trim(pair.target_text).empty()) {
        throw Error("format_pair: pair " + std::to_string(pair.id) + " has empty text");
    }
    const auto& dir = pair.direction;
    std::string text;
    if (std::holds_alternative<InterleavedMarker>(marker)) {
        text = pair.source_text + separator + pair.target_text;
    } else if (const auto* p = std::get_if<PrefixedMarker>(&marker)) {
        auto it = p->prefix_by_direction.find(dir);
        if (it == p->prefix_by_direction.end()) {
            throw Error("no prefix for direction " + dir.str());
        }
        text = it->second + pair.source_text + separator + pair.target_text;
    } else if (const auto* t = std::get_if<TaggedMarker>(&marker)) {
        auto it = t->tag_by_target_language.find(dir.target);
        if (it == t->tag_by_target_language.end()) {
            throw Error("no tag for target language " + dir.target.str());
        }
        text = it->second + separator + pair.source_text + separator + pair.target_text;
    } else {
        const auto& names = std::get<JsonWrappedMarker>(marker).language_names;
        auto src_name = names.find({dir, dir.source});
        auto tgt_name = names.find({dir, dir.target});
        if (src_name == names.end() || tgt_name == names.end()) {
            throw Error("no language names for direction " + dir.str());
        }
        if (src_name->second == tgt_name->second) {
            throw Error("language names for direction " + dir.str() + " collide");
        }
        auto quote = [](const std::string& s) { return nlohmann::json(s).dump(); };
        text = "{" + quote(src_name->second) + ": " + quote(pair.source_text) + ", " + quote(tgt_name->second) + ": " +
               quote(pair.target_text) + "}";
    }
    return CptDocument{std::move(text), pair.id, dir};
}

inline std::vector<CptDocument> format_corpus(const Corpus& corpus, const MarkerFormat& marker, const std::string& separator)
{
    std::vector<CptDocument> docs;
    docs.reserve(corpus.size());
    for (const auto& pair : corpus.pairs) {
        docs.push_back(format_pair(pair, marker, separator));
    }
    return docs;
}

/// Builds the continual pre-training document sequence.
/// `corpus_ab` and `corpus_ba` hold the same pairs (index-aligned) in the two
/// directions; Mono and single-direction orderings read whichever applies.
inline std::vector<CptDocument> build_cpt_corpus(const Corpus& corpus_ab, const Corpus& corpus_ba, const FormatSpec& spec)
{
    spec.validate();
    std::vector<CptDocument> docs;

    if (std::holds_alternative<MonoOrdering>(spec.ordering)) {
        docs.reserve(corpus_ab.size() * 2);
        for (const auto& p : corpus_ab.pairs) {
            docs.push_back({p.source_text, p.id, std::nullopt});
        }
        for (const auto& p : corpus_ab.pairs) {
            docs.push_back({p.target_text, p.id, std::nullopt});
        }
        return docs;
    }

    if (const auto* single = std::get_if<SingleDirectionOrdering>(&spec.ordering)) {
        const Corpus* chosen = nullptr;
        for (const Corpus* c : {&corpus_ab, &corpus_ba}) {
            if (!c->empty() && c->pairs.front().direction == single->direction) {
                chosen = c;
                break;
            }
        }
        if (chosen == nullptr) {
            throw Error("no corpus in direction " + single->direction.str());
        }
        for (const auto& p : chosen->pairs) {
            if (p.direction != single->direction) {
                throw Error("pair " + std::to_string(p.id) + " is not in direction " + single->direction.str());
            }
        }
        return format_corpus(*chosen, spec.marker, spec.separator);
    }

    const auto& mix = std::get<MixOrdering>(spec.ordering);
    const std::size_t n = corpus_ab.size();
    if (corpus_ba.size() != n) {
        throw Error("Mix requires equally sized corpora for both directions (" + std::to_string(n) + " vs " +
                    std::to_string(corpus_ba.size()) + ")");
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (corpus_ab.pairs[i].id != corpus_ba.pairs[i].id) {
            throw Error("Mix requires index-aligned corpora; ids differ at index " + std::to_string(i));
        }
        if (i > 0 && (corpus_ab.pairs[i].direction != corpus_ab.pairs[0].direction ||
                      corpus_ba.pairs[i].direction != corpus_ba.pairs[0].direction)) {
            throw Error("Mix corpora must each have a single direction");
        }
    }
    if (n > 0 && corpus_ab.pairs[0].direction != corpus_ba.pairs[0].direction.reversed()) {
        throw Error("Mix corpora must be in opposite directions");
    }

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) {
        order[i] = i;
    }
    Rng rng(mix.seed);
    rng.shuffle(order);
    const std::size_t n_ab = fraction_count(mix.fraction_per_direction, n);

    docs.reserve(n);
    for (std::size_t k = 0; k < n; ++k) {
        const auto& src = k < n_ab ? corpus_ab.pairs[order[k]] : corpus_ba.pairs[order[k]];
        docs.push_back(format_pair(src, spec.marker, spec.separator));
    }
    rng.shuffle(docs);
    return docs;
}

/// Appends ceil(fraction * |primary|) documents drawn from `replay` and
/// shuffles. Draws are without replacement unless replay is too small.
inline std::vector<CptDocument> replay_mix(const std::vector<CptDocument>& primary, const std::vector<CptDocument>& replay,
                                           double replay_fraction, std::uint64_t seed)
{
    if (primary.empty()) {
        throw Error("replay_mix: primary sequence is empty");
    }
    if (!(replay_fraction > 0.0 && replay_fraction < 1.0)) {
        throw Error("replay_mix: fraction must lie in (0, 1)");
    }
    const std::size_t count = fraction_count(replay_fraction, primary.size());
    if (count > 0 && replay.empty()) {
        throw Error("replay_mix: replay sequence is empty");
    }

    Rng rng(seed);
    std::vector<CptDocument> out = primary;
    out.reserve(primary.size() + count);
    if (count <= replay.size()) {
        std::vector<std::size_t> idx(replay.size());
        for (std::size_t i = 0; i < idx.size(); ++i) {
            idx[i] = i;
        }
        for (std::size_t i = 0; i < count; ++i) {
            const auto j = i + static_cast<std::size_t>(rng.uniform_below(idx.size() - i));
            std::swap(idx[i], idx[j]);
            out.push_back(replay[idx[i]]);
        }
    } else {
        for (std::size_t i = 0; i < count; ++i) {
            out.push_back(replay[static_cast<std::size_t>(rng.uniform_below(replay.size()))]);
        }
    }
    rng.shuffle(out);
    return out;
}

inline nlohmann::json document_to_json(const CptDocument& d)
{
    nlohmann::json j;
    j["text"] = d.text;
    if (d.direction) {
        j["direction"] = d.direction->str();
    }
    j["origin_id"] = d.origin_id;
    return j;
}

inline Direction parse_direction(const std::string& s)
{
    const auto dash = s.find('-');
    if (dash == std::string::npos) {
        throw Error("direction must look like 'en-ja': " + s);
    }
    return Direction(s.substr(0, dash), s.substr(dash + 1));
}

inline void save_documents(const std::vector<CptDocument>& docs, const std::string& path)
{
    auto os = open_output(path);
    for (const auto& d : docs) {
        os << document_to_json(d).dump() << '\n';
    }
    if (!os) {
        throw Error("write failed: " + path);
    }
}

inline std::vector<CptDocument> load_documents(const std::string& path)
{
    auto is = open_input(path);
    std::vector<CptDocument> docs;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (trim(line).empty()) {
            continue;
        }
        try {
            auto j = nlohmann::json::parse(line);
            CptDocument d;
            d.text = j.at("text").get<std::string>();
            d.origin_id = j.value("origin_id", static_cast<PairId>(docs.size()));
            if (j.contains("direction") && !j["direction"].is_null()) {
                d.direction = parse_direction(j["direction"].get<std::string>());
            }
            if (d.text.empty()) {
                throw Error("empty document text");
            }
            docs.push_back(std::move(d));
        } catch (const std::exception& e) {
            throw Error("line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return docs;
}

} // namespace paracpt
