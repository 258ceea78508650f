#pragma once

#include <compare>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "paracpt/common.hpp"

namespace paracpt {

// Lowercase ASCII letters and digits, non-empty ("en", "ja", "la").
class LanguageCode {
public:
    explicit LanguageCode(std::string code) : code_(std::move(code))
    {
        if (code_.empty()) {
            throw Error("language code must be non-empty");
        }
        for (char c : code_) {
            if (!((c >= 'a' && c <= 'z') || (c >= '0' && c <= '9'))) {
                throw Error("language code must be lowercase ASCII letters/digits: '" + code_ + "'");
            }
        }
    }

    const std::string& str() const { return code_; }

    auto operator<=>(const LanguageCode&) const = default;

private:
    std::string code_;
};

struct Direction {
    LanguageCode source;
    LanguageCode target;

    Direction(LanguageCode src, LanguageCode tgt) : source(std::move(src)), target(std::move(tgt))
    {
        if (source == target) {
            throw Error("direction source and target must differ: " + source.str());
        }
    }

    Direction(std::string_view src, std::string_view tgt)
        : Direction(LanguageCode(std::string(src)), LanguageCode(std::string(tgt)))
    {}

    Direction reversed() const { return Direction(target, source); }

    std::string str() const { return source.str() + "-" + target.str(); }

    auto operator<=>(const Direction&) const = default;
};

using PairId = std::int64_t;

struct ParallelPair {
    PairId id = 0;
    std::string source_text;
    std::string target_text;
    Direction direction;
    std::optional<double> similarity;

    bool operator==(const ParallelPair&) const = default;
};

inline void validate_pair(const ParallelPair& p)
{
    if (trim(p.source_text).empty() || trim(p.target_text).empty()) {
        throw Error("pair " + std::to_string(p.id) + ": source and target text must be non-empty");
    }
    if (p.similarity && !(*p.similarity >= -1.0 && *p.similarity <= 1.0)) {
        throw Error("pair " + std::to_string(p.id) + ": similarity outside [-1, 1]");
    }
}

struct Corpus {
    std::vector<ParallelPair> pairs;
    std::string provenance;

    bool operator==(const Corpus&) const = default;

    std::size_t size() const { return pairs.size(); }
    bool empty() const { return pairs.empty(); }
};

inline void validate_corpus(const Corpus& c)
{
    std::set<PairId> seen;
    for (const auto& p : c.pairs) {
        validate_pair(p);
        if (!seen.insert(p.id).second) {
            throw Error("duplicate pair id " + std::to_string(p.id));
        }
    }
}

namespace detail {

inline Error line_error(std::size_t line_no, const std::string& msg)
{
    return Error("line " + std::to_string(line_no) + ": " + msg);
}

inline std::string required_string(const nlohmann::json& rec, const char* key, std::size_t line_no)
{
    auto it = rec.find(key);
    if (it == rec.end() || it->is_null()) {
        throw line_error(line_no, std::string("missing field '") + key + "'");
    }
    if (!it->is_string()) {
        throw line_error(line_no, std::string("field '") + key + "' must be a string");
    }
    return it->get<std::string>();
}

inline ParallelPair parse_pair_record(const std::string& line, std::size_t line_no, std::size_t record_index,
                                      const std::optional<Direction>& expected)
{
    nlohmann::json rec;
    try {
        rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
        throw line_error(line_no, std::string("malformed record: ") + e.what());
    }
    if (!rec.is_object()) {
        throw line_error(line_no, "record must be an object");
    }

    std::string src = required_string(rec, "src", line_no);
    std::string tgt = required_string(rec, "tgt", line_no);

    std::optional<std::string> src_lang;
    std::optional<std::string> tgt_lang;
    if (rec.contains("src_lang")) {
        src_lang = required_string(rec, "src_lang", line_no);
    }
    if (rec.contains("tgt_lang")) {
        tgt_lang = required_string(rec, "tgt_lang", line_no);
    }

    if (src_lang.has_value() != tgt_lang.has_value()) {
        throw line_error(line_no, "src_lang and tgt_lang must be given together");
    }
    std::optional<Direction> dir;
    if (src_lang) {
        try {
            dir.emplace(*src_lang, *tgt_lang);
        } catch (const Error& e) {
            throw line_error(line_no, e.what());
        }
    }
    if (!dir) {
        if (!expected) {
            throw line_error(line_no, "missing field 'src_lang'");
        }
        dir = expected;
    } else if (expected && *dir != *expected) {
        throw line_error(line_no, "direction " + dir->str() + " does not match expected " + expected->str());
    }

    PairId id = static_cast<PairId>(record_index);
    if (auto it = rec.find("id"); it != rec.end() && !it->is_null()) {
        if (!it->is_number_integer()) {
            throw line_error(line_no, "field 'id' must be an integer");
        }
        id = it->get<PairId>();
    }

    std::optional<double> sim;
    if (auto it = rec.find("sim"); it != rec.end() && !it->is_null()) {
        if (!it->is_number()) {
            throw line_error(line_no, "field 'sim' must be a number");
        }
        sim = it->get<double>();
    }

    ParallelPair pair{id, std::move(src), std::move(tgt), *dir, sim};
    try {
        validate_pair(pair);
    } catch (const Error& e) {
        throw line_error(line_no, e.what());
    }
    return pair;
}

inline Corpus load_pairs_impl(const std::string& path, const std::optional<Direction>& expected)
{
    auto is = open_input(path);
    Corpus corpus;
    corpus.provenance = path;
    std::set<PairId> seen;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (trim(line).empty()) {
            continue;
        }
        auto pair = parse_pair_record(line, line_no, corpus.pairs.size(), expected);
        if (!seen.insert(pair.id).second) {
            throw line_error(line_no, "duplicate id " + std::to_string(pair.id));
        }
        corpus.pairs.push_back(std::move(pair));
    }
    return corpus;
}

} // namespace detail

/// Reads a pair file (one JSON object per line). Records without language
/// keys take `direction`; records with them must agree with it. Missing ids
/// are assigned from the record's position, starting at 0.
inline Corpus load_pairs(const std::string& path, const Direction& direction)
{
    return detail::load_pairs_impl(path, direction);
}

/// Same, but every record must carry its own "src_lang"/"tgt_lang".
inline Corpus load_pairs(const std::string& path)
{
    return detail::load_pairs_impl(path, std::nullopt);
}

inline nlohmann::json pair_to_json(const ParallelPair& p)
{
    nlohmann::json out = nlohmann::json::object();
    out["id"] = p.id;
    out["src"] = p.source_text;
    out["tgt"] = p.target_text;
    out["src_lang"] = p.direction.source.str();
    out["tgt_lang"] = p.direction.target.str();
    if (p.similarity) {
        out["sim"] = *p.similarity;
    }
    return out;
}

inline void save_pairs(const Corpus& corpus, const std::string& path)
{
    auto os = open_output(path);
    for (const auto& p : corpus.pairs) {
        os << pair_to_json(p).dump(-1, ' ', false, nlohmann::json::error_handler_t::strict) << '\n';
    }
    if (!os) {
        throw Error("write failed: " + path);
    }
}

} // namespace paracpt
