#pragma once

#include <algorithm>
#include <span>
#include <string>
#include <vector>

#include "paracpt/common.hpp"
#include "paracpt/corpus.hpp"
#include "paracpt/sft.hpp"
#include "paracpt/tokenizer.hpp"

namespace paracpt {

/// Anything that can be stepped one token at a time and report next-token
/// scores; the reference transformer and hand-built test models qualify.
template <class M>
concept IncrementalModel = requires(const M& m, typename M::DecodeState& s, TokenId id) {
    { m.start_decoding() } -> std::same_as<typename M::DecodeState>;
    { m.decode_step(s, id) };
    { m.max_context() } -> std::convertible_to<std::size_t>;
};

template <class Row>
TokenId argmax_lowest(const Row& scores)
{
    TokenId best = 0;
    auto best_score = scores[0];
    for (Eigen::Index i = 1; i < static_cast<Eigen::Index>(scores.size()); ++i) {
        if (scores[i] > best_score) {
            best_score = scores[i];
            best = static_cast<TokenId>(i);
        }
    }
    return best;
}

/// Greedy generation. Stops at eos (not returned), at any of `stops` (not
/// returned), after `max_new` tokens, or when the context window is full.
template <IncrementalModel M>
std::vector<TokenId> greedy_decode(const M& model, std::span<const TokenId> prompt, std::size_t max_new, TokenId eos,
                                   std::span<const TokenId> stops = {})
{
    if (prompt.empty()) {
        throw Error("greedy_decode: prompt must be non-empty");
    }
    if (prompt.size() >= model.max_context()) {
        throw Error("greedy_decode: prompt of " + std::to_string(prompt.size()) +
                    " tokens does not fit context " + std::to_string(model.max_context()));
    }
    std::vector<TokenId> out;
    if (max_new == 0) {
        return out;
    }
    auto state = model.start_decoding();
    auto scores = model.decode_step(state, prompt[0]);
    for (std::size_t i = 1; i < prompt.size(); ++i) {
        scores = model.decode_step(state, prompt[i]);
    }
    while (out.size() < max_new) {
        const TokenId next = argmax_lowest(scores);
        if (next == eos || std::find(stops.begin(), stops.end(), next) != stops.end()) {
            break;
        }
        out.push_back(next);
        if (out.size() == max_new || prompt.size() + out.size() >= model.max_context()) {
            break;
        }
        scores = model.decode_step(state, next);
    }
    return out;
}

/// Rendered (prompt + target) blocks for each example, each followed by a
/// newline, then the query's prompt.
inline std::string few_shot_prompt(const std::vector<ParallelPair>& examples, const ParallelPair& query,
                                   const PromptTemplate& tmpl)
{
    std::string out;
    for (const auto& ex : examples) {
        if (ex.direction != query.direction) {
            throw Error("few_shot_prompt: example " + std::to_string(ex.id) + " direction " + ex.direction.str() +
                        " differs from query " + query.direction.str());
        }
        out += render_prompt(ex, tmpl);
        out += ex.target_text;
        out += '\n';
    }
    out += render_prompt(query, tmpl);
    return out;
}

struct TranslateOptions {
    std::size_t max_new_tokens = 64;
    bool stop_at_newline = true;
};

/// Greedy translations of every pair's source, with an optional fixed set
/// of in-context examples shared by all queries.
template <IncrementalModel M>
std::vector<std::string> translate_corpus(const M& model, const Corpus& corpus, const PromptTemplate& tmpl,
                                          const Tokenizer& tok, const std::vector<ParallelPair>& shots = {},
                                          const TranslateOptions& opts = {})
{
    std::vector<TokenId> stops;
    if (opts.stop_at_newline) {
        const auto nl = tok.encode("\n");
        if (nl.size() == 1) {
            stops.push_back(nl.front());
        }
    }
    std::vector<std::string> out;
    out.reserve(corpus.size());
    for (const auto& pair : corpus.pairs) {
        const auto prompt = tok.encode(few_shot_prompt(shots, pair, tmpl));
        const auto ids = greedy_decode(model, std::span<const TokenId>(prompt), opts.max_new_tokens, tok.eos(), stops);
        out.push_back(tok.decode(ids));
    }
    return out;
}

} // namespace paracpt
