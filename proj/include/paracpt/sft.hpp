#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "paracpt/common.hpp"
#include "paracpt/corpus.hpp"
#include "paracpt/tokenizer.hpp"

namespace paracpt {

inline constexpr std::string_view kSourcePlaceholder = "{source}";

/// A translation prompt for one direction. `text` holds exactly one
/// "{source}" placeholder and ends with `response_header`; the target
/// follows the header directly.
class PromptTemplate {
public:
    PromptTemplate(Direction direction, std::string text, std::string response_header)
        : direction_(std::move(direction)), text_(std::move(text)), response_header_(std::move(response_header))
    {
        const auto first = text_.find(kSourcePlaceholder);
        if (first == std::string::npos || text_.find(kSourcePlaceholder, first + 1) != std::string::npos) {
            throw Error("prompt template must contain exactly one {source} placeholder");
        }
        if (!text_.ends_with(response_header_)) {
            throw Error("prompt template must end with its response header");
        }
    }

    const Direction& direction() const { return direction_; }
    const std::string& text() const { return text_; }
    const std::string& response_header() const { return response_header_; }

    std::string render(std::string_view source) const
    {
        std::string out = text_;
        out.replace(out.find(kSourcePlaceholder), kSourcePlaceholder.size(), source);
        return out;
    }

private:
    Direction direction_;
    std::string text_;
    std::string response_header_;
};

inline PromptTemplate en_ja_template()
{
    return PromptTemplate(Direction("en", "ja"), "Translate this from English to Japanese:\nEnglish: {source}\nJapanese: ",
                          "Japanese: ");
}

inline PromptTemplate ja_en_template()
{
    return PromptTemplate(Direction("ja", "en"),
                          "これを日本語から英語に翻訳してください :\n日本語 : {source}\n英語 : ", "英語 : ");
}

/// Compact template for artificial language pairs:
///   "la>lb\nla: {source}\nlb: "
inline PromptTemplate synthetic_template(const Direction& d)
{
    const auto& s = d.source.str();
    const auto& t = d.target.str();
    return PromptTemplate(d, s + ">" + t + "\n" + s + ": {source}\n" + t + ": ", t + ": ");
}

inline PromptTemplate template_for(const Direction& d)
{
    if (d == Direction("en", "ja")) {
        return en_ja_template();
    }
    if (d == Direction("ja", "en")) {
        return ja_en_template();
    }
    return synthetic_template(d);
}

inline std::string render_prompt(const ParallelPair& pair, const PromptTemplate& tmpl)
{
    if (pair.direction != tmpl.direction()) {
        throw Error("render_prompt: pair " + std::to_string(pair.id) + " is " + pair.direction.str() +
                    " but template is " + tmpl.direction().str());
    }
    return tmpl.render(pair.source_text);
}

struct SftExample {
    std::vector<TokenId> input_ids;
    std::vector<std::uint8_t> loss_mask;
    std::size_t prompt_len = 0;

    bool operator==(const SftExample&) const = default;

    std::size_t supervised_count() const { return input_ids.size() - prompt_len; }
};

inline std::vector<std::uint8_t> mask_from_prompt_len(std::size_t length, std::size_t prompt_len)
{
    std::vector<std::uint8_t> mask(length, 0);
    std::fill(mask.begin() + static_cast<std::ptrdiff_t>(std::min(prompt_len, length)), mask.end(), 1);
    return mask;
}

/// prompt tokens (masked) ++ target tokens ++ eos (both supervised).
inline SftExample build_sft_example(const ParallelPair& pair, const PromptTemplate& tmpl, const Tokenizer& tok)
{
    if (pair.target_text.empty()) {
        throw Error("build_sft_example: pair " + std::to_string(pair.id) + " has empty target");
    }
    const std::string prompt = render_prompt(pair, tmpl);
    SftExample ex;
    try {
        ex.input_ids = tok.encode(prompt);
        ex.prompt_len = ex.input_ids.size();
        const auto target = tok.encode(pair.target_text);
        ex.input_ids.insert(ex.input_ids.end(), target.begin(), target.end());
    } catch (const Error&) {
        throw;
    } catch (const std::exception& e) {
        throw Error("build_sft_example: pair " + std::to_string(pair.id) + ": " + e.what());
    }
    ex.input_ids.push_back(tok.eos());
    ex.loss_mask = mask_from_prompt_len(ex.input_ids.size(), ex.prompt_len);
    return ex;
}

/// Target-only negative log-likelihood. Row i of `logits` (length x vocab,
/// row-major, unnormalised) is the prediction for token i+1, so supervised
/// token j is scored by row j-1; a supervised token at position 0 has no
/// predictor and is skipped.
template <class T>
double masked_nll(std::span<const T> logits, std::size_t vocab, const SftExample& ex)
{
    const std::size_t n = ex.input_ids.size();
    if (logits.size() != n * vocab || ex.loss_mask.size() != n) {
        throw Error("masked_nll: logits must have one row of " + std::to_string(vocab) + " per input position");
    }
    double total = 0.0;
    for (std::size_t j = 1; j < n; ++j) {
        if (!ex.loss_mask[j]) {
            continue;
        }
        const TokenId target = ex.input_ids[j];
        if (target >= vocab) {
            throw Error("masked_nll: token id out of range");
        }
        const auto row = logits.subspan((j - 1) * vocab, vocab);
        double mx = -std::numeric_limits<double>::infinity();
        for (T v : row) {
            mx = std::max(mx, static_cast<double>(v));
        }
        double sum = 0.0;
        for (T v : row) {
            sum += std::exp(static_cast<double>(v) - mx);
        }
        total += mx + std::log(sum) - static_cast<double>(row[target]);
    }
    return total;
}

// SFT file: "BFSF", u16 version, u64 example count, then per example
// u32 length, u32 prompt_len, u32 ids[length].
inline constexpr std::uint16_t kSftVersion = 1;

inline void save_sft(const std::vector<SftExample>& examples, const std::string& path)
{
    auto os = open_output(path, true);
    binio::write_magic(os, "BFSF");
    binio::write_le<std::uint16_t>(os, kSftVersion);
    binio::write_le<std::uint64_t>(os, examples.size());
    for (const auto& ex : examples) {
        binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ex.input_ids.size()));
        binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ex.prompt_len));
        for (TokenId id : ex.input_ids) {
            binio::write_le<std::uint32_t>(os, id);
        }
    }
    if (!os) {
        throw Error("write failed: " + path);
    }
}

inline std::vector<SftExample> load_sft(const std::string& path)
{
    auto is = open_input(path, true);
    binio::expect_magic(is, "BFSF", path);
    const auto version = binio::read_le<std::uint16_t>(is);
    if (version != kSftVersion) {
        throw Error(path + ": unsupported SFT version " + std::to_string(version));
    }
    const auto count = binio::read_le<std::uint64_t>(is);
    std::vector<SftExample> out(count);
    for (auto& ex : out) {
        const auto len = binio::read_le<std::uint32_t>(is);
        ex.prompt_len = binio::read_le<std::uint32_t>(is);
        if (ex.prompt_len >= len) {
            throw Error(path + ": example has no supervised tokens");
        }
        ex.input_ids.resize(len);
        for (auto& id : ex.input_ids) {
            id = binio::read_le<std::uint32_t>(is);
        }
        ex.loss_mask = mask_from_prompt_len(len, ex.prompt_len);
    }
    return out;
}

} // namespace paracpt
