#pragma once

#include <algorithm>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "paracpt/common.hpp"

namespace paracpt {

/// Lossless text <-> id mapping. decode() skips special ids.
class Tokenizer {
public:
    virtual ~Tokenizer() = default;
    virtual std::vector<TokenId> encode(std::string_view text) const = 0;
    virtual std::string decode(std::span<const TokenId> ids) const = 0;
    virtual std::size_t vocab_size() const = 0;
    virtual std::optional<TokenId> bos() const = 0;
    virtual TokenId eos() const = 0;
    virtual TokenId pad() const = 0;
    virtual std::string name() const = 0;

    bool is_special(TokenId id) const { return id == eos() || id == pad() || (bos() && id == *bos()); }
};

/// 256 byte values plus bos (256), eos (257) and pad (258).
class ByteTokenizer final : public Tokenizer {
public:
    static constexpr TokenId kBos = 256;
    static constexpr TokenId kEos = 257;
    static constexpr TokenId kPad = 258;

    std::vector<TokenId> encode(std::string_view text) const override
    {
        std::vector<TokenId> ids;
        ids.reserve(text.size());
        for (unsigned char c : text) {
            ids.push_back(c);
        }
        return ids;
    }

    std::string decode(std::span<const TokenId> ids) const override
    {
        std::string out;
        out.reserve(ids.size());
        for (TokenId id : ids) {
            if (id < 256) {
                out.push_back(static_cast<char>(id));
            } else if (id >= 259) {
                throw Error("byte tokenizer: id out of range: " + std::to_string(id));
            }
        }
        return out;
    }

    std::size_t vocab_size() const override { return 259; }
    std::optional<TokenId> bos() const override { return kBos; }
    TokenId eos() const override { return kEos; }
    TokenId pad() const override { return kPad; }
    std::string name() const override { return "byte"; }
};

inline std::unique_ptr<Tokenizer> byte_tokenizer() { return std::make_unique<ByteTokenizer>(); }

/// Byte tokenizer extended with multi-byte pieces matched greedily
/// (longest first). Ids: bytes 0..255, pieces 256.., then bos, eos, pad.
/// The vocab file holds one JSON string per line.
class VocabTokenizer final : public Tokenizer {
public:
    explicit VocabTokenizer(std::vector<std::string> pieces) : pieces_(std::move(pieces))
    {
        for (std::size_t i = 0; i < pieces_.size(); ++i) {
            if (pieces_[i].size() < 2) {
                throw Error("vocab piece " + std::to_string(i) + " must be at least two bytes");
            }
            if (!index_.emplace(pieces_[i], static_cast<TokenId>(256 + i)).second) {
                throw Error("duplicate vocab piece: " + pieces_[i]);
            }
            max_len_ = std::max(max_len_, pieces_[i].size());
        }
    }

    static VocabTokenizer load(const std::string& path)
    {
        auto is = open_input(path);
        std::vector<std::string> pieces;
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(is, line)) {
            ++line_no;
            if (trim(line).empty()) {
                continue;
            }
            try {
                pieces.push_back(nlohmann::json::parse(line).get<std::string>());
            } catch (const std::exception& e) {
                throw Error("vocab line " + std::to_string(line_no) + ": " + e.what());
            }
        }
        return VocabTokenizer(std::move(pieces));
    }

    std::vector<TokenId> encode(std::string_view text) const override
    {
        std::vector<TokenId> ids;
        std::size_t i = 0;
        while (i < text.size()) {
            bool matched = false;
            for (std::size_t len = std::min(max_len_, text.size() - i); len >= 2; --len) {
                auto it = index_.find(std::string(text.substr(i, len)));
                if (it != index_.end()) {
                    ids.push_back(it->second);
                    i += len;
                    matched = true;
                    break;
                }
            }
            if (!matched) {
                ids.push_back(static_cast<unsigned char>(text[i]));
                ++i;
            }
        }
        return ids;
    }

    std::string decode(std::span<const TokenId> ids) const override
    {
        std::string out;
        for (TokenId id : ids) {
            if (id < 256) {
                out.push_back(static_cast<char>(id));
            } else if (id < 256 + pieces_.size()) {
                out += pieces_[id - 256];
            } else if (id >= vocab_size()) {
                throw Error("vocab tokenizer: id out of range: " + std::to_string(id));
            }
        }
        return out;
    }

    std::size_t vocab_size() const override { return 256 + pieces_.size() + 3; }
    std::optional<TokenId> bos() const override { return static_cast<TokenId>(256 + pieces_.size()); }
    TokenId eos() const override { return static_cast<TokenId>(256 + pieces_.size() + 1); }
    TokenId pad() const override { return static_cast<TokenId>(256 + pieces_.size() + 2); }
    std::string name() const override { return "vocab"; }

private:
    std::vector<std::string> pieces_;
    std::map<std::string, TokenId, std::less<>> index_;
    std::size_t max_len_ = 0;
};

/// "byte" or "vocab:PATH".
inline std::unique_ptr<Tokenizer> make_tokenizer(const std::string& spec)
{
    if (spec == "byte") {
        return byte_tokenizer();
    }
    if (spec.starts_with("vocab:")) {
        return std::make_unique<VocabTokenizer>(VocabTokenizer::load(spec.substr(6)));
    }
    throw Error("unknown tokenizer: " + spec);
}

} // namespace paracpt
