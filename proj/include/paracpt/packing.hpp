#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "paracpt/common.hpp"
#include "paracpt/formats.hpp"
#include "paracpt/tokenizer.hpp"

namespace paracpt {

struct TokenStream {
    std::vector<TokenId> ids;
    std::vector<std::size_t> boundaries; // end offset (exclusive) of each document, after its eos
};

struct PackedWindow {
    std::vector<TokenId> input_ids;
    std::vector<TokenId> target_ids;

    bool operator==(const PackedWindow&) const = default;
};

struct PackResult {
    std::vector<PackedWindow> windows;
    std::optional<std::string> warning;
};

/// Concatenates encode(text) + [eos] for each document.
inline TokenStream encode_stream(const std::vector<CptDocument>& docs, const Tokenizer& tok)
{
    if (docs.empty()) {
        throw Error("encode_stream: no documents");
    }
    TokenStream stream;
    stream.boundaries.reserve(docs.size());
    for (const auto& doc : docs) {
        std::vector<TokenId> ids;
        try {
            ids = tok.encode(doc.text);
        } catch (const std::exception& e) {
            throw Error("encode_stream: document " + std::to_string(doc.origin_id) + ": " + e.what());
        }
        stream.ids.insert(stream.ids.end(), ids.begin(), ids.end());
        stream.ids.push_back(tok.eos());
        stream.boundaries.push_back(stream.ids.size());
    }
    return stream;
}

inline std::size_t window_count(std::size_t stream_length, std::size_t context)
{
    return stream_length == 0 ? 0 : (stream_length - 1) / context;
}

/// Cuts non-overlapping windows at offsets 0, c, 2c, ... ; window k predicts
/// ids[kc+1 .. kc+c] from ids[kc .. kc+c-1]. Document boundaries are ignored
/// and the tail that cannot fill c+1 tokens is dropped.
inline PackResult pack_windows(const TokenStream& stream, std::size_t context)
{
    if (context < 2) {
        throw Error("pack_windows: context must be at least 2");
    }
    PackResult result;
    const std::size_t m = stream.ids.size();
    if (m < context + 1) {
        result.warning = "stream of " + std::to_string(m) + " tokens is shorter than context + 1 = " +
                         std::to_string(context + 1) + "; no windows produced";
        return result;
    }
    const std::size_t k = window_count(m, context);
    result.windows.reserve(k);
    for (std::size_t w = 0; w < k; ++w) {
        const auto begin = stream.ids.begin() + static_cast<std::ptrdiff_t>(w * context);
        PackedWindow win;
        win.input_ids.assign(begin, begin + static_cast<std::ptrdiff_t>(context));
        win.target_ids.assign(begin + 1, begin + 1 + static_cast<std::ptrdiff_t>(context));
        result.windows.push_back(std::move(win));
    }
    return result;
}

// Packed file: "BFPK", u16 version, u32 context, u64 window count, then per
// window input u32[c] followed by target u32[c], all little-endian.
inline constexpr std::uint16_t kPackedVersion = 1;

inline void save_packed(const std::vector<PackedWindow>& windows, std::size_t context, const std::string& path)
{
    auto os = open_output(path, true);
    binio::write_magic(os, "BFPK");
    binio::write_le<std::uint16_t>(os, kPackedVersion);
    binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(context));
    binio::write_le<std::uint64_t>(os, windows.size());
    for (const auto& w : windows) {
        if (w.input_ids.size() != context || w.target_ids.size() != context) {
            throw Error("save_packed: window length differs from context");
        }
        for (TokenId id : w.input_ids) {
            binio::write_le<std::uint32_t>(os, id);
        }
        for (TokenId id : w.target_ids) {
            binio::write_le<std::uint32_t>(os, id);
        }
    }
    if (!os) {
        throw Error("write failed: " + path);
    }
}

struct PackedFile {
    std::size_t context = 0;
    std::vector<PackedWindow> windows;
};

inline PackedFile load_packed(const std::string& path)
{
    auto is = open_input(path, true);
    binio::expect_magic(is, "BFPK", path);
    const auto version = binio::read_le<std::uint16_t>(is);
    if (version != kPackedVersion) {
        throw Error(path + ": unsupported packed version " + std::to_string(version));
    }
    PackedFile out;
    out.context = binio::read_le<std::uint32_t>(is);
    const auto count = binio::read_le<std::uint64_t>(is);
    out.windows.resize(count);
    for (auto& w : out.windows) {
        w.input_ids.resize(out.context);
        w.target_ids.resize(out.context);
        for (auto& id : w.input_ids) {
            id = binio::read_le<std::uint32_t>(is);
        }
        for (auto& id : w.target_ids) {
            id = binio::read_le<std::uint32_t>(is);
        }
    }
    return out;
}

} // namespace paracpt
