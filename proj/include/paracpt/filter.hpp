#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "paracpt/common.hpp"
#include "paracpt/corpus.hpp"

namespace paracpt {

using Embedding = std::vector<double>;

enum class Side { source, target };

/// Maps one side of a pair to a fixed-dimension vector. Implementations must
/// be deterministic and return vectors of dimension() entries.
class EmbeddingProvider {
public:
    virtual ~EmbeddingProvider() = default;
    virtual std::size_t dimension() const = 0;
    virtual Embedding embed(const ParallelPair& pair, Side side) const = 0;
};

inline double cosine_similarity(std::span<const double> a, std::span<const double> b)
{
    if (a.size() != b.size()) {
        throw Error("cosine_similarity: dimension mismatch (" + std::to_string(a.size()) + " vs " +
                    std::to_string(b.size()) + ")");
    }
    double dot = 0.0;
    double na = 0.0;
    double nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) {
        throw Error("cosine_similarity: zero vector");
    }
    const double cos = dot / std::sqrt(na * nb);
    return std::clamp(cos, -1.0, 1.0);
}

/// Character n-gram hashing projection. Each UTF-8 byte n-gram (n = 1..3,
/// over the text padded with a boundary marker) adds +-1 to one of
/// `dimension` buckets.
class HashProjectionEmbedder final : public EmbeddingProvider {
public:
    explicit HashProjectionEmbedder(std::size_t dimension = 128, std::size_t max_n = 3)
        : dimension_(dimension), max_n_(max_n)
    {
        if (dimension_ == 0 || max_n_ == 0) {
            throw Error("HashProjectionEmbedder: dimension and n must be positive");
        }
    }

    std::size_t dimension() const override { return dimension_; }

    Embedding embed_text(std::string_view text) const
    {
        Embedding v(dimension_, 0.0);
        const std::string padded = "\x02" + std::string(text) + "\x03";
        for (std::size_t n = 1; n <= max_n_; ++n) {
            if (padded.size() < n) {
                break;
            }
            for (std::size_t i = 0; i + n <= padded.size(); ++i) {
                const std::uint64_t h = fnv1a64(std::string_view(padded).substr(i, n), fnv1a64(std::to_string(n)));
                const double sign = (h >> 63) ? -1.0 : 1.0;
                v[h % dimension_] += sign;
            }
        }
        return v;
    }

    Embedding embed(const ParallelPair& pair, Side side) const override
    {
        return embed_text(side == Side::source ? pair.source_text : pair.target_text);
    }

private:
    std::size_t dimension_;
    std::size_t max_n_;
};

/// Vectors computed elsewhere, keyed by pair id. File format: one object
/// per line with "id", "src_vec", "tgt_vec".
class PrecomputedEmbeddings final : public EmbeddingProvider {
public:
    static PrecomputedEmbeddings load(const std::string& path)
    {
        auto is = open_input(path);
        PrecomputedEmbeddings out;
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(is, line)) {
            ++line_no;
            if (trim(line).empty()) {
                continue;
            }
            try {
                auto rec = nlohmann::json::parse(line);
                auto id = rec.at("id").get<PairId>();
                auto src = rec.at("src_vec").get<Embedding>();
                auto tgt = rec.at("tgt_vec").get<Embedding>();
                out.insert(id, std::move(src), std::move(tgt));
            } catch (const nlohmann::json::exception& e) {
                throw Error("line " + std::to_string(line_no) + ": " + e.what());
            } catch (const Error& e) {
                throw Error("line " + std::to_string(line_no) + ": " + e.what());
            }
        }
        return out;
    }

    void insert(PairId id, Embedding src, Embedding tgt)
    {
        if (src.empty() || src.size() != tgt.size()) {
            throw Error("vectors for id " + std::to_string(id) + " have inconsistent dimension");
        }
        if (dimension_ == 0) {
            dimension_ = src.size();
        } else if (src.size() != dimension_) {
            throw Error("vectors for id " + std::to_string(id) + " have dimension " + std::to_string(src.size()) +
                        ", expected " + std::to_string(dimension_));
        }
        vectors_[id] = {std::move(src), std::move(tgt)};
    }

    std::size_t dimension() const override { return dimension_; }

    Embedding embed(const ParallelPair& pair, Side side) const override
    {
        auto it = vectors_.find(pair.id);
        if (it == vectors_.end()) {
            throw Error("no precomputed vector for id " + std::to_string(pair.id));
        }
        return side == Side::source ? it->second.first : it->second.second;
    }

private:
    std::size_t dimension_ = 0;
    std::map<PairId, std::pair<Embedding, Embedding>> vectors_;
};

struct SimilarityBand {
    double low;
    double high;

    SimilarityBand(double lo, double hi) : low(lo), high(hi)
    {
        if (!(-1.0 <= low && low < high && high <= 1.0)) {
            throw Error("similarity band requires -1 <= low < high <= 1");
        }
    }

    bool contains(double sim) const { return low <= sim && sim < high; }
};

inline Corpus score_corpus(const Corpus& corpus, const EmbeddingProvider& provider)
{
    Corpus out = corpus;
    for (auto& pair : out.pairs) {
        try {
            const auto src = provider.embed(pair, Side::source);
            const auto tgt = provider.embed(pair, Side::target);
            pair.similarity = cosine_similarity(src, tgt);
        } catch (const std::exception& e) {
            throw Error("scoring pair " + std::to_string(pair.id) + ": " + e.what());
        }
    }
    return out;
}

/// Keeps pairs with low <= similarity < high, in input order.
inline Corpus band_filter(const Corpus& corpus, const SimilarityBand& band)
{
    Corpus out;
    out.provenance = corpus.provenance;
    for (const auto& pair : corpus.pairs) {
        if (!pair.similarity) {
            throw Error("band_filter: pair " + std::to_string(pair.id) + " has no similarity score");
        }
        if (band.contains(*pair.similarity)) {
            out.pairs.push_back(pair);
        }
    }
    return out;
}

} // namespace paracpt
