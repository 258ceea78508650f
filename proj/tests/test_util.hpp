#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <unistd.h>

#include "paracpt/paracpt.hpp"

namespace paracpt::testing {

/// Fresh directory removed on destruction.
class TempDir {
public:
    TempDir()
    {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("paracpt_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() { std::filesystem::remove_all(path_); }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    std::string file(const std::string& name) const { return (path_ / name).string(); }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

inline std::string slurp(const std::string& path)
{
    std::ifstream is(path, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

inline void spit(const std::string& path, const std::string& text)
{
    std::ofstream os(path, std::ios::binary);
    os << text;
}

/// 824 parameters: 11-token vocab, d=8, one layer.
inline ModelConfig tiny_config(std::uint64_t seed = 3)
{
    ModelConfig m;
    m.vocab_size = 11;
    m.context_len = 8;
    m.embed_dim = 8;
    m.n_layers = 1;
    m.n_heads = 2;
    m.ffn_dim = 16;
    m.seed = seed;
    return m;
}

inline ModelConfig small_config(std::uint64_t seed = 1)
{
    ModelConfig m;
    m.vocab_size = 259;
    m.context_len = 32;
    m.embed_dim = 16;
    m.n_layers = 1;
    m.n_heads = 2;
    m.ffn_dim = 32;
    m.seed = seed;
    return m;
}

inline Corpus make_corpus(const std::vector<std::pair<std::string, std::string>>& texts, const Direction& d)
{
    Corpus c;
    PairId id = 0;
    for (const auto& [s, t] : texts) {
        c.pairs.push_back(ParallelPair{id++, s, t, d, std::nullopt});
    }
    return c;
}

} // namespace paracpt::testing
