#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

namespace paracpt {

using TokenId = std::uint32_t;

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Seeded generator whose output sequence is identical on every standard
// library. std::uniform_int_distribution and std::shuffle are
// implementation-defined, so bounded draws go through uniform_below.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }

    // Unbiased integer in [0, bound).
    std::uint64_t uniform_below(std::uint64_t bound)
    {
        if (bound == 0) {
            throw Error("Rng::uniform_below: bound must be positive");
        }
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                    std::numeric_limits<std::uint64_t>::max() % bound;
        std::uint64_t x = next();
        while (x >= limit) {
            x = next();
        }
        return x % bound;
    }

    // Uniform real in [0, 1) with 53 random bits.
    double uniform01() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double normal(double mean, double stddev)
    {
        if (has_spare_) {
            has_spare_ = false;
            return mean + stddev * spare_;
        }
        double u = uniform01();
        while (u <= 0.0) {
            u = uniform01();
        }
        const double v = uniform01();
        const double radius = std::sqrt(-2.0 * std::log(u));
        const double angle = 2.0 * 3.14159265358979323846 * v;
        spare_ = radius * std::sin(angle);
        has_spare_ = true;
        return mean + stddev * radius * std::cos(angle);
    }

    template <class T>
    void shuffle(std::vector<T>& items)
    {
        for (std::size_t i = items.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(uniform_below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// Derives an independent stream seed from a base seed and a salt.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt)
{
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL)
{
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v)
{
    static constexpr char digits[] = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

// ceil(fraction * n) with a small tolerance so that 0.01 * 1000 counts as 10.
inline std::size_t fraction_count(double fraction, std::size_t n)
{
    const double raw = fraction * static_cast<double>(n);
    return static_cast<std::size_t>(std::ceil(raw - 1e-9));
}

inline std::string_view trim(std::string_view s)
{
    constexpr std::string_view ws = " \t\r\n\f\v";
    const auto b = s.find_first_not_of(ws);
    if (b == std::string_view::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(ws);
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_whitespace(std::string_view s)
{
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < s.size()) {
        while (i < s.size() && (s[i] == ' ' || s[i] == '\t' || s[i] == '\n' || s[i] == '\r')) {
            ++i;
        }
        std::size_t j = i;
        while (j < s.size() && !(s[j] == ' ' || s[j] == '\t' || s[j] == '\n' || s[j] == '\r')) {
            ++j;
        }
        if (j > i) {
            out.emplace_back(s.substr(i, j - i));
        }
        i = j;
    }
    return out;
}

// Little-endian binary I/O used by the packed, SFT and checkpoint files.
namespace binio {

template <class U>
void write_le(std::ostream& os, U value)
{
    static_assert(std::is_integral_v<U>);
    unsigned char buf[sizeof(U)];
    auto v = static_cast<std::make_unsigned_t<U>>(value);
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        buf[i] = static_cast<unsigned char>(v & 0xff);
        v = static_cast<decltype(v)>(v >> 8);
    }
    os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <class U>
U read_le(std::istream& is)
{
    static_assert(std::is_integral_v<U>);
    unsigned char buf[sizeof(U)];
    is.read(reinterpret_cast<char*>(buf), sizeof(U));
    if (!is) {
        throw Error("unexpected end of binary file");
    }
    std::make_unsigned_t<U> v = 0;
    for (std::size_t i = sizeof(U); i-- > 0;) {
        v = static_cast<decltype(v)>((v << 8) | buf[i]);
    }
    return static_cast<U>(v);
}

inline void write_f32(std::ostream& os, float f) { write_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(f)); }
inline float read_f32(std::istream& is) { return std::bit_cast<float>(read_le<std::uint32_t>(is)); }
inline void write_f64(std::ostream& os, double f) { write_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(f)); }
inline double read_f64(std::istream& is) { return std::bit_cast<double>(read_le<std::uint64_t>(is)); }

inline void write_magic(std::ostream& os, std::string_view magic) { os.write(magic.data(), static_cast<std::streamsize>(magic.size())); }

inline void expect_magic(std::istream& is, std::string_view magic, std::string_view what)
{
    std::string got(magic.size(), '\0');
    is.read(got.data(), static_cast<std::streamsize>(got.size()));
    if (!is || got != magic) {
        throw Error(std::string(what) + ": bad magic, expected " + std::string(magic));
    }
}

} // namespace binio

inline std::ofstream open_output(const std::string& path, bool binary = false)
{
    std::ofstream os(path, binary ? std::ios::binary | std::ios::trunc : std::ios::trunc);
    if (!os) {
        throw Error("cannot open for writing: " + path);
    }
    return os;
}

inline std::ifstream open_input(const std::string& path, bool binary = false)
{
    std::ifstream is(path, binary ? std::ios::binary : std::ios::in);
    if (!is) {
        throw Error("cannot open for reading: " + path);
    }
    return is;
}

} // namespace paracpt
