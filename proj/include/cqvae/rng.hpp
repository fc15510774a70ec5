#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace cqvae {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

// One independent random stream. All distribution transforms are implemented
// on top of the raw mt19937_64 bit stream, so results are reproducible
// bit-for-bit across platforms and standard library versions.
class RngStream {
public:
    explicit RngStream(uint64_t seed) : gen_(seed) {}

    // Derive an independent stream from a root seed and a stream name.
    // Components seeded this way can be replayed in isolation.
    static RngStream named(uint64_t root_seed, std::string_view stream) {
        return RngStream(splitmix64(splitmix64(root_seed) ^ fnv1a64(stream)));
    }

    uint64_t next_u64() { return gen_(); }

    // [0, 1)
    double uniform01() { return double(gen_() >> 11) * 0x1.0p-53; }

    // (0, 1), never returns an exact endpoint; safe under log()
    double uniform01_open() { return (double(gen_() >> 12) + 0.5) * 0x1.0p-52; }

    double uniform(double a, double b) { return a + (b - a) * uniform01(); }

    // uniform integer in [0, n)
    int uniform_int(int n) {
        if (n <= 0) throw std::invalid_argument("RngStream::uniform_int: n must be positive");
        const uint64_t un = uint64_t(n);
        const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        uint64_t x;
        do {
            x = gen_();
        } while (x >= limit);
        return int(x % un);
    }

    // standard normal, Box-Muller with cached spare
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = uniform01_open();
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double t = 2.0 * M_PI * u2;
        spare_ = r * std::sin(t);
        has_spare_ = true;
        return r * std::cos(t);
    }

    double normal(double mu, double sigma) { return mu + sigma * normal(); }

    // Gumbel(0,1)
    double gumbel() { return -std::log(-std::log(uniform01_open())); }

    double exponential() { return -std::log(uniform01_open()); }

    std::string save_state() const {
        std::ostringstream os;
        os << gen_ << " " << (has_spare_ ? 1 : 0) << " ";
        os.precision(17);
        os << spare_;
        return os.str();
    }

    void load_state(const std::string& s) {
        std::istringstream is(s);
        int spare_flag = 0;
        is >> gen_ >> spare_flag >> spare_;
        if (!is) throw std::runtime_error("RngStream::load_state: malformed state string");
        has_spare_ = spare_flag != 0;
    }

private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace cqvae
