#include "cqvae/quantize.hpp"

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace cqvae {

namespace {

// Little-endian base-1e9 bignum, enough for exact integer powers.
using BigInt = std::vector<uint32_t>;
constexpr uint32_t kBase = 1000000000u;

void mul_small(BigInt& a, uint32_t k) {
    uint64_t carry = 0;
    for (uint32_t& limb : a) {
        const uint64_t cur = uint64_t(limb) * k + carry;
        limb = uint32_t(cur % kBase);
        carry = cur / kBase;
    }
    while (carry) {
        a.push_back(uint32_t(carry % kBase));
        carry /= kBase;
    }
}

std::string to_decimal(const BigInt& a) {
    std::string out = std::to_string(a.back());
    for (size_t i = a.size() - 1; i-- > 0;) {
        std::string limb = std::to_string(a[i]);
        out += std::string(9 - limb.size(), '0') + limb;
    }
    return out;
}

}  // namespace

std::string count_codes(int m, int n) {
    if (m < 1 || n < 1) throw std::invalid_argument("count_codes: M and N must be positive");
    BigInt acc{1u};
    for (int i = 0; i < m; ++i) mul_small(acc, uint32_t(n));
    return to_decimal(acc);
}

}  // namespace cqvae
