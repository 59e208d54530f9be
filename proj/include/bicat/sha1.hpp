#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>

namespace bicat::detail {

/// Compact SHA-1 used for content digests in stage manifests.
class Sha1 {
public:
    Sha1() { reset(); }

    void reset() {
        h_ = {0x67452301u, 0xEFCDAB89u, 0x98BADCFEu, 0x10325476u, 0xC3D2E1F0u};
        buffer_len_ = 0;
        total_bits_ = 0;
    }

    void update(const void* data, std::size_t len) {
        const auto* p = static_cast<const unsigned char*>(data);
        total_bits_ += static_cast<std::uint64_t>(len) * 8;
        while (len > 0) {
            const std::size_t take = std::min<std::size_t>(64 - buffer_len_, len);
            std::memcpy(buffer_.data() + buffer_len_, p, take);
            buffer_len_ += take;
            p += take;
            len -= take;
            if (buffer_len_ == 64) {
                process_(buffer_.data());
                buffer_len_ = 0;
            }
        }
    }

    std::string hex_digest() {
        const std::uint64_t bits = total_bits_;
        const unsigned char one = 0x80;
        update(&one, 1);
        const unsigned char zero = 0x00;
        while (buffer_len_ != 56) update(&zero, 1);
        unsigned char len_be[8];
        for (int i = 0; i < 8; ++i)
            len_be[i] = static_cast<unsigned char>((bits >> (56 - 8 * i)) & 0xFF);
        update(len_be, 8);

        static const char* hex = "0123456789abcdef";
        std::string out;
        out.reserve(40);
        for (std::uint32_t word : h_) {
            for (int shift = 28; shift >= 0; shift -= 4)
                out.push_back(hex[(word >> shift) & 0xF]);
        }
        return out;
    }

private:
    static std::uint32_t rol_(std::uint32_t v, int bits) {
        return (v << bits) | (v >> (32 - bits));
    }

    void process_(const unsigned char* block) {
        std::uint32_t w[80];
        for (int i = 0; i < 16; ++i) {
            w[i] = (static_cast<std::uint32_t>(block[4 * i]) << 24) |
                   (static_cast<std::uint32_t>(block[4 * i + 1]) << 16) |
                   (static_cast<std::uint32_t>(block[4 * i + 2]) << 8) |
                   static_cast<std::uint32_t>(block[4 * i + 3]);
        }
        for (int i = 16; i < 80; ++i)
            w[i] = rol_(w[i - 3] ^ w[i - 8] ^ w[i - 14] ^ w[i - 16], 1);

        std::uint32_t a = h_[0], b = h_[1], c = h_[2], d = h_[3], e = h_[4];
        for (int i = 0; i < 80; ++i) {
            std::uint32_t f, k;
            if (i < 20) {
                f = (b & c) | (~b & d);
                k = 0x5A827999u;
            } else if (i < 40) {
                f = b ^ c ^ d;
                k = 0x6ED9EBA1u;
            } else if (i < 60) {
                f = (b & c) | (b & d) | (c & d);
                k = 0x8F1BBCDCu;
            } else {
                f = b ^ c ^ d;
                k = 0xCA62C1D6u;
            }
            const std::uint32_t tmp = rol_(a, 5) + f + e + k + w[i];
            e = d;
            d = c;
            c = rol_(b, 30);
            b = a;
            a = tmp;
        }
        h_[0] += a;
        h_[1] += b;
        h_[2] += c;
        h_[3] += d;
        h_[4] += e;
    }

    std::array<std::uint32_t, 5> h_;
    std::array<unsigned char, 64> buffer_;
    std::size_t buffer_len_ = 0;
    std::uint64_t total_bits_ = 0;
};

inline std::string sha1_hex(std::string_view data) {
    Sha1 h;
    h.update(data.data(), data.size());
    return h.hex_digest();
}

/// Git-style blob digest: sha1("blob <len>\0<content>").
inline std::string blob_digest(std::string_view content) {
    Sha1 h;
    const std::string header = "blob " + std::to_string(content.size());
    h.update(header.data(), header.size() + 1);  // include the NUL
    h.update(content.data(), content.size());
    return h.hex_digest();
}

}  // namespace bicat::detail
