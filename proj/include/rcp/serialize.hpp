#pragma once

// Checkpoint format (little-endian throughout):
//   magic  "RCPT"            4 bytes
//   version u32              currently 1
//   count   u32              number of named tensors
//   entries, each:
//     name_len u32, name bytes
//     ndim u32, dims u64[ndim]
//     data f64[prod(dims)]
//
// The parameter digest is the SHA-256 of this byte stream, so it covers both
// values and shapes.

#include <openssl/evp.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "rcp/errors.hpp"
#include "rcp/tensor.hpp"

namespace rcp {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

namespace detail_ser {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f64(std::string& out, double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, 8);
    put_u64(out, bits);
}

struct Reader {
    const std::string& buf;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > buf.size()) throw IoError("checkpoint truncated");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    double f64() {
        const std::uint64_t bits = u64();
        double d;
        std::memcpy(&d, &bits, 8);
        return d;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

}  // namespace detail_ser

inline std::string encode_named_tensors(const NamedTensors& tensors) {
    using namespace detail_ser;
    std::string out = "RCPT";
    put_u32(out, 1);
    put_u32(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        put_u32(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        put_u32(out, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) put_u64(out, d);
        for (double v : t.data()) put_f64(out, v);
    }
    return out;
}

inline NamedTensors decode_named_tensors(const std::string& buf) {
    using namespace detail_ser;
    Reader r{buf};
    if (r.bytes(4) != "RCPT") throw IoError("bad checkpoint magic");
    const std::uint32_t version = r.u32();
    if (version != 1) throw IoError("unsupported checkpoint version " + std::to_string(version));
    const std::uint32_t count = r.u32();
    NamedTensors out;
    out.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = r.u32();
        std::string name = r.bytes(name_len);
        const std::uint32_t ndim = r.u32();
        Shape shape(ndim);
        for (std::uint32_t k = 0; k < ndim; ++k) shape[k] = static_cast<std::size_t>(r.u64());
        std::vector<double> data(numel(shape));
        for (double& v : data) v = r.f64();
        out.emplace_back(std::move(name), Tensor::from(std::move(shape), std::move(data)));
    }
    return out;
}

inline void save_named_tensors(const std::string& path, const NamedTensors& tensors) {
    const std::string buf = encode_named_tensors(tensors);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint '" + path + "'");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("short write on checkpoint '" + path + "'");
}

inline NamedTensors load_named_tensors(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint '" + path + "'");
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_named_tensors(buf);
}

inline std::string sha256_hex(const std::string& bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
        throw Error("sha256 computation failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xf]);
    }
    return out;
}

// Canonical digest of a parameter set: order-sensitive over (name, shape, data).
inline std::string digest_named_tensors(const NamedTensors& tensors) {
    return sha256_hex(encode_named_tensors(tensors));
}

}  // namespace rcp
