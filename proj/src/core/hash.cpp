#include "oscar/core/hash.hpp"

#include <openssl/evp.h>

#include <cstdio>
#include <memory>

#include "oscar/core/errors.hpp"

namespace oscar {

namespace {
std::string digest_to_hex(const unsigned char* md, unsigned len) {
    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(len * 2);
    for (unsigned i = 0; i < len; ++i) {
        out.push_back(hex[md[i] >> 4]);
        out.push_back(hex[md[i] & 0xf]);
    }
    return out;
}
}  // namespace

std::string sha256_hex(const unsigned char* data, std::size_t len) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned md_len = 0;
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(),
                                                                EVP_MD_CTX_free);
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
        EVP_DigestUpdate(ctx.get(), data, len) != 1 ||
        EVP_DigestFinal_ex(ctx.get(), md, &md_len) != 1)
        throw NumericError("sha256 digest failed");
    return digest_to_hex(md, md_len);
}

std::string sha256_hex(const std::vector<unsigned char>& bytes) {
    return sha256_hex(bytes.data(), bytes.size());
}

std::string sha256_hex(const std::string& text) {
    return sha256_hex(reinterpret_cast<const unsigned char*>(text.data()), text.size());
}

std::string sha256_file(const std::string& path) {
    std::unique_ptr<std::FILE, decltype(&std::fclose)> f(std::fopen(path.c_str(), "rb"),
                                                         std::fclose);
    if (!f) throw ArtifactError("cannot open file for hashing: " + path);
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned md_len = 0;
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(),
                                                                EVP_MD_CTX_free);
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1)
        throw NumericError("sha256 init failed");
    unsigned char buf[1 << 16];
    std::size_t n;
    while ((n = std::fread(buf, 1, sizeof(buf), f.get())) > 0)
        if (EVP_DigestUpdate(ctx.get(), buf, n) != 1)
            throw NumericError("sha256 update failed");
    if (EVP_DigestFinal_ex(ctx.get(), md, &md_len) != 1)
        throw NumericError("sha256 final failed");
    return digest_to_hex(md, md_len);
}

}  // namespace oscar
