// SPDX-License-Identifier: Apache-2.0

#include "fedmoe/corpus.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

static_assert(std::endian::native == std::endian::little,
              "the on-disk containers assume a little-endian host");

namespace fedmoe {

std::vector<int64_t> window_starts(const Corpus& corpus, int64_t window) {
    if (window < 2) throw std::invalid_argument("window must be >= 2 tokens");
    std::vector<int64_t> starts;
    for (int64_t s = 0; s + window <= corpus.size(); s += window) starts.push_back(s);
    return starts;
}

TokenBatch gather_windows(const Corpus& corpus, std::span<const int64_t> starts, int64_t window) {
    TokenBatch b;
    b.batch = static_cast<int64_t>(starts.size());
    b.seq_len = window;
    b.ids.reserve(b.batch * window);
    for (int64_t s : starts) {
        if (s < 0 || s + window > corpus.size()) {
            throw std::invalid_argument("window start out of corpus range");
        }
        b.ids.insert(b.ids.end(), corpus.tokens.begin() + s, corpus.tokens.begin() + s + window);
    }
    return b;
}

std::vector<TokenBatch> make_batches(const Corpus& corpus, int64_t window, int64_t batch_size) {
    const std::vector<int64_t> starts = window_starts(corpus, window);
    std::vector<TokenBatch> batches;
    for (size_t i = 0; i < starts.size(); i += batch_size) {
        const size_t n = std::min(static_cast<size_t>(batch_size), starts.size() - i);
        batches.push_back(gather_windows(corpus, std::span(starts).subspan(i, n), window));
    }
    return batches;
}

namespace {
constexpr char kMagic[4] = {'D', 'F', 'T', 'K'};
constexpr uint32_t kVersion = 1;
}  // namespace

void write_corpus(const std::filesystem::path& path, const Corpus& corpus) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for write: " + path.string());
    out.write(kMagic, 4);
    const uint32_t version = kVersion;
    const uint32_t vocab = static_cast<uint32_t>(corpus.vocab_size);
    out.write(reinterpret_cast<const char*>(&version), 4);
    out.write(reinterpret_cast<const char*>(&vocab), 4);
    for (int32_t t : corpus.tokens) {
        const uint16_t id = static_cast<uint16_t>(t);
        out.write(reinterpret_cast<const char*>(&id), 2);
    }
    if (!out) throw std::runtime_error("short write: " + path.string());
}

Corpus read_corpus(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open for read: " + path.string());
    char magic[4];
    uint32_t version = 0, vocab = 0;
    in.read(magic, 4);
    in.read(reinterpret_cast<char*>(&version), 4);
    in.read(reinterpret_cast<char*>(&vocab), 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0) {
        throw std::runtime_error("not a token-stream file: " + path.string());
    }
    if (version != kVersion) throw std::runtime_error("unsupported token-stream version");
    Corpus c;
    c.vocab_size = vocab;
    uint16_t id = 0;
    while (in.read(reinterpret_cast<char*>(&id), 2)) c.tokens.push_back(id);
    return c;
}

}  // namespace fedmoe
