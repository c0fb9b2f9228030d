// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace fedmoe {

// A flat token stream over the shared vocabulary.
struct Corpus {
    int64_t vocab_size = 0;
    std::vector<int32_t> tokens;

    bool empty() const { return tokens.empty(); }
    int64_t size() const { return static_cast<int64_t>(tokens.size()); }
};

// One batch of token sequences, shape batch x seq_len, row-major. Rows are the
// model input x_0..x_{T-1}; the loss pairs position t with ground truth x_{t+1}.
struct TokenBatch {
    int64_t batch = 0;
    int64_t seq_len = 0;
    std::vector<int32_t> ids;

    std::span<const int32_t> row(int64_t b) const {
        return std::span<const int32_t>(ids).subspan(b * seq_len, seq_len);
    }
};

// Start offsets of consecutive non-overlapping windows of `window` tokens.
// A tail shorter than the window is dropped.
std::vector<int64_t> window_starts(const Corpus& corpus, int64_t window);

// Gathers the given windows into one batch.
TokenBatch gather_windows(const Corpus& corpus, std::span<const int64_t> starts, int64_t window);

// Whole corpus as ordered batches of at most batch_size windows.
std::vector<TokenBatch> make_batches(const Corpus& corpus, int64_t window, int64_t batch_size);

// Token-stream container: "DFTK", u32 version, u32 vocab_size, then u16
// little-endian token ids.
void write_corpus(const std::filesystem::path& path, const Corpus& corpus);
Corpus read_corpus(const std::filesystem::path& path);

}  // namespace fedmoe
