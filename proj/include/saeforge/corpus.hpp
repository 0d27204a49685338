#pragma once

// Pre-tokenized integer datasets and the seeded synthetic token language used
// to train and probe the desk-scale base model.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace saeforge {

// n_sequences rows of seq_len token ids, row-major.
struct TokenDataset {
    std::size_t n_sequences = 0;
    std::size_t seq_len = 0;
    std::vector<std::int32_t> tokens;

    std::size_t n_tokens() const { return tokens.size(); }
    std::span<const std::int32_t> row(std::size_t i) const {
        return std::span<const std::int32_t>(tokens).subspan(i * seq_len, seq_len);
    }
    // Rows [begin, begin + count).
    TokenDataset rows(std::size_t begin, std::size_t count) const;
    // Rows at the given indices, in order.
    TokenDataset gather(std::span<const std::size_t> indices) const;
};

struct CorpusConfig {
    std::size_t vocab_size = 256;
    std::size_t n_chains = 8;      // Markov "topics"
    std::size_t branching = 4;     // likely successors per token within a chain
    double copy_prob = 0.08;       // chance per position of starting a copied span
    std::size_t min_copy = 3;
    std::size_t max_copy = 8;
    std::uint64_t language_seed = 0;
};

// Token 0 is reserved as the beginning-of-sequence marker.
inline constexpr std::int32_t kBosToken = 0;

// A mixture of sparse Markov chains with copy (induction) segments. The
// language itself is fixed by language_seed; sample() draws independent
// sequences from a stream seed.
class SyntheticLanguage {
public:
    explicit SyntheticLanguage(CorpusConfig config);

    TokenDataset sample(std::size_t n_sequences, std::size_t seq_len, std::uint64_t stream_seed) const;

    const CorpusConfig& config() const { return config_; }

private:
    struct Chain {
        // successors[t * branching + j] with cumulative weights alongside.
        std::vector<std::int32_t> successors;
        std::vector<double> cumulative;
    };

    CorpusConfig config_;
    std::vector<Chain> chains_;
};

// Rows of a repeating pattern, each starting at a random phase.
TokenDataset cyclic_dataset(std::span<const std::int32_t> pattern, std::size_t n_sequences, std::size_t seq_len,
                            std::uint64_t seed);

// Uniformly random tokens in [0, vocab_size).
TokenDataset uniform_dataset(std::size_t vocab_size, std::size_t n_sequences, std::size_t seq_len,
                             std::uint64_t seed);

// Entropy in nats of the empirical next-token unigram distribution
// (positions 1..seq_len-1).
double unigram_entropy(const TokenDataset& data, std::size_t vocab_size);

// Mixes a base seed with a stream index (splitmix64).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace saeforge
