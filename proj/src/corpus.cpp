#include "saeforge/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace saeforge {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

TokenDataset TokenDataset::rows(std::size_t begin, std::size_t count) const {
    if (begin + count > n_sequences) {
        throw std::out_of_range("TokenDataset::rows: range exceeds " + std::to_string(n_sequences) + " rows");
    }
    TokenDataset out;
    out.n_sequences = count;
    out.seq_len = seq_len;
    out.tokens.assign(tokens.begin() + static_cast<std::ptrdiff_t>(begin * seq_len),
                      tokens.begin() + static_cast<std::ptrdiff_t>((begin + count) * seq_len));
    return out;
}

TokenDataset TokenDataset::gather(std::span<const std::size_t> indices) const {
    TokenDataset out;
    out.n_sequences = indices.size();
    out.seq_len = seq_len;
    out.tokens.reserve(indices.size() * seq_len);
    for (auto i : indices) {
        if (i >= n_sequences) {
            throw std::out_of_range("TokenDataset::gather: row index out of range");
        }
        auto r = row(i);
        out.tokens.insert(out.tokens.end(), r.begin(), r.end());
    }
    return out;
}

SyntheticLanguage::SyntheticLanguage(CorpusConfig config) : config_(config) {
    if (config_.vocab_size < 2 || config_.n_chains == 0 || config_.branching == 0) {
        throw std::invalid_argument("SyntheticLanguage: vocab_size >= 2, n_chains >= 1 and branching >= 1 required");
    }
    if (config_.min_copy == 0 || config_.min_copy > config_.max_copy) {
        throw std::invalid_argument("SyntheticLanguage: need 1 <= min_copy <= max_copy");
    }
    std::mt19937_64 rng(mix_seed(config_.language_seed, 0));
    const auto v = static_cast<std::int32_t>(config_.vocab_size);
    std::uniform_int_distribution<std::int32_t> token(1, v - 1);
    std::gamma_distribution<double> gamma(0.5, 1.0);

    chains_.resize(config_.n_chains);
    for (auto& chain : chains_) {
        chain.successors.resize(config_.vocab_size * config_.branching);
        chain.cumulative.resize(config_.vocab_size * config_.branching);
        for (std::size_t t = 0; t < config_.vocab_size; ++t) {
            double total = 0.0;
            for (std::size_t j = 0; j < config_.branching; ++j) {
                const std::size_t slot = t * config_.branching + j;
                chain.successors[slot] = token(rng);
                total += gamma(rng) + 1e-3;
                chain.cumulative[slot] = total;
            }
            for (std::size_t j = 0; j < config_.branching; ++j) {
                chain.cumulative[t * config_.branching + j] /= total;
            }
        }
    }
}

TokenDataset SyntheticLanguage::sample(std::size_t n_sequences, std::size_t seq_len, std::uint64_t stream_seed) const {
    TokenDataset out;
    out.n_sequences = n_sequences;
    out.seq_len = seq_len;
    out.tokens.resize(n_sequences * seq_len);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> pick_chain(0, chains_.size() - 1);
    std::uniform_int_distribution<std::size_t> copy_len(config_.min_copy, config_.max_copy);
    const std::size_t b = config_.branching;

    for (std::size_t s = 0; s < n_sequences; ++s) {
        std::mt19937_64 rng(mix_seed(stream_seed, s));
        std::int32_t* seq = out.tokens.data() + s * seq_len;
        if (seq_len == 0) {
            continue;
        }
        seq[0] = kBosToken;
        const Chain& chain = chains_[pick_chain(rng)];
        std::size_t pos = 1;
        while (pos < seq_len) {
            const std::size_t len = copy_len(rng);
            if (pos > len + 1 && unit(rng) < config_.copy_prob) {
                std::uniform_int_distribution<std::size_t> start(1, pos - len);
                const std::size_t from = start(rng);
                for (std::size_t k = 0; k < len && pos < seq_len; ++k) {
                    seq[pos++] = seq[from + k];
                }
                continue;
            }
            const auto prev = static_cast<std::size_t>(seq[pos - 1]);
            const double u = unit(rng);
            const double* cum = chain.cumulative.data() + prev * b;
            const std::size_t j = static_cast<std::size_t>(std::lower_bound(cum, cum + b, u) - cum);
            seq[pos++] = chain.successors[prev * b + std::min(j, b - 1)];
        }
    }
    return out;
}

TokenDataset cyclic_dataset(std::span<const std::int32_t> pattern, std::size_t n_sequences, std::size_t seq_len,
                            std::uint64_t seed) {
    if (pattern.empty()) {
        throw std::invalid_argument("cyclic_dataset: empty pattern");
    }
    TokenDataset out;
    out.n_sequences = n_sequences;
    out.seq_len = seq_len;
    out.tokens.resize(n_sequences * seq_len);
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> phase(0, pattern.size() - 1);
    for (std::size_t s = 0; s < n_sequences; ++s) {
        const std::size_t p0 = phase(rng);
        for (std::size_t i = 0; i < seq_len; ++i) {
            out.tokens[s * seq_len + i] = pattern[(p0 + i) % pattern.size()];
        }
    }
    return out;
}

TokenDataset uniform_dataset(std::size_t vocab_size, std::size_t n_sequences, std::size_t seq_len,
                             std::uint64_t seed) {
    TokenDataset out;
    out.n_sequences = n_sequences;
    out.seq_len = seq_len;
    out.tokens.resize(n_sequences * seq_len);
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::int32_t> token(0, static_cast<std::int32_t>(vocab_size) - 1);
    for (auto& t : out.tokens) {
        t = token(rng);
    }
    return out;
}

double unigram_entropy(const TokenDataset& data, std::size_t vocab_size) {
    std::vector<double> counts(vocab_size, 0.0);
    double total = 0.0;
    for (std::size_t s = 0; s < data.n_sequences; ++s) {
        auto r = data.row(s);
        for (std::size_t i = 1; i < r.size(); ++i) {
            counts.at(static_cast<std::size_t>(r[i])) += 1.0;
            total += 1.0;
        }
    }
    double h = 0.0;
    for (double c : counts) {
        if (c > 0.0) {
            const double p = c / total;
            h -= p * std::log(p);
        }
    }
    return h;
}

}  // namespace saeforge
