#pragma once

#include <cstdint>

#include "mialab/corpus.hpp"

namespace mialab {

// Synthetic two-topic corpus generator. Members come in two strata: highly
// repetitive sentences over a small member-only topic vocabulary (deeply
// memorized by a small model), and concatenations from a fixed pool of
// shared phrases. A slice of the nonmembers is built from the same phrase
// pool; once training saturates the phrases, membership signal on that band
// drops below composition noise, so the member and nonmember score
// distributions overlap instead of separating completely. The remaining
// nonmembers are word salad over the common vocabulary.
struct GeneratorConfig {
    int members = 64;
    int nonmembers = 112;
    double topical_member_frac = 0.62;  // fraction of members in the repetitive stratum
    int target_len = 64;                // approximate document length in bytes
    int common_vocab = 512;
    int topic_vocab = 12;
    uint64_t seed = 1;

    void validate() const;
};

Corpus generate_corpus(const GeneratorConfig& cfg);

}  // namespace mialab
