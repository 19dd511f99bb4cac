#include "mialab/gen.hpp"

#include <algorithm>
#include <string>
#include <unordered_set>
#include <vector>

#include "mialab/rng.hpp"

namespace mialab {

namespace {

std::string make_word(Rng& rng, int min_len, int max_len) {
    const int len = min_len + static_cast<int>(rng.below(static_cast<uint64_t>(max_len - min_len + 1)));
    std::string w(static_cast<size_t>(len), 'a');
    for (auto& c : w) c = static_cast<char>('a' + rng.below(26));
    return w;
}

std::vector<std::string> make_vocab(uint64_t seed, int n_words) {
    Rng rng(seed);
    std::vector<std::string> vocab;
    std::unordered_set<std::string> seen;
    vocab.reserve(static_cast<size_t>(n_words));
    while (static_cast<int>(vocab.size()) < n_words) {
        std::string w = make_word(rng, 3, 7);
        if (seen.insert(w).second) vocab.push_back(std::move(w));
    }
    return vocab;
}

// fixed multi-word phrases; repetition across documents saturates them during
// training, so they stop carrying membership signal on their own. Phrase
// length scales with the document target so several phrases fit per document.
std::vector<std::string> make_phrases(uint64_t seed, const std::vector<std::string>& vocab, int n,
                                      int target_len) {
    Rng rng(seed);
    const int base = std::max(2, target_len / 10);
    std::vector<std::string> phrases;
    for (int i = 0; i < n; ++i) {
        const int words = base + static_cast<int>(rng.below(static_cast<uint64_t>(base / 2 + 1)));
        std::string p;
        for (int w = 0; w < words; ++w) {
            if (!p.empty()) p += ' ';
            p += vocab[rng.below(vocab.size())];
        }
        phrases.push_back(std::move(p));
    }
    return phrases;
}

std::string salad_text(Rng& rng, const std::vector<std::string>& vocab, int target_len) {
    std::string text;
    while (static_cast<int>(text.size()) < target_len) {
        if (!text.empty()) text += ' ';
        text += vocab[rng.below(vocab.size())];
    }
    text.resize(static_cast<size_t>(target_len));
    if (text.back() == ' ') text.back() = 'a' + static_cast<char>(rng.below(26));
    return text;
}

std::string phrase_text(Rng& rng, const std::vector<std::string>& phrases, int min_len, int cap) {
    std::string text;
    while (static_cast<int>(text.size()) < min_len) {
        if (!text.empty()) text += ' ';
        text += phrases[rng.below(phrases.size())];
    }
    if (static_cast<int>(text.size()) > cap) text.resize(static_cast<size_t>(cap));
    return text;
}

std::string repeated_sentence_text(Rng& rng, const std::vector<std::string>& topic, int target_len) {
    const int n_words = 3 + static_cast<int>(rng.below(3));
    std::string sentence;
    for (int i = 0; i < n_words; ++i) {
        if (!sentence.empty()) sentence += ' ';
        sentence += topic[rng.below(topic.size())];
    }
    sentence += '.';
    std::string text;
    while (static_cast<int>(text.size()) < target_len) {
        if (!text.empty()) text += ' ';
        text += sentence;
    }
    text.resize(static_cast<size_t>(target_len));
    if (text.back() == ' ') text.back() = '.';
    return text;
}

std::string padded_id(const char* prefix, int i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%s%04d", prefix, i);
    return buf;
}

}  // namespace

void GeneratorConfig::validate() const {
    if (members < 1) throw ValidationError("generator: members must be >= 1");
    if (nonmembers < 1) throw ValidationError("generator: nonmembers must be >= 1");
    if (topical_member_frac < 0.0 || topical_member_frac > 1.0)
        throw ValidationError("generator: topical_member_frac must be in [0,1]");
    if (target_len < 8) throw ValidationError("generator: target_len must be >= 8");
    if (common_vocab < 16 || topic_vocab < 2) throw ValidationError("generator: vocab too small");
}

Corpus generate_corpus(const GeneratorConfig& cfg) {
    cfg.validate();
    const auto common = make_vocab(mix_seed(cfg.seed, "vocab/common"), cfg.common_vocab);
    const auto topic = make_vocab(mix_seed(cfg.seed, "vocab/topic"), cfg.topic_vocab);
    const auto phrases = make_phrases(mix_seed(cfg.seed, "phrases"), common, 10, cfg.target_len);

    Corpus corpus;
    Rng rng(mix_seed(cfg.seed, "docs"));
    const int n_topical = static_cast<int>(cfg.topical_member_frac * cfg.members + 0.5);
    const int cap = std::min(2 * cfg.target_len - 16, 112);

    // phrase documents recombine a small shared pool, so texts can collide;
    // resample until every text is unique (cheap, deterministic)
    std::unordered_set<std::string> used;
    auto fresh = [&](auto&& make) {
        for (int attempt = 0; attempt < 64; ++attempt) {
            std::string t = make();
            if (used.insert(t).second) return t;
        }
        throw RuntimeFailure("generator: could not produce a unique document");
    };

    for (int i = 0; i < cfg.members; ++i) {
        Document d;
        d.id = padded_id("m", i);
        d.membership = Membership::member;
        if (i < n_topical) {
            d.text = fresh([&] {
                return repeated_sentence_text(rng, topic, cfg.target_len - 4 + static_cast<int>(rng.below(9)));
            });
        } else {
            d.text = fresh([&] { return phrase_text(rng, phrases, cfg.target_len - 8, cap); });
        }
        corpus.docs.push_back(std::move(d));
    }
    for (int i = 0; i < cfg.nonmembers; ++i) {
        Document d;
        d.id = padded_id("n", i);
        d.membership = Membership::nonmember;
        if (rng.uniform() < 0.40) {
            d.text = fresh([&] { return phrase_text(rng, phrases, cfg.target_len - 8, cap); });
        } else {
            const int len = cfg.target_len - 8 + static_cast<int>(rng.below(static_cast<uint64_t>(
                                                     std::max(1, cap - (cfg.target_len - 8) + 1))));
            d.text = fresh([&] { return salad_text(rng, common, len); });
        }
        corpus.docs.push_back(std::move(d));
    }

    validate_corpus(corpus);
    return corpus;
}

}  // namespace mialab
