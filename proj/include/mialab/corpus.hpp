#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mialab/util.hpp"

namespace mialab {

enum class Membership { member, nonmember };

struct Document {
    std::string id;
    std::string text;  // UTF-8, non-empty after trimming
    Membership membership = Membership::member;
};

// Tokenized view of a document. Byte-level: token ids are the UTF-8 bytes,
// so the vocabulary is exactly 256 and every id is < 256.
struct TokenSeq {
    std::vector<int> tokens;
    std::string source_id;
};

inline constexpr int kByteVocab = 256;

struct Corpus {
    std::vector<Document> docs;

    std::vector<const Document*> members() const;
    std::vector<const Document*> nonmembers() const;
    const Document* find(const std::string& id) const;
};

// member_ids and nonmember_ids are disjoint by construction; the loader
// already rejects byte-identical text across splits.
struct CorpusManifest {
    std::vector<std::string> member_ids;
    std::vector<std::string> nonmember_ids;
    uint64_t seed = 0;
    std::string tokenizer = "byte-level";
};

// JSON-lines, one record per line: {"id": ..., "text": ..., "split": "member"|"nonmember"}.
// Errors carry the offending line number. Duplicate ids and byte-identical
// text appearing under both splits are hard errors.
Corpus load_corpus(const std::string& path);
void save_corpus(const Corpus& corpus, const std::string& path);
void validate_corpus(const Corpus& corpus);

// UTF-8 bytes of text, truncated to max_len. Throws if fewer than 2 tokens
// survive (no next-token target would exist).
TokenSeq tokenize(const Document& doc, int max_len);

CorpusManifest make_manifest(const Corpus& corpus, uint64_t seed);
void save_manifest(const CorpusManifest& m, const std::string& path);
CorpusManifest load_manifest(const std::string& path);

// Deterministic reservation of non-member documents for attack-side roles:
// a context-prefix pool and a reference-model training slice, both held out
// of the evaluation set so they never overlap it.
struct NonmemberRoles {
    std::vector<std::string> eval_ids;
    std::vector<std::string> prefix_ids;
    std::vector<std::string> ref_train_ids;
};

NonmemberRoles reserve_nonmember_roles(const CorpusManifest& manifest, uint64_t seed,
                                       int n_prefix, int n_ref_train);

}  // namespace mialab
