#include "mialab/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "mialab/rng.hpp"

namespace mialab {

using nlohmann::json;

std::vector<const Document*> Corpus::members() const {
    std::vector<const Document*> out;
    for (const auto& d : docs)
        if (d.membership == Membership::member) out.push_back(&d);
    return out;
}

std::vector<const Document*> Corpus::nonmembers() const {
    std::vector<const Document*> out;
    for (const auto& d : docs)
        if (d.membership == Membership::nonmember) out.push_back(&d);
    return out;
}

const Document* Corpus::find(const std::string& id) const {
    for (const auto& d : docs)
        if (d.id == id) return &d;
    return nullptr;
}

namespace {

std::string trimmed(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

}  // namespace

void validate_corpus(const Corpus& corpus) {
    std::unordered_set<std::string> ids;
    // text -> membership of first occurrence; cross-split repeat is an error
    std::unordered_map<std::string, Membership> seen_text;
    for (const auto& d : corpus.docs) {
        if (d.id.empty()) throw ValidationError("document with empty id");
        if (!ids.insert(d.id).second) throw ValidationError("duplicate document id: " + d.id);
        if (trimmed(d.text).empty()) throw ValidationError("document has empty text: " + d.id);
        auto [it, fresh] = seen_text.emplace(d.text, d.membership);
        if (!fresh && it->second != d.membership)
            throw ValidationError("byte-identical text appears in both member and nonmember splits (id " +
                                  d.id + ")");
    }
}

Corpus load_corpus(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open corpus file: " + path);

    Corpus corpus;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (trimmed(line).empty()) continue;

        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::exception& e) {
            throw ValidationError("corpus line " + std::to_string(line_no) + ": invalid JSON (" +
                                  e.what() + ")");
        }
        if (!rec.is_object() || !rec.contains("id") || !rec.contains("text") || !rec.contains("split") ||
            !rec["id"].is_string() || !rec["text"].is_string() || !rec["split"].is_string())
            throw ValidationError("corpus line " + std::to_string(line_no) +
                                  ": record must have string fields id, text, split");

        Document d;
        d.id = rec["id"].get<std::string>();
        d.text = rec["text"].get<std::string>();
        const std::string split = rec["split"].get<std::string>();
        if (split == "member")
            d.membership = Membership::member;
        else if (split == "nonmember")
            d.membership = Membership::nonmember;
        else
            throw ValidationError("corpus line " + std::to_string(line_no) + ": unknown split '" + split +
                                  "'");
        corpus.docs.push_back(std::move(d));
    }
    validate_corpus(corpus);
    return corpus;
}

void save_corpus(const Corpus& corpus, const std::string& path) {
    std::ostringstream out;
    for (const auto& d : corpus.docs) {
        json rec;
        rec["id"] = d.id;
        rec["text"] = d.text;
        rec["split"] = d.membership == Membership::member ? "member" : "nonmember";
        out << rec.dump() << "\n";
    }
    write_file(path, out.str());
}

TokenSeq tokenize(const Document& doc, int max_len) {
    if (max_len < 2) throw ValidationError("tokenize: max_len must be >= 2");
    TokenSeq seq;
    seq.source_id = doc.id;
    const size_t n = std::min(doc.text.size(), static_cast<size_t>(max_len));
    seq.tokens.reserve(n);
    for (size_t i = 0; i < n; ++i) seq.tokens.push_back(static_cast<unsigned char>(doc.text[i]));
    if (seq.tokens.size() < 2)
        throw ValidationError("document too short to score (needs >= 2 tokens): " + doc.id);
    return seq;
}

CorpusManifest make_manifest(const Corpus& corpus, uint64_t seed) {
    validate_corpus(corpus);
    CorpusManifest m;
    m.seed = seed;
    for (const auto& d : corpus.docs) {
        if (d.membership == Membership::member)
            m.member_ids.push_back(d.id);
        else
            m.nonmember_ids.push_back(d.id);
    }
    if (m.member_ids.empty()) throw ValidationError("corpus has no member documents");
    if (m.nonmember_ids.empty()) throw ValidationError("corpus has no nonmember documents");

    // seed-keyed ordering; id sets are seed-independent
    std::sort(m.member_ids.begin(), m.member_ids.end());
    std::sort(m.nonmember_ids.begin(), m.nonmember_ids.end());
    Rng rng_m(mix_seed(seed, "manifest/members"));
    Rng rng_n(mix_seed(seed, "manifest/nonmembers"));
    rng_m.shuffle(m.member_ids);
    rng_n.shuffle(m.nonmember_ids);
    return m;
}

void save_manifest(const CorpusManifest& m, const std::string& path) {
    json j;
    j["member_ids"] = m.member_ids;
    j["nonmember_ids"] = m.nonmember_ids;
    j["seed"] = m.seed;
    j["tokenizer"] = m.tokenizer;
    write_file(path, j.dump(2) + "\n");
}

CorpusManifest load_manifest(const std::string& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::exception& e) {
        throw ValidationError("manifest parse error: " + std::string(e.what()));
    }
    CorpusManifest m;
    m.member_ids = j.at("member_ids").get<std::vector<std::string>>();
    m.nonmember_ids = j.at("nonmember_ids").get<std::vector<std::string>>();
    m.seed = j.at("seed").get<uint64_t>();
    m.tokenizer = j.at("tokenizer").get<std::string>();
    std::unordered_set<std::string> mm(m.member_ids.begin(), m.member_ids.end());
    for (const auto& id : m.nonmember_ids)
        if (mm.count(id)) throw ValidationError("manifest: id appears in both splits: " + id);
    return m;
}

NonmemberRoles reserve_nonmember_roles(const CorpusManifest& manifest, uint64_t seed, int n_prefix,
                                       int n_ref_train) {
    if (n_prefix < 0 || n_ref_train < 0) throw ValidationError("negative reservation count");
    std::vector<std::string> pool = manifest.nonmember_ids;
    std::sort(pool.begin(), pool.end());
    Rng rng(mix_seed(seed, "nonmember-roles"));
    rng.shuffle(pool);

    const size_t need = static_cast<size_t>(n_prefix) + static_cast<size_t>(n_ref_train);
    if (pool.size() <= need)
        throw ValidationError("not enough nonmember documents: have " + std::to_string(pool.size()) +
                              ", need > " + std::to_string(need) +
                              " (prefix pool + reference slice + at least one eval doc)");

    NonmemberRoles roles;
    roles.prefix_ids.assign(pool.begin(), pool.begin() + n_prefix);
    roles.ref_train_ids.assign(pool.begin() + n_prefix, pool.begin() + static_cast<long>(need));
    roles.eval_ids.assign(pool.begin() + static_cast<long>(need), pool.end());
    std::sort(roles.eval_ids.begin(), roles.eval_ids.end());
    return roles;
}

}  // namespace mialab
