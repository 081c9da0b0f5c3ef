#include "pairrec/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "pairrec/binary_io.hpp"
#include "pairrec/error.hpp"
#include "pairrec/rng.hpp"

namespace pairrec {

namespace {

constexpr char kTfidfScheme[] = "count*ln(N/df)";

std::string lowercased(std::string_view s) {
    std::string out(s);
    for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
    std::vector<std::string_view> parts;
    size_t start = 0;
    while (true) {
        const size_t pos = s.find(sep, start);
        if (pos == std::string_view::npos) {
            parts.push_back(s.substr(start));
            return parts;
        }
        parts.push_back(s.substr(start, pos - start));
        start = pos + 1;
    }
}

uint32_t parse_doc_id(std::string_view field, size_t line_no) {
    if (field.empty()) throw DataError("line " + std::to_string(line_no) + ": empty id field");
    uint64_t value = 0;
    for (const char c : field) {
        if (c < '0' || c > '9')
            throw DataError("line " + std::to_string(line_no) + ": id is not a non-negative integer");
        value = value * 10 + static_cast<uint64_t>(c - '0');
        if (value > UINT32_MAX)
            throw DataError("line " + std::to_string(line_no) + ": id out of range");
    }
    return static_cast<uint32_t>(value);
}

}  // namespace

std::optional<uint32_t> Vocabulary::word_id(std::string_view word) const {
    const auto it = std::lower_bound(words.begin(), words.end(), word);
    if (it == words.end() || *it != word) return std::nullopt;
    return static_cast<uint32_t>(it - words.begin());
}

double dot(const SparseVector& a, const SparseVector& b) {
    double sum = 0.0;
    size_t i = 0, j = 0;
    while (i < a.entries.size() && j < b.entries.size()) {
        const uint32_t wa = a.entries[i].word;
        const uint32_t wb = b.entries[j].word;
        if (wa < wb) {
            ++i;
        } else if (wb < wa) {
            ++j;
        } else {
            sum += a.entries[i].weight * b.entries[j].weight;
            ++i;
            ++j;
        }
    }
    return sum;
}

double l2_norm(const SparseVector& v) {
    double sum = 0.0;
    for (const SparseEntry& e : v.entries) sum += e.weight * e.weight;
    return std::sqrt(sum);
}

const Document* Corpus::find(uint32_t id) const {
    const auto it = std::lower_bound(docs.begin(), docs.end(), id,
                                     [](const Document& d, uint32_t key) { return d.id < key; });
    if (it == docs.end() || it->id != id) return nullptr;
    return &*it;
}

const Document& Corpus::at(uint32_t id) const {
    const Document* doc = find(id);
    if (doc == nullptr) throw DataError("document id " + std::to_string(id) + " not in corpus");
    return *doc;
}

RawCorpus parse_documents_tsv(std::istream& in) {
    struct PendingDoc {
        uint32_t id;
        std::vector<std::string> tokens;
        std::vector<std::string> labels;
    };
    std::vector<PendingDoc> pending;
    std::unordered_set<uint32_t> seen_ids;

    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto fields = split(line, '\t');
        if (fields.size() != 3)
            throw DataError("line " + std::to_string(line_no) + ": expected 3 tab-separated fields, got " +
                            std::to_string(fields.size()));

        PendingDoc doc;
        doc.id = parse_doc_id(fields[0], line_no);
        if (!seen_ids.insert(doc.id).second)
            throw DataError("line " + std::to_string(line_no) + ": duplicate document id " +
                            std::to_string(doc.id));

        for (const std::string_view label : split(fields[1], ',')) {
            if (label.empty())
                throw DataError("line " + std::to_string(line_no) + ": empty label name");
            doc.labels.push_back(lowercased(label));
        }
        if (doc.labels.empty())
            throw DataError("line " + std::to_string(line_no) + ": document has no labels");

        std::istringstream tokens{std::string(fields[2])};
        std::string token;
        while (tokens >> token) doc.tokens.push_back(lowercased(token));
        pending.push_back(std::move(doc));
    }

    std::vector<std::string> names;
    for (const PendingDoc& doc : pending)
        names.insert(names.end(), doc.labels.begin(), doc.labels.end());
    std::sort(names.begin(), names.end());
    names.erase(std::unique(names.begin(), names.end()), names.end());

    RawCorpus corpus;
    corpus.label_names = names;
    corpus.docs.reserve(pending.size());
    for (PendingDoc& doc : pending) {
        RawDocument out;
        out.id = doc.id;
        out.tokens = std::move(doc.tokens);
        for (const std::string& label : doc.labels) {
            const auto it = std::lower_bound(names.begin(), names.end(), label);
            out.labels.push_back(static_cast<uint32_t>(it - names.begin()));
        }
        std::sort(out.labels.begin(), out.labels.end());
        out.labels.erase(std::unique(out.labels.begin(), out.labels.end()), out.labels.end());
        corpus.docs.push_back(std::move(out));
    }
    return corpus;
}

RawCorpus parse_documents_tsv_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    return parse_documents_tsv(in);
}

void filter_top_labels(RawCorpus& corpus, uint32_t keep) {
    if (keep == 0 || keep >= corpus.label_names.size()) return;

    std::vector<uint32_t> freq(corpus.label_names.size(), 0);
    for (const RawDocument& doc : corpus.docs)
        for (const uint32_t label : doc.labels) ++freq[label];

    std::vector<uint32_t> order(corpus.label_names.size());
    for (uint32_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](uint32_t a, uint32_t b) {
        if (freq[a] != freq[b]) return freq[a] > freq[b];
        return corpus.label_names[a] < corpus.label_names[b];
    });

    std::vector<bool> kept(corpus.label_names.size(), false);
    for (uint32_t i = 0; i < keep; ++i) kept[order[i]] = true;

    std::erase_if(corpus.docs, [&](const RawDocument& doc) {
        return std::none_of(doc.labels.begin(), doc.labels.end(),
                            [&](uint32_t label) { return kept[label]; });
    });
}

Vocabulary build_vocabulary(const std::vector<RawDocument>& docs) {
    if (docs.empty()) throw DataError("cannot build a vocabulary from zero documents");

    std::unordered_map<std::string, uint32_t> doc_freq;
    std::unordered_set<std::string_view> in_doc;
    for (const RawDocument& doc : docs) {
        in_doc.clear();
        for (const std::string& token : doc.tokens)
            if (in_doc.insert(token).second) ++doc_freq[token];
    }

    const uint32_t n = static_cast<uint32_t>(docs.size());
    Vocabulary vocab;
    vocab.total_docs = n;
    for (const auto& [word, df] : doc_freq) {
        // df >= 2 and df/n <= 0.9, the latter in exact integer form.
        if (df >= 2 && 10ull * df <= 9ull * n) vocab.words.push_back(word);
    }
    std::sort(vocab.words.begin(), vocab.words.end());
    vocab.doc_freq.reserve(vocab.words.size());
    for (const std::string& word : vocab.words) vocab.doc_freq.push_back(doc_freq.at(word));
    return vocab;
}

SparseVector tfidf_transform(const RawDocument& doc, const Vocabulary& vocab) {
    std::map<uint32_t, uint32_t> counts;  // word id -> term count, ordered
    for (const std::string& token : doc.tokens)
        if (const auto id = vocab.word_id(token)) ++counts[*id];

    SparseVector vec;
    vec.entries.reserve(counts.size());
    for (const auto& [word, count] : counts) {
        const double idf =
            std::log(static_cast<double>(vocab.total_docs) / static_cast<double>(vocab.doc_freq[word]));
        const double weight = static_cast<double>(count) * idf;
        if (weight > 0.0) vec.entries.push_back({word, weight});
    }
    return vec;
}

CorpusSplit split_corpus(const std::vector<uint32_t>& doc_ids, uint64_t seed) {
    if (doc_ids.size() < 10)
        throw DataError("need at least 10 documents to form train/validation/test splits, got " +
                        std::to_string(doc_ids.size()));

    std::vector<uint32_t> ids = doc_ids;
    std::sort(ids.begin(), ids.end());
    Rng rng(seed);
    rng.shuffle(ids);

    const size_t n = ids.size();
    const size_t n_train = n * 8 / 10;
    const size_t n_val = (n - n_train) / 2;

    CorpusSplit split;
    split.seed = seed;
    split.train.assign(ids.begin(), ids.begin() + n_train);
    split.validation.assign(ids.begin() + n_train, ids.begin() + n_train + n_val);
    split.test.assign(ids.begin() + n_train + n_val, ids.end());
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.validation.begin(), split.validation.end());
    std::sort(split.test.begin(), split.test.end());
    return split;
}

Corpus build_corpus(const RawCorpus& raw, uint64_t seed) {
    std::vector<RawDocument> docs = raw.docs;
    std::sort(docs.begin(), docs.end(),
              [](const RawDocument& a, const RawDocument& b) { return a.id < b.id; });

    Corpus corpus;
    corpus.tfidf_scheme = kTfidfScheme;
    corpus.label_names = raw.label_names;
    corpus.vocab = build_vocabulary(docs);
    if (corpus.vocab.size() == 0)
        throw DataError("vocabulary is empty after document-frequency filtering");

    for (const RawDocument& doc : docs) {
        SparseVector vec = tfidf_transform(doc, corpus.vocab);
        if (vec.empty()) {
            ++corpus.dropped_empty;
            continue;
        }
        corpus.docs.push_back({doc.id, std::move(vec), doc.labels});
    }

    std::vector<uint32_t> ids;
    ids.reserve(corpus.docs.size());
    for (const Document& doc : corpus.docs) ids.push_back(doc.id);
    corpus.split = split_corpus(ids, seed);
    return corpus;
}

void save_corpus(const std::string& path, const Corpus& corpus) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open " + path + " for writing");

    io::write_magic(out, "PRC1");
    io::write_string(out, corpus.tfidf_scheme);
    io::write_u32(out, corpus.vocab.total_docs);
    io::write_u32(out, corpus.vocab.size());
    for (uint32_t i = 0; i < corpus.vocab.size(); ++i) {
        io::write_string(out, corpus.vocab.words[i]);
        io::write_u32(out, corpus.vocab.doc_freq[i]);
    }
    io::write_u32(out, static_cast<uint32_t>(corpus.label_names.size()));
    for (const std::string& name : corpus.label_names) io::write_string(out, name);

    io::write_u32(out, static_cast<uint32_t>(corpus.docs.size()));
    for (const Document& doc : corpus.docs) {
        io::write_u32(out, doc.id);
        io::write_u32(out, static_cast<uint32_t>(doc.labels.size()));
        for (const uint32_t label : doc.labels) io::write_u32(out, label);
        io::write_u32(out, static_cast<uint32_t>(doc.vec.entries.size()));
        for (const SparseEntry& e : doc.vec.entries) {
            io::write_u32(out, e.word);
            io::write_f32(out, static_cast<float>(e.weight));
        }
    }

    io::write_u64(out, corpus.split.seed);
    for (const std::vector<uint32_t>* ids :
         {&corpus.split.train, &corpus.split.validation, &corpus.split.test}) {
        io::write_u32(out, static_cast<uint32_t>(ids->size()));
        for (const uint32_t id : *ids) io::write_u32(out, id);
    }
    if (!out) throw DataError("write failed for " + path);
}

Corpus load_corpus(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);

    io::expect_magic(in, "PRC1", "corpus");
    Corpus corpus;
    corpus.tfidf_scheme = io::read_string(in);
    corpus.vocab.total_docs = io::read_u32(in);
    const uint32_t v = io::read_u32(in);
    corpus.vocab.words.reserve(v);
    corpus.vocab.doc_freq.reserve(v);
    for (uint32_t i = 0; i < v; ++i) {
        corpus.vocab.words.push_back(io::read_string(in));
        corpus.vocab.doc_freq.push_back(io::read_u32(in));
    }
    const uint32_t n_labels = io::read_u32(in);
    corpus.label_names.reserve(n_labels);
    for (uint32_t i = 0; i < n_labels; ++i) corpus.label_names.push_back(io::read_string(in));

    const uint32_t n_docs = io::read_u32(in);
    corpus.docs.reserve(n_docs);
    uint32_t prev_id = 0;
    for (uint32_t i = 0; i < n_docs; ++i) {
        Document doc;
        doc.id = io::read_u32(in);
        if (i > 0 && doc.id <= prev_id) throw DataError(path + ": document ids not ascending");
        prev_id = doc.id;
        const uint32_t l = io::read_u32(in);
        doc.labels.reserve(l);
        for (uint32_t j = 0; j < l; ++j) doc.labels.push_back(io::read_u32(in));
        const uint32_t nnz = io::read_u32(in);
        doc.vec.entries.reserve(nnz);
        for (uint32_t j = 0; j < nnz; ++j) {
            const uint32_t word = io::read_u32(in);
            const float weight = io::read_f32(in);
            if (word >= v) throw DataError(path + ": word id out of range");
            doc.vec.entries.push_back({word, static_cast<double>(weight)});
        }
        corpus.docs.push_back(std::move(doc));
    }

    corpus.split.seed = io::read_u64(in);
    for (std::vector<uint32_t>* ids :
         {&corpus.split.train, &corpus.split.validation, &corpus.split.test}) {
        const uint32_t n = io::read_u32(in);
        ids->reserve(n);
        for (uint32_t i = 0; i < n; ++i) ids->push_back(io::read_u32(in));
    }
    return corpus;
}

}  // namespace pairrec
