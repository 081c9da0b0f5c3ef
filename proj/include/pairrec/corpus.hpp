#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace pairrec {

/// One ingested document: pre-tokenized text plus at least one label.
struct RawDocument {
    uint32_t id = 0;
    std::vector<std::string> tokens;  // lowercased at parse time
    std::vector<uint32_t> labels;     // sorted, unique, non-empty
};

/// Parsed input corpus. Label ids index into label_names.
struct RawCorpus {
    std::vector<RawDocument> docs;
    std::vector<std::string> label_names;  // lexicographic, ids dense
};

/// Filtered vocabulary. Word ids are dense 0..V-1 in lexicographic order.
/// Every retained word occurs in >= 2 documents and in at most 90% of them.
struct Vocabulary {
    std::vector<std::string> words;
    std::vector<uint32_t> doc_freq;  // parallel to words
    uint32_t total_docs = 0;         // corpus size the frequencies refer to

    uint32_t size() const { return static_cast<uint32_t>(words.size()); }
    std::optional<uint32_t> word_id(std::string_view word) const;
};

struct SparseEntry {
    uint32_t word = 0;
    double weight = 0.0;
};

/// TF-IDF document vector: entries sorted by strictly increasing word id,
/// zero weights never stored.
struct SparseVector {
    std::vector<SparseEntry> entries;

    bool empty() const { return entries.empty(); }
    size_t size() const { return entries.size(); }
};

double dot(const SparseVector& a, const SparseVector& b);
double l2_norm(const SparseVector& v);

/// Deterministic 80/10/10 partition of document ids.
struct CorpusSplit {
    std::vector<uint32_t> train;
    std::vector<uint32_t> validation;
    std::vector<uint32_t> test;
    uint64_t seed = 0;
};

/// A vectorized document ready for training and retrieval.
struct Document {
    uint32_t id = 0;
    SparseVector vec;
    std::vector<uint32_t> labels;  // sorted, unique
};

/// Fully prepared corpus: vocabulary, vectorized documents (ascending id),
/// label table, and the train/validation/test split.
struct Corpus {
    std::string tfidf_scheme;  // recorded so files are self-describing
    Vocabulary vocab;
    std::vector<std::string> label_names;
    std::vector<Document> docs;  // ascending id
    CorpusSplit split;
    uint32_t dropped_empty = 0;  // docs with no in-vocabulary words (not serialized)

    const Document* find(uint32_t id) const;  // nullptr if absent
    const Document& at(uint32_t id) const;    // throws DataError if absent
};

/// Reads line-delimited records `id<TAB>label,label,...<TAB>token token ...`.
/// Tokens are lowercased. Throws DataError on malformed lines, duplicate ids,
/// or empty label sets.
RawCorpus parse_documents_tsv(std::istream& in);
RawCorpus parse_documents_tsv_file(const std::string& path);

/// Keeps only the `keep` most frequent labels (ties by name) and drops
/// documents carrying none of them. Surviving documents keep their full
/// label sets. keep == 0 disables the filter.
void filter_top_labels(RawCorpus& corpus, uint32_t keep);

/// Document-frequency filters: words in fewer than 2 documents or in more
/// than 90% of them are removed. An empty result is returned, not an error.
Vocabulary build_vocabulary(const std::vector<RawDocument>& docs);

/// weight(w) = count(w in doc) * ln(total_docs / doc_freq(w)).
/// Out-of-vocabulary words and zero weights are dropped; a document with no
/// in-vocabulary words yields an empty vector and the caller decides.
SparseVector tfidf_transform(const RawDocument& doc, const Vocabulary& vocab);

/// Shuffles the ids with the seeded generator and cuts 80/10/10
/// (train gets floor(n*8/10), the remainder is halved). Each split is
/// returned in ascending id order. Throws DataError for fewer than 10 ids.
CorpusSplit split_corpus(const std::vector<uint32_t>& doc_ids, uint64_t seed);

/// Full preparation: vocabulary, TF-IDF vectors (documents left empty by the
/// vocabulary filters are dropped and counted), split over the survivors.
Corpus build_corpus(const RawCorpus& raw, uint64_t seed);

/// Binary corpus file, magic "PRC1". Little-endian throughout; weights are
/// stored as 32-bit floats.
void save_corpus(const std::string& path, const Corpus& corpus);
Corpus load_corpus(const std::string& path);

}  // namespace pairrec
