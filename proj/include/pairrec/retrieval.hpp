#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "pairrec/corpus.hpp"
#include "pairrec/model.hpp"

namespace pairrec {

/// Documents of the standard retrieval protocol: queries come from the test
/// split, the searched corpus from the training split. Declared in the
/// metrics file header so results are auditable.
constexpr uint32_t kRetrievalDepth = 100;

/// Immutable packed-code index over one document set.
struct CodeIndex {
    uint32_t bits = 0;
    std::vector<uint32_t> doc_ids;
    std::vector<std::array<uint64_t, 2>> codes;   // parallel to doc_ids
    std::vector<std::vector<uint32_t>> labels;    // parallel to doc_ids, sorted

    size_t size() const { return doc_ids.size(); }
    HashCode code(size_t i) const { return {bits, codes[i]}; }
};

/// popcount(a XOR b) over the packed words. Throws DataError when the code
/// lengths differ.
uint32_t hamming_distance(const HashCode& a, const HashCode& b);

struct RetrievalResult {
    uint32_t query_id = 0;
    std::vector<std::pair<uint32_t, uint32_t>> hits;  // (doc id, distance), distance non-decreasing
};

/// Exact n nearest codes by Hamming distance, the query document itself
/// excluded. Ties break by ascending doc id. Throws DataError when the
/// index holds no more than n documents.
RetrievalResult top_n(const CodeIndex& index, const HashCode& query, uint32_t query_id,
                      uint32_t n);

inline RetrievalResult top100(const CodeIndex& index, const HashCode& query,
                              uint32_t query_id) {
    return top_n(index, query, query_id, kRetrievalDepth);
}

/// Mean over queries of (retrieved docs sharing >= 1 label with the query) / 100.
/// Every result must hold exactly 100 hits and every document involved must
/// appear in the label map.
double prec_at_100(const std::vector<RetrievalResult>& results,
                   const std::unordered_map<uint32_t, std::vector<uint32_t>>& labels);

/// Greedy codes (no sampling, no noise) for the given documents.
/// Parallel over documents; output independent of the worker count.
CodeIndex encode_corpus(const ModelParams& params, const Corpus& corpus,
                        const std::vector<uint32_t>& ids);

/// Runs top-100 retrieval for every query against the index and scores it.
double evaluate_prec_at_100(const CodeIndex& index, const CodeIndex& queries);

/// Code file, magic "PRH1": header (bits, doc count), doc id block, packed
/// code block (little-endian 64-bit words), label block.
void save_codes(const std::string& path, const CodeIndex& index);
CodeIndex load_codes(const std::string& path);

struct MetricsRow {
    std::string dataset;
    uint32_t bits = 0;
    uint32_t top_k = 0;
    double beta = 0.0;
    double prec = 0.0;
};

/// Plain-text metrics table with the retrieval protocol declared in the
/// header comments.
void write_metrics(const std::string& path, const std::vector<MetricsRow>& rows);

}  // namespace pairrec
