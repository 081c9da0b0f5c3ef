#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "pairrec/corpus.hpp"

namespace pairrec {

class Rng;

/// Ranked nearest neighbors of one query document. Scores are cosine
/// similarities, non-increasing; the query itself is never included.
struct NeighborSet {
    uint32_t query_id = 0;
    std::vector<uint32_t> neighbor_ids;
    std::vector<double> scores;

    bool empty() const { return neighbor_ids.empty(); }
    size_t size() const { return neighbor_ids.size(); }
};

/// Neighbor sets for all training-split queries followed by all
/// validation-split queries. The pool is always the training split, so
/// training pairs stay inside it and validation never leaks into training.
struct NeighborFile {
    uint32_t top_k = 0;
    std::vector<NeighborSet> records;
};

/// Exact brute-force cosine ranking over the pool, self excluded.
/// Ties break by ascending doc id; documents orthogonal to the query
/// score 0 and may fill the tail. Throws DataError for an empty query.
NeighborSet cosine_topk(const SparseVector& query, uint32_t query_id,
                        std::span<const Document> pool, uint32_t k);

/// cosine_topk for every train and validation document against the train
/// pool. Parallel over queries; output is independent of the worker count.
NeighborFile compute_neighbors(const Corpus& corpus, uint32_t top_k);

/// Uniform draw from the neighbor set. Throws DataError when empty
/// (the k = 0 ablation never samples).
uint32_t sample_positive(const NeighborSet& nset, Rng& rng);

/// Cuts every record down to its first k neighbors so a file computed at a
/// larger k can be reused. Throws DataError if the file holds fewer.
void truncate_neighbors(NeighborFile& file, uint32_t k);

std::unordered_map<uint32_t, const NeighborSet*> neighbor_index(const NeighborFile& file);

/// Binary neighbor file, magic "PRN1"; scores stored as 32-bit floats.
void save_neighbors(const std::string& path, const NeighborFile& file);
NeighborFile load_neighbors(const std::string& path);

}  // namespace pairrec
