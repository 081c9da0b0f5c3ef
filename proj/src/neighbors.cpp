#include "pairrec/neighbors.hpp"

#include <algorithm>
#include <fstream>

#include "pairrec/binary_io.hpp"
#include "pairrec/error.hpp"
#include "pairrec/parallel.hpp"
#include "pairrec/rng.hpp"

namespace pairrec {

namespace {

NeighborSet topk_with_norms(const SparseVector& query, uint32_t query_id,
                            std::span<const Document> pool, std::span<const double> norms,
                            uint32_t k) {
    if (query.empty())
        throw DataError("cosine similarity is undefined for an empty document vector");

    const double query_norm = l2_norm(query);
    struct Scored {
        double score;
        uint32_t id;
    };
    std::vector<Scored> scored;
    scored.reserve(pool.size());
    for (size_t i = 0; i < pool.size(); ++i) {
        if (pool[i].id == query_id) continue;
        const double denom = query_norm * norms[i];
        const double score = denom > 0.0 ? dot(query, pool[i].vec) / denom : 0.0;
        scored.push_back({score, pool[i].id});
    }

    const size_t take = std::min<size_t>(k, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + take, scored.end(),
                      [](const Scored& a, const Scored& b) {
                          if (a.score != b.score) return a.score > b.score;
                          return a.id < b.id;
                      });

    NeighborSet nset;
    nset.query_id = query_id;
    nset.neighbor_ids.reserve(take);
    nset.scores.reserve(take);
    for (size_t i = 0; i < take; ++i) {
        nset.neighbor_ids.push_back(scored[i].id);
        nset.scores.push_back(scored[i].score);
    }
    return nset;
}

}  // namespace

NeighborSet cosine_topk(const SparseVector& query, uint32_t query_id,
                        std::span<const Document> pool, uint32_t k) {
    std::vector<double> norms;
    norms.reserve(pool.size());
    for (const Document& doc : pool) norms.push_back(l2_norm(doc.vec));
    return topk_with_norms(query, query_id, pool, norms, k);
}

NeighborFile compute_neighbors(const Corpus& corpus, uint32_t top_k) {
    std::vector<Document> pool;
    pool.reserve(corpus.split.train.size());
    for (const uint32_t id : corpus.split.train) pool.push_back(corpus.at(id));
    std::vector<double> norms;
    norms.reserve(pool.size());
    for (const Document& doc : pool) norms.push_back(l2_norm(doc.vec));

    std::vector<uint32_t> queries = corpus.split.train;
    queries.insert(queries.end(), corpus.split.validation.begin(), corpus.split.validation.end());

    NeighborFile file;
    file.top_k = top_k;
    file.records.resize(queries.size());
    parallel_for(queries.size(), [&](size_t i) {
        const Document& query = corpus.at(queries[i]);
        file.records[i] = topk_with_norms(query.vec, query.id, pool, norms, top_k);
    });
    return file;
}

uint32_t sample_positive(const NeighborSet& nset, Rng& rng) {
    if (nset.empty()) throw DataError("cannot sample a positive from an empty neighbor set");
    return nset.neighbor_ids[rng.uniform_int(nset.size())];
}

void truncate_neighbors(NeighborFile& file, uint32_t k) {
    if (file.top_k < k)
        throw DataError("neighbor file holds top-" + std::to_string(file.top_k) +
                        " lists but top-" + std::to_string(k) + " was requested");
    for (NeighborSet& nset : file.records) {
        if (nset.size() > k) {
            nset.neighbor_ids.resize(k);
            nset.scores.resize(k);
        }
    }
    file.top_k = k;
}

std::unordered_map<uint32_t, const NeighborSet*> neighbor_index(const NeighborFile& file) {
    std::unordered_map<uint32_t, const NeighborSet*> index;
    index.reserve(file.records.size());
    for (const NeighborSet& nset : file.records) index.emplace(nset.query_id, &nset);
    return index;
}

void save_neighbors(const std::string& path, const NeighborFile& file) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open " + path + " for writing");

    io::write_magic(out, "PRN1");
    io::write_u32(out, file.top_k);
    io::write_u32(out, static_cast<uint32_t>(file.records.size()));
    for (const NeighborSet& nset : file.records) {
        io::write_u32(out, nset.query_id);
        io::write_u32(out, static_cast<uint32_t>(nset.size()));
        for (size_t i = 0; i < nset.size(); ++i) {
            io::write_u32(out, nset.neighbor_ids[i]);
            io::write_f32(out, static_cast<float>(nset.scores[i]));
        }
    }
    if (!out) throw DataError("write failed for " + path);
}

NeighborFile load_neighbors(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);

    io::expect_magic(in, "PRN1", "neighbor");
    NeighborFile file;
    file.top_k = io::read_u32(in);
    const uint32_t n = io::read_u32(in);
    file.records.resize(n);
    for (NeighborSet& nset : file.records) {
        nset.query_id = io::read_u32(in);
        const uint32_t count = io::read_u32(in);
        if (count > file.top_k) throw DataError(path + ": neighbor list longer than top_k");
        nset.neighbor_ids.reserve(count);
        nset.scores.reserve(count);
        for (uint32_t i = 0; i < count; ++i) {
            nset.neighbor_ids.push_back(io::read_u32(in));
            nset.scores.push_back(static_cast<double>(io::read_f32(in)));
        }
    }
    return file;
}

}  // namespace pairrec
