#include "pairrec/retrieval.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <fstream>

#include "pairrec/binary_io.hpp"
#include "pairrec/error.hpp"
#include "pairrec/parallel.hpp"

namespace pairrec {

namespace {

uint32_t packed_words(uint32_t bits) { return (bits + 63) / 64; }

bool share_label(const std::vector<uint32_t>& a, const std::vector<uint32_t>& b) {
    size_t i = 0, j = 0;
    while (i < a.size() && j < b.size()) {
        if (a[i] < b[j]) {
            ++i;
        } else if (b[j] < a[i]) {
            ++j;
        } else {
            return true;
        }
    }
    return false;
}

}  // namespace

uint32_t hamming_distance(const HashCode& a, const HashCode& b) {
    if (a.bits != b.bits)
        throw DataError("cannot compare hash codes of different lengths (" +
                        std::to_string(a.bits) + " vs " + std::to_string(b.bits) + ")");
    uint32_t distance = 0;
    for (uint32_t w = 0; w < packed_words(a.bits); ++w)
        distance += static_cast<uint32_t>(std::popcount(a.words[w] ^ b.words[w]));
    return distance;
}

RetrievalResult top_n(const CodeIndex& index, const HashCode& query, uint32_t query_id,
                      uint32_t n) {
    if (index.size() <= n)
        throw DataError("index holds " + std::to_string(index.size()) +
                        " documents; need more than " + std::to_string(n));

    struct Scored {
        uint32_t distance;
        uint32_t id;
    };
    std::vector<Scored> scored;
    scored.reserve(index.size());
    for (size_t i = 0; i < index.size(); ++i) {
        if (index.doc_ids[i] == query_id) continue;
        scored.push_back({hamming_distance(index.code(i), query), index.doc_ids[i]});
    }
    if (scored.size() < n)
        throw DataError("index too small after excluding the query document");

    std::partial_sort(scored.begin(), scored.begin() + n, scored.end(),
                      [](const Scored& a, const Scored& b) {
                          if (a.distance != b.distance) return a.distance < b.distance;
                          return a.id < b.id;
                      });

    RetrievalResult result;
    result.query_id = query_id;
    result.hits.reserve(n);
    for (uint32_t i = 0; i < n; ++i) result.hits.emplace_back(scored[i].id, scored[i].distance);
    return result;
}

double prec_at_100(const std::vector<RetrievalResult>& results,
                   const std::unordered_map<uint32_t, std::vector<uint32_t>>& labels) {
    if (results.empty()) throw DataError("no retrieval results to score");

    double sum = 0.0;
    for (const RetrievalResult& result : results) {
        if (result.hits.size() != kRetrievalDepth)
            throw DataError("result for query " + std::to_string(result.query_id) + " has " +
                            std::to_string(result.hits.size()) + " hits; expected " +
                            std::to_string(kRetrievalDepth));
        const auto query_it = labels.find(result.query_id);
        if (query_it == labels.end())
            throw DataError("no labels for query " + std::to_string(result.query_id));
        uint32_t relevant = 0;
        for (const auto& [id, distance] : result.hits) {
            const auto it = labels.find(id);
            if (it == labels.end())
                throw DataError("no labels for document " + std::to_string(id));
            if (share_label(query_it->second, it->second)) ++relevant;
        }
        sum += static_cast<double>(relevant) / static_cast<double>(kRetrievalDepth);
    }
    return sum / static_cast<double>(results.size());
}

CodeIndex encode_corpus(const ModelParams& params, const Corpus& corpus,
                        const std::vector<uint32_t>& ids) {
    if (params.shape.vocab != corpus.vocab.size())
        throw DataError("checkpoint vocabulary size " + std::to_string(params.shape.vocab) +
                        " does not match corpus vocabulary " +
                        std::to_string(corpus.vocab.size()));

    CodeIndex index;
    index.bits = params.shape.bits;
    index.doc_ids = ids;
    index.codes.resize(ids.size());
    index.labels.resize(ids.size());
    parallel_for(ids.size(), [&](size_t i) {
        const Document& doc = corpus.at(ids[i]);
        const HashCode z = greedy_code(encode_probs(doc.vec, params));
        index.codes[i] = z.words;
        index.labels[i] = doc.labels;
    });
    return index;
}

double evaluate_prec_at_100(const CodeIndex& index, const CodeIndex& queries) {
    std::unordered_map<uint32_t, std::vector<uint32_t>> labels;
    labels.reserve(index.size() + queries.size());
    for (size_t i = 0; i < index.size(); ++i) labels.emplace(index.doc_ids[i], index.labels[i]);
    for (size_t i = 0; i < queries.size(); ++i)
        labels.emplace(queries.doc_ids[i], queries.labels[i]);

    std::vector<RetrievalResult> results(queries.size());
    parallel_for(queries.size(), [&](size_t i) {
        results[i] = top100(index, queries.code(i), queries.doc_ids[i]);
    });
    return prec_at_100(results, labels);
}

void save_codes(const std::string& path, const CodeIndex& index) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open " + path + " for writing");

    io::write_magic(out, "PRH1");
    io::write_u32(out, index.bits);
    io::write_u32(out, static_cast<uint32_t>(index.size()));
    for (const uint32_t id : index.doc_ids) io::write_u32(out, id);
    for (const auto& code : index.codes)
        for (uint32_t w = 0; w < packed_words(index.bits); ++w) io::write_u64(out, code[w]);
    for (const auto& labels : index.labels) {
        io::write_u32(out, static_cast<uint32_t>(labels.size()));
        for (const uint32_t label : labels) io::write_u32(out, label);
    }
    if (!out) throw DataError("write failed for " + path);
}

CodeIndex load_codes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);

    io::expect_magic(in, "PRH1", "code");
    CodeIndex index;
    index.bits = io::read_u32(in);
    const uint32_t n = io::read_u32(in);
    index.doc_ids.reserve(n);
    for (uint32_t i = 0; i < n; ++i) index.doc_ids.push_back(io::read_u32(in));
    index.codes.resize(n);
    for (auto& code : index.codes)
        for (uint32_t w = 0; w < packed_words(index.bits); ++w) code[w] = io::read_u64(in);
    index.labels.resize(n);
    for (auto& labels : index.labels) {
        const uint32_t count = io::read_u32(in);
        labels.reserve(count);
        for (uint32_t i = 0; i < count; ++i) labels.push_back(io::read_u32(in));
    }
    return index;
}

void write_metrics(const std::string& path, const std::vector<MetricsRow>& rows) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open " + path + " for writing");
    out << "# queries: test split; corpus: train split; relevance: shares >= 1 label; "
           "ties: ascending doc id\n";
    out << "# dataset\tbits\tk\tbeta\tprec@100\n";
    for (const MetricsRow& row : rows) {
        char beta[32], prec[32];
        std::snprintf(beta, sizeof(beta), "%g", row.beta);
        std::snprintf(prec, sizeof(prec), "%.6f", row.prec);
        out << row.dataset << '\t' << row.bits << '\t' << row.top_k << '\t' << beta << '\t'
            << prec << '\n';
    }
    if (!out) throw DataError("write failed for " + path);
}

}  // namespace pairrec
