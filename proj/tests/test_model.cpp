#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "pairrec/error.hpp"
#include "pairrec/model.hpp"
#include "pairrec/rng.hpp"
#include "support/gradcheck.hpp"
#include "support/synthetic.hpp"

using namespace pairrec;
using testsupport::TempDir;

namespace {

/// Glorot weights plus non-trivial biases and importances, so gradient
/// checks exercise generic positions rather than the all-zero special case.
ModelParams random_params(ModelShape shape, Rng& rng) {
    ModelParams p = ModelParams::glorot(shape, rng);
    for (double& b : p.enc_b1) b = 0.2 * (2.0 * rng.uniform() - 1.0);
    for (double& b : p.enc_b2) b = 0.2 * (2.0 * rng.uniform() - 1.0);
    for (double& b : p.enc_b3) b = 0.2 * (2.0 * rng.uniform() - 1.0);
    for (double& b : p.word_bias) b = 0.3 * (2.0 * rng.uniform() - 1.0);
    for (double& w : p.word_importance) w = 0.7 + 0.6 * rng.uniform();
    return p;
}

/// Independent dense re-implementation of the encoder.
std::vector<double> oracle_encode(const SparseVector& d, const ModelParams& p) {
    const uint32_t V = p.shape.vocab, H = p.shape.hidden, M = p.shape.bits;
    std::vector<double> x(V, 0.0);
    for (const auto& e : d.entries) x[e.word] = e.weight * p.word_importance[e.word];

    std::vector<double> h1(H), h2(H), q(M);
    for (uint32_t j = 0; j < H; ++j) {
        double a = p.enc_b1[j];
        for (uint32_t w = 0; w < V; ++w) a += x[w] * p.enc_w1[size_t(w) * H + j];
        h1[j] = std::max(0.0, a);
    }
    for (uint32_t j = 0; j < H; ++j) {
        double a = p.enc_b2[j];
        for (uint32_t i = 0; i < H; ++i) a += h1[i] * p.enc_w2[size_t(i) * H + j];
        h2[j] = std::max(0.0, a);
    }
    for (uint32_t j = 0; j < M; ++j) {
        double a = p.enc_b3[j];
        for (uint32_t i = 0; i < H; ++i) a += h2[i] * p.enc_w3[size_t(i) * M + j];
        const double s = 1.0 / (1.0 + std::exp(-a));
        q[j] = std::min(1.0 - kProbEpsilon, std::max(kProbEpsilon, s));
    }
    return q;
}

/// Independent dense re-implementation of the decoder log-likelihood.
double oracle_decode(std::span<const double> f, const SparseVector& doc,
                     const ModelParams& p) {
    const uint32_t V = p.shape.vocab, M = p.shape.bits;
    std::vector<double> logits(V);
    for (uint32_t w = 0; w < V; ++w) {
        double dot = 0.0;
        for (uint32_t j = 0; j < M; ++j) dot += f[j] * p.word_embedding[size_t(w) * M + j];
        logits[w] = p.word_importance[w] * dot + p.word_bias[w];
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (const double l : logits) sum += std::exp(l - mx);
    const double lse = mx + std::log(sum);
    double ll = 0.0;
    for (const auto& e : doc.entries) ll += logits[e.word] - lse;
    return ll;
}

BitProbabilities probs_from(std::vector<double> q) { return {std::move(q)}; }

}  // namespace

TEST_CASE("zero parameters encode every document to q = 0.5") {
    const ModelParams p = ModelParams::zeros({10, 4, 8});
    const SparseVector d{{{1, 2.0}, {7, 0.5}}};
    const BitProbabilities probs = encode_probs(d, p);
    REQUIRE(probs.q.size() == 8);
    for (const double q : probs.q) CHECK(q == 0.5);
}

TEST_CASE("model shapes are validated") {
    CHECK_THROWS_AS(ModelParams::zeros({10, 4, 7}), DataError);
    CHECK_THROWS_AS(ModelParams::zeros({10, 4, 256}), DataError);
    CHECK_THROWS_AS(ModelParams::zeros({0, 4, 8}), DataError);
    CHECK_THROWS_AS(ModelParams::zeros({10, 0, 8}), DataError);
    for (const uint32_t m : {8u, 16u, 32u, 64u, 128u}) CHECK_NOTHROW(ModelParams::zeros({4, 2, m}));
}

TEST_CASE("glorot init bounds the weights and leaves biases at zero") {
    Rng rng(41);
    const ModelShape shape{20, 6, 16};
    const ModelParams p = ModelParams::glorot(shape, rng);
    const double lim1 = std::sqrt(6.0 / (20 + 6));
    for (const double w : p.enc_w1) CHECK(std::abs(w) <= lim1);
    const double lim3 = std::sqrt(6.0 / (6 + 16));
    for (const double w : p.enc_w3) CHECK(std::abs(w) <= lim3);
    const double lime = std::sqrt(6.0 / (16 + 20));
    for (const double w : p.word_embedding) CHECK(std::abs(w) <= lime);
    for (const double b : p.enc_b1) CHECK(b == 0.0);
    for (const double b : p.enc_b3) CHECK(b == 0.0);
    for (const double b : p.word_bias) CHECK(b == 0.0);
    for (const double w : p.word_importance) CHECK(w == 1.0);

    double mean = 0.0;
    for (const double w : p.enc_w1) mean += w;
    CHECK(std::abs(mean / p.enc_w1.size()) < 0.1);

    Rng rng2(41);
    const ModelParams q = ModelParams::glorot(shape, rng2);
    CHECK(p.enc_w1 == q.enc_w1);
    CHECK(p.word_embedding == q.word_embedding);
}

TEST_CASE("encoder matches an independent dense evaluation") {
    Rng rng(42);
    for (int trial = 0; trial < 20; ++trial) {
        const ModelShape shape{25, 7, 16};
        const ModelParams p = random_params(shape, rng);
        const SparseVector d = testsupport::random_doc(shape.vocab, 10, rng);
        const BitProbabilities got = encode_probs(d, p);
        const std::vector<double> want = oracle_encode(d, p);
        REQUIRE(got.q.size() == want.size());
        for (size_t j = 0; j < want.size(); ++j) {
            CHECK(got.q[j] == doctest::Approx(want[j]).epsilon(1e-12));
            CHECK(got.q[j] > 0.0);
            CHECK(got.q[j] < 1.0);
        }
    }
}

TEST_CASE("empty documents encode through the biases alone") {
    Rng rng(43);
    const ModelParams p = random_params({12, 5, 8}, rng);
    const BitProbabilities got = encode_probs(SparseVector{}, p);
    const std::vector<double> want = oracle_encode(SparseVector{}, p);
    for (size_t j = 0; j < want.size(); ++j)
        CHECK(got.q[j] == doctest::Approx(want[j]).epsilon(1e-12));
}

TEST_CASE("saturated logits clamp to the epsilon band exactly") {
    ModelParams p = ModelParams::zeros({4, 2, 8});
    std::fill(p.enc_b3.begin(), p.enc_b3.begin() + 4, 100.0);
    std::fill(p.enc_b3.begin() + 4, p.enc_b3.end(), -100.0);
    const BitProbabilities probs = encode_probs(SparseVector{{{0, 1.0}}}, p);
    for (int j = 0; j < 4; ++j) CHECK(probs.q[j] == 1.0 - 1e-7);
    for (int j = 4; j < 8; ++j) CHECK(probs.q[j] == 1e-7);
}

TEST_CASE("out-of-vocabulary word ids are rejected") {
    const ModelParams p = ModelParams::zeros({10, 4, 8});
    const SparseVector bad{{{3, 1.0}, {10, 1.0}}};
    CHECK_THROWS_AS(encode_probs(bad, p), DataError);
    const NoisyCode f{std::vector<double>(8, 0.0)};
    CHECK_THROWS_AS(decode_log_likelihood(f, bad, p), DataError);
}

TEST_CASE("encoder gradients match finite differences of encode_probs") {
    Rng rng(44);
    const ModelShape shape{50, 16, 8};
    const ModelParams params = random_params(shape, rng);
    const SparseVector d = testsupport::random_doc(shape.vocab, 8, rng);

    EncodeCache cache;
    encode_forward(d, params, cache);

    for (const uint32_t j : {0u, 4u, 7u}) {
        Gradients grads = ModelParams::zeros(shape);
        std::vector<double> grad_q(shape.bits, 0.0);
        grad_q[j] = 1.0;
        encode_backward(d, params, cache, grad_q, grads);

        ModelParams perturbed = params;
        auto tensors = perturbed.tensors();
        const auto analytic = std::as_const(grads).tensors();
        for (size_t t = 0; t < tensors.size(); ++t) {
            double fd2 = 0.0, an2 = 0.0, diff2 = 0.0;
            for (size_t i = 0; i < tensors[t].size(); ++i) {
                const double saved = tensors[t][i];
                const double h = 1e-5 * std::max(1.0, std::abs(saved));
                tensors[t][i] = saved + h;
                const double up = encode_probs(d, perturbed).q[j];
                tensors[t][i] = saved - h;
                const double down = encode_probs(d, perturbed).q[j];
                tensors[t][i] = saved;
                const double fd = (up - down) / (2.0 * h);
                fd2 += fd * fd;
                an2 += analytic[t][i] * analytic[t][i];
                diff2 += (fd - analytic[t][i]) * (fd - analytic[t][i]);
            }
            const double denom = std::sqrt(std::max(fd2, an2));
            if (denom > 0.0) CHECK(std::sqrt(diff2) / denom < 1e-4);
            INFO("tensor ", ModelParams::tensor_names()[t], " bit ", j);
            // Decoder-only tensors must not receive encoder gradients.
            if (t == 7 || t == 8) CHECK(an2 == 0.0);
        }
    }
}

TEST_CASE("sampling follows the bit probabilities") {
    SUBCASE("clamped-high probabilities always sample 1") {
        const BitProbabilities probs = probs_from(std::vector<double>(8, 1.0 - 1e-7));
        Rng rng(45);
        for (int i = 0; i < 20; ++i) {
            const HashCode z = sample_code(probs, rng);
            CHECK(z.words[0] == 0xFFu);
            CHECK(z.words[1] == 0u);
        }
    }
    SUBCASE("fair bits come out near half") {
        const BitProbabilities probs = probs_from(std::vector<double>(8, 0.5));
        Rng rng(46);
        std::array<int, 8> ones{};
        const int draws = 10000;
        for (int i = 0; i < draws; ++i) {
            const HashCode z = sample_code(probs, rng);
            CHECK(z.bits == 8);
            for (uint32_t j = 0; j < 8; ++j) ones[j] += z.bit(j);
        }
        for (const int c : ones) {
            CHECK(c > 0.48 * draws);
            CHECK(c < 0.52 * draws);
        }
    }
    SUBCASE("same seed, same codes") {
        Rng source(47);
        std::vector<double> q(16);
        for (double& p : q) p = 0.05 + 0.9 * source.uniform();
        const BitProbabilities probs = probs_from(q);
        Rng a(48), b(48);
        for (int i = 0; i < 100; ++i) CHECK(sample_code(probs, a) == sample_code(probs, b));
    }
    SUBCASE("invalid lengths are rejected") {
        Rng rng(49);
        CHECK_THROWS_AS(sample_code(probs_from(std::vector<double>(5, 0.5)), rng), DataError);
    }
}

TEST_CASE("greedy thresholds strictly above one half") {
    std::vector<double> q(8, 0.2);
    q[0] = 0.9;
    q[1] = 0.2;
    q[2] = 0.5;        // exactly 0.5 must give 0
    q[3] = 0.500001;
    const HashCode z = greedy_code(probs_from(q));
    CHECK(z.bit(0));
    CHECK(!z.bit(1));
    CHECK(!z.bit(2));
    CHECK(z.bit(3));
    CHECK(z.words[0] == 0b1001u);
}

TEST_CASE("greedy picks the most probable code") {
    Rng rng(50);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> q(8);
        for (double& p : q) {
            do {
                p = 0.05 + 0.9 * rng.uniform();
            } while (std::abs(p - 0.5) < 1e-3);
        }
        const HashCode greedy = greedy_code(probs_from(q));

        uint64_t best_code = 0;
        double best_prob = -1.0;
        for (uint64_t code = 0; code < 256; ++code) {
            double prob = 1.0;
            for (uint32_t j = 0; j < 8; ++j)
                prob *= (code >> j) & 1 ? q[j] : 1.0 - q[j];
            if (prob > best_prob) {
                best_prob = prob;
                best_code = code;
            }
        }
        CHECK(greedy.words[0] == best_code);
    }
}

TEST_CASE("greedy codes are invariant under monotone logit transforms") {
    Rng rng(51);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> logits(8);
        for (double& a : logits)
            do {
                a = 4.0 * (2.0 * rng.uniform() - 1.0);
            } while (std::abs(a) < 1e-3);

        auto sigmoid_of = [](const std::vector<double>& as, auto&& f) {
            std::vector<double> q(as.size());
            for (size_t i = 0; i < as.size(); ++i) q[i] = 1.0 / (1.0 + std::exp(-f(as[i])));
            return q;
        };
        const HashCode base =
            greedy_code(probs_from(sigmoid_of(logits, [](double a) { return a; })));
        const HashCode scaled =
            greedy_code(probs_from(sigmoid_of(logits, [](double a) { return 3.0 * a; })));
        const HashCode cubed =
            greedy_code(probs_from(sigmoid_of(logits, [](double a) { return a * a * a; })));
        const HashCode squashed =
            greedy_code(probs_from(sigmoid_of(logits, [](double a) { return std::tanh(a); })));
        CHECK(base == scaled);
        CHECK(base == cubed);
        CHECK(base == squashed);

        HashCode signs;
        signs.bits = 8;
        for (uint32_t j = 0; j < 8; ++j)
            if (logits[j] > 0.0) signs.set(j);
        CHECK(base == signs);
    }
}

TEST_CASE("zero-variance noise returns the code exactly and consumes no randomness") {
    HashCode z;
    z.bits = 16;
    z.set(0);
    z.set(9);
    Rng used(52), untouched(52);
    const NoisyCode f = infuse_noise(z, 0.0, used);
    REQUIRE(f.f.size() == 16);
    for (uint32_t j = 0; j < 16; ++j) CHECK(f.f[j] == (z.bit(j) ? 1.0 : 0.0));
    CHECK(used.next_u64() == untouched.next_u64());
}

TEST_CASE("noise has the requested variance") {
    HashCode z;
    z.bits = 8;
    z.set(3);
    Rng rng(53);
    double sum = 0.0, sum2 = 0.0;
    int n = 0;
    for (int i = 0; i < 4000; ++i) {
        const NoisyCode f = infuse_noise(z, 1.0, rng);
        for (uint32_t j = 0; j < 8; ++j) {
            const double eps = f.f[j] - (z.bit(j) ? 1.0 : 0.0);
            sum += eps;
            sum2 += eps * eps;
            ++n;
        }
    }
    const double mean = sum / n;
    const double var = sum2 / n - mean * mean;
    CHECK(std::abs(mean) < 0.02);
    CHECK(var > 0.94);
    CHECK(var < 1.06);

    SUBCASE("quarter variance scales the spread") {
        Rng rng2(54);
        double s2 = 0.0;
        for (int i = 0; i < 4000; ++i) {
            const NoisyCode f = infuse_noise(z, 0.25, rng2);
            for (uint32_t j = 0; j < 8; ++j) {
                const double eps = f.f[j] - (z.bit(j) ? 1.0 : 0.0);
                s2 += eps * eps;
            }
        }
        const double v = s2 / (4000.0 * 8.0);
        CHECK(v > 0.23);
        CHECK(v < 0.27);
    }
}

TEST_CASE("negative variance is rejected") {
    HashCode z;
    z.bits = 8;
    Rng rng(55);
    CHECK_THROWS_AS(infuse_noise(z, -0.1, rng), std::invalid_argument);
}

TEST_CASE("uniform decoder assigns every word probability 1/V") {
    const ModelParams p = ModelParams::zeros({2, 1, 8});
    const NoisyCode f{std::vector<double>(8, 0.0)};
    const SparseVector one_word{{{1, 3.5}}};
    CHECK(decode_log_likelihood(f, one_word, p) ==
          doctest::Approx(-std::log(2.0)).epsilon(1e-15));

    const ModelParams p5 = ModelParams::zeros({5, 1, 8});
    const SparseVector three_words{{{0, 1.0}, {2, 1.0}, {4, 2.0}}};
    CHECK(decode_log_likelihood(f, three_words, p5) ==
          doctest::Approx(-3.0 * std::log(5.0)).epsilon(1e-14));
}

TEST_CASE("tfidf weights do not enter the decoder, only membership does") {
    Rng rng(56);
    const ModelParams p = random_params({15, 4, 8}, rng);
    NoisyCode f{std::vector<double>(8)};
    for (double& x : f.f) x = rng.normal();
    SparseVector doc{{{2, 1.0}, {7, 2.0}}};
    SparseVector reweighted{{{2, 10.0}, {7, 0.25}}};
    CHECK(decode_log_likelihood(f, doc, p) == decode_log_likelihood(f, reweighted, p));
}

TEST_CASE("zero embeddings make the decoder ignore the code") {
    Rng rng(57);
    ModelParams p = ModelParams::zeros({12, 3, 8});
    for (double& b : p.word_bias) b = rng.normal();
    const SparseVector doc{{{1, 1.0}, {5, 1.0}, {9, 1.0}}};

    NoisyCode fa{std::vector<double>(8)}, fb{std::vector<double>(8)};
    for (double& x : fa.f) x = rng.normal();
    for (double& x : fb.f) x = rng.normal();
    const double la = decode_log_likelihood(fa, doc, p);
    CHECK(la == decode_log_likelihood(fb, doc, p));

    // Independent recount from the biases.
    double mx = *std::max_element(p.word_bias.begin(), p.word_bias.end());
    double sum = 0.0;
    for (const double b : p.word_bias) sum += std::exp(b - mx);
    const double lse = mx + std::log(sum);
    double want = 0.0;
    for (const auto& e : doc.entries) want += p.word_bias[e.word] - lse;
    CHECK(la == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("decoder matches an independent dense evaluation") {
    Rng rng(58);
    for (int trial = 0; trial < 20; ++trial) {
        const ModelParams p = random_params({30, 5, 16}, rng);
        const SparseVector doc = testsupport::random_doc(30, 9, rng);
        NoisyCode f{std::vector<double>(16)};
        for (double& x : f.f) x = rng.normal();
        const double got = decode_log_likelihood(f, doc, p);
        CHECK(got == doctest::Approx(oracle_decode(f.f, doc, p)).epsilon(1e-9));
        CHECK(got < 0.0);  // proper log-probabilities
    }
}

TEST_CASE("decoder rejects empty documents and mismatched code lengths") {
    const ModelParams p = ModelParams::zeros({4, 2, 8});
    const NoisyCode f8{std::vector<double>(8, 0.0)};
    const NoisyCode f16{std::vector<double>(16, 0.0)};
    CHECK_THROWS_AS(decode_log_likelihood(f8, SparseVector{}, p), DataError);
    CHECK_THROWS_AS(decode_log_likelihood(f16, SparseVector{{{0, 1.0}}}, p), DataError);
}

TEST_CASE("decoder gradients match finite differences") {
    Rng rng(59);
    const ModelShape shape{20, 3, 8};
    const ModelParams params = random_params(shape, rng);
    const SparseVector doc = testsupport::random_doc(shape.vocab, 6, rng);
    std::vector<double> f(shape.bits);
    for (double& x : f) x = rng.normal();

    DecodeCache cache;
    decode_forward(f, doc, params, cache);
    Gradients grads = ModelParams::zeros(shape);
    std::vector<double> grad_f(shape.bits, 0.0);
    decode_backward(f, doc, params, cache, 1.0, grads, grad_f);

    // Gradient wrt the code vector.
    for (uint32_t j = 0; j < shape.bits; ++j) {
        std::vector<double> fp = f, fm = f;
        fp[j] += 1e-6;
        fm[j] -= 1e-6;
        DecodeCache scratch;
        const double fd = (decode_forward(fp, doc, params, scratch) -
                           decode_forward(fm, doc, params, scratch)) /
                          2e-6;
        CHECK(grad_f[j] == doctest::Approx(fd).epsilon(1e-5));
    }

    // Gradient wrt the decoder tensors; encoder tensors must stay zero.
    ModelParams perturbed = params;
    auto tensors = perturbed.tensors();
    const auto analytic = std::as_const(grads).tensors();
    for (size_t t = 0; t < tensors.size(); ++t) {
        double fd2 = 0.0, an2 = 0.0, diff2 = 0.0;
        for (size_t i = 0; i < tensors[t].size(); ++i) {
            const double saved = tensors[t][i];
            const double h = 1e-5 * std::max(1.0, std::abs(saved));
            DecodeCache scratch;
            tensors[t][i] = saved + h;
            const double up = decode_forward(f, doc, perturbed, scratch);
            tensors[t][i] = saved - h;
            const double down = decode_forward(f, doc, perturbed, scratch);
            tensors[t][i] = saved;
            const double fd = (up - down) / (2.0 * h);
            fd2 += fd * fd;
            an2 += analytic[t][i] * analytic[t][i];
            diff2 += (fd - analytic[t][i]) * (fd - analytic[t][i]);
        }
        INFO("tensor ", ModelParams::tensor_names()[t]);
        if (t <= 5) {
            CHECK(an2 == 0.0);  // encoder tensors untouched by the decoder
            CHECK(fd2 == 0.0);
        } else {
            const double denom = std::sqrt(std::max(fd2, an2));
            REQUIRE(denom > 0.0);
            CHECK(std::sqrt(diff2) / denom < 1e-4);
        }
    }
}

TEST_CASE("decode_backward scales linearly in coeff") {
    Rng rng(60);
    const ModelShape shape{10, 2, 8};
    const ModelParams params = random_params(shape, rng);
    const SparseVector doc = testsupport::random_doc(shape.vocab, 4, rng);
    std::vector<double> f(shape.bits);
    for (double& x : f) x = rng.normal();

    DecodeCache cache;
    decode_forward(f, doc, params, cache);
    Gradients g1 = ModelParams::zeros(shape), g2 = ModelParams::zeros(shape);
    std::vector<double> gf1(shape.bits, 0.0), gf2(shape.bits, 0.0);
    decode_backward(f, doc, params, cache, 1.0, g1, gf1);
    decode_backward(f, doc, params, cache, -2.5, g2, gf2);
    for (uint32_t j = 0; j < shape.bits; ++j)
        CHECK(gf2[j] == doctest::Approx(-2.5 * gf1[j]).epsilon(1e-12));
    for (size_t i = 0; i < g1.word_bias.size(); ++i)
        CHECK(g2.word_bias[i] == doctest::Approx(-2.5 * g1.word_bias[i]).epsilon(1e-12));
}

TEST_CASE("kl of a fair code is exactly zero") {
    for (const uint32_t m : {8u, 16u, 64u}) {
        const BitProbabilities probs = probs_from(std::vector<double>(m, 0.5));
        CHECK(kl_bernoulli(probs) == 0.0);
    }
}

TEST_CASE("kl of a saturated code approaches bits * ln 2") {
    const BitProbabilities probs = probs_from(std::vector<double>(8, 1.0 - 1e-7));
    CHECK(kl_bernoulli(probs) == doctest::Approx(8.0 * std::log(2.0)).epsilon(1e-3));
    const BitProbabilities low = probs_from(std::vector<double>(8, 1e-7));
    CHECK(kl_bernoulli(low) == doctest::Approx(8.0 * std::log(2.0)).epsilon(1e-3));
}

TEST_CASE("kl matches an independent form on a 1000-point grid") {
    // Oracle: KL(q||0.5) = q (ln q - ln 0.5) + (1-q) (ln(1-q) - ln 0.5).
    const double ln_half = std::log(0.5);
    for (int i = 0; i < 1000; ++i) {
        const double q = kProbEpsilon + (1.0 - 2.0 * kProbEpsilon) * (i + 0.5) / 1000.0;
        const double got = kl_bernoulli(probs_from({q}));
        const double want = q * (std::log(q) - ln_half) + (1.0 - q) * (std::log(1.0 - q) - ln_half);
        CHECK(got == doctest::Approx(want).epsilon(1e-10));
        CHECK(std::abs(got - want) < 1e-10);
        CHECK(got >= 0.0);
        if (std::abs(q - 0.5) > 1e-3) CHECK(got > 0.0);
    }
}

TEST_CASE("kl is additive over bits") {
    Rng rng(61);
    std::vector<double> q(16);
    for (double& p : q) p = 0.05 + 0.9 * rng.uniform();
    double sum = 0.0;
    for (const double p : q) sum += kl_bernoulli(probs_from({p}));
    CHECK(kl_bernoulli(probs_from(q)) == doctest::Approx(sum).epsilon(1e-12));
}

TEST_CASE("a self-pair with frozen equal codes doubles the single loss") {
    Rng rng(62);
    const ModelShape shape{20, 6, 8};
    const ModelParams params = random_params(shape, rng);
    const SparseVector d = testsupport::random_doc(shape.vocab, 6, rng);

    PairDraws draws;
    draws.z = sample_code(encode_probs(d, params), rng);
    draws.z_plus = draws.z;

    Gradients grads = ModelParams::zeros(shape);
    Workspace ws;
    const PairLoss loss =
        pairrec_loss_grad(d, &d, params, 0.0, 0.0, draws, 1.0, grads, ws);
    CHECK(loss.has_pair);
    CHECK(loss.reconstructions() == 2);
    CHECK(loss.recon == loss.recon_plus);
    CHECK(loss.kl == loss.kl_plus);
    CHECK(loss.loss == 2.0 * loss.recon);
}

TEST_CASE("beta enters the loss linearly at frozen draws") {
    Rng rng(63);
    const ModelShape shape{20, 6, 8};
    const ModelParams params = random_params(shape, rng);
    const SparseVector d = testsupport::random_doc(shape.vocab, 6, rng);
    const SparseVector dp = testsupport::random_doc(shape.vocab, 6, rng);

    PairDraws draws;
    draws.z = sample_code(encode_probs(d, params), rng);
    draws.z_plus = sample_code(encode_probs(dp, params), rng);

    Workspace ws;
    Gradients scratch = ModelParams::zeros(shape);
    const PairLoss l0 = pairrec_loss_grad(d, &dp, params, 0.0, 0.0, draws, 1.0, scratch, ws);
    const PairLoss l1 = pairrec_loss_grad(d, &dp, params, 0.1, 0.0, draws, 1.0, scratch, ws);
    CHECK(l1.kl == l0.kl);
    CHECK(l1.recon == l0.recon);
    CHECK(l1.loss - l0.loss == doctest::Approx(0.1 * (l0.kl + l0.kl_plus)).epsilon(1e-12));
}

TEST_CASE("the unpaired loss reduces to reconstruction plus kl") {
    Rng rng(64);
    const ModelShape shape{20, 6, 8};
    const ModelParams params = random_params(shape, rng);
    const SparseVector d = testsupport::random_doc(shape.vocab, 6, rng);

    PairDraws draws;
    draws.z = sample_code(encode_probs(d, params), rng);

    Gradients grads = ModelParams::zeros(shape);
    Workspace ws;
    const PairLoss loss =
        pairrec_loss_grad(d, nullptr, params, 0.25, 0.0, draws, 1.0, grads, ws);
    CHECK(!loss.has_pair);
    CHECK(loss.reconstructions() == 1);
    CHECK(loss.recon_plus == 0.0);
    CHECK(loss.kl_plus == 0.0);

    // Independent assembly from the public pieces.
    const BitProbabilities probs = encode_probs(d, params);
    NoisyCode f{std::vector<double>(shape.bits)};
    for (uint32_t j = 0; j < shape.bits; ++j) f.f[j] = draws.z.bit(j) ? 1.0 : 0.0;
    const double want = -decode_log_likelihood(f, d, params) + 0.25 * kl_bernoulli(probs);
    CHECK(loss.loss == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("grad_scale scales the accumulated gradients") {
    Rng rng(65);
    const ModelShape shape{15, 4, 8};
    const ModelParams params = random_params(shape, rng);
    const SparseVector d = testsupport::random_doc(shape.vocab, 5, rng);
    const SparseVector dp = testsupport::random_doc(shape.vocab, 5, rng);
    PairDraws draws;
    draws.z = sample_code(encode_probs(d, params), rng);
    draws.z_plus = sample_code(encode_probs(dp, params), rng);

    Workspace ws;
    Gradients full = ModelParams::zeros(shape), half = ModelParams::zeros(shape);
    pairrec_loss_grad(d, &dp, params, 0.05, 0.0, draws, 1.0, full, ws);
    pairrec_loss_grad(d, &dp, params, 0.05, 0.0, draws, 0.5, half, ws);

    const auto tf = std::as_const(full).tensors();
    const auto th = std::as_const(half).tensors();
    for (size_t t = 0; t < tf.size(); ++t)
        for (size_t i = 0; i < tf[t].size(); ++i)
            CHECK(th[t][i] == doctest::Approx(0.5 * tf[t][i]).epsilon(1e-12));
}

TEST_CASE("loss gradients match finite differences of the frozen-draw surrogate") {
    Rng rng(66);
    int checked = 0;
    for (int trial = 0; trial < 6; ++trial) {
        testsupport::GradCheckInstance inst;
        const uint32_t v = 20 + static_cast<uint32_t>(rng.uniform_int(11));
        const uint32_t h = 4 + static_cast<uint32_t>(rng.uniform_int(5));
        inst.params = random_params({v, h, 8}, rng);
        inst.d = testsupport::random_doc(v, 7, rng);
        inst.d_plus = testsupport::random_doc(v, 7, rng);
        inst.has_pair = trial % 3 != 2;
        inst.beta = std::array<double, 3>{0.0, 0.01, 0.1}[trial % 3];
        inst.variance = std::array<double, 3>{0.0, 1.0, 0.5}[(trial / 2) % 3];

        const testsupport::GradCheckReport report = testsupport::gradcheck(inst, rng);
        INFO("trial ", trial, " worst tensor ", report.worst_tensor);
        CHECK(report.loss_gap < 1e-9);
        CHECK(report.max_rel_err < 1e-4);
        ++checked;
    }
    CHECK(checked == 6);
}

TEST_CASE("rng-drawn losses report the draws they used") {
    Rng rng(67);
    const ModelShape shape{15, 4, 8};
    const ModelParams params = random_params(shape, rng);
    const SparseVector d = testsupport::random_doc(shape.vocab, 5, rng);
    const SparseVector dp = testsupport::random_doc(shape.vocab, 5, rng);

    Workspace ws;
    Gradients g1 = ModelParams::zeros(shape), g2 = ModelParams::zeros(shape);
    Rng draw_rng(68);
    PairDraws draws;
    const PairLoss sampled =
        pairrec_loss_grad(d, &dp, params, 0.01, 0.7, draw_rng, &draws, 1.0, g1, ws);
    CHECK(draws.noise.size() == shape.bits);
    CHECK(draws.noise_plus.size() == shape.bits);

    // Replaying the reported draws reproduces the loss and gradients.
    const PairLoss replayed =
        pairrec_loss_grad(d, &dp, params, 0.01, 0.7, draws, 1.0, g2, ws);
    CHECK(replayed.loss == sampled.loss);
    CHECK(replayed.recon == sampled.recon);
    CHECK(replayed.recon_plus == sampled.recon_plus);
    const auto t1 = std::as_const(g1).tensors();
    const auto t2 = std::as_const(g2).tensors();
    for (size_t t = 0; t < t1.size(); ++t)
        for (size_t i = 0; i < t1[t].size(); ++i) CHECK(t1[t][i] == t2[t][i]);
}

TEST_CASE("eval loss is deterministic and averages per reconstruction") {
    Rng rng(69);
    const ModelShape shape{20, 6, 8};
    const ModelParams params = random_params(shape, rng);
    const SparseVector d = testsupport::random_doc(shape.vocab, 6, rng);
    const SparseVector dp = testsupport::random_doc(shape.vocab, 6, rng);

    Workspace ws;
    const double paired = pair_eval_loss(d, &dp, params, 0.02, ws);
    CHECK(paired == pair_eval_loss(d, &dp, params, 0.02, ws));

    // Independent assembly: greedy codes, no noise, mean of the two terms.
    const BitProbabilities qd = encode_probs(d, params);
    const BitProbabilities qp = encode_probs(dp, params);
    NoisyCode fd{std::vector<double>(shape.bits)}, fp{std::vector<double>(shape.bits)};
    const HashCode zd = greedy_code(qd), zp = greedy_code(qp);
    for (uint32_t j = 0; j < shape.bits; ++j) {
        fd.f[j] = zd.bit(j) ? 1.0 : 0.0;
        fp.f[j] = zp.bit(j) ? 1.0 : 0.0;
    }
    const double term_d = -decode_log_likelihood(fd, d, params) + 0.02 * kl_bernoulli(qd);
    const double term_p = -decode_log_likelihood(fp, d, params) + 0.02 * kl_bernoulli(qp);
    CHECK(paired == doctest::Approx((term_d + term_p) / 2.0).epsilon(1e-12));

    const double solo = pair_eval_loss(d, nullptr, params, 0.02, ws);
    CHECK(solo == doctest::Approx(term_d).epsilon(1e-12));
}

TEST_CASE("checkpoints round-trip through 32-bit floats byte-identically") {
    Rng rng(70);
    const ModelShape shape{10, 5, 16};
    const ModelParams params = random_params(shape, rng);
    CheckpointMeta meta;
    meta.top_k = 25;
    meta.beta = 0.01;
    meta.variance = 0.4375;
    meta.step_count = 12345;
    meta.rng_seed = 99;

    TempDir dir;
    const std::string path1 = dir.file("a.prm"), path2 = dir.file("b.prm");
    save_checkpoint(path1, params, meta);
    const Checkpoint loaded = load_checkpoint(path1);
    CHECK(loaded.params.shape == shape);
    CHECK(loaded.meta.top_k == meta.top_k);
    CHECK(loaded.meta.beta == meta.beta);
    CHECK(loaded.meta.variance == meta.variance);
    CHECK(loaded.meta.step_count == meta.step_count);
    CHECK(loaded.meta.rng_seed == meta.rng_seed);

    const auto orig = std::as_const(params).tensors();
    const auto back = std::as_const(loaded.params).tensors();
    for (size_t t = 0; t < orig.size(); ++t) {
        REQUIRE(back[t].size() == orig[t].size());
        for (size_t i = 0; i < orig[t].size(); ++i)
            CHECK(back[t][i] == static_cast<double>(static_cast<float>(orig[t][i])));
    }

    save_checkpoint(path2, loaded.params, loaded.meta);
    CHECK(testsupport::read_file(path1) == testsupport::read_file(path2));

    CHECK_THROWS_AS(load_checkpoint(dir.file("missing.prm")), DataError);
}
