#include "pairrec/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "pairrec/binary_io.hpp"
#include "pairrec/error.hpp"
#include "pairrec/rng.hpp"

namespace pairrec {

namespace {

void check_bits(uint32_t m) {
    if (m != 8 && m != 16 && m != 32 && m != 64 && m != 128)
        throw DataError("code length must be one of {8, 16, 32, 64, 128}, got " +
                        std::to_string(m));
}

void check_doc(const SparseVector& d, uint32_t vocab) {
    if (!d.entries.empty() && d.entries.back().word >= vocab)
        throw DataError("document word id " + std::to_string(d.entries.back().word) +
                        " exceeds vocabulary size " + std::to_string(vocab));
}

double clamp_prob(double p) {
    return std::min(1.0 - kProbEpsilon, std::max(kProbEpsilon, p));
}

double kl_sum(std::span<const double> q) {
    double sum = 0.0;
    for (const double p : q)
        sum += p * std::log(2.0 * p) + (1.0 - p) * std::log(2.0 * (1.0 - p));
    return sum;
}

void fill_uniform(std::span<double> out, double limit, Rng& rng) {
    for (double& w : out) w = (2.0 * rng.uniform() - 1.0) * limit;
}

double glorot_limit(uint32_t fan_in, uint32_t fan_out) {
    return std::sqrt(6.0 / (static_cast<double>(fan_in) + static_cast<double>(fan_out)));
}

}  // namespace

ModelParams ModelParams::zeros(ModelShape shape) {
    check_bits(shape.bits);
    if (shape.vocab == 0 || shape.hidden == 0)
        throw DataError("model shape dimensions must be positive");
    const size_t v = shape.vocab, h = shape.hidden, m = shape.bits;
    ModelParams p;
    p.shape = shape;
    p.enc_w1.assign(v * h, 0.0);
    p.enc_b1.assign(h, 0.0);
    p.enc_w2.assign(h * h, 0.0);
    p.enc_b2.assign(h, 0.0);
    p.enc_w3.assign(h * m, 0.0);
    p.enc_b3.assign(m, 0.0);
    p.word_importance.assign(v, 0.0);
    p.word_embedding.assign(v * m, 0.0);
    p.word_bias.assign(v, 0.0);
    return p;
}

ModelParams ModelParams::glorot(ModelShape shape, Rng& rng) {
    ModelParams p = zeros(shape);
    const uint32_t v = shape.vocab, h = shape.hidden, m = shape.bits;
    fill_uniform(p.enc_w1, glorot_limit(v, h), rng);
    fill_uniform(p.enc_w2, glorot_limit(h, h), rng);
    fill_uniform(p.enc_w3, glorot_limit(h, m), rng);
    fill_uniform(p.word_embedding, glorot_limit(m, v), rng);
    std::fill(p.word_importance.begin(), p.word_importance.end(), 1.0);
    return p;
}

std::array<std::span<double>, 9> ModelParams::tensors() {
    return {enc_w1, enc_b1, enc_w2, enc_b2, enc_w3, enc_b3,
            word_importance, word_embedding, word_bias};
}

std::array<std::span<const double>, 9> ModelParams::tensors() const {
    return {enc_w1, enc_b1, enc_w2, enc_b2, enc_w3, enc_b3,
            word_importance, word_embedding, word_bias};
}

const std::array<const char*, 9>& ModelParams::tensor_names() {
    static const std::array<const char*, 9> names = {
        "enc_w1", "enc_b1", "enc_w2", "enc_b2", "enc_w3",
        "enc_b3", "word_importance", "word_embedding", "word_bias"};
    return names;
}

void encode_forward(const SparseVector& d, const ModelParams& p, EncodeCache& c) {
    const uint32_t h = p.shape.hidden, m = p.shape.bits;
    check_doc(d, p.shape.vocab);

    c.x.resize(d.entries.size());
    c.h1.assign(p.enc_b1.begin(), p.enc_b1.end());
    for (size_t e = 0; e < d.entries.size(); ++e) {
        const uint32_t w = d.entries[e].word;
        const double x = d.entries[e].weight * p.word_importance[w];
        c.x[e] = x;
        const double* row = &p.enc_w1[size_t(w) * h];
        for (uint32_t j = 0; j < h; ++j) c.h1[j] += x * row[j];
    }
    for (double& a : c.h1) a = a > 0.0 ? a : 0.0;

    c.h2.assign(p.enc_b2.begin(), p.enc_b2.end());
    for (uint32_t i = 0; i < h; ++i) {
        const double hi = c.h1[i];
        if (hi <= 0.0) continue;
        const double* row = &p.enc_w2[size_t(i) * h];
        for (uint32_t j = 0; j < h; ++j) c.h2[j] += hi * row[j];
    }
    for (double& a : c.h2) a = a > 0.0 ? a : 0.0;

    c.q.assign(p.enc_b3.begin(), p.enc_b3.end());
    for (uint32_t i = 0; i < h; ++i) {
        const double hi = c.h2[i];
        if (hi <= 0.0) continue;
        const double* row = &p.enc_w3[size_t(i) * m];
        for (uint32_t j = 0; j < m; ++j) c.q[j] += hi * row[j];
    }
    for (double& a : c.q) a = clamp_prob(1.0 / (1.0 + std::exp(-a)));
}

void encode_backward(const SparseVector& d, const ModelParams& p, const EncodeCache& c,
                     std::span<const double> grad_q, Gradients& g) {
    const uint32_t h = p.shape.hidden, m = p.shape.bits;
    if (grad_q.size() != m) throw DataError("grad_q length does not match code length");

    // Sigmoid derivative; a clamped output is locally constant in the input.
    std::vector<double> ga3(m);
    for (uint32_t j = 0; j < m; ++j) {
        const double q = c.q[j];
        const double sp = (q <= kProbEpsilon || q >= 1.0 - kProbEpsilon) ? 0.0 : q * (1.0 - q);
        ga3[j] = grad_q[j] * sp;
    }

    for (uint32_t j = 0; j < m; ++j) g.enc_b3[j] += ga3[j];
    std::vector<double> gh2(h, 0.0);  // already ReLU-masked: only h2 > 0 rows contribute
    for (uint32_t i = 0; i < h; ++i) {
        const double hi = c.h2[i];
        if (hi <= 0.0) continue;
        const double* row = &p.enc_w3[size_t(i) * m];
        double* grow = &g.enc_w3[size_t(i) * m];
        double acc = 0.0;
        for (uint32_t j = 0; j < m; ++j) {
            grow[j] += hi * ga3[j];
            acc += row[j] * ga3[j];
        }
        gh2[i] = acc;
    }

    for (uint32_t j = 0; j < h; ++j) g.enc_b2[j] += gh2[j];
    std::vector<double> gh1(h, 0.0);
    for (uint32_t i = 0; i < h; ++i) {
        const double hi = c.h1[i];
        if (hi <= 0.0) continue;
        const double* row = &p.enc_w2[size_t(i) * h];
        double* grow = &g.enc_w2[size_t(i) * h];
        double acc = 0.0;
        for (uint32_t j = 0; j < h; ++j) {
            grow[j] += hi * gh2[j];
            acc += row[j] * gh2[j];
        }
        gh1[i] = acc;
    }

    for (uint32_t j = 0; j < h; ++j) g.enc_b1[j] += gh1[j];
    for (size_t e = 0; e < d.entries.size(); ++e) {
        const uint32_t w = d.entries[e].word;
        const double* row = &p.enc_w1[size_t(w) * h];
        double* grow = &g.enc_w1[size_t(w) * h];
        const double x = c.x[e];
        double acc = 0.0;
        for (uint32_t j = 0; j < h; ++j) {
            grow[j] += x * gh1[j];
            acc += row[j] * gh1[j];
        }
        g.word_importance[w] += acc * d.entries[e].weight;
    }
}

BitProbabilities encode_probs(const SparseVector& d, const ModelParams& p) {
    EncodeCache cache;
    encode_forward(d, p, cache);
    return {std::move(cache.q)};
}

HashCode sample_code(const BitProbabilities& probs, Rng& rng) {
    const uint32_t m = static_cast<uint32_t>(probs.q.size());
    check_bits(m);
    HashCode z;
    z.bits = m;
    for (uint32_t j = 0; j < m; ++j)
        if (rng.uniform() < probs.q[j]) z.set(j);
    return z;
}

HashCode greedy_code(const BitProbabilities& probs) {
    const uint32_t m = static_cast<uint32_t>(probs.q.size());
    check_bits(m);
    HashCode z;
    z.bits = m;
    for (uint32_t j = 0; j < m; ++j)
        if (probs.q[j] > 0.5) z.set(j);
    return z;
}

NoisyCode infuse_noise(const HashCode& z, double variance, Rng& rng) {
    if (variance < 0.0) throw std::invalid_argument("noise variance must be non-negative");
    NoisyCode out;
    out.f.resize(z.bits);
    if (variance == 0.0) {
        for (uint32_t j = 0; j < z.bits; ++j) out.f[j] = z.bit(j) ? 1.0 : 0.0;
        return out;
    }
    const double sd = std::sqrt(variance);
    for (uint32_t j = 0; j < z.bits; ++j)
        out.f[j] = (z.bit(j) ? 1.0 : 0.0) + sd * rng.normal();
    return out;
}

double decode_forward(std::span<const double> f, const SparseVector& doc,
                      const ModelParams& p, DecodeCache& c) {
    const uint32_t v = p.shape.vocab, m = p.shape.bits;
    if (doc.empty()) throw DataError("cannot decode a document with no in-vocabulary words");
    check_doc(doc, v);
    if (f.size() != m) throw DataError("code length does not match model bits");

    c.dots.resize(v);
    c.softmax.resize(v);
    double max_logit = -std::numeric_limits<double>::infinity();
    for (uint32_t w = 0; w < v; ++w) {
        const double* row = &p.word_embedding[size_t(w) * m];
        double d_ = 0.0;
        for (uint32_t j = 0; j < m; ++j) d_ += f[j] * row[j];
        c.dots[w] = d_;
        const double logit = p.word_importance[w] * d_ + p.word_bias[w];
        c.softmax[w] = logit;  // holds logits until the normalization below
        if (logit > max_logit) max_logit = logit;
    }

    double sum = 0.0;
    for (uint32_t w = 0; w < v; ++w) sum += std::exp(c.softmax[w] - max_logit);
    c.lse = max_logit + std::log(sum);

    double loglik = 0.0;
    for (const SparseEntry& e : doc.entries) loglik += c.softmax[e.word];
    loglik -= static_cast<double>(doc.entries.size()) * c.lse;
    c.loglik = loglik;

    for (uint32_t w = 0; w < v; ++w) c.softmax[w] = std::exp(c.softmax[w] - c.lse);
    return loglik;
}

void decode_backward(std::span<const double> f, const SparseVector& doc,
                     const ModelParams& p, const DecodeCache& c, double coeff,
                     Gradients& g, std::span<double> grad_f) {
    const uint32_t v = p.shape.vocab, m = p.shape.bits;
    if (grad_f.size() != m) throw DataError("grad_f length does not match code length");

    const double n_words = static_cast<double>(doc.entries.size());
    size_t e = 0;
    for (uint32_t w = 0; w < v; ++w) {
        double indicator = 0.0;
        if (e < doc.entries.size() && doc.entries[e].word == w) {
            indicator = 1.0;
            ++e;
        }
        // d loglik / d logit_w = 1[w in doc] - |W_d| * softmax_w
        const double glogit = coeff * (indicator - n_words * c.softmax[w]);
        g.word_bias[w] += glogit;
        g.word_importance[w] += glogit * c.dots[w];
        const double cf = glogit * p.word_importance[w];
        const double* row = &p.word_embedding[size_t(w) * m];
        double* grow = &g.word_embedding[size_t(w) * m];
        for (uint32_t j = 0; j < m; ++j) {
            grad_f[j] += cf * row[j];
            grow[j] += cf * f[j];
        }
    }
}

double decode_log_likelihood(const NoisyCode& code, const SparseVector& doc,
                             const ModelParams& params) {
    DecodeCache cache;
    return decode_forward(code.f, doc, params, cache);
}

double kl_bernoulli(const BitProbabilities& probs) {
    return kl_sum(probs.q);
}

namespace {

PairDraws make_draws(const EncodeCache& enc_d, const EncodeCache* enc_p, double variance,
                     uint32_t m, Rng& rng) {
    PairDraws draws;
    draws.z = sample_code({enc_d.q}, rng);
    if (enc_p != nullptr) draws.z_plus = sample_code({enc_p->q}, rng);
    if (variance > 0.0) {
        draws.noise.resize(m);
        for (double& n : draws.noise) n = rng.normal();
        if (enc_p != nullptr) {
            draws.noise_plus.resize(m);
            for (double& n : draws.noise_plus) n = rng.normal();
        }
    }
    return draws;
}

/// One reconstruction term: builds f from the code and noise, decodes d,
/// applies the KL gradient and the straight-through identity, then
/// backpropagates into the encoder of the document that produced the code.
void reconstruction_term(const SparseVector& decoded, const SparseVector& encoded,
                         const EncodeCache& enc, const HashCode& z,
                         std::span<const double> noise, const ModelParams& params,
                         double beta, double variance, double grad_scale, Gradients& grads,
                         Workspace& ws, double& recon_out, double& kl_out) {
    const uint32_t m = params.shape.bits;
    if (z.bits != m) throw DataError("sampled code length does not match model bits");

    ws.f.resize(m);
    if (variance > 0.0) {
        if (noise.size() != m) throw DataError("frozen noise length does not match code length");
        const double sd = std::sqrt(variance);
        for (uint32_t j = 0; j < m; ++j)
            ws.f[j] = (z.bit(j) ? 1.0 : 0.0) + sd * noise[j];
    } else {
        for (uint32_t j = 0; j < m; ++j) ws.f[j] = z.bit(j) ? 1.0 : 0.0;
    }

    decode_forward(ws.f, decoded, params, ws.dec);
    recon_out = -ws.dec.loglik;
    kl_out = kl_sum(enc.q);

    ws.grad_f.assign(m, 0.0);
    decode_backward(ws.f, decoded, params, ws.dec, -grad_scale, grads, ws.grad_f);

    // Straight-through: d f / d q = identity, so the decoder gradient passes
    // through unchanged; the KL gradient is beta * ln(q/(1-q)).
    ws.grad_q.resize(m);
    for (uint32_t j = 0; j < m; ++j) {
        const double q = enc.q[j];
        ws.grad_q[j] = ws.grad_f[j] + grad_scale * beta * std::log(q / (1.0 - q));
    }
    encode_backward(encoded, params, enc, ws.grad_q, grads);
}

}  // namespace

PairLoss pairrec_loss_grad(const SparseVector& d, const SparseVector* d_plus,
                           const ModelParams& params, double beta, double variance,
                           const PairDraws& draws, double grad_scale, Gradients& grads,
                           Workspace& ws) {
    if (beta < 0.0) throw std::invalid_argument("beta must be non-negative");
    if (variance < 0.0) throw std::invalid_argument("noise variance must be non-negative");

    encode_forward(d, params, ws.enc_d);
    PairLoss out;
    reconstruction_term(d, d, ws.enc_d, draws.z, draws.noise, params, beta, variance,
                        grad_scale, grads, ws, out.recon, out.kl);
    if (d_plus != nullptr) {
        out.has_pair = true;
        encode_forward(*d_plus, params, ws.enc_p);
        reconstruction_term(d, *d_plus, ws.enc_p, draws.z_plus, draws.noise_plus, params,
                            beta, variance, grad_scale, grads, ws, out.recon_plus,
                            out.kl_plus);
    }
    out.loss = out.recon + beta * out.kl + out.recon_plus + beta * out.kl_plus;
    return out;
}

PairLoss pairrec_loss_grad(const SparseVector& d, const SparseVector* d_plus,
                           const ModelParams& params, double beta, double variance, Rng& rng,
                           PairDraws* draws_out, double grad_scale, Gradients& grads,
                           Workspace& ws) {
    if (beta < 0.0) throw std::invalid_argument("beta must be non-negative");
    if (variance < 0.0) throw std::invalid_argument("noise variance must be non-negative");

    encode_forward(d, params, ws.enc_d);
    if (d_plus != nullptr) encode_forward(*d_plus, params, ws.enc_p);
    const PairDraws draws = make_draws(ws.enc_d, d_plus != nullptr ? &ws.enc_p : nullptr,
                                       variance, params.shape.bits, rng);

    PairLoss out;
    reconstruction_term(d, d, ws.enc_d, draws.z, draws.noise, params, beta, variance,
                        grad_scale, grads, ws, out.recon, out.kl);
    if (d_plus != nullptr) {
        out.has_pair = true;
        reconstruction_term(d, *d_plus, ws.enc_p, draws.z_plus, draws.noise_plus, params,
                            beta, variance, grad_scale, grads, ws, out.recon_plus,
                            out.kl_plus);
    }
    out.loss = out.recon + beta * out.kl + out.recon_plus + beta * out.kl_plus;
    if (draws_out != nullptr) *draws_out = draws;
    return out;
}

double pair_eval_loss(const SparseVector& d, const SparseVector* d_plus,
                      const ModelParams& params, double beta, Workspace& ws) {
    const uint32_t m = params.shape.bits;
    encode_forward(d, params, ws.enc_d);
    ws.f.resize(m);
    for (uint32_t j = 0; j < m; ++j) ws.f[j] = ws.enc_d.q[j] > 0.5 ? 1.0 : 0.0;
    decode_forward(ws.f, d, params, ws.dec);
    double total = -ws.dec.loglik + beta * kl_sum(ws.enc_d.q);
    if (d_plus == nullptr) return total;

    encode_forward(*d_plus, params, ws.enc_p);
    for (uint32_t j = 0; j < m; ++j) ws.f[j] = ws.enc_p.q[j] > 0.5 ? 1.0 : 0.0;
    decode_forward(ws.f, d, params, ws.dec);
    total += -ws.dec.loglik + beta * kl_sum(ws.enc_p.q);
    return total / 2.0;
}

void save_checkpoint(const std::string& path, const ModelParams& params,
                     const CheckpointMeta& meta) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open " + path + " for writing");

    io::write_magic(out, "PRM1");
    io::write_u32(out, params.shape.vocab);
    io::write_u32(out, params.shape.hidden);
    io::write_u32(out, params.shape.bits);
    io::write_u32(out, meta.top_k);
    io::write_f64(out, meta.beta);
    io::write_f64(out, meta.variance);
    io::write_u64(out, meta.step_count);
    io::write_u64(out, meta.rng_seed);
    for (const auto tensor : params.tensors())
        for (const double w : tensor) io::write_f32(out, static_cast<float>(w));
    if (!out) throw DataError("write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);

    io::expect_magic(in, "PRM1", "checkpoint");
    ModelShape shape;
    shape.vocab = io::read_u32(in);
    shape.hidden = io::read_u32(in);
    shape.bits = io::read_u32(in);

    Checkpoint ckpt;
    ckpt.meta.top_k = io::read_u32(in);
    ckpt.meta.beta = io::read_f64(in);
    ckpt.meta.variance = io::read_f64(in);
    ckpt.meta.step_count = io::read_u64(in);
    ckpt.meta.rng_seed = io::read_u64(in);
    ckpt.params = ModelParams::zeros(shape);
    for (auto tensor : ckpt.params.tensors())
        for (double& w : tensor) w = static_cast<double>(io::read_f32(in));
    return ckpt;
}

}  // namespace pairrec
