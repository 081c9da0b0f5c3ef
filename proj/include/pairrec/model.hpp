#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pairrec/corpus.hpp"

namespace pairrec {

class Rng;

/// Per-bit sampling probabilities are clamped to (kProbEpsilon, 1 - kProbEpsilon)
/// so the KL term and its gradient stay finite.
constexpr double kProbEpsilon = 1e-7;

struct ModelShape {
    uint32_t vocab = 0;   // V
    uint32_t hidden = 0;  // H
    uint32_t bits = 0;    // m, one of {8, 16, 32, 64, 128}

    bool operator==(const ModelShape&) const = default;
};

/// All learnable tensors. Weight matrices are stored with one row per input
/// unit, so both the forward accumulation and the backward read walk
/// contiguous memory.
struct ModelParams {
    ModelShape shape;
    std::vector<double> enc_w1;           // V x H
    std::vector<double> enc_b1;           // H
    std::vector<double> enc_w2;           // H x H
    std::vector<double> enc_b2;           // H
    std::vector<double> enc_w3;           // H x m
    std::vector<double> enc_b3;           // m
    std::vector<double> word_importance;  // V, shared by encoder input and decoder logits
    std::vector<double> word_embedding;   // V x m, row w = embedding of word w
    std::vector<double> word_bias;        // V, decoder bias

    static ModelParams zeros(ModelShape shape);
    /// Uniform +-sqrt(6/(fan_in+fan_out)) for each weight matrix; biases 0,
    /// importance 1 (starts as an identity reweighting).
    static ModelParams glorot(ModelShape shape, Rng& rng);

    /// Tensors in declaration order, for optimizers, serialization, and
    /// gradient checks.
    std::array<std::span<double>, 9> tensors();
    std::array<std::span<const double>, 9> tensors() const;
    static const std::array<const char*, 9>& tensor_names();
};

/// Gradients mirror the parameter layout exactly.
using Gradients = ModelParams;

struct BitProbabilities {
    std::vector<double> q;  // length m, each inside (kProbEpsilon, 1 - kProbEpsilon)
};

/// m bits packed little-endian: bit j lives in words[j / 64] at position j % 64.
/// Bits at or beyond m stay zero.
struct HashCode {
    uint32_t bits = 0;
    std::array<uint64_t, 2> words{};

    bool bit(uint32_t j) const { return (words[j >> 6] >> (j & 63)) & 1u; }
    void set(uint32_t j) { words[j >> 6] |= uint64_t{1} << (j & 63); }
    bool operator==(const HashCode&) const = default;
};

/// A hash code with zero-mean Gaussian noise added, fed to the decoder
/// during training only.
struct NoisyCode {
    std::vector<double> f;
};

/// Encoder activations kept for the backward pass.
struct EncodeCache {
    std::vector<double> x;   // per-entry input: tfidf weight * word importance
    std::vector<double> h1;  // post-ReLU layer 1
    std::vector<double> h2;  // post-ReLU layer 2
    std::vector<double> q;   // clamped sigmoid output
};

/// Decoder state kept for the backward pass.
struct DecodeCache {
    std::vector<double> dots;     // V: code . embedding row
    std::vector<double> softmax;  // V: softmax over word logits
    double lse = 0.0;             // logsumexp of all logits
    double loglik = 0.0;
};

/// q = sigmoid(affine3(relu(affine2(relu(affine1(d * e_imp)))))), clamped.
void encode_forward(const SparseVector& d, const ModelParams& params, EncodeCache& cache);

/// Accumulates parameter gradients given the objective gradient wrt q.
/// Must be called with the cache of the matching forward pass.
void encode_backward(const SparseVector& d, const ModelParams& params, const EncodeCache& cache,
                     std::span<const double> grad_q, Gradients& grads);

BitProbabilities encode_probs(const SparseVector& d, const ModelParams& params);

/// Independent Bernoulli draw per bit; training path only.
HashCode sample_code(const BitProbabilities& probs, Rng& rng);

/// bit_j = 1 iff q_j > 0.5 (strictly); the deterministic evaluation path.
HashCode greedy_code(const BitProbabilities& probs);

/// f_j = z_j + Normal(0, variance). Zero variance returns the code exactly
/// and consumes no randomness. Negative variance throws.
NoisyCode infuse_noise(const HashCode& z, double variance, Rng& rng);

/// log p(doc|f): sum over the document's unique words of their log-softmax
/// scores, where logit(w) = e_imp[w] * (f . embedding[w]) + bias[w].
/// TF-IDF weights do not enter; only word membership does.
double decode_forward(std::span<const double> f, const SparseVector& doc,
                      const ModelParams& params, DecodeCache& cache);

/// Accumulates gradients of coeff * log p(doc|f) into grads and grad_f.
void decode_backward(std::span<const double> f, const SparseVector& doc,
                     const ModelParams& params, const DecodeCache& cache, double coeff,
                     Gradients& grads, std::span<double> grad_f);

double decode_log_likelihood(const NoisyCode& code, const SparseVector& doc,
                             const ModelParams& params);

/// KL(q || uniform) = sum_j q_j ln(2 q_j) + (1-q_j) ln(2 (1-q_j)); >= 0,
/// zero exactly at q = 0.5.
double kl_bernoulli(const BitProbabilities& probs);

/// The sampled randomness of one loss evaluation, exposed so tests can
/// freeze it and finite-difference the remaining deterministic function.
struct PairDraws {
    HashCode z;
    HashCode z_plus;             // ignored when there is no pair
    std::vector<double> noise;   // standard normals, scaled by sqrt(variance) at use
    std::vector<double> noise_plus;
};

struct PairLoss {
    double loss = 0.0;        // recon + beta*kl [+ recon_plus + beta*kl_plus]
    double recon = 0.0;       // -log p(d|z)
    double kl = 0.0;
    double recon_plus = 0.0;  // -log p(d|z_plus), decoding the SAME d
    double kl_plus = 0.0;
    bool has_pair = false;

    uint32_t reconstructions() const { return has_pair ? 2u : 1u; }
};

/// Scratch buffers reused across loss evaluations.
struct Workspace {
    EncodeCache enc_d;
    EncodeCache enc_p;
    DecodeCache dec;
    std::vector<double> f;
    std::vector<double> grad_f;
    std::vector<double> grad_q;
};

/// Pairwise reconstruction loss with full analytic gradients. Both codes
/// decode document d; d_plus only supplies the second code. Backpropagation
/// through the Bernoulli samples uses the straight-through estimator (the
/// code is treated as identity in q). Pass d_plus = nullptr for the no-pair
/// ablation: only the first reconstruction and KL terms remain. Gradients
/// are scaled by grad_scale and accumulated into grads.
PairLoss pairrec_loss_grad(const SparseVector& d, const SparseVector* d_plus,
                           const ModelParams& params, double beta, double variance,
                           const PairDraws& draws, double grad_scale, Gradients& grads,
                           Workspace& ws);

/// Same, drawing codes and noise from rng. The draws used are reported
/// through draws_out when non-null.
PairLoss pairrec_loss_grad(const SparseVector& d, const SparseVector* d_plus,
                           const ModelParams& params, double beta, double variance, Rng& rng,
                           PairDraws* draws_out, double grad_scale, Gradients& grads,
                           Workspace& ws);

/// Deterministic objective for validation: greedy codes, no noise, averaged
/// per reconstruction term so runs with and without pairs are comparable.
double pair_eval_loss(const SparseVector& d, const SparseVector* d_plus,
                      const ModelParams& params, double beta, Workspace& ws);

struct CheckpointMeta {
    uint32_t top_k = 0;
    double beta = 0.0;
    double variance = 0.0;
    uint64_t step_count = 0;
    uint64_t rng_seed = 0;
};

struct Checkpoint {
    ModelParams params;
    CheckpointMeta meta;
};

/// Checkpoint file, magic "PRM1": header (V, H, m, top_k, beta, variance,
/// step count, rng seed), then tensors in declaration order as little-endian
/// 32-bit floats.
void save_checkpoint(const std::string& path, const ModelParams& params,
                     const CheckpointMeta& meta);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace pairrec
