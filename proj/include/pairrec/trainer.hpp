#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "pairrec/corpus.hpp"
#include "pairrec/model.hpp"
#include "pairrec/neighbors.hpp"

namespace pairrec {

struct TrainConfig {
    uint32_t bits = 64;
    uint32_t hidden = 1000;
    uint32_t top_k = 25;  // 0 trains without the pairwise term
    double beta = 0.01;
    double lr = 0.0005;
    uint32_t batch_size = 64;
    uint32_t patience = 5;           // epochs without validation improvement
    double variance_init = 1.0;      // decoder noise variance at step 0
    double variance_decrement = 1e-6;  // per minibatch step
    uint64_t seed = 1;
    uint32_t max_epochs = 500;

    void validate() const;  // throws std::invalid_argument
};

/// max(0, variance_init - variance_decrement * step); hits 0 at step 10^6
/// with the defaults and stays there.
double variance_at(uint64_t step, const TrainConfig& cfg);

struct AdamState {
    Gradients first;   // running mean of gradients
    Gradients second;  // running mean of squared gradients
    uint64_t step = 0;

    static AdamState init(ModelShape shape);
};

/// Standard Adam update (beta1 0.9, beta2 0.999, eps 1e-8, bias-corrected).
/// Throws DataError on a non-finite gradient; the run must abort.
void adam_step(ModelParams& params, const Gradients& grads, AdamState& state, double lr);

struct TrainResult {
    double best_val_loss = std::numeric_limits<double>::infinity();
    uint32_t best_epoch = 0;
    uint32_t epochs_run = 0;
    uint64_t steps = 0;  // optimizer steps taken
    std::string checkpoint_path;
    std::string log_path;
};

/// Minibatch training with per-epoch pair resampling and early stopping.
/// The checkpoint on disk always holds the parameters of the best
/// validation epoch. Writes config.txt, train.log, and checkpoint.prm
/// into run_dir. neighbors may be null only when cfg.top_k == 0; it must
/// cover every train and validation document and hold at least cfg.top_k
/// neighbors per list. Everything is driven by one generator seeded with
/// cfg.seed, so a (config, seed) pair fixes the checkpoint bytes.
TrainResult train(const Corpus& corpus, const NeighborFile* neighbors, const TrainConfig& cfg,
                  const std::string& run_dir);

struct SweepEntry {
    TrainConfig cfg;
    TrainResult result;
    std::string run_dir;
};

struct SweepResult {
    std::vector<SweepEntry> entries;
    size_t best = 0;
};

/// True when (val_a, a) should be preferred over (val_b, b): lower
/// validation loss, ties by smaller top_k, then hidden, then beta.
bool sweep_prefers(double val_a, const TrainConfig& a, double val_b, const TrainConfig& b);

/// Trains every configuration in its own subdirectory of out_dir and
/// selects the best by validation loss. Writes out_dir/sweep.tsv.
SweepResult sweep(const Corpus& corpus, const NeighborFile* neighbors,
                  const std::vector<TrainConfig>& grid, const std::string& out_dir);

}  // namespace pairrec
