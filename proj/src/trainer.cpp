#include "pairrec/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "pairrec/error.hpp"
#include "pairrec/rng.hpp"

namespace pairrec {

namespace {

std::string format_g(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

std::string format_fixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
    return buf;
}

void write_config(const std::string& path, const TrainConfig& cfg) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open " + path + " for writing");
    out << "bits=" << cfg.bits << '\n'
        << "hidden=" << cfg.hidden << '\n'
        << "top_k=" << cfg.top_k << '\n'
        << "beta=" << format_g(cfg.beta) << '\n'
        << "lr=" << format_g(cfg.lr) << '\n'
        << "batch_size=" << cfg.batch_size << '\n'
        << "patience=" << cfg.patience << '\n'
        << "variance_init=" << format_g(cfg.variance_init) << '\n'
        << "variance_decrement=" << format_g(cfg.variance_decrement) << '\n'
        << "seed=" << cfg.seed << '\n'
        << "max_epochs=" << cfg.max_epochs << '\n';
    if (!out) throw DataError("write failed for " + path);
}

/// Neighbor id lists cut to cfg.top_k, for train and validation queries.
std::unordered_map<uint32_t, std::vector<uint32_t>> positive_lists(
    const Corpus& corpus, const NeighborFile& neighbors, uint32_t top_k) {
    if (neighbors.top_k < top_k)
        throw DataError("neighbor file holds top-" + std::to_string(neighbors.top_k) +
                        " lists but the run needs top-" + std::to_string(top_k));
    const auto index = neighbor_index(neighbors);
    std::unordered_map<uint32_t, std::vector<uint32_t>> lists;
    lists.reserve(corpus.split.train.size() + corpus.split.validation.size());
    for (const std::vector<uint32_t>* ids : {&corpus.split.train, &corpus.split.validation}) {
        for (const uint32_t id : *ids) {
            const auto it = index.find(id);
            if (it == index.end())
                throw DataError("neighbor file has no record for document " + std::to_string(id));
            const NeighborSet& nset = *it->second;
            if (nset.empty())
                throw DataError("document " + std::to_string(id) + " has an empty neighbor set");
            const size_t take = std::min<size_t>(top_k, nset.size());
            lists.emplace(id, std::vector<uint32_t>(nset.neighbor_ids.begin(),
                                                    nset.neighbor_ids.begin() + take));
        }
    }
    return lists;
}

void zero(Gradients& grads) {
    for (auto tensor : grads.tensors()) std::fill(tensor.begin(), tensor.end(), 0.0);
}

}  // namespace

void TrainConfig::validate() const {
    if (bits != 8 && bits != 16 && bits != 32 && bits != 64 && bits != 128)
        throw std::invalid_argument("bits must be one of {8, 16, 32, 64, 128}");
    if (hidden == 0) throw std::invalid_argument("hidden must be positive");
    if (beta < 0.0) throw std::invalid_argument("beta must be non-negative");
    if (lr <= 0.0) throw std::invalid_argument("learning rate must be positive");
    if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
    if (patience == 0) throw std::invalid_argument("patience must be positive");
    if (variance_init < 0.0) throw std::invalid_argument("variance_init must be non-negative");
    if (variance_decrement < 0.0)
        throw std::invalid_argument("variance_decrement must be non-negative");
    if (max_epochs == 0) throw std::invalid_argument("max_epochs must be positive");
}

double variance_at(uint64_t step, const TrainConfig& cfg) {
    const double v = cfg.variance_init - cfg.variance_decrement * static_cast<double>(step);
    // The schedule crosses zero exactly at variance_init / variance_decrement
    // steps; the product above can leave ~1e-16 of rounding dust there, so the
    // clamp eats everything below a relative tolerance.
    return v > cfg.variance_init * 1e-12 ? v : 0.0;
}

AdamState AdamState::init(ModelShape shape) {
    AdamState state;
    state.first = ModelParams::zeros(shape);
    state.second = ModelParams::zeros(shape);
    return state;
}

void adam_step(ModelParams& params, const Gradients& grads, AdamState& state, double lr) {
    if (!(params.shape == grads.shape))
        throw DataError("gradient shape does not match parameter shape");
    state.step += 1;
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));

    auto pt = params.tensors();
    auto gt = grads.tensors();
    auto ft = state.first.tensors();
    auto st = state.second.tensors();
    for (size_t t = 0; t < pt.size(); ++t) {
        double* p = pt[t].data();
        const double* g = gt[t].data();
        double* m = ft[t].data();
        double* v = st[t].data();
        const size_t n = pt[t].size();
        for (size_t i = 0; i < n; ++i) {
            if (!std::isfinite(g[i]))
                throw DataError(std::string("non-finite gradient in ") +
                                ModelParams::tensor_names()[t]);
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            p[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
        }
    }
}

TrainResult train(const Corpus& corpus, const NeighborFile* neighbors, const TrainConfig& cfg,
                  const std::string& run_dir) {
    cfg.validate();
    if (corpus.split.train.empty()) throw DataError("training split is empty");
    if (cfg.top_k > 0 && neighbors == nullptr)
        throw DataError("top_k > 0 requires a neighbor file");

    const ModelShape shape{corpus.vocab.size(), cfg.hidden, cfg.bits};
    std::unordered_map<uint32_t, std::vector<uint32_t>> positives;
    if (cfg.top_k > 0) positives = positive_lists(corpus, *neighbors, cfg.top_k);

    std::filesystem::create_directories(run_dir);
    write_config(run_dir + "/config.txt", cfg);

    std::ofstream log(run_dir + "/train.log");
    if (!log) throw DataError("cannot open " + run_dir + "/train.log for writing");
    log << "# epoch\ttrain_loss\tval_loss\tvariance\telapsed_s\n";
    if (cfg.top_k == 0) log << "# ablation: no pairwise term\n";

    Rng rng(cfg.seed);
    ModelParams params = ModelParams::glorot(shape, rng);
    AdamState adam = AdamState::init(shape);
    Workspace ws;
    Gradients grads = ModelParams::zeros(shape);

    // The validation partner of each document is drawn once so the early
    // stopping signal is not re-randomized every epoch.
    std::vector<const SparseVector*> val_partners(corpus.split.validation.size(), nullptr);
    if (cfg.top_k > 0) {
        for (size_t i = 0; i < corpus.split.validation.size(); ++i) {
            const auto& list = positives.at(corpus.split.validation[i]);
            val_partners[i] = &corpus.at(list[rng.uniform_int(list.size())]).vec;
        }
    }

    TrainResult result;
    result.checkpoint_path = run_dir + "/checkpoint.prm";
    result.log_path = run_dir + "/train.log";

    std::vector<uint32_t> order = corpus.split.train;
    const auto started = std::chrono::steady_clock::now();

    for (uint32_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        rng.shuffle(order);
        double train_loss_sum = 0.0;
        for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const size_t batch = std::min<size_t>(cfg.batch_size, order.size() - start);
            const double variance = variance_at(adam.step, cfg);
            const double grad_scale = 1.0 / static_cast<double>(batch);
            zero(grads);
            for (size_t i = start; i < start + batch; ++i) {
                const Document& doc = corpus.at(order[i]);
                const SparseVector* partner = nullptr;
                if (cfg.top_k > 0) {
                    const auto& list = positives.at(doc.id);
                    partner = &corpus.at(list[rng.uniform_int(list.size())]).vec;
                }
                const PairLoss loss =
                    pairrec_loss_grad(doc.vec, partner, params, cfg.beta, variance, rng,
                                      nullptr, grad_scale, grads, ws);
                train_loss_sum += loss.loss / loss.reconstructions();
            }
            adam_step(params, grads, adam, cfg.lr);
        }
        result.steps = adam.step;

        const double train_loss = train_loss_sum / static_cast<double>(order.size());
        double val_loss_sum = 0.0;
        for (size_t i = 0; i < corpus.split.validation.size(); ++i) {
            const Document& doc = corpus.at(corpus.split.validation[i]);
            val_loss_sum += pair_eval_loss(doc.vec, val_partners[i], params, cfg.beta, ws);
        }
        const double val_loss = corpus.split.validation.empty()
                                    ? train_loss
                                    : val_loss_sum / static_cast<double>(
                                                         corpus.split.validation.size());

        const double elapsed =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        log << epoch << '\t' << format_g(train_loss) << '\t' << format_g(val_loss) << '\t'
            << format_g(variance_at(adam.step, cfg)) << '\t' << format_fixed(elapsed, 3)
            << '\n';
        log.flush();

        result.epochs_run = epoch;
        if (val_loss < result.best_val_loss) {
            result.best_val_loss = val_loss;
            result.best_epoch = epoch;
            CheckpointMeta meta;
            meta.top_k = cfg.top_k;
            meta.beta = cfg.beta;
            meta.variance = variance_at(adam.step, cfg);
            meta.step_count = adam.step;
            meta.rng_seed = cfg.seed;
            save_checkpoint(result.checkpoint_path, params, meta);
        } else if (epoch - result.best_epoch >= cfg.patience) {
            break;
        }
    }
    if (!log) throw DataError("write failed for " + result.log_path);
    return result;
}

bool sweep_prefers(double val_a, const TrainConfig& a, double val_b, const TrainConfig& b) {
    if (val_a != val_b) return val_a < val_b;
    if (a.top_k != b.top_k) return a.top_k < b.top_k;
    if (a.hidden != b.hidden) return a.hidden < b.hidden;
    return a.beta < b.beta;
}

SweepResult sweep(const Corpus& corpus, const NeighborFile* neighbors,
                  const std::vector<TrainConfig>& grid, const std::string& out_dir) {
    if (grid.empty()) throw std::invalid_argument("sweep grid is empty");
    std::filesystem::create_directories(out_dir);

    SweepResult result;
    for (const TrainConfig& cfg : grid) {
        std::ostringstream name;
        name << "bits" << cfg.bits << "_h" << cfg.hidden << "_k" << cfg.top_k << "_beta"
             << format_g(cfg.beta);
        SweepEntry entry;
        entry.cfg = cfg;
        entry.run_dir = out_dir + "/" + name.str();
        entry.result = train(corpus, neighbors, cfg, entry.run_dir);
        result.entries.push_back(std::move(entry));
    }

    for (size_t i = 1; i < result.entries.size(); ++i) {
        const SweepEntry& cand = result.entries[i];
        const SweepEntry& best = result.entries[result.best];
        if (sweep_prefers(cand.result.best_val_loss, cand.cfg, best.result.best_val_loss,
                          best.cfg))
            result.best = i;
    }

    std::ofstream out(out_dir + "/sweep.tsv");
    if (!out) throw DataError("cannot open " + out_dir + "/sweep.tsv for writing");
    out << "# bits\thidden\ttop_k\tbeta\tval_loss\trun_dir\n";
    for (const SweepEntry& entry : result.entries) {
        out << entry.cfg.bits << '\t' << entry.cfg.hidden << '\t' << entry.cfg.top_k << '\t'
            << format_g(entry.cfg.beta) << '\t' << format_g(entry.result.best_val_loss) << '\t'
            << entry.run_dir << '\n';
    }
    if (!out) throw DataError("write failed for " + out_dir + "/sweep.tsv");
    return result;
}

}  // namespace pairrec
