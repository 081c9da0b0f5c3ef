// Command line front end: prepare -> neighbors -> train -> encode -> evaluate,
// plus grid sweeps, the k ablation table, and manifest replay. Exit codes:
// 0 success, 1 usage error, 2 data error.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "pairrec/corpus.hpp"
#include "pairrec/error.hpp"
#include "pairrec/model.hpp"
#include "pairrec/neighbors.hpp"
#include "pairrec/retrieval.hpp"
#include "pairrec/trainer.hpp"

namespace {

using nlohmann::json;
using namespace pairrec;

constexpr char kVersion[] = "0.1.0";

int run(const std::vector<std::string>& args);

/// Every run writes a manifest before any computation starts; replaying the
/// manifest's argv reproduces the outputs byte for byte.
void write_manifest(const std::string& path, const std::string& subcommand,
                    const std::vector<std::string>& argv, const json& config) {
    json manifest;
    manifest["tool"] = "pairrec";
    manifest["version"] = kVersion;
    manifest["subcommand"] = subcommand;
    manifest["argv"] = argv;
    manifest["config"] = config;
    std::ofstream out(path);
    if (!out) throw DataError("cannot open " + path + " for writing");
    out << manifest.dump(2) << '\n';
    if (!out) throw DataError("write failed for " + path);
}

std::string dataset_name(const std::string& flag, const std::string& corpus_path) {
    if (!flag.empty()) return flag;
    return std::filesystem::path(corpus_path).stem().string();
}

double checkpoint_prec100(const Checkpoint& ckpt, const Corpus& corpus) {
    const CodeIndex index = encode_corpus(ckpt.params, corpus, corpus.split.train);
    const CodeIndex queries = encode_corpus(ckpt.params, corpus, corpus.split.test);
    return evaluate_prec_at_100(index, queries);
}

struct TrainOptions {
    std::string corpus_path;
    std::string neighbors_path;
    std::string run_dir;
    TrainConfig cfg;
};

void add_train_flags(CLI::App* cmd, TrainOptions& opt) {
    cmd->add_option("--corpus", opt.corpus_path, "prepared corpus file")->required();
    cmd->add_option("--neighbors", opt.neighbors_path,
                    "neighbor file (required when top-k > 0)");
    cmd->add_option("--run-dir", opt.run_dir, "output directory")->required();
    cmd->add_option("--bits", opt.cfg.bits, "code length")
        ->check(CLI::IsMember({8, 16, 32, 64, 128}))
        ->capture_default_str();
    cmd->add_option("--hidden", opt.cfg.hidden, "encoder layer width")
        ->check(CLI::IsMember({500, 1000}))
        ->capture_default_str();
    cmd->add_option("--seed", opt.cfg.seed, "run seed")->capture_default_str();
    cmd->add_option("--batch-size", opt.cfg.batch_size, "minibatch size")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    cmd->add_option("--patience", opt.cfg.patience, "early stopping patience in epochs")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    cmd->add_option("--max-epochs", opt.cfg.max_epochs, "epoch cap")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
}

json train_config_json(const TrainOptions& opt) {
    return json{{"corpus", opt.corpus_path},
                {"neighbors", opt.neighbors_path},
                {"run_dir", opt.run_dir},
                {"bits", opt.cfg.bits},
                {"hidden", opt.cfg.hidden},
                {"top_k", opt.cfg.top_k},
                {"beta", opt.cfg.beta},
                {"lr", opt.cfg.lr},
                {"batch_size", opt.cfg.batch_size},
                {"patience", opt.cfg.patience},
                {"variance_init", opt.cfg.variance_init},
                {"variance_decrement", opt.cfg.variance_decrement},
                {"seed", opt.cfg.seed},
                {"max_epochs", opt.cfg.max_epochs}};
}

NeighborFile load_neighbors_if_needed(const TrainOptions& opt, bool needed,
                                      bool* loaded) {
    *loaded = false;
    if (!needed || opt.neighbors_path.empty()) return {};
    *loaded = true;
    return load_neighbors(opt.neighbors_path);
}

int cmd_prepare(const std::string& input, const std::string& output, uint64_t seed,
                uint32_t top_labels, const std::vector<std::string>& argv) {
    write_manifest(output + ".manifest.json", "prepare", argv,
                   json{{"input", input},
                        {"output", output},
                        {"seed", seed},
                        {"top_labels", top_labels}});

    RawCorpus raw = parse_documents_tsv_file(input);
    const size_t parsed = raw.docs.size();
    filter_top_labels(raw, top_labels);
    const Corpus corpus = build_corpus(raw, seed);
    save_corpus(output, corpus);

    std::cout << "parsed " << parsed << " documents (" << raw.docs.size()
              << " after label filtering)\n"
              << "vocabulary: " << corpus.vocab.size() << " words over "
              << corpus.vocab.total_docs << " documents\n"
              << "dropped " << corpus.dropped_empty << " documents with no in-vocabulary words\n"
              << "split: " << corpus.split.train.size() << " train / "
              << corpus.split.validation.size() << " validation / "
              << corpus.split.test.size() << " test\n"
              << "wrote " << output << '\n';
    return 0;
}

int cmd_neighbors(const std::string& corpus_path, const std::string& output, uint32_t top_k,
                  const std::vector<std::string>& argv) {
    write_manifest(output + ".manifest.json", "neighbors", argv,
                   json{{"corpus", corpus_path}, {"output", output}, {"top_k", top_k}});

    const Corpus corpus = load_corpus(corpus_path);
    const NeighborFile file = compute_neighbors(corpus, top_k);
    save_neighbors(output, file);
    std::cout << "wrote top-" << top_k << " neighbor lists for " << file.records.size()
              << " queries to " << output << '\n';
    return 0;
}

int cmd_train(const TrainOptions& opt, const std::vector<std::string>& argv) {
    std::filesystem::create_directories(opt.run_dir);
    write_manifest(opt.run_dir + "/manifest.json", "train", argv, train_config_json(opt));

    const Corpus corpus = load_corpus(opt.corpus_path);
    bool have_neighbors = false;
    const NeighborFile neighbors =
        load_neighbors_if_needed(opt, opt.cfg.top_k > 0, &have_neighbors);
    const TrainResult result =
        train(corpus, have_neighbors ? &neighbors : nullptr, opt.cfg, opt.run_dir);

    std::cout << "trained " << result.epochs_run << " epochs (" << result.steps
              << " steps); best validation loss " << result.best_val_loss << " at epoch "
              << result.best_epoch << '\n'
              << "checkpoint: " << result.checkpoint_path << '\n';
    return 0;
}

int cmd_encode(const std::string& checkpoint_path, const std::string& corpus_path,
               const std::string& split, const std::string& output,
               const std::vector<std::string>& argv) {
    write_manifest(output + ".manifest.json", "encode", argv,
                   json{{"checkpoint", checkpoint_path},
                        {"corpus", corpus_path},
                        {"split", split},
                        {"output", output}});

    const Checkpoint ckpt = load_checkpoint(checkpoint_path);
    const Corpus corpus = load_corpus(corpus_path);
    std::vector<uint32_t> ids;
    if (split == "train") {
        ids = corpus.split.train;
    } else if (split == "validation") {
        ids = corpus.split.validation;
    } else if (split == "test") {
        ids = corpus.split.test;
    } else {
        for (const Document& doc : corpus.docs) ids.push_back(doc.id);
    }
    const CodeIndex index = encode_corpus(ckpt.params, corpus, ids);
    save_codes(output, index);
    std::cout << "encoded " << index.size() << " documents (" << index.bits << " bits) to "
              << output << '\n';
    return 0;
}

int cmd_evaluate(const std::string& checkpoint_path, const std::string& corpus_path,
                 const std::string& output, const std::string& dataset,
                 const std::vector<std::string>& argv) {
    write_manifest(output + ".manifest.json", "evaluate", argv,
                   json{{"checkpoint", checkpoint_path},
                        {"corpus", corpus_path},
                        {"output", output},
                        {"dataset", dataset}});

    const Checkpoint ckpt = load_checkpoint(checkpoint_path);
    const Corpus corpus = load_corpus(corpus_path);
    const double prec = checkpoint_prec100(ckpt, corpus);

    MetricsRow row;
    row.dataset = dataset_name(dataset, corpus_path);
    row.bits = ckpt.params.shape.bits;
    row.top_k = ckpt.meta.top_k;
    row.beta = ckpt.meta.beta;
    row.prec = prec;
    write_metrics(output, {row});
    std::cout << "prec@100 = " << prec << " (" << corpus.split.test.size()
              << " test queries against " << corpus.split.train.size()
              << " train documents)\n"
              << "wrote " << output << '\n';
    return 0;
}

int cmd_sweep(const TrainOptions& base, std::vector<uint32_t> hidden_grid,
              std::vector<uint32_t> k_grid, std::vector<double> beta_grid,
              const std::vector<std::string>& argv) {
    if (hidden_grid.empty()) hidden_grid = {base.cfg.hidden};
    if (k_grid.empty()) k_grid = {base.cfg.top_k};
    if (beta_grid.empty()) beta_grid = {base.cfg.beta};

    std::filesystem::create_directories(base.run_dir);
    json config = train_config_json(base);
    config["hidden_grid"] = hidden_grid;
    config["k_grid"] = k_grid;
    config["beta_grid"] = beta_grid;
    write_manifest(base.run_dir + "/manifest.json", "sweep", argv, config);

    std::vector<TrainConfig> grid;
    for (const uint32_t hidden : hidden_grid)
        for (const uint32_t k : k_grid)
            for (const double beta : beta_grid) {
                TrainConfig cfg = base.cfg;
                cfg.hidden = hidden;
                cfg.top_k = k;
                cfg.beta = beta;
                grid.push_back(cfg);
            }

    const bool needs_neighbors =
        std::any_of(k_grid.begin(), k_grid.end(), [](uint32_t k) { return k > 0; });
    const Corpus corpus = load_corpus(base.corpus_path);
    bool have_neighbors = false;
    const NeighborFile neighbors =
        load_neighbors_if_needed(base, needs_neighbors, &have_neighbors);

    const SweepResult result =
        sweep(corpus, have_neighbors ? &neighbors : nullptr, grid, base.run_dir);
    const SweepEntry& best = result.entries[result.best];
    std::cout << "swept " << result.entries.size() << " configurations\n"
              << "best: hidden=" << best.cfg.hidden << " top_k=" << best.cfg.top_k
              << " beta=" << best.cfg.beta << " val_loss=" << best.result.best_val_loss
              << '\n'
              << "best checkpoint: " << best.result.checkpoint_path << '\n'
              << "table: " << base.run_dir << "/sweep.tsv\n";
    return 0;
}

int cmd_ablation(const TrainOptions& base, const std::vector<uint32_t>& k_grid,
                 const std::vector<std::string>& argv) {
    std::filesystem::create_directories(base.run_dir);
    json config = train_config_json(base);
    config["k_grid"] = k_grid;
    write_manifest(base.run_dir + "/manifest.json", "ablation", argv, config);

    const bool needs_neighbors =
        std::any_of(k_grid.begin(), k_grid.end(), [](uint32_t k) { return k > 0; });
    const Corpus corpus = load_corpus(base.corpus_path);
    bool have_neighbors = false;
    const NeighborFile neighbors =
        load_neighbors_if_needed(base, needs_neighbors, &have_neighbors);

    const std::string table_path = base.run_dir + "/ablation.tsv";
    std::ofstream table(table_path);
    if (!table) throw DataError("cannot open " + table_path + " for writing");
    table << "# k\tval_loss\tprec@100\n";

    std::cout << "k\tval_loss\tprec@100\n";
    for (const uint32_t k : k_grid) {
        TrainConfig cfg = base.cfg;
        cfg.top_k = k;
        const std::string run_dir = base.run_dir + "/k" + std::to_string(k);
        const TrainResult result =
            train(corpus, have_neighbors && k > 0 ? &neighbors : nullptr, cfg, run_dir);
        const Checkpoint ckpt = load_checkpoint(result.checkpoint_path);
        const double prec = checkpoint_prec100(ckpt, corpus);

        char val_buf[64], prec_buf[64];
        std::snprintf(val_buf, sizeof(val_buf), "%.10g", result.best_val_loss);
        std::snprintf(prec_buf, sizeof(prec_buf), "%.6f", prec);
        table << k << '\t' << val_buf << '\t' << prec_buf << '\n';
        table.flush();
        std::cout << k << '\t' << val_buf << '\t' << prec_buf << '\n';
    }
    if (!table) throw DataError("write failed for " + table_path);
    std::cout << "table: " << table_path << '\n';
    return 0;
}

int cmd_replay(const std::string& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw DataError("cannot open " + manifest_path);
    json manifest;
    try {
        manifest = json::parse(in);
    } catch (const json::exception& e) {
        throw DataError(manifest_path + ": " + e.what());
    }
    if (!manifest.contains("argv") || !manifest["argv"].is_array())
        throw DataError(manifest_path + ": no argv array to replay");
    const auto argv = manifest["argv"].get<std::vector<std::string>>();
    if (!argv.empty() && argv.front() == "replay")
        throw std::invalid_argument("refusing to replay a replay manifest");
    std::cout << "replaying " << manifest_path << '\n';
    return run(argv);
}

int run(const std::vector<std::string>& args) {
    CLI::App app{"PairRec semantic hashing: train binary document codes on weakly "
                 "supervised pairs and evaluate Hamming-distance retrieval. "
                 "PAIRREC_THREADS caps worker threads."};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);

    // prepare
    auto* prepare = app.add_subcommand(
        "prepare", "build a corpus file from id<TAB>labels<TAB>tokens lines");
    std::string prep_input, prep_output;
    uint64_t prep_seed = 1;
    uint32_t prep_top_labels = 0;
    prepare->add_option("--input", prep_input, "tab-separated document file")->required();
    prepare->add_option("--output", prep_output, "corpus file to write")->required();
    prepare->add_option("--seed", prep_seed, "split seed")->capture_default_str();
    prepare->add_option("--top-labels", prep_top_labels,
                        "keep only the N most frequent labels (0 = keep all)")
        ->capture_default_str();

    // neighbors
    auto* nbrs = app.add_subcommand("neighbors", "precompute cosine top-k neighbor lists");
    std::string nbr_corpus, nbr_output;
    uint32_t nbr_top_k = 0;
    nbrs->add_option("--corpus", nbr_corpus, "prepared corpus file")->required();
    nbrs->add_option("--output", nbr_output, "neighbor file to write")->required();
    nbrs->add_option("--top-k", nbr_top_k, "list length per query")
        ->required()
        ->check(CLI::PositiveNumber);

    // train
    auto* train_cmd = app.add_subcommand("train", "train one configuration");
    TrainOptions train_opt;
    add_train_flags(train_cmd, train_opt);
    train_cmd->add_option("--top-k", train_opt.cfg.top_k,
                          "training pairs per document (0 = no pairwise term)")
        ->capture_default_str();
    train_cmd->add_option("--beta", train_opt.cfg.beta, "KL weight")
        ->check(CLI::IsMember({0.0, 0.01, 0.1}))
        ->capture_default_str();

    // encode
    auto* encode = app.add_subcommand("encode", "emit packed hash codes for a split");
    std::string enc_checkpoint, enc_corpus, enc_split = "all", enc_output;
    encode->add_option("--checkpoint", enc_checkpoint, "trained checkpoint")->required();
    encode->add_option("--corpus", enc_corpus, "prepared corpus file")->required();
    encode->add_option("--split", enc_split, "train, validation, test, or all")
        ->check(CLI::IsMember({"train", "validation", "test", "all"}))
        ->capture_default_str();
    encode->add_option("--output", enc_output, "code file to write")->required();

    // evaluate
    auto* evaluate = app.add_subcommand(
        "evaluate", "score prec@100 of test queries against the train split");
    std::string eval_checkpoint, eval_corpus, eval_output, eval_dataset;
    evaluate->add_option("--checkpoint", eval_checkpoint, "trained checkpoint")->required();
    evaluate->add_option("--corpus", eval_corpus, "prepared corpus file")->required();
    evaluate->add_option("--output", eval_output, "metrics file to write")->required();
    evaluate->add_option("--dataset", eval_dataset,
                         "dataset name for the metrics row (default: corpus file stem)");

    // sweep
    auto* sweep_cmd = app.add_subcommand("sweep", "grid search by validation loss");
    TrainOptions sweep_opt;
    std::vector<uint32_t> sweep_hidden_grid, sweep_k_grid;
    std::vector<double> sweep_beta_grid;
    add_train_flags(sweep_cmd, sweep_opt);
    sweep_cmd->add_option("--top-k", sweep_opt.cfg.top_k, "pairs per document")
        ->capture_default_str();
    sweep_cmd->add_option("--beta", sweep_opt.cfg.beta, "KL weight")
        ->check(CLI::IsMember({0.0, 0.01, 0.1}))
        ->capture_default_str();
    sweep_cmd->add_option("--hidden-grid", sweep_hidden_grid, "comma list of widths")
        ->delimiter(',')
        ->check(CLI::IsMember({500, 1000}));
    sweep_cmd->add_option("--k-grid", sweep_k_grid, "comma list of top-k values")
        ->delimiter(',');
    sweep_cmd->add_option("--beta-grid", sweep_beta_grid, "comma list of KL weights")
        ->delimiter(',')
        ->check(CLI::IsMember({0.0, 0.01, 0.1}));

    // ablation
    auto* ablation = app.add_subcommand(
        "ablation", "train across a k grid and tabulate val loss and prec@100");
    TrainOptions abl_opt;
    std::vector<uint32_t> abl_k_grid;
    add_train_flags(ablation, abl_opt);
    ablation->add_option("--beta", abl_opt.cfg.beta, "KL weight")
        ->check(CLI::IsMember({0.0, 0.01, 0.1}))
        ->capture_default_str();
    ablation->add_option("--k-grid", abl_k_grid, "comma list of top-k values, 0 allowed")
        ->required()
        ->delimiter(',');

    // replay
    auto* replay = app.add_subcommand("replay", "re-execute a recorded manifest");
    std::string replay_manifest;
    replay->add_option("--manifest", replay_manifest, "manifest.json of a previous run")
        ->required();

    std::vector<const char*> argv;
    argv.reserve(args.size() + 1);
    argv.push_back("pairrec");
    for (const std::string& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    if (*prepare) return cmd_prepare(prep_input, prep_output, prep_seed, prep_top_labels, args);
    if (*nbrs) return cmd_neighbors(nbr_corpus, nbr_output, nbr_top_k, args);
    if (*train_cmd) return cmd_train(train_opt, args);
    if (*encode) return cmd_encode(enc_checkpoint, enc_corpus, enc_split, enc_output, args);
    if (*evaluate)
        return cmd_evaluate(eval_checkpoint, eval_corpus, eval_output, eval_dataset, args);
    if (*sweep_cmd)
        return cmd_sweep(sweep_opt, sweep_hidden_grid, sweep_k_grid, sweep_beta_grid, args);
    if (*ablation) return cmd_ablation(abl_opt, abl_k_grid, args);
    if (*replay) return cmd_replay(replay_manifest);
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::string> args(argv + 1, argv + argc);
    try {
        return run(args);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
}
