#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "nd/data.hpp"
#include "nd/noise.hpp"
#include "nd/optim.hpp"
#include "nd/supernet.hpp"

namespace nd {

struct SearchHyper {
    int epochs = 25;
    int batch_size = 64;
    SgdConfig w;
    AdamConfig alpha;
    int retrain_epochs = 30;
    int retrain_batch_size = 64;
};

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0, train_acc = 0.0;
    double val_loss = 0.0, val_acc = 0.0;
    double sigma = 0.0;
    std::vector<double> alpha_flat;  // lexicographic edge-key order
    double wall_seconds = 0.0;       // never written to the CSV log
};

struct SearchRunRecord {
    std::vector<EpochRecord> epochs;
    Genotype genotype;
    std::vector<std::string> alpha_columns;  // one per logit: "<group>/eNN/<op>"
    double wall_seconds = 0.0;
};

// Raised when a training loss stops being finite.
class SearchAbort : public std::runtime_error {
public:
    SearchAbort(int epoch, int step, const std::string& what)
        : std::runtime_error("search aborted at epoch " + std::to_string(epoch) + " step " +
                             std::to_string(step) + ": " + what),
          epoch(epoch), step(step) {}
    int epoch;
    int step;
};

// First-order alternating optimization: per batch, one momentum-SGD step on
// the weights against the train stream, then one adaptive-moment step on the
// architecture logits against the val stream. Fresh noise is drawn
// independently for each of the two steps.
SearchRunRecord search(Supernet& net, const NoisePolicy& policy, const DatasetSplit& data,
                       const SearchHyper& hyper, std::uint64_t seed);

// Per-epoch CSV: epoch,train_loss,train_acc,val_loss,val_acc,sigma,<alpha...>.
std::string search_log_csv(const SearchRunRecord& record);

struct RetrainResult {
    double test_accuracy = 0.0;
    double final_train_loss = 0.0;
    double wall_seconds = 0.0;
};

// Trains the discrete network from a genotype on train+val and evaluates on
// the held-out test split. No mixed edges, no noise.
RetrainResult retrain(const Genotype& genotype, const SpaceSpec& space, const SupernetConfig& netcfg,
                      const DatasetSplit& data, const SearchHyper& hyper, std::uint64_t seed);

// Mean loss/accuracy over a sample list in the given mode (no noise).
struct EvalStats {
    double loss = 0.0;
    double accuracy = 0.0;
};
EvalStats evaluate_supernet(Supernet& net, const std::vector<Sample>& samples, int batch_size,
                            ForwardMode mode);
EvalStats evaluate_discrete(DiscreteNet& net, const std::vector<Sample>& samples, int batch_size);

}  // namespace nd
