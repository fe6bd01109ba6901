#pragma once

#include <array>
#include <functional>
#include <memory>

#include "gaitflow/cuboid.hpp"
#include "gaitflow/nnet.hpp"

namespace gaitflow {

/// Geometry/regularization of one step of the incremental training scheme.
/// Stage 1 is the slim bootstrap network, stage 4 the full architecture.
struct CurriculumStage {
    int stage_index = 4;
    int conv4_filters = 4096;
    int full5_units = 4096;
    int full6_units = 2048;
    bool lrn_enabled = true;
    double dropout_p = 0.4;
    float momentum = 0.95f;
    int lrn_n = 5;
    double lrn_k = 2.0, lrn_alpha = 1e-4, lrn_beta = 0.75;

    static CurriculumStage stage(int index);  // canonical stages 1..4
};

struct TrainSchedule {
    int batch_size = 150;
    float lr0 = 1e-2f;
    float lr_drop = 10.f;
    int plateau_patience = 3;
    float weight_decay = 5e-4f;
    int max_epochs = 30;
    uint64_t seed = 1;
    bool scenario_balancing = true;
    float momentum = 0.9f;
    float lr_floor = 1e-5f;
    // Desk-scale convenience: stop once the epoch's training accuracy is 1.
    bool stop_on_perfect_train = false;
    unsigned threads = 1;
    int chunk_size = 16;  // samples per deterministic worker chunk
};

struct EpochStats {
    int epoch = 0;
    float lr = 0.f;
    double train_loss = 0.0;
    double val_error = 0.0;  // rank-1 error on the validation set
    double train_accuracy = 0.0;
};
using TrainHistory = std::vector<EpochStats>;

void save_history_csv(const TrainHistory& history, const std::string& path);

/// L2-normalized activation of the top fully-connected feature layer.
struct GaitSignature {
    std::vector<float> vector;
    int label = -1;
    Scenario scenario = Scenario::N;
    std::string subject;
    std::string sequence;
    int window_start = 0;
};

// ----------------------------------------------------------------- dataset

/// Random-access cuboid source feeding training and extraction. Labels and
/// scenarios must be cheap; get() may hit disk.
class CuboidDataset {
public:
    virtual ~CuboidDataset() = default;
    virtual size_t size() const = 0;
    virtual FlowCuboid get(size_t i) const = 0;
    virtual int label(size_t i) const = 0;
    virtual Scenario scenario(size_t i) const = 0;
};

class MemoryDataset : public CuboidDataset {
public:
    explicit MemoryDataset(std::vector<FlowCuboid> items) : items_(std::move(items)) {}
    size_t size() const override { return items_.size(); }
    FlowCuboid get(size_t i) const override { return items_.at(i); }
    int label(size_t i) const override { return items_.at(i).label; }
    Scenario scenario(size_t i) const override { return items_.at(i).scenario; }

private:
    std::vector<FlowCuboid> items_;
};

class ArchiveDataset : public CuboidDataset {
public:
    explicit ArchiveDataset(const std::string& path) : reader_(path) {}
    size_t size() const override { return reader_.size(); }
    FlowCuboid get(size_t i) const override { return reader_.read(i); }
    int label(size_t i) const override { return reader_.label(i); }
    Scenario scenario(size_t i) const override { return reader_.scenario(i); }
    const CuboidArchiveReader& reader() const { return reader_; }

private:
    CuboidArchiveReader reader_;
};

/// Equal per-scenario draw per mini-batch; every scenario pool is a shuffled
/// cycle that reshuffles on wrap. One epoch is enough batches for the largest
/// pool to cycle once, so any run of >= 2 epochs shows every sample at least
/// twice. With balancing off this degrades to a plain shuffled pass.
class BalancedSampler {
public:
    BalancedSampler(const CuboidDataset& ds, int batch_size, bool balance, uint64_t seed);

    std::vector<size_t> next_batch();
    int batches_per_epoch() const { return batches_per_epoch_; }

private:
    struct Pool {
        std::vector<size_t> indices;
        size_t cursor = 0;
        Rng rng;
        Pool() : rng(0) {}
    };
    std::vector<Pool> pools_;
    std::vector<int> quota_;
    int batches_per_epoch_ = 0;
};

// -------------------------------------------------------------- operations

/// Fig-3 architecture for the given stage geometry; softmax head sized to
/// num_classes (>= 2). Layer names are canonical (conv1..conv4, full5, full6,
/// softmax_fc).
Network build_stage(const CurriculumStage& stage, int num_classes);

/// Fan-in-scaled Gaussian init for the trunk; the softmax head gets a small
/// fixed std so training starts from a near-uniform softmax.
void init_stage_params(Network& net, uint64_t seed);

/// Copies overlapping parameter slices between positionally aligned
/// parameterized layers; the softmax head keeps the target's fresh
/// initialization. Parameter-free layers (relu/lrn/pool/dropout) do not take
/// part in the alignment.
void transfer_weights(const Network& from, Network& to);

/// Mini-batch SGD with momentum/weight decay, balanced batches, per-epoch
/// validation and plateau LR drops (lr /= lr_drop after plateau_patience
/// epochs without a new best). Stops at max_epochs or when lr < lr_floor.
/// val may be null: plateau handling is then disabled and val_error reports
/// the training error.
TrainHistory train(Network& net, const CuboidDataset& dataset, const CuboidSetStats& stats,
                   const TrainSchedule& sched, const CuboidDataset* val);

struct CurriculumResult {
    Network net;
    std::vector<TrainHistory> history;
};

using StageCallback = std::function<void(int stage_index, const Network&, const TrainHistory&)>;

/// Trains the four incremental stages, seeding each from the previous one's
/// weights. `stages` must have exactly four entries.
CurriculumResult run_curriculum(const CuboidDataset& dataset, const CuboidSetStats& stats,
                                const CuboidDataset* val,
                                const std::vector<TrainSchedule>& schedules,
                                int num_classes,
                                const std::vector<CurriculumStage>& stages =
                                    {CurriculumStage::stage(1), CurriculumStage::stage(2),
                                     CurriculumStage::stage(3), CurriculumStage::stage(4)},
                                const StageCallback& on_stage = nullptr);

/// Freezes conv1..full6 (bit-exact) and retrains only a reshaped softmax head
/// on the new dataset, using features cached from the frozen trunk.
Network finetune_softmax(const Network& net, const CuboidDataset& dataset,
                         const CuboidSetStats& stats, const TrainSchedule& sched,
                         int num_classes, TrainHistory* history = nullptr);

/// Eval-mode rank-1 error of the softmax head over a dataset.
double rank1_error(const Network& net, const CuboidDataset& ds, const CuboidSetStats& stats,
                   unsigned threads);

/// Eval-mode class probabilities for every sample (rows follow ds order).
std::vector<std::vector<float>> class_probabilities(const Network& net, const CuboidDataset& ds,
                                                    const CuboidSetStats& stats,
                                                    unsigned threads);

/// full6 activation, L2-normalized. The cuboid must already be normalized.
GaitSignature extract_signature(const Network& net, const FlowCuboid& cuboid);

std::vector<GaitSignature> extract_signatures(const Network& net, const CuboidDataset& ds,
                                              const CuboidSetStats& stats, unsigned threads);

/// Copies a cuboid into a batch row, converting plane-major storage to the
/// network's interleaved channel-last layout.
void cuboid_to_input(const FlowCuboid& c, float* dst);

}  // namespace gaitflow
