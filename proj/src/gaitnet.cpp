#include "gaitflow/gaitnet.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>

namespace gaitflow {

CurriculumStage CurriculumStage::stage(int index) {
    CurriculumStage s;
    s.stage_index = index;
    switch (index) {
        case 1:
            s.conv4_filters = 512;
            s.full5_units = 512;
            s.full6_units = 256;
            s.lrn_enabled = false;
            s.dropout_p = 0.0;
            s.momentum = 0.9f;
            break;
        case 2:
            s.conv4_filters = 512;
            s.full5_units = 512;
            s.full6_units = 256;
            s.lrn_enabled = true;
            s.dropout_p = 0.1;
            s.momentum = 0.9f;
            break;
        case 3:
            s.conv4_filters = 2048;
            s.full5_units = 2048;
            s.full6_units = 1024;
            s.lrn_enabled = true;
            s.dropout_p = 0.1;
            s.momentum = 0.9f;
            break;
        case 4:
            s.conv4_filters = 4096;
            s.full5_units = 4096;
            s.full6_units = 2048;
            s.lrn_enabled = true;
            s.dropout_p = 0.4;
            s.momentum = 0.95f;
            break;
        default:
            throw DataError("curriculum stage index must be 1..4");
    }
    return s;
}

Network build_stage(const CurriculumStage& stage, int num_classes) {
    if (num_classes < 2) throw DataError("build_stage needs at least 2 classes");
    std::vector<LayerSpec> layers;
    layers.push_back(LayerSpec::conv("conv1", 7, 7, 1, 96));
    layers.push_back(LayerSpec::relu("relu1"));
    if (stage.lrn_enabled)
        layers.push_back(
            LayerSpec::lrn("norm1", stage.lrn_n, stage.lrn_k, stage.lrn_alpha, stage.lrn_beta));
    layers.push_back(LayerSpec::maxpool("pool1"));
    layers.push_back(LayerSpec::conv("conv2", 5, 5, 2, 192));
    layers.push_back(LayerSpec::relu("relu2"));
    layers.push_back(LayerSpec::maxpool("pool2"));
    layers.push_back(LayerSpec::conv("conv3", 3, 3, 1, 512));
    layers.push_back(LayerSpec::relu("relu3"));
    layers.push_back(LayerSpec::maxpool("pool3"));
    layers.push_back(LayerSpec::conv("conv4", 2, 2, 1, stage.conv4_filters));
    layers.push_back(LayerSpec::relu("relu4"));
    layers.push_back(LayerSpec::fully_connected("full5", stage.full5_units));
    layers.push_back(LayerSpec::relu("relu5"));
    if (stage.dropout_p > 0.0) layers.push_back(LayerSpec::dropout("drop5", stage.dropout_p));
    layers.push_back(LayerSpec::fully_connected("full6", stage.full6_units));
    layers.push_back(LayerSpec::relu("relu6"));
    if (stage.dropout_p > 0.0) layers.push_back(LayerSpec::dropout("drop6", stage.dropout_p));
    layers.push_back(LayerSpec::fully_connected("softmax_fc", num_classes));
    layers.push_back(LayerSpec::softmax("prob"));
    return make_network<float>(Shape{60, 60, 50}, std::move(layers));
}

void init_stage_params(Network& net, uint64_t seed) {
    Rng rng(derive_seed(seed, 0x696e6974ULL));
    init_params(net, rng);
    for (int i = int(net.layers.size()) - 1; i >= 0; --i) {
        if (!net.layers[size_t(i)].has_params()) continue;
        Rng head_rng(derive_seed(seed, 0x68656164ULL));
        for (auto& w : net.weights[size_t(i)]) w = float(head_rng.normal() * 0.01);
        for (auto& b : net.biases[size_t(i)]) b = 0.f;
        break;
    }
    invalidate_transpose_cache(net);
}

void transfer_weights(const Network& from, Network& to) {
    std::vector<size_t> src, dst;
    for (size_t i = 0; i < from.layers.size(); ++i)
        if (from.layers[i].has_params()) src.push_back(i);
    for (size_t i = 0; i < to.layers.size(); ++i)
        if (to.layers[i].has_params()) dst.push_back(i);
    if (src.size() != dst.size())
        throw DataError("transfer_weights: parameterized layer counts differ");
    for (size_t p = 0; p + 1 < src.size(); ++p) {  // softmax head stays re-initialized
        const LayerSpec& ls = from.layers[src[p]];
        const LayerSpec& ld = to.layers[dst[p]];
        if (ls.kind != ld.kind)
            throw DataError("transfer_weights: layer kind mismatch at " + ld.name);
        const Shape s_in = src[p] == 0 ? from.input : from.out_shape[src[p] - 1];
        const Shape d_in = dst[p] == 0 ? to.input : to.out_shape[dst[p] - 1];
        size_t s_rows, s_cols, d_rows, d_cols;
        if (ls.kind == LayerKind::conv) {
            if (ls.filter_h != ld.filter_h || ls.filter_w != ld.filter_w ||
                ls.stride != ld.stride)
                throw DataError("transfer_weights: conv geometry mismatch at " + ld.name);
            s_rows = size_t(ls.out_channels);
            d_rows = size_t(ld.out_channels);
            s_cols = size_t(ls.filter_h) * ls.filter_w * s_in.c;
            d_cols = size_t(ld.filter_h) * ld.filter_w * d_in.c;
        } else {
            s_rows = size_t(ls.units);
            d_rows = size_t(ld.units);
            s_cols = size_t(s_in.count());
            d_cols = size_t(d_in.count());
        }
        const size_t rows = std::min(s_rows, d_rows);
        const size_t cols = std::min(s_cols, d_cols);
        for (size_t r = 0; r < rows; ++r)
            for (size_t c = 0; c < cols; ++c)
                to.weights[dst[p]][r * d_cols + c] = from.weights[src[p]][r * s_cols + c];
        for (size_t r = 0; r < rows; ++r) to.biases[dst[p]][r] = from.biases[src[p]][r];
    }
    invalidate_transpose_cache(to);
}

// ----------------------------------------------------------------- sampler

BalancedSampler::BalancedSampler(const CuboidDataset& ds, int batch_size, bool balance,
                                 uint64_t seed) {
    if (ds.size() == 0) throw DataError("sampler over an empty dataset");
    if (batch_size < 1 || size_t(batch_size) > ds.size())
        throw DataError("batch size must be in [1, dataset size]");
    if (balance) {
        std::map<Scenario, std::vector<size_t>> by_scenario;
        for (size_t i = 0; i < ds.size(); ++i) by_scenario[ds.scenario(i)].push_back(i);
        for (auto& [sc, idx] : by_scenario) {
            Pool p;
            p.indices = std::move(idx);
            p.rng = Rng(derive_seed(seed, 0x706f6f6cULL, uint64_t(sc)));
            std::shuffle(p.indices.begin(), p.indices.end(), p.rng.engine());
            pools_.push_back(std::move(p));
        }
    } else {
        Pool p;
        p.indices.resize(ds.size());
        for (size_t i = 0; i < ds.size(); ++i) p.indices[i] = i;
        p.rng = Rng(derive_seed(seed, 0x706f6f6cULL));
        std::shuffle(p.indices.begin(), p.indices.end(), p.rng.engine());
        pools_.push_back(std::move(p));
    }
    const int S = int(pools_.size());
    quota_.assign(size_t(S), batch_size / S);
    for (int i = 0; i < batch_size % S; ++i) quota_[size_t(i)] += 1;
    size_t max_pool = 0;
    for (const auto& p : pools_) max_pool = std::max(max_pool, p.indices.size());
    batches_per_epoch_ =
        int((max_pool * size_t(S) + size_t(batch_size) - 1) / size_t(batch_size));
}

std::vector<size_t> BalancedSampler::next_batch() {
    std::vector<size_t> batch;
    for (size_t pi = 0; pi < pools_.size(); ++pi) {
        Pool& p = pools_[pi];
        for (int q = 0; q < quota_[pi]; ++q) {
            if (p.cursor == p.indices.size()) {
                std::shuffle(p.indices.begin(), p.indices.end(), p.rng.engine());
                p.cursor = 0;
            }
            batch.push_back(p.indices[p.cursor++]);
        }
    }
    return batch;
}

// ------------------------------------------------------------ batch plumbing

void cuboid_to_input(const FlowCuboid& c, float* dst) {
    const int H = c.height, W = c.width, C = c.channels;
    for (int ch = 0; ch < C; ++ch) {
        const float* plane = c.data.data() + size_t(ch) * H * W;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) dst[(size_t(y) * W + x) * C + ch] = plane[size_t(y) * W + x];
    }
}

namespace {

int logits_layer(const Network& net) {
    for (int i = int(net.layers.size()) - 1; i >= 0; --i)
        if (net.layers[size_t(i)].kind == LayerKind::fully_connected) return i;
    throw DataError("network has no fully connected head");
}

Tensor assemble_batch(const CuboidDataset& ds, const CuboidSetStats& stats,
                      const std::vector<size_t>& indices, Shape in_shape,
                      std::vector<int>* labels) {
    Tensor batch(int(indices.size()), in_shape);
    if (labels) labels->resize(indices.size());
    for (size_t i = 0; i < indices.size(); ++i) {
        FlowCuboid c = ds.get(indices[i]);
        normalize_inplace(c, stats);
        if (c.height != in_shape.h || c.width != in_shape.w || c.channels != in_shape.c)
            throw DataError("cuboid shape does not match the network input");
        cuboid_to_input(c, batch.sample(int(i)));
        if (labels) (*labels)[i] = c.label;
    }
    return batch;
}

struct ChunkStats {
    double loss_sum = 0.0;
    int correct = 0;
    int count = 0;
};

}  // namespace

TrainHistory train(Network& net, const CuboidDataset& dataset, const CuboidSetStats& stats,
                   const TrainSchedule& sched, const CuboidDataset* val) {
    if (dataset.size() == 0) throw DataError("training dataset is empty");
    const int C = net.num_classes();
    for (size_t i = 0; i < dataset.size(); ++i) {
        const int lab = dataset.label(i);
        if (lab < 0 || lab >= C)
            throw DataError("training label " + std::to_string(lab) +
                            " outside softmax width " + std::to_string(C));
    }
    const unsigned threads = sched.threads ? sched.threads : 1;
    const int logits_idx = logits_layer(net);

    net.train_mode = true;
    BalancedSampler sampler(dataset, sched.batch_size, sched.scenario_balancing, sched.seed);
    OptimizerState opt = make_optimizer(net, sched.lr0, sched.momentum, sched.weight_decay);
    build_transpose_cache(net);

    TrainHistory history;
    double best_val = std::numeric_limits<double>::infinity();
    int wait = 0;

    for (int epoch = 1; epoch <= sched.max_epochs; ++epoch) {
        double loss_sum = 0.0;
        long correct = 0, seen = 0;
        for (int b = 0; b < sampler.batches_per_epoch(); ++b) {
            const std::vector<size_t> indices = sampler.next_batch();
            const int n = int(indices.size());
            const int chunk = std::max(1, sched.chunk_size);
            const int nchunks = (n + chunk - 1) / chunk;

            std::vector<Gradients> worker_grads(threads);
            std::vector<ChunkStats> chunk_stats(static_cast<size_t>(nchunks));
            std::vector<std::thread> pool;
            std::exception_ptr err;
            std::mutex err_mu;
            for (unsigned w = 0; w < threads; ++w) {
                pool.emplace_back([&, w] {
                    try {
                        Gradients& acc = worker_grads[w];
                        for (int ci = int(w); ci < nchunks; ci += int(threads)) {
                            const size_t lo = size_t(ci) * chunk;
                            const size_t hi = std::min(size_t(n), lo + chunk);
                            std::vector<size_t> part(indices.begin() + long(lo),
                                                     indices.begin() + long(hi));
                            std::vector<int> labels;
                            Tensor input = assemble_batch(dataset, stats, part, net.input, &labels);
                            ForwardOpts opts = ForwardOpts::training(
                                derive_seed(sched.seed, uint64_t(epoch) << 32 | uint64_t(b),
                                            uint64_t(ci)));
                            auto trace = forward(net, input, opts);
                            auto loss = softmax_cross_entropy(trace.act[size_t(logits_idx)], labels);
                            ChunkStats& cs = chunk_stats[size_t(ci)];
                            for (int s = 0; s < input.n; ++s) {
                                cs.loss_sum += loss.loss[size_t(s)];
                                const float* row = trace.act[size_t(logits_idx)].sample(s);
                                int arg = 0;
                                for (int k = 1; k < C; ++k)
                                    if (row[k] > row[arg]) arg = k;
                                if (arg == labels[size_t(s)]) ++cs.correct;
                                ++cs.count;
                            }
                            auto g = backward(net, trace, loss.grad, logits_idx, false);
                            if (acc.weights.empty()) {
                                acc = std::move(g);
                            } else {
                                acc.accumulate(g);
                            }
                        }
                    } catch (...) {
                        std::lock_guard<std::mutex> lk(err_mu);
                        if (!err) err = std::current_exception();
                    }
                });
            }
            for (auto& t : pool) t.join();
            if (err) std::rethrow_exception(err);

            Gradients total;
            for (unsigned w = 0; w < threads; ++w) {
                if (worker_grads[w].weights.empty()) continue;
                if (total.weights.empty())
                    total = std::move(worker_grads[w]);
                else
                    total.accumulate(worker_grads[w]);
            }
            total.scale(1.f / float(n));
            sgd_step(net, total, opt);
            build_transpose_cache(net);

            for (const auto& cs : chunk_stats) {
                loss_sum += cs.loss_sum;
                correct += cs.correct;
                seen += cs.count;
            }
        }

        EpochStats ep;
        ep.epoch = epoch;
        ep.lr = opt.lr;
        ep.train_loss = loss_sum / double(std::max<long>(1, seen));
        ep.train_accuracy = double(correct) / double(std::max<long>(1, seen));
        if (!std::isfinite(ep.train_loss))
            throw NumericError("training loss became non-finite at epoch " +
                               std::to_string(epoch));

        net.train_mode = false;
        ep.val_error = val ? rank1_error(net, *val, stats, threads) : 1.0 - ep.train_accuracy;
        net.train_mode = true;
        history.push_back(ep);

        if (val) {
            if (ep.val_error < best_val - 1e-12) {
                best_val = ep.val_error;
                wait = 0;
            } else if (++wait >= sched.plateau_patience) {
                opt.lr /= sched.lr_drop;
                wait = 0;
            }
            if (opt.lr < sched.lr_floor) break;
        }
        if (sched.stop_on_perfect_train && ep.train_accuracy >= 1.0) break;
    }
    net.train_mode = false;
    return history;
}

CurriculumResult run_curriculum(const CuboidDataset& dataset, const CuboidSetStats& stats,
                                const CuboidDataset* val,
                                const std::vector<TrainSchedule>& schedules, int num_classes,
                                const std::vector<CurriculumStage>& stages,
                                const StageCallback& on_stage) {
    if (stages.size() != 4) throw DataError("curriculum needs exactly four stages");
    if (schedules.size() != 4) throw DataError("curriculum needs exactly four schedules");

    CurriculumResult result;
    Network prev;
    for (size_t i = 0; i < 4; ++i) {
        Network net = build_stage(stages[i], num_classes);
        init_stage_params(net, derive_seed(schedules[i].seed, 0x73746167ULL, i));
        if (i > 0) transfer_weights(prev, net);
        TrainSchedule sched = schedules[i];
        sched.momentum = stages[i].momentum;
        result.history.push_back(train(net, dataset, stats, sched, val));
        if (on_stage) on_stage(stages[i].stage_index, net, result.history.back());
        prev = std::move(net);
    }
    result.net = std::move(prev);
    return result;
}

// -------------------------------------------------------------- finetuning

namespace {

// Signature/feature tap: the fully connected layer named full6 (fallback: the
// one before the head), including its trailing relu when present.
int feature_layer(const Network& net) {
    int named = -1, before_head = -1, last_fc = -1;
    for (int i = 0; i < int(net.layers.size()); ++i) {
        if (net.layers[size_t(i)].kind != LayerKind::fully_connected) continue;
        if (net.layers[size_t(i)].name == "full6") named = i;
        before_head = last_fc;
        last_fc = i;
    }
    int idx = named >= 0 ? named : before_head;
    if (idx < 0) throw DataError("network has no feature layer");
    if (idx + 1 < int(net.layers.size()) && net.layers[size_t(idx) + 1].kind == LayerKind::relu)
        ++idx;
    return idx;
}

// Eval-mode activations of layer `tap` for every dataset element.
std::vector<std::vector<float>> tap_activations(const Network& net, const CuboidDataset& ds,
                                                const CuboidSetStats& stats, int tap,
                                                unsigned threads) {
    const size_t n = ds.size();
    std::vector<std::vector<float>> out(n);
    const size_t chunk = 32;
    const size_t nchunks = (n + chunk - 1) / chunk;
    parallel_for(nchunks, threads, [&](size_t ci) {
        const size_t lo = ci * chunk, hi = std::min(n, lo + chunk);
        std::vector<size_t> part;
        for (size_t i = lo; i < hi; ++i) part.push_back(i);
        Tensor input = assemble_batch(ds, stats, part, net.input, nullptr);
        auto trace = forward(net, input);
        const Tensor& act = trace.act[size_t(tap)];
        for (size_t i = lo; i < hi; ++i) {
            const float* row = act.sample(int(i - lo));
            out[i].assign(row, row + act.shape.count());
        }
    });
    return out;
}

}  // namespace

Network finetune_softmax(const Network& net, const CuboidDataset& dataset,
                         const CuboidSetStats& stats, const TrainSchedule& sched,
                         int num_classes, TrainHistory* history) {
    if (dataset.size() == 0) throw DataError("fine-tune dataset is empty");
    if (num_classes < 2) throw DataError("fine-tune needs at least 2 classes");
    const unsigned threads = sched.threads ? sched.threads : 1;

    const int head_idx = logits_layer(net);
    // Dropout applied to the cached features: rate of the layer feeding the head.
    double drop_p = 0.0;
    if (head_idx > 0 && net.layers[size_t(head_idx) - 1].kind == LayerKind::dropout)
        drop_p = net.layers[size_t(head_idx) - 1].rate;

    Network eval_net = net;
    eval_net.train_mode = false;
    const int feat_tap = head_idx - 1;  // input of the head (dropout is identity in eval)
    auto features = tap_activations(eval_net, dataset, stats, feat_tap, threads);
    const int F = int(features.front().size());

    std::vector<int> labels(dataset.size());
    for (size_t i = 0; i < dataset.size(); ++i) {
        labels[i] = dataset.label(i);
        if (labels[i] < 0 || labels[i] >= num_classes)
            throw DataError("fine-tune label outside the new softmax width");
    }

    // Head as a one-layer network over the cached features.
    Network head = make_network<float>(Shape{1, 1, F},
                                       {LayerSpec::fully_connected("softmax_fc", num_classes),
                                        LayerSpec::softmax("prob")});
    Rng rng(derive_seed(sched.seed, 0xf17eULL));
    init_params(head, rng);
    OptimizerState opt = make_optimizer(head, sched.lr0, sched.momentum, sched.weight_decay);

    BalancedSampler sampler(dataset, std::min<int>(sched.batch_size, int(dataset.size())),
                            sched.scenario_balancing, sched.seed);
    double best_loss = std::numeric_limits<double>::infinity();
    int wait = 0;
    for (int epoch = 1; epoch <= sched.max_epochs; ++epoch) {
        double loss_sum = 0.0;
        long correct = 0, seen = 0;
        for (int b = 0; b < sampler.batches_per_epoch(); ++b) {
            const auto indices = sampler.next_batch();
            Tensor input(int(indices.size()), Shape{1, 1, F});
            std::vector<int> blab(indices.size());
            Rng drop_rng(derive_seed(sched.seed, 0x64726f70ULL,
                                     uint64_t(epoch) << 32 | uint64_t(b)));
            for (size_t i = 0; i < indices.size(); ++i) {
                const auto& f = features[indices[i]];
                float* dst = input.sample(int(i));
                if (drop_p > 0.0) {
                    const float scale = float(1.0 / (1.0 - drop_p));
                    for (int k = 0; k < F; ++k)
                        dst[k] = drop_rng.uniform() >= drop_p ? f[size_t(k)] * scale : 0.f;
                } else {
                    std::copy(f.begin(), f.end(), dst);
                }
                blab[i] = labels[indices[i]];
            }
            auto trace = forward(head, input);
            auto loss = softmax_cross_entropy(trace.act[0], blab);
            for (int s = 0; s < input.n; ++s) {
                loss_sum += loss.loss[size_t(s)];
                const float* row = trace.act[0].sample(s);
                int arg = 0;
                for (int k = 1; k < num_classes; ++k)
                    if (row[k] > row[arg]) arg = k;
                if (arg == blab[size_t(s)]) ++correct;
                ++seen;
            }
            auto g = backward(head, trace, loss.grad, 0, false);
            g.scale(1.f / float(input.n));
            sgd_step(head, g, opt);
        }
        EpochStats ep;
        ep.epoch = epoch;
        ep.lr = opt.lr;
        ep.train_loss = loss_sum / double(std::max<long>(1, seen));
        ep.train_accuracy = double(correct) / double(std::max<long>(1, seen));
        ep.val_error = 1.0 - ep.train_accuracy;
        if (!std::isfinite(ep.train_loss))
            throw NumericError("fine-tune loss became non-finite");
        if (history) history->push_back(ep);
        if (ep.train_loss < best_loss - 1e-12) {
            best_loss = ep.train_loss;
            wait = 0;
        } else if (++wait >= sched.plateau_patience) {
            opt.lr /= sched.lr_drop;
            wait = 0;
        }
        if (opt.lr < sched.lr_floor) break;
        if (sched.stop_on_perfect_train && ep.train_accuracy >= 1.0) break;
    }

    // Reassemble: frozen trunk, new head. Trunk parameters are copied verbatim.
    std::vector<LayerSpec> layers = net.layers;
    layers[size_t(head_idx)].units = num_classes;
    Network out = make_network<float>(net.input, std::move(layers));
    for (size_t i = 0; i < net.layers.size(); ++i) {
        if (int(i) == head_idx) continue;
        out.weights[i] = net.weights[i];
        out.biases[i] = net.biases[i];
    }
    out.weights[size_t(head_idx)] = head.weights[0];
    out.biases[size_t(head_idx)] = head.biases[0];
    return out;
}

// -------------------------------------------------------------- inference

double rank1_error(const Network& net, const CuboidDataset& ds, const CuboidSetStats& stats,
                   unsigned threads) {
    if (ds.size() == 0) throw DataError("rank1_error over an empty dataset");
    auto probs = class_probabilities(net, ds, stats, threads);
    long correct = 0;
    for (size_t i = 0; i < ds.size(); ++i) {
        const auto& row = probs[i];
        int arg = 0;
        for (size_t k = 1; k < row.size(); ++k)
            if (row[k] > row[size_t(arg)]) arg = int(k);
        if (arg == ds.label(i)) ++correct;
    }
    return 1.0 - double(correct) / double(ds.size());
}

std::vector<std::vector<float>> class_probabilities(const Network& net, const CuboidDataset& ds,
                                                    const CuboidSetStats& stats,
                                                    unsigned threads) {
    Network eval_net = net;
    eval_net.train_mode = false;
    return tap_activations(eval_net, ds, stats, int(net.layers.size()) - 1, threads);
}

GaitSignature extract_signature(const Network& net, const FlowCuboid& cuboid) {
    if (!cuboid.normalized)
        throw DataError("extract_signature: cuboid has not been mean-normalized");
    Tensor input(1, net.input);
    if (cuboid.height != net.input.h || cuboid.width != net.input.w ||
        cuboid.channels != net.input.c)
        throw DataError("extract_signature: cuboid shape mismatch");
    cuboid_to_input(cuboid, input.sample(0));
    auto trace = forward(net, input);  // eval mode
    const int tap = feature_layer(net);
    const Tensor& act = trace.act[size_t(tap)];

    GaitSignature sig;
    sig.vector.assign(act.v.begin(), act.v.end());
    double norm2 = 0.0;
    for (float v : sig.vector) norm2 += double(v) * v;
    if (norm2 < 1e-24) throw NumericError("degenerate all-zero gait signature");
    const float inv = float(1.0 / std::sqrt(norm2));
    for (float& v : sig.vector) v *= inv;
    sig.label = cuboid.label;
    sig.scenario = cuboid.scenario;
    sig.subject = cuboid.subject;
    sig.sequence = cuboid.sequence;
    sig.window_start = cuboid.window_start;
    return sig;
}

std::vector<GaitSignature> extract_signatures(const Network& net, const CuboidDataset& ds,
                                              const CuboidSetStats& stats, unsigned threads) {
    Network eval_net = net;
    eval_net.train_mode = false;
    std::vector<GaitSignature> out(ds.size());
    parallel_for(ds.size(), threads, [&](size_t i) {
        FlowCuboid c = ds.get(i);
        normalize_inplace(c, stats);
        out[i] = extract_signature(eval_net, c);
    });
    return out;
}

void save_history_csv(const TrainHistory& history, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write history: " + path);
    os << "epoch,lr,train_loss,val_error\n";
    char line[160];
    for (const auto& e : history) {
        std::snprintf(line, sizeof(line), "%d,%.6g,%.8g,%.8g\n", e.epoch, double(e.lr),
                      e.train_loss, e.val_error);
        os << line;
    }
}

}  // namespace gaitflow
