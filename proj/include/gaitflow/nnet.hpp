#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "gaitflow/common.hpp"

namespace gaitflow {

// Portable normal/uniform sampler (std distributions are not pinned across
// library implementations; Box-Muller over mt19937_64 is).
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }
    double uniform() {  // [0,1)
        return double(gen_() >> 11) * 0x1.0p-53;
    }
    double normal();
    std::mt19937_64& engine() { return gen_; }

private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

struct Shape {
    int h = 1, w = 1, c = 1;
    int count() const { return h * w * c; }
    bool operator==(const Shape&) const = default;
};

template <typename T>
struct TensorT {
    int n = 0;  // batch
    Shape shape;
    std::vector<T> v;

    TensorT() = default;
    TensorT(int n_, Shape s) : n(n_), shape(s), v(size_t(n_) * s.count(), T(0)) {}

    size_t size() const { return v.size(); }
    T* sample(int i) { return v.data() + size_t(i) * shape.count(); }
    const T* sample(int i) const { return v.data() + size_t(i) * shape.count(); }
};

using Tensor = TensorT<float>;

enum class LayerKind : uint8_t {
    conv = 0,
    maxpool = 1,
    lrn = 2,
    relu = 3,
    fully_connected = 4,
    dropout = 5,
    softmax = 6,
};

const char* layer_kind_name(LayerKind k);
LayerKind layer_kind_from_name(const std::string& s);

struct LayerSpec {
    LayerKind kind = LayerKind::relu;
    std::string name;
    int filter_h = 0, filter_w = 0, stride = 1, out_channels = 0;  // conv
    int pool = 2, pool_stride = 2;                                 // maxpool
    int units = 0;                                                 // fully_connected
    double rate = 0.0;                                             // dropout
    int lrn_n = 5;                                                 // lrn
    double lrn_k = 2.0, lrn_alpha = 1e-4, lrn_beta = 0.75;

    static LayerSpec conv(std::string name, int fh, int fw, int stride, int out_c);
    static LayerSpec maxpool(std::string name, int size = 2, int stride = 2);
    static LayerSpec lrn(std::string name, int n = 5, double k = 2.0, double alpha = 1e-4,
                         double beta = 0.75);
    static LayerSpec relu(std::string name);
    static LayerSpec fully_connected(std::string name, int units);
    static LayerSpec dropout(std::string name, double p);
    static LayerSpec softmax(std::string name);

    bool has_params() const {
        return kind == LayerKind::conv || kind == LayerKind::fully_connected;
    }
};

template <typename T>
struct NetworkT {
    Shape input;
    std::vector<LayerSpec> layers;
    std::vector<Shape> out_shape;           // per layer
    std::vector<std::vector<T>> weights;    // conv: out_c x (fh*fw*in_c); fc: units x in
    std::vector<std::vector<T>> biases;
    std::vector<std::vector<T>> weights_t;  // transpose cache for backward; may be empty
    bool train_mode = false;
    bool debug_nan = false;

    Shape output_shape() const { return out_shape.back(); }
    int num_classes() const;
    size_t param_count() const;
};

using Network = NetworkT<float>;

/// Validates geometry by shape propagation (valid convolutions, pools,
/// flattening fully-connected layers) and allocates zeroed parameters.
template <typename T>
NetworkT<T> make_network(Shape input, std::vector<LayerSpec> layers);

/// Gaussian weights, constant biases. With std_dev <= 0 (the default) each
/// layer uses fan-in scaling, std = sqrt(2/fan_in); a positive std_dev is
/// applied uniformly instead.
template <typename T>
void init_params(NetworkT<T>& net, Rng& rng, double std_dev = -1.0, double bias = 0.1);

template <typename T>
void build_transpose_cache(NetworkT<T>& net);
template <typename T>
void invalidate_transpose_cache(NetworkT<T>& net);

NetworkT<double> to_double(const NetworkT<float>& net);

template <typename T>
struct TraceT {
    TensorT<T> input;
    std::vector<TensorT<T>> act;                    // per-layer outputs
    std::vector<std::vector<int32_t>> pool_argmax;  // per maxpool layer
    std::vector<std::vector<uint8_t>> drop_mask;    // per dropout layer
    std::vector<std::vector<T>> lrn_den;            // per lrn layer

    const TensorT<T>& output() const { return act.back(); }
};

using TraceActivations = TraceT<float>;

struct ForwardOpts {
    bool train = false;
    bool has_seed = false;
    uint64_t dropout_seed = 0;
    // When set, dropout layers replay these masks instead of sampling.
    const std::vector<std::vector<uint8_t>>* frozen_masks = nullptr;

    static ForwardOpts eval() { return {}; }
    static ForwardOpts training(uint64_t seed) { return {true, true, seed, nullptr}; }
};

template <typename T>
TraceT<T> forward(const NetworkT<T>& net, const TensorT<T>& input, const ForwardOpts& opts = {});

template <typename T>
struct GradientsT {
    std::vector<std::vector<T>> weights;  // aligned with net.weights
    std::vector<std::vector<T>> biases;
    TensorT<T> input;

    void accumulate(const GradientsT& other);
    void scale(T s);
};

using Gradients = GradientsT<float>;

/// Reverse pass from layer `from_layer` whose output gradient is `grad`
/// (defaults to the last layer). Maxpool routes through stored argmaxes,
/// dropout replays the forward mask. want_input_grad=false skips the
/// gradient w.r.t. the network input (training does not consume it).
template <typename T>
GradientsT<T> backward(const NetworkT<T>& net, const TraceT<T>& trace, const TensorT<T>& grad,
                       int from_layer = -1, bool want_input_grad = true);

template <typename T>
struct LossResult {
    std::vector<T> loss;   // per sample
    TensorT<T> grad;       // d loss_i / d logits_i (not batch-averaged)
};

/// loss_i = -log softmax(logits_i)[label_i]; grad = softmax - one_hot.
template <typename T>
LossResult<T> softmax_cross_entropy(const TensorT<T>& logits, const std::vector<int>& labels);

struct OptimizerState {
    std::vector<std::vector<float>> velocity_w;
    std::vector<std::vector<float>> velocity_b;
    float lr = 1e-2f;
    float momentum = 0.9f;
    float weight_decay = 5e-4f;
};

OptimizerState make_optimizer(const Network& net, float lr, float momentum, float weight_decay);

/// v <- momentum*v - lr*(g + weight_decay*w); w <- w + v. Invalidates the
/// transpose cache.
void sgd_step(Network& net, const Gradients& grads, OptimizerState& opt);

struct GradCheckResult {
    double max_rel_error = 0.0;
    size_t params_checked = 0;
};

/// Central-difference check of backward() against the batched
/// softmax-cross-entropy loss, in double precision with frozen dropout masks.
/// Relative error uses denominator max(1e-4, |analytic|, |numeric|).
GradCheckResult grad_check(const NetworkT<double>& net, const TensorT<double>& input,
                           const std::vector<int>& labels, double eps = 1e-5,
                           size_t max_params = 2000, uint64_t seed = 1,
                           bool freeze_dropout = true);

// Checkpoints: magic GFNN, u32 version, length-prefixed JSON layer table,
// then length-prefixed f32 parameter blobs; optimizer state optional.
void save_checkpoint(const Network& net, const std::string& path,
                     const OptimizerState* opt = nullptr);
Network load_checkpoint(const std::string& path, OptimizerState* opt = nullptr);

}  // namespace gaitflow
