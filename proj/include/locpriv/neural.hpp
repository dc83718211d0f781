#pragma once

// Minimal dense-tensor kernels with hand-derived gradients: stacked
// (bi)directional LSTM, multi-head causal self-attention with an FC scoring
// head, a graph-convolution layer, positional encodings, the usual
// activations, cross-entropy, and an Adam-style optimizer.  Everything is
// float64 and deterministic: same seed + same data reproduces bit-identical
// results.  The tracking and obfuscation models are built on top of these.

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "locpriv/errors.hpp"
#include "locpriv/rng.hpp"

namespace locpriv::nn {

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

// Dense row-major float64 array.  Most kernels work on 2-D tensors
// (rows() / cols() throw ShapeMismatch for other ranks).
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;

    static Tensor zeros(std::vector<std::size_t> dims);
    static Tensor from_rows(const std::vector<std::vector<double>>& rows);

    std::size_t numel() const;
    bool is_matrix() const { return shape.size() == 2; }
    std::size_t rows() const;
    std::size_t cols() const;

    double at(std::size_t r, std::size_t c) const;
    double& at(std::size_t r, std::size_t c);

    // Throws NonFinite naming `what` if any entry is NaN or infinite.
    void ensure_finite(const char* what) const;

    bool same_shape(const Tensor& other) const { return shape == other.shape; }
    void fill(double value);
};

// ---------------------------------------------------------------------------
// Parameters and optimizer
// ---------------------------------------------------------------------------

// Adam-style hyper-parameters.  The learning rate default matches the models
// this library ships; the moment decays are the customary ones.
struct AdamConfig {
    double learning_rate = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

// Named parameters with paired gradient buffers and Adam moment estimates.
// Layers register their weights here at construction; training code calls
// zero_grad() / (backward passes) / step().  Iteration order is the sorted
// parameter name, so updates and checkpoints are deterministic.
class ParameterStore {
  public:
    explicit ParameterStore(AdamConfig config = {});

    // Creates a zero-initialised parameter (plus gradient and moment buffers
    // of the same shape).  Throws ConfigError if the name already exists.
    Tensor& create(const std::string& name, std::vector<std::size_t> dims);

    bool has(const std::string& name) const;
    Tensor& param(const std::string& name);
    const Tensor& param(const std::string& name) const;
    Tensor& grad(const std::string& name);
    const Tensor& grad(const std::string& name) const;

    void zero_grad();

    // One Adam update over every parameter.  A NaN/Inf gradient anywhere
    // aborts the whole step (NonFinite) before any parameter is touched.
    void step();

    std::uint64_t steps_taken() const { return steps_; }
    std::vector<std::string> names() const;
    std::size_t size() const { return slots_.size(); }
    const AdamConfig& optimizer() const { return config_; }

  private:
    struct Slot {
        Tensor value;
        Tensor grad;
        Tensor moment1;
        Tensor moment2;
    };

    std::map<std::string, Slot> slots_;
    AdamConfig config_;
    std::uint64_t steps_ = 0;
};

// Fills `t` with independent draws from uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)).
void init_uniform(Tensor& t, std::size_t fan_in, Rng& rng);

// Binary checkpoint of every parameter value (magic + format version + named
// float64 arrays with shapes).  save -> load -> save round-trips bit-exactly.
// load_checkpoint requires the store to hold exactly the names in the file
// with matching shapes; gradients and optimizer moments are reset.
void save_checkpoint(const ParameterStore& store, const std::string& path);
void load_checkpoint(ParameterStore& store, const std::string& path);

// ---------------------------------------------------------------------------
// Activations and losses
// ---------------------------------------------------------------------------

// Row-wise softmax with max-subtraction; each output row sums to 1.
Tensor softmax_rows(const Tensor& logits);

// Element-wise logistic function, numerically stable for large |x|.
Tensor sigmoid(const Tensor& x);

struct CrossEntropyResult {
    double loss = 0.0;
    Tensor grad_logits;        // softmax(logits) - one_hot, zero on masked rows
    std::size_t clamp_count = 0;  // rows whose target probability hit the floor
};

// Cross-entropy of softmax(logits) against one-hot targets.  Target rows that
// are all zero are treated as padding: they contribute neither loss nor
// gradient.  Probabilities below 1e-12 are clamped for the loss value (the
// clamp count is reported) while the gradient keeps the exact
// softmax-minus-target form.
CrossEntropyResult cross_entropy_from_logits(const Tensor& logits, const Tensor& one_hot);

// Same loss evaluated directly on probabilities (no gradient).
struct CrossEntropyLoss {
    double loss = 0.0;
    std::size_t clamp_count = 0;
};
CrossEntropyLoss cross_entropy_from_probs(const Tensor& probs, const Tensor& one_hot);

// ---------------------------------------------------------------------------
// Positional encodings
// ---------------------------------------------------------------------------

// PE(pos, 2i) = sin(pos / 10000^(2i/dim)), PE(pos, 2i+1) = cos(pos / 10000^(2i/dim)).
// `dim` must be even (OddDimension otherwise).
Tensor positional_encoding(std::size_t n_positions, std::size_t dim);

// ---------------------------------------------------------------------------
// LSTM stack
// ---------------------------------------------------------------------------

struct LstmConfig {
    std::size_t input_dim = 0;
    std::size_t hidden_dim = 0;
    std::size_t layers = 5;
    bool bidirectional = false;
};

// Stacked LSTM over a [T x input_dim] sequence.  Each layer runs the standard
// element-wise gate recurrence over whole input vectors; bidirectional layers
// run a forward and a backward cell and concatenate their hidden states, so
// the stack output is [T x hidden_dim] (or [T x 2*hidden_dim]).
//
// Parameters live in the supplied ParameterStore under
//   <prefix>.l<layer>.{fw,bw}.{W,U,b}
// with W packing the four gate input weights side by side in the column order
// forget | input | candidate | output (U and b likewise).  Weights are
// initialised uniform +-1/sqrt(fan_in); biases start at zero.
class LstmStack {
  public:
    LstmStack(const LstmConfig& config, ParameterStore& store, std::string prefix, Rng& rng);

    std::size_t output_dim() const;

    // Runs the stack and caches activations for backward().
    Tensor forward(const Tensor& inputs);

    // Backpropagates through the cached forward pass, accumulating parameter
    // gradients in the store.  Returns the gradient w.r.t. the inputs unless
    // `want_input_grad` is false (skipping it saves the densest product when
    // the inputs are not trained).
    Tensor backward(const Tensor& grad_output, bool want_input_grad = true);

    const LstmConfig& config() const { return config_; }
    std::string param_name(std::size_t layer, bool backward_dir, const char* which) const;

  private:
    struct DirectionCache {
        Tensor f, i, g, o, c, tanh_c, h;  // all [T x hidden]
    };
    struct LayerCache {
        Tensor input;  // [T x layer input dim]
        DirectionCache fw, bw;
    };

    LstmConfig config_;
    ParameterStore* store_;
    std::string prefix_;
    std::vector<LayerCache> caches_;
    bool have_cache_ = false;
};

// ---------------------------------------------------------------------------
// Multi-head causal self-attention with an FC scoring head
// ---------------------------------------------------------------------------

struct AttentionConfig {
    std::size_t model_dim = 0;  // g; must be divisible by heads
    std::size_t heads = 4;      // B
    std::size_t n_outputs = 0;  // L, width of the FC scoring head
};

// Scaled dot-product self-attention: per head, softmax(Q K^T / sqrt(g/B)) V
// under a causal mask (position n attends only to positions <= n), heads
// concatenated and projected by W^O, then an FC head maps each position to
// n_outputs logits; probabilities are the row softmax of those logits.
//
// Parameters, under <prefix>:
//   .h<i>.{Wq,Wk,Wv} : [g x g/B]    .Wo : [g x g]
//   .Wfc : [g x n_outputs]          .bfc : [n_outputs]
class AttentionBlock {
  public:
    AttentionBlock(const AttentionConfig& config, ParameterStore& store, std::string prefix,
                   Rng& rng);

    struct Output {
        Tensor logits;  // [N x n_outputs]
        Tensor probs;   // row softmax of logits
    };

    Output forward(const Tensor& inputs);  // inputs: [N x model_dim]

    // Backpropagates grad w.r.t. the logits through the FC head and the
    // attention stack; accumulates parameter gradients and returns the
    // gradient w.r.t. the inputs.
    Tensor backward(const Tensor& grad_logits);

    const AttentionConfig& config() const { return config_; }

  private:
    AttentionConfig config_;
    ParameterStore* store_;
    std::string prefix_;

    // forward caches
    Tensor input_;
    std::vector<Tensor> q_, k_, v_, attn_;  // per head
    Tensor concat_, projected_, probs_;
    bool have_cache_ = false;
};

// ---------------------------------------------------------------------------
// Fully connected layer
// ---------------------------------------------------------------------------

// Affine map X -> X W + b over row vectors, with cached-input backward.
// Parameters: <prefix>.W : [in x out], <prefix>.b : [out].
class Linear {
  public:
    Linear(std::size_t in_dim, std::size_t out_dim, ParameterStore& store, std::string prefix,
           Rng& rng);

    Tensor forward(const Tensor& inputs);             // [N x in] -> [N x out]
    Tensor backward(const Tensor& grad_output);       // returns grad w.r.t. inputs

    std::size_t in_dim() const { return in_dim_; }
    std::size_t out_dim() const { return out_dim_; }

  private:
    std::size_t in_dim_;
    std::size_t out_dim_;
    ParameterStore* store_;
    std::string prefix_;
    Tensor input_;
    bool have_cache_ = false;
};

// ---------------------------------------------------------------------------
// Graph convolution
// ---------------------------------------------------------------------------

// Symmetric normalisation of an adjacency matrix: with E_hat = E + I and
// D_hat its degree diagonal, returns D_hat^(-1/2) E_hat D_hat^(-1/2).
// The self-loops guarantee every degree is at least 1.  `adjacency` must be
// square with non-negative entries.
Tensor gcn_normalized_adjacency(const Tensor& adjacency);

struct GcnCache {
    Tensor norm_adj;   // the normalised adjacency used
    Tensor agg;        // norm_adj * input
    Tensor output;     // sigmoid(agg * theta)
};

// One graph-convolution layer: sigmoid(norm_adj * input * theta).
// `norm_adj` should come from gcn_normalized_adjacency.
Tensor gcn_layer(const Tensor& norm_adj, const Tensor& input, const Tensor& theta,
                 GcnCache* cache = nullptr);

struct GcnGrads {
    Tensor d_theta;
    Tensor d_input;
};

// Gradients of a cached gcn_layer call w.r.t. theta and the layer input.
GcnGrads gcn_backward(const GcnCache& cache, const Tensor& theta, const Tensor& grad_output);

}  // namespace locpriv::nn
