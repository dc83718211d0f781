#include "locpriv/neural.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <utility>

namespace locpriv::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

CMapMat as_matrix(const Tensor& t) {
    return CMapMat(t.data.data(), static_cast<Eigen::Index>(t.rows()),
                   static_cast<Eigen::Index>(t.cols()));
}

MapMat as_matrix(Tensor& t) {
    return MapMat(t.data.data(), static_cast<Eigen::Index>(t.rows()),
                  static_cast<Eigen::Index>(t.cols()));
}

// 1-D tensors map to a single row; used for biases.
Eigen::Map<const Eigen::RowVectorXd> as_row(const Tensor& t) {
    if (t.shape.size() != 1) {
        throw ShapeMismatch("expected a 1-D tensor, got rank " + std::to_string(t.shape.size()));
    }
    return Eigen::Map<const Eigen::RowVectorXd>(t.data.data(),
                                                static_cast<Eigen::Index>(t.shape[0]));
}

Eigen::Map<Eigen::RowVectorXd> as_row(Tensor& t) {
    if (t.shape.size() != 1) {
        throw ShapeMismatch("expected a 1-D tensor, got rank " + std::to_string(t.shape.size()));
    }
    return Eigen::Map<Eigen::RowVectorXd>(t.data.data(), static_cast<Eigen::Index>(t.shape[0]));
}

void require_matrix(const Tensor& t, const char* what) {
    if (!t.is_matrix()) {
        throw ShapeMismatch(std::string(what) + ": expected a 2-D tensor, got rank " +
                            std::to_string(t.shape.size()));
    }
}

double stable_sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

constexpr double kLogFloor = 1e-12;

}  // namespace

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(std::vector<std::size_t> dims) {
    Tensor t;
    std::size_t n = dims.empty() ? 0 : 1;
    for (std::size_t d : dims) n *= d;
    t.shape = std::move(dims);
    t.data.assign(n, 0.0);
    return t;
}

Tensor Tensor::from_rows(const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) {
        throw ShapeMismatch("from_rows: no rows given");
    }
    const std::size_t n_cols = rows.front().size();
    Tensor t = zeros({rows.size(), n_cols});
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != n_cols) {
            throw ShapeMismatch("from_rows: ragged row " + std::to_string(r));
        }
        std::copy(rows[r].begin(), rows[r].end(), t.data.begin() + r * n_cols);
    }
    return t;
}

std::size_t Tensor::numel() const {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return shape.empty() ? 0 : n;
}

std::size_t Tensor::rows() const {
    if (!is_matrix()) {
        throw ShapeMismatch("rows(): tensor is not 2-D");
    }
    return shape[0];
}

std::size_t Tensor::cols() const {
    if (!is_matrix()) {
        throw ShapeMismatch("cols(): tensor is not 2-D");
    }
    return shape[1];
}

double Tensor::at(std::size_t r, std::size_t c) const {
    if (r >= rows() || c >= cols()) {
        throw ShapeMismatch("at(): index out of range");
    }
    return data[r * shape[1] + c];
}

double& Tensor::at(std::size_t r, std::size_t c) {
    if (r >= rows() || c >= cols()) {
        throw ShapeMismatch("at(): index out of range");
    }
    return data[r * shape[1] + c];
}

void Tensor::ensure_finite(const char* what) const {
    for (double v : data) {
        if (!std::isfinite(v)) {
            throw NonFinite(std::string(what) + ": non-finite value encountered");
        }
    }
}

void Tensor::fill(double value) {
    std::fill(data.begin(), data.end(), value);
}

// ---------------------------------------------------------------------------
// ParameterStore
// ---------------------------------------------------------------------------

ParameterStore::ParameterStore(AdamConfig config) : config_(config) {}

Tensor& ParameterStore::create(const std::string& name, std::vector<std::size_t> dims) {
    if (slots_.count(name) != 0) {
        throw ConfigError("parameter '" + name + "' already exists");
    }
    Slot slot;
    slot.value = Tensor::zeros(dims);
    slot.grad = Tensor::zeros(dims);
    slot.moment1 = Tensor::zeros(dims);
    slot.moment2 = Tensor::zeros(std::move(dims));
    auto [it, inserted] = slots_.emplace(name, std::move(slot));
    (void)inserted;
    return it->second.value;
}

bool ParameterStore::has(const std::string& name) const {
    return slots_.count(name) != 0;
}

Tensor& ParameterStore::param(const std::string& name) {
    auto it = slots_.find(name);
    if (it == slots_.end()) {
        throw UnknownParameter("no parameter named '" + name + "'");
    }
    return it->second.value;
}

const Tensor& ParameterStore::param(const std::string& name) const {
    auto it = slots_.find(name);
    if (it == slots_.end()) {
        throw UnknownParameter("no parameter named '" + name + "'");
    }
    return it->second.value;
}

Tensor& ParameterStore::grad(const std::string& name) {
    auto it = slots_.find(name);
    if (it == slots_.end()) {
        throw UnknownParameter("no parameter named '" + name + "'");
    }
    return it->second.grad;
}

const Tensor& ParameterStore::grad(const std::string& name) const {
    auto it = slots_.find(name);
    if (it == slots_.end()) {
        throw UnknownParameter("no parameter named '" + name + "'");
    }
    return it->second.grad;
}

void ParameterStore::zero_grad() {
    for (auto& [name, slot] : slots_) {
        slot.grad.fill(0.0);
    }
}

void ParameterStore::step() {
    // Validate every gradient before touching any parameter, so a bad
    // gradient leaves the whole store unchanged.
    for (const auto& [name, slot] : slots_) {
        for (double g : slot.grad.data) {
            if (!std::isfinite(g)) {
                throw NonFinite("gradient of '" + name + "' is non-finite; step aborted");
            }
        }
    }
    steps_ += 1;
    const double lr = config_.learning_rate;
    const double b1 = config_.beta1;
    const double b2 = config_.beta2;
    const double correction1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
    const double correction2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
    for (auto& [name, slot] : slots_) {
        for (std::size_t i = 0; i < slot.value.data.size(); ++i) {
            const double g = slot.grad.data[i];
            double& m = slot.moment1.data[i];
            double& v = slot.moment2.data[i];
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            const double m_hat = m / correction1;
            const double v_hat = v / correction2;
            slot.value.data[i] -= lr * m_hat / (std::sqrt(v_hat) + config_.epsilon);
        }
    }
}

std::vector<std::string> ParameterStore::names() const {
    std::vector<std::string> out;
    out.reserve(slots_.size());
    for (const auto& [name, slot] : slots_) {
        out.push_back(name);
    }
    return out;
}

void init_uniform(Tensor& t, std::size_t fan_in, Rng& rng) {
    if (fan_in == 0) {
        throw ConfigError("init_uniform: fan_in must be positive");
    }
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (double& v : t.data) {
        v = rng.uniform(-bound, bound);
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[4] = {'L', 'P', 'N', 'N'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void write_pod(std::ofstream& out, const T& value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
void read_pod(std::ifstream& in, T& value) {
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in) {
        throw IoError("checkpoint: truncated file");
    }
}

}  // namespace

void save_checkpoint(const ParameterStore& store, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open '" + path + "' for writing");
    }
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    write_pod(out, kCheckpointVersion);
    const auto names = store.names();
    write_pod(out, static_cast<std::uint64_t>(names.size()));
    for (const auto& name : names) {
        const Tensor& value = store.param(name);
        write_pod(out, static_cast<std::uint64_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_pod(out, static_cast<std::uint64_t>(value.shape.size()));
        for (std::size_t d : value.shape) {
            write_pod(out, static_cast<std::uint64_t>(d));
        }
        out.write(reinterpret_cast<const char*>(value.data.data()),
                  static_cast<std::streamsize>(value.data.size() * sizeof(double)));
    }
    if (!out) {
        throw IoError("checkpoint: failed writing '" + path + "'");
    }
}

void load_checkpoint(ParameterStore& store, const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open '" + path + "' for reading");
    }
    char magic[4];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
        throw IoError("checkpoint: bad magic in '" + path + "'");
    }
    std::uint32_t version = 0;
    read_pod(in, version);
    if (version != kCheckpointVersion) {
        throw IoError("checkpoint: unsupported format version " + std::to_string(version));
    }
    std::uint64_t count = 0;
    read_pod(in, count);
    if (count != store.size()) {
        throw ConfigError("checkpoint: holds " + std::to_string(count) + " parameters, store has " +
                          std::to_string(store.size()));
    }
    for (std::uint64_t entry = 0; entry < count; ++entry) {
        std::uint64_t name_len = 0;
        read_pod(in, name_len);
        std::string name(name_len, '\0');
        in.read(name.data(), static_cast<std::streamsize>(name_len));
        if (!in) {
            throw IoError("checkpoint: truncated file");
        }
        if (!store.has(name)) {
            throw ConfigError("checkpoint: unknown parameter '" + name + "'");
        }
        std::uint64_t rank = 0;
        read_pod(in, rank);
        std::vector<std::size_t> dims(rank);
        for (auto& d : dims) {
            std::uint64_t v = 0;
            read_pod(in, v);
            d = static_cast<std::size_t>(v);
        }
        Tensor& target = store.param(name);
        if (target.shape != dims) {
            throw ShapeMismatch("checkpoint: parameter '" + name + "' has a different shape");
        }
        in.read(reinterpret_cast<char*>(target.data.data()),
                static_cast<std::streamsize>(target.data.size() * sizeof(double)));
        if (!in) {
            throw IoError("checkpoint: truncated file");
        }
        store.grad(name).fill(0.0);
    }
}

// ---------------------------------------------------------------------------
// Activations and losses
// ---------------------------------------------------------------------------

Tensor softmax_rows(const Tensor& logits) {
    require_matrix(logits, "softmax_rows");
    if (logits.cols() == 0) {
        throw ShapeMismatch("softmax_rows: rows must have at least one column");
    }
    logits.ensure_finite("softmax_rows input");
    Tensor out = Tensor::zeros(logits.shape);
    const std::size_t n_cols = logits.cols();
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        const double* in_row = logits.data.data() + r * n_cols;
        double* out_row = out.data.data() + r * n_cols;
        const double row_max = *std::max_element(in_row, in_row + n_cols);
        double total = 0.0;
        for (std::size_t c = 0; c < n_cols; ++c) {
            out_row[c] = std::exp(in_row[c] - row_max);
            total += out_row[c];
        }
        for (std::size_t c = 0; c < n_cols; ++c) {
            out_row[c] /= total;
        }
    }
    return out;
}

Tensor sigmoid(const Tensor& x) {
    Tensor out = x;
    for (double& v : out.data) {
        v = stable_sigmoid(v);
    }
    return out;
}

namespace {

// Targets must be one-hot per row; all-zero rows are padding.  Returns the
// target column or -1 for a padding row.
long target_column(const Tensor& one_hot, std::size_t r) {
    long hit = -1;
    for (std::size_t c = 0; c < one_hot.cols(); ++c) {
        const double v = one_hot.at(r, c);
        if (v == 0.0) {
            continue;
        }
        if (v != 1.0 || hit >= 0) {
            throw ConfigError("cross_entropy: target row " + std::to_string(r) +
                              " is not one-hot");
        }
        hit = static_cast<long>(c);
    }
    return hit;
}

}  // namespace

CrossEntropyResult cross_entropy_from_logits(const Tensor& logits, const Tensor& one_hot) {
    require_matrix(logits, "cross_entropy");
    require_matrix(one_hot, "cross_entropy targets");
    if (!logits.same_shape(one_hot)) {
        throw ShapeMismatch("cross_entropy: logits and targets differ in shape");
    }
    CrossEntropyResult result;
    result.grad_logits = Tensor::zeros(logits.shape);
    const Tensor probs = softmax_rows(logits);
    const std::size_t n_cols = logits.cols();
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        const long target = target_column(one_hot, r);
        if (target < 0) {
            continue;  // padding row
        }
        double p = probs.at(r, static_cast<std::size_t>(target));
        if (p < kLogFloor) {
            p = kLogFloor;
            result.clamp_count += 1;
        }
        result.loss -= std::log(p);
        for (std::size_t c = 0; c < n_cols; ++c) {
            result.grad_logits.at(r, c) = probs.at(r, c) - one_hot.at(r, c);
        }
    }
    if (!std::isfinite(result.loss)) {
        throw NonFinite("cross_entropy: loss is non-finite");
    }
    return result;
}

CrossEntropyLoss cross_entropy_from_probs(const Tensor& probs, const Tensor& one_hot) {
    require_matrix(probs, "cross_entropy");
    require_matrix(one_hot, "cross_entropy targets");
    if (!probs.same_shape(one_hot)) {
        throw ShapeMismatch("cross_entropy: probabilities and targets differ in shape");
    }
    CrossEntropyLoss result;
    for (std::size_t r = 0; r < probs.rows(); ++r) {
        const long target = target_column(one_hot, r);
        if (target < 0) {
            continue;
        }
        double p = probs.at(r, static_cast<std::size_t>(target));
        if (p < kLogFloor) {
            p = kLogFloor;
            result.clamp_count += 1;
        }
        result.loss -= std::log(p);
    }
    if (!std::isfinite(result.loss)) {
        throw NonFinite("cross_entropy: loss is non-finite");
    }
    return result;
}

// ---------------------------------------------------------------------------
// Positional encodings
// ---------------------------------------------------------------------------

Tensor positional_encoding(std::size_t n_positions, std::size_t dim) {
    if (dim % 2 != 0) {
        throw OddDimension("positional_encoding: dimension must be even, got " +
                           std::to_string(dim));
    }
    Tensor pe = Tensor::zeros({n_positions, dim});
    for (std::size_t pos = 0; pos < n_positions; ++pos) {
        for (std::size_t i = 0; 2 * i < dim; ++i) {
            const double wavelength =
                std::pow(10000.0, (2.0 * static_cast<double>(i)) / static_cast<double>(dim));
            const double angle = static_cast<double>(pos) / wavelength;
            pe.at(pos, 2 * i) = std::sin(angle);
            pe.at(pos, 2 * i + 1) = std::cos(angle);
        }
    }
    return pe;
}

// ---------------------------------------------------------------------------
// LstmStack
// ---------------------------------------------------------------------------

namespace {

// Column blocks of the packed gate matrices, in order.
enum GateBlock : std::size_t { kForget = 0, kInput = 1, kCandidate = 2, kOutput = 3 };

}  // namespace

LstmStack::LstmStack(const LstmConfig& config, ParameterStore& store, std::string prefix, Rng& rng)
    : config_(config), store_(&store), prefix_(std::move(prefix)) {
    if (config_.input_dim == 0 || config_.hidden_dim == 0 || config_.layers == 0) {
        throw ConfigError("LstmStack: input_dim, hidden_dim and layers must be positive");
    }
    const std::size_t h = config_.hidden_dim;
    const std::size_t n_dirs = config_.bidirectional ? 2 : 1;
    for (std::size_t layer = 0; layer < config_.layers; ++layer) {
        const std::size_t d_in = layer == 0 ? config_.input_dim : h * n_dirs;
        for (std::size_t dir = 0; dir < n_dirs; ++dir) {
            const bool bw = dir == 1;
            Tensor& w = store_->create(param_name(layer, bw, "W"), {d_in, 4 * h});
            init_uniform(w, d_in, rng);
            Tensor& u = store_->create(param_name(layer, bw, "U"), {h, 4 * h});
            init_uniform(u, h, rng);
            store_->create(param_name(layer, bw, "b"), {4 * h});  // biases start at zero
        }
    }
}

std::size_t LstmStack::output_dim() const {
    return config_.hidden_dim * (config_.bidirectional ? 2 : 1);
}

std::string LstmStack::param_name(std::size_t layer, bool backward_dir, const char* which) const {
    return prefix_ + ".l" + std::to_string(layer) + (backward_dir ? ".bw." : ".fw.") + which;
}

Tensor LstmStack::forward(const Tensor& inputs) {
    require_matrix(inputs, "lstm forward");
    if (inputs.rows() == 0) {
        throw ShapeMismatch("lstm forward: empty sequence");
    }
    if (inputs.cols() != config_.input_dim) {
        throw ShapeMismatch("lstm forward: input width " + std::to_string(inputs.cols()) +
                            ", expected " + std::to_string(config_.input_dim));
    }
    inputs.ensure_finite("lstm inputs");

    const std::size_t T = inputs.rows();
    const std::size_t h = config_.hidden_dim;
    const std::size_t n_dirs = config_.bidirectional ? 2 : 1;
    caches_.assign(config_.layers, LayerCache{});

    Tensor layer_input = inputs;
    for (std::size_t layer = 0; layer < config_.layers; ++layer) {
        LayerCache& cache = caches_[layer];
        cache.input = layer_input;
        Tensor layer_output = Tensor::zeros({T, h * n_dirs});

        for (std::size_t dir = 0; dir < n_dirs; ++dir) {
            const bool bw = dir == 1;
            DirectionCache& dc = bw ? cache.bw : cache.fw;
            dc.f = Tensor::zeros({T, h});
            dc.i = Tensor::zeros({T, h});
            dc.g = Tensor::zeros({T, h});
            dc.o = Tensor::zeros({T, h});
            dc.c = Tensor::zeros({T, h});
            dc.tanh_c = Tensor::zeros({T, h});
            dc.h = Tensor::zeros({T, h});

            const Tensor& w = store_->param(param_name(layer, bw, "W"));
            const Tensor& u = store_->param(param_name(layer, bw, "U"));
            const Tensor& b = store_->param(param_name(layer, bw, "b"));

            // Input projections for the whole sequence in one product; the
            // recurrent part has to run step by step.
            RowMat pre = as_matrix(layer_input) * as_matrix(w);
            pre.rowwise() += as_row(b);

            CMapMat u_map = as_matrix(u);
            Eigen::RowVectorXd prev_h = Eigen::RowVectorXd::Zero(static_cast<Eigen::Index>(h));
            Eigen::RowVectorXd prev_c = Eigen::RowVectorXd::Zero(static_cast<Eigen::Index>(h));
            Eigen::RowVectorXd gates(static_cast<Eigen::Index>(4 * h));

            for (std::size_t step = 0; step < T; ++step) {
                const std::size_t t = bw ? T - 1 - step : step;
                gates = pre.row(static_cast<Eigen::Index>(t));
                if (step > 0) {
                    gates.noalias() += prev_h * u_map;
                }
                double* f_row = dc.f.data.data() + t * h;
                double* i_row = dc.i.data.data() + t * h;
                double* g_row = dc.g.data.data() + t * h;
                double* o_row = dc.o.data.data() + t * h;
                double* c_row = dc.c.data.data() + t * h;
                double* tc_row = dc.tanh_c.data.data() + t * h;
                double* h_row = dc.h.data.data() + t * h;
                for (std::size_t j = 0; j < h; ++j) {
                    const double f = stable_sigmoid(gates(static_cast<Eigen::Index>(kForget * h + j)));
                    const double i = stable_sigmoid(gates(static_cast<Eigen::Index>(kInput * h + j)));
                    const double g = std::tanh(gates(static_cast<Eigen::Index>(kCandidate * h + j)));
                    const double o = stable_sigmoid(gates(static_cast<Eigen::Index>(kOutput * h + j)));
                    const double c = f * prev_c(static_cast<Eigen::Index>(j)) + i * g;
                    const double tc = std::tanh(c);
                    f_row[j] = f;
                    i_row[j] = i;
                    g_row[j] = g;
                    o_row[j] = o;
                    c_row[j] = c;
                    tc_row[j] = tc;
                    h_row[j] = o * tc;
                    prev_c(static_cast<Eigen::Index>(j)) = c;
                    prev_h(static_cast<Eigen::Index>(j)) = h_row[j];
                }
            }

            // Place this direction's hidden states into the layer output.
            for (std::size_t t = 0; t < T; ++t) {
                std::copy(dc.h.data.begin() + t * h, dc.h.data.begin() + (t + 1) * h,
                          layer_output.data.begin() + t * (h * n_dirs) + dir * h);
            }
        }
        layer_input = std::move(layer_output);
    }

    layer_input.ensure_finite("lstm output");
    have_cache_ = true;
    return layer_input;
}

Tensor LstmStack::backward(const Tensor& grad_output, bool want_input_grad) {
    if (!have_cache_) {
        throw ConfigError("lstm backward called before forward");
    }
    require_matrix(grad_output, "lstm backward");
    const std::size_t T = caches_.front().input.rows();
    const std::size_t h = config_.hidden_dim;
    const std::size_t n_dirs = config_.bidirectional ? 2 : 1;
    if (grad_output.rows() != T || grad_output.cols() != h * n_dirs) {
        throw ShapeMismatch("lstm backward: gradient shape does not match forward output");
    }

    Tensor upstream = grad_output;  // gradient w.r.t. the current layer's output
    for (std::size_t layer_plus = config_.layers; layer_plus-- > 0;) {
        const std::size_t layer = layer_plus;
        const LayerCache& cache = caches_[layer];
        const std::size_t d_in = cache.input.cols();
        const bool need_dx = want_input_grad || layer > 0;
        Tensor d_input = Tensor::zeros({T, d_in});

        for (std::size_t dir = 0; dir < n_dirs; ++dir) {
            const bool bw = dir == 1;
            const DirectionCache& dc = bw ? cache.bw : cache.fw;
            const Tensor& w = store_->param(param_name(layer, bw, "W"));
            const Tensor& u = store_->param(param_name(layer, bw, "U"));
            CMapMat w_map = as_matrix(w);
            CMapMat u_map = as_matrix(u);
            MapMat dw = as_matrix(store_->grad(param_name(layer, bw, "W")));
            MapMat du = as_matrix(store_->grad(param_name(layer, bw, "U")));
            auto db = as_row(store_->grad(param_name(layer, bw, "b")));
            CMapMat x_map = as_matrix(cache.input);
            MapMat dx_map = as_matrix(d_input);

            Eigen::RowVectorXd carry_dh = Eigen::RowVectorXd::Zero(static_cast<Eigen::Index>(h));
            Eigen::RowVectorXd carry_dc = Eigen::RowVectorXd::Zero(static_cast<Eigen::Index>(h));
            Eigen::RowVectorXd da(static_cast<Eigen::Index>(4 * h));

            // Walk the recurrence in reverse: for the backward direction the
            // recurrence itself ran from T-1 down to 0, so its reverse runs up.
            for (std::size_t step = T; step-- > 0;) {
                const std::size_t t = bw ? T - 1 - step : step;
                const bool has_prev = step > 0;
                const std::size_t t_prev = bw ? t + 1 : t - 1;

                const double* f_row = dc.f.data.data() + t * h;
                const double* i_row = dc.i.data.data() + t * h;
                const double* g_row = dc.g.data.data() + t * h;
                const double* o_row = dc.o.data.data() + t * h;
                const double* tc_row = dc.tanh_c.data.data() + t * h;
                const double* c_prev_row = has_prev ? dc.c.data.data() + t_prev * h : nullptr;

                for (std::size_t j = 0; j < h; ++j) {
                    const double dh = upstream.at(t, dir * h + j) + carry_dh(static_cast<Eigen::Index>(j));
                    const double f = f_row[j];
                    const double i = i_row[j];
                    const double g = g_row[j];
                    const double o = o_row[j];
                    const double tc = tc_row[j];
                    const double c_prev = has_prev ? c_prev_row[j] : 0.0;

                    const double d_o = dh * tc;
                    double dc_total = carry_dc(static_cast<Eigen::Index>(j)) + dh * o * (1.0 - tc * tc);
                    const double d_f = dc_total * c_prev;
                    const double d_i = dc_total * g;
                    const double d_g = dc_total * i;
                    carry_dc(static_cast<Eigen::Index>(j)) = dc_total * f;

                    da(static_cast<Eigen::Index>(kForget * h + j)) = d_f * f * (1.0 - f);
                    da(static_cast<Eigen::Index>(kInput * h + j)) = d_i * i * (1.0 - i);
                    da(static_cast<Eigen::Index>(kCandidate * h + j)) = d_g * (1.0 - g * g);
                    da(static_cast<Eigen::Index>(kOutput * h + j)) = d_o * o * (1.0 - o);
                }

                dw.noalias() += x_map.row(static_cast<Eigen::Index>(t)).transpose() * da;
                db += da;
                if (has_prev) {
                    du.noalias() +=
                        CMapMat(dc.h.data.data() + t_prev * h, 1, static_cast<Eigen::Index>(h))
                            .transpose() *
                        da;
                    carry_dh.noalias() = da * u_map.transpose();
                }
                if (need_dx) {
                    dx_map.row(static_cast<Eigen::Index>(t)).noalias() += da * w_map.transpose();
                }
            }
        }
        upstream = std::move(d_input);
    }
    return upstream;
}

// ---------------------------------------------------------------------------
// AttentionBlock
// ---------------------------------------------------------------------------

AttentionBlock::AttentionBlock(const AttentionConfig& config, ParameterStore& store,
                               std::string prefix, Rng& rng)
    : config_(config), store_(&store), prefix_(std::move(prefix)) {
    if (config_.model_dim == 0 || config_.heads == 0 || config_.n_outputs == 0) {
        throw ConfigError("AttentionBlock: model_dim, heads and n_outputs must be positive");
    }
    if (config_.model_dim % config_.heads != 0) {
        throw ConfigError("AttentionBlock: model_dim " + std::to_string(config_.model_dim) +
                          " is not divisible by " + std::to_string(config_.heads) + " heads");
    }
    const std::size_t g = config_.model_dim;
    const std::size_t g_k = g / config_.heads;
    for (std::size_t head = 0; head < config_.heads; ++head) {
        const std::string base = prefix_ + ".h" + std::to_string(head) + ".";
        for (const char* which : {"Wq", "Wk", "Wv"}) {
            Tensor& m = store_->create(base + which, {g, g_k});
            init_uniform(m, g, rng);
        }
    }
    Tensor& wo = store_->create(prefix_ + ".Wo", {g, g});
    init_uniform(wo, g, rng);
    Tensor& wfc = store_->create(prefix_ + ".Wfc", {g, config_.n_outputs});
    init_uniform(wfc, g, rng);
    store_->create(prefix_ + ".bfc", {config_.n_outputs});  // bias starts at zero
}

AttentionBlock::Output AttentionBlock::forward(const Tensor& inputs) {
    require_matrix(inputs, "attention forward");
    if (inputs.rows() == 0) {
        throw ShapeMismatch("attention forward: empty sequence");
    }
    if (inputs.cols() != config_.model_dim) {
        throw ShapeMismatch("attention forward: input width " + std::to_string(inputs.cols()) +
                            ", expected " + std::to_string(config_.model_dim));
    }
    inputs.ensure_finite("attention inputs");

    const std::size_t n = inputs.rows();
    const std::size_t g = config_.model_dim;
    const std::size_t g_k = g / config_.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(g_k));

    input_ = inputs;
    q_.assign(config_.heads, Tensor{});
    k_.assign(config_.heads, Tensor{});
    v_.assign(config_.heads, Tensor{});
    attn_.assign(config_.heads, Tensor{});
    concat_ = Tensor::zeros({n, g});

    CMapMat x = as_matrix(std::as_const(input_));
    for (std::size_t head = 0; head < config_.heads; ++head) {
        const std::string base = prefix_ + ".h" + std::to_string(head) + ".";
        q_[head] = Tensor::zeros({n, g_k});
        k_[head] = Tensor::zeros({n, g_k});
        v_[head] = Tensor::zeros({n, g_k});
        as_matrix(q_[head]).noalias() = x * as_matrix(store_->param(base + "Wq"));
        as_matrix(k_[head]).noalias() = x * as_matrix(store_->param(base + "Wk"));
        as_matrix(v_[head]).noalias() = x * as_matrix(store_->param(base + "Wv"));

        // Causal scaled dot-product: row r may only attend to columns <= r,
        // so the softmax for row r runs over its first r+1 scores.
        Tensor& attn = attn_[head];
        attn = Tensor::zeros({n, n});
        RowMat scores = as_matrix(q_[head]) * as_matrix(k_[head]).transpose() * scale;
        for (std::size_t r = 0; r < n; ++r) {
            const auto visible = static_cast<Eigen::Index>(r + 1);
            const auto row = scores.row(static_cast<Eigen::Index>(r)).head(visible);
            const double row_max = row.maxCoeff();
            double total = 0.0;
            for (Eigen::Index c = 0; c < visible; ++c) {
                const double e = std::exp(row(c) - row_max);
                attn.at(r, static_cast<std::size_t>(c)) = e;
                total += e;
            }
            for (Eigen::Index c = 0; c < visible; ++c) {
                attn.at(r, static_cast<std::size_t>(c)) /= total;
            }
        }

        RowMat head_out = as_matrix(attn) * as_matrix(v_[head]);
        as_matrix(concat_).middleCols(static_cast<Eigen::Index>(head * g_k),
                                      static_cast<Eigen::Index>(g_k)) = head_out;
    }

    projected_ = Tensor::zeros({n, g});
    as_matrix(projected_).noalias() = as_matrix(concat_) * as_matrix(store_->param(prefix_ + ".Wo"));

    Output out;
    out.logits = Tensor::zeros({n, config_.n_outputs});
    as_matrix(out.logits).noalias() =
        as_matrix(projected_) * as_matrix(store_->param(prefix_ + ".Wfc"));
    as_matrix(out.logits).rowwise() += as_row(store_->param(prefix_ + ".bfc"));
    out.logits.ensure_finite("attention logits");
    out.probs = softmax_rows(out.logits);
    probs_ = out.probs;
    have_cache_ = true;
    return out;
}

Tensor AttentionBlock::backward(const Tensor& grad_logits) {
    if (!have_cache_) {
        throw ConfigError("attention backward called before forward");
    }
    require_matrix(grad_logits, "attention backward");
    const std::size_t n = input_.rows();
    if (grad_logits.rows() != n || grad_logits.cols() != config_.n_outputs) {
        throw ShapeMismatch("attention backward: gradient shape does not match logits");
    }

    const std::size_t g = config_.model_dim;
    const std::size_t g_k = g / config_.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(g_k));

    CMapMat x = as_matrix(std::as_const(input_));
    CMapMat d_logits = as_matrix(grad_logits);

    // FC head.
    as_matrix(store_->grad(prefix_ + ".Wfc")).noalias() += as_matrix(projected_).transpose() * d_logits;
    as_row(store_->grad(prefix_ + ".bfc")) += d_logits.colwise().sum();
    RowMat d_projected = d_logits * as_matrix(store_->param(prefix_ + ".Wfc")).transpose();

    // Output projection.
    as_matrix(store_->grad(prefix_ + ".Wo")).noalias() += as_matrix(concat_).transpose() * d_projected;
    RowMat d_concat = d_projected * as_matrix(store_->param(prefix_ + ".Wo")).transpose();

    Tensor d_input = Tensor::zeros({n, g});
    MapMat dx = as_matrix(d_input);

    for (std::size_t head = 0; head < config_.heads; ++head) {
        const std::string base = prefix_ + ".h" + std::to_string(head) + ".";
        CMapMat attn = as_matrix(std::as_const(attn_[head]));
        CMapMat q = as_matrix(std::as_const(q_[head]));
        CMapMat k = as_matrix(std::as_const(k_[head]));
        CMapMat v = as_matrix(std::as_const(v_[head]));

        RowMat d_head = d_concat.middleCols(static_cast<Eigen::Index>(head * g_k),
                                            static_cast<Eigen::Index>(g_k));
        RowMat d_attn = d_head * v.transpose();
        RowMat d_v = attn.transpose() * d_head;

        // Softmax backward row by row; masked-out columns have zero attention
        // weight, which zeroes their gradient automatically.
        RowMat d_scores(attn.rows(), attn.cols());
        for (Eigen::Index r = 0; r < attn.rows(); ++r) {
            const double dot = (d_attn.row(r).array() * attn.row(r).array()).sum();
            d_scores.row(r) = attn.row(r).array() * (d_attn.row(r).array() - dot);
        }
        d_scores *= scale;

        RowMat d_q = d_scores * k;
        RowMat d_k = d_scores.transpose() * q;

        as_matrix(store_->grad(base + "Wq")).noalias() += x.transpose() * d_q;
        as_matrix(store_->grad(base + "Wk")).noalias() += x.transpose() * d_k;
        as_matrix(store_->grad(base + "Wv")).noalias() += x.transpose() * d_v;
        dx.noalias() += d_q * as_matrix(store_->param(base + "Wq")).transpose();
        dx.noalias() += d_k * as_matrix(store_->param(base + "Wk")).transpose();
        dx.noalias() += d_v * as_matrix(store_->param(base + "Wv")).transpose();
    }
    return d_input;
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

Linear::Linear(std::size_t in_dim, std::size_t out_dim, ParameterStore& store, std::string prefix,
               Rng& rng)
    : in_dim_(in_dim), out_dim_(out_dim), store_(&store), prefix_(std::move(prefix)) {
    if (in_dim_ == 0 || out_dim_ == 0) {
        throw ConfigError("Linear: dimensions must be positive");
    }
    Tensor& w = store_->create(prefix_ + ".W", {in_dim_, out_dim_});
    init_uniform(w, in_dim_, rng);
    store_->create(prefix_ + ".b", {out_dim_});
}

Tensor Linear::forward(const Tensor& inputs) {
    require_matrix(inputs, "linear forward");
    if (inputs.cols() != in_dim_) {
        throw ShapeMismatch("linear forward: input width " + std::to_string(inputs.cols()) +
                            ", expected " + std::to_string(in_dim_));
    }
    input_ = inputs;
    have_cache_ = true;
    Tensor out = Tensor::zeros({inputs.rows(), out_dim_});
    as_matrix(out).noalias() = as_matrix(inputs) * as_matrix(store_->param(prefix_ + ".W"));
    as_matrix(out).rowwise() += as_row(store_->param(prefix_ + ".b"));
    out.ensure_finite("linear output");
    return out;
}

Tensor Linear::backward(const Tensor& grad_output) {
    if (!have_cache_) {
        throw ConfigError("linear backward called before forward");
    }
    require_matrix(grad_output, "linear backward");
    if (grad_output.rows() != input_.rows() || grad_output.cols() != out_dim_) {
        throw ShapeMismatch("linear backward: gradient shape does not match forward output");
    }
    CMapMat d_out = as_matrix(grad_output);
    as_matrix(store_->grad(prefix_ + ".W")).noalias() += as_matrix(input_).transpose() * d_out;
    as_row(store_->grad(prefix_ + ".b")) += d_out.colwise().sum();
    Tensor d_input = Tensor::zeros(input_.shape);
    as_matrix(d_input).noalias() = d_out * as_matrix(store_->param(prefix_ + ".W")).transpose();
    return d_input;
}

// ---------------------------------------------------------------------------
// Graph convolution
// ---------------------------------------------------------------------------

Tensor gcn_normalized_adjacency(const Tensor& adjacency) {
    require_matrix(adjacency, "gcn adjacency");
    const std::size_t n = adjacency.rows();
    if (adjacency.cols() != n) {
        throw ShapeMismatch("gcn adjacency: matrix must be square");
    }
    Tensor norm = adjacency;
    for (std::size_t i = 0; i < n; ++i) {
        norm.at(i, i) += 1.0;  // self-loops keep every degree positive
    }
    std::vector<double> inv_sqrt_degree(n);
    for (std::size_t i = 0; i < n; ++i) {
        double degree = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double e = norm.at(i, j);
            if (e < 0.0) {
                throw ConfigError("gcn adjacency: negative entry at (" + std::to_string(i) + ", " +
                                  std::to_string(j) + ")");
            }
            degree += e;
        }
        inv_sqrt_degree[i] = 1.0 / std::sqrt(degree);
    }
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            norm.at(i, j) *= inv_sqrt_degree[i] * inv_sqrt_degree[j];
        }
    }
    return norm;
}

Tensor gcn_layer(const Tensor& norm_adj, const Tensor& input, const Tensor& theta,
                 GcnCache* cache) {
    require_matrix(norm_adj, "gcn layer");
    require_matrix(input, "gcn layer input");
    require_matrix(theta, "gcn layer weights");
    if (norm_adj.cols() != norm_adj.rows() || norm_adj.cols() != input.rows()) {
        throw ShapeMismatch("gcn layer: adjacency and input disagree on the node count");
    }
    if (input.cols() != theta.rows()) {
        throw ShapeMismatch("gcn layer: input width does not match the weight matrix");
    }
    Tensor agg = Tensor::zeros({input.rows(), input.cols()});
    as_matrix(agg).noalias() = as_matrix(norm_adj) * as_matrix(input);
    Tensor pre = Tensor::zeros({input.rows(), theta.cols()});
    as_matrix(pre).noalias() = as_matrix(agg) * as_matrix(theta);
    Tensor out = sigmoid(pre);
    out.ensure_finite("gcn output");
    if (cache != nullptr) {
        cache->norm_adj = norm_adj;
        cache->agg = std::move(agg);
        cache->output = out;
    }
    return out;
}

GcnGrads gcn_backward(const GcnCache& cache, const Tensor& theta, const Tensor& grad_output) {
    require_matrix(grad_output, "gcn backward");
    if (!grad_output.same_shape(cache.output)) {
        throw ShapeMismatch("gcn backward: gradient shape does not match forward output");
    }
    // d(pre) = d(out) .* sigmoid'(pre), with sigmoid' recovered from the output.
    Tensor d_pre = Tensor::zeros(grad_output.shape);
    for (std::size_t idx = 0; idx < d_pre.data.size(); ++idx) {
        const double s = cache.output.data[idx];
        d_pre.data[idx] = grad_output.data[idx] * s * (1.0 - s);
    }
    GcnGrads grads;
    grads.d_theta = Tensor::zeros(theta.shape);
    as_matrix(grads.d_theta).noalias() = as_matrix(cache.agg).transpose() * as_matrix(d_pre);
    grads.d_input = Tensor::zeros({cache.agg.rows(), cache.agg.cols()});
    as_matrix(grads.d_input).noalias() = as_matrix(cache.norm_adj).transpose() *
                                         (as_matrix(d_pre) * as_matrix(theta).transpose());
    return grads;
}

}  // namespace locpriv::nn
