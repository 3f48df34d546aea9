#include "bidsim/net.hpp"

#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace bidsim {

namespace {

double apply_act(Activation act, double z) {
    switch (act) {
        case Activation::Identity: return z;
        case Activation::Tanh: return std::tanh(z);
        case Activation::Sigmoid: return 1.0 / (1.0 + std::exp(-z));
        case Activation::Relu: return z > 0.0 ? z : 0.0;
    }
    return z;
}

// Derivative expressed through the activated value.
double act_deriv(Activation act, double y) {
    switch (act) {
        case Activation::Identity: return 1.0;
        case Activation::Tanh: return 1.0 - y * y;
        case Activation::Sigmoid: return y * (1.0 - y);
        case Activation::Relu: return y > 0.0 ? 1.0 : 0.0;
    }
    return 1.0;
}

Eigen::MatrixXd apply_act_mat(Activation act, Eigen::MatrixXd z) {
    if (act == Activation::Identity) return z;
    for (Eigen::Index i = 0; i < z.size(); ++i) {
        z.data()[i] = apply_act(act, z.data()[i]);
    }
    return z;
}

Activation layer_activation(const MlpNet& net, std::size_t layer) {
    return layer + 1 == net.weights.size() ? net.output_act : net.hidden_act;
}

}  // namespace

MlpNet MlpNet::make(std::vector<int> sizes, Activation hidden,
                    Activation output, std::uint64_t seed) {
    if (sizes.size() < 2) throw std::invalid_argument("MlpNet needs at least two layer sizes");
    MlpNet net;
    net.layer_sizes = std::move(sizes);
    net.hidden_act = hidden;
    net.output_act = output;
    std::mt19937_64 rng(seed);
    for (std::size_t l = 0; l + 1 < net.layer_sizes.size(); ++l) {
        const int fan_in = net.layer_sizes[l];
        const int fan_out = net.layer_sizes[l + 1];
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        Eigen::MatrixXd w(fan_out, fan_in);
        for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = dist(rng);
        Eigen::VectorXd b(fan_out);
        for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = dist(rng);
        net.weights.push_back(std::move(w));
        net.biases.push_back(std::move(b));
    }
    return net;
}

MlpNet MlpNet::zeros(std::vector<int> sizes, Activation hidden, Activation output) {
    MlpNet net = make(sizes, hidden, output, 0);
    for (auto& w : net.weights) w.setZero();
    for (auto& b : net.biases) b.setZero();
    return net;
}

std::size_t MlpNet::parameter_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < weights.size(); ++l) {
        n += static_cast<std::size_t>(weights[l].size()) + biases[l].size();
    }
    return n;
}

bool MlpNet::same_shape(const MlpNet& other) const {
    return layer_sizes == other.layer_sizes && hidden_act == other.hidden_act &&
           output_act == other.output_act;
}

Eigen::VectorXd forward(const MlpNet& net, const Eigen::VectorXd& input) {
    if (input.size() != net.input_size()) {
        throw std::invalid_argument("forward: input size " + std::to_string(input.size()) +
                                    " does not match first layer " +
                                    std::to_string(net.input_size()));
    }
    Eigen::VectorXd x = input;
    for (std::size_t l = 0; l < net.weights.size(); ++l) {
        Eigen::VectorXd z = net.weights[l] * x + net.biases[l];
        const Activation act = layer_activation(net, l);
        for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = apply_act(act, z(i));
        x = std::move(z);
    }
    return x;
}

Eigen::MatrixXd forward_batch(const MlpNet& net, const Eigen::MatrixXd& input) {
    if (input.cols() != net.input_size()) {
        throw std::invalid_argument("forward_batch: input width " + std::to_string(input.cols()) +
                                    " does not match first layer " +
                                    std::to_string(net.input_size()));
    }
    Eigen::MatrixXd x = input;
    for (std::size_t l = 0; l < net.weights.size(); ++l) {
        Eigen::MatrixXd z = x * net.weights[l].transpose();
        z.rowwise() += net.biases[l].transpose();
        x = apply_act_mat(layer_activation(net, l), std::move(z));
    }
    return x;
}

bool NetGrads::finite() const {
    for (const auto& w : weights) {
        if (!w.allFinite()) return false;
    }
    for (const auto& b : biases) {
        if (!b.allFinite()) return false;
    }
    return true;
}

Tape::NodeId Tape::push(Eigen::MatrixXd value, std::function<void()> backprop) {
    Node node;
    node.grad = Eigen::MatrixXd::Zero(value.rows(), value.cols());
    node.value = std::move(value);
    node.backprop = std::move(backprop);
    nodes_.push_back(std::move(node));
    return static_cast<NodeId>(nodes_.size()) - 1;
}

NetGrads& Tape::grads_slot(const MlpNet& net) {
    auto it = param_grads_.find(&net);
    if (it == param_grads_.end()) {
        NetGrads g;
        for (std::size_t l = 0; l < net.weights.size(); ++l) {
            g.weights.push_back(Eigen::MatrixXd::Zero(net.weights[l].rows(), net.weights[l].cols()));
            g.biases.push_back(Eigen::VectorXd::Zero(net.biases[l].size()));
        }
        it = param_grads_.emplace(&net, std::move(g)).first;
    }
    return it->second;
}

Tape::NodeId Tape::constant(Eigen::MatrixXd value) { return push(std::move(value)); }

Tape::NodeId Tape::forward(const MlpNet& net, NodeId input) {
    if (nodes_.at(input).value.cols() != net.input_size()) {
        throw std::invalid_argument("Tape::forward: input width does not match first layer");
    }
    grads_slot(net);
    NodeId x = input;
    for (std::size_t l = 0; l < net.weights.size(); ++l) {
        const Activation act = layer_activation(net, l);
        Eigen::MatrixXd z = nodes_[x].value * net.weights[l].transpose();
        z.rowwise() += net.biases[l].transpose();
        Eigen::MatrixXd a = apply_act_mat(act, std::move(z));
        const MlpNet* net_ptr = &net;
        NodeId in_id = x;
        NodeId out_id = push(std::move(a), {});
        nodes_[out_id].backprop = [this, net_ptr, l, act, in_id, out_id]() {
            const Node& out = nodes_[out_id];
            Eigen::MatrixXd dz = out.grad;
            if (act != Activation::Identity) {
                for (Eigen::Index i = 0; i < dz.size(); ++i) {
                    dz.data()[i] *= act_deriv(act, out.value.data()[i]);
                }
            }
            NetGrads& pg = param_grads_.at(net_ptr);
            pg.weights[l].noalias() += dz.transpose() * nodes_[in_id].value;
            pg.biases[l].noalias() += dz.colwise().sum().transpose();
            nodes_[in_id].grad.noalias() += dz * net_ptr->weights[l];
        };
        x = out_id;
    }
    return x;
}

Tape::NodeId Tape::concat_cols(std::span<const NodeId> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
    const Eigen::Index rows = nodes_.at(parts[0]).value.rows();
    Eigen::Index cols = 0;
    for (NodeId id : parts) {
        if (nodes_.at(id).value.rows() != rows) {
            throw std::invalid_argument("concat_cols: row mismatch");
        }
        cols += nodes_[id].value.cols();
    }
    Eigen::MatrixXd value(rows, cols);
    Eigen::Index at = 0;
    for (NodeId id : parts) {
        value.middleCols(at, nodes_[id].value.cols()) = nodes_[id].value;
        at += nodes_[id].value.cols();
    }
    std::vector<NodeId> ids(parts.begin(), parts.end());
    NodeId out_id = push(std::move(value), {});
    nodes_[out_id].backprop = [this, ids, out_id]() {
        Eigen::Index at = 0;
        for (NodeId id : ids) {
            const Eigen::Index w = nodes_[id].value.cols();
            nodes_[id].grad += nodes_[out_id].grad.middleCols(at, w);
            at += w;
        }
    };
    return out_id;
}

Tape::NodeId Tape::slice_cols(NodeId source, int first_col, int ncols) {
    const Eigen::MatrixXd& src = nodes_.at(source).value;
    if (first_col < 0 || ncols <= 0 || first_col + ncols > src.cols()) {
        throw std::invalid_argument("slice_cols: out of range");
    }
    NodeId out_id = push(src.middleCols(first_col, ncols), {});
    nodes_[out_id].backprop = [this, source, first_col, ncols, out_id]() {
        nodes_[source].grad.middleCols(first_col, ncols) += nodes_[out_id].grad;
    };
    return out_id;
}

Tape::NodeId Tape::add(NodeId a, NodeId b) {
    NodeId out_id = push(nodes_.at(a).value + nodes_.at(b).value, {});
    nodes_[out_id].backprop = [this, a, b, out_id]() {
        nodes_[a].grad += nodes_[out_id].grad;
        nodes_[b].grad += nodes_[out_id].grad;
    };
    return out_id;
}

Tape::NodeId Tape::sub(NodeId a, NodeId b) {
    NodeId out_id = push(nodes_.at(a).value - nodes_.at(b).value, {});
    nodes_[out_id].backprop = [this, a, b, out_id]() {
        nodes_[a].grad += nodes_[out_id].grad;
        nodes_[b].grad -= nodes_[out_id].grad;
    };
    return out_id;
}

Tape::NodeId Tape::mul(NodeId a, NodeId b) {
    NodeId out_id = push(nodes_.at(a).value.cwiseProduct(nodes_.at(b).value), {});
    nodes_[out_id].backprop = [this, a, b, out_id]() {
        nodes_[a].grad += nodes_[out_id].grad.cwiseProduct(nodes_[b].value);
        nodes_[b].grad += nodes_[out_id].grad.cwiseProduct(nodes_[a].value);
    };
    return out_id;
}

Tape::NodeId Tape::affine(NodeId a, double scale, double shift) {
    Eigen::MatrixXd value = nodes_.at(a).value * scale;
    value.array() += shift;
    NodeId out_id = push(std::move(value), {});
    nodes_[out_id].backprop = [this, a, scale, out_id]() {
        nodes_[a].grad += nodes_[out_id].grad * scale;
    };
    return out_id;
}

Tape::NodeId Tape::scale_cols(NodeId a, const Eigen::RowVectorXd& factors) {
    if (factors.size() != nodes_.at(a).value.cols()) {
        throw std::invalid_argument("scale_cols: factor count mismatch");
    }
    Eigen::MatrixXd value = nodes_[a].value;
    value.array().rowwise() *= factors.array();
    Eigen::RowVectorXd f = factors;
    NodeId out_id = push(std::move(value), {});
    nodes_[out_id].backprop = [this, a, f, out_id]() {
        Eigen::MatrixXd g = nodes_[out_id].grad;
        g.array().rowwise() *= f.array();
        nodes_[a].grad += g;
    };
    return out_id;
}

Tape::NodeId Tape::mean_all(NodeId a) {
    const Eigen::MatrixXd& src = nodes_.at(a).value;
    const double inv_n = 1.0 / static_cast<double>(src.size());
    Eigen::MatrixXd value(1, 1);
    value(0, 0) = src.sum() * inv_n;
    NodeId out_id = push(std::move(value), {});
    nodes_[out_id].backprop = [this, a, inv_n, out_id]() {
        nodes_[a].grad.array() += nodes_[out_id].grad(0, 0) * inv_n;
    };
    return out_id;
}

const Eigen::MatrixXd& Tape::value(NodeId id) const { return nodes_.at(id).value; }

void Tape::backward(NodeId root, const Eigen::MatrixXd& seed) {
    if (nodes_.empty()) throw std::logic_error("Tape::backward called before any forward");
    const Node& root_node = nodes_.at(root);
    if (seed.rows() != root_node.value.rows() || seed.cols() != root_node.value.cols()) {
        throw std::invalid_argument("Tape::backward: seed shape does not match root");
    }
    nodes_[root].grad += seed;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if (it->backprop) it->backprop();
    }
    ran_backward_ = true;
}

const Eigen::MatrixXd& Tape::grad(NodeId id) const {
    if (!ran_backward_) throw std::logic_error("Tape::grad read before backward");
    return nodes_.at(id).grad;
}

const NetGrads* Tape::grads_for(const MlpNet& net) const {
    auto it = param_grads_.find(&net);
    return it == param_grads_.end() ? nullptr : &it->second;
}

void Tape::reset() {
    nodes_.clear();
    param_grads_.clear();
    ran_backward_ = false;
}

OptimizerState OptimizerState::make(OptAlgo algo, double lr, const MlpNet& shape) {
    OptimizerState st;
    st.algo = algo;
    st.learning_rate = lr;
    for (std::size_t l = 0; l < shape.weights.size(); ++l) {
        st.w_m1.push_back(Eigen::MatrixXd::Zero(shape.weights[l].rows(), shape.weights[l].cols()));
        st.w_m2.push_back(Eigen::MatrixXd::Zero(shape.weights[l].rows(), shape.weights[l].cols()));
        st.b_m1.push_back(Eigen::VectorXd::Zero(shape.biases[l].size()));
        st.b_m2.push_back(Eigen::VectorXd::Zero(shape.biases[l].size()));
    }
    return st;
}

namespace {

template <typename Mat>
void apply_update(OptimizerState& st, Mat& param, const Mat& grad, Mat& m1, Mat& m2, long t) {
    if (st.algo == OptAlgo::RmsProp) {
        m2 = st.rms_decay * m2 + (1.0 - st.rms_decay) * grad.cwiseProduct(grad);
        param.array() -= st.learning_rate * grad.array() / (m2.array().sqrt() + st.epsilon);
    } else {
        m1 = st.adam_beta1 * m1 + (1.0 - st.adam_beta1) * grad;
        m2 = st.adam_beta2 * m2 + (1.0 - st.adam_beta2) * grad.cwiseProduct(grad);
        const double c1 = 1.0 - std::pow(st.adam_beta1, static_cast<double>(t));
        const double c2 = 1.0 - std::pow(st.adam_beta2, static_cast<double>(t));
        param.array() -= st.learning_rate * (m1.array() / c1) /
                         ((m2.array() / c2).sqrt() + st.epsilon);
    }
}

}  // namespace

void optimize_step(OptimizerState& state, MlpNet& net, const NetGrads& grads) {
    if (grads.weights.size() != net.weights.size()) {
        throw std::invalid_argument("optimize_step: gradient layer count mismatch");
    }
    for (std::size_t l = 0; l < net.weights.size(); ++l) {
        if (grads.weights[l].rows() != net.weights[l].rows() ||
            grads.weights[l].cols() != net.weights[l].cols() ||
            grads.biases[l].size() != net.biases[l].size()) {
            throw std::invalid_argument("optimize_step: gradient shape mismatch at layer " +
                                        std::to_string(l));
        }
        if (!grads.weights[l].allFinite()) {
            throw std::runtime_error("optimize_step: non-finite gradient in layer " +
                                     std::to_string(l) + " weights");
        }
        if (!grads.biases[l].allFinite()) {
            throw std::runtime_error("optimize_step: non-finite gradient in layer " +
                                     std::to_string(l) + " biases");
        }
    }
    const long t = ++state.step_count;
    for (std::size_t l = 0; l < net.weights.size(); ++l) {
        apply_update(state, net.weights[l], grads.weights[l], state.w_m1[l], state.w_m2[l], t);
        apply_update(state, net.biases[l], grads.biases[l], state.b_m1[l], state.b_m2[l], t);
    }
}

Eigen::VectorXd gaussian_noise(int dim, double stddev, std::mt19937_64& rng) {
    if (stddev < 0.0) throw std::invalid_argument("gaussian_noise: negative stddev");
    Eigen::VectorXd out = Eigen::VectorXd::Zero(dim);
    if (stddev == 0.0) return out;
    std::normal_distribution<double> dist(0.0, stddev);
    for (int i = 0; i < dim; ++i) out(i) = dist(rng);
    return out;
}

namespace {

constexpr char kNetMagic[4] = {'B', 'S', 'N', 'T'};
constexpr char kOptMagic[4] = {'B', 'S', 'O', 'P'};
constexpr std::uint32_t kFormatVersion = 1;

void write_u32(std::ostream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void write_i64(std::ostream& out, std::int64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void write_f64(std::ostream& out, double v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void write_doubles(std::ostream& out, const double* data, std::size_t n) {
    out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(double)));
}

std::uint32_t read_u32(std::istream& in) {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!in) throw std::runtime_error("checkpoint: truncated stream");
    return v;
}
std::int64_t read_i64(std::istream& in) {
    std::int64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!in) throw std::runtime_error("checkpoint: truncated stream");
    return v;
}
double read_f64(std::istream& in) {
    double v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!in) throw std::runtime_error("checkpoint: truncated stream");
    return v;
}
void read_doubles(std::istream& in, double* data, std::size_t n) {
    in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) throw std::runtime_error("checkpoint: truncated stream");
}

void expect_magic(std::istream& in, const char (&magic)[4], const char* what) {
    char buf[4] = {};
    in.read(buf, 4);
    if (!in || std::memcmp(buf, magic, 4) != 0) {
        throw std::runtime_error(std::string("checkpoint: bad magic for ") + what);
    }
}

}  // namespace

void save_net(std::ostream& out, const MlpNet& net) {
    out.write(kNetMagic, 4);
    write_u32(out, kFormatVersion);
    write_u32(out, static_cast<std::uint32_t>(net.hidden_act));
    write_u32(out, static_cast<std::uint32_t>(net.output_act));
    write_u32(out, static_cast<std::uint32_t>(net.layer_sizes.size()));
    for (int s : net.layer_sizes) write_u32(out, static_cast<std::uint32_t>(s));
    for (std::size_t l = 0; l < net.weights.size(); ++l) {
        write_doubles(out, net.weights[l].data(), static_cast<std::size_t>(net.weights[l].size()));
        write_doubles(out, net.biases[l].data(), static_cast<std::size_t>(net.biases[l].size()));
    }
}

MlpNet load_net(std::istream& in) {
    expect_magic(in, kNetMagic, "net");
    const std::uint32_t version = read_u32(in);
    if (version != kFormatVersion) {
        throw std::runtime_error("checkpoint: unsupported net format version " +
                                 std::to_string(version));
    }
    MlpNet net;
    const std::uint32_t hidden_act = read_u32(in);
    const std::uint32_t output_act = read_u32(in);
    if (hidden_act > static_cast<std::uint32_t>(Activation::Relu) ||
        output_act > static_cast<std::uint32_t>(Activation::Relu)) {
        throw std::runtime_error("checkpoint: unknown activation code");
    }
    net.hidden_act = static_cast<Activation>(hidden_act);
    net.output_act = static_cast<Activation>(output_act);
    const std::uint32_t n_sizes = read_u32(in);
    if (n_sizes < 2 || n_sizes > 64) throw std::runtime_error("checkpoint: implausible layer count");
    net.layer_sizes.resize(n_sizes);
    for (auto& s : net.layer_sizes) s = static_cast<int>(read_u32(in));
    for (std::size_t l = 0; l + 1 < net.layer_sizes.size(); ++l) {
        Eigen::MatrixXd w(net.layer_sizes[l + 1], net.layer_sizes[l]);
        read_doubles(in, w.data(), static_cast<std::size_t>(w.size()));
        Eigen::VectorXd b(net.layer_sizes[l + 1]);
        read_doubles(in, b.data(), static_cast<std::size_t>(b.size()));
        net.weights.push_back(std::move(w));
        net.biases.push_back(std::move(b));
    }
    return net;
}

void save_net_with_opt(std::ostream& out, const MlpNet& net, const OptimizerState& opt) {
    save_net(out, net);
    out.write(kOptMagic, 4);
    write_u32(out, kFormatVersion);
    write_u32(out, static_cast<std::uint32_t>(opt.algo));
    write_f64(out, opt.learning_rate);
    write_f64(out, opt.rms_decay);
    write_f64(out, opt.adam_beta1);
    write_f64(out, opt.adam_beta2);
    write_f64(out, opt.epsilon);
    write_i64(out, opt.step_count);
    for (std::size_t l = 0; l < opt.w_m1.size(); ++l) {
        write_doubles(out, opt.w_m1[l].data(), static_cast<std::size_t>(opt.w_m1[l].size()));
        write_doubles(out, opt.w_m2[l].data(), static_cast<std::size_t>(opt.w_m2[l].size()));
        write_doubles(out, opt.b_m1[l].data(), static_cast<std::size_t>(opt.b_m1[l].size()));
        write_doubles(out, opt.b_m2[l].data(), static_cast<std::size_t>(opt.b_m2[l].size()));
    }
}

std::pair<MlpNet, OptimizerState> load_net_with_opt(std::istream& in) {
    MlpNet net = load_net(in);
    expect_magic(in, kOptMagic, "optimizer");
    const std::uint32_t version = read_u32(in);
    if (version != kFormatVersion) {
        throw std::runtime_error("checkpoint: unsupported optimizer format version " +
                                 std::to_string(version));
    }
    OptimizerState opt = OptimizerState::make(static_cast<OptAlgo>(read_u32(in)), 0.0, net);
    opt.learning_rate = read_f64(in);
    opt.rms_decay = read_f64(in);
    opt.adam_beta1 = read_f64(in);
    opt.adam_beta2 = read_f64(in);
    opt.epsilon = read_f64(in);
    opt.step_count = read_i64(in);
    for (std::size_t l = 0; l < opt.w_m1.size(); ++l) {
        read_doubles(in, opt.w_m1[l].data(), static_cast<std::size_t>(opt.w_m1[l].size()));
        read_doubles(in, opt.w_m2[l].data(), static_cast<std::size_t>(opt.w_m2[l].size()));
        read_doubles(in, opt.b_m1[l].data(), static_cast<std::size_t>(opt.b_m1[l].size()));
        read_doubles(in, opt.b_m2[l].data(), static_cast<std::size_t>(opt.b_m2[l].size()));
    }
    return {std::move(net), std::move(opt)};
}

std::vector<std::byte> net_bytes(const MlpNet& net) {
    std::ostringstream out(std::ios::binary);
    save_net(out, net);
    const std::string s = out.str();
    std::vector<std::byte> bytes(s.size());
    std::memcpy(bytes.data(), s.data(), s.size());
    return bytes;
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag) {
    // splitmix64 over the combined value
    std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (tag + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

}  // namespace bidsim
