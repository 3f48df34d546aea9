#ifndef BIDSIM_NET_HPP
#define BIDSIM_NET_HPP

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <random>
#include <span>
#include <vector>

// Minimal reverse-mode differentiable MLP engine. Networks are plain
// parameter containers; a Tape records one (batched) forward composition
// and produces exact gradients for every parameter and input that took
// part, including compositions that chain several networks.
namespace bidsim {

enum class Activation { Identity, Tanh, Sigmoid, Relu };

struct MlpNet {
    std::vector<int> layer_sizes;                // {in, hidden..., out}
    Activation hidden_act = Activation::Tanh;
    Activation output_act = Activation::Identity;
    std::vector<Eigen::MatrixXd> weights;        // per layer, rows = out
    std::vector<Eigen::VectorXd> biases;

    // Uniform init in +-1/sqrt(fan_in), reproducible from the seed.
    static MlpNet make(std::vector<int> sizes, Activation hidden,
                       Activation output, std::uint64_t seed);
    static MlpNet zeros(std::vector<int> sizes, Activation hidden,
                        Activation output);

    int input_size() const { return layer_sizes.front(); }
    int output_size() const { return layer_sizes.back(); }
    std::size_t parameter_count() const;
    bool same_shape(const MlpNet& other) const;
};

// Fast inference path, no gradient recording.
Eigen::VectorXd forward(const MlpNet& net, const Eigen::VectorXd& input);
Eigen::MatrixXd forward_batch(const MlpNet& net, const Eigen::MatrixXd& input);

// Gradients of one net's parameters, shaped like the net itself.
struct NetGrads {
    std::vector<Eigen::MatrixXd> weights;
    std::vector<Eigen::VectorXd> biases;
    bool finite() const;
};

// Records a forward composition over batched values (rows = batch items,
// cols = features) and plays it backwards. Node 0..n-1 in creation order;
// backward() must only be called after at least one recorded op.
class Tape {
public:
    using NodeId = int;

    NodeId constant(Eigen::MatrixXd value);
    NodeId forward(const MlpNet& net, NodeId input);
    NodeId concat_cols(std::span<const NodeId> parts);
    NodeId slice_cols(NodeId source, int first_col, int ncols);
    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);                    // elementwise
    NodeId affine(NodeId a, double scale, double shift);
    NodeId scale_cols(NodeId a, const Eigen::RowVectorXd& factors);
    NodeId mean_all(NodeId a);                         // 1x1 result

    const Eigen::MatrixXd& value(NodeId id) const;
    // Seeds the root gradient and accumulates into every upstream node
    // and parameter. A scalar root may be seeded with a 1x1 matrix.
    void backward(NodeId root, const Eigen::MatrixXd& seed);
    void backward_scalar(NodeId root) { backward(root, Eigen::MatrixXd::Ones(1, 1)); }
    const Eigen::MatrixXd& grad(NodeId id) const;

    // Parameter gradients per participating net; null when the net never
    // appeared on this tape. Callers are free to discard entries for
    // frozen networks.
    const NetGrads* grads_for(const MlpNet& net) const;

    int size() const { return static_cast<int>(nodes_.size()); }
    void reset();

private:
    struct Node {
        Eigen::MatrixXd value;
        Eigen::MatrixXd grad;
        std::function<void()> backprop;  // empty for leaves
    };
    NodeId push(Eigen::MatrixXd value, std::function<void()> backprop = {});
    NetGrads& grads_slot(const MlpNet& net);

    std::vector<Node> nodes_;
    std::map<const MlpNet*, NetGrads> param_grads_;
    bool ran_backward_ = false;
};

enum class OptAlgo { RmsProp, Adam };

struct OptimizerState {
    OptAlgo algo = OptAlgo::RmsProp;
    double learning_rate = 1e-3;
    double rms_decay = 0.99;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double epsilon = 1e-8;
    long step_count = 0;
    // First/second moment accumulators shaped like the parameters.
    // RMSprop uses only the second moments.
    std::vector<Eigen::MatrixXd> w_m1, w_m2;
    std::vector<Eigen::VectorXd> b_m1, b_m2;

    static OptimizerState make(OptAlgo algo, double lr, const MlpNet& shape);
};

// One in-place RMSprop or Adam update. Throws on non-finite gradients,
// naming the offending parameter block.
void optimize_step(OptimizerState& state, MlpNet& net, const NetGrads& grads);

Eigen::VectorXd gaussian_noise(int dim, double stddev, std::mt19937_64& rng);

// Versioned binary dump of shapes + parameters (+ optimizer state for the
// *_with_opt variants). Round-trips bitwise.
void save_net(std::ostream& out, const MlpNet& net);
MlpNet load_net(std::istream& in);
void save_net_with_opt(std::ostream& out, const MlpNet& net, const OptimizerState& opt);
std::pair<MlpNet, OptimizerState> load_net_with_opt(std::istream& in);

std::vector<std::byte> net_bytes(const MlpNet& net);

// Deterministic seed derivation for independent sub-streams.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag);

}  // namespace bidsim

#endif
