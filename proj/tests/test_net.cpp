#include "doctest.h"

#include "bidsim/net.hpp"

#include <array>
#include <cmath>
#include <sstream>

using namespace bidsim;

namespace {

// Flat parameter indexing: per layer, weights (column-major storage order)
// then biases. Grad accessor mirrors the same order.
double& param_slot(MlpNet& net, std::size_t idx) {
    for (std::size_t l = 0; l < net.weights.size(); ++l) {
        auto wn = static_cast<std::size_t>(net.weights[l].size());
        if (idx < wn) return net.weights[l].data()[idx];
        idx -= wn;
        auto bn = static_cast<std::size_t>(net.biases[l].size());
        if (idx < bn) return net.biases[l].data()[idx];
        idx -= bn;
    }
    throw std::out_of_range("param index");
}

double grad_at(const NetGrads& g, std::size_t idx) {
    for (std::size_t l = 0; l < g.weights.size(); ++l) {
        auto wn = static_cast<std::size_t>(g.weights[l].size());
        if (idx < wn) return g.weights[l].data()[idx];
        idx -= wn;
        auto bn = static_cast<std::size_t>(g.biases[l].size());
        if (idx < bn) return g.biases[l].data()[idx];
        idx -= bn;
    }
    throw std::out_of_range("grad index");
}

// Independent oracle: central finite difference through any scalar loss.
template <typename F>
double central_diff(F&& loss, double& slot, double h = 1e-4) {
    const double saved = slot;
    slot = saved + h;
    const double up = loss();
    slot = saved - h;
    const double dn = loss();
    slot = saved;
    return (up - dn) / (2.0 * h);
}

double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1.0});
}

Eigen::MatrixXd random_batch(int rows, int cols, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
    return m;
}

// Checks every parameter gradient of `net` on loss = mean((f(x))^2)
// against finite differences; returns the worst relative error.
double worst_param_fd_error(MlpNet& net, const Eigen::MatrixXd& x) {
    Tape tape;
    auto xid = tape.constant(x);
    auto y = tape.forward(net, xid);
    auto loss_id = tape.mean_all(tape.mul(y, y));
    tape.backward_scalar(loss_id);
    const NetGrads* grads = tape.grads_for(net);
    REQUIRE(grads != nullptr);
    REQUIRE(grads->finite());

    auto loss = [&]() {
        Eigen::MatrixXd out = forward_batch(net, x);
        return out.array().square().mean();
    };
    double worst = 0.0;
    for (std::size_t i = 0; i < net.parameter_count(); ++i) {
        const double fd = central_diff(loss, param_slot(net, i));
        worst = std::max(worst, rel_err(grad_at(*grads, i), fd));
    }
    return worst;
}

}  // namespace

TEST_CASE("forward of a zero net returns activation(0)") {
    MlpNet tanh_id = MlpNet::zeros({3, 4, 2}, Activation::Tanh, Activation::Identity);
    Eigen::VectorXd x(3);
    x << 0.5, -1.2, 3.0;
    CHECK(forward(tanh_id, x).isZero(0.0));

    MlpNet tanh_sig = MlpNet::zeros({3, 4, 2}, Activation::Tanh, Activation::Sigmoid);
    Eigen::VectorXd out = forward(tanh_sig, x);
    for (int i = 0; i < out.size(); ++i) CHECK(out(i) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("identity 1x1 net passes its input through") {
    MlpNet net = MlpNet::zeros({1, 1}, Activation::Identity, Activation::Identity);
    net.weights[0](0, 0) = 1.0;
    Eigen::VectorXd x(1);
    x << 0.7;
    CHECK(forward(net, x)(0) == doctest::Approx(0.7).epsilon(1e-15));
}

TEST_CASE("seeded 2-3-1 net matches a hand-rolled scalar chain") {
    MlpNet net = MlpNet::make({2, 3, 1}, Activation::Tanh, Activation::Identity, 42);
    Eigen::VectorXd x(2);
    x << 0.3, -0.8;

    // Scalar-loop oracle, independent of the Eigen matmul path.
    double hidden[3];
    for (int j = 0; j < 3; ++j) {
        double z = net.biases[0](j);
        for (int k = 0; k < 2; ++k) z += net.weights[0](j, k) * x(k);
        hidden[j] = std::tanh(z);
    }
    double y = net.biases[1](0);
    for (int j = 0; j < 3; ++j) y += net.weights[1](0, j) * hidden[j];

    CHECK(forward(net, x)(0) == doctest::Approx(y).epsilon(1e-12));
}

TEST_CASE("forward_batch agrees with per-row forward") {
    MlpNet net = MlpNet::make({4, 16, 3}, Activation::Tanh, Activation::Sigmoid, 7);
    Eigen::MatrixXd x = random_batch(5, 4, 11);
    Eigen::MatrixXd batch = forward_batch(net, x);
    for (int r = 0; r < 5; ++r) {
        Eigen::VectorXd row = forward(net, x.row(r).transpose());
        CHECK((batch.row(r).transpose() - row).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("tape gradients match central finite differences") {
    struct Arch {
        std::vector<int> sizes;
        Activation out;
    };
    const Arch archs[] = {
        {{6, 128, 1}, Activation::Sigmoid},   // actor-shaped
        {{10, 256, 1}, Activation::Identity}, // critic-shaped
        {{8, 32, 4}, Activation::Sigmoid},    // surrogate-actor-shaped
    };
    const Activation hiddens[] = {Activation::Tanh, Activation::Relu};
    for (const Arch& arch : archs) {
        for (Activation hidden : hiddens) {
            for (std::uint64_t seed = 1; seed <= 3; ++seed) {
                MlpNet net = MlpNet::make(arch.sizes, hidden, arch.out, seed);
                Eigen::MatrixXd x = random_batch(3, arch.sizes.front(), seed + 100);
                CAPTURE(arch.sizes.front());
                CAPTURE(static_cast<int>(hidden));
                CAPTURE(seed);
                CHECK(worst_param_fd_error(net, x) < 1e-4);
            }
        }
    }
}

TEST_CASE("relu output clamps negative pre-activations and passes positives") {
    MlpNet net = MlpNet::zeros({1, 2}, Activation::Identity, Activation::Relu);
    net.weights[0](0, 0) = 1.0;
    net.weights[0](1, 0) = -1.0;
    Eigen::VectorXd x(1);
    x << 0.7;
    Eigen::VectorXd y = forward(net, x);
    CHECK(y(0) == doctest::Approx(0.7).epsilon(1e-15));
    CHECK(y(1) == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("input gradients match finite differences") {
    MlpNet net = MlpNet::make({5, 24, 2}, Activation::Tanh, Activation::Identity, 3);
    Eigen::MatrixXd x = random_batch(4, 5, 17);

    Tape tape;
    auto xid = tape.constant(x);
    auto y = tape.forward(net, xid);
    tape.backward_scalar(tape.mean_all(tape.mul(y, y)));
    const Eigen::MatrixXd& dx = tape.grad(xid);

    auto loss = [&]() { return forward_batch(net, x).array().square().mean(); };
    double worst = 0.0;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        worst = std::max(worst, rel_err(dx.data()[i], central_diff(loss, x.data()[i])));
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("chained nets: gradients flow through a frozen downstream net") {
    MlpNet g = MlpNet::make({2, 8, 3}, Activation::Tanh, Activation::Sigmoid, 21);
    MlpNet f = MlpNet::make({3, 8, 1}, Activation::Tanh, Activation::Identity, 22);
    Eigen::MatrixXd x = random_batch(4, 2, 23);

    Tape tape;
    auto xid = tape.constant(x);
    auto mid = tape.forward(g, xid);
    auto out = tape.forward(f, mid);
    tape.backward_scalar(tape.mean_all(out));

    auto loss = [&]() { return forward_batch(f, forward_batch(g, x)).mean(); };

    const NetGrads* gg = tape.grads_for(g);
    const NetGrads* fg = tape.grads_for(f);
    REQUIRE(gg != nullptr);
    REQUIRE(fg != nullptr);

    double worst = 0.0;
    for (std::size_t i = 0; i < g.parameter_count(); ++i) {
        worst = std::max(worst, rel_err(grad_at(*gg, i), central_diff(loss, param_slot(g, i))));
    }
    for (std::size_t i = 0; i < f.parameter_count(); ++i) {
        worst = std::max(worst, rel_err(grad_at(*fg, i), central_diff(loss, param_slot(f, i))));
    }
    const Eigen::MatrixXd& dx = tape.grad(xid);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        worst = std::max(worst, rel_err(dx.data()[i], central_diff(loss, x.data()[i])));
    }
    CHECK(worst < 1e-4);

    // A net that never touched the tape has no gradient entry.
    MlpNet stranger = MlpNet::make({2, 2}, Activation::Tanh, Activation::Identity, 1);
    CHECK(tape.grads_for(stranger) == nullptr);
}

TEST_CASE("structural tape ops match finite differences") {
    Eigen::MatrixXd x1 = random_batch(3, 2, 31);
    Eigen::MatrixXd x2 = random_batch(3, 4, 32);
    Eigen::RowVectorXd factors(3);
    factors << 2.0, -0.5, 1.5;

    auto build = [&](Tape& tape, Tape::NodeId& id1, Tape::NodeId& id2) {
        id1 = tape.constant(x1);
        id2 = tape.constant(x2);
        std::array<Tape::NodeId, 2> parts{id1, id2};
        auto cat = tape.concat_cols(parts);
        auto sl = tape.slice_cols(cat, 1, 3);
        auto sc = tape.scale_cols(sl, factors);
        auto af = tape.affine(sc, 2.5, -0.7);
        auto d = tape.sub(tape.mul(af, af), af);
        return tape.mean_all(tape.add(d, sc));
    };

    Tape tape;
    Tape::NodeId id1, id2;
    auto loss_id = build(tape, id1, id2);
    tape.backward_scalar(loss_id);

    auto loss = [&]() {
        Tape t;
        Tape::NodeId a, b;
        return t.value(build(t, a, b))(0, 0);
    };
    double worst = 0.0;
    for (Eigen::Index i = 0; i < x1.size(); ++i) {
        worst = std::max(worst,
                         rel_err(tape.grad(id1).data()[i], central_diff(loss, x1.data()[i])));
    }
    for (Eigen::Index i = 0; i < x2.size(); ++i) {
        worst = std::max(worst,
                         rel_err(tape.grad(id2).data()[i], central_diff(loss, x2.data()[i])));
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("optimizer first-step closed forms") {
    auto scalar_net = [] {
        return MlpNet::zeros({1, 1}, Activation::Identity, Activation::Identity);
    };
    NetGrads grads;
    grads.weights.push_back(Eigen::MatrixXd::Constant(1, 1, 0.3));
    grads.biases.push_back(Eigen::VectorXd::Constant(1, -0.2));

    SUBCASE("rmsprop") {
        MlpNet net = scalar_net();
        OptimizerState opt = OptimizerState::make(OptAlgo::RmsProp, 1e-3, net);
        optimize_step(opt, net, grads);
        const double dw = -1e-3 * 0.3 / (std::sqrt(0.01 * 0.3 * 0.3) + 1e-8);
        const double db = -1e-3 * -0.2 / (std::sqrt(0.01 * 0.2 * 0.2) + 1e-8);
        CHECK(net.weights[0](0, 0) == doctest::Approx(dw).epsilon(1e-12));
        CHECK(net.biases[0](0) == doctest::Approx(db).epsilon(1e-12));
        CHECK(opt.step_count == 1);
    }
    SUBCASE("adam") {
        MlpNet net = scalar_net();
        OptimizerState opt = OptimizerState::make(OptAlgo::Adam, 1e-3, net);
        optimize_step(opt, net, grads);
        const double dw = -1e-3 * 0.3 / (0.3 + 1e-8);
        const double db = -1e-3 * -0.2 / (0.2 + 1e-8);
        CHECK(net.weights[0](0, 0) == doctest::Approx(dw).epsilon(1e-9));
        CHECK(net.biases[0](0) == doctest::Approx(db).epsilon(1e-9));
    }
    SUBCASE("zero gradients leave parameters unchanged") {
        MlpNet net = MlpNet::make({1, 1}, Activation::Identity, Activation::Identity, 5);
        const double w0 = net.weights[0](0, 0);
        NetGrads zero;
        zero.weights.push_back(Eigen::MatrixXd::Zero(1, 1));
        zero.biases.push_back(Eigen::VectorXd::Zero(1));
        OptimizerState opt = OptimizerState::make(OptAlgo::RmsProp, 1e-3, net);
        optimize_step(opt, net, zero);
        CHECK(net.weights[0](0, 0) == w0);
    }
    SUBCASE("non-finite gradient names the parameter block") {
        MlpNet net = scalar_net();
        NetGrads bad = grads;
        bad.weights[0](0, 0) = std::nan("");
        OptimizerState opt = OptimizerState::make(OptAlgo::RmsProp, 1e-3, net);
        CHECK_THROWS_WITH_AS(optimize_step(opt, net, bad),
                             "optimize_step: non-finite gradient in layer 0 weights",
                             std::runtime_error);
    }
}

TEST_CASE("200 rmsprop steps cut a convex quadratic by 99%") {
    MlpNet net = MlpNet::make({4, 4}, Activation::Identity, Activation::Identity, 13);
    MlpNet target = MlpNet::make({4, 4}, Activation::Identity, Activation::Identity, 14);
    OptimizerState opt = OptimizerState::make(OptAlgo::RmsProp, 0.01, net);

    auto loss = [&]() {
        double s = (net.weights[0] - target.weights[0]).squaredNorm() +
                   (net.biases[0] - target.biases[0]).squaredNorm();
        return 0.5 * s;
    };
    const double initial = loss();
    for (int step = 0; step < 200; ++step) {
        NetGrads g;
        g.weights.push_back(net.weights[0] - target.weights[0]);
        g.biases.push_back(net.biases[0] - target.biases[0]);
        optimize_step(opt, net, g);
    }
    CHECK(loss() < 0.01 * initial);
    CHECK(opt.step_count == 200);
}

TEST_CASE("gaussian noise") {
    SUBCASE("std 0 gives an exact zero vector") {
        std::mt19937_64 rng(1);
        CHECK(gaussian_noise(5, 0.0, rng).isZero(0.0));
    }
    SUBCASE("same seed, same draw") {
        std::mt19937_64 a(42), b(42);
        CHECK(gaussian_noise(8, 0.2, a) == gaussian_noise(8, 0.2, b));
    }
    SUBCASE("sample statistics at std 0.2") {
        std::mt19937_64 rng(7);
        const int n = 100000;
        Eigen::VectorXd s = gaussian_noise(n, 0.2, rng);
        const double mean = s.mean();
        const double stddev = std::sqrt((s.array() - mean).square().sum() / (n - 1));
        CHECK(std::abs(mean) < 0.005);
        CHECK(std::abs(stddev - 0.2) < 0.005);
    }
    SUBCASE("negative std rejected") {
        std::mt19937_64 rng(1);
        CHECK_THROWS_AS(gaussian_noise(3, -0.1, rng), std::invalid_argument);
    }
}

TEST_CASE("checkpoints round-trip bitwise") {
    MlpNet net = MlpNet::make({5, 16, 3}, Activation::Tanh, Activation::Sigmoid, 99);

    SUBCASE("net only") {
        std::stringstream buf(std::ios::in | std::ios::out | std::ios::binary);
        save_net(buf, net);
        MlpNet copy = load_net(buf);
        CHECK(net_bytes(copy) == net_bytes(net));
        CHECK(copy.same_shape(net));
    }
    SUBCASE("net with optimizer state") {
        OptimizerState opt = OptimizerState::make(OptAlgo::Adam, 1e-3, net);
        std::mt19937_64 rng(5);
        for (int i = 0; i < 3; ++i) {
            Tape tape;
            auto x = tape.constant(random_batch(2, 5, rng()));
            tape.backward_scalar(tape.mean_all(tape.forward(net, x)));
            optimize_step(opt, net, *tape.grads_for(net));
        }
        std::stringstream buf(std::ios::in | std::ios::out | std::ios::binary);
        save_net_with_opt(buf, net, opt);
        auto [net2, opt2] = load_net_with_opt(buf);

        std::ostringstream a(std::ios::binary), b(std::ios::binary);
        save_net_with_opt(a, net, opt);
        save_net_with_opt(b, net2, opt2);
        CHECK(a.str() == b.str());
        CHECK(opt2.step_count == 3);
    }
    SUBCASE("corrupt magic rejected") {
        std::stringstream buf(std::ios::in | std::ios::out | std::ios::binary);
        buf << "XXXXgarbage";
        CHECK_THROWS_AS(load_net(buf), std::runtime_error);
    }
    SUBCASE("truncated stream rejected") {
        std::ostringstream full(std::ios::binary);
        save_net(full, net);
        std::string bytes = full.str();
        std::stringstream cut(std::ios::in | std::ios::out | std::ios::binary);
        cut << bytes.substr(0, bytes.size() / 2);
        CHECK_THROWS_AS(load_net(cut), std::runtime_error);
    }
}

TEST_CASE("derive_seed is deterministic and spreads") {
    CHECK(derive_seed(1, 2) == derive_seed(1, 2));
    CHECK(derive_seed(1, 2) != derive_seed(1, 3));
    CHECK(derive_seed(1, 2) != derive_seed(2, 2));
    CHECK(derive_seed(0, 0) != 0);
}

TEST_CASE("shape and usage errors") {
    MlpNet net = MlpNet::make({3, 4, 1}, Activation::Tanh, Activation::Identity, 1);
    Eigen::VectorXd wrong(2);
    wrong << 1.0, 2.0;
    CHECK_THROWS_AS(forward(net, wrong), std::invalid_argument);

    Tape tape;
    auto id = tape.constant(Eigen::MatrixXd::Ones(1, 3));
    CHECK_THROWS_AS(tape.grad(id), std::logic_error);

    Tape empty;
    CHECK_THROWS_AS(empty.backward_scalar(0), std::logic_error);
}
