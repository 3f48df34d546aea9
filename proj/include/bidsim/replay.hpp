#ifndef BIDSIM_REPLAY_HPP
#define BIDSIM_REPLAY_HPP

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

// One environment interaction, shared between the surrogate's DDPG and the
// bidding agents' (M-)MADDPG training.
namespace bidsim {

struct Transition {
    long tau = 0;
    std::uint64_t seed = 0;
    Eigen::VectorXd load_scale;   // per load
    Eigen::VectorXd obs;          // encoded time served to the bidding agents
    Eigen::VectorXd bids;         // €/MW per agent
    Eigen::VectorXd dispatch_mw;  // per agent
    double p_slack_mw = 0.0;
    double objective_eur = 0.0;
    double penalty_total = 0.0;
    bool converged = true;
    Eigen::VectorXd rewards;      // € per agent
};

// Fixed-capacity ring buffer with uniform sampling (with replacement).
class ReplayBuffer {
public:
    explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
        if (capacity == 0) throw std::invalid_argument("replay buffer needs capacity");
    }

    void push(Transition t) {
        const std::size_t slot = total_ % capacity_;
        if (data_.size() < capacity_) {
            data_.push_back(std::move(t));
        } else {
            data_[slot] = std::move(t);
        }
        ++total_;
    }

    std::size_t size() const { return data_.size(); }
    std::size_t capacity() const { return capacity_; }
    std::size_t total_pushed() const { return total_; }
    const Transition& operator[](std::size_t i) const { return data_[i]; }

    std::vector<const Transition*> sample(int batch, std::mt19937_64& rng) const {
        if (data_.empty()) throw std::logic_error("sampling from an empty replay buffer");
        std::uniform_int_distribution<std::size_t> pick(0, data_.size() - 1);
        std::vector<const Transition*> out(static_cast<std::size_t>(batch));
        for (auto& slot : out) slot = &data_[pick(rng)];
        return out;
    }

private:
    std::size_t capacity_;
    std::size_t total_ = 0;
    std::vector<Transition> data_;
};

}  // namespace bidsim

#endif
