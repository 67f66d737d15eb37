#pragma once

// Reward augmentation: episodic incentive, conventional episodic-control
// regularization, its reward-form equivalent, and the elliptical bonus.

#include <optional>
#include <string>

#include "emu/episodic_memory.hpp"
#include "emu/numerics.hpp"

namespace emu {

enum class IncentiveKind { kEpisodic, kConventionalEc, kRewardEc, kE3B, kNone };

std::string to_string(IncentiveKind kind);
// Accepts the CLI spellings ei | ec | rec | e3b | none.
IncentiveKind parse_incentive(const std::string& text);

struct IncentiveMode {
  IncentiveKind kind = IncentiveKind::kEpisodic;
  double lambda = 0.1;      // ec / rec scale
  double lambda_e3b = 0.1;  // covariance regularizer
  double beta_e3b = 0.01;
  bool clamp = true;        // floor the episodic incentive at zero

  void validate() const;
  bool uses_memory() const {
    return kind == IncentiveKind::kEpisodic || kind == IncentiveKind::kConventionalEc ||
           kind == IncentiveKind::kRewardEc;
  }
};

// r^p = gamma * (N_xi / N_call) * max(0, H - target_max); zero on a recall
// miss or when N_xi == 0. Throws std::logic_error if N_call == 0 < N_xi.
double episodic_incentive(const std::optional<RecallResult>& recall, double target_max,
                          double gamma, bool clamp = true);

// Q_EC = r + gamma * H(s')
double ec_target(double reward, double gamma, double H);

// lambda * (Q_EC - Q_tot)^2
double ec_loss_term(double q_ec, double q_tot, double lambda);
double ec_loss_term(const std::optional<double>& q_ec, double q_tot, double lambda);

// r^EC = lambda * (r + gamma * H(s') - Q(s, a)); zero when recall failed.
double reward_ec(double reward, double gamma, const std::optional<double>& H, double q_taken,
                 double lambda);

// Per-episode inverse covariance for the elliptical bonus.
class E3BState {
 public:
  E3BState(int dim, double lambda_e3b);

  void reset();
  // b = phi^T C^-1 phi, followed by the Sherman-Morrison rank-one update
  // C^-1 <- C^-1 - u u^T / (1 + b) with u = C^-1 phi.
  double bonus_and_update(const Vector& phi);

  const Matrix& inverse_covariance() const { return inverse_; }
  double lambda() const { return lambda_; }

 private:
  double lambda_;
  Matrix inverse_;
};

struct RewardContext {
  double gamma = 0.99;
  std::optional<RecallResult> recall;  // match for s'
  double target_max = 0.0;             // bootstrap value at s'
  double q_taken = 0.0;                // Q_tot(s, a) at the online parameters
  double e3b_bonus = 0.0;
  bool terminal = false;
};

struct CombinedReward {
  double reward = 0.0;     // r plus any reward-side augmentation
  double incentive = 0.0;  // the augmentation alone (r^p, r^EC, beta * b)
  // Conventional EC only: the loss gains lambda * (ec_target - Q_tot)^2.
  bool has_ec_term = false;
  double ec_target = 0.0;
  double ec_weight = 0.0;
};

CombinedReward combined_reward(double reward, const IncentiveMode& mode, const RewardContext& ctx);

}  // namespace emu
