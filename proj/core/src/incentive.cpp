#include "emu/incentive.hpp"

#include <algorithm>
#include <stdexcept>

namespace emu {

std::string to_string(IncentiveKind kind) {
  switch (kind) {
    case IncentiveKind::kEpisodic: return "ei";
    case IncentiveKind::kConventionalEc: return "ec";
    case IncentiveKind::kRewardEc: return "rec";
    case IncentiveKind::kE3B: return "e3b";
    case IncentiveKind::kNone: return "none";
  }
  return "?";
}

IncentiveKind parse_incentive(const std::string& text) {
  if (text == "ei") return IncentiveKind::kEpisodic;
  if (text == "ec") return IncentiveKind::kConventionalEc;
  if (text == "rec") return IncentiveKind::kRewardEc;
  if (text == "e3b") return IncentiveKind::kE3B;
  if (text == "none") return IncentiveKind::kNone;
  throw std::invalid_argument("unknown incentive: " + text);
}

void IncentiveMode::validate() const {
  if (lambda < 0.0) throw std::invalid_argument("incentive: lambda must be >= 0");
  if (!(lambda_e3b > 0.0)) throw std::invalid_argument("incentive: lambda_e3b must be > 0");
  if (beta_e3b < 0.0) throw std::invalid_argument("incentive: beta_e3b must be >= 0");
}

double episodic_incentive(const std::optional<RecallResult>& recall, double target_max,
                          double gamma, bool clamp) {
  if (!recall || !recall->desirable || recall->n_xi == 0) return 0.0;
  if (recall->n_call <= 0) {
    throw std::logic_error("episodic_incentive: N_xi > 0 with N_call == 0");
  }
  const double ratio = static_cast<double>(recall->n_xi) / static_cast<double>(recall->n_call);
  double gap = recall->H - target_max;
  if (clamp) gap = std::max(0.0, gap);
  return gamma * ratio * gap;
}

double ec_target(double reward, double gamma, double H) { return reward + gamma * H; }

double ec_loss_term(double q_ec, double q_tot, double lambda) {
  const double gap = q_ec - q_tot;
  return lambda * gap * gap;
}

double ec_loss_term(const std::optional<double>& q_ec, double q_tot, double lambda) {
  return q_ec ? ec_loss_term(*q_ec, q_tot, lambda) : 0.0;
}

double reward_ec(double reward, double gamma, const std::optional<double>& H, double q_taken,
                 double lambda) {
  if (!H) return 0.0;
  return lambda * (reward + gamma * *H - q_taken);
}

E3BState::E3BState(int dim, double lambda_e3b) : lambda_(lambda_e3b) {
  if (dim < 1) throw std::invalid_argument("e3b: dimension must be >= 1");
  if (!(lambda_e3b > 0.0)) throw std::invalid_argument("e3b: lambda must be > 0");
  inverse_ = Matrix::Identity(dim, dim) / lambda_;
}

void E3BState::reset() {
  inverse_ = Matrix::Identity(inverse_.rows(), inverse_.cols()) / lambda_;
}

double E3BState::bonus_and_update(const Vector& phi) {
  if (phi.size() != inverse_.rows()) throw std::invalid_argument("e3b: feature dimension mismatch");
  const Vector u = inverse_ * phi;
  const double b = phi.dot(u);
  inverse_.noalias() -= (u * u.transpose()) / (1.0 + b);
  // Keep exact symmetry against rounding drift.
  inverse_ = 0.5 * (inverse_ + inverse_.transpose()).eval();
  return b;
}

CombinedReward combined_reward(double reward, const IncentiveMode& mode, const RewardContext& ctx) {
  CombinedReward out;
  out.reward = reward;
  // A terminal successor has no value to correct and H(s') = 0.
  std::optional<double> H;
  if (ctx.terminal) {
    H = 0.0;
  } else if (ctx.recall) {
    H = ctx.recall->H;
  }
  switch (mode.kind) {
    case IncentiveKind::kNone:
      break;
    case IncentiveKind::kEpisodic:
      if (!ctx.terminal) {
        out.incentive = episodic_incentive(ctx.recall, ctx.target_max, ctx.gamma, mode.clamp);
      }
      break;
    case IncentiveKind::kRewardEc:
      out.incentive = reward_ec(reward, ctx.gamma, H, ctx.q_taken, mode.lambda);
      break;
    case IncentiveKind::kE3B:
      out.incentive = mode.beta_e3b * ctx.e3b_bonus;
      break;
    case IncentiveKind::kConventionalEc:
      if (H) {
        out.has_ec_term = true;
        out.ec_target = ec_target(reward, ctx.gamma, *H);
        out.ec_weight = mode.lambda;
      }
      break;
  }
  out.reward += out.incentive;
  return out;
}

}  // namespace emu
