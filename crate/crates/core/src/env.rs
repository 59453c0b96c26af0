//! Simulated radio environment: channel plan, gateway receivable set,
//! slotted collision model, optional Bernoulli link loss, and the ACK
//! feedback mapping agents learn from.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("agent {agent} chose channel {channel}, but the plan has {num_channels} channels")]
    ChannelOutOfRange { agent: usize, channel: usize, num_channels: usize },
    #[error("gateway receivable set contains unknown channel {0}")]
    BadReceivable(usize),
    #[error("gateway receivable set is empty")]
    NoReceivableChannel,
    #[error("loss_probability {0} outside [0, 1]")]
    BadLossProbability(f64),
    #[error("agent {agent} policy sums to {sum}, expected 1")]
    UnnormalizedPolicy { agent: usize, sum: f64 },
    #[error("agent {agent} policy has {found} entries, expected {expected}")]
    PolicyLengthMismatch { agent: usize, expected: usize, found: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Channel {
    pub index: usize,
    pub center_mhz: f64,
    pub bandwidth_khz: f64,
}

/// The selectable channels and the subset the gateway can demodulate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelPlan {
    pub channels: Vec<Channel>,
    pub gateway_receivable: BTreeSet<usize>,
}

impl Default for ChannelPlan {
    /// Three 125 kHz channels at 922.4 / 922.8 / 923.2 MHz; the gateway
    /// receives only the upper two.
    fn default() -> Self {
        Self {
            channels: vec![
                Channel { index: 0, center_mhz: 922.4, bandwidth_khz: 125.0 },
                Channel { index: 1, center_mhz: 922.8, bandwidth_khz: 125.0 },
                Channel { index: 2, center_mhz: 923.2, bandwidth_khz: 125.0 },
            ],
            gateway_receivable: BTreeSet::from([1, 2]),
        }
    }
}

impl ChannelPlan {
    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn is_receivable(&self, channel: usize) -> bool {
        self.gateway_receivable.contains(&channel)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.gateway_receivable.is_empty() {
            return Err(EnvError::NoReceivableChannel);
        }
        for &ch in &self.gateway_receivable {
            if ch >= self.channels.len() {
                return Err(EnvError::BadReceivable(ch));
            }
        }
        Ok(())
    }
}

/// Bernoulli stand-in for everything the PHY layer does to a frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkModel {
    pub loss_probability: f64,
    pub ack_always_delivered: bool,
}

impl Default for LinkModel {
    fn default() -> Self {
        Self { loss_probability: 0.0, ack_always_delivered: true }
    }
}

impl LinkModel {
    pub fn new(loss_probability: f64) -> Result<Self, EnvError> {
        if !(0.0..=1.0).contains(&loss_probability) {
            return Err(EnvError::BadLossProbability(loss_probability));
        }
        Ok(Self { loss_probability, ack_always_delivered: true })
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if !(0.0..=1.0).contains(&self.loss_probability) {
            return Err(EnvError::BadLossProbability(self.loss_probability));
        }
        Ok(())
    }
}

/// Why a transmission failed. Diagnostics only: agents never observe the
/// cause, just the missing ACK.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailureCause {
    None,
    NotReceivable,
    Collision,
    LinkLoss,
}

impl FailureCause {
    pub fn as_str(&self) -> &'static str {
        match self {
            FailureCause::None => "NONE",
            FailureCause::NotReceivable => "NOT_RECEIVABLE",
            FailureCause::Collision => "COLLISION",
            FailureCause::LinkLoss => "LINK_LOSS",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentOutcome {
    pub channel: usize,
    pub success: bool,
    pub cause: FailureCause,
}

/// Joint result of one slot across all agents.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotOutcome {
    pub agents: Vec<AgentOutcome>,
}

/// Resolve one synchronized slot. Per agent, in order: NOT_RECEIVABLE if the
/// gateway cannot demodulate the channel, else COLLISION if two or more
/// agents picked it, else an independent LINK_LOSS draw, else success.
/// Link-loss draws are made in agent order, only for agents that got that far.
pub fn resolve_slot(
    plan: &ChannelPlan,
    link: &LinkModel,
    choices: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<SlotOutcome, EnvError> {
    let n = plan.num_channels();
    for (agent, &ch) in choices.iter().enumerate() {
        if ch >= n {
            return Err(EnvError::ChannelOutOfRange { agent, channel: ch, num_channels: n });
        }
    }
    let mut occupancy = vec![0u32; n];
    for &ch in choices {
        occupancy[ch] += 1;
    }
    let agents = choices
        .iter()
        .map(|&ch| {
            let cause = if !plan.is_receivable(ch) {
                FailureCause::NotReceivable
            } else if occupancy[ch] > 1 {
                FailureCause::Collision
            } else if link.loss_probability > 0.0 && rng.random::<f64>() < link.loss_probability {
                FailureCause::LinkLoss
            } else {
                FailureCause::None
            };
            AgentOutcome { channel: ch, success: cause == FailureCause::None, cause }
        })
        .collect();
    Ok(SlotOutcome { agents })
}

/// ACK feedback: (next_state, reward), both 1 on success and 0 otherwise.
/// The failure cause never leaks into the feedback.
pub fn feedback(outcome: &SlotOutcome, agent: usize) -> (u8, u8) {
    let bit = outcome.agents[agent].success as u8;
    (bit, bit)
}

/// Exact expected per-slot FSR (averaged over agents) for fixed per-agent
/// action distributions, by brute-force enumeration of the joint action
/// space. Test oracle for the Monte-Carlo path.
pub fn expected_fsr_oracle(
    plan: &ChannelPlan,
    link: &LinkModel,
    policies: &[Vec<f64>],
) -> Result<f64, EnvError> {
    let n = plan.num_channels();
    for (agent, p) in policies.iter().enumerate() {
        if p.len() != n {
            return Err(EnvError::PolicyLengthMismatch { agent, expected: n, found: p.len() });
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(EnvError::UnnormalizedPolicy { agent, sum });
        }
    }
    let num_agents = policies.len();
    let deliver = 1.0 - link.loss_probability;
    let mut total = 0.0;

    // joint = one channel choice per agent, enumerated as digits base n
    let mut joint = vec![0usize; num_agents];
    loop {
        let prob: f64 = joint.iter().zip(policies).map(|(&ch, p)| p[ch]).product();
        if prob > 0.0 {
            let mut successes = 0.0;
            for (agent, &ch) in joint.iter().enumerate() {
                let alone = joint
                    .iter()
                    .enumerate()
                    .all(|(other, &och)| other == agent || och != ch);
                if plan.is_receivable(ch) && alone {
                    successes += deliver;
                }
            }
            total += prob * successes / num_agents as f64;
        }
        // next joint choice
        let mut i = 0;
        loop {
            if i == num_agents {
                return Ok(total);
            }
            joint[i] += 1;
            if joint[i] < n {
                break;
            }
            joint[i] = 0;
            i += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn distinct_receivable_channels_succeed() {
        let plan = ChannelPlan::default();
        let link = LinkModel::default();
        let mut r = rng::env_stream(1);
        let out = resolve_slot(&plan, &link, &[1, 2], &mut r).unwrap();
        assert!(out.agents.iter().all(|a| a.success));
        assert!(out.agents.iter().all(|a| a.cause == FailureCause::None));
    }

    #[test]
    fn same_channel_collides_for_both() {
        let plan = ChannelPlan::default();
        let link = LinkModel::default();
        let mut r = rng::env_stream(1);
        let out = resolve_slot(&plan, &link, &[1, 1], &mut r).unwrap();
        for a in &out.agents {
            assert!(!a.success);
            assert_eq!(a.cause, FailureCause::Collision);
        }
    }

    #[test]
    fn channel_zero_is_not_receivable() {
        let plan = ChannelPlan::default();
        let link = LinkModel::default();
        let mut r = rng::env_stream(1);
        let out = resolve_slot(&plan, &link, &[0], &mut r).unwrap();
        assert!(!out.agents[0].success);
        assert_eq!(out.agents[0].cause, FailureCause::NotReceivable);
    }

    #[test]
    fn not_receivable_dominates_collision() {
        let plan = ChannelPlan::default();
        let link = LinkModel::default();
        let mut r = rng::env_stream(1);
        let out = resolve_slot(&plan, &link, &[0, 0], &mut r).unwrap();
        for a in &out.agents {
            assert_eq!(a.cause, FailureCause::NotReceivable);
        }
    }

    #[test]
    fn out_of_range_channel_is_rejected() {
        let plan = ChannelPlan::default();
        let link = LinkModel::default();
        let mut r = rng::env_stream(1);
        assert!(resolve_slot(&plan, &link, &[3], &mut r).is_err());
    }

    #[test]
    fn certain_loss_fails_everything() {
        let plan = ChannelPlan::default();
        let link = LinkModel::new(1.0).unwrap();
        let mut r = rng::env_stream(1);
        let out = resolve_slot(&plan, &link, &[1, 2], &mut r).unwrap();
        for a in &out.agents {
            assert_eq!(a.cause, FailureCause::LinkLoss);
        }
    }

    #[test]
    fn feedback_maps_success_to_ones() {
        let plan = ChannelPlan::default();
        let link = LinkModel::default();
        let mut r = rng::env_stream(1);
        let out = resolve_slot(&plan, &link, &[1, 1], &mut r).unwrap();
        assert_eq!(feedback(&out, 0), (0, 0));
        let out = resolve_slot(&plan, &link, &[1, 2], &mut r).unwrap();
        assert_eq!(feedback(&out, 0), (1, 1));
        assert_eq!(feedback(&out, 1), (1, 1));
    }

    #[test]
    fn permutation_symmetry() {
        let plan = ChannelPlan::default();
        let link = LinkModel::default();
        let mut r1 = rng::env_stream(3);
        let mut r2 = rng::env_stream(3);
        let a = resolve_slot(&plan, &link, &[2, 1], &mut r1).unwrap();
        let b = resolve_slot(&plan, &link, &[1, 2], &mut r2).unwrap();
        assert_eq!(a.agents[0], b.agents[1]);
        assert_eq!(a.agents[1], b.agents[0]);
    }

    #[test]
    fn oracle_deterministic_pair() {
        let plan = ChannelPlan::default();
        let link = LinkModel::default();
        let policies = vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let fsr = expected_fsr_oracle(&plan, &link, &policies).unwrap();
        assert_eq!(fsr, 1.0);
    }

    #[test]
    fn oracle_uniform_pair_is_four_ninths() {
        let plan = ChannelPlan::default();
        let link = LinkModel::default();
        let u = vec![1.0 / 3.0; 3];
        let fsr = expected_fsr_oracle(&plan, &link, &[u.clone(), u]).unwrap();
        assert!((fsr - 4.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_total_loss_is_zero() {
        let plan = ChannelPlan::default();
        let link = LinkModel::new(1.0).unwrap();
        let u = vec![1.0 / 3.0; 3];
        let fsr = expected_fsr_oracle(&plan, &link, &[u.clone(), u]).unwrap();
        assert_eq!(fsr, 0.0);
    }

    #[test]
    fn oracle_rejects_unnormalized_policy() {
        let plan = ChannelPlan::default();
        let link = LinkModel::default();
        assert!(expected_fsr_oracle(&plan, &link, &[vec![0.5, 0.5, 0.5]]).is_err());
    }

    #[test]
    fn plan_validation() {
        let mut plan =
            ChannelPlan { gateway_receivable: BTreeSet::from([5]), ..Default::default() };
        assert!(plan.validate().is_err());
        plan.gateway_receivable.clear();
        assert!(matches!(plan.validate(), Err(EnvError::NoReceivableChannel)));
        assert!(LinkModel::new(1.5).is_err());
    }
}
