use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{ExBmdp, Policy};
use crate::rng::sample_index;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    /// Latent indices `(s, xi)` before and after the step; never shown to learners.
    pub latent: (usize, usize),
    pub next_latent: (usize, usize),
}

/// FIFO store with seeded uniform sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self { capacity, items: VecDeque::with_capacity(capacity.min(1 << 16)) }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// `n` transitions drawn uniformly with replacement.
    pub fn sample<R: rand::Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        if self.items.len() < n || n == 0 {
            return Err(Error::InsufficientData { needed: n.max(1), available: self.items.len() });
        }
        Ok((0..n).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect())
    }
}

/// A running trajectory of an EX-BMDP under a policy over latent indices.
pub struct Rollout<'a, R> {
    m: &'a ExBmdp,
    pi: &'a Policy,
    rng: R,
    state: usize,
    noise: usize,
    obs: Vec<f64>,
}

impl<'a, R: rand::Rng> Rollout<'a, R> {
    pub fn new(m: &'a ExBmdp, pi: &'a Policy, mut rng: R) -> Result<Self> {
        let report = pi.validate(m.n_obs(), m.task.n_actions);
        if !report.is_empty() {
            return Err(Error::Invalid(report.issues.join("; ")));
        }
        let state = sample_index(&m.task.initial, &mut rng);
        let noise = sample_index(&m.noise.initial, &mut rng);
        let obs = m.observation_vector(state, noise, &mut rng);
        Ok(Self { m, pi, rng, state, noise, obs })
    }

    pub fn step(&mut self) -> Transition {
        let m = self.m;
        let x = m.obs_index(self.state, self.noise);
        let a = sample_index(&self.pi.table[x], &mut self.rng);
        let s2 = sample_index(&m.task.transition[self.state][a], &mut self.rng);
        let xi2 = sample_index(&m.noise.transition[self.noise], &mut self.rng);
        let next_obs = m.observation_vector(s2, xi2, &mut self.rng);
        let t = Transition {
            obs: std::mem::replace(&mut self.obs, next_obs.clone()),
            action: a,
            reward: m.task.reward[self.state][a],
            next_obs,
            latent: (self.state, self.noise),
            next_latent: (s2, xi2),
        };
        self.state = s2;
        self.noise = xi2;
        t
    }
}

/// Run `steps` transitions from the initial distribution into a fresh buffer
/// that keeps all of them.
pub fn collect_rollouts<R: rand::Rng>(m: &ExBmdp, pi: &Policy, steps: usize, rng: R) -> Result<ReplayBuffer> {
    let mut buf = ReplayBuffer::new(steps.max(1));
    let mut roll = Rollout::new(m, pi, rng)?;
    for _ in 0..steps {
        buf.push(roll.step());
    }
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{random_exbmdp, NoiseFamily};
    use crate::rng::seeded;

    fn dummy(i: usize) -> Transition {
        Transition {
            obs: vec![i as f64],
            action: 0,
            reward: 0.0,
            next_obs: vec![i as f64 + 1.0],
            latent: (0, 0),
            next_latent: (0, 0),
        }
    }

    #[test]
    fn evicts_oldest_first() {
        let mut b = ReplayBuffer::new(3);
        for i in 0..5 {
            b.push(dummy(i));
        }
        let firsts: Vec<f64> = b.iter().map(|t| t.obs[0]).collect();
        assert_eq!(firsts, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn sampling_is_seeded() {
        let mut b = ReplayBuffer::new(10);
        (0..10).for_each(|i| b.push(dummy(i)));
        let a: Vec<f64> = b.sample(6, &mut seeded(2)).unwrap().iter().map(|t| t.obs[0]).collect();
        let c: Vec<f64> = b.sample(6, &mut seeded(2)).unwrap().iter().map(|t| t.obs[0]).collect();
        assert_eq!(a, c);
        assert!(matches!(b.sample(11, &mut seeded(0)), Err(Error::InsufficientData { .. })));
    }

    #[test]
    fn rewards_follow_the_task_state() {
        let m = random_exbmdp(5, 3, 2, 2, NoiseFamily::IidDiscrete);
        let pi = Policy::uniform(m.n_obs(), 2);
        let buf = collect_rollouts(&m, &pi, 500, seeded(1)).unwrap();
        let mut prev: Option<&Transition> = None;
        for t in buf.iter() {
            assert_eq!(t.reward, m.task.reward[t.latent.0][t.action]);
            if let Some(p) = prev {
                assert_eq!(p.next_obs, t.obs);
                assert_eq!(p.next_latent, t.latent);
            }
            prev = Some(t);
        }
    }
}
