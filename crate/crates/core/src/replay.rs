//! Transition storage and sub-plan sampling.
//!
//! Transitions from any number of interleaved episodes go into one ring
//! buffer. Each slot remembers the slot holding the next step of its episode,
//! so a sampled plan always follows one episode even when producers
//! interleave. See `docs/replay-format.md` for the snapshot layout.

use std::collections::HashMap;
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;

use crate::envs::{PlanFrame, TerminalKind};
use crate::error::{GpmError, Result};
use crate::plan::world_to_ego;

/// One environment step. For setpoint tasks `action` is in the world frame
/// and `frame_origin` is the agent position at `state`.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: TerminalKind,
    pub episode_id: u64,
    pub step_index: u64,
    pub frame_origin: Vec<f64>,
}

/// A stored sub-plan anchored at one transition.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanItem {
    pub state: Vec<f64>,
    /// Actions in environment units, expressed in the anchor's frame.
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub next_state: Vec<f64>,
    pub bootstrap: bool,
    pub episode_id: u64,
    pub step_index: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampledPlanBatch {
    pub items: Vec<PlanItem>,
}

impl SampledPlanBatch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.items.iter().map(|i| i.actions.len()).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    frame: PlanFrame,
    slots: Vec<Transition>,
    next: Vec<Option<usize>>,
    /// Physical index of the oldest transition.
    start: usize,
    open: HashMap<u64, usize>,
    pushed: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, frame: PlanFrame) -> Result<Self> {
        if capacity == 0 {
            return Err(GpmError::Config("replay_capacity must be at least 1".into()));
        }
        Ok(Self {
            capacity,
            frame,
            slots: Vec::new(),
            next: Vec::new(),
            start: 0,
            open: HashMap::new(),
            pushed: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn frame(&self) -> PlanFrame {
        self.frame
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Transitions pushed over the buffer's lifetime, evicted or not.
    pub fn total_pushed(&self) -> u64 {
        self.pushed
    }

    /// The `i`-th oldest stored transition.
    pub fn get(&self, i: usize) -> &Transition {
        &self.slots[self.physical(i)]
    }

    fn physical(&self, i: usize) -> usize {
        (self.start + i) % self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        let slot = if self.slots.len() < self.capacity {
            self.slots.push(t.clone());
            self.next.push(None);
            self.slots.len() - 1
        } else {
            let slot = self.start;
            let old = &self.slots[slot];
            if self.open.get(&old.episode_id) == Some(&slot) {
                self.open.remove(&old.episode_id);
            }
            self.slots[slot] = t.clone();
            self.next[slot] = None;
            self.start = (self.start + 1) % self.capacity;
            slot
        };
        if let Some(prev) = self.open.remove(&t.episode_id) {
            let p = &self.slots[prev];
            if p.episode_id == t.episode_id && p.step_index + 1 == t.step_index && !p.terminal.ends_episode() {
                self.next[prev] = Some(slot);
            }
        }
        if !t.terminal.ends_episode() {
            self.open.insert(t.episode_id, slot);
        }
        self.pushed += 1;
    }

    /// Follows up to `l` steps of one episode from logical index `anchor`.
    pub fn plan_at(&self, anchor: usize, l: usize) -> PlanItem {
        let first = self.physical(anchor);
        let head = &self.slots[first];
        let mut item = PlanItem {
            state: head.state.clone(),
            actions: Vec::with_capacity(l),
            rewards: Vec::with_capacity(l),
            next_state: Vec::new(),
            bootstrap: true,
            episode_id: head.episode_id,
            step_index: head.step_index,
        };
        let mut cur = Some(first);
        while let Some(idx) = cur {
            let t = &self.slots[idx];
            let action = match self.frame {
                PlanFrame::RawAction => t.action.clone(),
                PlanFrame::EgoSetpoint => world_to_ego(&t.action, &head.frame_origin),
            };
            item.actions.push(action);
            item.rewards.push(t.reward);
            item.next_state = t.next_state.clone();
            item.bootstrap = t.terminal != TerminalKind::Terminal;
            if item.actions.len() == l || t.terminal.ends_episode() {
                break;
            }
            cur = self.next[idx];
        }
        item
    }

    /// Samples `batch` anchors uniformly and a plan length `l ~ U(1, L)` for
    /// each, truncated at the end of the stored episode.
    pub fn sample_plan_batch<R: Rng + ?Sized>(&self, batch: usize, max_len: usize, rng: &mut R) -> Result<SampledPlanBatch> {
        if self.is_empty() {
            return Err(GpmError::Usage("sampling from an empty replay buffer".into()));
        }
        if max_len == 0 {
            return Err(GpmError::Usage("plan length must be at least 1".into()));
        }
        let items = (0..batch)
            .map(|_| {
                let anchor = rng.random_range(0..self.len());
                let l = if max_len == 1 { 1 } else { rng.random_range(1..=max_len) };
                self.plan_at(anchor, l)
            })
            .collect();
        Ok(SampledPlanBatch { items })
    }

    /// Plain one-step transition batches.
    pub fn sample_transitions<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<SampledPlanBatch> {
        if self.is_empty() {
            return Err(GpmError::Usage("sampling from an empty replay buffer".into()));
        }
        let items = (0..batch)
            .map(|_| {
                let t = self.get(rng.random_range(0..self.len()));
                PlanItem {
                    state: t.state.clone(),
                    actions: vec![match self.frame {
                        PlanFrame::RawAction => t.action.clone(),
                        PlanFrame::EgoSetpoint => world_to_ego(&t.action, &t.frame_origin),
                    }],
                    rewards: vec![t.reward],
                    next_state: t.next_state.clone(),
                    bootstrap: t.terminal != TerminalKind::Terminal,
                    episode_id: t.episode_id,
                    step_index: t.step_index,
                }
            })
            .collect();
        Ok(SampledPlanBatch { items })
    }

    /// Writes the buffer, oldest first.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        let first = self.slots.first();
        let dims = first.map_or((0, 0, 0), |t| (t.state.len(), t.action.len(), t.frame_origin.len()));
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_u32::<LittleEndian>(SNAPSHOT_VERSION)?;
        w.write_u8(match self.frame {
            PlanFrame::RawAction => 0,
            PlanFrame::EgoSetpoint => 1,
        })?;
        w.write_u32::<LittleEndian>(dims.0 as u32)?;
        w.write_u32::<LittleEndian>(dims.1 as u32)?;
        w.write_u32::<LittleEndian>(dims.2 as u32)?;
        w.write_u64::<LittleEndian>(self.capacity as u64)?;
        w.write_u64::<LittleEndian>(self.pushed)?;
        w.write_u64::<LittleEndian>(self.len() as u64)?;
        for i in 0..self.len() {
            let t = self.get(i);
            if (t.state.len(), t.action.len(), t.frame_origin.len()) != dims || t.next_state.len() != dims.0 {
                return Err(GpmError::Format(format!("transition {i} has inconsistent widths")));
            }
            w.write_u64::<LittleEndian>(t.episode_id)?;
            w.write_u64::<LittleEndian>(t.step_index)?;
            w.write_u8(t.terminal.as_u8())?;
            w.write_f64::<LittleEndian>(t.reward)?;
            for v in t.state.iter().chain(&t.action).chain(&t.next_state).chain(&t.frame_origin) {
                w.write_f64::<LittleEndian>(*v)?;
            }
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(GpmError::Format("not a replay snapshot".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != SNAPSHOT_VERSION {
            return Err(GpmError::Format(format!("unsupported snapshot version {version}")));
        }
        let frame = match r.read_u8()? {
            0 => PlanFrame::RawAction,
            1 => PlanFrame::EgoSetpoint,
            f => return Err(GpmError::Format(format!("unknown frame tag {f}"))),
        };
        let obs = r.read_u32::<LittleEndian>()? as usize;
        let act = r.read_u32::<LittleEndian>()? as usize;
        let org = r.read_u32::<LittleEndian>()? as usize;
        let capacity = r.read_u64::<LittleEndian>()? as usize;
        let pushed = r.read_u64::<LittleEndian>()?;
        let count = r.read_u64::<LittleEndian>()? as usize;
        if count > capacity {
            return Err(GpmError::Format("more records than capacity".into()));
        }
        let mut buf = Self::new(capacity, frame)?;
        let read_vec = |r: &mut R, n: usize| -> Result<Vec<f64>> {
            (0..n).map(|_| Ok(r.read_f64::<LittleEndian>()?)).collect()
        };
        for _ in 0..count {
            let episode_id = r.read_u64::<LittleEndian>()?;
            let step_index = r.read_u64::<LittleEndian>()?;
            let terminal = TerminalKind::from_u8(r.read_u8()?)
                .ok_or_else(|| GpmError::Format("unknown terminal code".into()))?;
            let reward = r.read_f64::<LittleEndian>()?;
            let state = read_vec(&mut r, obs)?;
            let action = read_vec(&mut r, act)?;
            let next_state = read_vec(&mut r, obs)?;
            let frame_origin = read_vec(&mut r, org)?;
            buf.push(Transition {
                state,
                action,
                reward,
                next_state,
                terminal,
                episode_id,
                step_index,
                frame_origin,
            });
        }
        buf.pushed = pushed;
        Ok(buf)
    }
}

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"GPMR";
pub const SNAPSHOT_VERSION: u32 = 1;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tr(ep: u64, step: u64, terminal: TerminalKind) -> Transition {
        Transition {
            state: vec![step as f64],
            action: vec![ep as f64 * 100.0 + step as f64],
            reward: step as f64 + 0.5,
            next_state: vec![step as f64 + 1.0],
            terminal,
            episode_id: ep,
            step_index: step,
            frame_origin: Vec::new(),
        }
    }

    #[test]
    fn ring_evicts_oldest() {
        let mut b = ReplayBuffer::new(2, PlanFrame::RawAction).unwrap();
        for s in 0..3 {
            b.push(tr(0, s, TerminalKind::None));
        }
        assert_eq!(b.len(), 2);
        assert_eq!(b.get(0).step_index, 1);
        assert_eq!(b.get(1).step_index, 2);
        assert_eq!(b.total_pushed(), 3);
    }

    #[test]
    fn truncates_at_true_terminal() {
        let mut b = ReplayBuffer::new(100, PlanFrame::RawAction).unwrap();
        for s in 0..10 {
            let kind = if s == 9 { TerminalKind::Terminal } else { TerminalKind::None };
            b.push(tr(0, s, kind));
        }
        b.push(tr(1, 0, TerminalKind::None));
        // Anchor two steps before the terminal.
        let item = b.plan_at(8, 5);
        assert_eq!(item.actions.len(), 2);
        assert!(!item.bootstrap);
        assert_eq!(item.rewards, vec![8.5, 9.5]);
        let short = b.plan_at(8, 1);
        assert!(short.bootstrap);
    }

    #[test]
    fn timeout_ends_plan_but_bootstraps() {
        let mut b = ReplayBuffer::new(100, PlanFrame::RawAction).unwrap();
        b.push(tr(0, 0, TerminalKind::None));
        b.push(tr(0, 1, TerminalKind::Timeout));
        b.push(tr(1, 0, TerminalKind::None));
        let item = b.plan_at(0, 5);
        assert_eq!(item.actions.len(), 2);
        assert!(item.bootstrap);
        assert_eq!(item.next_state, vec![2.0]);
    }

    #[test]
    fn interleaved_episodes_stay_separate() {
        let mut b = ReplayBuffer::new(100, PlanFrame::RawAction).unwrap();
        for s in 0..5 {
            b.push(tr(0, s, TerminalKind::None));
            b.push(tr(1, s, TerminalKind::None));
        }
        let item = b.plan_at(0, 4);
        assert_eq!(item.actions, vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0]]);
        let item = b.plan_at(1, 4);
        assert_eq!(item.actions, vec![vec![100.0], vec![101.0], vec![102.0], vec![103.0]]);
    }

    #[test]
    fn single_step_sampling_draws_no_lengths() {
        let mut b = ReplayBuffer::new(100, PlanFrame::RawAction).unwrap();
        for s in 0..50 {
            b.push(tr(0, s, TerminalKind::None));
        }
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a = b.sample_plan_batch(32, 1, &mut r1).unwrap();
        let t = b.sample_transitions(32, &mut r2).unwrap();
        assert_eq!(a, t);
        assert!(a.items.iter().all(|i| i.actions.len() == 1));
    }

    #[test]
    fn empty_buffer_is_an_error() {
        let b = ReplayBuffer::new(10, PlanFrame::RawAction).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(b.sample_plan_batch(4, 3, &mut rng).is_err());
        assert!(ReplayBuffer::new(0, PlanFrame::RawAction).is_err());
    }

    #[test]
    fn setpoints_are_reexpressed_in_anchor_frame() {
        let mut b = ReplayBuffer::new(10, PlanFrame::EgoSetpoint).unwrap();
        for s in 0..3u64 {
            let origin = vec![s as f64, 0.0];
            b.push(Transition {
                state: vec![0.0],
                action: vec![s as f64 + 1.0, 2.0],
                reward: 0.0,
                next_state: vec![0.0],
                terminal: TerminalKind::None,
                episode_id: 0,
                step_index: s,
                frame_origin: origin,
            });
        }
        let item = b.plan_at(1, 2);
        assert_eq!(item.actions, vec![vec![1.0, 2.0], vec![2.0, 2.0]]);
    }

    #[test]
    fn snapshot_round_trip_preserves_sampling() {
        let mut b = ReplayBuffer::new(16, PlanFrame::RawAction).unwrap();
        for ep in 0..4 {
            for s in 0..7 {
                let kind = if s == 6 { TerminalKind::Timeout } else { TerminalKind::None };
                b.push(tr(ep, s, kind));
            }
        }
        let mut bytes = Vec::new();
        b.write_snapshot(&mut bytes).unwrap();
        let c = ReplayBuffer::read_snapshot(bytes.as_slice()).unwrap();
        assert_eq!(c.len(), b.len());
        assert_eq!(c.total_pushed(), b.total_pushed());
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            b.sample_plan_batch(64, 4, &mut r1).unwrap(),
            c.sample_plan_batch(64, 4, &mut r2).unwrap()
        );
        assert!(ReplayBuffer::read_snapshot(&b"NOPE"[..]).is_err());
    }
}
