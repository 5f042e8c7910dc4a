//! Perception memory (append-only per-stream token store) and cognition
//! pooling (the sampler that selects tokens for a cognition call).
//!
//! Single-writer discipline: the perception loop appends and marks
//! triggers; a cognition call receives a cloned snapshot of the pooled
//! selection taken synchronously at decision time, so a slow backend never
//! observes a half-written memory.

use std::collections::VecDeque;
use std::fmt;

use crate::epfe::PerceptionToken;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolStrategy {
    Uniform,
    LastK,
    Stride,
}

impl PoolStrategy {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "uniform" => Some(PoolStrategy::Uniform),
            "last_k" | "lastk" => Some(PoolStrategy::LastK),
            "stride" => Some(PoolStrategy::Stride),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PoolStrategy::Uniform => "uniform",
            PoolStrategy::LastK => "last_k",
            PoolStrategy::Stride => "stride",
        }
    }
}

/// How tokens are sampled from the window since the previous trigger.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolingPolicy {
    pub strategy: PoolStrategy,
    pub capacity: usize,
}

impl PoolingPolicy {
    pub fn new(strategy: PoolStrategy, capacity: usize) -> Self {
        assert!(capacity >= 1, "pooling capacity must be at least 1");
        PoolingPolicy { strategy, capacity }
    }
}

impl Default for PoolingPolicy {
    fn default() -> Self {
        PoolingPolicy {
            strategy: PoolStrategy::Uniform,
            capacity: 16,
        }
    }
}

#[derive(Debug)]
pub enum MemoryError {
    OutOfOrder { last: u64, attempted: u64 },
    EmptyPool,
}

impl fmt::Display for MemoryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MemoryError::OutOfOrder { last, attempted } => {
                write!(f, "append of frame {attempted} after frame {last} (indices must increase)")
            }
            MemoryError::EmptyPool => write!(f, "cannot pool from an empty memory"),
        }
    }
}

impl std::error::Error for MemoryError {}

/// Append-only store of perception tokens for one stream.
#[derive(Debug, Clone, Default)]
pub struct PerceptionMemory {
    tokens: VecDeque<PerceptionToken>,
    last_trigger_frame: Option<u64>,
    /// When set, oldest tokens are evicted past this many entries (bounded
    /// memory for long benchmark runs). Unbounded by default.
    ring_capacity: Option<usize>,
}

impl PerceptionMemory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Ring-buffer variant for the benchmark harness.
    pub fn with_ring_capacity(cap: usize) -> Self {
        PerceptionMemory {
            ring_capacity: Some(cap.max(1)),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn last_trigger_frame(&self) -> Option<u64> {
        self.last_trigger_frame
    }

    pub fn latest_frame(&self) -> Option<u64> {
        self.tokens.back().map(|t| t.frame_index)
    }

    /// O(1); frame indices must be strictly increasing.
    pub fn append(&mut self, token: PerceptionToken) -> Result<(), MemoryError> {
        if let Some(last) = self.latest_frame() {
            if token.frame_index <= last {
                return Err(MemoryError::OutOfOrder {
                    last,
                    attempted: token.frame_index,
                });
            }
        }
        self.tokens.push_back(token);
        if let Some(cap) = self.ring_capacity {
            while self.tokens.len() > cap {
                self.tokens.pop_front();
            }
        }
        Ok(())
    }

    /// Marks the frame whose respond decision opened the gate. Pool before
    /// marking: the pooled window ends at the trigger frame.
    pub fn mark_trigger(&mut self, frame_index: u64) {
        self.last_trigger_frame = Some(frame_index);
    }

    /// Tokens newer than the last trigger, oldest first.
    fn window(&self) -> Vec<&PerceptionToken> {
        match self.last_trigger_frame {
            None => self.tokens.iter().collect(),
            Some(t) => self.tokens.iter().filter(|tok| tok.frame_index > t).collect(),
        }
    }

    /// Deterministic sample of at most `policy.capacity` tokens from the
    /// window `(last_trigger_frame, latest]`, in memory order, always
    /// including the latest token.
    pub fn pool(&self, policy: &PoolingPolicy) -> Result<Vec<PerceptionToken>, MemoryError> {
        if self.tokens.is_empty() {
            return Err(MemoryError::EmptyPool);
        }
        let window = self.window();
        let w = window.len();
        if w == 0 {
            // everything up to and including the trigger was consumed; fall
            // back to the latest token so a caller always gets context
            return Ok(vec![self.tokens.back().unwrap().clone()]);
        }
        let picks = pool_indices(w, policy);
        Ok(picks.into_iter().map(|i| window[i].clone()).collect())
    }
}

/// Indices selected from a window of `window_len` tokens under a policy.
/// Shared by the live memory and the trainer, so training-time pooling and
/// inference-time pooling can never drift apart.
pub fn pool_indices(window_len: usize, policy: &PoolingPolicy) -> Vec<usize> {
    let w = window_len;
    let k = policy.capacity;
    if w <= k {
        return (0..w).collect();
    }
    match policy.strategy {
        // evenly spaced: ceil((i+1) * w / k) - 1 lands on the latest token
        // at i = k-1
        PoolStrategy::Uniform => (0..k).map(|i| ((i + 1) * w).div_ceil(k) - 1).collect(),
        PoolStrategy::LastK => (w - k..w).collect(),
        PoolStrategy::Stride => {
            let step = w.div_ceil(k);
            let mut idx: Vec<usize> = (0..)
                .map(|j| (w - 1).wrapping_sub(j * step))
                .take_while(|&i| i < w)
                .take(k)
                .collect();
            idx.reverse();
            idx
        }
    }
}
