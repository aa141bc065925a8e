//! Head-wise sliding-window masks for multi-view self-attention.
//!
//! Head `i` sees a window of `w_i` positions centred on each token: `(w_i-1)/2`
//! neighbours on either side plus the token itself. The default schedule is
//! `w_0 = 1` and `w_i = 2^i + 1`, so heads range from self-only to wide
//! context, and the same schedule is used at every layer unless overridden.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::numerics::Tensor;
use crate::{Error, Result};

/// Largest head count the doubling schedule supports without overflow.
pub const MAX_SCHEDULED_HEADS: usize = 48;

/// Window of head `i` under the doubling schedule: 1 for head 0, `2^i + 1`
/// otherwise.
pub fn window_size(head: usize) -> usize {
    if head == 0 {
        1
    } else {
        (1usize << head) + 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowSchedule {
    windows: Vec<usize>,
}

impl WindowSchedule {
    /// The doubling schedule for `heads` heads.
    pub fn doubling(heads: usize) -> Result<Self> {
        if heads == 0 || heads > MAX_SCHEDULED_HEADS {
            return Err(Error::config(format!(
                "head count {heads} outside 1..={MAX_SCHEDULED_HEADS}"
            )));
        }
        Ok(WindowSchedule {
            windows: (0..heads).map(window_size).collect(),
        })
    }

    /// Explicit per-head windows; each must be odd and positive.
    pub fn custom(windows: Vec<usize>) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::config("window schedule needs at least one head"));
        }
        if let Some(w) = windows.iter().find(|&&w| w == 0 || w % 2 == 0) {
            return Err(Error::config(format!("window {w} is not odd and positive")));
        }
        Ok(WindowSchedule { windows })
    }

    /// Every head sees the whole sequence of `n_steps` tokens.
    pub fn unrestricted(heads: usize, n_steps: usize) -> Self {
        WindowSchedule {
            windows: vec![2 * n_steps.max(1) - 1; heads.max(1)],
        }
    }

    pub fn heads(&self) -> usize {
        self.windows.len()
    }

    pub fn windows(&self) -> &[usize] {
        &self.windows
    }

    pub fn window(&self, head: usize) -> Result<usize> {
        self.windows.get(head).copied().ok_or(Error::Index {
            what: "attention head",
            index: head,
            len: self.windows.len(),
        })
    }

    pub fn min_window(&self) -> usize {
        *self.windows.iter().min().expect("non-empty")
    }

    pub fn max_window(&self) -> usize {
        *self.windows.iter().max().expect("non-empty")
    }
}

/// What happens to the `[CLS]` row and column when a sequence carries one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ClsPolicy {
    /// `[CLS]` is windowed like any other position.
    #[default]
    Windowed,
    /// `[CLS]` attends to, and is attended by, every position in every head.
    Global,
}

/// One binary `N×N` mask per head. Broadcast over the batch it forms the
/// `B×H×N×N` multiplicative mask of the attention layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    n_steps: usize,
    heads: usize,
    cells: Vec<bool>,
    cls_index: Option<usize>,
    cls_policy: ClsPolicy,
}

impl MaskSet {
    pub fn build(
        schedule: &WindowSchedule,
        n_steps: usize,
        cls_index: Option<usize>,
        cls_policy: ClsPolicy,
    ) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::config("mask needs at least one step"));
        }
        if let Some(c) = cls_index {
            if c >= n_steps {
                return Err(Error::Index {
                    what: "[CLS] position",
                    index: c,
                    len: n_steps,
                });
            }
        }
        let n = n_steps;
        let mut cells = vec![false; schedule.heads() * n * n];
        for (h, &w) in schedule.windows().iter().enumerate() {
            let half = (w - 1) / 2;
            for t in 0..n {
                for u in 0..n {
                    let global = cls_policy == ClsPolicy::Global && (cls_index == Some(t) || cls_index == Some(u));
                    cells[(h * n + t) * n + u] = global || t.abs_diff(u) <= half;
                }
            }
        }
        Ok(MaskSet {
            n_steps,
            heads: schedule.heads(),
            cells,
            cls_index,
            cls_policy,
        })
    }

    /// All-ones masks: plain multi-head attention.
    pub fn full(heads: usize, n_steps: usize) -> Self {
        MaskSet {
            n_steps,
            heads,
            cells: vec![true; heads * n_steps * n_steps],
            cls_index: None,
            cls_policy: ClsPolicy::Windowed,
        }
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn cls_index(&self) -> Option<usize> {
        self.cls_index
    }

    pub fn cls_policy(&self) -> ClsPolicy {
        self.cls_policy
    }

    pub fn get(&self, head: usize, t: usize, u: usize) -> bool {
        self.cells[(head * self.n_steps + t) * self.n_steps + u]
    }

    pub fn head(&self, head: usize) -> &[bool] {
        let nn = self.n_steps * self.n_steps;
        &self.cells[head * nn..(head + 1) * nn]
    }

    /// Flattened `[H, N, N]` cells.
    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn is_full(&self) -> bool {
        self.cells.iter().all(|&c| c)
    }

    /// Entry-wise AND with a lower-triangular causal mask.
    pub fn with_causal(&self) -> Self {
        let n = self.n_steps;
        let mut out = self.clone();
        for (i, c) in out.cells.iter_mut().enumerate() {
            let (t, u) = ((i / n) % n, i % n);
            *c = *c && u <= t;
        }
        out
    }

    /// `[H, N, N]` tensor of zeros and ones.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.cells.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![self.heads, self.n_steps, self.n_steps], data).expect("mask shape")
    }
}

/// Lower-triangular causal mask for a single head.
pub fn causal_mask(n_steps: usize) -> Vec<bool> {
    (0..n_steps * n_steps).map(|i| i % n_steps <= i / n_steps).collect()
}

/// Receptive-field extent at layer `layer` (1-based): `layer × w_min` to
/// `layer × w_max`. Not clipped to any sequence length.
pub fn receptive_field_bounds(layer: usize, schedule: &WindowSchedule) -> Result<(usize, usize)> {
    if layer == 0 {
        return Err(Error::config("layers are numbered from 1"));
    }
    Ok((layer * schedule.min_window(), layer * schedule.max_window()))
}

/// Square boolean matrix used by the reachability oracle.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Reachability {
    pub n: usize,
    pub cells: Vec<bool>,
}

impl Reachability {
    pub fn identity(n: usize) -> Self {
        Reachability {
            n,
            cells: (0..n * n).map(|i| i / n == i % n).collect(),
        }
    }

    pub fn get(&self, t: usize, u: usize) -> bool {
        self.cells[t * self.n + u]
    }

    /// Boolean product `self ∘ other`.
    pub fn compose(&self, other: &Reachability) -> Reachability {
        let n = self.n;
        let mut cells = vec![false; n * n];
        for t in 0..n {
            for u in 0..n {
                if self.cells[t * n + u] {
                    for v in 0..n {
                        cells[t * n + v] |= other.cells[u * n + v];
                    }
                }
            }
        }
        Reachability { n, cells }
    }
}

/// Per-head reachability after `n_layers` stacked layers that all use that
/// head's band mask: the boolean `n_layers`-th power of the mask. Brute force;
/// intended for small instances in tests.
pub fn reachability_oracle(
    schedule: &WindowSchedule,
    n_layers: usize,
    n_steps: usize,
) -> Result<Vec<Reachability>> {
    let masks = MaskSet::build(schedule, n_steps, None, ClsPolicy::Windowed)?;
    Ok((0..schedule.heads())
        .map(|h| {
            let m = Reachability {
                n: n_steps,
                cells: masks.head(h).to_vec(),
            };
            (0..n_layers).fold(Reachability::identity(n_steps), |r, _| r.compose(&m))
        })
        .collect())
}
