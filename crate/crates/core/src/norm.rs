//! Normalization layers over `(M, C, F)` tensors.
//!
//! All six techniques share one kernel: the input is partitioned into slices,
//! every slice is independently shifted to mean 0 and scaled by
//! `1/sqrt(var + eps)` (biased variance, divisor `n`), and the slices are
//! concatenated back into the original shape. The techniques differ only in
//! the partition:
//!
//! * `Batch`    — `C` slices of `(M, F)`, one per channel
//! * `Layer`    — `M` slices of `(C, F)`, one per sample
//! * `Instance` — `M*C` slices of `F`
//! * `Group`    — `M*G_C` slices of `(C/G_C, F)` (channel groups per sample)
//! * `Ghost`    — `C*G_M` slices of `(M/G_M, F)` (batch groups per channel)
//! * `Seq`      — Group slicing first, then Ghost slicing on the result,
//!                with a single affine transform after the second stage
//!
//! Every slice of each partition is a set of whole samples crossed with a
//! contiguous channel range, so a slice is described exactly by a
//! [`SliceBlock`] (`m0..m1` x `c0..c1`, all of `F`).
//!
//! Backward passes are derived by hand from the per-slice normalization. For
//! a slice of `n` elements with cached normalized values `x̂` and upstream
//! gradient `u` (already routed through the affine scale):
//!
//! ```text
//! dx_i = inv_std * (u_i - mean(u) - x̂_i * mean(u * x̂))
//! ```
//!
//! plus `dgamma[c] = Σ dy*x̂` and `dbeta[c] = Σ dy` per channel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{check_batch_grouping, check_channel_grouping, slice_stats, Tensor3};

/// Which normalization technique a layer applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Batch,
    Layer,
    Instance,
    Group,
    Ghost,
    Seq,
}

impl NormKind {
    pub fn name(self) -> &'static str {
        match self {
            NormKind::Batch => "batch",
            NormKind::Layer => "layer",
            NormKind::Instance => "instance",
            NormKind::Group => "group",
            NormKind::Ghost => "ghost",
            NormKind::Seq => "seq",
        }
    }

    /// Batch-statistics kinds keep running per-channel statistics for
    /// inference; the per-sample kinds behave identically in both modes.
    pub fn tracks_running_stats(self) -> bool {
        matches!(self, NormKind::Batch | NormKind::Ghost | NormKind::Seq)
    }
}

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Static configuration of a normalization layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormSpec {
    pub kind: NormKind,
    /// Channel group count (used by Group and Seq).
    pub g_c: usize,
    /// Batch group count (used by Ghost and Seq).
    pub g_m: usize,
    pub eps: f64,
    /// EMA momentum for running statistics: `running = (1-m)*running + m*batch`.
    pub momentum: f64,
    pub affine: bool,
}

impl NormSpec {
    fn new(kind: NormKind, g_c: usize, g_m: usize) -> Self {
        Self { kind, g_c, g_m, eps: DEFAULT_EPS, momentum: DEFAULT_MOMENTUM, affine: true }
    }

    pub fn batch() -> Self {
        Self::new(NormKind::Batch, 1, 1)
    }

    pub fn layer() -> Self {
        Self::new(NormKind::Layer, 1, 1)
    }

    pub fn instance() -> Self {
        Self::new(NormKind::Instance, 1, 1)
    }

    pub fn group(g_c: usize) -> Self {
        Self::new(NormKind::Group, g_c, 1)
    }

    pub fn ghost(g_m: usize) -> Self {
        Self::new(NormKind::Ghost, 1, g_m)
    }

    pub fn seq(g_c: usize, g_m: usize) -> Self {
        Self::new(NormKind::Seq, g_c, g_m)
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub fn with_momentum(mut self, momentum: f64) -> Self {
        self.momentum = momentum;
        self
    }

    pub fn without_affine(mut self) -> Self {
        self.affine = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be > 0, got {}", self.eps)));
        }
        if !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return Err(Error::Config(format!(
                "momentum must lie in (0, 1], got {}",
                self.momentum
            )));
        }
        if self.g_c == 0 || self.g_m == 0 {
            return Err(Error::Config("group counts must be at least 1".into()));
        }
        Ok(())
    }
}

/// Learned and accumulated per-channel state of a normalization layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// False until the first running-statistics update; inference with the
    /// batch-statistics kinds is rejected before that.
    pub initialized: bool,
    pub training: bool,
}

impl NormState {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![0.0; channels],
            initialized: false,
            training: true,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// One slice of a partition: samples `m0..m1` crossed with channels `c0..c1`
/// and the full spatial extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SliceBlock {
    pub m0: usize,
    pub m1: usize,
    pub c0: usize,
    pub c1: usize,
}

impl SliceBlock {
    fn element_count(&self, f: usize) -> usize {
        (self.m1 - self.m0) * (self.c1 - self.c0) * f
    }

    /// The block's elements as contiguous runs of the flat buffer, one run
    /// per sample.
    fn runs(&self, c: usize, f: usize) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        let run_len = (self.c1 - self.c0) * f;
        let sample_stride = c * f;
        let c_off = self.c0 * f;
        (self.m0..self.m1).map(move |mi| {
            let start = mi * sample_stride + c_off;
            start..start + run_len
        })
    }
}

/// A partition of an `(M, C, F)` tensor into normalization slices.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceLayout {
    m: usize,
    c: usize,
    f: usize,
    blocks: Vec<SliceBlock>,
}

impl SliceLayout {
    pub fn batch(m: usize, c: usize, f: usize) -> Self {
        let blocks = (0..c).map(|ci| SliceBlock { m0: 0, m1: m, c0: ci, c1: ci + 1 }).collect();
        Self { m, c, f, blocks }
    }

    pub fn layer(m: usize, c: usize, f: usize) -> Self {
        let blocks = (0..m).map(|mi| SliceBlock { m0: mi, m1: mi + 1, c0: 0, c1: c }).collect();
        Self { m, c, f, blocks }
    }

    pub fn instance(m: usize, c: usize, f: usize) -> Self {
        let mut blocks = Vec::with_capacity(m * c);
        for mi in 0..m {
            for ci in 0..c {
                blocks.push(SliceBlock { m0: mi, m1: mi + 1, c0: ci, c1: ci + 1 });
            }
        }
        Self { m, c, f, blocks }
    }

    pub fn group(m: usize, c: usize, f: usize, g_c: usize) -> Result<Self> {
        check_channel_grouping(c, g_c)?;
        let per = c / g_c;
        let mut blocks = Vec::with_capacity(m * g_c);
        for mi in 0..m {
            for j in 0..g_c {
                blocks.push(SliceBlock { m0: mi, m1: mi + 1, c0: j * per, c1: (j + 1) * per });
            }
        }
        Ok(Self { m, c, f, blocks })
    }

    pub fn ghost(m: usize, c: usize, f: usize, g_m: usize) -> Result<Self> {
        check_batch_grouping(m, g_m)?;
        let per = m / g_m;
        let mut blocks = Vec::with_capacity(c * g_m);
        for g in 0..g_m {
            for ci in 0..c {
                blocks.push(SliceBlock { m0: g * per, m1: (g + 1) * per, c0: ci, c1: ci + 1 });
            }
        }
        Ok(Self { m, c, f, blocks })
    }

    /// Builds a layout from explicit blocks, verifying that they partition
    /// the whole tensor: every element covered exactly once.
    pub fn from_blocks(
        m: usize,
        c: usize,
        f: usize,
        blocks: Vec<SliceBlock>,
    ) -> Result<Self> {
        let mut covered = vec![false; m * c];
        for b in &blocks {
            if b.m0 >= b.m1 || b.m1 > m || b.c0 >= b.c1 || b.c1 > c {
                return Err(Error::InvalidPartition(format!("block {b:?} out of bounds or empty")));
            }
            for mi in b.m0..b.m1 {
                for ci in b.c0..b.c1 {
                    let cell = &mut covered[mi * c + ci];
                    if *cell {
                        return Err(Error::InvalidPartition(format!(
                            "element (m={mi}, c={ci}) covered twice"
                        )));
                    }
                    *cell = true;
                }
            }
        }
        if covered.iter().any(|&v| !v) {
            return Err(Error::InvalidPartition("partition does not cover the tensor".into()));
        }
        Ok(Self { m, c, f, blocks })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.m, self.c, self.f)
    }

    pub fn blocks(&self) -> &[SliceBlock] {
        &self.blocks
    }
}

/// Per-slice statistics saved by the forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceStats {
    pub mean: f64,
    pub var: f64,
    pub inv_std: f64,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub enum NormCache {
    /// Training-style normalization over an explicit slice partition.
    Sliced { layout: SliceLayout, stats: Vec<SliceStats>, normalized: Tensor3 },
    /// Inference normalization with per-channel running statistics.
    Running { inv_std: Vec<f64>, normalized: Tensor3 },
    /// Seq keeps one cache per stage, in application order.
    Seq { group: Box<NormCache>, ghost: Box<NormCache> },
}

impl NormCache {
    /// The final pre-affine normalized tensor.
    pub fn normalized(&self) -> &Tensor3 {
        match self {
            NormCache::Sliced { normalized, .. } | NormCache::Running { normalized, .. } => {
                normalized
            }
            NormCache::Seq { ghost, .. } => ghost.normalized(),
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.normalized().shape()
    }
}

/// Normalizes every slice of `layout` independently: `x -> (x - μ)/sqrt(σ² + ε)`.
pub fn normalize_slices(x: &Tensor3, layout: &SliceLayout, eps: f64) -> Result<(Tensor3, NormCache)> {
    if layout.shape() != x.shape() {
        return Err(Error::InvalidPartition(format!(
            "layout for {:?} applied to tensor {:?}",
            layout.shape(),
            x.shape()
        )));
    }
    let (_, c, f) = x.shape();
    let data = x.data();
    let mut out = vec![0.0; data.len()];
    let mut stats = Vec::with_capacity(layout.blocks.len());
    let mut scratch: Vec<f64> = Vec::new();
    for block in &layout.blocks {
        scratch.clear();
        for run in block.runs(c, f) {
            scratch.extend_from_slice(&data[run]);
        }
        let (mean, var) = slice_stats(&scratch)?;
        let inv_std = 1.0 / (var + eps).sqrt();
        for run in block.runs(c, f) {
            for i in run {
                out[i] = (data[i] - mean) * inv_std;
            }
        }
        stats.push(SliceStats { mean, var, inv_std });
    }
    let normalized = Tensor3::from_values(x.shape(), out)?;
    Ok((
        normalized.clone(),
        NormCache::Sliced { layout: layout.clone(), stats, normalized },
    ))
}

fn normalize_running(x: &Tensor3, state: &NormState, eps: f64) -> Result<(Tensor3, NormCache)> {
    if !state.initialized {
        return Err(Error::UninitializedStats);
    }
    let inv_std: Vec<f64> =
        state.running_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = vec![0.0; x.len()];
    for (i, &v) in x.data().iter().enumerate() {
        let ch = x.channel_of(i);
        out[i] = (v - state.running_mean[ch]) * inv_std[ch];
    }
    let normalized = Tensor3::from_values(x.shape(), out)?;
    Ok((normalized.clone(), NormCache::Running { inv_std, normalized }))
}

fn warn_singleton_instance_slices() {
    use std::sync::Once;
    static ONCE: Once = Once::new();
    ONCE.call_once(|| {
        log::warn!(
            "instance normalization with F = 1 has singleton slices; every output is 0 before the affine transform"
        );
    });
}

fn layout_for(spec: &NormSpec, shape: (usize, usize, usize)) -> Result<SliceLayout> {
    let (m, c, f) = shape;
    match spec.kind {
        NormKind::Batch => Ok(SliceLayout::batch(m, c, f)),
        NormKind::Layer => Ok(SliceLayout::layer(m, c, f)),
        NormKind::Instance => {
            if f == 1 {
                warn_singleton_instance_slices();
            }
            Ok(SliceLayout::instance(m, c, f))
        }
        NormKind::Group => SliceLayout::group(m, c, f, spec.g_c),
        NormKind::Ghost => SliceLayout::ghost(m, c, f, spec.g_m),
        NormKind::Seq => Err(Error::UnsupportedKind("seq has two layouts; handled separately")),
    }
}

fn apply_affine(normalized: &Tensor3, spec: &NormSpec, state: &NormState) -> Tensor3 {
    if !spec.affine {
        return normalized.clone();
    }
    let mut out = normalized.clone();
    let f = normalized.features();
    let c = normalized.channels();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let ch = (i / f) % c;
        *v = *v * state.gamma[ch] + state.beta[ch];
    }
    out
}

/// Forward pass without any state mutation. Training mode normalizes with
/// batch statistics but leaves the running statistics untouched, which is
/// what the landscape probe relies on.
pub fn forward_frozen(spec: &NormSpec, state: &NormState, x: &Tensor3) -> Result<(Tensor3, NormCache)> {
    spec.validate()?;
    if state.channels() != x.channels() {
        return Err(Error::Shape(format!(
            "norm state has {} channels but input has {}",
            state.channels(),
            x.channels()
        )));
    }
    let cache = match spec.kind {
        NormKind::Seq => {
            let (m, c, f) = x.shape();
            let group_layout = SliceLayout::group(m, c, f, spec.g_c)?;
            let (stage1, group_cache) = normalize_slices(x, &group_layout, spec.eps)?;
            let ghost_cache = if state.training {
                let ghost_layout = SliceLayout::ghost(m, c, f, spec.g_m)?;
                let (_, cache) = normalize_slices(&stage1, &ghost_layout, spec.eps)?;
                cache
            } else {
                let (_, cache) = normalize_running(&stage1, state, spec.eps)?;
                cache
            };
            NormCache::Seq { group: Box::new(group_cache), ghost: Box::new(ghost_cache) }
        }
        kind if kind.tracks_running_stats() && !state.training => {
            let (_, cache) = normalize_running(x, state, spec.eps)?;
            cache
        }
        _ => {
            let layout = layout_for(spec, x.shape())?;
            let (_, cache) = normalize_slices(x, &layout, spec.eps)?;
            cache
        }
    };
    let y = apply_affine(cache.normalized(), spec, state);
    Ok((y, cache))
}

/// Forward pass. In training mode the batch-statistics kinds additionally
/// fold the batch statistics into the running EMA.
pub fn forward(spec: &NormSpec, state: &mut NormState, x: &Tensor3) -> Result<(Tensor3, NormCache)> {
    let (y, cache) = forward_frozen(spec, state, x)?;
    if state.training && spec.kind.tracks_running_stats() {
        update_running_stats(spec, state, &cache)?;
    }
    Ok((y, cache))
}

/// Folds the batch statistics of a training forward into the per-channel
/// running EMA. For Ghost (and Seq's ghost stage) a channel is covered by
/// `G_M` equal-sized slices, so their statistics are averaged.
pub fn update_running_stats(spec: &NormSpec, state: &mut NormState, cache: &NormCache) -> Result<()> {
    if !spec.kind.tracks_running_stats() {
        return Err(Error::UnsupportedKind(spec.kind.name()));
    }
    if !state.training {
        return Err(Error::CacheMismatch(
            "running statistics are only updated in training mode".into(),
        ));
    }
    let payload = match cache {
        NormCache::Seq { ghost, .. } => ghost.as_ref(),
        other => other,
    };
    let (layout, stats) = match payload {
        NormCache::Sliced { layout, stats, .. } => (layout, stats),
        _ => {
            return Err(Error::CacheMismatch(
                "cache was produced by an inference forward".into(),
            ))
        }
    };
    let channels = state.channels();
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    let mut count = vec![0usize; channels];
    for (block, st) in layout.blocks().iter().zip(stats) {
        for ch in block.c0..block.c1 {
            mean[ch] += st.mean;
            var[ch] += st.var;
            count[ch] += 1;
        }
    }
    for ch in 0..channels {
        if count[ch] == 0 {
            return Err(Error::CacheMismatch(format!("channel {ch} not covered by the cache")));
        }
        mean[ch] /= count[ch] as f64;
        var[ch] /= count[ch] as f64;
    }
    if state.initialized {
        let m = spec.momentum;
        for ch in 0..channels {
            state.running_mean[ch] = (1.0 - m) * state.running_mean[ch] + m * mean[ch];
            state.running_var[ch] = (1.0 - m) * state.running_var[ch] + m * var[ch];
        }
    } else {
        state.running_mean = mean;
        state.running_var = var;
        state.initialized = true;
    }
    Ok(())
}

/// Gradient of the pure normalization (no affine) given the cache and the
/// gradient `u` flowing into the normalized values.
fn backward_normalized(cache: &NormCache, u: &Tensor3) -> Result<Tensor3> {
    match cache {
        NormCache::Sliced { layout, stats, normalized } => {
            let (_, c, f) = layout.shape();
            let un = u.data();
            let xh = normalized.data();
            let mut dx = vec![0.0; un.len()];
            for (block, st) in layout.blocks().iter().zip(stats) {
                let n = block.element_count(f) as f64;
                let mut sum_u = 0.0;
                let mut sum_ux = 0.0;
                for run in block.runs(c, f) {
                    for i in run {
                        sum_u += un[i];
                        sum_ux += un[i] * xh[i];
                    }
                }
                let mean_u = sum_u / n;
                let mean_ux = sum_ux / n;
                for run in block.runs(c, f) {
                    for i in run {
                        dx[i] = st.inv_std * (un[i] - mean_u - xh[i] * mean_ux);
                    }
                }
            }
            Tensor3::from_values(u.shape(), dx)
        }
        NormCache::Running { inv_std, normalized } => {
            let mut dx = vec![0.0; u.len()];
            for (i, &uv) in u.data().iter().enumerate() {
                dx[i] = uv * inv_std[normalized.channel_of(i)];
            }
            Tensor3::from_values(u.shape(), dx)
        }
        NormCache::Seq { group, ghost } => {
            let du = backward_normalized(ghost, u)?;
            backward_normalized(group, &du)
        }
    }
}

/// Backward pass matching a forward that produced `cache`.
///
/// Returns `(dx, dgamma, dbeta)`. For Seq the two stages are chained in
/// reverse order; the affine gradients always come from the final normalized
/// values.
pub fn backward(
    spec: &NormSpec,
    state: &NormState,
    cache: &NormCache,
    dy: &Tensor3,
) -> Result<(Tensor3, Vec<f64>, Vec<f64>)> {
    let normalized = cache.normalized();
    if dy.shape() != normalized.shape() {
        return Err(Error::CacheMismatch(format!(
            "upstream gradient has shape {:?} but the cached forward produced {:?}",
            dy.shape(),
            normalized.shape()
        )));
    }
    let channels = dy.channels();
    if state.channels() != channels {
        return Err(Error::CacheMismatch("state and cache disagree on channel count".into()));
    }
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    for (i, (&g, &xh)) in dy.data().iter().zip(normalized.data()).enumerate() {
        let ch = dy.channel_of(i);
        dgamma[ch] += g * xh;
        dbeta[ch] += g;
    }
    let u = if spec.affine {
        let mut u = dy.clone();
        for (i, v) in u.data_mut().iter_mut().enumerate() {
            *v *= state.gamma[normalized.channel_of(i)];
        }
        u
    } else {
        dy.clone()
    };
    let dx = backward_normalized(cache, &u)?;
    Ok((dx, dgamma, dbeta))
}

/// A normalization layer: spec plus mutable state, as embedded in a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormLayer {
    pub spec: NormSpec,
    pub state: NormState,
}

impl NormLayer {
    pub fn new(spec: NormSpec, channels: usize) -> Self {
        Self { spec, state: NormState::new(channels) }
    }

    pub fn forward(&mut self, x: &Tensor3) -> Result<(Tensor3, NormCache)> {
        forward(&self.spec, &mut self.state, x)
    }

    pub fn forward_frozen(&self, x: &Tensor3) -> Result<(Tensor3, NormCache)> {
        forward_frozen(&self.spec, &self.state, x)
    }

    pub fn backward(&self, cache: &NormCache, dy: &Tensor3) -> Result<(Tensor3, Vec<f64>, Vec<f64>)> {
        backward(&self.spec, &self.state, cache, dy)
    }

    pub fn set_training(&mut self, training: bool) {
        self.state.training = training;
    }
}

const RANK_TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Order {
    Less,
    Tie,
    Greater,
}

fn order_of(diff: f64) -> Order {
    if diff.abs() <= RANK_TIE_TOL {
        Order::Tie
    } else if diff > 0.0 {
        Order::Greater
    } else {
        Order::Less
    }
}

/// First pair of flat indices (in `scope` order) whose relative order differs
/// between `x` and `y`, or `None` when `y` is order-isomorphic to `x` over
/// the scope. Ties must map to ties; exact equality is compared with a
/// `1e-12` tolerance to absorb rounding.
pub fn rank_flip_witness(x: &Tensor3, y: &Tensor3, scope: &[usize]) -> Option<(usize, usize)> {
    assert_eq!(x.shape(), y.shape(), "rank comparison requires equal shapes");
    assert!(!scope.is_empty(), "rank comparison requires a non-empty scope");
    let xd = x.data();
    let yd = y.data();
    for (a, &i) in scope.iter().enumerate() {
        for &j in &scope[a + 1..] {
            if order_of(xd[i] - xd[j]) != order_of(yd[i] - yd[j]) {
                return Some((i, j));
            }
        }
    }
    None
}

/// Whether normalization preserved the ranking order of the values in
/// `scope`: for all `i, j` the sign of `x_i - x_j` matches `y_i - y_j`.
pub fn rank_order_preserved(x: &Tensor3, y: &Tensor3, scope: &[usize]) -> bool {
    rank_flip_witness(x, y, scope).is_none()
}

/// Flat indices of channel `ch`: the `(M, F)` scope a BatchNorm slice covers.
pub fn channel_scope(shape: (usize, usize, usize), ch: usize) -> Vec<usize> {
    let (m, c, f) = shape;
    let mut scope = Vec::with_capacity(m * f);
    for mi in 0..m {
        for fi in 0..f {
            scope.push((mi * c + ch) * f + fi);
        }
    }
    scope
}
