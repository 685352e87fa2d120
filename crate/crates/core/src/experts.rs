//! The five expert families and the transformer block they are built from.

use std::fmt;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExpertKind {
    #[serde(rename = "SPE")]
    Spe,
    #[serde(rename = "CRE")]
    Cre,
    #[serde(rename = "LIE")]
    Lie,
    #[serde(rename = "MIE")]
    Mie,
    #[serde(rename = "MCE")]
    Mce,
}

impl ExpertKind {
    pub const ALL: [ExpertKind; 5] = [Self::Spe, Self::Cre, Self::Lie, Self::Mie, Self::Mce];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Spe => "SPE",
            Self::Cre => "CRE",
            Self::Lie => "LIE",
            Self::Mie => "MIE",
            Self::Mce => "MCE",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown expert family {s:?}")))
    }

    /// Registered internal depth. The supervisor counts as one stage.
    pub fn depth(self) -> usize {
        match self {
            Self::Spe => 1,
            Self::Cre => 2,
            Self::Lie => 4,
            Self::Mie => 2,
            Self::Mce => 1,
        }
    }

    /// Transformer blocks actually executed on the hidden state.
    pub fn blocks(self) -> usize {
        match self {
            Self::Mce => 0,
            k => k.depth(),
        }
    }

    /// Families tried, in order, when a hint names a family the model lacks.
    pub fn fallbacks(self) -> &'static [ExpertKind] {
        use ExpertKind::*;
        match self {
            Spe => &[Spe, Cre, Lie, Mie, Mce],
            Cre => &[Cre, Lie, Spe, Mie, Mce],
            Lie => &[Lie, Cre, Mie, Spe, Mce],
            Mie => &[Mie, Lie, Cre, Spe, Mce],
            Mce => &[Mce, Lie, Cre, Spe, Mie],
        }
    }
}

impl fmt::Display for ExpertKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Block dimensions shared by every expert and baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d_model: usize,
    pub ff: usize,
    /// Local attention window length.
    pub window: usize,
    /// Memory slots of an MIE.
    pub slots: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self { d_model: 64, ff: 128, window: 24, slots: 16 }
    }
}

impl Dims {
    pub fn window_lengths(&self, n: usize) -> Vec<usize> {
        (0..n).step_by(self.window).map(|s| self.window.min(n - s)).collect()
    }
}

fn uniform(store: &mut ParamStore, name: String, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> ParamId {
    store.add_uniform(name, &[rows, cols], 1.0 / (rows as f64).sqrt(), rng)
}

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    fn new(store: &mut ParamStore, name: &str, rows: usize, cols: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let w = uniform(store, format!("{name}.w"), rows, cols, rng);
        let b = bias.then(|| store.add_const(format!("{name}.b"), &[1, cols], 0.0));
        Self { w, b }
    }

    fn zeros(store: &mut ParamStore, name: &str, rows: usize, cols: usize) -> Self {
        let w = store.add_const(format!("{name}.w"), &[rows, cols], 0.0);
        let b = Some(store.add_const(format!("{name}.b"), &[1, cols], 0.0));
        Self { w, b }
    }

    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerNorm {
    g: ParamId,
    b: ParamId,
}

impl LayerNorm {
    pub(crate) fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            g: store.add_const(format!("{name}.g"), &[1, d], 1.0),
            b: store.add_const(format!("{name}.b"), &[1, d], 0.0),
        }
    }

    /// An existing norm registered under `name`.
    pub(crate) fn find(store: &ParamStore, name: &str) -> Option<Self> {
        Some(Self { g: store.id(&format!("{name}.g"))?, b: store.id(&format!("{name}.b"))? })
    }

    pub(crate) fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.g);
        let b = tape.param(store, self.b);
        tape.layer_norm(x, g, b)
    }
}

/// Position-wise feed-forward network `gelu(x W1 + b1) W2 + b2`.
#[derive(Clone, Debug)]
pub(crate) struct Ffn {
    up: Linear,
    down: Linear,
}

impl Ffn {
    pub(crate) fn new(store: &mut ParamStore, name: &str, dims: &Dims, rng: &mut ChaCha8Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dims.d_model, dims.ff, true, rng),
            down: Linear::new(store, &format!("{name}.down"), dims.ff, dims.d_model, true, rng),
        }
    }

    pub(crate) fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let u = self.up.apply(tape, store, x)?;
        let a = tape.gelu(u);
        self.down.apply(tape, store, a)
    }
}

/// Cross-attention from hidden rows to memory slots. Value and output
/// projections carry no bias, so all-zero memory contributes exactly zero.
#[derive(Clone, Debug)]
struct CrossAttn {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl CrossAttn {
    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var, mem: Var, d: usize) -> Result<Var> {
        let q = self.q.apply(tape, store, x)?;
        let k = self.k.apply(tape, store, mem)?;
        let v = self.v.apply(tape, store, mem)?;
        let kt = tape.transpose(k);
        let s = tape.matmul(q, kt)?;
        let s = tape.scale(s, 1.0 / (d as f64).sqrt());
        let a = tape.softmax(s)?;
        let ctx = tape.matmul(a, v)?;
        self.o.apply(tape, store, ctx)
    }
}

/// Dense feed-forward, or a sequence-gated top-1 choice among several.
#[derive(Clone, Debug)]
enum FeedForward {
    Dense(Ffn),
    Gated { gate: ParamId, ffns: Vec<Ffn> },
}

impl FeedForward {
    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Self::Dense(f) => f.apply(tape, store, x),
            Self::Gated { gate, ffns } => {
                let pooled = tape.mean_rows(x);
                let w = tape.param(store, *gate);
                let logits = tape.matmul(pooled, w)?;
                let p = tape.softmax(logits)?;
                let j = crate::routing::ranking(tape.value(p).data())[0];
                let g = tape.gather(p, &[j])?;
                let y = ffns[j].apply(tape, store, x)?;
                tape.scale_by(y, g)
            }
        }
    }
}

/// Post-norm transformer block with window-local single-head attention:
/// `x = LN(x + Attn(x) [+ Cross(x, mem)]); x = LN(x + FFN(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1: LayerNorm,
    ffn: FeedForward,
    ln2: LayerNorm,
    cross: Option<CrossAttn>,
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, dims: &Dims, with_memory: bool, rng: &mut ChaCha8Rng) -> Self {
        Self::build(store, name, dims, with_memory, None, rng)
    }

    /// Block whose feed-forward is the top-1 of `n_ffn` networks, gated on
    /// the mean-pooled sequence.
    pub fn new_gated(store: &mut ParamStore, name: &str, dims: &Dims, n_ffn: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::build(store, name, dims, false, Some(n_ffn), rng)
    }

    fn build(
        store: &mut ParamStore,
        name: &str,
        dims: &Dims,
        with_memory: bool,
        gated: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d = dims.d_model;
        let lin = |store: &mut ParamStore, n: &str, bias: bool, rng: &mut ChaCha8Rng| {
            Linear::new(store, &format!("{name}.{n}"), d, d, bias, rng)
        };
        let q = lin(store, "attn.q", true, rng);
        let k = lin(store, "attn.k", true, rng);
        let v = lin(store, "attn.v", true, rng);
        let o = lin(store, "attn.o", true, rng);
        let cross = with_memory.then(|| CrossAttn {
            q: lin(store, "cross.q", true, rng),
            k: lin(store, "cross.k", true, rng),
            v: lin(store, "cross.v", false, rng),
            o: lin(store, "cross.o", false, rng),
        });
        let ln1 = LayerNorm::new(store, &format!("{name}.ln1"), d);
        let ffn = match gated {
            None => FeedForward::Dense(Ffn::new(store, &format!("{name}.ffn"), dims, rng)),
            Some(e) => FeedForward::Gated {
                gate: uniform(store, format!("{name}.gate.w"), d, e, rng),
                ffns: (0..e).map(|i| Ffn::new(store, &format!("{name}.ffn{i}"), dims, rng)).collect(),
            },
        };
        let ln2 = LayerNorm::new(store, &format!("{name}.ln2"), d);
        Self { q, k, v, o, ln1, ffn, ln2, cross }
    }

    fn self_attn(&self, tape: &mut Tape, store: &ParamStore, x: Var, dims: &Dims) -> Result<Var> {
        let n = tape.value(x).rows();
        let q = self.q.apply(tape, store, x)?;
        let k = self.k.apply(tape, store, x)?;
        let v = self.v.apply(tape, store, x)?;
        let scale = 1.0 / (dims.d_model as f64).sqrt();
        let mut outs = Vec::new();
        let mut start = 0;
        for len in dims.window_lengths(n) {
            let (qs, ks, vs) = if len == n {
                (q, k, v)
            } else {
                (tape.slice_rows(q, start, len)?, tape.slice_rows(k, start, len)?, tape.slice_rows(v, start, len)?)
            };
            let kt = tape.transpose(ks);
            let s = tape.matmul(qs, kt)?;
            let s = tape.scale(s, scale);
            let a = tape.softmax(s)?;
            outs.push(tape.matmul(a, vs)?);
            start += len;
        }
        let ctx = if outs.len() == 1 { outs[0] } else { tape.concat_rows(&outs)? };
        self.o.apply(tape, store, ctx)
    }

    /// `mem` holds the filled memory rows, if any.
    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var, mem: Option<Var>, dims: &Dims) -> Result<Var> {
        if tape.value(x).cols() != dims.d_model {
            return Err(Error::config(format!(
                "hidden width {} does not match d_model {}",
                tape.value(x).cols(),
                dims.d_model
            )));
        }
        let att = self.self_attn(tape, store, x, dims)?;
        let mut sum = tape.add(x, att)?;
        if let (Some(cross), Some(mem)) = (&self.cross, mem) {
            let c = cross.apply(tape, store, x, mem, dims.d_model)?;
            sum = tape.add(sum, c)?;
        }
        let x1 = self.ln1.apply(tape, store, sum)?;
        let f = self.ffn.apply(tape, store, x1)?;
        let s2 = tape.add(x1, f)?;
        self.ln2.apply(tape, store, s2)
    }
}

/// Episodic memory of summary vectors, fresh for every input.
#[derive(Clone, Debug)]
pub struct MemoryState {
    slots: Vec<Option<Var>>,
    cursor: usize,
}

impl MemoryState {
    pub fn new(slots: usize) -> Self {
        Self { slots: vec![None; slots], cursor: 0 }
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn filled(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    /// Filled slots stacked in slot order.
    pub fn rows(&self, tape: &mut Tape) -> Result<Option<Var>> {
        let filled: Vec<Var> = self.slots.iter().flatten().copied().collect();
        match filled.len() {
            0 => Ok(None),
            1 => Ok(Some(filled[0])),
            _ => tape.concat_rows(&filled).map(Some),
        }
    }

    pub fn write(&mut self, summary: Var) {
        self.slots[self.cursor] = Some(summary);
        self.cursor = (self.cursor + 1) % self.slots.len();
    }

    /// Install an explicit slot matrix; the cursor sits after the last row.
    pub fn from_rows(tape: &mut Tape, rows: &Tensor, capacity: usize) -> Result<Self> {
        let mut m = Self::new(capacity);
        if rows.rows() > capacity {
            return Err(Error::shape(format!("{} memory rows exceed {capacity} slots", rows.rows())));
        }
        for r in 0..rows.rows() {
            m.slots[r] = Some(tape.constant(Tensor::row(rows.row_slice(r))));
        }
        m.cursor = rows.rows() % capacity;
        Ok(m)
    }
}

/// Halting and depth-adjustment heads on the pooled hidden state.
#[derive(Clone, Debug)]
struct Supervisor {
    ln: LayerNorm,
    halt: Linear,
    adjust: Linear,
}

/// Output of one supervisory step.
#[derive(Clone, Copy, Debug)]
pub struct SupervisorSignal {
    pub halt_prob: f64,
    /// -1, 0 or +1.
    pub depth_adjust: i32,
    pub halt_logit: Var,
    pub adjust_logits: Var,
}

#[derive(Clone, Debug)]
pub struct Expert {
    pub id: usize,
    pub kind: ExpertKind,
    blocks: Vec<Block>,
    supervisor: Option<Supervisor>,
    params: Vec<ParamId>,
}

impl Expert {
    pub fn new(store: &mut ParamStore, id: usize, kind: ExpertKind, dims: &Dims, rng: &mut ChaCha8Rng) -> Self {
        let first = store.len();
        let prefix = format!("expert{id}.{}", kind.name().to_lowercase());
        let blocks = (0..kind.blocks())
            .map(|l| Block::new(store, &format!("{prefix}.b{l}"), dims, kind == ExpertKind::Mie, rng))
            .collect();
        let supervisor = (kind == ExpertKind::Mce).then(|| Supervisor {
            ln: LayerNorm::new(store, &format!("{prefix}.ctl.ln"), dims.d_model),
            halt: Linear::zeros(store, &format!("{prefix}.ctl.halt"), dims.d_model, 1),
            adjust: Linear::zeros(store, &format!("{prefix}.ctl.adjust"), dims.d_model, 3),
        });
        let params = (first..store.len()).map(ParamId).collect();
        Self { id, kind, blocks, supervisor, params }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn internal_depth(&self) -> usize {
        self.kind.depth()
    }

    /// Transform `h`; MIE experts process one window at a time, reading and
    /// writing `mem`. The supervisor's hidden-state map is the identity.
    pub fn apply(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        mem: Option<&mut MemoryState>,
        dims: &Dims,
    ) -> Result<Var> {
        if !tape.value(h).is_finite() {
            return Err(Error::Numeric(format!("expert {} input is not finite", self.id)));
        }
        if tape.value(h).cols() != dims.d_model {
            return Err(Error::config(format!(
                "expert {} expects width {}, got {}",
                self.id,
                dims.d_model,
                tape.value(h).cols()
            )));
        }
        match (self.kind, mem) {
            (ExpertKind::Mce, _) => Ok(h),
            (ExpertKind::Mie, Some(mem)) => self.apply_with_memory(tape, store, h, mem, dims),
            (ExpertKind::Mie, None) => Err(Error::contract("MIE applied without memory")),
            (_, Some(_)) => Err(Error::contract(format!("{} expert given memory", self.kind))),
            (_, None) => {
                let mut x = h;
                for b in &self.blocks {
                    x = b.apply(tape, store, x, None, dims)?;
                }
                Ok(x)
            }
        }
    }

    fn apply_with_memory(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        mem: &mut MemoryState,
        dims: &Dims,
    ) -> Result<Var> {
        let n = tape.value(h).rows();
        let lens = dims.window_lengths(n);
        let mut outs = Vec::with_capacity(lens.len());
        let mut start = 0;
        for len in lens {
            let mut x = if len == n { h } else { tape.slice_rows(h, start, len)? };
            let rows = mem.rows(tape)?;
            for b in &self.blocks {
                x = b.apply(tape, store, x, rows, dims)?;
            }
            let summary = tape.mean_rows(x);
            mem.write(summary);
            outs.push(x);
            start += len;
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            tape.concat_rows(&outs)
        }
    }

    /// Run the control heads on `h`. Only valid for MCE experts.
    pub fn supervise(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<SupervisorSignal> {
        let sup = self
            .supervisor
            .as_ref()
            .ok_or_else(|| Error::contract(format!("{} expert has no supervisor", self.kind)))?;
        let pooled = tape.mean_rows(h);
        let z = sup.ln.apply(tape, store, pooled)?;
        let halt_logit = sup.halt.apply(tape, store, z)?;
        let adjust_logits = sup.adjust.apply(tape, store, z)?;
        let halt_prob = crate::numerics::sigmoid(tape.scalar(halt_logit));
        let adj = tape.value(adjust_logits).data();
        // argmax with ties resolved toward "keep" (index 1), then lower index.
        let mut best = 1;
        for i in [0, 2] {
            if adj[i] > adj[best] {
                best = i;
            }
        }
        Ok(SupervisorSignal { halt_prob, depth_adjust: best as i32 - 1, halt_logit, adjust_logits })
    }
}
