//! GRU/LSTM cells, embeddings, affine heads and sequence encoders.
//!
//! Every component owns [`ParamId`]s into a caller-provided [`ParamStore`] and
//! is placed on a [`Tape`] with `bind`, after which the bound form can be
//! stepped any number of times without copying parameters again.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Gru,
    Lstm,
}

impl CellKind {
    fn gate_names(self) -> &'static [&'static str] {
        match self {
            CellKind::Gru => &["update", "reset", "candidate"],
            CellKind::Lstm => &["input", "forget", "output", "cell"],
        }
    }
}

/// Sizes shared by the embedding, cell and head of one network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub cell: CellKind,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            cell: CellKind::Gru,
            embed_dim: 32,
            hidden_dim: 64,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Gate {
    w: ParamId,
    u: ParamId,
    b: ParamId,
}

/// Parameters of a single recurrent cell.
#[derive(Clone, Debug)]
pub struct RecurrentCell {
    kind: CellKind,
    input_dim: usize,
    hidden_dim: usize,
    gates: Vec<Gate>,
}

/// Recurrent state on a tape: `h` of shape `(batch, hidden)`, plus `c` for LSTM.
#[derive(Clone, Copy, Debug)]
pub struct HiddenState {
    pub h: Var,
    pub c: Option<Var>,
}

impl RecurrentCell {
    /// Registers `{prefix}.W_{gate}`, `{prefix}.U_{gate}` and `{prefix}.b_{gate}` for each gate.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        kind: CellKind,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 {
            return Err(Error::Config("cell dimensions must be positive".into()));
        }
        let s = 1.0 / (hidden_dim as f64).sqrt();
        let mut gates = Vec::new();
        for &g in kind.gate_names() {
            let w = store.insert(
                format!("{prefix}.W_{g}"),
                Tensor::uniform(&[input_dim, hidden_dim], s, rng),
            )?;
            let u = store.insert(
                format!("{prefix}.U_{g}"),
                Tensor::uniform(&[hidden_dim, hidden_dim], s, rng),
            )?;
            let bias = if kind == CellKind::Lstm && g == "forget" {
                1.0
            } else {
                0.0
            };
            let b = store.insert(format!("{prefix}.b_{g}"), Tensor::full(&[hidden_dim], bias))?;
            gates.push(Gate { w, u, b });
        }
        Ok(Self {
            kind,
            input_dim,
            hidden_dim,
            gates,
        })
    }

    pub fn kind(&self) -> CellKind {
        self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> Result<BoundCell> {
        let gates = self
            .gates
            .iter()
            .map(|g| {
                Ok(BoundGate {
                    w: tape.param(store, g.w)?,
                    u: tape.param(store, g.u)?,
                    b: tape.param(store, g.b)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(BoundCell {
            kind: self.kind,
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            gates,
        })
    }
}

#[derive(Clone, Copy, Debug)]
struct BoundGate {
    w: Var,
    u: Var,
    b: Var,
}

/// A cell whose parameters live on a tape.
#[derive(Clone, Debug)]
pub struct BoundCell {
    kind: CellKind,
    input_dim: usize,
    hidden_dim: usize,
    gates: Vec<BoundGate>,
}

impl BoundCell {
    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    /// All-zero state for `batch` rows.
    pub fn zero_state(&self, tape: &mut Tape, batch: usize) -> Result<HiddenState> {
        let h = tape.constant(Tensor::zeros(&[batch, self.hidden_dim]))?;
        let c = match self.kind {
            CellKind::Gru => None,
            CellKind::Lstm => Some(tape.constant(Tensor::zeros(&[batch, self.hidden_dim]))?),
        };
        Ok(HiddenState { h, c })
    }

    fn pre(&self, tape: &mut Tape, gate: usize, x: Var, h: Var) -> Result<Var> {
        let g = self.gates[gate];
        let xw = tape.matmul(x, g.w)?;
        let hu = tape.matmul(h, g.u)?;
        let s = tape.add(xw, hu)?;
        tape.add(s, g.b)
    }

    /// One recurrence step on input `x` of shape `(batch, input_dim)`.
    pub fn step(&self, tape: &mut Tape, x: Var, state: &HiddenState) -> Result<HiddenState> {
        let xs = tape.value(x).shape().to_vec();
        let hs = tape.value(state.h).shape().to_vec();
        if xs.len() != 2 || xs[1] != self.input_dim || hs != [xs[0], self.hidden_dim] {
            return Err(Error::Shape {
                op: "cell_step",
                lhs: xs,
                rhs: hs,
            });
        }
        let h = state.h;
        match self.kind {
            CellKind::Gru => {
                let zp = self.pre(tape, 0, x, h)?;
                let z = tape.sigmoid(zp)?;
                let rp = self.pre(tape, 1, x, h)?;
                let r = tape.sigmoid(rp)?;
                let g = self.gates[2];
                let rh = tape.mul(r, h)?;
                let xw = tape.matmul(x, g.w)?;
                let rhu = tape.matmul(rh, g.u)?;
                let np = tape.add(xw, rhu)?;
                let np = tape.add(np, g.b)?;
                let n = tape.tanh(np)?;
                // h' = n + z ⊙ (h - n)
                let d = tape.sub(h, n)?;
                let zd = tape.mul(z, d)?;
                let h_new = tape.add(n, zd)?;
                Ok(HiddenState { h: h_new, c: None })
            }
            CellKind::Lstm => {
                let c = state.c.ok_or(Error::Config("LSTM step without cell state".into()))?;
                let ip = self.pre(tape, 0, x, h)?;
                let i = tape.sigmoid(ip)?;
                let fp = self.pre(tape, 1, x, h)?;
                let f = tape.sigmoid(fp)?;
                let op = self.pre(tape, 2, x, h)?;
                let o = tape.sigmoid(op)?;
                let gp = self.pre(tape, 3, x, h)?;
                let g = tape.tanh(gp)?;
                let fc = tape.mul(f, c)?;
                let ig = tape.mul(i, g)?;
                let c_new = tape.add(fc, ig)?;
                let tc = tape.tanh(c_new)?;
                let h_new = tape.mul(o, tc)?;
                Ok(HiddenState {
                    h: h_new,
                    c: Some(c_new),
                })
            }
        }
    }
}

/// Token embedding table of shape `(rows, dim)`.
#[derive(Clone, Copy, Debug)]
pub struct Embedding {
    table: ParamId,
    rows: usize,
    dim: usize,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        rows: usize,
        dim: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let table = store.insert(name, Tensor::uniform(&[rows, dim], scale, rng))?;
        Ok(Self { table, rows, dim })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> Result<BoundEmbedding> {
        Ok(BoundEmbedding {
            table: tape.param(store, self.table)?,
            rows: self.rows,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundEmbedding {
    table: Var,
    rows: usize,
}

impl BoundEmbedding {
    /// `(tokens.len(), dim)` rows of the table.
    pub fn lookup(&self, tape: &mut Tape, tokens: &[usize]) -> Result<Var> {
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.rows) {
            return Err(Error::TokenOutOfRange {
                token: t,
                size: self.rows,
            });
        }
        tape.embed(self.table, tokens)
    }
}

/// Affine map `x W + b` from `in_dim` to `out_dim`.
#[derive(Clone, Copy, Debug)]
pub struct LinearHead {
    w: ParamId,
    b: ParamId,
    in_dim: usize,
    out_dim: usize,
}

impl LinearHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let s = 1.0 / (in_dim as f64).sqrt();
        let w = store.insert(format!("{prefix}.W"), Tensor::uniform(&[in_dim, out_dim], s, rng))?;
        let b = store.insert(format!("{prefix}.b"), Tensor::zeros(&[out_dim]))?;
        Ok(Self { w, b, in_dim, out_dim })
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> ParamId {
        self.b
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> Result<BoundHead> {
        Ok(BoundHead {
            w: tape.param(store, self.w)?,
            b: tape.param(store, self.b)?,
            in_dim: self.in_dim,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundHead {
    w: Var,
    b: Var,
    in_dim: usize,
}

impl BoundHead {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let xs = tape.value(x).shape();
        if xs.len() != 2 || xs[1] != self.in_dim {
            return Err(Error::Shape {
                op: "project",
                lhs: xs.to_vec(),
                rhs: vec![self.in_dim],
            });
        }
        let xw = tape.matmul(x, self.w)?;
        tape.add(xw, self.b)
    }

    /// Unnormalized outputs `(batch, out_dim)` from a hidden state.
    pub fn project(&self, tape: &mut Tape, state: &HiddenState) -> Result<Var> {
        self.apply(tape, state.h)
    }
}

/// Runs `cell` over a batch of equal-length token rows.
///
/// Returns one state per position; `states[t]` has consumed `tokens[..=t]`.
pub fn encode_sequence(
    tape: &mut Tape,
    cell: &BoundCell,
    embedding: &BoundEmbedding,
    batch: &[Vec<usize>],
) -> Result<Vec<HiddenState>> {
    let len = uniform_len(batch)?;
    let mut state = cell.zero_state(tape, batch.len())?;
    let mut out = Vec::with_capacity(len);
    for t in 0..len {
        let column: Vec<usize> = batch.iter().map(|row| row[t]).collect();
        let x = embedding.lookup(tape, &column)?;
        state = cell.step(tape, x, &state)?;
        out.push(state);
    }
    Ok(out)
}

/// Final forward state concatenated with the final state of `bwd` run over the
/// reversed rows: `(batch, 2 * hidden)`.
pub fn encode_bidirectional(
    tape: &mut Tape,
    fwd: &BoundCell,
    bwd: &BoundCell,
    embedding: &BoundEmbedding,
    batch: &[Vec<usize>],
) -> Result<Var> {
    let len = uniform_len(batch)?;
    if len == 0 {
        return Err(Error::Empty("bidirectional encoder needs a non-empty sequence"));
    }
    let forward = encode_sequence(tape, fwd, embedding, batch)?;
    let reversed: Vec<Vec<usize>> = batch.iter().map(|r| r.iter().rev().copied().collect()).collect();
    let backward = encode_sequence(tape, bwd, embedding, &reversed)?;
    tape.concat(forward[len - 1].h, backward[len - 1].h)
}

fn uniform_len(batch: &[Vec<usize>]) -> Result<usize> {
    let first = batch.first().ok_or(Error::Empty("empty batch"))?;
    if let Some(row) = batch.iter().find(|r| r.len() != first.len()) {
        return Err(Error::SequenceLength {
            expected: first.len(),
            got: row.len(),
        });
    }
    Ok(first.len())
}

/// Embedding, single recurrent cell and affine output head.
///
/// The input at step `t` is token `t-1` of the prefix, so output `t` is a
/// function of the strict prefix only.
#[derive(Clone, Debug)]
pub struct SequenceModel {
    pub embedding: Embedding,
    pub cell: RecurrentCell,
    pub head: LinearHead,
}

impl SequenceModel {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        arch: &Architecture,
        input_tokens: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let s = 1.0 / (arch.hidden_dim as f64).sqrt();
        let embedding = Embedding::new(
            store,
            &format!("{prefix}.embedding"),
            input_tokens,
            arch.embed_dim,
            s,
            rng,
        )?;
        let cell = RecurrentCell::new(
            store,
            &format!("{prefix}.cell"),
            arch.cell,
            arch.embed_dim,
            arch.hidden_dim,
            rng,
        )?;
        let head = LinearHead::new(store, &format!("{prefix}.head"), arch.hidden_dim, outputs, rng)?;
        Ok(Self { embedding, cell, head })
    }

    pub fn outputs(&self) -> usize {
        self.head.out_dim()
    }

    pub fn input_tokens(&self) -> usize {
        self.embedding.rows()
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> Result<BoundSequenceModel> {
        Ok(BoundSequenceModel {
            embedding: self.embedding.bind(tape, store)?,
            cell: self.cell.bind(tape, store)?,
            head: self.head.bind(tape, store)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct BoundSequenceModel {
    pub embedding: BoundEmbedding,
    pub cell: BoundCell,
    pub head: BoundHead,
}

impl BoundSequenceModel {
    pub fn start(&self, tape: &mut Tape, batch: usize) -> Result<HiddenState> {
        self.cell.zero_state(tape, batch)
    }

    /// Feeds one token per row.
    pub fn feed(&self, tape: &mut Tape, tokens: &[usize], state: &HiddenState) -> Result<HiddenState> {
        let x = self.embedding.lookup(tape, tokens)?;
        self.cell.step(tape, x, state)
    }

    pub fn output(&self, tape: &mut Tape, state: &HiddenState) -> Result<Var> {
        self.head.project(tape, state)
    }

    /// Outputs for each position after feeding `inputs` column by column.
    pub fn run(&self, tape: &mut Tape, inputs: &[Vec<usize>]) -> Result<Vec<Var>> {
        let states = encode_sequence(tape, &self.cell, &self.embedding, inputs)?;
        states.iter().map(|s| self.output(tape, s)).collect()
    }
}
