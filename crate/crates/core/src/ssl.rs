//! Patch-location pretext tasks on the 3×4 slice grid.
//!
//! *Relative*: for each of the two interior cells of the middle row, predict
//! where each of its eight neighbours sits (16 pairs per slice). *Absolute*:
//! predict the grid cell (0..12) of each patch. Both heads are two fully
//! connected layers with a ReLU in between; the relative head sees the
//! concatenated embeddings of the pair.
//!
//! Per-slice losses are sums over the 16 (or 12) cross-entropy terms,
//! averaged over slices.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::data::{GRID_COLS, GRID_ROWS, PATCHES_PER_SLICE};
use crate::numcore::{forward_layer, BoundLayer, LayerKind, LayerParams, Real, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum SslTask {
    None,
    Relative,
    #[default]
    Absolute,
}

impl SslTask {
    pub fn classes(self) -> usize {
        match self {
            SslTask::None => 0,
            SslTask::Relative => RELATIVE_CLASSES,
            SslTask::Absolute => PATCHES_PER_SLICE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SslConfig {
    pub task: SslTask,
    /// Weight of the pretext loss in `(L_mil + μ L_ssl) / (1 + μ)`.
    pub mu: f64,
    pub hidden_width: usize,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            task: SslTask::Absolute,
            mu: 0.3,
            hidden_width: 128,
        }
    }
}

pub const RELATIVE_CLASSES: usize = 8;

/// `(d_row, d_col)` of each relative class, clockwise from top-left:
/// TL, T, TR, R, BR, B, BL, L.
pub const RELATIVE_OFFSETS: [(isize, isize); RELATIVE_CLASSES] =
    [(-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1)];

/// Grid cells `(row, col)` whose full 8-neighbourhood lies on the grid.
pub const ANCHORS: [(usize, usize); 2] = [(1, 1), (1, 2)];

pub fn grid_coords(position: usize) -> (usize, usize) {
    (position / GRID_COLS, position % GRID_COLS)
}

pub fn grid_position(row: usize, col: usize) -> usize {
    row * GRID_COLS + col
}

/// Class of the neighbour at `(d_row, d_col)` from the anchor, if it is one
/// of the eight compass offsets.
pub fn relative_class(d_row: isize, d_col: isize) -> Option<u8> {
    RELATIVE_OFFSETS
        .iter()
        .position(|&o| o == (d_row, d_col))
        .map(|c| c as u8)
}

/// An (anchor, neighbour) pair of instance indices from one slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchPair {
    pub anchor: usize,
    pub neighbor: usize,
    pub relative_class: u8,
}

/// Builds the 16 relative-location pairs of a slice.
///
/// `grid_positions[i]` is the grid cell of the slice's `i`-th instance; the
/// returned pairs index into that list.
pub fn build_pairs(grid_positions: &[u8]) -> Result<Vec<PatchPair>> {
    if grid_positions.len() != PATCHES_PER_SLICE {
        return Err(Error::SliceGeometry(format!(
            "expected {PATCHES_PER_SLICE} patches, got {}",
            grid_positions.len()
        )));
    }
    let mut at = [usize::MAX; PATCHES_PER_SLICE];
    for (i, &p) in grid_positions.iter().enumerate() {
        let p = p as usize;
        if p >= PATCHES_PER_SLICE || at[p] != usize::MAX {
            return Err(Error::SliceGeometry(format!(
                "grid positions must cover 0..{PATCHES_PER_SLICE} once each, got {grid_positions:?}"
            )));
        }
        at[p] = i;
    }
    let mut pairs = Vec::with_capacity(ANCHORS.len() * RELATIVE_CLASSES);
    for &(row, col) in &ANCHORS {
        for (class, &(dr, dc)) in RELATIVE_OFFSETS.iter().enumerate() {
            let (nr, nc) = ((row as isize + dr) as usize, (col as isize + dc) as usize);
            debug_assert!(nr < GRID_ROWS && nc < GRID_COLS);
            pairs.push(PatchPair {
                anchor: at[grid_position(row, col)],
                neighbor: at[grid_position(nr, nc)],
                relative_class: class as u8,
            });
        }
    }
    Ok(pairs)
}

/// Two-layer pretext head: `fc(in → hidden) + ReLU + fc(hidden → classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SslHead<T> {
    pub task: SslTask,
    pub hidden: LayerParams<T>,
    pub output: LayerParams<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundHead {
    pub task: SslTask,
    pub hidden: BoundLayer,
    pub output: BoundLayer,
}

impl<T: Real> SslHead<T> {
    /// `feature_dim` is the instance embedding size `M`; the relative head
    /// takes `2M` inputs.
    pub fn new<R: Rng + ?Sized>(task: SslTask, feature_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let in_features = match task {
            SslTask::Relative => 2 * feature_dim,
            _ => feature_dim,
        };
        Self {
            task,
            hidden: LayerParams::init(
                LayerKind::FullyConnected {
                    in_features,
                    out_features: hidden,
                },
                rng,
            ),
            output: LayerParams::init(
                LayerKind::FullyConnected {
                    in_features: hidden,
                    out_features: task.classes(),
                },
                rng,
            ),
        }
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.hidden.params().chain(self.output.params())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.hidden.params_mut().chain(self.output.params_mut())
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundHead {
        BoundHead {
            task: self.task,
            hidden: self.hidden.bind(tape),
            output: self.output.bind(tape),
        }
    }

    pub fn absorb_grads(&mut self, tape: &Tape<T>, bound: &BoundHead) {
        self.hidden.absorb_grads(tape, &bound.hidden);
        self.output.absorb_grads(tape, &bound.output);
    }

    pub fn cast<U: Real>(&self) -> SslHead<U> {
        let layer = |l: &LayerParams<T>| LayerParams {
            kind: l.kind,
            weight: l.weight.as_ref().map(|w| w.cast::<U>().with_grad()),
            bias: l.bias.as_ref().map(|b| b.cast::<U>().with_grad()),
        };
        SslHead {
            task: self.task,
            hidden: layer(&self.hidden),
            output: layer(&self.output),
        }
    }
}

pub fn head_logits_on_tape<T: Real>(tape: &mut Tape<T>, head: &BoundHead, input: Var) -> Result<Var> {
    let hidden = forward_layer(tape, input, &head.hidden)?;
    let hidden = tape.relu(hidden);
    forward_layer(tape, hidden, &head.output)
}

/// Relative-location loss. `slices` lists, per slice, the row indices of
/// `features` for grid positions 0..12.
pub fn relative_loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    head: &BoundHead,
    features: Var,
    slices: &[[usize; PATCHES_PER_SLICE]],
) -> Result<Var> {
    if slices.is_empty() {
        return Err(Error::SliceGeometry("no complete slices".into()));
    }
    let positions: Vec<u8> = (0..PATCHES_PER_SLICE as u8).collect();
    let template = build_pairs(&positions)?;
    let mut anchors = Vec::with_capacity(slices.len() * template.len());
    let mut neighbors = Vec::with_capacity(anchors.capacity());
    let mut targets = Vec::with_capacity(anchors.capacity());
    for rows in slices {
        for pair in &template {
            anchors.push(rows[pair.anchor]);
            neighbors.push(rows[pair.neighbor]);
            targets.push(pair.relative_class as usize);
        }
    }
    let a = tape.gather_rows(features, &anchors)?;
    let n = tape.gather_rows(features, &neighbors)?;
    let pair_features = tape.concat_cols(a, n)?;
    let logits = head_logits_on_tape(tape, head, pair_features)?;
    let total = tape.cross_entropy_sum(logits, &targets)?;
    Ok(tape.scale(total, 1.0 / slices.len() as f64))
}

/// Absolute-location loss over the complete slices of a bag.
pub fn absolute_loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    head: &BoundHead,
    features: Var,
    slices: &[[usize; PATCHES_PER_SLICE]],
) -> Result<Var> {
    if slices.is_empty() {
        return Err(Error::SliceGeometry("no complete slices".into()));
    }
    let rows: Vec<usize> = slices.iter().flat_map(|s| s.iter().copied()).collect();
    let targets: Vec<usize> = (0..slices.len()).flat_map(|_| 0..PATCHES_PER_SLICE).collect();
    let x = tape.gather_rows(features, &rows)?;
    let logits = head_logits_on_tape(tape, head, x)?;
    let total = tape.cross_entropy_sum(logits, &targets)?;
    Ok(tape.scale(total, 1.0 / slices.len() as f64))
}

pub fn ssl_loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    head: &BoundHead,
    features: Var,
    slices: &[[usize; PATCHES_PER_SLICE]],
) -> Result<Var> {
    match head.task {
        SslTask::Relative => relative_loss_on_tape(tape, head, features, slices),
        SslTask::Absolute => absolute_loss_on_tape(tape, head, features, slices),
        SslTask::None => Err(Error::contract("pretext head has no task")),
    }
}

fn eager<T: Real>(
    features: &Tensor<T>,
    head: &SslHead<T>,
    slices: &[[usize; PATCHES_PER_SLICE]],
    f: fn(&mut Tape<T>, &BoundHead, Var, &[[usize; PATCHES_PER_SLICE]]) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = head.bind(&mut tape);
    let h = tape.constant(features.clone());
    let loss = f(&mut tape, &bound, h, slices)?;
    Ok(tape.scalar(loss).as_f64())
}

pub fn relative_loss<T: Real>(
    features: &Tensor<T>,
    head: &SslHead<T>,
    slices: &[[usize; PATCHES_PER_SLICE]],
) -> Result<f64> {
    eager(features, head, slices, relative_loss_on_tape)
}

pub fn absolute_loss<T: Real>(
    features: &Tensor<T>,
    head: &SslHead<T>,
    slices: &[[usize; PATCHES_PER_SLICE]],
) -> Result<f64> {
    eager(features, head, slices, absolute_loss_on_tape)
}

/// `(L_mil + μ L_ssl) / (1 + μ)`.
pub fn total_loss(l_mil: f64, l_ssl: f64, mu: f64) -> Result<f64> {
    if !(mu > 0.0) {
        return Err(Error::contract(format!("mu must be positive, got {mu}")));
    }
    Ok((l_mil + mu * l_ssl) / (1.0 + mu))
}

pub fn total_loss_on_tape<T: Real>(tape: &mut Tape<T>, l_mil: Var, l_ssl: Var, mu: f64) -> Result<Var> {
    if !(mu > 0.0) {
        return Err(Error::contract(format!("mu must be positive, got {mu}")));
    }
    let weighted = tape.scale(l_ssl, mu);
    let sum = tape.add(l_mil, weighted)?;
    Ok(tape.scale(sum, 1.0 / (1.0 + mu)))
}
