//! Grid-to-grid field transfer over a static sparse communication matrix.
//!
//! Entry (i, j) of the matrix is the list of cell overlaps whose sender cell is
//! owned by rank j and whose receiver cell is owned by rank i. Each rank only
//! stores its own row (what it receives), its own column (what it sends) and the
//! diagonal block it handles locally, plus the global table of dataset sizes used
//! by the cost model.
//!
//! Contributions to a receiver cell are always combined in ascending global
//! sender-cell order, wherever they come from, so the result is bitwise
//! independent of the strategy, the backend and the rank count.

use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mesh::{compute_overlaps, GridField, LocalLayout};
use crate::real::Real;
use crate::transport::wire::{Reader, Writer};
use crate::transport::RankContext;

const TAG_DIRECT: u32 = 0x4d41_5001;
const TAG_GATHER: u32 = 0x4d41_5002;
const TAG_SCATTER: u32 = 0x4d41_5003;

/// Bytes of the count prefix of a distributed dataset message.
pub const DIRECT_HEADER_BYTES: usize = 4;
/// Bytes of the block-count prefix of a gather-scatter message.
pub const ROUTED_HEADER_BYTES: usize = 4;
/// Bytes of the (destination, source, count) header of one routed block.
pub const BLOCK_HEADER_BYTES: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InterpolationKind {
    /// Extensive quantities: the sender cell integral is split by overlap volume.
    Conservative,
    /// Intensive quantities: overlap-volume weighted average of sender values.
    Consistent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Every rank ships its whole column to rank 0, which routes it onward.
    GatherScatter,
    /// One direct message per non-empty off-diagonal dataset.
    Distributed,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::GatherScatter => "gather-scatter",
            Strategy::Distributed => "distributed",
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gather-scatter" => Ok(Strategy::GatherScatter),
            "distributed" => Ok(Strategy::Distributed),
            other => Err(Error::config(format!(
                "unknown strategy '{other}' (expected gather-scatter or distributed)"
            ))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One cell overlap, by global cell ids.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Entry<T: Real> {
    pub sender_cell: u32,
    pub receiver_cell: u32,
    pub volume: T,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Source {
    Local(u32),
    Remote { rank: u32, index: u32 },
}

/// Shape of the fields moved in one interpolation call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FieldSpec {
    pub kind: InterpolationKind,
    pub components: usize,
}

impl FieldSpec {
    pub fn new(kind: InterpolationKind, components: usize) -> Self {
        Self { kind, components }
    }
}

/// Encoded size of one dataset entry carrying `fields`: receiver id, the values,
/// and one overlap weight if any field is consistent.
pub fn entry_bytes<T: Real>(fields: &[FieldSpec]) -> usize {
    let values: usize = fields.iter().map(|f| f.components).sum();
    let weight = fields.iter().any(|f| f.kind == InterpolationKind::Consistent);
    4 + (values + usize::from(weight)) * T::BYTES
}

/// Rank-local view of the communication matrix between two partitioned grids.
#[derive(Debug)]
pub struct CommMatrix<T: Real> {
    sender: Arc<LocalLayout<T>>,
    receiver: Arc<LocalLayout<T>>,
    rank: usize,
    world: usize,
    diagonal: Vec<Entry<T>>,
    column: Vec<Vec<Entry<T>>>,
    row: Vec<Vec<Entry<T>>>,
    sizes: Vec<u32>,
    plan_offsets: Vec<u32>,
    plan: Vec<Source>,
    covered: Vec<T>,
}

/// Builds this rank's part of the matrix from replicated grids and partitions.
pub fn build_comm_matrix<T: Real>(
    sender: &Arc<LocalLayout<T>>,
    receiver: &Arc<LocalLayout<T>>,
) -> Result<CommMatrix<T>> {
    let world = sender.partition().rank_count();
    if receiver.partition().rank_count() != world {
        return Err(Error::config(format!(
            "sender partition has {world} ranks but receiver partition has {}",
            receiver.partition().rank_count()
        )));
    }
    if sender.rank() != receiver.rank() {
        return Err(Error::config("sender and receiver layouts belong to different ranks"));
    }
    let rank = sender.rank();
    let sp = sender.partition();
    let rp = receiver.partition();
    let mut diagonal = Vec::new();
    let mut column = vec![Vec::new(); world];
    let mut row = vec![Vec::new(); world];
    let mut sizes = vec![0u32; world * world];
    for o in compute_overlaps(sender.grid(), receiver.grid()) {
        let j = sp.owner(o.sender_cell);
        let i = rp.owner(o.receiver_cell);
        sizes[i * world + j] += 1;
        let e = Entry {
            sender_cell: o.sender_cell as u32,
            receiver_cell: o.receiver_cell as u32,
            volume: o.volume,
        };
        match (i == rank, j == rank) {
            (true, true) => diagonal.push(e),
            (false, true) => column[i].push(e),
            (true, false) => row[j].push(e),
            (false, false) => {}
        }
    }
    Ok(CommMatrix::assemble(
        sender.clone(),
        receiver.clone(),
        world,
        diagonal,
        column,
        row,
        sizes,
    ))
}

impl<T: Real> CommMatrix<T> {
    fn assemble(
        sender: Arc<LocalLayout<T>>,
        receiver: Arc<LocalLayout<T>>,
        world: usize,
        diagonal: Vec<Entry<T>>,
        column: Vec<Vec<Entry<T>>>,
        row: Vec<Vec<Entry<T>>>,
        sizes: Vec<u32>,
    ) -> Self {
        let rank = receiver.rank();
        let n_owned = receiver.n_owned();
        // (receiver local, sender global, source)
        let mut contributions: Vec<(u32, u32, Source, T)> = Vec::new();
        for (k, e) in diagonal.iter().enumerate() {
            let r = receiver.local_index(e.receiver_cell as usize).expect("owned receiver cell");
            contributions.push((r as u32, e.sender_cell, Source::Local(k as u32), e.volume));
        }
        for (j, entries) in row.iter().enumerate() {
            for (k, e) in entries.iter().enumerate() {
                let r = receiver.local_index(e.receiver_cell as usize).expect("owned receiver cell");
                contributions.push((
                    r as u32,
                    e.sender_cell,
                    Source::Remote {
                        rank: j as u32,
                        index: k as u32,
                    },
                    e.volume,
                ));
            }
        }
        contributions.sort_unstable_by_key(|c| (c.0, c.1));
        let mut plan_offsets = vec![0u32; n_owned + 1];
        let mut covered = vec![T::zero(); n_owned];
        for c in &contributions {
            plan_offsets[c.0 as usize + 1] += 1;
            covered[c.0 as usize] += c.3;
        }
        for i in 0..n_owned {
            plan_offsets[i + 1] += plan_offsets[i];
        }
        let plan = contributions.into_iter().map(|c| c.2).collect();
        Self {
            sender,
            receiver,
            rank,
            world,
            diagonal,
            column,
            row,
            sizes,
            plan_offsets,
            plan,
            covered,
        }
    }

    /// The matrix for the opposite direction (receiver grid sending to sender grid).
    ///
    /// Purely local: rows and columns swap roles and the size table is transposed.
    pub fn reversed(&self) -> CommMatrix<T> {
        let flip = |e: &Entry<T>| Entry {
            sender_cell: e.receiver_cell,
            receiver_cell: e.sender_cell,
            volume: e.volume,
        };
        let sort = |mut v: Vec<Entry<T>>| {
            v.sort_unstable_by_key(|e| (e.receiver_cell, e.sender_cell));
            v
        };
        let p = self.world;
        let mut sizes = vec![0u32; p * p];
        for i in 0..p {
            for j in 0..p {
                sizes[j * p + i] = self.sizes[i * p + j];
            }
        }
        CommMatrix::assemble(
            self.receiver.clone(),
            self.sender.clone(),
            p,
            sort(self.diagonal.iter().map(flip).collect()),
            self.row.iter().map(|v| sort(v.iter().map(flip).collect())).collect(),
            self.column.iter().map(|v| sort(v.iter().map(flip).collect())).collect(),
            sizes,
        )
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn world_size(&self) -> usize {
        self.world
    }

    pub fn sender_layout(&self) -> &Arc<LocalLayout<T>> {
        &self.sender
    }

    pub fn receiver_layout(&self) -> &Arc<LocalLayout<T>> {
        &self.receiver
    }

    /// Overlaps handled without communication.
    pub fn diagonal(&self) -> &[Entry<T>] {
        &self.diagonal
    }

    /// Dataset this rank sends to `receiver_rank`.
    pub fn column(&self, receiver_rank: usize) -> &[Entry<T>] {
        &self.column[receiver_rank]
    }

    /// Dataset this rank receives from `sender_rank`.
    pub fn row(&self, sender_rank: usize) -> &[Entry<T>] {
        &self.row[sender_rank]
    }

    /// Global number of entries in dataset (receiver rank `i`, sender rank `j`).
    pub fn dataset_size(&self, i: usize, j: usize) -> usize {
        self.sizes[i * self.world + j] as usize
    }

    /// Number of non-empty off-diagonal datasets in the whole matrix.
    pub fn nonempty_off_diagonal(&self) -> usize {
        (0..self.world)
            .flat_map(|i| (0..self.world).map(move |j| (i, j)))
            .filter(|&(i, j)| i != j && self.dataset_size(i, j) > 0)
            .count()
    }

    /// Fraction of each owned receiver cell covered by sender cells.
    pub fn coverage(&self, owned_receiver: usize) -> T {
        self.covered[owned_receiver] / self.receiver.grid().cell_volume()
    }

    /// Owned receiver cells with some but less than `threshold` coverage, and with none.
    pub fn coverage_report(&self, threshold: f64) -> (usize, usize) {
        let mut partial = 0;
        let mut none = 0;
        for r in 0..self.covered.len() {
            let c = self.coverage(r).as_f64();
            if c == 0.0 {
                none += 1;
            } else if c < threshold {
                partial += 1;
            }
        }
        (partial, none)
    }

    fn encode_dataset(&self, entries: &[Entry<T>], inputs: &[&GridField<T>], specs: &[FieldSpec], out: &mut Writer) {
        let weight = specs.iter().any(|s| s.kind == InterpolationKind::Consistent);
        for e in entries {
            let l = self
                .sender
                .local_index(e.sender_cell as usize)
                .expect("sender cell owned by this rank");
            out.u32(e.receiver_cell);
            for (f, s) in inputs.iter().zip(specs) {
                for c in 0..s.components {
                    let v = f.get(l, c);
                    match s.kind {
                        InterpolationKind::Conservative => out.real(v * e.volume),
                        InterpolationKind::Consistent => out.real(v),
                    };
                }
            }
            if weight {
                out.real(e.volume);
            }
        }
    }

    fn decode_dataset(&self, src: usize, r: &mut Reader<'_>, width: usize, weight: bool, store: &mut Vec<T>) -> Result<()> {
        for e in &self.row[src] {
            let id = r.u32()?;
            if id != e.receiver_cell {
                return Err(Error::Wire(format!(
                    "dataset from rank {src} lists receiver cell {id}, expected {}",
                    e.receiver_cell
                )));
            }
            for _ in 0..width {
                store.push(r.real()?);
            }
            if weight {
                let w: T = r.real()?;
                if w != e.volume {
                    return Err(Error::Wire(format!("overlap weight mismatch from rank {src}")));
                }
            }
        }
        Ok(())
    }
}

/// Moves `inputs` (on the sender grid) to `outputs` (on the receiver grid) in one exchange.
///
/// Only owned receiver cells with at least one overlap are written; cells without
/// coverage keep their previous values, and halos are left for the caller to refresh.
pub fn interpolate_fields<T: Real>(
    matrix: &CommMatrix<T>,
    inputs: &[&GridField<T>],
    kinds: &[InterpolationKind],
    outputs: &mut [&mut GridField<T>],
    strategy: Strategy,
    ctx: &RankContext<'_>,
) -> Result<()> {
    if ctx.world_size() != matrix.world || ctx.rank() != matrix.rank {
        return Err(Error::config(format!(
            "matrix built for rank {} of {} used on rank {} of {}",
            matrix.rank,
            matrix.world,
            ctx.rank(),
            ctx.world_size()
        )));
    }
    if inputs.len() != kinds.len() || outputs.len() != kinds.len() {
        return Err(Error::config("interpolation needs one kind and one output per input"));
    }
    let mut specs = Vec::with_capacity(kinds.len());
    for ((i, o), k) in inputs.iter().zip(outputs.iter()).zip(kinds) {
        if !Arc::ptr_eq(i.layout(), &matrix.sender) || !Arc::ptr_eq(o.layout(), &matrix.receiver) {
            return Err(Error::config("field layout does not match the communication matrix"));
        }
        if i.components() != o.components() {
            return Err(Error::config("input and output fields differ in component count"));
        }
        specs.push(FieldSpec::new(*k, i.components()));
    }
    let width: usize = specs.iter().map(|s| s.components).sum();
    let weight = specs.iter().any(|s| s.kind == InterpolationKind::Consistent);
    let ebytes = entry_bytes::<T>(&specs);
    let p = matrix.world;
    let me = matrix.rank;

    // values received from each sender rank, `width` per row entry
    let mut incoming: Vec<Vec<T>> = vec![Vec::new(); p];
    match strategy {
        Strategy::Distributed => {
            for q in 0..p {
                let col = &matrix.column[q];
                if q == me || col.is_empty() {
                    continue;
                }
                let mut w = Writer::with_capacity(DIRECT_HEADER_BYTES + col.len() * ebytes);
                w.u32(col.len() as u32);
                matrix.encode_dataset(col, inputs, &specs, &mut w);
                ctx.send(q, TAG_DIRECT, w.finish())?;
            }
            for j in 0..p {
                if j == me || matrix.row[j].is_empty() {
                    continue;
                }
                let payload = ctx.receive(j, TAG_DIRECT)?;
                let mut r = Reader::new(&payload);
                let n = r.u32()? as usize;
                if n != matrix.row[j].len() {
                    return Err(Error::Wire(format!(
                        "rank {j} sent {n} entries, expected {}",
                        matrix.row[j].len()
                    )));
                }
                matrix.decode_dataset(j, &mut r, width, weight, &mut incoming[j])?;
                r.finish()?;
            }
        }
        Strategy::GatherScatter => {
            let encode_block = |dest: usize, w: &mut Writer| {
                let col = &matrix.column[dest];
                w.u32(dest as u32).u32(me as u32).u32(col.len() as u32);
                matrix.encode_dataset(col, inputs, &specs, w);
            };
            let nonempty: Vec<usize> = (0..p).filter(|&q| q != me && !matrix.column[q].is_empty()).collect();
            if me != 0 {
                let mut w = Writer::new();
                w.u32(nonempty.len() as u32);
                for &q in &nonempty {
                    encode_block(q, &mut w);
                }
                ctx.send(0, TAG_GATHER, w.finish())?;
                let blob = ctx.receive(0, TAG_SCATTER)?;
                decode_routed(matrix, &blob, width, weight, &mut incoming)?;
            } else if p > 1 {
                // blocks headed to each rank, in ascending source order
                let mut routed: Vec<(u32, Writer)> = (0..p).map(|_| (0, Writer::new())).collect();
                for &q in &nonempty {
                    routed[q].0 += 1;
                    encode_block(q, &mut routed[q].1);
                }
                for src in 1..p {
                    let blob = ctx.receive(src, TAG_GATHER)?;
                    let mut r = Reader::new(&blob);
                    let blocks = r.u32()?;
                    for _ in 0..blocks {
                        let dest = r.u32()? as usize;
                        let from = r.u32()? as usize;
                        let count = r.u32()? as usize;
                        if from != src || dest >= p || dest == src {
                            return Err(Error::Wire(format!("bad routed block header from rank {src}")));
                        }
                        if dest == 0 {
                            if count != matrix.row[src].len() {
                                return Err(Error::Wire(format!("rank {src} sent {count} entries to root")));
                            }
                            matrix.decode_dataset(src, &mut r, width, weight, &mut incoming[src])?;
                        } else {
                            let body = r.bytes(count * ebytes)?;
                            let (n, w) = &mut routed[dest];
                            *n += 1;
                            w.u32(dest as u32).u32(from as u32).u32(count as u32).bytes(body);
                        }
                    }
                    r.finish()?;
                }
                for (dest, (n, body)) in routed.into_iter().enumerate().skip(1) {
                    let mut w = Writer::with_capacity(ROUTED_HEADER_BYTES + body.len());
                    w.u32(n).bytes(&body.finish());
                    ctx.send(dest, TAG_SCATTER, w.finish())?;
                }
            }
        }
    }

    // combine in ascending sender-cell order
    let vol_r = matrix.receiver.grid().cell_volume();
    for r in 0..matrix.receiver.n_owned() {
        let lo = matrix.plan_offsets[r] as usize;
        let hi = matrix.plan_offsets[r + 1] as usize;
        if lo == hi {
            continue;
        }
        let sources = &matrix.plan[lo..hi];
        let mut offset = 0;
        for (fi, spec) in specs.iter().enumerate() {
            let input = inputs[fi];
            for c in 0..spec.components {
                // (value or partial integral, weight) of one contribution
                let fetch = |s: &Source| -> (T, T) {
                    match *s {
                        Source::Local(k) => {
                            let e = &matrix.diagonal[k as usize];
                            let l = matrix.sender.local_index(e.sender_cell as usize).unwrap();
                            let v = input.get(l, c);
                            match spec.kind {
                                InterpolationKind::Conservative => (v * e.volume, e.volume),
                                InterpolationKind::Consistent => (v, e.volume),
                            }
                        }
                        Source::Remote { rank, index } => {
                            let e = &matrix.row[rank as usize][index as usize];
                            (incoming[rank as usize][index as usize * width + offset + c], e.volume)
                        }
                    }
                };
                let value = match spec.kind {
                    InterpolationKind::Conservative => {
                        let mut acc = T::zero();
                        for s in sources {
                            acc += fetch(s).0;
                        }
                        acc / vol_r
                    }
                    InterpolationKind::Consistent => {
                        let reference = fetch(&sources[0]).0;
                        let mut acc = T::zero();
                        let mut wsum = T::zero();
                        for s in sources {
                            let (v, w) = fetch(s);
                            acc += w * (v - reference);
                            wsum += w;
                        }
                        reference + acc / wsum
                    }
                };
                outputs[fi].set(r, c, value);
            }
            offset += spec.components;
        }
    }
    Ok(())
}

fn decode_routed<T: Real>(
    matrix: &CommMatrix<T>,
    blob: &[u8],
    width: usize,
    weight: bool,
    incoming: &mut [Vec<T>],
) -> Result<()> {
    let mut r = Reader::new(blob);
    let blocks = r.u32()?;
    for _ in 0..blocks {
        let dest = r.u32()? as usize;
        let src = r.u32()? as usize;
        let count = r.u32()? as usize;
        if dest != matrix.rank || src >= matrix.world || count != matrix.row[src].len() {
            return Err(Error::Wire(format!(
                "routed block ({dest}, {src}, {count}) does not match this rank's row"
            )));
        }
        matrix.decode_dataset(src, &mut r, width, weight, &mut incoming[src])?;
    }
    r.finish()
}

/// Single-field form of [`interpolate_fields`].
pub fn interpolate<T: Real>(
    matrix: &CommMatrix<T>,
    input: &GridField<T>,
    kind: InterpolationKind,
    output: &mut GridField<T>,
    strategy: Strategy,
    ctx: &RankContext<'_>,
) -> Result<()> {
    interpolate_fields(matrix, &[input], &[kind], &mut [output], strategy, ctx)
}

/// Predicted traffic of one rank for one interpolation call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RankCost {
    pub messages_sent: u64,
    pub messages_received: u64,
    /// Entry bytes only, without message or block headers.
    pub payload_bytes_sent: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

/// Message and byte counts every rank will see for one call with fields `specs`.
pub fn strategy_cost<T: Real>(matrix: &CommMatrix<T>, strategy: Strategy, specs: &[FieldSpec]) -> Vec<RankCost> {
    let p = matrix.world;
    let e = entry_bytes::<T>(specs) as u64;
    let n = |i: usize, j: usize| matrix.dataset_size(i, j) as u64;
    let mut cost = vec![RankCost::default(); p];
    match strategy {
        Strategy::Distributed => {
            for i in 0..p {
                for j in 0..p {
                    if i == j || n(i, j) == 0 {
                        continue;
                    }
                    let bytes = DIRECT_HEADER_BYTES as u64 + n(i, j) * e;
                    cost[j].messages_sent += 1;
                    cost[j].payload_bytes_sent += n(i, j) * e;
                    cost[j].bytes_sent += bytes;
                    cost[i].messages_received += 1;
                    cost[i].bytes_received += bytes;
                }
            }
        }
        Strategy::GatherScatter => {
            if p == 1 {
                return cost;
            }
            let block = |i: usize, j: usize| {
                if i == j || n(i, j) == 0 {
                    0
                } else {
                    BLOCK_HEADER_BYTES as u64 + n(i, j) * e
                }
            };
            for k in 1..p {
                // up: rank k's column to root
                let up = ROUTED_HEADER_BYTES as u64 + (0..p).map(|d| block(d, k)).sum::<u64>();
                let up_payload: u64 = (0..p).filter(|&d| d != k).map(|d| n(d, k) * e).sum();
                cost[k].messages_sent += 1;
                cost[k].payload_bytes_sent += up_payload;
                cost[k].bytes_sent += up;
                cost[0].messages_received += 1;
                cost[0].bytes_received += up;
                // down: everything headed to rank k
                let down = ROUTED_HEADER_BYTES as u64 + (0..p).map(|s| block(k, s)).sum::<u64>();
                let down_payload: u64 = (0..p).filter(|&s| s != k).map(|s| n(k, s) * e).sum();
                cost[0].messages_sent += 1;
                cost[0].payload_bytes_sent += down_payload;
                cost[0].bytes_sent += down;
                cost[k].messages_received += 1;
                cost[k].bytes_received += down;
            }
        }
    }
    cost
}
