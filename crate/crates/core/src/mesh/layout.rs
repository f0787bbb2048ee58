use std::sync::Arc;

use crate::error::{Error, Result};
use crate::partition::PartitionMap;
use crate::real::Real;

use super::grid::UniformGrid;

/// Marker for "no such cell" in dense index tables.
pub const NONE: u32 = u32::MAX;

/// Offsets of the 27-point neighbourhood, x fastest; index 13 is the cell itself.
pub const STENCIL: [[i64; 3]; 27] = {
    let mut s = [[0i64; 3]; 27];
    let mut n = 0;
    while n < 27 {
        s[n] = [(n % 3) as i64 - 1, ((n / 3) % 3) as i64 - 1, (n / 9) as i64 - 1];
        n += 1;
    }
    s
};

/// Stencil slot of a neighbour offset.
#[inline]
pub const fn stencil_slot(d: [i64; 3]) -> usize {
    ((d[0] + 1) + 3 * (d[1] + 1) + 9 * (d[2] + 1)) as usize
}

/// Rank-local view of a partitioned grid: owned cells followed by a one-cell halo.
///
/// Owned and halo cells are each sorted by global id. Halo cells are the
/// non-owned members of the 26-neighbourhood of owned cells, so both face and
/// edge/corner neighbours are available to stencils.
#[derive(Debug)]
pub struct LocalLayout<T: Real> {
    grid: UniformGrid<T>,
    partition: Arc<PartitionMap>,
    rank: usize,
    n_owned: usize,
    global: Vec<usize>,
    to_local: Vec<u32>,
    /// Per peer: owned local indices to send, in global id order.
    send: Vec<Vec<u32>>,
    /// Per peer: halo local indices to fill, in global id order.
    recv: Vec<Vec<u32>>,
    stencil: Vec<[u32; 27]>,
}

impl<T: Real> LocalLayout<T> {
    pub fn new(grid: &UniformGrid<T>, partition: Arc<PartitionMap>, rank: usize) -> Result<Arc<Self>> {
        if !partition.matches(grid) {
            return Err(Error::config("partition dims do not match grid"));
        }
        let p = partition.rank_count();
        if rank >= p {
            return Err(Error::config(format!("rank {rank} outside partition of {p} ranks")));
        }
        let n = grid.cell_count();
        let owned = partition.cells_of(rank);
        let mut is_halo = vec![false; n];
        // owned cells that some peer needs, flagged per peer
        let mut send_sets: Vec<Vec<usize>> = vec![Vec::new(); p];
        for &c in &owned {
            let mut peers: Vec<usize> = Vec::new();
            for d in STENCIL {
                if let Some(nb) = grid.offset(c, d) {
                    let o = partition.owner(nb);
                    if o != rank {
                        is_halo[nb] = true;
                        if !peers.contains(&o) {
                            peers.push(o);
                        }
                    }
                }
            }
            for q in peers {
                send_sets[q].push(c);
            }
        }
        let halo: Vec<usize> = (0..n).filter(|&c| is_halo[c]).collect();
        let n_owned = owned.len();
        let mut global = owned;
        global.extend_from_slice(&halo);
        let mut to_local = vec![NONE; n];
        for (l, &g) in global.iter().enumerate() {
            to_local[g] = l as u32;
        }
        let mut recv: Vec<Vec<u32>> = vec![Vec::new(); p];
        for &h in &halo {
            recv[partition.owner(h)].push(to_local[h]);
        }
        let send = send_sets
            .into_iter()
            .map(|cells| cells.into_iter().map(|c| to_local[c]).collect())
            .collect();
        let stencil = global[..n_owned]
            .iter()
            .map(|&c| {
                let mut s = [NONE; 27];
                for (slot, d) in STENCIL.iter().enumerate() {
                    if let Some(nb) = grid.offset(c, *d) {
                        s[slot] = to_local[nb];
                    }
                }
                s
            })
            .collect();
        Ok(Arc::new(Self {
            grid: grid.clone(),
            partition,
            rank,
            n_owned,
            global,
            to_local,
            send,
            recv,
            stencil,
        }))
    }

    pub fn grid(&self) -> &UniformGrid<T> {
        &self.grid
    }

    pub fn partition(&self) -> &Arc<PartitionMap> {
        &self.partition
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn n_owned(&self) -> usize {
        self.n_owned
    }

    pub fn n_local(&self) -> usize {
        self.global.len()
    }

    pub fn n_halo(&self) -> usize {
        self.global.len() - self.n_owned
    }

    #[inline]
    pub fn global_id(&self, local: usize) -> usize {
        self.global[local]
    }

    pub fn global_ids(&self) -> &[usize] {
        &self.global
    }

    pub fn owned_global_ids(&self) -> &[usize] {
        &self.global[..self.n_owned]
    }

    /// Local index of a global cell if it is owned or in the halo.
    #[inline]
    pub fn local_index(&self, global: usize) -> Option<usize> {
        match self.to_local.get(global) {
            Some(&l) if l != NONE => Some(l as usize),
            _ => None,
        }
    }

    #[inline]
    pub fn is_owned_local(&self, local: usize) -> bool {
        local < self.n_owned
    }

    /// 27-point neighbourhood of an owned cell as local indices ([`NONE`] outside the grid).
    #[inline]
    pub fn stencil(&self, owned_local: usize) -> &[u32; 27] {
        &self.stencil[owned_local]
    }

    pub fn send_list(&self, peer: usize) -> &[u32] {
        &self.send[peer]
    }

    pub fn recv_list(&self, peer: usize) -> &[u32] {
        &self.recv[peer]
    }
}
