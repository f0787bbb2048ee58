use std::sync::Arc;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::transport::wire::{Reader, Writer};
use crate::transport::RankContext;

use super::layout::LocalLayout;

const TAG_HALO: u32 = 0x4841_4c4f;

/// Cell-centred field on the owned and halo cells of one rank.
///
/// Values are stored cell-major: component `c` of local cell `l` lives at
/// `l * components + c`.
#[derive(Clone, Debug)]
pub struct GridField<T: Real> {
    layout: Arc<LocalLayout<T>>,
    components: usize,
    values: Vec<T>,
}

impl<T: Real> GridField<T> {
    pub fn zeros(layout: &Arc<LocalLayout<T>>, components: usize) -> Self {
        Self::filled(layout, components, T::zero())
    }

    pub fn filled(layout: &Arc<LocalLayout<T>>, components: usize, value: T) -> Self {
        assert!(components == 1 || components == 3, "fields are scalar or 3-vector");
        Self {
            layout: layout.clone(),
            components,
            values: vec![value; layout.n_local() * components],
        }
    }

    /// Fills owned and halo cells from a function of the global cell id and component.
    pub fn from_fn(layout: &Arc<LocalLayout<T>>, components: usize, f: impl Fn(usize, usize) -> T) -> Self {
        let mut out = Self::zeros(layout, components);
        for l in 0..layout.n_local() {
            let g = layout.global_id(l);
            for c in 0..components {
                out.values[l * components + c] = f(g, c);
            }
        }
        out
    }

    pub fn layout(&self) -> &Arc<LocalLayout<T>> {
        &self.layout
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn owned_values(&self) -> &[T] {
        &self.values[..self.layout.n_owned() * self.components]
    }

    #[inline]
    pub fn get(&self, local: usize, comp: usize) -> T {
        self.values[local * self.components + comp]
    }

    #[inline]
    pub fn set(&mut self, local: usize, comp: usize, v: T) {
        self.values[local * self.components + comp] = v;
    }

    #[inline]
    pub fn vector(&self, local: usize) -> Vector3<T> {
        debug_assert_eq!(self.components, 3);
        let b = local * 3;
        Vector3::new(self.values[b], self.values[b + 1], self.values[b + 2])
    }

    #[inline]
    pub fn set_vector(&mut self, local: usize, v: &Vector3<T>) {
        debug_assert_eq!(self.components, 3);
        let b = local * 3;
        self.values[b..b + 3].copy_from_slice(v.as_slice());
    }

    /// Value at a global cell id, if present locally.
    pub fn at_global(&self, global: usize, comp: usize) -> Option<T> {
        self.layout.local_index(global).map(|l| self.get(l, comp))
    }

    pub fn fill(&mut self, v: T) {
        self.values.iter_mut().for_each(|x| *x = v);
    }

    /// Owned values keyed by global id, assembled on rank 0 into a dense global array.
    pub fn gather_global(&self, ctx: &RankContext<'_>) -> Result<Option<Vec<T>>> {
        let comps = self.components;
        let mut w = Writer::with_capacity(self.layout.n_owned() * (4 + comps * T::BYTES));
        for l in 0..self.layout.n_owned() {
            w.u32(self.layout.global_id(l) as u32);
            for c in 0..comps {
                w.real(self.get(l, c));
            }
        }
        let Some(parts) = ctx.gather_to_root(w.finish())? else {
            return Ok(None);
        };
        let n = self.layout.grid().cell_count();
        let mut out = vec![T::zero(); n * comps];
        for p in parts {
            let mut r = Reader::new(&p);
            while !r.is_done() {
                let g = r.u32()? as usize;
                if g >= n {
                    return Err(Error::Wire(format!("cell {g} out of range in field gather")));
                }
                for c in 0..comps {
                    out[g * comps + c] = r.real()?;
                }
            }
        }
        Ok(Some(out))
    }
}

/// Refreshes the halo cells of every field from their owners in one exchange round.
///
/// All fields must share the same layout.
pub fn halo_exchange_all<T: Real>(fields: &mut [&mut GridField<T>], ctx: &RankContext<'_>) -> Result<()> {
    let Some(first) = fields.first() else {
        return Ok(());
    };
    let layout = first.layout.clone();
    if fields.iter().any(|f| !Arc::ptr_eq(&f.layout, &layout)) {
        return Err(Error::Consistency("halo exchange over fields with different layouts".into()));
    }
    let p = ctx.world_size();
    if p == 1 {
        return Ok(());
    }
    let width: usize = fields.iter().map(|f| f.components).sum();
    let mut outgoing = Vec::new();
    for peer in 0..p {
        let list = layout.send_list(peer);
        if list.is_empty() {
            continue;
        }
        let mut w = Writer::with_capacity(list.len() * width * T::BYTES);
        for &l in list {
            for f in fields.iter() {
                for c in 0..f.components {
                    w.real(f.get(l as usize, c));
                }
            }
        }
        outgoing.push((peer, w.finish()));
    }
    for (src, payload) in ctx.sparse_exchange(TAG_HALO, outgoing)? {
        let list = layout.recv_list(src);
        let mut r = Reader::new(&payload);
        for &l in list {
            for f in fields.iter_mut() {
                for c in 0..f.components {
                    let v = r.real()?;
                    f.set(l as usize, c, v);
                }
            }
        }
        r.finish()?;
    }
    Ok(())
}

pub fn halo_exchange<T: Real>(field: &mut GridField<T>, ctx: &RankContext<'_>) -> Result<()> {
    halo_exchange_all(&mut [field], ctx)
}
