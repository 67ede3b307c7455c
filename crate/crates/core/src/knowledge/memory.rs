use rand_chacha::ChaCha8Rng;

use crate::error::{KalaError, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::transformer::INIT_STD;

/// Row of the null entity.
pub const NULL_ROW: usize = 0;

/// Learnable `(|E_train|+1)×d` entity table. Row 0 is the null entity: it is
/// zero at construction and its gradient is always discarded.
#[derive(Clone, Debug)]
pub struct EntityMemory {
    table: ParamId,
    rows: usize,
    dim: usize,
}

impl EntityMemory {
    pub const PARAM: &'static str = "memory.table";

    pub fn new(num_entities: usize, dim: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let rows = num_entities + 1;
        let table = store.add_normal(Self::PARAM, &[rows, dim], INIT_STD, rng);
        store.value_mut(table).data_mut()[..dim].iter_mut().for_each(|v| *v = 0.0);
        let p = store.get_mut(table);
        p.pinned_rows = vec![NULL_ROW];
        p.decay = false;
        Self { table, rows, dim }
    }

    pub fn bind(store: &ParamStore) -> Result<Self> {
        let table = store
            .id(Self::PARAM)
            .ok_or_else(|| KalaError::Checkpoint(format!("missing parameter {}", Self::PARAM)))?;
        let (rows, dim) = store.value(table).dims2();
        Ok(Self { table, rows, dim })
    }

    pub fn param(&self) -> ParamId {
        self.table
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn check(&self, row: usize) -> Result<()> {
        if row >= self.rows {
            return Err(KalaError::Lookup(format!("entity row {row} outside memory of {} rows", self.rows)));
        }
        Ok(())
    }

    /// Value of one entity embedding; zero for the null entity.
    pub fn ent_embed(&self, store: &ParamStore, row: usize) -> Result<Vec<f64>> {
        self.check(row)?;
        if row == NULL_ROW {
            return Ok(vec![0.0; self.dim]);
        }
        Ok(store.value(self.table).row(row).to_vec())
    }

    /// Differentiable lookup of several rows.
    pub fn lookup(&self, g: &mut Graph, store: &ParamStore, rows: &[usize]) -> Result<Var> {
        for &r in rows {
            self.check(r)?;
        }
        Ok(g.param_rows(store, self.table, rows)?)
    }

    pub fn write_row(&self, store: &mut ParamStore, row: usize, value: &[f64]) -> Result<()> {
        self.check(row)?;
        if row == NULL_ROW {
            return Err(KalaError::Lookup("the null entity row is pinned to zero".into()));
        }
        if value.len() != self.dim {
            return Err(KalaError::Lookup(format!("row of width {} for memory width {}", value.len(), self.dim)));
        }
        store.value_mut(self.table).data_mut()[row * self.dim..(row + 1) * self.dim].copy_from_slice(value);
        Ok(())
    }

    /// Reset row 0 to exactly zero.
    pub fn repin(&self, store: &mut ParamStore) {
        store.value_mut(self.table).data_mut()[..self.dim].iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn null_row_is_zero(&self, store: &ParamStore) -> bool {
        store.value(self.table).row(NULL_ROW).iter().all(|&v| v.to_bits() == 0)
    }

    pub fn table<'a>(&self, store: &'a ParamStore) -> &'a Tensor {
        store.value(self.table)
    }
}
