use crate::numerics::ParamStore;

/// Parameter group of a parameter name.
pub fn param_group(name: &str) -> &'static str {
    if name.starts_with("memory.") {
        "memory"
    } else if name.starts_with("kfm.") {
        "kfm"
    } else if name.starts_with("gnn.") {
        "gnn"
    } else if name.starts_with("head.") {
        "head"
    } else {
        "transformer"
    }
}

pub fn is_knowledge_param(name: &str) -> bool {
    matches!(param_group(name), "memory" | "kfm" | "gnn")
}

/// Linear warmup over the first `warmup` fraction of steps, then linear decay to zero.
pub fn linear_schedule(step: usize, total: usize, warmup: f64) -> f64 {
    if total == 0 {
        return 1.0;
    }
    let warm = (warmup * total as f64).round() as usize;
    let s = step as f64;
    if step < warm {
        (s + 1.0) / warm as f64
    } else {
        let rest = (total - warm).max(1) as f64;
        (1.0 - (s - warm as f64) / rest).max(0.0)
    }
}

/// Rescale all gradients so their global L2 norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.iter().flat_map(|(_, p)| p.grad.iter()).map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for p in store.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// AdamW with decoupled weight decay. Pinned rows are never updated.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Per-parameter base learning rate.
    lrs: Vec<f64>,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    /// `knowledge_lr` gives memory, KFM and GNN parameters their own learning rate.
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64, knowledge_lr: Option<f64>) -> Self {
        let lrs = store
            .iter()
            .map(|(_, p)| match knowledge_lr {
                Some(k) if is_knowledge_param(&p.name) => k,
                _ => lr,
            })
            .collect();
        let zeros = || store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, lrs, t: 0, m: zeros(), v: zeros() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update with every base learning rate multiplied by `scale`.
    pub fn step(&mut self, store: &mut ParamStore, scale: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.requires_grad {
                continue;
            }
            let lr = self.lrs[i] * scale;
            let cols = p.value.dims2().1;
            let decay = if p.decay { self.weight_decay } else { 0.0 };
            let pinned = &p.pinned_rows;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, x) in p.value.data_mut().iter_mut().enumerate() {
                if !pinned.is_empty() && pinned.contains(&(j / cols)) {
                    continue;
                }
                let g = p.grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *x -= lr * (mhat / (vhat.sqrt() + self.eps) + decay * *x);
            }
        }
    }
}
