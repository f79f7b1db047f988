//! Adam with per-group step counters.

use numcore::{Tape, Tensor};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamGroup, ParamStore};

const EPS: f64 = 1e-8;
const PREFIX: &str = "optim.";

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
    steps: [u64; 2],
}

fn slot(group: ParamGroup) -> usize {
    match group {
        ParamGroup::Generator => 0,
        ParamGroup::Discriminator => 1,
    }
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            m: Vec::new(),
            v: Vec::new(),
            steps: [0; 2],
        }
    }

    pub fn steps(&self, group: ParamGroup) -> u64 {
        self.steps[slot(group)]
    }

    /// Updates every parameter of `group` that received a gradient on `tape`.
    pub fn step(&mut self, store: &mut ParamStore, tape: &Tape, bound: &Bound, group: ParamGroup) -> Result<()> {
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        let t = &mut self.steps[slot(group)];
        *t += 1;
        let c1 = 1.0 - self.beta1.powi(*t as i32);
        let c2 = 1.0 - self.beta2.powi(*t as i32);
        let ids: Vec<_> = store.ids().filter(|&id| store.group(id) == group).collect();
        for id in ids {
            let Some(g) = tape.grad(bound[id]) else { continue };
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()).expect("gradient shape"));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()).expect("gradient shape"));
            let p = store.get_mut(id);
            if p.shape() != g.shape() {
                return Err(Error::contract("gradient shape differs from parameter"));
            }
            for (((pv, mv), vv), &gv) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                *pv -= self.lr * (*mv / c1) / ((*vv / c2).sqrt() + EPS);
            }
        }
        Ok(())
    }

    /// Moments and step counters as named tensors for a checkpoint.
    pub fn state(&self, store: &ParamStore) -> Result<Vec<(String, Tensor)>> {
        let mut out = vec![(
            format!("{PREFIX}steps"),
            Tensor::new([2], vec![self.steps[0] as f64, self.steps[1] as f64])?,
        )];
        for id in store.ids() {
            let i = id.index();
            if let (Some(Some(m)), Some(Some(v))) = (self.m.get(i), self.v.get(i)) {
                out.push((format!("{PREFIX}m.{}", store.name(id)), m.clone()));
                out.push((format!("{PREFIX}v.{}", store.name(id)), v.clone()));
            }
        }
        Ok(out)
    }

    /// Restores state written by [`Adam::state`].
    pub fn restore(&mut self, store: &ParamStore, tensors: &[(String, Tensor)]) -> Result<()> {
        self.m = vec![None; store.len()];
        self.v = vec![None; store.len()];
        for (name, t) in tensors {
            let Some(rest) = name.strip_prefix(PREFIX) else { continue };
            if rest == "steps" {
                self.steps = [t.data()[0] as u64, t.data()[1] as u64];
            } else if let Some((kind, pname)) = rest.split_once('.') {
                let id = store
                    .by_name(pname)
                    .ok_or_else(|| Error::config(format!("optimizer state for unknown parameter {pname}")))?;
                match kind {
                    "m" => self.m[id.index()] = Some(t.clone()),
                    "v" => self.v[id.index()] = Some(t.clone()),
                    _ => return Err(Error::config(format!("unknown optimizer tensor {name}"))),
                }
            }
        }
        Ok(())
    }

    pub fn is_state(name: &str) -> bool {
        name.starts_with(PREFIX)
    }
}
