//! Scalar reductions used as training objectives.

use serde::{Deserialize, Serialize};

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which way round the softmax divergence is taken.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(softmax(true) || softmax(pred))`
    #[default]
    TrueToPred,
    /// `KL(softmax(pred) || softmax(true))`
    PredToTrue,
}

fn log_softmax_rows<T: Scalar>(x: &[T], d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        out.extend(row.iter().map(|&v| v - lse));
    }
    out
}

impl<T: Scalar> Graph<T> {
    /// Mean of squared differences.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Sum of squared differences.
    pub fn sum_sq(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        Ok(self.sum(sq))
    }

    /// `Σ_rows KL(softmax(p_row) || softmax(q_row))` for `[rows, d]` logits.
    pub fn kl_softmax(&mut self, p_logits: Var, q_logits: Var) -> Result<Var> {
        let shape = self.shape(p_logits).to_vec();
        if shape.len() != 2 || self.shape(q_logits) != shape.as_slice() {
            return Err(Error::Shape(format!(
                "kl_softmax: {shape:?} vs {:?}",
                self.shape(q_logits)
            )));
        }
        let d = shape[1];
        let lp = log_softmax_rows(self.value(p_logits).data(), d);
        let lq = log_softmax_rows(self.value(q_logits).data(), d);
        let mut row_kl = Vec::with_capacity(shape[0]);
        for (rp, rq) in lp.chunks(d).zip(lq.chunks(d)) {
            row_kl.push(
                rp.iter()
                    .zip(rq)
                    .map(|(&a, &b)| a.exp() * (a - b))
                    .sum::<T>(),
            );
        }
        let total = row_kl.iter().copied().sum::<T>();
        Ok(self.push(Tensor::scalar(total), &[p_logits, q_logits], move |_, g, need| {
            let g = g.item();
            let mut dp = Vec::new();
            let mut dq = Vec::new();
            for (r, (rp, rq)) in lp.chunks(d).zip(lq.chunks(d)).enumerate() {
                for (&a, &b) in rp.iter().zip(rq) {
                    let (p, q) = (a.exp(), b.exp());
                    if need[0] {
                        dp.push(g * p * (a - b - row_kl[r]));
                    }
                    if need[1] {
                        dq.push(g * (q - p));
                    }
                }
            }
            vec![
                need[0].then(|| Tensor::from_vec(&shape, dp).expect("sized")),
                need[1].then(|| Tensor::from_vec(&shape, dq).expect("sized")),
            ]
        }))
    }
}
