//! Task losses: softmax cross-entropy, center loss, the combined
//! verification loss, and the weighted multi-task total.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_softmax_slice, Tape, Tensor, Var};

/// How the distance to the class center is penalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterLossForm {
    /// ½‖x − c‖²
    #[default]
    SquaredHalved,
    /// ‖x − c‖
    LiteralNorm,
}

/// Per-task loss values L_1..L_T.
#[derive(Clone, Debug, PartialEq)]
pub struct LossVector(Vec<f64>);

impl LossVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::Numeric(format!("task {} loss is {v}", i + 1)));
        }
        Ok(LossVector(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// One learned center per class, moved toward class means outside the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterBank {
    pub centers: Tensor,
    pub rate: f64,
}

impl CenterBank {
    pub fn new(num_classes: usize, dim: usize, rate: f64) -> Result<Self> {
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(Error::Argument(format!(
                "center update rate {rate} outside (0,1]"
            )));
        }
        Ok(CenterBank {
            centers: Tensor::zeros(&[num_classes, dim]),
            rate,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.centers.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.centers.shape()[1]
    }

    fn center(&self, label: usize) -> Result<&[f64]> {
        if label >= self.num_classes() {
            return Err(Error::Argument(format!(
                "label {label} out of range for {} classes",
                self.num_classes()
            )));
        }
        Ok(self.centers.row(label))
    }

    /// `C_c ← C_c − β (C_c − mean of class-c embeddings)` for every class in the batch.
    pub fn update(&mut self, embeddings: &Tensor, labels: &[usize]) -> Result<()> {
        let (rows, d) = embeddings.dims2("update_centers")?;
        if rows != labels.len() || d != self.dim() {
            return Err(Error::dim(
                "update_centers",
                embeddings.shape(),
                self.centers.shape(),
            ));
        }
        if rows == 0 {
            return Err(Error::Argument(
                "center update needs at least one sample".into(),
            ));
        }
        let k = self.num_classes();
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (r, &label) in labels.iter().enumerate() {
            self.center(label)?;
            counts[label] += 1;
            for (s, x) in sums[label * d..(label + 1) * d]
                .iter_mut()
                .zip(embeddings.row(r))
            {
                *s += x;
            }
        }
        let rate = self.rate;
        let centers = self.centers.data_mut();
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let n = counts[c] as f64;
            for j in 0..d {
                let mean = sums[c * d + j] / n;
                let cur = centers[c * d + j];
                centers[c * d + j] = cur - rate * (cur - mean);
            }
        }
        Ok(())
    }
}

/// `−log softmax(logits)[label]`, via log-sum-exp.
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Argument(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(-log_softmax_slice(logits.data())[label])
}

pub fn center_loss(
    embedding: &Tensor,
    bank: &CenterBank,
    label: usize,
    form: CenterLossForm,
) -> Result<f64> {
    if embedding.len() != bank.dim() {
        return Err(Error::dim(
            "center_loss",
            embedding.shape(),
            bank.centers.shape(),
        ));
    }
    let c = bank.center(label)?;
    let sq: f64 = embedding
        .data()
        .iter()
        .zip(c)
        .map(|(x, c)| (x - c) * (x - c))
        .sum();
    Ok(match form {
        CenterLossForm::SquaredHalved => 0.5 * sq,
        CenterLossForm::LiteralNorm => sq.sqrt(),
    })
}

/// Cross-entropy plus `alpha` times the center loss.
pub fn verification_loss(
    logits: &Tensor,
    embedding: &Tensor,
    label: usize,
    bank: &CenterBank,
    alpha: f64,
    form: CenterLossForm,
) -> Result<f64> {
    if alpha < 0.0 {
        return Err(Error::Argument(format!(
            "center-loss weight {alpha} is negative"
        )));
    }
    Ok(cross_entropy(logits, label)? + alpha * center_loss(embedding, bank, label, form)?)
}

/// `Σ w_i L_i`.
pub fn weighted_total(losses: &LossVector, weights: &[f64]) -> Result<f64> {
    if losses.len() != weights.len() {
        return Err(Error::Argument(format!(
            "{} losses but {} weights",
            losses.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0)) {
        return Err(Error::Argument(format!("negative task weight {w}")));
    }
    Ok(losses
        .values()
        .iter()
        .zip(weights)
        .map(|(l, w)| l * w)
        .sum())
}

/// Mean cross-entropy over the rows of `logits`, recorded on the tape.
pub fn cross_entropy_batch(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::Argument("cross-entropy over an empty batch".into()));
    }
    let logp = tape.log_softmax(logits)?;
    let picked = tape.pick_per_row(logp, labels.to_vec())?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / n as f64)
}

/// Mean center loss over the rows of `embeddings`; centers enter as constants.
pub fn center_loss_batch(
    tape: &mut Tape,
    embeddings: Var,
    bank: &CenterBank,
    labels: &[usize],
    form: CenterLossForm,
) -> Result<Var> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::Argument("center loss over an empty batch".into()));
    }
    let shape = tape.value(embeddings).shape().to_vec();
    if shape != [n, bank.dim()] {
        return Err(Error::dim("center_loss", &shape, bank.centers.shape()));
    }
    for &l in labels {
        bank.center(l)?;
    }
    let neg_centers = bank.centers.gather_rows(labels)?.scale(-1.0);
    let diff = tape.add_const(embeddings, neg_centers)?;
    let sq = tape.square(diff)?;
    let per_row = tape.row_sums(sq)?;
    let per_row = match form {
        CenterLossForm::SquaredHalved => tape.scale(per_row, 0.5)?,
        CenterLossForm::LiteralNorm => tape.sqrt(per_row)?,
    };
    let total = tape.sum(per_row)?;
    tape.scale(total, 1.0 / n as f64)
}
