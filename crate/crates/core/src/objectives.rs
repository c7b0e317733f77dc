//! Four-term training loss: next-token NLL on text, MSE on the denoised
//! blocks, MSE between each block's condition readout and its clean latent,
//! and next-block MSE on the clean-tower outputs.
//!
//! Every term is a mean over its supervised elements. The loss is computed
//! outside the autodiff tape; [`total_loss`] returns the gradient of the
//! total with respect to each input so the caller can seed `backward`.

use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::layout::SequencePlan;
use crate::math;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub text: f64,
    pub image: f64,
    pub hidden: f64,
    pub tower: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            text: 1.0,
            image: 5.0,
            hidden: 0.1,
            tower: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.text, self.image, self.hidden, self.tower];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidConfig(alloc::format!(
                "loss weights must be finite and >= 0: {all:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub total: f64,
    pub text_nll: f64,
    pub image_mse: f64,
    pub hidden_mse: f64,
    pub tower_mse: f64,
    pub text_count: usize,
    pub image_count: usize,
    pub hidden_count: usize,
    pub tower_count: usize,
}

impl LossReport {
    /// Weighted sum of the four components.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        w.text * self.text_nll + w.image * self.image_mse + w.hidden * self.hidden_mse + w.tower * self.tower_mse
    }
}

/// Which plan positions and blocks each term supervises.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TermMasks {
    /// Text-like positions with a next-token target.
    pub text: Vec<usize>,
    /// Blocks whose noisy tokens are denoised.
    pub image: Vec<usize>,
    /// Blocks with a condition to read out.
    pub hidden: Vec<usize>,
    /// `(clean block, target block)` pairs.
    pub tower: Vec<(usize, usize)>,
}

pub fn term_masks(plan: &SequencePlan) -> TermMasks {
    let l = plan.ar_length;
    let text = if l > 0 {
        plan.text_positions().collect()
    } else {
        (0..plan.text_len.saturating_sub(1)).collect()
    };
    TermMasks {
        text,
        image: (0..l).collect(),
        hidden: (0..l).collect(),
        tower: if plan.clean_blocks {
            (0..l.saturating_sub(1)).map(|i| (i, i + 1)).collect()
        } else {
            Vec::new()
        },
    }
}

/// Model outputs and targets for one example.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    /// `(supervised positions) × vocab`.
    pub text_logits: Option<&'a Matrix>,
    pub text_targets: &'a [usize],
    /// Predicted clean latent per block.
    pub z_hat: &'a [Matrix],
    /// Ground-truth clean latent per block.
    pub z_image: &'a [Matrix],
    /// Condition readout per block; empty when conditioning is off.
    pub z_cond: &'a [Matrix],
    /// Clean-tower output per block; empty when clean blocks are off.
    pub z_clean: &'a [Matrix],
}

/// Gradient of the total with respect to each [`LossInputs`] prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads {
    pub text_logits: Option<Matrix>,
    pub z_hat: Vec<Matrix>,
    pub z_cond: Vec<Matrix>,
    pub z_clean: Vec<Matrix>,
}

fn check_pairs(what: &'static str, pred: &[Matrix], target: &[Matrix]) -> Result<()> {
    for (p, t) in pred.iter().zip(target) {
        if p.shape() != t.shape() {
            return Err(shape_err(what, t.shape(), p.shape()));
        }
    }
    Ok(())
}

/// Mean squared error over all elements of all `(pred, target)` pairs,
/// plus `d mean / d pred` scaled by `weight`.
fn mse(pairs: &[(&Matrix, &Matrix)], weight: f64) -> (f64, usize, Vec<Matrix>) {
    let count: usize = pairs.iter().map(|(p, _)| p.len()).sum();
    if count == 0 {
        return (
            0.0,
            0,
            pairs.iter().map(|(p, _)| Matrix::zeros(p.rows, p.cols)).collect(),
        );
    }
    let n = count as f64;
    let mut sum = 0.0;
    let grads = pairs
        .iter()
        .map(|(p, t)| {
            let mut g = Matrix::zeros(p.rows, p.cols);
            for ((gv, a), b) in g.data.iter_mut().zip(&p.data).zip(&t.data) {
                let d = a - b;
                sum += d * d;
                *gv = weight * 2.0 * d / n;
            }
            g
        })
        .collect();
    (sum / n, count, grads)
}

pub fn total_loss(inp: &LossInputs<'_>, w: &LossWeights) -> Result<(LossReport, LossGrads)> {
    w.validate()?;
    let l = inp.z_image.len();
    if inp.z_hat.len() != l {
        return Err(shape_err("predicted blocks", l, inp.z_hat.len()));
    }
    if !inp.z_cond.is_empty() && inp.z_cond.len() != l {
        return Err(shape_err("condition blocks", l, inp.z_cond.len()));
    }
    if !inp.z_clean.is_empty() && inp.z_clean.len() != l {
        return Err(shape_err("clean-tower blocks", l, inp.z_clean.len()));
    }
    check_pairs("predicted block", inp.z_hat, inp.z_image)?;
    check_pairs("condition block", inp.z_cond, inp.z_image)?;
    check_pairs("clean-tower block", inp.z_clean, inp.z_image)?;

    // Text: mean next-token NLL.
    let (text_nll, text_count, text_grad) = match inp.text_logits {
        None if inp.text_targets.is_empty() => (0.0, 0, None),
        None => return Err(shape_err("text logits", inp.text_targets.len(), 0)),
        Some(logits) => {
            if logits.rows != inp.text_targets.len() {
                return Err(shape_err("text logits rows", inp.text_targets.len(), logits.rows));
            }
            if let Some(&bad) = inp.text_targets.iter().find(|&&t| t >= logits.cols) {
                return Err(shape_err("text target", logits.cols, bad));
            }
            let n = logits.rows.max(1) as f64;
            let mut g = Matrix::zeros(logits.rows, logits.cols);
            let mut nll = 0.0;
            for (r, &target) in inp.text_targets.iter().enumerate() {
                let row = logits.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| math::exp(v - max)).sum();
                let lse = max + math::ln(z);
                nll += lse - row[target];
                for (c, gv) in g.row_mut(r).iter_mut().enumerate() {
                    let p = math::exp(row[c] - lse);
                    *gv = w.text * (p - if c == target { 1.0 } else { 0.0 }) / n;
                }
            }
            (nll / n, logits.rows, Some(g))
        }
    };

    let pairs: Vec<_> = inp.z_hat.iter().zip(inp.z_image).collect();
    let (image_mse, image_count, g_hat) = mse(&pairs, w.image);
    let pairs: Vec<_> = inp.z_cond.iter().zip(inp.z_image).collect();
    let (hidden_mse, hidden_count, g_cond) = mse(&pairs, w.hidden);
    let shifted: Vec<_> = inp
        .z_clean
        .iter()
        .take(l.saturating_sub(1))
        .zip(inp.z_image.iter().skip(1))
        .collect();
    let (tower_mse, tower_count, mut g_clean) = mse(&shifted, w.tower);
    if !inp.z_clean.is_empty() {
        let last = &inp.z_clean[l - 1];
        g_clean.push(Matrix::zeros(last.rows, last.cols));
    }

    let supervised = [
        (w.text, text_count),
        (w.image, image_count),
        (w.hidden, hidden_count),
        (w.tower, tower_count),
    ];
    if supervised.iter().all(|&(wt, n)| wt == 0.0 || n == 0) && supervised.iter().any(|&(wt, _)| wt > 0.0) {
        return Err(Error::EmptySupervision);
    }

    let mut report = LossReport {
        total: 0.0,
        text_nll,
        image_mse,
        hidden_mse,
        tower_mse,
        text_count,
        image_count,
        hidden_count,
        tower_count,
    };
    report.total = report.recombine(w);
    Ok((
        report,
        LossGrads {
            text_logits: text_grad,
            z_hat: g_hat,
            z_cond: g_cond,
            z_clean: g_clean,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{build_block_layout, plan_sequence};
    use crate::rng::{normals, stream, Role};
    use alloc::vec;
    use proptest::prelude::*;

    fn m(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = stream(seed, 0, Role::Probe, 0);
        Matrix::from_vec(rows, cols, normals(&mut rng, rows * cols)).unwrap()
    }

    struct Owned {
        logits: Matrix,
        targets: Vec<usize>,
        z_hat: Vec<Matrix>,
        z_image: Vec<Matrix>,
        z_cond: Vec<Matrix>,
        z_clean: Vec<Matrix>,
    }

    impl Owned {
        fn random(seed: u64) -> Self {
            Self {
                logits: m(3, 5, seed),
                targets: vec![4, 0, 2],
                z_hat: (0..3).map(|i| m(2, 2, seed + 10 + i)).collect(),
                z_image: (0..3).map(|i| m(2, 2, seed + 20 + i)).collect(),
                z_cond: (0..3).map(|i| m(2, 2, seed + 30 + i)).collect(),
                z_clean: (0..3).map(|i| m(2, 2, seed + 40 + i)).collect(),
            }
        }

        fn inputs(&self) -> LossInputs<'_> {
            LossInputs {
                text_logits: Some(&self.logits),
                text_targets: &self.targets,
                z_hat: &self.z_hat,
                z_image: &self.z_image,
                z_cond: &self.z_cond,
                z_clean: &self.z_clean,
            }
        }
    }

    #[test]
    fn zero_weights_give_zero_total() {
        let o = Owned::random(1);
        let w = LossWeights {
            text: 0.0,
            image: 0.0,
            hidden: 0.0,
            tower: 0.0,
        };
        let (r, g) = total_loss(&o.inputs(), &w).unwrap();
        assert_eq!(r.total, 0.0);
        assert!(g.z_hat.iter().all(|m| m.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn perfect_prediction_leaves_uniform_text_term() {
        let mut o = Owned::random(2);
        o.z_hat = o.z_image.clone();
        o.z_cond = o.z_image.clone();
        o.z_clean = o.z_image[1..].to_vec();
        o.z_clean.push(m(2, 2, 99));
        o.logits = Matrix::filled(3, 5, 0.3);
        let w = LossWeights {
            tower: 2.0,
            ..LossWeights::default()
        };
        let (r, _) = total_loss(&o.inputs(), &w).unwrap();
        assert!((r.total - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn hand_arithmetic_example() {
        let r = LossReport {
            text_nll: 0.7,
            image_mse: 0.04,
            hidden_mse: 1.0,
            tower_mse: 3.0,
            ..LossReport::default()
        };
        assert!((r.recombine(&LossWeights::default()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masks_follow_plan() {
        let one = plan_sequence(&build_block_layout(2, 2, 1).unwrap(), 1, true);
        assert!(term_masks(&one).tower.is_empty());
        let four = plan_sequence(&build_block_layout(4, 4, 4).unwrap(), 2, true);
        let t = term_masks(&four);
        assert_eq!(t.tower, vec![(0, 1), (1, 2), (2, 3)]);
        assert_eq!(t.text, vec![0, 1]);
        let no_text = plan_sequence(&build_block_layout(4, 4, 4).unwrap(), 0, false);
        let t = term_masks(&no_text);
        assert!(t.text.is_empty() && t.tower.is_empty());
        assert_eq!(t.image.len(), 4);
    }

    #[test]
    fn empty_text_reports_zero() {
        let o = Owned::random(3);
        let inp = LossInputs {
            text_logits: None,
            text_targets: &[],
            ..o.inputs()
        };
        let (r, g) = total_loss(&inp, &LossWeights::default()).unwrap();
        assert_eq!((r.text_nll, r.text_count), (0.0, 0));
        assert!(g.text_logits.is_none());
    }

    #[test]
    fn empty_supervision_when_nothing_enabled_is_present() {
        let inp = LossInputs {
            text_logits: None,
            text_targets: &[],
            z_hat: &[],
            z_image: &[],
            z_cond: &[],
            z_clean: &[],
        };
        assert!(matches!(
            total_loss(&inp, &LossWeights::default()),
            Err(Error::EmptySupervision)
        ));
    }

    #[test]
    fn shape_errors() {
        let o = Owned::random(4);
        let bad = vec![m(3, 2, 1); 3];
        let inp = LossInputs {
            z_hat: &bad,
            ..o.inputs()
        };
        assert!(matches!(
            total_loss(&inp, &LossWeights::default()),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let o = Owned::random(5);
        let w = LossWeights {
            text: 0.7,
            image: 1.3,
            hidden: 0.4,
            tower: 0.9,
        };
        let (_, g) = total_loss(&o.inputs(), &w).unwrap();
        let h = 1e-6;
        let f = |o: &Owned| total_loss(&o.inputs(), &w).unwrap().0.total;
        let check = |fd: f64, an: f64| assert!((fd - an).abs() <= 1e-4 * fd.abs().max(1e-6), "{fd} vs {an}");
        for e in 0..15 {
            let mut a = Owned::random(5);
            let mut b = Owned::random(5);
            a.logits.data[e] += h;
            b.logits.data[e] -= h;
            check((f(&a) - f(&b)) / (2.0 * h), g.text_logits.as_ref().unwrap().data[e]);
        }
        for blk in 0..3 {
            for e in 0..4 {
                for which in 0..3 {
                    let mut a = Owned::random(5);
                    let mut b = Owned::random(5);
                    let (pa, pb, an) = match which {
                        0 => (&mut a.z_hat, &mut b.z_hat, g.z_hat[blk].data[e]),
                        1 => (&mut a.z_cond, &mut b.z_cond, g.z_cond[blk].data[e]),
                        _ => (&mut a.z_clean, &mut b.z_clean, g.z_clean[blk].data[e]),
                    };
                    pa[blk].data[e] += h;
                    pb[blk].data[e] -= h;
                    let fd = (f(&a) - f(&b)) / (2.0 * h);
                    if which == 2 && blk == 2 {
                        assert_eq!(an, 0.0);
                        assert!(fd.abs() < 1e-9);
                    } else {
                        check(fd, an);
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn components_recombine(ws in proptest::collection::vec(0.0f64..10.0, 4), seed in 0u64..50) {
            let o = Owned::random(seed);
            let w = LossWeights { text: ws[0], image: ws[1], hidden: ws[2], tower: ws[3] };
            let (r, _) = total_loss(&o.inputs(), &w).unwrap();
            let manual = w.text * r.text_nll + w.image * r.image_mse + w.hidden * r.hidden_mse + w.tower * r.tower_mse;
            prop_assert!((r.total - manual).abs() <= 1e-12 * manual.abs().max(1.0));
        }

        #[test]
        fn hidden_error_is_monotone(scale in 1.01f64..5.0, seed in 0u64..50) {
            let mut o = Owned::random(seed);
            let w = LossWeights::default();
            let before = total_loss(&o.inputs(), &w).unwrap().0.total;
            for (c, t) in o.z_cond.iter_mut().zip(&o.z_image) {
                for (cv, tv) in c.data.iter_mut().zip(&t.data) {
                    *cv = tv + (*cv - tv) * scale;
                }
            }
            let after = total_loss(&o.inputs(), &w).unwrap().0.total;
            prop_assert!(after > before);
        }
    }
}
