//! The shared intermediate representation: pooling, interlingual distances,
//! and decomposed vector quantization.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::transformer::{Leaf, Params};

/// Commitment weight applied to the quantizer's commitment term.
pub const COMMITMENT_WEIGHT: f64 = 0.25;

/// Masked mean over time of `raw [B, T, D]`, giving one `[B, D]` row per
/// sentence.
pub fn pool(tape: &mut Tape, raw: Var, keep: &[bool]) -> Result<Var> {
    tape.masked_mean(raw, keep)
}

/// Batch correlation of pooled representations: the Pearson correlation of
/// each dimension across the sentences of the batch, averaged over
/// dimensions.
pub fn correlation(tape: &mut Tape, hx: Var, hy: Var) -> Result<Var> {
    tape.correlation(hx, hy)
}

/// `1 - correlation(hx, hy)`, in `[0, 2]`.
pub fn corr_distance(tape: &mut Tape, hx: Var, hy: Var) -> Result<Var> {
    let c = correlation(tape, hx, hy)?;
    Ok(tape.affine(c, -1.0, 1.0))
}

/// Largest absolute elementwise difference between two aligned batches.
pub fn max_distance(tape: &mut Tape, hx: Var, hy: Var) -> Result<Var> {
    let diff = tape.sub(hx, hy)?;
    let abs = tape.abs(diff);
    Ok(tape.max_all(abs))
}

/// Evaluates `metric` on plain tensors.
pub fn distance_value(
    metric: fn(&mut Tape, Var, Var) -> Result<Var>,
    hx: &Tensor,
    hy: &Tensor,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (x, y) = (tape.constant(hx.clone()), tape.constant(hy.clone()));
    let d = metric(&mut tape, x, y)?;
    Ok(tape.value(d).item())
}

pub fn correlation_value(hx: &Tensor, hy: &Tensor) -> Result<f64> {
    distance_value(correlation, hx, hy)
}

/// `n` tables of `K` entries, each covering `D / n` consecutive dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<P = Tensor> {
    pub tables: Vec<Leaf<P>>,
}

impl<P> Params<P> for Codebook<P> {
    type Mapped<Q> = Codebook<Q>;

    fn map_named<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Codebook<Q> {
        Codebook { tables: self.tables.map_named(prefix, f) }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        self.tables.visit_mut(prefix, f)
    }
}

pub const CODEBOOK_PREFIX: &str = "codebook";

impl Codebook<Tensor> {
    /// Entries drawn from `N(0, 1 / sub_dim)`.
    pub fn new(n_tables: usize, entries: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let sub_dim = Self::check(n_tables, entries, dim)?;
        let std = (1.0 / sub_dim as f64).sqrt();
        let tables = (0..n_tables).map(|_| Leaf(Tensor::randn(&[entries, sub_dim], std, rng))).collect();
        Ok(Codebook { tables })
    }

    pub fn from_tables(tables: Vec<Tensor>) -> Result<Self> {
        let first = tables.first().ok_or_else(|| Error::Config("codebook needs at least one table".into()))?;
        if first.rank() != 2 || tables.iter().any(|t| t.shape() != first.shape()) {
            return Err(Error::Shape("codebook tables must share one [K, D/n] shape".into()));
        }
        Ok(Codebook { tables: tables.into_iter().map(Leaf).collect() })
    }

    fn check(n_tables: usize, entries: usize, dim: usize) -> Result<usize> {
        if n_tables == 0 || entries == 0 {
            return Err(Error::Config("codebook needs n_tables >= 1 and K >= 1".into()));
        }
        if dim % n_tables != 0 {
            return Err(Error::Config(format!("{n_tables} tables do not divide dimension {dim}")));
        }
        Ok(dim / n_tables)
    }

    pub fn n_tables(&self) -> usize {
        self.tables.len()
    }

    pub fn entries(&self) -> usize {
        self.tables[0].0.shape()[0]
    }

    pub fn sub_dim(&self) -> usize {
        self.tables[0].0.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.n_tables() * self.sub_dim()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> (Codebook<Var>, Vec<(String, Var)>) {
        let mut bound = Vec::new();
        let cb = self.map_named(CODEBOOK_PREFIX, &mut |name, t| {
            let v = if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
            bound.push((name.to_string(), v));
            v
        });
        (cb, bound)
    }

    /// Nearest entry of each table for each `D`-wide row of `flat`; ties go to
    /// the lowest index. Returned row-major as `[rows, n_tables]`.
    pub fn nearest(&self, flat: &[f64]) -> Vec<usize> {
        nearest_indices(&self.tables.iter().map(|t| &t.0).collect::<Vec<_>>(), flat)
    }
}

fn nearest_indices(tables: &[&Tensor], flat: &[f64]) -> Vec<usize> {
    let (k, s) = (tables[0].shape()[0], tables[0].shape()[1]);
    let dim = s * tables.len();
    let rows = flat.len() / dim;
    let mut ids = Vec::with_capacity(rows * tables.len());
    for r in 0..rows {
        for (j, table) in tables.iter().enumerate() {
            let slice = &flat[r * dim + j * s..r * dim + (j + 1) * s];
            let mut best = (0, f64::INFINITY);
            for e in 0..k {
                let d2: f64 = table.row(e).iter().zip(slice).map(|(a, b)| (a - b) * (a - b)).sum();
                if d2 < best.1 {
                    best = (e, d2);
                }
            }
            ids.push(best.0);
        }
    }
    ids
}

pub struct Quantized {
    /// Forward value is the quantized input; gradients pass straight through.
    pub output: Var,
    /// `[rows, n_tables]`, row-major over the flattened leading dimensions.
    pub indices: Vec<usize>,
    /// Mean `||sg(input) - selected||^2` over kept rows (trains the tables).
    pub codebook_loss: Var,
    /// Mean `||input - sg(selected)||^2` over kept rows (trains the encoder).
    pub commitment_loss: Var,
}

/// Replaces each `D / n` slice of `input [..., D]` with its nearest entry in
/// the matching table. `keep` (one flag per `D`-wide row) restricts which rows
/// contribute to the two auxiliary losses.
pub fn quantize(tape: &mut Tape, cb: &Codebook<Var>, input: Var, keep: Option<&[bool]>) -> Result<Quantized> {
    let shape = tape.shape(input).to_vec();
    let tables: Vec<Var> = cb.tables.iter().map(|t| t.0).collect();
    let sub_dim = tape.shape(tables[0])[1];
    let dim = sub_dim * tables.len();
    if shape.last() != Some(&dim) {
        return Err(Error::Shape(format!("quantize: input {shape:?} does not end in codebook width {dim}")));
    }
    let rows = tape.value(input).numel() / dim;
    let kept: Vec<bool> = match keep {
        Some(k) if k.len() != rows => {
            return Err(Error::Shape(format!("quantize: {} mask entries for {rows} rows", k.len())))
        }
        Some(k) => k.to_vec(),
        None => vec![true; rows],
    };
    let count = kept.iter().filter(|&&k| k).count();
    if count == 0 {
        return Err(Error::Degenerate("quantize: every row is masked".into()));
    }
    let indices = {
        let values: Vec<&Tensor> = tables.iter().map(|&t| tape.value(t)).collect();
        nearest_indices(&values, tape.value(input).data())
    };
    let selected = tape.gather_concat(&tables, &indices)?;
    let flat_in = tape.reshape(input, &[rows, dim])?;
    let output = tape.straight_through(input, tape.value(selected).reshape(&shape)?)?;

    let weight = 1.0 / (count * dim) as f64;
    let weights: Vec<f64> =
        kept.iter().flat_map(|&k| std::iter::repeat_n(if k { weight } else { 0.0 }, dim)).collect();
    let weights = tape.constant(Tensor::new(vec![rows, dim], weights)?);
    let weighted_sq = |tape: &mut Tape, a: Var, b: Var| -> Result<Var> {
        let d = tape.sub(a, b)?;
        let sq = tape.mul(d, d)?;
        let w = tape.mul(sq, weights)?;
        Ok(tape.sum(w))
    };
    let sg_in = tape.detach(flat_in);
    let codebook_loss = weighted_sq(tape, sg_in, selected)?;
    let sg_sel = tape.detach(selected);
    let commitment_loss = weighted_sq(tape, flat_in, sg_sel)?;
    Ok(Quantized { output, indices, codebook_loss, commitment_loss })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn pool_cases() {
        let mut tape = Tape::new();
        let raw = tape.constant(Tensor::new(vec![1, 2, 2], vec![1., 3., 3., 5.]).unwrap());
        let p = pool(&mut tape, raw, &[true, true]).unwrap();
        assert_eq!(tape.value(p).data(), &[2., 4.]);

        let single = tape.constant(Tensor::new(vec![1, 1, 2], vec![7., -1.]).unwrap());
        let p = pool(&mut tape, single, &[true]).unwrap();
        assert_eq!(tape.value(p).data(), &[7., -1.]);

        let dup = tape.constant(Tensor::new(vec![1, 4, 2], vec![1., 3., 1., 3., 3., 5., 3., 5.]).unwrap());
        let p = pool(&mut tape, dup, &[true; 4]).unwrap();
        assert_eq!(tape.value(p).data(), &[2., 4.]);

        let masked = tape.constant(Tensor::new(vec![1, 3, 2], vec![1., 3., 3., 5., 100., 100.]).unwrap());
        let p = pool(&mut tape, masked, &[true, true, false]).unwrap();
        assert_eq!(tape.value(p).data(), &[2., 4.]);
        assert!(matches!(pool(&mut tape, masked, &[false; 3]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn correlation_hand_case() {
        // mean(hy) = 7/3; Sxy = 3, Sxx = 2, Syy = 42/9
        let expect = 3.0 / (2.0f64 * 42.0 / 9.0).sqrt();
        let c = correlation_value(&col(&[1., 2., 3.]), &col(&[1., 2., 4.])).unwrap();
        assert!((c - expect).abs() < 1e-12);
        assert!((c - 0.9820).abs() < 1e-3);
    }

    #[test]
    fn correlation_limits() {
        let x = Tensor::from_rows(&[vec![1., 5.], vec![2., -1.], vec![4., 0.5]]).unwrap();
        let neg = x.map(|v| -v);
        assert!((correlation_value(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!((correlation_value(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!((distance_value(corr_distance, &x, &x).unwrap()).abs() < 1e-12);
        assert!((distance_value(corr_distance, &x, &neg).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn constant_dimension_contributes_zero() {
        let x = Tensor::from_rows(&[vec![1., 3.], vec![2., 3.], vec![3., 3.]]).unwrap();
        let c = correlation_value(&x, &x).unwrap();
        assert!((c - 0.5).abs() < 1e-12);
    }

    #[test]
    fn correlation_needs_two_rows() {
        let x = Tensor::from_rows(&[vec![1., 3.]]).unwrap();
        assert!(correlation_value(&x, &x).is_err());
    }

    #[test]
    fn max_distance_cases() {
        let zero = Tensor::from_rows(&[vec![0., 0.]]).unwrap();
        let other = Tensor::from_rows(&[vec![3., -5.]]).unwrap();
        assert_eq!(distance_value(max_distance, &zero, &other).unwrap(), 5.0);
        assert_eq!(distance_value(max_distance, &other, &other).unwrap(), 0.0);
        let wide = Tensor::zeros(&[1, 3]);
        assert!(matches!(distance_value(max_distance, &zero, &wide), Err(Error::Shape(_))));
    }

    fn two_by_two() -> Codebook {
        let t = Tensor::new(vec![2, 1], vec![0., 10.]).unwrap();
        Codebook::from_tables(vec![t.clone(), t]).unwrap()
    }

    #[test]
    fn quantize_hand_case() {
        let cb = two_by_two();
        let mut tape = Tape::new();
        let (bound, _) = cb.bind(&mut tape, true);
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![1., 9.]).unwrap());
        let q = quantize(&mut tape, &bound, x, None).unwrap();
        assert_eq!(tape.value(q.output).data(), &[0., 10.]);
        assert_eq!(q.indices, vec![0, 1]);
        assert!((tape.value(q.codebook_loss).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exact_row_gives_zero_losses() {
        let cb = two_by_two();
        let mut tape = Tape::new();
        let (bound, _) = cb.bind(&mut tape, true);
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![10., 0.]).unwrap());
        let q = quantize(&mut tape, &bound, x, None).unwrap();
        assert_eq!(tape.value(q.output).data(), &[10., 0.]);
        assert_eq!(q.indices, vec![1, 0]);
        assert_eq!(tape.value(q.codebook_loss).item(), 0.0);
        assert_eq!(tape.value(q.commitment_loss).item(), 0.0);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let t = Tensor::new(vec![2, 1], vec![-1., 1.]).unwrap();
        let cb = Codebook::from_tables(vec![t]).unwrap();
        assert_eq!(cb.nearest(&[0.0]), vec![0]);
    }

    #[test]
    fn codebook_requires_divisible_width() {
        let mut rng = rand::rng();
        assert!(Codebook::new(3, 4, 8, &mut rng).is_err());
        let cb = Codebook::new(4, 3, 8, &mut rng).unwrap();
        assert_eq!((cb.n_tables(), cb.entries(), cb.sub_dim()), (4, 3, 2));
    }

    #[test]
    fn masked_rows_do_not_train_codebook() {
        let cb = two_by_two();
        let mut tape = Tape::new();
        let (bound, names) = cb.bind(&mut tape, true);
        let x = tape.leaf(Tensor::new(vec![2, 2], vec![1., 9., 4., 4.]).unwrap());
        let q = quantize(&mut tape, &bound, x, Some(&[true, false])).unwrap();
        assert!((tape.value(q.codebook_loss).item() - 1.0).abs() < 1e-12);
        let g = tape.backward(q.codebook_loss).unwrap();
        assert!(g.get(x).is_none());
        let g0 = g.get(names[0].1).unwrap();
        assert_eq!(g0.data(), &[-1.0, 0.0]);
    }
}
