//! Overlap metrics and the statistics used to compare models: Dice tables,
//! the two-sided Wilcoxon signed-rank test and polynomial age/volume fits.

use nalgebra::{DMatrix, DVector};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::volgrid::{LabelGrid, LabelTaxonomy, BACKGROUND, FOREGROUND_LABELS, LABEL_COUNT};

/// Dice overlap of one label. Two empty masks count as a perfect match.
pub fn dice(a: &LabelGrid, b: &LabelGrid, label: u8) -> Result<f64> {
    a.geometry.ensure_same(&b.geometry, "dice")?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.labels.iter().zip(&b.labels) {
        let (ia, ib) = (x == label, y == label);
        na += ia as usize;
        nb += ib as usize;
        inter += (ia && ib) as usize;
    }
    Ok(dice_from_counts(inter, na, nb))
}

#[inline]
pub fn dice_from_counts(inter: usize, na: usize, nb: usize) -> f64 {
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

/// Per-structure Dice for the 26 foreground labels of one case.
#[derive(Clone, Debug, PartialEq)]
pub struct DiceTable {
    /// Indexed by `label id - 1`.
    pub per_label: Vec<f64>,
    pub whole_cerebellum: f64,
    /// Unweighted mean of `per_label`.
    pub mean_structure: f64,
}

pub fn aggregate_dice(a: &LabelGrid, b: &LabelGrid, taxonomy: &LabelTaxonomy) -> Result<DiceTable> {
    a.geometry.ensure_same(&b.geometry, "aggregate_dice")?;
    let mut inter = [0usize; LABEL_COUNT];
    let mut na = [0usize; LABEL_COUNT];
    let mut nb = [0usize; LABEL_COUNT];
    let (mut fg_inter, mut fg_a, mut fg_b) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.labels.iter().zip(&b.labels) {
        na[x as usize] += 1;
        nb[y as usize] += 1;
        if x == y {
            inter[x as usize] += 1;
        }
        let (fa, fb) = (x != BACKGROUND, y != BACKGROUND);
        fg_a += fa as usize;
        fg_b += fb as usize;
        fg_inter += (fa && fb) as usize;
    }
    let per_label: Vec<f64> = taxonomy
        .entries()
        .iter()
        .map(|e| dice_from_counts(inter[e.id as usize], na[e.id as usize], nb[e.id as usize]))
        .collect();
    debug_assert_eq!(per_label.len(), FOREGROUND_LABELS);
    let mean_structure = per_label.iter().sum::<f64>() / per_label.len() as f64;
    Ok(DiceTable { per_label, whole_cerebellum: dice_from_counts(fg_inter, fg_a, fg_b), mean_structure })
}

/// Mean and population standard deviation of each Dice entry across cases.
#[derive(Clone, Debug, PartialEq)]
pub struct DiceSummary {
    pub cases: usize,
    pub mean: DiceTable,
    pub std: DiceTable,
}

pub fn summarize(tables: &[DiceTable]) -> Option<DiceSummary> {
    if tables.is_empty() {
        return None;
    }
    let n = tables.len() as f64;
    let stats = |f: &dyn Fn(&DiceTable) -> f64| {
        let m = tables.iter().map(f).sum::<f64>() / n;
        let v = tables.iter().map(|t| (f(t) - m).powi(2)).sum::<f64>() / n;
        (m, v.sqrt())
    };
    let labels = tables[0].per_label.len();
    let per: Vec<(f64, f64)> = (0..labels).map(|i| stats(&|t| t.per_label[i])).collect();
    let whole = stats(&|t| t.whole_cerebellum);
    let mean = stats(&|t| t.mean_structure);
    Some(DiceSummary {
        cases: tables.len(),
        mean: DiceTable {
            per_label: per.iter().map(|p| p.0).collect(),
            whole_cerebellum: whole.0,
            mean_structure: mean.0,
        },
        std: DiceTable {
            per_label: per.iter().map(|p| p.1).collect(),
            whole_cerebellum: whole.1,
            mean_structure: mean.1,
        },
    })
}

/// Largest sample size evaluated with the exact null distribution.
pub const WILCOXON_EXACT_MAX_N: usize = 12;

/// Signed-rank statistic of paired samples after dropping zero differences.
#[derive(Clone, Debug, PartialEq)]
pub struct SignedRanks {
    /// Ranks of |d| times two (average ranks of ties stay integral).
    pub doubled_ranks: Vec<u64>,
    /// Doubled sum of the ranks of positive differences.
    pub doubled_w_plus: u64,
    /// Sizes of tie groups among |d|.
    pub tie_sizes: Vec<usize>,
}

impl SignedRanks {
    pub fn n(&self) -> usize {
        self.doubled_ranks.len()
    }

    pub fn w_plus(&self) -> f64 {
        self.doubled_w_plus as f64 / 2.0
    }
}

pub fn signed_ranks(x: &[f64], y: &[f64]) -> Result<SignedRanks> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    let mut d: Vec<f64> = x.iter().zip(y).map(|(a, b)| b - a).filter(|v| *v != 0.0).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite paired difference".into()));
    }
    if d.is_empty() {
        return Err(Error::NoNonzeroDifferences);
    }
    d.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    let n = d.len();
    let mut doubled_ranks = vec![0u64; n];
    let mut tie_sizes = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && d[j].abs() == d[i].abs() {
            j += 1;
        }
        // ranks i+1 ..= j share their average (i+1+j)/2
        let doubled = (i + 1 + j) as u64;
        doubled_ranks[i..j].iter_mut().for_each(|r| *r = doubled);
        tie_sizes.push(j - i);
        i = j;
    }
    let doubled_w_plus = d.iter().zip(&doubled_ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    Ok(SignedRanks { doubled_ranks, doubled_w_plus, tie_sizes })
}

/// Exact two-sided p-value from the sign-flip null distribution of W+.
pub fn wilcoxon_exact_p(ranks: &SignedRanks) -> f64 {
    let total: u64 = ranks.doubled_ranks.iter().sum();
    // counts[s] = number of sign patterns whose doubled W+ equals s
    let mut counts = vec![0f64; total as usize + 1];
    counts[0] = 1.0;
    let mut reach = 0usize;
    for &r in &ranks.doubled_ranks {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let patterns = 2f64.powi(ranks.n() as i32);
    let w = ranks.doubled_w_plus as usize;
    let lower: f64 = counts[..=w].iter().sum();
    let upper: f64 = counts[w..].iter().sum();
    (2.0 * lower.min(upper) / patterns).min(1.0)
}

/// Normal approximation with tie and continuity correction.
pub fn wilcoxon_normal_p(ranks: &SignedRanks) -> f64 {
    let n = ranks.n() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let ties: f64 = ranks.tie_sizes.iter().map(|&t| (t as f64).powi(3) - t as f64).sum();
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - ties / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let dev = ((ranks.w_plus() - mean).abs() - 0.5).max(0.0);
    let z = dev / var.sqrt();
    erfc(z / std::f64::consts::SQRT_2).min(1.0)
}

/// Two-sided Wilcoxon signed-rank test on paired samples. Exact for up to
/// [`WILCOXON_EXACT_MAX_N`] non-zero differences, normal approximation above.
pub fn wilcoxon_two_sided(x: &[f64], y: &[f64]) -> Result<f64> {
    let ranks = signed_ranks(x, y)?;
    Ok(if ranks.n() <= WILCOXON_EXACT_MAX_N {
        wilcoxon_exact_p(&ranks)
    } else {
        wilcoxon_normal_p(&ranks)
    })
}

/// `(age, volume)` samples of one structure.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AgeVolumeSeries {
    pub ages: Vec<f64>,
    pub volumes: Vec<f64>,
}

impl AgeVolumeSeries {
    pub fn new(ages: Vec<f64>, volumes: Vec<f64>) -> Result<Self> {
        if ages.len() != volumes.len() {
            return Err(Error::LengthMismatch(ages.len(), volumes.len()));
        }
        if ages.iter().chain(&volumes).any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter("ages and volumes must be finite and >= 0".into()));
        }
        Ok(Self { ages, volumes })
    }
}

/// Least-squares polynomial in the standardized age `(age - center) / scale`.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PolyFit {
    pub coefficients: Vec<f64>,
    pub center: f64,
    pub scale: f64,
    pub residual_std: f64,
}

impl PolyFit {
    pub fn predict(&self, age: f64) -> f64 {
        let t = (age - self.center) / self.scale;
        self.coefficients.iter().rev().fold(0.0, |acc, c| acc * t + c)
    }

    /// Whether `volume` lies within `mean(age) +- k * residual_std`.
    pub fn within(&self, age: f64, volume: f64, k: f64) -> bool {
        (volume - self.predict(age)).abs() <= k * self.residual_std
    }
}

pub fn fit_variability(series: &AgeVolumeSeries, degree: usize) -> Result<PolyFit> {
    if degree > 3 {
        return Err(Error::InvalidParameter(format!("degree {degree} > 3")));
    }
    let n = series.ages.len();
    let p = degree + 1;
    if n <= p {
        return Err(Error::TooFewSamples { needed: p, got: n });
    }
    let center = series.ages.iter().sum::<f64>() / n as f64;
    let spread = (series.ages.iter().map(|a| (a - center).powi(2)).sum::<f64>() / n as f64).sqrt();
    let scale = if spread > 0.0 { spread } else { 1.0 };
    let design = DMatrix::from_fn(n, p, |i, j| ((series.ages[i] - center) / scale).powi(j as i32));
    let rhs = DVector::from_column_slice(&series.volumes);
    let qr = design.clone().qr();
    let r = qr.r();
    let rmax = (0..p).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if (0..p).any(|i| r[(i, i)].abs() <= 1e-10 * rmax.max(1e-300)) {
        return Err(Error::RankDeficient);
    }
    let qt_b = qr.q().transpose() * &rhs;
    let coef = r.solve_upper_triangular(&qt_b).ok_or(Error::RankDeficient)?;
    let resid = &rhs - &design * &coef;
    let residual_std = (resid.norm_squared() / (n - p) as f64).sqrt();
    Ok(PolyFit { coefficients: coef.iter().copied().collect(), center, scale, residual_std })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volgrid::GridGeometry;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn grid(labels: Vec<u8>) -> LabelGrid {
        LabelGrid::new(GridGeometry::with_dims([labels.len(), 1, 1]), labels).unwrap()
    }

    #[test]
    fn dice_basics() {
        let a = grid(vec![1, 1, 0, 0]);
        let b = grid(vec![0, 0, 1, 1]);
        let c = grid(vec![1, 0, 1, 0]);
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.0);
        assert_eq!(dice(&a, &c, 1).unwrap(), 0.5);
        assert_eq!(dice(&a, &b, 7).unwrap(), 1.0);
        assert_eq!(dice(&a, &c, 1).unwrap(), dice(&c, &a, 1).unwrap());
    }

    #[test]
    fn identical_grids_score_one_everywhere() {
        let t = LabelTaxonomy::cerebellum();
        let a = grid((0..=26).collect());
        let table = aggregate_dice(&a, &a, &t).unwrap();
        assert!(table.per_label.iter().all(|&d| d == 1.0));
        assert_eq!(table.whole_cerebellum, 1.0);
        assert_eq!(table.mean_structure, 1.0);
    }

    #[test]
    fn swapping_hemispheres_keeps_whole_cerebellum() {
        let t = LabelTaxonomy::cerebellum();
        let a = grid(vec![0, 6, 6, 6, 2, 2, 0]);
        let swapped: Vec<u8> = a.labels.iter().map(|&l| if l == 6 { t.mirror(6) } else { l }).collect();
        let b = grid(swapped);
        let table = aggregate_dice(&a, &b, &t).unwrap();
        assert_eq!(table.per_label[5], 0.0);
        assert_eq!(table.per_label[t.mirror(6) as usize - 1], 0.0);
        assert_eq!(table.per_label[1], 1.0);
        assert_eq!(table.whole_cerebellum, 1.0);
    }

    #[test]
    fn aggregate_matches_per_label_loop() {
        let t = LabelTaxonomy::cerebellum();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let a = grid((0..200).map(|_| rng.gen_range(0..27)).collect());
            let b = grid((0..200).map(|_| rng.gen_range(0..27)).collect());
            let table = aggregate_dice(&a, &b, &t).unwrap();
            for id in 1..=26u8 {
                assert!((table.per_label[id as usize - 1] - dice(&a, &b, id).unwrap()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn all_positive_shift_of_six() {
        let x = [1.0, 2.5, 3.0, 4.25, 5.0, 7.0];
        let y: Vec<f64> = x.iter().map(|v| v + 0.75).collect();
        assert!((wilcoxon_two_sided(&x, &y).unwrap() - 0.03125).abs() < 1e-15);
    }

    #[test]
    fn identical_samples_have_no_test() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!(matches!(wilcoxon_two_sided(&x, &x), Err(Error::NoNonzeroDifferences)));
        assert!(matches!(wilcoxon_two_sided(&x, &x[..3]), Err(Error::LengthMismatch(5, 3))));
    }

    #[test]
    fn tied_ranks_are_averaged() {
        let r = signed_ranks(&[0.0, 0.0, 0.0, 0.0], &[1.0, -1.0, 2.0, 0.0]).unwrap();
        assert_eq!(r.doubled_ranks, vec![3, 3, 6]);
        assert_eq!(r.doubled_w_plus, 9);
        assert_eq!(r.tie_sizes, vec![2, 1]);
    }

    #[test]
    fn exact_linear_fit_has_no_residual() {
        let ages: Vec<f64> = (0..20).map(|i| i as f64 * 4.0).collect();
        let vols: Vec<f64> = ages.iter().map(|a| 3.0 + 0.5 * a).collect();
        let fit = fit_variability(&AgeVolumeSeries::new(ages, vols).unwrap(), 1).unwrap();
        assert!(fit.residual_std < 1e-9);
        assert!((fit.predict(10.0) - 8.0).abs() < 1e-9);
    }

    #[test]
    fn degree_zero_is_the_mean() {
        let s = AgeVolumeSeries::new(vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 5.0, 5.0, 5.0]).unwrap();
        let fit = fit_variability(&s, 0).unwrap();
        assert!((fit.coefficients[0] - 5.0).abs() < 1e-12);
        let s = AgeVolumeSeries::new(vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 6.0]).unwrap();
        assert!((fit_variability(&s, 0).unwrap().coefficients[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn rank_deficient_design_is_rejected() {
        let s = AgeVolumeSeries::new(vec![30.0; 6], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert!(matches!(fit_variability(&s, 2), Err(Error::RankDeficient)));
        let s = AgeVolumeSeries::new(vec![1.0, 2.0], vec![1.0, 2.0]).unwrap();
        assert!(matches!(fit_variability(&s, 1), Err(Error::TooFewSamples { .. })));
    }

    #[test]
    fn noisy_quadratic_residual_std() {
        let noise = Normal::new(0.0, 0.1).unwrap();
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ages: Vec<f64> = (0..40).map(|i| 1.0 + i as f64 * 2.0).collect();
            let vols: Vec<f64> = ages
                .iter()
                .map(|a| 20.0 + 0.3 * a - 0.002 * a * a + noise.sample(&mut rng))
                .collect();
            let fit = fit_variability(&AgeVolumeSeries::new(ages, vols).unwrap(), 2).unwrap();
            assert!((0.05..=0.2).contains(&fit.residual_std), "seed {seed}: {}", fit.residual_std);
        }
    }

    #[test]
    fn residual_std_scales_with_units() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ages: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let vols: Vec<f64> = ages.iter().map(|a| 10.0 + a + rng.gen_range(0.0..1.0)).collect();
        let scaled: Vec<f64> = vols.iter().map(|v| v * 1000.0).collect();
        let a = fit_variability(&AgeVolumeSeries::new(ages.clone(), vols).unwrap(), 1).unwrap();
        let b = fit_variability(&AgeVolumeSeries::new(ages, scaled).unwrap(), 1).unwrap();
        assert!((b.residual_std - 1000.0 * a.residual_std).abs() < 1e-9 * b.residual_std);
    }
}
