//! Momentum-averaged class prototypes and class-agnostic domain statistics.
//!
//! During an epoch the bank only accumulates running sums; augmentation reads
//! the values committed at the end of the previous epoch. `commit_epoch`
//! folds the epoch estimates in with `new = gamma * old + (1 - gamma) * est`.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default prototype momentum.
pub const DEFAULT_GAMMA: f64 = 0.8;

#[derive(Clone, Debug, PartialEq)]
struct Accumulator {
    r_sum: Vec<Vec<f64>>,
    class_count: Vec<u64>,
    u_sum: Vec<Vec<f64>>,
    v_sum: Vec<Vec<f64>>,
    domain_count: Vec<u64>,
}

impl Accumulator {
    fn new(classes: usize, domains: usize, channels: usize, rep_len: usize) -> Self {
        Accumulator {
            r_sum: vec![vec![0.0; rep_len]; classes],
            class_count: vec![0; classes],
            u_sum: vec![vec![0.0; channels]; domains],
            v_sum: vec![vec![0.0; channels]; domains],
            domain_count: vec![0; domains],
        }
    }
}

/// Which entries were left untouched by a commit because nothing was
/// accumulated for them.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CommitSummary {
    pub missing_classes: Vec<usize>,
    pub missing_domains: Vec<usize>,
}

/// Layout facts of a bank, serialized in checkpoint manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankLayout {
    pub num_classes: usize,
    pub num_domains: usize,
    pub channels: usize,
    pub spatial: usize,
    pub gamma: f64,
    pub bootstrap: bool,
    pub class_initialized: Vec<bool>,
    pub domain_initialized: Vec<bool>,
    pub class_count: Vec<u64>,
    pub domain_count: Vec<u64>,
    pub commits: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    num_classes: usize,
    num_domains: usize,
    channels: usize,
    spatial: usize,
    gamma: f64,
    bootstrap: bool,
    r: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    class_initialized: Vec<bool>,
    domain_initialized: Vec<bool>,
    acc: Accumulator,
    commits: u64,
}

impl PrototypeBank {
    /// A zero-initialized bank for representations of shape
    /// `[channels, spatial]` (spatial = H*W).
    ///
    /// With `bootstrap` the first commit of an entry stores the estimate
    /// directly instead of mixing it with the zero initialization.
    pub fn new(
        num_classes: usize,
        num_domains: usize,
        channels: usize,
        spatial: usize,
        gamma: f64,
        bootstrap: bool,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::Config(format!("prototype momentum must be in [0, 1), got {gamma}")));
        }
        if num_classes == 0 || num_domains == 0 || channels == 0 || spatial == 0 {
            return Err(Error::Config("prototype bank dimensions must be >= 1".into()));
        }
        let rep_len = channels * spatial;
        Ok(PrototypeBank {
            num_classes,
            num_domains,
            channels,
            spatial,
            gamma,
            bootstrap,
            r: vec![vec![0.0; rep_len]; num_classes],
            u: vec![vec![0.0; channels]; num_domains],
            v: vec![vec![0.0; channels]; num_domains],
            class_initialized: vec![false; num_classes],
            domain_initialized: vec![false; num_domains],
            acc: Accumulator::new(num_classes, num_domains, channels, rep_len),
            commits: 0,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_domains(&self) -> usize {
        self.num_domains
    }

    pub fn commits(&self) -> u64 {
        self.commits
    }

    fn rep_len(&self) -> usize {
        self.channels * self.spatial
    }

    pub fn is_class_initialized(&self, c: usize) -> bool {
        self.class_initialized.get(c).copied().unwrap_or(false)
    }

    pub fn is_domain_initialized(&self, d: usize) -> bool {
        self.domain_initialized.get(d).copied().unwrap_or(false)
    }

    /// Committed prototype `r_c`, flattened `[C * H * W]`.
    pub fn class_prototype(&self, c: usize) -> Result<&[f64]> {
        if c >= self.num_classes {
            return Err(Error::InvalidArgument(format!("class {c} out of range")));
        }
        if !self.class_initialized[c] {
            return Err(Error::UninitializedBank(format!("class prototype {c}")));
        }
        Ok(&self.r[c])
    }

    /// Committed `(u_d, v_d)`.
    pub fn domain_stats(&self, d: usize) -> Result<(&[f64], &[f64])> {
        if d >= self.num_domains {
            return Err(Error::InvalidArgument(format!("domain {d} out of range")));
        }
        if !self.domain_initialized[d] {
            return Err(Error::UninitializedBank(format!("domain statistics {d}")));
        }
        Ok((&self.u[d], &self.v[d]))
    }

    /// Add one example's decomposition to the running sums of the current
    /// epoch: `z` to class `y`, `(mu, sigma)` to domain `d`.
    pub fn accumulate(&mut self, z: &[f64], mu: &[f64], sigma: &[f64], y: usize, d: usize) -> Result<()> {
        if y >= self.num_classes {
            return Err(Error::InvalidArgument(format!("class {y} out of range")));
        }
        if d >= self.num_domains {
            return Err(Error::InvalidArgument(format!("domain {d} out of range")));
        }
        if z.len() != self.rep_len() || mu.len() != self.channels || sigma.len() != self.channels {
            return Err(Error::shape("PrototypeBank::accumulate", "decomposition size"));
        }
        self.acc.r_sum[y].iter_mut().zip(z).for_each(|(a, b)| *a += b);
        self.acc.class_count[y] += 1;
        self.acc.u_sum[d].iter_mut().zip(mu).for_each(|(a, b)| *a += b);
        self.acc.v_sum[d].iter_mut().zip(sigma).for_each(|(a, b)| *a += b);
        self.acc.domain_count[d] += 1;
        Ok(())
    }

    /// Accumulate a batch: `z` is `[N, C, H, W]`, `mu`/`sigma` are `[N, C]`.
    pub fn accumulate_batch(
        &mut self,
        z: &Tensor,
        mu: &Tensor,
        sigma: &Tensor,
        ys: &[usize],
        ds: &[usize],
    ) -> Result<()> {
        let n = ys.len();
        if ds.len() != n || z.shape().first() != Some(&n) {
            return Err(Error::shape("PrototypeBank::accumulate_batch", "batch size"));
        }
        for i in 0..n {
            self.accumulate(z.row(i), mu.row(i), sigma.row(i), ys[i], ds[i])?;
        }
        Ok(())
    }

    pub fn class_counts(&self) -> &[u64] {
        &self.acc.class_count
    }

    pub fn domain_counts(&self) -> &[u64] {
        &self.acc.domain_count
    }

    /// Current-epoch mean of `z` for class `c`, if any example was seen.
    pub fn class_estimate(&self, c: usize) -> Option<Vec<f64>> {
        let n = *self.acc.class_count.get(c)?;
        (n > 0).then(|| self.acc.r_sum[c].iter().map(|s| s / n as f64).collect())
    }

    /// Current-epoch means of `(mu, sigma)` for domain `d`.
    pub fn domain_estimate(&self, d: usize) -> Option<(Vec<f64>, Vec<f64>)> {
        let n = *self.acc.domain_count.get(d)?;
        (n > 0).then(|| {
            (
                self.acc.u_sum[d].iter().map(|s| s / n as f64).collect(),
                self.acc.v_sum[d].iter().map(|s| s / n as f64).collect(),
            )
        })
    }

    fn mix(gamma: f64, old: &mut [f64], est: &[f64]) {
        for (o, e) in old.iter_mut().zip(est) {
            *o = gamma * *o + (1.0 - gamma) * e;
        }
    }

    /// Fold this epoch's estimates into the committed values and reset the
    /// accumulators. Entries without any accumulated example keep their
    /// previous value.
    pub fn commit_epoch(&mut self) -> CommitSummary {
        let mut summary = CommitSummary::default();
        for c in 0..self.num_classes {
            match self.class_estimate(c) {
                Some(est) if self.bootstrap && !self.class_initialized[c] => self.r[c] = est,
                Some(est) => Self::mix(self.gamma, &mut self.r[c], &est),
                None => {
                    summary.missing_classes.push(c);
                    continue;
                }
            }
            self.class_initialized[c] = true;
        }
        for d in 0..self.num_domains {
            match self.domain_estimate(d) {
                Some((eu, ev)) if self.bootstrap && !self.domain_initialized[d] => {
                    self.u[d] = eu;
                    self.v[d] = ev;
                }
                Some((eu, ev)) => {
                    Self::mix(self.gamma, &mut self.u[d], &eu);
                    Self::mix(self.gamma, &mut self.v[d], &ev);
                }
                None => {
                    summary.missing_domains.push(d);
                    continue;
                }
            }
            self.domain_initialized[d] = true;
        }
        if !summary.missing_classes.is_empty() || !summary.missing_domains.is_empty() {
            warn!(
                "prototype commit {}: no examples for classes {:?}, domains {:?}; previous values kept",
                self.commits, summary.missing_classes, summary.missing_domains
            );
        }
        self.acc = Accumulator::new(self.num_classes, self.num_domains, self.channels, self.rep_len());
        self.commits += 1;
        summary
    }

    /// Set every uninitialized entry directly from the accumulated estimates
    /// of `source`. Initialized entries and this bank's own sums are untouched.
    pub fn adopt_missing(&mut self, source: &PrototypeBank) -> Result<()> {
        if source.num_classes != self.num_classes
            || source.num_domains != self.num_domains
            || source.rep_len() != self.rep_len()
        {
            return Err(Error::InvalidArgument("prototype banks have different layouts".into()));
        }
        for c in 0..self.num_classes {
            if !self.class_initialized[c] {
                if let Some(est) = source.class_estimate(c) {
                    self.r[c] = est;
                    self.class_initialized[c] = true;
                }
            }
        }
        for d in 0..self.num_domains {
            if !self.domain_initialized[d] {
                if let Some((eu, ev)) = source.domain_estimate(d) {
                    self.u[d] = eu;
                    self.v[d] = ev;
                    self.domain_initialized[d] = true;
                }
            }
        }
        Ok(())
    }

    /// Drop the running sums of the current epoch without committing.
    pub fn clear_accumulators(&mut self) {
        self.acc = Accumulator::new(self.num_classes, self.num_domains, self.channels, self.rep_len());
    }

    pub fn layout(&self) -> BankLayout {
        BankLayout {
            num_classes: self.num_classes,
            num_domains: self.num_domains,
            channels: self.channels,
            spatial: self.spatial,
            gamma: self.gamma,
            bootstrap: self.bootstrap,
            class_initialized: self.class_initialized.clone(),
            domain_initialized: self.domain_initialized.clone(),
            class_count: self.acc.class_count.clone(),
            domain_count: self.acc.domain_count.clone(),
            commits: self.commits,
        }
    }

    /// Every float of the bank in a fixed order: committed `r`, `u`, `v`,
    /// then the accumulator sums `r_sum`, `u_sum`, `v_sum`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for block in [&self.r, &self.u, &self.v, &self.acc.r_sum, &self.acc.u_sum, &self.acc.v_sum] {
            block.iter().for_each(|row| out.extend_from_slice(row));
        }
        out
    }

    pub fn flat_len(layout: &BankLayout) -> usize {
        let rep = layout.channels * layout.spatial;
        2 * (layout.num_classes * rep + 2 * layout.num_domains * layout.channels)
    }

    pub fn from_flat(layout: &BankLayout, flat: &[f64]) -> Result<Self> {
        if flat.len() != Self::flat_len(layout)
            || layout.class_initialized.len() != layout.num_classes
            || layout.class_count.len() != layout.num_classes
            || layout.domain_initialized.len() != layout.num_domains
            || layout.domain_count.len() != layout.num_domains
        {
            return Err(Error::Format("prototype bank blob does not match its layout".into()));
        }
        let mut bank = PrototypeBank::new(
            layout.num_classes,
            layout.num_domains,
            layout.channels,
            layout.spatial,
            layout.gamma,
            layout.bootstrap,
        )?;
        let mut pos = 0;
        let mut fill = |rows: &mut Vec<Vec<f64>>| {
            for row in rows.iter_mut() {
                let len = row.len();
                row.copy_from_slice(&flat[pos..pos + len]);
                pos += len;
            }
        };
        fill(&mut bank.r);
        fill(&mut bank.u);
        fill(&mut bank.v);
        fill(&mut bank.acc.r_sum);
        fill(&mut bank.acc.u_sum);
        fill(&mut bank.acc.v_sum);
        bank.class_initialized = layout.class_initialized.clone();
        bank.domain_initialized = layout.domain_initialized.clone();
        bank.acc.class_count = layout.class_count.clone();
        bank.acc.domain_count = layout.domain_count.clone();
        bank.commits = layout.commits;
        Ok(bank)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(bootstrap: bool) -> PrototypeBank {
        PrototypeBank::new(2, 2, 1, 2, 0.8, bootstrap).unwrap()
    }

    #[test]
    fn rejects_bad_gamma() {
        assert!(PrototypeBank::new(2, 2, 1, 1, 1.0, true).is_err());
        assert!(PrototypeBank::new(2, 2, 1, 1, -0.1, true).is_err());
    }

    #[test]
    fn single_example_estimate_is_that_example() {
        let mut b = bank(true);
        b.accumulate(&[1.5, -2.0], &[0.3], &[0.7], 1, 0).unwrap();
        assert_eq!(b.class_estimate(1).unwrap(), vec![1.5, -2.0]);
        assert_eq!(b.domain_estimate(0).unwrap(), (vec![0.3], vec![0.7]));
        assert!(b.class_estimate(0).is_none());
    }

    #[test]
    fn two_examples_average() {
        let mut b = bank(true);
        b.accumulate(&[1.0, 2.0], &[1.0], &[1.0], 0, 0).unwrap();
        b.accumulate(&[3.0, 6.0], &[3.0], &[2.0], 0, 1).unwrap();
        assert_eq!(b.class_estimate(0).unwrap(), vec![2.0, 4.0]);
        assert_eq!(b.class_counts(), &[2, 0]);
        assert_eq!(b.domain_counts(), &[1, 1]);
    }

    #[test]
    fn out_of_range_is_rejected() {
        let mut b = bank(true);
        assert!(b.accumulate(&[0.0, 0.0], &[0.0], &[1.0], 2, 0).is_err());
        assert!(b.accumulate(&[0.0, 0.0], &[0.0], &[1.0], 0, 5).is_err());
        assert!(b.accumulate(&[0.0], &[0.0], &[1.0], 0, 0).is_err());
    }

    #[test]
    fn geometric_ema_without_bootstrap() {
        let mut b = PrototypeBank::new(1, 1, 1, 1, 0.8, false).unwrap();
        let mut seen = Vec::new();
        for _ in 0..3 {
            b.accumulate(&[1.0], &[1.0], &[1.0], 0, 0).unwrap();
            b.commit_epoch();
            seen.push(b.class_prototype(0).unwrap()[0]);
        }
        let expect = [0.2, 0.36, 0.488];
        for (s, e) in seen.iter().zip(expect) {
            assert!((s - e).abs() < 1e-12, "{s} vs {e}");
        }
    }

    #[test]
    fn bootstrap_sets_first_commit_directly() {
        let mut b = bank(true);
        for c in 0..2 {
            b.accumulate(&[4.0, 4.0], &[2.0], &[3.0], c, c).unwrap();
        }
        b.commit_epoch();
        assert_eq!(b.class_prototype(0).unwrap(), &[4.0, 4.0]);
        assert_eq!(b.domain_stats(1).unwrap(), (&[2.0][..], &[3.0][..]));
    }

    #[test]
    fn missing_entries_are_carried_over() {
        let mut b = bank(true);
        b.accumulate(&[1.0, 1.0], &[1.0], &[1.0], 0, 0).unwrap();
        let s = b.commit_epoch();
        assert_eq!(s.missing_classes, vec![1]);
        assert_eq!(s.missing_domains, vec![1]);
        assert!(matches!(b.class_prototype(1), Err(Error::UninitializedBank(_))));
        b.accumulate(&[0.0, 0.0], &[0.0], &[1.0], 1, 1).unwrap();
        b.commit_epoch();
        // Class 0 saw nothing this epoch: unchanged.
        assert_eq!(b.class_prototype(0).unwrap(), &[1.0, 1.0]);
        assert_eq!(b.class_counts(), &[0, 0]);
    }

    #[test]
    fn flat_round_trip() {
        let mut b = bank(true);
        b.accumulate(&[1.0, 2.0], &[0.5], &[0.25], 0, 1).unwrap();
        b.commit_epoch();
        b.accumulate(&[3.0, 5.0], &[0.1], &[0.9], 1, 0).unwrap();
        let restored = PrototypeBank::from_flat(&b.layout(), &b.to_flat()).unwrap();
        assert_eq!(restored, b);
        assert!(PrototypeBank::from_flat(&b.layout(), &[0.0]).is_err());
    }
}
