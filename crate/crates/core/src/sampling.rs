//! Pair samplers over a class/domain group index.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rejection budget for strategies that may hit empty (class, domain) cells.
pub const MAX_REJECTIONS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerStrategy {
    /// `y_i ~ U(classes)`, `d_j ~ U(domains)`; the partner coordinates follow
    /// the empirical conditionals.
    Selective,
    /// `(y, d) ~ U(classes x domains)` independently for `i` and `j`,
    /// rejecting empty cells.
    GroupBalanced,
    /// `i, j ~ U(examples)`.
    Empirical,
    /// All four coordinates `d_i, d_j, y_i, y_j` drawn uniformly in that
    /// order, then a uniform example from each cell; an empty cell redraws
    /// that example's coordinates.
    Algorithm1Uniform,
}

impl SamplerStrategy {
    pub fn name(self) -> &'static str {
        match self {
            SamplerStrategy::Selective => "selective",
            SamplerStrategy::GroupBalanced => "group_balanced",
            SamplerStrategy::Empirical => "empirical",
            SamplerStrategy::Algorithm1Uniform => "algorithm1_uniform",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "selective" => Ok(SamplerStrategy::Selective),
            "group_balanced" => Ok(SamplerStrategy::GroupBalanced),
            "empirical" => Ok(SamplerStrategy::Empirical),
            "algorithm1_uniform" => Ok(SamplerStrategy::Algorithm1Uniform),
            other => Err(Error::Config(format!("unknown sampler strategy '{other}'"))),
        }
    }
}

/// Example indices grouped by class, by domain and by (class, domain) cell.
///
/// Domains without any example are treated as absent (as in a
/// leave-one-domain-out training set): domain-uniform draws range over the
/// present domains only. Every class must be present.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupIndex {
    num_classes: usize,
    num_domains: usize,
    cells: Vec<Vec<usize>>,
    by_class: Vec<Vec<usize>>,
    by_domain: Vec<Vec<usize>>,
    present_domains: Vec<usize>,
    len: usize,
}

impl GroupIndex {
    pub fn build(labels: &[usize], domains: &[usize], num_classes: usize, num_domains: usize) -> Result<Self> {
        if labels.len() != domains.len() {
            return Err(Error::InvalidArgument("labels and domains differ in length".into()));
        }
        let mut cells = vec![Vec::new(); num_classes * num_domains];
        let mut by_class = vec![Vec::new(); num_classes];
        let mut by_domain = vec![Vec::new(); num_domains];
        for (i, (&y, &d)) in labels.iter().zip(domains).enumerate() {
            if y >= num_classes || d >= num_domains {
                return Err(Error::InvalidArgument(format!(
                    "example {i} has (class {y}, domain {d}) outside {num_classes}x{num_domains}"
                )));
            }
            cells[y * num_domains + d].push(i);
            by_class[y].push(i);
            by_domain[d].push(i);
        }
        let present_domains = (0..num_domains).filter(|d| !by_domain[*d].is_empty()).collect();
        Ok(GroupIndex {
            num_classes,
            num_domains,
            cells,
            by_class,
            by_domain,
            present_domains,
            len: labels.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_domains(&self) -> usize {
        self.num_domains
    }

    pub fn cell(&self, c: usize, d: usize) -> &[usize] {
        &self.cells[c * self.num_domains + d]
    }

    pub fn count(&self, c: usize, d: usize) -> usize {
        self.cell(c, d).len()
    }

    pub fn class_members(&self, c: usize) -> &[usize] {
        &self.by_class[c]
    }

    pub fn domain_members(&self, d: usize) -> &[usize] {
        &self.by_domain[d]
    }

    pub fn present_domains(&self) -> &[usize] {
        &self.present_domains
    }

    /// Check the preconditions of `strategy`.
    pub fn check(&self, strategy: SamplerStrategy) -> Result<()> {
        if self.len == 0 {
            return Err(Error::Sampler("empty dataset".into()));
        }
        if strategy == SamplerStrategy::Selective {
            if let Some(c) = (0..self.num_classes).find(|c| self.by_class[*c].is_empty()) {
                return Err(Error::Sampler(format!("class {c} has no examples")));
            }
        }
        Ok(())
    }
}

fn pick<R: Rng + ?Sized>(items: &[usize], rng: &mut R) -> usize {
    items[rng.random_range(0..items.len())]
}

fn draw_cell_member<R: Rng + ?Sized>(index: &GroupIndex, rng: &mut R) -> Result<usize> {
    for _ in 0..MAX_REJECTIONS {
        let c = rng.random_range(0..index.num_classes);
        let d = rng.random_range(0..index.num_domains);
        let cell = index.cell(c, d);
        if !cell.is_empty() {
            return Ok(pick(cell, rng));
        }
    }
    Err(Error::Sampler(format!(
        "no nonempty (class, domain) cell found after {MAX_REJECTIONS} draws"
    )))
}

/// Draw a single example the way `strategy` draws the `i` side of a pair.
pub fn draw_single<R: Rng + ?Sized>(index: &GroupIndex, strategy: SamplerStrategy, rng: &mut R) -> Result<usize> {
    index.check(strategy)?;
    match strategy {
        SamplerStrategy::Selective => {
            let c = rng.random_range(0..index.num_classes);
            Ok(pick(&index.by_class[c], rng))
        }
        SamplerStrategy::GroupBalanced | SamplerStrategy::Algorithm1Uniform => draw_cell_member(index, rng),
        SamplerStrategy::Empirical => Ok(rng.random_range(0..index.len)),
    }
}

/// Draw one ordered pair `(i, j)` of example indices.
pub fn draw_pair<R: Rng + ?Sized>(
    index: &GroupIndex,
    strategy: SamplerStrategy,
    rng: &mut R,
) -> Result<(usize, usize)> {
    index.check(strategy)?;
    match strategy {
        SamplerStrategy::Selective => {
            let c = rng.random_range(0..index.num_classes);
            let i = pick(&index.by_class[c], rng);
            let d = index.present_domains[rng.random_range(0..index.present_domains.len())];
            let j = pick(&index.by_domain[d], rng);
            Ok((i, j))
        }
        SamplerStrategy::GroupBalanced => {
            let i = draw_cell_member(index, rng)?;
            let j = draw_cell_member(index, rng)?;
            Ok((i, j))
        }
        SamplerStrategy::Algorithm1Uniform => {
            let nd = index.num_domains;
            let nc = index.num_classes;
            let (mut di, mut dj) = (rng.random_range(0..nd), rng.random_range(0..nd));
            let (mut yi, mut yj) = (rng.random_range(0..nc), rng.random_range(0..nc));
            let mut tries = 0;
            while index.cell(yi, di).is_empty() {
                tries += 1;
                if tries >= MAX_REJECTIONS {
                    return Err(Error::Sampler("no nonempty cell for example i".into()));
                }
                di = rng.random_range(0..nd);
                yi = rng.random_range(0..nc);
            }
            let i = pick(index.cell(yi, di), rng);
            tries = 0;
            while index.cell(yj, dj).is_empty() {
                tries += 1;
                if tries >= MAX_REJECTIONS {
                    return Err(Error::Sampler("no nonempty cell for example j".into()));
                }
                dj = rng.random_range(0..nd);
                yj = rng.random_range(0..nc);
            }
            let j = pick(index.cell(yj, dj), rng);
            Ok((i, j))
        }
        SamplerStrategy::Empirical => {
            let i = rng.random_range(0..index.len);
            let j = rng.random_range(0..index.len);
            Ok((i, j))
        }
    }
}

/// Uniform draws with replacement over all examples.
pub fn draw_warmstart_batch<R: Rng + ?Sized>(index: &GroupIndex, batch_size: usize, rng: &mut R) -> Result<Vec<usize>> {
    if index.is_empty() {
        return Err(Error::Sampler("empty dataset".into()));
    }
    Ok((0..batch_size).map(|_| rng.random_range(0..index.len)).collect())
}
