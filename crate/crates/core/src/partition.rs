//! Synthetic Gaussian-mixture data and two-stage hierarchical k-means.

use std::cmp::Ordering;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{fmt_f64, parse_f64, read_csv, write_csv};
use crate::rng;

pub const MAX_LLOYD_ITERS: usize = 200;
/// Independent k-means++ seedings per clustering stage; the lowest objective wins.
pub const KMEANS_RESTARTS: u64 = 8;

#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    /// Per-coordinate variances.
    Diagonal(Vec<f64>),
    /// Row-major `dim × dim` matrix.
    Full(Vec<f64>),
}

impl Covariance {
    pub fn isotropic(dim: usize, variance: f64) -> Self {
        Covariance::Diagonal(vec![variance; dim])
    }

    pub fn to_matrix(&self, dim: usize) -> DMatrix<f64> {
        match self {
            Covariance::Diagonal(v) => DMatrix::from_diagonal(&DVector::from_column_slice(v)),
            Covariance::Full(m) => DMatrix::from_row_slice(dim, dim, m),
        }
    }
}

/// Weights, means and covariances of a Gaussian mixture, plus the condition
/// label carried by points of each component.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Covariance>,
    pub conditions: Vec<usize>,
}

impl MixtureSpec {
    /// Components labelled with their own index.
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covariances: Vec<Covariance>) -> Result<Self> {
        let conditions = (0..weights.len()).collect();
        Self::with_conditions(weights, means, covariances, conditions)
    }

    pub fn with_conditions(weights: Vec<f64>, means: Vec<Vec<f64>>, covariances: Vec<Covariance>, conditions: Vec<usize>) -> Result<Self> {
        let spec = Self { weights, means, covariances, conditions };
        spec.validate()?;
        Ok(spec)
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn cond_count(&self) -> usize {
        self.conditions.iter().max().map_or(0, |m| m + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 {
            return Err(Error::Spec("mixture needs at least one component".into()));
        }
        if self.means.len() != k || self.covariances.len() != k || self.conditions.len() != k {
            return Err(Error::Spec("weights, means, covariances and conditions must have equal length".into()));
        }
        if self.weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::Spec("weights must be positive".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Spec(format!("weights sum to {total}, expected 1")));
        }
        let dim = self.dim();
        if dim == 0 {
            return Err(Error::Spec("data dimension must be >= 1".into()));
        }
        for (i, (m, c)) in self.means.iter().zip(&self.covariances).enumerate() {
            if m.len() != dim || m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Spec(format!("mean {i} has wrong dimension or non-finite entries")));
            }
            match c {
                Covariance::Diagonal(v) => {
                    if v.len() != dim || v.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
                        return Err(Error::Spec(format!("covariance {i} is not positive-definite")));
                    }
                }
                Covariance::Full(m) => {
                    if m.len() != dim * dim {
                        return Err(Error::Spec(format!("covariance {i} must have {dim}×{dim} entries")));
                    }
                    let mat = c.to_matrix(dim);
                    if (&mat - mat.transpose()).amax() > 1e-12 || mat.cholesky().is_none() {
                        return Err(Error::Spec(format!("covariance {i} is not symmetric positive-definite")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Normalizes positive weights to sum to one.
    pub fn normalized(mut weights: Vec<f64>) -> Vec<f64> {
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        weights
    }

    /// `groups` clusters placed evenly on a circle of `radius`, each made of
    /// `sub_modes` tight components on a small ring of radius `sub_radius`.
    /// The condition label of a component is its sub-mode index, so every
    /// group carries every label.
    pub fn ring_of_groups(groups: usize, sub_modes: usize, radius: f64, sub_radius: f64, variance: f64) -> Result<Self> {
        let mut means = Vec::new();
        let mut conditions = Vec::new();
        for g in 0..groups {
            let a = std::f64::consts::TAU * g as f64 / groups as f64;
            let (cx, cy) = (radius * a.cos(), radius * a.sin());
            for s in 0..sub_modes {
                let b = a + std::f64::consts::TAU * s as f64 / sub_modes as f64;
                let r = if sub_modes == 1 { 0.0 } else { sub_radius };
                means.push(vec![cx + r * b.cos(), cy + r * b.sin()]);
                conditions.push(s);
            }
        }
        let k = means.len();
        Self::with_conditions(vec![1.0 / k as f64; k], means, vec![Covariance::isotropic(2, variance); k], conditions)
    }

    /// Group index of each component of a [`MixtureSpec::ring_of_groups`] layout.
    pub fn ring_group_of(component: usize, sub_modes: usize) -> usize {
        component / sub_modes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub dim: usize,
    pub points: Vec<Vec<f64>>,
    pub true_component: Option<Vec<usize>>,
    pub conditions: Option<Vec<usize>>,
    pub spec: Option<MixtureSpec>,
}

impl SyntheticDataset {
    pub fn from_points(dim: usize, points: Vec<Vec<f64>>) -> Result<Self> {
        if points.iter().any(|p| p.len() != dim) {
            return Err(Error::Shape(format!("every point must have dimension {dim}")));
        }
        Ok(Self { dim, points, true_component: None, conditions: None, spec: None })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn condition(&self, i: usize) -> Option<usize> {
        self.conditions.as_ref().map(|c| c[i])
    }

    /// Points at the given indices, in that order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let pick = |v: &Vec<usize>| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Self {
            dim: self.dim,
            points: idx.iter().map(|&i| self.points[i].clone()).collect(),
            true_component: self.true_component.as_ref().map(pick),
            conditions: self.conditions.as_ref().map(pick),
            spec: self.spec.clone(),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut header: Vec<String> = (0..self.dim).map(|j| format!("x{j}")).collect();
        header.push("true_component".into());
        header.push("condition".into());
        let opt = |v: &Option<Vec<usize>>, i: usize| v.as_ref().map_or(String::new(), |v| v[i].to_string());
        let rows: Vec<Vec<String>> = self
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut row: Vec<String> = p.iter().map(|v| fmt_f64(*v)).collect();
                row.push(opt(&self.true_component, i));
                row.push(opt(&self.conditions, i));
                row
            })
            .collect();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        write_csv(path, &header, &rows)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let (header, rows) = read_csv(path)?;
        let dim = header.iter().filter(|h| h.starts_with('x')).count();
        let label_col = |name: &str| header.iter().position(|h| h == name);
        let (comp_col, cond_col) = (label_col("true_component"), label_col("condition"));
        let mut points = Vec::with_capacity(rows.len());
        let mut comps = Vec::new();
        let mut conds = Vec::new();
        for row in &rows {
            points.push(row[..dim].iter().map(|s| parse_f64(s, "dataset CSV")).collect::<Result<Vec<_>>>()?);
            let parse_label = |col: Option<usize>| -> Result<Option<usize>> {
                match col.map(|c| row[c].trim()) {
                    None | Some("") => Ok(None),
                    Some(s) => s.parse().map(Some).map_err(|_| Error::Config(format!("invalid label `{s}` in dataset CSV"))),
                }
            };
            if let Some(c) = parse_label(comp_col)? {
                comps.push(c);
            }
            if let Some(c) = parse_label(cond_col)? {
                conds.push(c);
            }
        }
        let full = |v: Vec<usize>| (v.len() == points.len() && !v.is_empty()).then_some(v);
        Ok(Self { dim, true_component: full(comps), conditions: full(conds), points, spec: None })
    }
}

/// Draws `n` points. Component choice and noise for point `i` come from the
/// stream `(seed, "data/point", i)`.
pub fn generate_mixture(spec: &MixtureSpec, n: usize, seed: u64) -> Result<SyntheticDataset> {
    spec.validate()?;
    let dim = spec.dim();
    let factors: Vec<DMatrix<f64>> = spec
        .covariances
        .iter()
        .map(|c| match c {
            Covariance::Diagonal(v) => DMatrix::from_diagonal(&DVector::from_iterator(dim, v.iter().map(|s| s.sqrt()))),
            Covariance::Full(_) => c.to_matrix(dim).cholesky().expect("validated positive-definite").l(),
        })
        .collect();
    let cumulative: Vec<f64> = spec
        .weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect();
    let mut points = Vec::with_capacity(n);
    let mut comps = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = rng::stream(seed, "data/point", i as u64);
        let u: f64 = r.random();
        let k = cumulative.iter().position(|c| u < *c).unwrap_or(spec.components() - 1);
        let z = DVector::from_iterator(dim, (0..dim).map(|_| r.sample::<f64, _>(StandardNormal)));
        let x = &factors[k] * z;
        points.push(spec.means[k].iter().zip(x.iter()).map(|(m, v)| m + v).collect());
        comps.push(k);
    }
    let conditions = comps.iter().map(|&k| spec.conditions[k]).collect();
    Ok(SyntheticDataset { dim, points, true_component: Some(comps), conditions: Some(conditions), spec: Some(spec.clone()) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Euclidean,
    /// Spherical k-means on unit-normalized points with distance `1 − cos`.
    Cosine,
}

impl Metric {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            other => Err(Error::Config(format!("unknown metric `{other}`"))),
        }
    }

    fn dist(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
            Metric::Cosine => 1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>(),
        }
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
}

fn coord_words(p: &[f64]) -> Vec<u64> {
    p.iter().map(|v| v.to_bits()).collect()
}

/// Result of one weighted k-means run.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansRun {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    /// Weighted objective after every assignment step.
    pub objective: Vec<f64>,
}

fn nearest(metric: Metric, p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = metric.dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Weighted k-means with D²-seeding. Seeding picks points through an
/// exponential race keyed on a hash of each point's coordinates, so the
/// result does not depend on the order of `points`.
pub fn weighted_kmeans(points: &[Vec<f64>], weights: &[f64], k: usize, metric: Metric, seed: u64) -> Result<KMeansRun> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::Config(format!("k = {k} must lie in [1, {n}]")));
    }
    let dim = points[0].len();
    let mut data: Vec<(Vec<f64>, f64, usize)> = points
        .iter()
        .zip(weights)
        .enumerate()
        .map(|(i, (p, w))| {
            let mut p = p.clone();
            if metric == Metric::Cosine {
                normalize(&mut p);
            }
            (p, *w, i)
        })
        .collect();
    // Canonical order for every reduction, independent of the input order.
    data.sort_by(|a, b| lex_cmp(&a.0, &b.0).then(a.1.total_cmp(&b.1)));

    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut d2 = vec![f64::INFINITY; n];
    for round in 0..k {
        let mut best: Option<(f64, usize)> = None;
        for (i, (p, w, _)) in data.iter().enumerate() {
            let score = if round == 0 { *w } else { w * d2[i] };
            let mut words = coord_words(p);
            words.push(round as u64);
            let u = rng::hash_unit(seed, &words);
            let key = if score > 0.0 { -(1.0 - u).ln() / score } else { f64::INFINITY };
            let better = match best {
                None => true,
                Some((bk, bi)) => key < bk || (key == bk && lex_cmp(p, &data[bi].0).is_lt()),
            };
            if better {
                best = Some((key, i));
            }
        }
        let c = data[best.expect("non-empty").1].0.clone();
        for (i, (p, _, _)) in data.iter().enumerate() {
            d2[i] = d2[i].min(metric.dist(p, &c).max(0.0));
        }
        centroids.push(c);
    }

    let mut assign = vec![usize::MAX; n];
    let mut objective = Vec::new();
    for _ in 0..MAX_LLOYD_ITERS {
        let next: Vec<(usize, f64)> = data.par_iter().map(|(p, _, _)| nearest(metric, p, &centroids)).collect();
        objective.push(data.iter().zip(&next).map(|((_, w, _), (_, d))| w * d).sum());
        let changed = next.iter().zip(&assign).any(|((a, _), b)| a != b);
        for (slot, (a, _)) in assign.iter_mut().zip(&next) {
            *slot = *a;
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut mass = vec![0.0; k];
        for ((p, w, _), &a) in data.iter().zip(&assign) {
            mass[a] += w;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += w * v;
            }
        }
        let mut taken = vec![false; n];
        for j in 0..k {
            if mass[j] > 0.0 {
                let mut c: Vec<f64> = sums[j].iter().map(|s| s / mass[j]).collect();
                if metric == Metric::Cosine {
                    normalize(&mut c);
                }
                centroids[j] = c;
            } else {
                // Re-seed an empty cluster at the point farthest from its centroid.
                let far = (0..n)
                    .filter(|&i| !taken[i] && data[i].1 > 0.0)
                    .max_by(|&a, &b| next[a].1.total_cmp(&next[b].1).then(lex_cmp(&data[b].0, &data[a].0)));
                if let Some(i) = far {
                    taken[i] = true;
                    centroids[j] = data[i].0.clone();
                }
            }
        }
    }

    let mut out = vec![0; n];
    for ((_, _, orig), a) in data.iter().zip(&assign) {
        out[*orig] = *a;
    }
    Ok(KMeansRun { centroids, assignment: out, objective })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub k: usize,
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub fine_centroids: Vec<Vec<f64>>,
    pub fine_assignment: Vec<usize>,
    pub metric: Metric,
    pub fine_objective: Vec<f64>,
    pub coarse_objective: Vec<f64>,
}

impl ClusterAssignment {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &a in &self.assignment {
            s[a] += 1;
        }
        s
    }

    /// Nearest coarse centroid of an arbitrary point.
    pub fn classify(&self, p: &[f64]) -> usize {
        let mut q = p.to_vec();
        if self.metric == Metric::Cosine {
            normalize(&mut q);
        }
        nearest(self.metric, &q, &self.centroids).0
    }

    pub fn write_csv(&self, assignment_path: &Path, centroid_path: &Path) -> Result<()> {
        let rows: Vec<Vec<String>> = self
            .assignment
            .iter()
            .zip(&self.fine_assignment)
            .enumerate()
            .map(|(i, (a, f))| vec![i.to_string(), a.to_string(), f.to_string()])
            .collect();
        write_csv(assignment_path, &["index", "cluster", "fine_group"], &rows)?;
        let dim = self.centroids.first().map_or(0, Vec::len);
        let mut header = vec!["level".to_string(), "id".to_string()];
        header.extend((0..dim).map(|j| format!("x{j}")));
        let mut rows = Vec::new();
        for (level, cs) in [("coarse", &self.centroids), ("fine", &self.fine_centroids)] {
            for (j, c) in cs.iter().enumerate() {
                let mut row = vec![level.to_string(), j.to_string()];
                row.extend(c.iter().map(|v| fmt_f64(*v)));
                rows.push(row);
            }
        }
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        write_csv(centroid_path, &header, &rows)
    }

    pub fn read_csv(assignment_path: &Path, centroid_path: &Path, metric: Metric) -> Result<Self> {
        let (_, rows) = read_csv(assignment_path)?;
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Config(format!("invalid integer `{s}` in assignment CSV")));
        let mut assignment = Vec::with_capacity(rows.len());
        let mut fine_assignment = Vec::with_capacity(rows.len());
        for row in &rows {
            assignment.push(parse(&row[1])?);
            fine_assignment.push(parse(&row[2])?);
        }
        let (_, rows) = read_csv(centroid_path)?;
        let mut centroids = Vec::new();
        let mut fine_centroids = Vec::new();
        for row in &rows {
            let c = row[2..].iter().map(|s| parse_f64(s, "centroid CSV")).collect::<Result<Vec<_>>>()?;
            match row[0].as_str() {
                "coarse" => centroids.push(c),
                _ => fine_centroids.push(c),
            }
        }
        Ok(Self {
            k: centroids.len(),
            assignment,
            centroids,
            fine_centroids,
            fine_assignment,
            metric,
            fine_objective: Vec::new(),
            coarse_objective: Vec::new(),
        })
    }
}

/// Lowest final objective over [`KMEANS_RESTARTS`] seedings drawn from
/// `(seed, label, restart)`; ties keep the earlier restart.
fn best_of_restarts(points: &[Vec<f64>], weights: &[f64], k: usize, metric: Metric, seed: u64, label: &str) -> Result<KMeansRun> {
    let mut best: Option<KMeansRun> = None;
    for r in 0..KMEANS_RESTARTS {
        let run = weighted_kmeans(points, weights, k, metric, rng::derive_seed(seed, label, r))?;
        let obj = run.objective.last().copied().unwrap_or(0.0);
        if best.as_ref().is_none_or(|b| obj < b.objective.last().copied().unwrap_or(0.0)) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Stage 1 clusters points into `m_fine` groups; stage 2 clusters the group
/// centroids, weighted by group size, into `k` coarse clusters. Each point is
/// finally assigned to its nearest coarse centroid; a coarse cluster left
/// empty by that step takes back the members of its own fine groups.
pub fn hierarchical_kmeans(data: &SyntheticDataset, m_fine: usize, k: usize, metric: Metric, seed: u64) -> Result<ClusterAssignment> {
    let n = data.len();
    if k == 0 || k > m_fine || m_fine > n {
        return Err(Error::Config(format!("need 1 <= K ({k}) <= M_fine ({m_fine}) <= N ({n})")));
    }
    let ones = vec![1.0; n];
    let fine = best_of_restarts(&data.points, &ones, m_fine, metric, seed, "cluster/fine")?;
    let mut sizes = vec![0.0; m_fine];
    for &a in &fine.assignment {
        sizes[a] += 1.0;
    }
    let coarse = best_of_restarts(&fine.centroids, &sizes, k, metric, seed, "cluster/coarse")?;

    let mut out = ClusterAssignment {
        k,
        assignment: Vec::new(),
        centroids: coarse.centroids,
        fine_centroids: fine.centroids,
        fine_assignment: fine.assignment,
        metric,
        fine_objective: fine.objective,
        coarse_objective: coarse.objective,
    };
    out.assignment = data.points.par_iter().map(|p| out.classify(p)).collect();
    let counts = out.sizes();
    for (j, &c) in counts.iter().enumerate() {
        if c == 0 {
            for i in 0..n {
                if coarse.assignment[out.fine_assignment[i]] == j {
                    out.assignment[i] = j;
                }
            }
        }
    }
    Ok(out)
}

/// Points assigned to cluster `k`, in dataset order.
pub fn shard(data: &SyntheticDataset, assignment: &ClusterAssignment, k: usize) -> Result<SyntheticDataset> {
    if k >= assignment.k {
        return Err(Error::Config(format!("shard {k} out of range (K = {})", assignment.k)));
    }
    if assignment.assignment.len() != data.len() {
        return Err(Error::Shape("assignment does not cover the dataset".into()));
    }
    let idx: Vec<usize> = (0..data.len()).filter(|&i| assignment.assignment[i] == k).collect();
    Ok(data.subset(&idx))
}
