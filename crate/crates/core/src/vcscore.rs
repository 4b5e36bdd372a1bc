//! View-selection scores from shared tracks and ranking of view combinations.

use std::cmp::Ordering;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{ReconError, Result};
use crate::geometry::Camera;

/// A 3D point and the views observing it.
#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub position: Vector3<f64>,
    pub views: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrackSet {
    pub tracks: Vec<Track>,
}

impl TrackSet {
    pub fn validate(&self, n_views: usize) -> Result<()> {
        for (i, t) in self.tracks.iter().enumerate() {
            if t.views.len() < 2 {
                return Err(ReconError::Invalid(format!("track {i} is visible in fewer than two views")));
            }
            if let Some(v) = t.views.iter().find(|&&v| v >= n_views) {
                return Err(ReconError::Invalid(format!("track {i} references view {v} of {n_views}")));
            }
        }
        Ok(())
    }
}

/// Piecewise Gaussian over baseline angles, peaking at `theta0` (degrees).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub theta0: f64,
    pub sigma1: f64,
    pub sigma2: f64,
}

impl Default for GaussianParams {
    fn default() -> Self {
        Self { theta0: 5.0, sigma1: 1.0, sigma2: 10.0 }
    }
}

impl GaussianParams {
    pub fn validate(&self) -> Result<()> {
        if self.sigma1 > 0.0 && self.sigma2 > 0.0 {
            Ok(())
        } else {
            Err(ReconError::Config("sigma1 and sigma2 must be positive".into()))
        }
    }

    pub fn eval(&self, theta: f64) -> f64 {
        let s = if theta <= self.theta0 { self.sigma1 } else { self.sigma2 };
        let d = theta - self.theta0;
        (-d * d / (2.0 * s * s)).exp()
    }
}

/// Angle in degrees between the directions from `p` to two camera centres.
pub fn baseline_angle_between(ci: &Vector3<f64>, cj: &Vector3<f64>, p: &Vector3<f64>) -> Result<f64> {
    let (a, b) = (ci - p, cj - p);
    let (na, nb) = (a.norm(), b.norm());
    if na < 1e-9 || nb < 1e-9 {
        return Err(ReconError::DegenerateTrack);
    }
    let cos = (a.dot(&b) / (na * nb)).clamp(-1.0, 1.0);
    Ok(cos.acos().to_degrees())
}

pub fn baseline_angle(cam_i: &Camera, cam_j: &Camera, p: &Vector3<f64>) -> Result<f64> {
    baseline_angle_between(&cam_i.center(), &cam_j.center(), p)
}

/// Sum of `g` over the baseline angles of tracks seen by both views.
pub fn pairwise_score(i: usize, j: usize, cams: &[Camera], tracks: &TrackSet, g: &GaussianParams) -> Result<f64> {
    let (ci, cj) = (cams[i].center(), cams[j].center());
    let mut s = 0.0;
    for t in &tracks.tracks {
        if t.views.contains(&i) && t.views.contains(&j) {
            s += g.eval(baseline_angle_between(&ci, &cj, &t.position)?);
        }
    }
    Ok(s)
}

/// All pairwise scores of a rig, computed once.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    n: usize,
    scores: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(cams: &[Camera], tracks: &TrackSet, g: &GaussianParams) -> Result<Self> {
        g.validate()?;
        tracks.validate(cams.len())?;
        let n = cams.len();
        let mut scores = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let s = pairwise_score(i, j, cams, tracks, g)?;
                scores[i * n + j] = s;
                scores[j * n + i] = s;
            }
        }
        Ok(Self { n, scores })
    }

    pub fn views(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.scores[i * self.n + j]
    }

    /// Mean pairwise score over all unordered pairs of `views`.
    pub fn vc_score(&self, views: &[usize]) -> Result<f64> {
        if views.len() < 2 {
            return Err(ReconError::Invalid("a view combination needs at least two views".into()));
        }
        if let Some(v) = views.iter().find(|&&v| v >= self.n) {
            return Err(ReconError::Invalid(format!("view {v} out of range")));
        }
        let mut sorted = views.to_vec();
        sorted.sort_unstable();
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for a in 0..sorted.len() {
            for b in a + 1..sorted.len() {
                sum += self.get(sorted[a], sorted[b]);
                pairs += 1;
            }
        }
        Ok(sum / pairs as f64)
    }
}

pub fn vc_score(views: &[usize], cams: &[Camera], tracks: &TrackSet, g: &GaussianParams) -> Result<f64> {
    ScoreMatrix::new(cams, tracks, g)?.vc_score(views)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Favorable,
    Normal,
    Unfavorable,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Favorable => "favorable",
            Group::Normal => "normal",
            Group::Unfavorable => "unfavorable",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedCombination {
    pub views: Vec<usize>,
    pub score: f64,
    pub group: Group,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CombinationRanking {
    pub entries: Vec<RankedCombination>,
}

impl CombinationRanking {
    pub fn best(&self) -> &RankedCombination {
        &self.entries[0]
    }

    pub fn worst(&self) -> &RankedCombination {
        self.entries.last().expect("ranking is never empty")
    }

    /// `views;score;group` rows with space-separated view ids.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("views;score;group\n");
        for e in &self.entries {
            let ids: Vec<String> = e.views.iter().map(usize::to_string).collect();
            s.push_str(&format!("{};{};{}\n", ids.join(" "), e.score, e.group.as_str()));
        }
        s
    }
}

pub const MAX_COMBINATIONS: u128 = 1_000_000;

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Sizes of three contiguous, near-equal groups; earlier groups take the
/// remainder.
pub fn tercile_sizes(n: usize) -> [usize; 3] {
    let q = n / 3;
    let r = n % 3;
    [q + usize::from(r > 0), q + usize::from(r > 1), q]
}

/// Lexicographic k-subsets of `views` (sorted first).
pub fn combinations(views: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut v = views.to_vec();
    v.sort_unstable();
    let n = v.len();
    let mut out = Vec::new();
    if k == 0 || k > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.iter().map(|&i| v[i]).collect());
        let Some(pos) = (0..k).rev().find(|&p| idx[p] != p + n - k) else {
            break;
        };
        idx[pos] += 1;
        for q in pos + 1..k {
            idx[q] = idx[q - 1] + 1;
        }
    }
    out
}

/// Scores every k-subset of `views`, sorts descending (ties broken by
/// lexicographic view ids) and labels terciles.
pub fn rank_combinations(views: &[usize], k: usize, matrix: &ScoreMatrix) -> Result<CombinationRanking> {
    if k < 2 || k > views.len() {
        return Err(ReconError::Invalid(format!("k = {k} must be in 2..={}", views.len())));
    }
    let count = binomial(views.len(), k);
    if count > MAX_COMBINATIONS {
        return Err(ReconError::Invalid(format!(
            "{count} combinations exceed the enumeration limit of {MAX_COMBINATIONS}; sample combinations instead"
        )));
    }
    let mut scored: Vec<(Vec<usize>, f64)> = combinations(views, k)
        .into_iter()
        .map(|c| matrix.vc_score(&c).map(|s| (c, s)))
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0)));
    let sizes = tercile_sizes(scored.len());
    let entries = scored
        .into_iter()
        .enumerate()
        .map(|(i, (views, score))| {
            let group = if i < sizes[0] {
                Group::Favorable
            } else if i < sizes[0] + sizes[1] {
                Group::Normal
            } else {
                Group::Unfavorable
            };
            RankedCombination { views, score, group }
        })
        .collect();
    Ok(CombinationRanking { entries })
}
