//! Per-view correlation frustums, cascaded depth hypotheses, 3D
//! regularization and global volume features.

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};
use ufo_tensor::nn::{Conv3d, ConvTranspose3d};
use ufo_tensor::{concat, sum_n, ConvSpec, DenseArray, Graph, ParamStore, Scalar, Var};

use crate::error::{ReconError, Result};
use crate::geometry::{homography_warp, Camera, DepthHypotheses};

const MIN_SPAN: f64 = 1e-6;
const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrustumConfig {
    /// Hypothesis counts, coarse to fine.
    pub hypotheses: Vec<usize>,
    /// Span ratio between consecutive levels.
    pub shrink: f64,
    /// Regularizer widths at its three scales.
    pub reg_channels: [usize; 3],
    /// Channels of the volume features sampled by the renderer.
    pub volume_channels: usize,
}

impl Default for FrustumConfig {
    fn default() -> Self {
        Self { hypotheses: vec![48, 32, 8], shrink: 0.5, reg_channels: [8, 16, 32], volume_channels: 8 }
    }
}

impl FrustumConfig {
    pub fn validate(&self, levels: usize) -> Result<()> {
        if self.hypotheses.len() != levels {
            return Err(ReconError::Config(format!(
                "{} hypothesis counts given for {levels} levels",
                self.hypotheses.len()
            )));
        }
        if self.hypotheses.iter().any(|&d| d < 2) {
            return Err(ReconError::Config("every level needs at least two hypotheses".into()));
        }
        if !(self.shrink > 0.0 && self.shrink <= 1.0) {
            return Err(ReconError::Config(format!("shrink {} must lie in (0, 1]", self.shrink)));
        }
        Ok(())
    }
}

/// Correlation volume of one reference view at one level.
pub struct CorrelationFrustum<'g, T: Scalar> {
    pub ref_view: usize,
    /// `[D, h, w]`.
    pub corr: Var<'g, T>,
    pub hyps: DepthHypotheses,
    /// Pixels where at least one source warp was valid.
    pub coverage: Vec<bool>,
}

/// Correlates the reference features with every other view warped onto the
/// reference hypotheses. Each pair's cosine-similarity volume is weighted by its
/// per-pixel maximum over valid hypotheses, then pairs are summed.
///
/// `feats[v]` is `[C, h, w]`, `cams[v]` the matching level camera.
pub fn build_correlation<'g, T: Scalar>(
    ref_view: usize,
    feats: &[Var<'g, T>],
    cams: &[Camera],
    hyps: &DepthHypotheses,
) -> Result<CorrelationFrustum<'g, T>> {
    if feats.len() < 2 || feats.len() != cams.len() {
        return Err(ReconError::Invalid(format!(
            "correlation needs at least two views with cameras, got {} features and {} cameras",
            feats.len(),
            cams.len()
        )));
    }
    let (d, h, w) = (hyps.count, hyps.height, hyps.width);
    let fi = feats[ref_view];
    let c = fi.shape()[0];
    if fi.shape() != [c, h, w] {
        return Err(ReconError::Invalid(format!("reference features {:?} do not match hypotheses", fi.shape())));
    }
    let fi = fi.reshape(&[1, c, h, w])?.broadcast_to(&[d, c, h, w])?;
    let mut terms = Vec::with_capacity(feats.len() - 1);
    let mut coverage = vec![false; h * w];
    for (j, (&fj, cam_j)) in feats.iter().zip(cams).enumerate() {
        if j == ref_view {
            continue;
        }
        let (warped, valid) = homography_warp(fj, cam_j, &cams[ref_view], hyps)?;
        let mask = DenseArray::from_fn(&[d, h, w], |k| if valid[k] { T::one() } else { T::zero() });
        for (k, &v) in valid.iter().enumerate() {
            coverage[k % (h * w)] |= v;
        }
        let cij = warped.cosine_similarity(fi, 1, NORM_EPS)?.mul_const(&mask)?;
        let (peak, _) = cij.max_axis(0, Some(&mask))?;
        terms.push(cij.mul(peak.reshape(&[1, h, w])?)?);
    }
    Ok(CorrelationFrustum { ref_view, corr: sum_n(&terms)?, hyps: hyps.clone(), coverage })
}

/// Hypotheses for a finer level: per-pixel windows of `shrink` times the
/// parent span, centred on the upsampled parent depth and shifted to stay
/// inside the parent window.
pub fn refine_hypotheses(parent: &DepthHypotheses, depth: &[f64], count: usize, shrink: f64) -> DepthHypotheses {
    let (ph, pw) = (parent.height, parent.width);
    let (h, w) = (ph * 2, pw * 2);
    let mut start = Vec::with_capacity(h * w);
    let mut interval = Vec::with_capacity(h * w);
    let mut warned = false;
    for y in 0..h {
        for x in 0..w {
            let pp = (y / 2) * pw + x / 2;
            let (lo, hi) = (parent.start[pp], parent.end(pp));
            let mut span = (hi - lo) * shrink;
            if span < MIN_SPAN {
                if !warned {
                    log::warn!("hypothesis span {span:e} clamped to {MIN_SPAN:e}");
                    warned = true;
                }
                span = MIN_SPAN;
            }
            let s = (depth[pp] - span / 2.0).min(hi - span).max(lo);
            start.push(s);
            interval.push(span / (count - 1) as f64);
        }
    }
    DepthHypotheses { count, height: h, width: w, start, interval }
}

fn conv(store: &mut ParamStore<impl Scalar>, name: &str, i: usize, o: usize, k: usize, s: usize, rng: &mut impl Rng) -> Result<Conv3d> {
    Ok(Conv3d::new(store, name, i, o, ConvSpec::cube(k, s, k / 2), rng)?)
}

/// Output padding that restores `target` from a stride-2 transposed conv.
fn restore_pad(target: &[usize]) -> [usize; 3] {
    let pad = |n: usize| usize::from(n % 2 == 0);
    [pad(target[0]), pad(target[1]), pad(target[2])]
}

/// Three-scale 3D encoder-decoder over correlation volumes with a
/// probability head and a feature head.
#[derive(Clone, Debug)]
pub struct Regularizer {
    enc0: Conv3d,
    enc1: Conv3d,
    enc2: Conv3d,
    dec1: ConvTranspose3d,
    dec0: ConvTranspose3d,
    prob: Conv3d,
    feat_a: Conv3d,
    feat_b: Conv3d,
}

pub struct RegularizedVolume<'g, T: Scalar> {
    /// `[N, c, D, h, w]`.
    pub feat: Var<'g, T>,
    /// `[N, D, h, w]`.
    pub prob: Var<'g, T>,
    /// `[N, h, w]`.
    pub depth: Var<'g, T>,
}

impl Regularizer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &FrustumConfig, rng: &mut impl Rng) -> Result<Self> {
        let [c0, c1, c2] = cfg.reg_channels;
        let up = ConvSpec::cube(3, 2, 1);
        Ok(Self {
            enc0: conv(store, &format!("{name}.enc0"), 1, c0, 3, 1, rng)?,
            enc1: conv(store, &format!("{name}.enc1"), c0, c1, 3, 2, rng)?,
            enc2: conv(store, &format!("{name}.enc2"), c1, c2, 3, 2, rng)?,
            dec1: ConvTranspose3d::new(store, &format!("{name}.dec1"), c2, c1, up, [0; 3], rng)?,
            dec0: ConvTranspose3d::new(store, &format!("{name}.dec0"), c1, c0, up, [0; 3], rng)?,
            prob: conv(store, &format!("{name}.prob"), c0, 1, 3, 1, rng)?,
            feat_a: conv(store, &format!("{name}.feat_a"), c0, c0, 3, 1, rng)?,
            feat_b: conv(store, &format!("{name}.feat_b"), c0, cfg.volume_channels, 1, 1, rng)?,
        })
    }

    /// `corr: [N, D, h, w]`, `depths: [N, D, h, w]` hypothesis values.
    pub fn forward<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        corr: Var<'g, T>,
        depths: &DenseArray<T>,
    ) -> Result<RegularizedVolume<'g, T>> {
        let s = corr.shape();
        let (n, d, h, w) = (s[0], s[1], s[2], s[3]);
        let x0 = self.enc0.forward(g, store, corr.reshape(&[n, 1, d, h, w])?)?.relu()?;
        let x1 = self.enc1.forward(g, store, x0)?.relu()?;
        let x2 = self.enc2.forward(g, store, x1)?.relu()?;
        let mut dec1 = self.dec1.clone();
        dec1.output_pad = restore_pad(&x1.shape()[2..]);
        let y1 = dec1.forward(g, store, x2)?.add(x1)?.relu()?;
        let mut dec0 = self.dec0.clone();
        dec0.output_pad = restore_pad(&x0.shape()[2..]);
        let y0 = dec0.forward(g, store, y1)?.add(x0)?.relu()?;
        let logits = self.prob.forward(g, store, y0)?.reshape(&[n, d, h, w])?;
        let prob = logits.softmax(1)?;
        let depth = soft_argmax(prob, depths)?;
        let feat = self.feat_b.forward(g, store, self.feat_a.forward(g, store, y0)?.relu()?)?;
        Ok(RegularizedVolume { feat, prob, depth })
    }
}

/// Expected depth `sum_d prob * depth` over axis 1.
pub fn soft_argmax<'g, T: Scalar>(prob: Var<'g, T>, depths: &DenseArray<T>) -> Result<Var<'g, T>> {
    Ok(prob.mul_const(depths)?.sum(1, false)?)
}

/// One cascade level across all reference views.
pub struct LevelVolumes<'g, T: Scalar> {
    pub cams: Vec<Camera>,
    pub hyps: Vec<DepthHypotheses>,
    pub coverage: Vec<Vec<bool>>,
    pub corr: Var<'g, T>,
    pub volume: RegularizedVolume<'g, T>,
}

pub struct Cascade<'g, T: Scalar> {
    pub levels: Vec<LevelVolumes<'g, T>>,
}

impl<'g, T: Scalar> Cascade<'g, T> {
    /// Finest-level depth maps `[N, H, W]`.
    pub fn final_depth(&self) -> Var<'g, T> {
        self.levels.last().expect("cascade has levels").volume.depth
    }

    pub fn volume_channels(&self) -> usize {
        self.levels.iter().map(|l| l.volume.feat.shape()[1]).sum()
    }
}

/// Per-level regularizers (shared by all reference views of a level).
#[derive(Clone, Debug)]
pub struct FrustumNet {
    pub regularizers: Vec<Regularizer>,
    pub config: FrustumConfig,
}

impl FrustumNet {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &FrustumConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate(cfg.hypotheses.len())?;
        let regularizers = (0..cfg.hypotheses.len())
            .map(|l| Regularizer::new(store, &format!("frustum.l{l}"), cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self { regularizers, config: cfg.clone() })
    }

    /// Runs the cascade. `matching[l]` is `[N, C_l, h_l, w_l]` (coarse
    /// first) and `cams` are the full-resolution cameras.
    pub fn forward<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        matching: &[Var<'g, T>],
        cams: &[Camera],
    ) -> Result<Cascade<'g, T>> {
        let levels = self.regularizers.len();
        if matching.len() != levels {
            return Err(ReconError::Invalid(format!("{} feature levels for {levels} cascade levels", matching.len())));
        }
        let n = cams.len();
        let full_h = cams[0].height;
        let mut out: Vec<LevelVolumes<'g, T>> = Vec::with_capacity(levels);
        for (l, (feat, reg)) in matching.iter().zip(&self.regularizers).enumerate() {
            let s = feat.shape();
            if s[0] != n {
                return Err(ReconError::Invalid(format!("{} feature maps for {n} cameras", s[0])));
            }
            let (c, h, w) = (s[1], s[2], s[3]);
            let factor = h as f64 / full_h as f64;
            let lcams: Vec<Camera> = cams.iter().map(|cam| cam.scaled(factor)).collect();
            let count = self.config.hypotheses[l];
            let hyps: Vec<DepthHypotheses> = match out.last() {
                None => lcams
                    .iter()
                    .map(|cam| DepthHypotheses::uniform(count, h, w, cam.depth_min, cam.depth_max))
                    .collect(),
                Some(prev) => {
                    let depth = prev.volume.depth.value();
                    let plane = prev.hyps[0].height * prev.hyps[0].width;
                    prev.hyps
                        .iter()
                        .enumerate()
                        .map(|(v, ph)| {
                            let dv: Vec<f64> = depth.data()[v * plane..(v + 1) * plane].iter().map(|x| x.as_f64()).collect();
                            refine_hypotheses(ph, &dv, count, self.config.shrink)
                        })
                        .collect()
                }
            };
            if hyps[0].height != h || hyps[0].width != w {
                return Err(ReconError::Invalid(format!("level {l} is not twice the size of its parent")));
            }
            let views: Vec<Var<'g, T>> = (0..n)
                .map(|v| feat.slice(0, v, v + 1)?.reshape(&[c, h, w]))
                .collect::<ufo_tensor::Result<_>>()?;
            let mut corrs = Vec::with_capacity(n);
            let mut coverage = Vec::with_capacity(n);
            for (i, hy) in hyps.iter().enumerate() {
                let f = build_correlation(i, &views, &lcams, hy)?;
                corrs.push(f.corr.reshape(&[1, count, h, w])?);
                coverage.push(f.coverage);
            }
            let corr = concat(&corrs, 0)?;
            let plane = count * h * w;
            let depths = DenseArray::from_fn(&[n, count, h, w], |k| {
                let (v, r) = (k / plane, k % plane);
                T::lit(hyps[v].depth(r / (h * w), r % (h * w)))
            });
            let volume = reg.forward(g, store, corr, &depths)?;
            out.push(LevelVolumes { cams: lcams, hyps, coverage, corr, volume });
        }
        Ok(Cascade { levels: out })
    }
}

/// Per-view feature volumes of one level with their sampling grids.
#[derive(Clone)]
pub struct VolumeGrid<'g, T: Scalar> {
    pub cams: Vec<Camera>,
    pub hyps: Vec<DepthHypotheses>,
    /// `[c, D, h, w]` per view.
    pub feats: Vec<Var<'g, T>>,
}

impl<'g, T: Scalar> Cascade<'g, T> {
    pub fn grids(&self) -> Result<Vec<VolumeGrid<'g, T>>> {
        self.levels
            .iter()
            .map(|level| {
                let feat = level.volume.feat;
                let s = feat.shape();
                let feats = (0..s[0])
                    .map(|v| feat.slice(0, v, v + 1)?.reshape(&s[1..]))
                    .collect::<ufo_tensor::Result<_>>()?;
                Ok(VolumeGrid { cams: level.cams.clone(), hyps: level.hyps.clone(), feats })
            })
            .collect()
    }
}

/// Trilinear samples of every view's feature volume at world points, summed
/// over views per level and concatenated across levels: `[P, sum c_l]`.
/// The depth coordinate uses the hypotheses of the nearest pixel. The mask
/// marks points inside at least one frustum.
pub fn sample_global_feature<'g, T: Scalar>(
    grids: &[VolumeGrid<'g, T>],
    points: &[Vector3<f64>],
) -> Result<(Var<'g, T>, Vec<bool>)> {
    let mut mask = vec![false; points.len()];
    let mut per_level = Vec::with_capacity(grids.len());
    for grid in grids {
        let mut terms = Vec::with_capacity(grid.feats.len());
        for ((cam, hy), &vol) in grid.cams.iter().zip(&grid.hyps).zip(&grid.feats) {
            let (h, w) = (hy.height, hy.width);
            let coords: Vec<[f64; 3]> = points
                .iter()
                .map(|p| {
                    let (px, z) = cam.project_point(p);
                    if !(z > 0.0) || !cam.contains(&px) {
                        return [f64::NAN; 3];
                    }
                    let ix = (px.x.round().max(0.0) as usize).min(w - 1);
                    let iy = (px.y.round().max(0.0) as usize).min(h - 1);
                    let k = iy * w + ix;
                    [px.x, px.y, (z - hy.start[k]) / hy.interval[k]]
                })
                .collect();
            let (sampled, m) = vol.trilinear_sample(&coords)?;
            for (a, b) in mask.iter_mut().zip(&m.0) {
                *a |= *b;
            }
            terms.push(sampled.mul_const(&m.to_array())?);
        }
        if terms.is_empty() {
            return Err(ReconError::Invalid("volume grid without views".into()));
        }
        per_level.push(sum_n(&terms)?);
    }
    Ok((concat(&per_level, 1)?, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cam(x: f64) -> Camera {
        Camera::look_at(Vector3::new(x, 0.0, -4.0), Vector3::new(x, 0.0, 0.0), -Vector3::y(), 8.0, 8, 8, 2.0, 6.0).unwrap()
    }

    #[test]
    fn co_located_unit_features_correlate_to_one() {
        let g = Graph::<f64>::inference();
        let f = g.constant(DenseArray::from_fn(&[4, 8, 8], |i| if i / 64 == 1 { 1.0 } else { 0.0 }));
        let cams = vec![cam(0.0), cam(0.0)];
        let hyps = DepthHypotheses::uniform(4, 8, 8, 2.0, 6.0);
        let fr = build_correlation(0, &[f, f], &cams, &hyps).unwrap();
        assert_eq!(fr.corr.shape(), vec![4, 8, 8]);
        assert!(fr.corr.value().data().iter().all(|&x| (x - 1.0).abs() < 1e-12));
        assert!(fr.coverage.iter().all(|&c| c));
    }

    #[test]
    fn orthogonal_features_give_zero() {
        let g = Graph::<f64>::inference();
        let a = g.constant(DenseArray::from_fn(&[2, 8, 8], |i| if i < 64 { 1.0 } else { 0.0 }));
        let b = g.constant(DenseArray::from_fn(&[2, 8, 8], |i| if i < 64 { 0.0 } else { 1.0 }));
        let hyps = DepthHypotheses::uniform(3, 8, 8, 2.0, 6.0);
        let fr = build_correlation(0, &[a, b], &[cam(0.0), cam(0.3)], &hyps).unwrap();
        assert!(fr.corr.value().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn refined_windows_nest_in_parent() {
        let parent = DepthHypotheses::uniform(5, 2, 2, 1.0, 3.0);
        let child = refine_hypotheses(&parent, &[1.0, 2.0, 2.9, 1.6], 4, 0.5);
        assert_eq!((child.height, child.width), (4, 4));
        for p in 0..16 {
            let pp = (p / 4 / 2) * 2 + (p % 4) / 2;
            assert!(child.start[p] >= parent.start[pp] - 1e-12);
            assert!(child.end(p) <= parent.end(pp) + 1e-12);
            assert!((child.end(p) - child.start[p] - 1.0).abs() < 1e-12);
        }
        assert_eq!(child.start[0], 1.0);
        assert!((child.start[2] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn constant_scores_give_mean_depth() {
        let g = Graph::<f64>::inference();
        let d = DenseArray::from_fn(&[1, 4, 1, 1], |i| 1.0 + i as f64);
        let prob = g.constant(DenseArray::zeros(&[1, 4, 1, 1])).softmax(1).unwrap();
        assert!((soft_argmax(prob, &d).unwrap().item() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn cascade_counts_and_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = FrustumConfig { hypotheses: vec![6, 4], reg_channels: [2, 2, 2], volume_channels: 3, ..Default::default() };
        let mut store = ParamStore::<f64>::new();
        let net = FrustumNet::new(&mut store, &cfg, &mut rng).unwrap();
        let g = Graph::<f64>::inference();
        let cams = vec![cam(0.0), cam(0.2), cam(-0.3)];
        let coarse = g.constant(DenseArray::uniform(&[3, 4, 4, 4], -1.0, 1.0, &mut rng));
        let fine = g.constant(DenseArray::uniform(&[3, 4, 8, 8], -1.0, 1.0, &mut rng));
        let out = net.forward(&g, &store, &[coarse, fine], &cams).unwrap();
        assert_eq!(out.levels.len() * cams.len(), 6);
        for level in &out.levels {
            let prob = level.volume.prob.value();
            let depth = level.volume.depth.value();
            let s = prob.shape().to_vec();
            let hw = s[2] * s[3];
            for v in 0..3 {
                for p in 0..hw {
                    let total: f64 = (0..s[1]).map(|d| prob.data()[(v * s[1] + d) * hw + p]).sum();
                    assert!((total - 1.0).abs() < 1e-9);
                    let z = depth.data()[v * hw + p];
                    let hy = &level.hyps[v];
                    assert!(z >= hy.start[p] - 1e-9 && z <= hy.end(p) + 1e-9);
                }
            }
        }
        assert_eq!(out.volume_channels(), 6);
        let (f, m) = sample_global_feature(&out.grids().unwrap(), &[Vector3::new(0.0, 0.0, 0.0), Vector3::new(0.0, 0.0, -10.0)]).unwrap();
        assert_eq!(f.shape(), vec![2, 6]);
        assert_eq!(m, vec![true, false]);
        assert!(f.value().data()[6..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn lattice_node_returns_stored_value() {
        let g = Graph::<f64>::inference();
        let c = cam(0.0);
        let hy = DepthHypotheses::uniform(3, 8, 8, 2.0, 6.0);
        let feat = g.constant(DenseArray::from_fn(&[1, 3, 8, 8], |i| i as f64));
        let grids = vec![VolumeGrid { cams: vec![c.clone()], hyps: vec![hy], feats: vec![feat] }];
        let p = c.back_project(&nalgebra::Vector2::new(5.0, 2.0), 4.0);
        let (f, m) = sample_global_feature(&grids, &[p]).unwrap();
        assert!(m[0]);
        assert!((f.item() - (64.0 + 2.0 * 8.0 + 5.0)).abs() < 1e-9);
    }
}
