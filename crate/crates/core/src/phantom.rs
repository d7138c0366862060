//! Procedural paired vascular phantoms.
//!
//! A vessel tree is grown from a root segment running roughly along z. Each
//! further branch leaves an existing segment at a random point, is rotated away
//! from its parent's local direction, and is thinner than its parent. Segments
//! are tortuous polylines; every polyline piece is rasterized as a capsule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::components::label_components;
use crate::error::{Error, Result};
use crate::volume::Volume3D;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    /// `(depth, height, width)` in voxels.
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub branch_count: usize,
    /// Vessel radius bounds in voxels.
    pub radius_range: (f64, f64),
    pub tortuosity: f64,
    pub vessel_contrast_angio: f64,
    pub vessel_contrast_nonangio: f64,
    pub background: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [32, 32, 32],
            spacing: [1.0; 3],
            branch_count: 6,
            radius_range: (1.5, 3.0),
            tortuosity: 0.3,
            vessel_contrast_angio: 0.7,
            vessel_contrast_nonangio: 0.15,
            background: 0.2,
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        let [d, h, w] = self.dims;
        let (rmin, rmax) = self.radius_range;
        if self.branch_count < 1 {
            return bad("branch_count must be at least 1".into());
        }
        if !(rmin > 0.0 && rmin <= rmax && rmax.is_finite()) {
            return bad(format!("radius range {:?} must satisfy 0 < min <= max", self.radius_range));
        }
        if !(rmax < h.min(w) as f64 / 4.0) {
            return bad(format!("radius max {rmax} must be below min(H, W)/4"));
        }
        let needed = 2.0 * (rmax + 1.0);
        if self.dims.iter().any(|&n| (n as f64) <= needed) {
            return bad(format!("dims {:?} too small to contain a root of radius {rmax}", self.dims));
        }
        if !(self.tortuosity >= 0.0 && self.tortuosity.is_finite()) {
            return bad("tortuosity must be >= 0".into());
        }
        let in_unit = |c: f64| c > 0.0 && c <= 1.0;
        if !in_unit(self.vessel_contrast_angio) || !in_unit(self.vessel_contrast_nonangio) {
            return bad("vessel contrasts must lie in (0, 1]".into());
        }
        if self.vessel_contrast_angio <= self.vessel_contrast_nonangio {
            return bad("angiographic contrast must exceed non-angiographic contrast".into());
        }
        if !(0.0..1.0).contains(&self.background) {
            return bad("background must lie in [0, 1)".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be >= 0".into());
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad("spacing must be positive".into());
        }
        let _ = (d, h, w);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumePair {
    pub non_angio: Volume3D,
    pub angio: Volume3D,
    /// Exactly 0.0 / 1.0.
    pub vessel_mask: Volume3D,
}

#[derive(Debug, Clone)]
struct Segment {
    points: Vec<[f64; 3]>,
    radius: f64,
    length: f64,
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<VolumePair> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let segments = grow_tree(spec, &mut rng);
    let mask = rasterize(spec, &segments);

    let n = mask.len();
    let noise = Normal::new(0.0, spec.noise_sigma).expect("sigma validated");
    let render = |contrast: f64, rng: &mut ChaCha8Rng| -> Vec<f32> {
        (0..n)
            .map(|i| {
                let base = spec.background + if mask[i] { contrast } else { 0.0 };
                let v = if spec.noise_sigma > 0.0 { base + noise.sample(rng) } else { base };
                v.clamp(0.0, 1.0) as f32
            })
            .collect()
    };
    let angio = render(spec.vessel_contrast_angio, &mut rng);
    let non_angio = render(spec.vessel_contrast_nonangio, &mut rng);
    let mask = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();

    Ok(VolumePair {
        non_angio: Volume3D::new(spec.dims, spec.spacing, non_angio)?,
        angio: Volume3D::new(spec.dims, spec.spacing, angio)?,
        vessel_mask: Volume3D::new(spec.dims, spec.spacing, mask)?,
    })
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn gaussian3(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
    ]
}

fn trace_segment(
    spec: &PhantomSpec,
    rng: &mut ChaCha8Rng,
    start: [f64; 3],
    mut dir: [f64; 3],
    length: f64,
    radius: f64,
) -> Segment {
    let margin = radius + 0.5;
    let mut points = vec![start];
    let mut p = start;
    let steps = length.ceil().max(1.0) as usize;
    for _ in 0..steps {
        let jitter = gaussian3(rng);
        let k = 0.15 * spec.tortuosity;
        dir = normalize([dir[0] + k * jitter[0], dir[1] + k * jitter[1], dir[2] + k * jitter[2]]);
        let mut next = [p[0] + dir[0], p[1] + dir[1], p[2] + dir[2]];
        for a in 0..3 {
            let lo = margin.min(start[a]);
            let hi = (spec.dims[a] as f64 - 1.0 - margin).max(start[a]);
            if next[a] < lo || next[a] > hi {
                dir[a] = -dir[a];
                next[a] = next[a].clamp(lo, hi);
            }
        }
        points.push(next);
        p = next;
    }
    Segment { points, radius, length }
}

fn grow_tree(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Vec<Segment> {
    let [d, h, w] = spec.dims.map(|n| n as f64);
    let (rmin, rmax) = spec.radius_range;
    let start = [
        rmax + 1.0,
        h / 2.0 + rng.random_range(-0.1..0.1) * h,
        w / 2.0 + rng.random_range(-0.1..0.1) * w,
    ];
    let dir = normalize([1.0, rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)]);
    let mut segments = vec![trace_segment(spec, rng, start, dir, 0.85 * d, rmax)];

    for _ in 1..spec.branch_count {
        let parent = segments[rng.random_range(0..segments.len())].clone();
        let np = parent.points.len();
        let at = ((np as f64 - 1.0) * rng.random_range(0.2..0.8)).round() as usize;
        let at = at.min(np - 2);
        let origin = parent.points[at];
        let local = normalize([
            parent.points[at + 1][0] - origin[0],
            parent.points[at + 1][1] - origin[1],
            parent.points[at + 1][2] - origin[2],
        ]);
        // Rotate the parent direction by a random angle towards a random
        // perpendicular axis.
        let mut perp = cross(local, gaussian3(rng));
        if perp.iter().map(|x| x * x).sum::<f64>() < 1e-12 {
            perp = cross(local, [0.0, 0.0, 1.0]);
        }
        let perp = normalize(perp);
        let angle = rng.random_range(30.0f64..70.0).to_radians();
        let dir = normalize([
            angle.cos() * local[0] + angle.sin() * perp[0],
            angle.cos() * local[1] + angle.sin() * perp[1],
            angle.cos() * local[2] + angle.sin() * perp[2],
        ]);
        let radius = (parent.radius * 0.75).max(rmin);
        let length = (parent.length * rng.random_range(0.5..0.8)).max(4.0);
        segments.push(trace_segment(spec, rng, origin, dir, length, radius));
    }
    segments
}

fn dist_to_segment(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = [ap[0] - t * ab[0], ap[1] - t * ab[1], ap[2] - t * ab[2]];
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt()
}

/// Capsule rasterization plus a densely sampled centerline, reduced to its
/// largest 26-connected component.
fn rasterize(spec: &PhantomSpec, segments: &[Segment]) -> Vec<bool> {
    let [d, h, w] = spec.dims;
    let mut mask = vec![false; d * h * w];
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    for seg in segments {
        for pair in seg.points.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let r = seg.radius;
            let lo: Vec<usize> = (0..3)
                .map(|k| (a[k].min(b[k]) - r).floor().max(0.0) as usize)
                .collect();
            let hi: Vec<usize> = (0..3)
                .map(|k| ((a[k].max(b[k]) + r).ceil() as usize).min(spec.dims[k] - 1))
                .collect();
            for z in lo[0]..=hi[0] {
                for y in lo[1]..=hi[1] {
                    for x in lo[2]..=hi[2] {
                        if dist_to_segment([z as f64, y as f64, x as f64], a, b) <= r {
                            mask[idx(z, y, x)] = true;
                        }
                    }
                }
            }
            for s in 0..=4 {
                let t = s as f64 / 4.0;
                let z = (a[0] + t * (b[0] - a[0])).round() as usize;
                let y = (a[1] + t * (b[1] - a[1])).round() as usize;
                let x = (a[2] + t * (b[2] - a[2])).round() as usize;
                mask[idx(z.min(d - 1), y.min(h - 1), x.min(w - 1))] = true;
            }
        }
    }
    let (labels, sizes) = label_components(&mask, spec.dims, true);
    if sizes.len() > 1 {
        let keep = 1 + sizes
            .iter()
            .enumerate()
            .max_by_key(|&(i, &s)| (s, std::cmp::Reverse(i)))
            .map(|(i, _)| i)
            .unwrap() as u32;
        for (m, &l) in mask.iter_mut().zip(&labels) {
            *m = l == keep;
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_fixed_seed() {
        let spec = PhantomSpec { seed: 7, ..Default::default() };
        assert_eq!(generate_phantom(&spec).unwrap(), generate_phantom(&spec).unwrap());
    }

    #[test]
    fn zero_noise_angio_equals_mask() {
        let spec = PhantomSpec {
            noise_sigma: 0.0,
            vessel_contrast_angio: 1.0,
            vessel_contrast_nonangio: 0.5,
            background: 0.0,
            seed: 11,
            ..Default::default()
        };
        let pair = generate_phantom(&spec).unwrap();
        assert_eq!(pair.angio.voxels(), pair.vessel_mask.voxels());
        assert!(pair.angio.voxels().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn rejects_invalid_specs() {
        let ok = PhantomSpec::default();
        let cases = [
            PhantomSpec { dims: [6, 32, 32], ..ok.clone() },
            PhantomSpec { radius_range: (2.0, 1.0), ..ok.clone() },
            PhantomSpec { radius_range: (1.0, 8.0), ..ok.clone() },
            PhantomSpec { vessel_contrast_angio: 0.1, ..ok.clone() },
            PhantomSpec { branch_count: 0, ..ok.clone() },
            PhantomSpec { noise_sigma: -1.0, ..ok.clone() },
        ];
        for spec in cases {
            assert!(matches!(generate_phantom(&spec), Err(Error::InvalidArgument(_))), "{spec:?}");
        }
    }

    #[test]
    fn angio_is_brighter_inside_vessels() {
        let pair = generate_phantom(&PhantomSpec { seed: 5, ..Default::default() }).unwrap();
        let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0, 0.0, 0);
        for (&v, &m) in pair.angio.voxels().iter().zip(pair.vessel_mask.voxels()) {
            if m == 1.0 {
                inside += v as f64;
                n_in += 1;
            } else {
                outside += v as f64;
                n_out += 1;
            }
        }
        assert!(n_in > 0);
        assert!(inside / n_in as f64 > outside / n_out as f64);
    }
}
