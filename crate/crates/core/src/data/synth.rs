//! Procedural bitemporal scenes.
//!
//! A scene is a textured ground plane with convex objects: rectangular
//! buildings, full-length road strips and octagonal tree clumps. Between
//! the two dates some buildings and trees appear or disappear; the label is
//! exactly the union of their footprints. Unlabelled distractors (seasonal
//! colour shift, re-coloured roofs, sensor noise) change the pixels without
//! changing the label. Captions state the object counts of each date.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{quantize, write_dataset, BiTemporalSample, Manifest, DATASET_FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::metrics::ChangeMask;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectKind {
    Building,
    Road,
    Vegetation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChangeKind {
    /// Present only at time 2.
    Added,
    /// Present only at time 1.
    Removed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub kind: ObjectKind,
    /// Convex polygon vertices `(x, y)` in pixel units.
    pub polygon: Vec<[f64; 2]>,
    pub color_a: [f64; 3],
    pub color_b: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Change {
    pub object: usize,
    pub kind: ChangeKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub fx: f64,
    pub fy: f64,
    pub phase: f64,
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub index: u64,
    pub size: usize,
    pub ground: [f64; 3],
    pub waves: Vec<Wave>,
    /// Per-date multiplicative tint of ground and vegetation.
    pub season: [[f64; 3]; 2],
    pub noise_sigma: f64,
    pub objects: Vec<SceneObject>,
    pub changes: Vec<Change>,
}

const ROOFS: [[f64; 3]; 4] = [
    [0.78, 0.78, 0.74],
    [0.66, 0.30, 0.24],
    [0.34, 0.45, 0.66],
    [0.92, 0.90, 0.86],
];
const ROAD: [f64; 3] = [0.33, 0.33, 0.35];
const TREE: [f64; 3] = [0.13, 0.38, 0.14];
const GROUNDS: [[f64; 3]; 3] = [[0.56, 0.50, 0.36], [0.44, 0.54, 0.30], [0.60, 0.56, 0.46]];

/// Generator stream for sample `index` of a dataset seeded with `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn jitter(rng: &mut ChaCha8Rng, c: [f64; 3], amount: f64) -> [f64; 3] {
    c.map(|v| (v + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

/// A random palette entry, jittered.
fn pick(rng: &mut ChaCha8Rng, palette: &[[f64; 3]], amount: f64) -> [f64; 3] {
    let base = palette[rng.random_range(0..palette.len())];
    jitter(rng, base, amount)
}

fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Vec<[f64; 2]> {
    vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]]
}

fn octagon(cx: f64, cy: f64, r: f64) -> Vec<[f64; 2]> {
    (0..8)
        .map(|i| {
            let a = std::f64::consts::PI / 8.0 + i as f64 * std::f64::consts::PI / 4.0;
            [cx + r * a.cos(), cy + r * a.sin()]
        })
        .collect()
}

/// True if `(x, y)` lies inside or on the convex polygon.
pub fn inside_convex(polygon: &[[f64; 2]], x: f64, y: f64) -> bool {
    let mut sign = 0.0f64;
    for i in 0..polygon.len() {
        let [ax, ay] = polygon[i];
        let [bx, by] = polygon[(i + 1) % polygon.len()];
        let cross = (bx - ax) * (y - ay) - (by - ay) * (x - ax);
        if cross != 0.0 {
            if sign != 0.0 && cross.signum() != sign {
                return false;
            }
            sign = cross.signum();
        }
    }
    true
}

/// Pixels whose centres fall inside the polygon.
pub fn rasterize(polygon: &[[f64; 2]], height: usize, width: usize) -> ChangeMask {
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for &[x, y] in polygon {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    let mut m = ChangeMask::zeros(height, width);
    let clamp = |v: f64, n: usize| (v.max(0.0) as usize).min(n);
    for y in clamp(y0.floor(), height)..clamp(y1.ceil() + 1.0, height) {
        for x in clamp(x0.floor(), width)..clamp(x1.ceil() + 1.0, width) {
            if inside_convex(polygon, x as f64 + 0.5, y as f64 + 0.5) {
                m.set(y, x, true);
            }
        }
    }
    m
}

impl SceneSpec {
    pub fn random(seed: u64, index: u64, size: usize) -> Self {
        Self::from_rng(&mut sample_rng(seed, index), seed, index, size)
    }

    fn from_rng(rng: &mut ChaCha8Rng, seed: u64, index: u64, size: usize) -> Self {
        let k = size as f64 / 64.0;
        let s = size as f64;
        let ground = pick(rng, &GROUNDS, 0.04);
        let waves = (0..2)
            .map(|_| Wave {
                fx: rng.random_range(0.5..3.0) / s,
                fy: rng.random_range(0.5..3.0) / s,
                phase: rng.random_range(0.0..std::f64::consts::TAU),
                amplitude: rng.random_range(0.02..0.05),
            })
            .collect();
        let season_a = [1.0; 3].map(|v: f64| v + rng.random_range(-0.04..0.04));
        let shift = rng.random_range(-0.12..0.12);
        let season_b = [1.0; 3].map(|v: f64| v + shift + rng.random_range(-0.05..0.05));

        let mut occupied = vec![false; size * size];
        let mut objects: Vec<SceneObject> = Vec::new();

        let roads = [0usize, 1, 1, 2][rng.random_range(0..4)];
        let mut road_axes = Vec::new();
        for _ in 0..roads {
            let horizontal = road_axes.first().map_or(rng.random_bool(0.5), |h: &bool| !*h);
            road_axes.push(horizontal);
            let width = (rng.random_range(4.0..6.0) * k).round().max(2.0);
            let pos = rng.random_range(0.15 * s..0.85 * s - width).round();
            let polygon = if horizontal {
                rect(0.0, pos, s, pos + width)
            } else {
                rect(pos, 0.0, pos + width, s)
            };
            let color = jitter(rng, ROAD, 0.03);
            mark(&mut occupied, size, &polygon);
            objects.push(SceneObject {
                kind: ObjectKind::Road,
                polygon,
                color_a: color,
                color_b: color,
            });
        }

        let place = |rng: &mut ChaCha8Rng, occupied: &mut Vec<bool>, kind: ObjectKind| -> Option<SceneObject> {
            for _ in 0..60 {
                let polygon = match kind {
                    ObjectKind::Building => {
                        let w = (rng.random_range(10.0..18.0) * k).round();
                        let h = (rng.random_range(10.0..18.0) * k).round();
                        let x = rng.random_range(1.0..s - w - 1.0).round();
                        let y = rng.random_range(1.0..s - h - 1.0).round();
                        rect(x, y, x + w, y + h)
                    }
                    ObjectKind::Vegetation => {
                        let r = rng.random_range(4.5..7.5) * k;
                        let cx = rng.random_range(r + 1.0..s - r - 1.0);
                        let cy = rng.random_range(r + 1.0..s - r - 1.0);
                        octagon(cx, cy, r)
                    }
                    ObjectKind::Road => unreachable!("roads are placed separately"),
                };
                if fits(occupied, size, &polygon) {
                    mark(occupied, size, &polygon);
                    let color = match kind {
                        ObjectKind::Building => pick(rng, &ROOFS, 0.04),
                        _ => jitter(rng, TREE, 0.04),
                    };
                    return Some(SceneObject {
                        kind,
                        polygon,
                        color_a: color,
                        color_b: color,
                    });
                }
            }
            None
        };

        let buildings = rng.random_range(2..=5);
        let trees = rng.random_range(1..=4);
        for _ in 0..buildings {
            objects.extend(place(rng, &mut occupied, ObjectKind::Building));
        }
        for _ in 0..trees {
            objects.extend(place(rng, &mut occupied, ObjectKind::Vegetation));
        }

        let mut changes: Vec<Change> = Vec::new();
        let n_changes = if rng.random_bool(0.1) { 0 } else { rng.random_range(1..=3) };
        for _ in 0..n_changes {
            let kind = if rng.random_bool(0.7) {
                ObjectKind::Building
            } else {
                ObjectKind::Vegetation
            };
            if rng.random_bool(0.5) {
                if let Some(obj) = place(rng, &mut occupied, kind) {
                    changes.push(Change {
                        object: objects.len(),
                        kind: ChangeKind::Added,
                    });
                    objects.push(obj);
                }
            } else {
                let candidates: Vec<usize> = (0..objects.len())
                    .filter(|&i| objects[i].kind == kind && !changes.iter().any(|c| c.object == i))
                    .collect();
                if !candidates.is_empty() {
                    let object = candidates[rng.random_range(0..candidates.len())];
                    changes.push(Change {
                        object,
                        kind: ChangeKind::Removed,
                    });
                }
            }
        }

        // Re-roofed buildings: visible, but not a change.
        for i in 0..objects.len() {
            let stable = !changes.iter().any(|c| c.object == i);
            if objects[i].kind == ObjectKind::Building && stable && rng.random_bool(0.3) {
                objects[i].color_b = pick(rng, &ROOFS, 0.04);
            }
        }

        Self {
            seed,
            index,
            size,
            ground,
            waves,
            season: [season_a, season_b],
            noise_sigma: 0.02,
            objects,
            changes,
        }
    }

    fn change_of(&self, i: usize) -> Option<ChangeKind> {
        self.changes.iter().find(|c| c.object == i).map(|c| c.kind)
    }

    /// Whether object `i` exists at date `t` (0 or 1).
    pub fn present(&self, i: usize, t: usize) -> bool {
        match (self.change_of(i), t) {
            (Some(ChangeKind::Added), 0) | (Some(ChangeKind::Removed), 1) => false,
            _ => true,
        }
    }

    pub fn change_mask(&self) -> ChangeMask {
        let mut m = ChangeMask::zeros(self.size, self.size);
        for c in &self.changes {
            let fp = rasterize(&self.objects[c.object].polygon, self.size, self.size);
            for y in 0..self.size {
                for x in 0..self.size {
                    if fp.get(y, x) {
                        m.set(y, x, true);
                    }
                }
            }
        }
        m
    }

    pub fn counts(&self, t: usize) -> [usize; 3] {
        let mut c = [0; 3];
        for (i, o) in self.objects.iter().enumerate() {
            if self.present(i, t) {
                c[o.kind as usize] += 1;
            }
        }
        c
    }

    pub fn caption(&self, t: usize) -> String {
        let [b, r, v] = self.counts(t);
        let plural = |n: usize, one: &str, many: &str| format!("{n} {}", if n == 1 { one } else { many });
        format!(
            "These are {}, {} and {}.",
            plural(b, "building", "buildings"),
            plural(r, "road", "roads"),
            plural(v, "tree", "trees")
        )
    }

    /// Renders date `t`; `rng` supplies the per-pixel sensor noise.
    pub fn render(&self, t: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let n = self.size;
        let season = self.season[t];
        let mut img = Tensor::from_fn(Shape::new(1, 3, n, n), |_, c, y, x| {
            let texture: f64 = self
                .waves
                .iter()
                .map(|w| w.amplitude * (std::f64::consts::TAU * (w.fx * x as f64 + w.fy * y as f64) + w.phase).sin())
                .sum();
            (self.ground[c] + texture) * season[c]
        });
        for (i, o) in self.objects.iter().enumerate() {
            if !self.present(i, t) {
                continue;
            }
            let color = if t == 0 { o.color_a } else { o.color_b };
            let tint = if o.kind == ObjectKind::Vegetation { season } else { [1.0; 3] };
            let fp = rasterize(&o.polygon, n, n);
            for y in 0..n {
                for x in 0..n {
                    if fp.get(y, x) {
                        for c in 0..3 {
                            img.set(0, c, y, x, color[c] * tint[c]);
                        }
                    }
                }
            }
        }
        let normal = rand_distr::Normal::new(0.0, self.noise_sigma).expect("valid sigma");
        for v in img.data_mut() {
            *v = (*v + rng.sample(normal)).clamp(0.0, 1.0);
        }
        quantize(&img)
    }
}

fn footprint_cells(size: usize, polygon: &[[f64; 2]]) -> Vec<usize> {
    let m = rasterize(polygon, size, size);
    (0..size * size).filter(|&i| m.data()[i] != 0).collect()
}

fn mark(occupied: &mut [bool], size: usize, polygon: &[[f64; 2]]) {
    for i in footprint_cells(size, polygon) {
        occupied[i] = true;
    }
}

/// Footprint plus a one-pixel margin is free.
fn fits(occupied: &[bool], size: usize, polygon: &[[f64; 2]]) -> bool {
    footprint_cells(size, polygon).into_iter().all(|i| {
        let (y, x) = ((i / size) as isize, (i % size) as isize);
        (-1..=1).all(|dy| {
            (-1..=1).all(|dx| {
                let (yy, xx) = (y + dy, x + dx);
                yy < 0 || xx < 0 || yy >= size as isize || xx >= size as isize || !occupied[yy as usize * size + xx as usize]
            })
        })
    })
}

pub fn sample_id(index: u64) -> String {
    format!("{index:05}")
}

/// Sample `index` of the dataset seeded with `seed`; independent of every
/// other index.
pub fn generate_sample(seed: u64, index: u64, size: usize) -> Result<(BiTemporalSample, SceneSpec)> {
    if size == 0 || size % 32 != 0 {
        return Err(Error::Config(format!("image size must be a positive multiple of 32, got {size}")));
    }
    let mut rng = sample_rng(seed, index);
    let spec = SceneSpec::from_rng(&mut rng, seed, index, size);
    let image_a = spec.render(0, &mut rng);
    let image_b = spec.render(1, &mut rng);
    let sample = BiTemporalSample {
        id: sample_id(index),
        image_a,
        image_b,
        caption_a: spec.caption(0),
        caption_b: spec.caption(1),
        mask: spec.change_mask(),
    };
    Ok((sample, spec))
}

/// Samples `start..start + count` of the dataset seeded with `seed`.
pub fn generate_samples(seed: u64, start: u64, count: usize, size: usize) -> Result<Vec<BiTemporalSample>> {
    (start..start + count as u64)
        .map(|i| generate_sample(seed, i, size).map(|(s, _)| s))
        .collect()
}

/// Writes a dataset of `count` samples to `out`.
pub fn generate_dataset(seed: u64, count: usize, size: usize, out: &Path) -> Result<Manifest> {
    let samples = generate_samples(seed, 0, count, size)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let manifest = Manifest {
        count,
        size,
        seed,
        format_version: DATASET_FORMAT_VERSION,
    };
    write_dataset(out, &manifest, &samples)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn octagon_rasterizes_symmetric() {
        let m = rasterize(&octagon(8.0, 8.0, 5.0), 16, 16);
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(m.get(y, x), m.get(15 - y, x));
                assert_eq!(m.get(y, x), m.get(y, 15 - x));
            }
        }
        assert!(m.count_changed() > 60 && m.count_changed() < 90);
    }

    #[test]
    fn rectangle_covers_exact_cells() {
        let m = rasterize(&rect(2.0, 3.0, 6.0, 5.0), 8, 8);
        assert_eq!(m.count_changed(), 8);
        assert!(m.get(3, 2) && m.get(4, 5) && !m.get(5, 2) && !m.get(3, 6));
    }

    #[test]
    fn captions_reflect_counts() {
        for i in 0..20 {
            let spec = SceneSpec::random(3, i, 64);
            for t in 0..2 {
                let [b, r, v] = spec.counts(t);
                let cap = spec.caption(t);
                assert!(cap.starts_with("These are "));
                assert!(cap.contains(&format!("{b} building")));
                assert!(cap.contains(&format!("{r} road")));
                assert!(cap.contains(&format!("{v} tree")));
            }
        }
    }

    #[test]
    fn objects_do_not_overlap() {
        for i in 0..20 {
            let spec = SceneSpec::random(11, i, 64);
            let mut seen = vec![false; 64 * 64];
            for o in spec.objects.iter().filter(|o| o.kind != ObjectKind::Road) {
                for c in footprint_cells(64, &o.polygon) {
                    assert!(!seen[c]);
                    seen[c] = true;
                }
            }
        }
    }

    #[test]
    fn rejects_bad_size() {
        assert!(generate_sample(0, 0, 48).is_err());
    }
}
