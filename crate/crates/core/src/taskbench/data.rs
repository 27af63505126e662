//! Synthetic stand-ins for the three chest X-ray tasks.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::seed::rng_for;
use crate::task::TaskKind;
use crate::tensor::Tensor;

/// Ground-truth rectangle in normalised image coordinates `(x, y, w, h)`.
pub type BBox = [f32; 4];

#[derive(Debug, Clone, PartialEq)]
pub enum Label {
    Class(usize),
    /// One 0/1 entry per patch, row-major over the grid.
    Mask(Vec<u8>),
    Box {
        bbox: BBox,
        objectness: u8,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[1, d]` for classification, `[P, patch_dim]` for image tasks.
    pub features: Tensor,
    pub label: Label,
}

impl Sample {
    pub fn task(&self) -> TaskKind {
        match self.label {
            Label::Class(_) => TaskKind::Classification,
            Label::Mask(_) => TaskKind::Segmentation,
            Label::Box { .. } => TaskKind::Detection,
        }
    }

    pub fn class(&self) -> Option<usize> {
        match self.label {
            Label::Class(c) => Some(c),
            _ => None,
        }
    }
}

/// Isotropic Gaussian mixture with one mean per class along the first axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationTask {
    pub dim: usize,
    pub classes: usize,
    pub separation: f32,
    pub noise: f32,
}

impl Default for ClassificationTask {
    fn default() -> Self {
        Self {
            dim: 8,
            classes: 3,
            separation: 2.5,
            noise: 1.0,
        }
    }
}

impl ClassificationTask {
    pub fn mean(&self, class: usize) -> Vec<f32> {
        let mut m = vec![0.0; self.dim];
        m[class % self.dim] = self.separation;
        m
    }

    fn sample(&self, class: usize, rng: &mut impl Rng) -> Sample {
        let normal = Normal::new(0.0, self.noise).expect("positive noise");
        let data = self
            .mean(class)
            .iter()
            .map(|m| m + normal.sample(rng))
            .collect();
        Sample {
            features: Tensor::new(vec![1, self.dim], data).expect("valid shape"),
            label: Label::Class(class),
        }
    }

    /// `n` samples with uniformly drawn classes.
    pub fn generate(&self, n: usize, seed: u64) -> Result<Vec<Sample>, DataError> {
        if n < self.classes {
            return Err(DataError::Invalid(format!(
                "need at least {} samples, got {n}",
                self.classes
            )));
        }
        let mut rng = rng_for(seed, "classification-data");
        Ok((0..n)
            .map(|_| {
                let c = rng.gen_range(0..self.classes);
                self.sample(c, &mut rng)
            })
            .collect())
    }

    /// Exactly `counts[c]` samples of class `c`, shuffled.
    pub fn generate_with_counts(
        &self,
        counts: &[usize],
        seed: u64,
    ) -> Result<Vec<Sample>, DataError> {
        if counts.len() != self.classes {
            return Err(DataError::Invalid(format!(
                "expected {} class counts, got {}",
                self.classes,
                counts.len()
            )));
        }
        let mut rng = rng_for(seed, "classification-data-counts");
        let mut labels: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat(c).take(n))
            .collect();
        rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut rng);
        Ok(labels
            .into_iter()
            .map(|c| self.sample(c, &mut rng))
            .collect())
    }

    /// Index of the nearest class mean, the Bayes rule for equal priors.
    pub fn bayes_predict(&self, x: &[f32]) -> usize {
        (0..self.classes)
            .map(|c| {
                let d: f32 = self
                    .mean(c)
                    .iter()
                    .zip(x)
                    .map(|(m, v)| (m - v) * (m - v))
                    .sum();
                (c, d)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(c, _)| c)
            .expect("at least one class")
    }
}

/// Toy images: a `grid × grid` patch lattice with at most one bright rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageTask {
    pub grid: usize,
    pub patch_dim: usize,
    pub empty_fraction: f64,
    pub noise: f32,
}

impl Default for ImageTask {
    fn default() -> Self {
        Self {
            grid: 4,
            patch_dim: 4,
            empty_fraction: 0.2,
            noise: 0.3,
        }
    }
}

/// Rectangle in patch units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl PatchRect {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.y..self.y + self.h).contains(&row) && (self.x..self.x + self.w).contains(&col)
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }
}

const SIGNAL: [f32; 4] = [1.0, 0.5, -0.5, 1.0];

impl ImageTask {
    pub fn patches(&self) -> usize {
        self.grid * self.grid
    }

    pub fn mask_of(&self, rect: Option<PatchRect>) -> Vec<u8> {
        (0..self.patches())
            .map(|i| rect.is_some_and(|r| r.contains(i / self.grid, i % self.grid)) as u8)
            .collect()
    }

    pub fn bbox_of(&self, rect: PatchRect) -> BBox {
        let g = self.grid as f32;
        [
            rect.x as f32 / g,
            rect.y as f32 / g,
            rect.w as f32 / g,
            rect.h as f32 / g,
        ]
    }

    /// Smallest rectangle covering the set patches, or `None` for an empty mask.
    pub fn rect_from_mask(&self, mask: &[u8]) -> Option<PatchRect> {
        let set: Vec<(usize, usize)> = mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m != 0)
            .map(|(i, _)| (i / self.grid, i % self.grid))
            .collect();
        let (rmin, rmax) = (
            set.iter().map(|p| p.0).min()?,
            set.iter().map(|p| p.0).max()?,
        );
        let (cmin, cmax) = (
            set.iter().map(|p| p.1).min()?,
            set.iter().map(|p| p.1).max()?,
        );
        Some(PatchRect {
            x: cmin,
            y: rmin,
            w: cmax - cmin + 1,
            h: rmax - rmin + 1,
        })
    }

    fn draw(&self, rng: &mut impl Rng) -> (Tensor, Option<PatchRect>) {
        let rect = if rng.gen_bool(self.empty_fraction) {
            None
        } else {
            let x = rng.gen_range(0..self.grid);
            let y = rng.gen_range(0..self.grid);
            let w = rng.gen_range(1..=self.grid - x);
            let h = rng.gen_range(1..=self.grid - y);
            Some(PatchRect { x, y, w, h })
        };
        let normal = Normal::new(0.0, self.noise).expect("positive noise");
        let mut data = Vec::with_capacity(self.patches() * self.patch_dim);
        for i in 0..self.patches() {
            let lit = rect.is_some_and(|r| r.contains(i / self.grid, i % self.grid));
            for j in 0..self.patch_dim {
                let base = if lit { SIGNAL[j % SIGNAL.len()] } else { 0.0 };
                data.push(base + normal.sample(rng));
            }
        }
        let features =
            Tensor::new(vec![self.patches(), self.patch_dim], data).expect("valid shape");
        (features, rect)
    }

    pub fn generate_segmentation(&self, n: usize, seed: u64) -> Vec<Sample> {
        let mut rng = rng_for(seed, "segmentation-data");
        (0..n)
            .map(|_| {
                let (features, rect) = self.draw(&mut rng);
                Sample {
                    features,
                    label: Label::Mask(self.mask_of(rect)),
                }
            })
            .collect()
    }

    pub fn generate_detection(&self, n: usize, seed: u64) -> Vec<Sample> {
        let mut rng = rng_for(seed, "detection-data");
        (0..n)
            .map(|_| {
                let (features, rect) = self.draw(&mut rng);
                let label = match rect {
                    Some(r) => Label::Box {
                        bbox: self.bbox_of(r),
                        objectness: 1,
                    },
                    None => Label::Box {
                        bbox: [0.0; 4],
                        objectness: 0,
                    },
                };
                Sample { features, label }
            })
            .collect()
    }
}

pub fn gen_classification(n: usize, seed: u64) -> Result<Vec<Sample>, DataError> {
    ClassificationTask::default().generate(n, seed)
}

pub fn gen_segmentation(n: usize, seed: u64) -> Vec<Sample> {
    ImageTask::default().generate_segmentation(n, seed)
}

pub fn gen_detection(n: usize, seed: u64) -> Vec<Sample> {
    ImageTask::default().generate_detection(n, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classification_is_seeded_and_roughly_uniform() {
        let a = gen_classification(3000, 11).unwrap();
        assert_eq!(a, gen_classification(3000, 11).unwrap());
        assert_ne!(a, gen_classification(3000, 12).unwrap());
        let mut hist = [0usize; 3];
        a.iter().for_each(|s| hist[s.class().unwrap()] += 1);
        for h in hist {
            assert!((h as f64 / 3000.0 - 1.0 / 3.0).abs() < 0.05, "{hist:?}");
        }
        assert!(gen_classification(2, 0).is_err());
    }

    #[test]
    fn bayes_rule_beats_ninety_percent() {
        let task = ClassificationTask::default();
        let samples = task.generate(3000, 5).unwrap();
        let correct = samples
            .iter()
            .filter(|s| task.bayes_predict(s.features.data()) == s.class().unwrap())
            .count();
        assert!(
            correct as f64 / 3000.0 > 0.9,
            "accuracy {}",
            correct as f64 / 3000.0
        );
    }

    #[test]
    fn masks_match_rectangles_and_round_trip() {
        let task = ImageTask::default();
        let seg = task.generate_segmentation(300, 3);
        let det = task.generate_detection(300, 3);
        let mut empties = 0;
        for (s, d) in seg.iter().zip(&det) {
            let (Label::Mask(mask), Label::Box { bbox, objectness }) = (&s.label, &d.label) else {
                panic!("wrong label kinds");
            };
            assert_eq!(mask.len(), 16);
            match task.rect_from_mask(mask) {
                Some(rect) => {
                    assert_eq!(mask.iter().map(|&m| m as usize).sum::<usize>(), rect.area());
                    assert_eq!(task.mask_of(Some(rect)), *mask);
                }
                None => empties += 1,
            }
            if *objectness == 1 {
                assert!(bbox.iter().all(|v| (v * 4.0).fract() == 0.0));
                assert!(bbox[2] > 0.0 && bbox[3] > 0.0);
                assert!(bbox[0] + bbox[2] <= 1.0 && bbox[1] + bbox[3] <= 1.0);
            } else {
                assert_eq!(*bbox, [0.0; 4]);
            }
        }
        assert!((30..90).contains(&empties), "{empties} empty images");
    }

    #[test]
    fn counts_are_exact() {
        let s = ClassificationTask::default()
            .generate_with_counts(&[5, 0, 7], 1)
            .unwrap();
        assert_eq!(s.iter().filter(|x| x.class() == Some(0)).count(), 5);
        assert_eq!(s.iter().filter(|x| x.class() == Some(2)).count(), 7);
    }
}
