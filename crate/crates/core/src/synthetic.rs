//! Synthetic CIFAR-format fixtures with learnable difficulty scores, used when the
//! real archives are not on disk. Each image is a class-specific stripe pattern on a
//! class color; a high score means a strong, clean pattern and a low score means a
//! faint pattern under heavy noise.

use std::f64::consts::PI;

use crate::data_io::{parse_cifar10, parse_cifar100, LabeledImageSet, ScoreTable, ScoredSubset, SIDE};
use crate::rng::SplitMix64;

#[derive(Clone, Debug)]
pub struct SyntheticSet {
    pub set: LabeledImageSet,
    pub scores: ScoreTable,
}

impl SyntheticSet {
    pub fn subset(&self, name: &str) -> ScoredSubset {
        let mut s = ScoredSubset::join(&self.set, &self.scores).expect("synthetic scores cover every id");
        s.name = name.to_string();
        s
    }
}

#[derive(Clone, Copy)]
enum ScoreShape {
    /// Arcsine-like mass at both ends.
    Bimodal,
    /// Mostly easy, with a thin hard tail.
    Skewed,
}

fn draw_score(rng: &mut SplitMix64, shape: ScoreShape) -> f64 {
    let u = rng.next_f64();
    match shape {
        ScoreShape::Bimodal => (PI * u / 2.0).sin().powi(2),
        ScoreShape::Skewed => 1.0 - 0.9 * u.powi(3),
    }
}

struct ClassStyle {
    color: [f64; 3],
    freq: f64,
    angle: f64,
}

fn class_style(class: u32) -> ClassStyle {
    let mut rng = SplitMix64::new(0x5EED_0000 + class as u64);
    ClassStyle {
        color: [0; 3].map(|_| rng.uniform(70.0, 180.0)),
        freq: rng.uniform(1.5, 5.0),
        angle: rng.uniform(0.0, PI),
    }
}

/// Appends one `3 × 32 × 32` image (channel-major) to `out`.
fn render(rng: &mut SplitMix64, style: &ClassStyle, score: f64, out: &mut Vec<u8>) {
    let contrast = 20.0 + 60.0 * score;
    let noise = 80.0 * (1.0 - score);
    let phase = rng.uniform(0.0, 2.0 * PI);
    let (s, c) = style.angle.sin_cos();
    for ch in 0..3 {
        let sign = if ch == 1 { -1.0 } else { 1.0 };
        for y in 0..SIDE {
            for x in 0..SIDE {
                let t = (x as f64 * c + y as f64 * s) / SIDE as f64;
                let pattern = (2.0 * PI * style.freq * t + phase).sin();
                let v = style.color[ch] + sign * contrast * pattern + noise * rng.uniform(-1.0, 1.0);
                out.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
}

fn generate(n: usize, seed: u64, classes: u32, shape: ScoreShape, coarse: bool) -> (Vec<u8>, ScoreTable) {
    let mut rng = SplitMix64::new(seed);
    let styles: Vec<ClassStyle> = (0..classes).map(class_style).collect();
    let record = if coarse { 3074 } else { 3073 };
    let mut bytes = Vec::with_capacity(n * record);
    let mut scores = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.below(classes as u64) as u32;
        let score = draw_score(&mut rng, shape);
        if coarse {
            bytes.push((label / 5) as u8);
        }
        bytes.push(label as u8);
        render(&mut rng, &styles[label as usize], score, &mut bytes);
        scores.push(score);
    }
    (bytes, ScoreTable::from_ordered(scores).expect("scores lie in [0, 1]"))
}

/// `n` records in the 100-class binary layout, with bimodal scores.
pub fn cifar100_like_bytes(n: usize, seed: u64) -> (Vec<u8>, ScoreTable) {
    generate(n, seed, 100, ScoreShape::Bimodal, true)
}

/// `n` records in the 10-class binary layout, with scores skewed towards easy.
pub fn cifar10_like_bytes(n: usize, seed: u64) -> (Vec<u8>, ScoreTable) {
    generate(n, seed, 10, ScoreShape::Skewed, false)
}

pub fn cifar100_like(n: usize, seed: u64) -> SyntheticSet {
    let (bytes, scores) = cifar100_like_bytes(n, seed);
    let mut set = parse_cifar100(&bytes).expect("well-formed synthetic records");
    set.name = "synthetic-cifar100".into();
    SyntheticSet { set, scores }
}

pub fn cifar10_like(n: usize, seed: u64) -> SyntheticSet {
    let (bytes, scores) = cifar10_like_bytes(n, seed);
    let mut set = parse_cifar10(&bytes).expect("well-formed synthetic records");
    set.name = "synthetic-cifar10".into();
    SyntheticSet { set, scores }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_well_formed() {
        let a = cifar100_like(30, 9);
        let b = cifar100_like(30, 9);
        assert_eq!(a.set.images, b.set.images);
        assert_eq!(a.scores, b.scores);
        assert_eq!(a.set.len(), 30);
        assert!(a.set.coarse_labels.is_some());
        assert!(a.set.labels.iter().all(|&l| l < 100));
        let sub = a.subset("x");
        assert_eq!(sub.name, "x");
        assert_eq!(sub.len(), 30);
    }

    #[test]
    fn score_shapes() {
        let hard = cifar100_like(2000, 1).scores.scores;
        let ends = hard.iter().filter(|&&s| !(0.1..=0.9).contains(&s)).count();
        assert!(ends > 700, "{ends}");
        let mut easy = cifar10_like(2000, 1).scores.scores;
        easy.sort_by(f64::total_cmp);
        assert!(easy[1000] > 0.8);
    }
}
