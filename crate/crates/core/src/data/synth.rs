//! Procedural image datasets.

use clear_tensor::Rng;

use super::{Dataset, Payload};
use crate::error::{CoreError, Result};

/// `round(base_count · decay^k)`, at least 5, for `k = 0..K`.
pub fn longtail_counts(k: usize, base_count: usize, decay: f64) -> Vec<usize> {
    (0..k)
        .map(|i| ((base_count as f64 * decay.powi(i as i32)).round() as usize).max(5))
        .collect()
}

/// Blob geometry of one class: centre row as a fraction of the image
/// height, horizontal and vertical spread as fractions of the image side,
/// and the dominant colour channel.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Pattern {
    row: f64,
    sx: f64,
    sy: f64,
    channel: usize,
}

/// Class `k`'s pattern. Shapes cycle through a horizontal bar, a vertical
/// bar, a large and a small round blob; then the blob row, then the colour.
/// Every pattern is symmetric about the vertical axis so horizontal flips do
/// not change the class.
fn pattern(k: usize, levels: usize) -> Pattern {
    let (sx, sy) = [(0.28, 0.07), (0.07, 0.28), (0.2, 0.2), (0.09, 0.09)][k % 4];
    let level = (k / 4) % levels;
    let row = (level as f64 + 1.0) / (levels as f64 + 1.0);
    Pattern {
        row,
        sx,
        sy,
        channel: (k / (4 * levels)) % 3,
    }
}

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Long-tailed synthetic dataset of `[N, 3, S, S]` uint8 images.
///
/// Class `k` gets `round(base_count · decay^k)` samples (at least 5). Each
/// class is an anisotropic Gaussian blob with its own shape, vertical
/// position and colour; samples jitter position, spread and brightness and
/// add pixel noise. The output depends only on the arguments.
pub fn synth_longtail(k: usize, base_count: usize, decay: f64, image_size: usize, seed: u64) -> Result<Dataset> {
    if k < 2 {
        return Err(CoreError::input(format!("need at least 2 classes, got {k}")));
    }
    if base_count < 10 {
        return Err(CoreError::input(format!("base_count must be >= 10, got {base_count}")));
    }
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(CoreError::input(format!("decay must lie in (0, 1], got {decay}")));
    }
    if image_size < 8 {
        return Err(CoreError::input(format!("image_size must be >= 8, got {image_size}")));
    }
    let levels = k.div_ceil(12).max(2);
    let counts = longtail_counts(k, base_count, decay);
    let n: usize = counts.iter().sum();
    let s = image_size;
    let mut rng = Rng::new(seed, 0x5e_17);
    let mut pixels = Vec::with_capacity(n * 3 * s * s);
    let mut labels = Vec::with_capacity(n);
    let mut plane = vec![0.0f64; s * s];
    for (class, &count) in counts.iter().enumerate() {
        let p = pattern(class, levels);
        for _ in 0..count {
            let cx = 0.5 + rng.uniform_range(-0.05, 0.05);
            let cy = p.row + rng.uniform_range(-0.05, 0.05);
            let spread = rng.uniform_range(0.85, 1.15);
            let (sx, sy) = (p.sx * spread * s as f64, p.sy * spread * s as f64);
            let amp = rng.uniform_range(0.55, 0.8);
            for y in 0..s {
                for x in 0..s {
                    let dx = (x as f64 + 0.5 - cx * s as f64) / sx;
                    let dy = (y as f64 + 0.5 - cy * s as f64) / sy;
                    plane[y * s + x] = amp * (-0.5 * (dx * dx + dy * dy)).exp();
                }
            }
            let background = rng.uniform_range(0.1, 0.25);
            for ch in 0..3 {
                let gain = if ch == p.channel { 1.0 } else { 0.35 };
                for &v in &plane {
                    pixels.push(to_u8(background + gain * v + 0.04 * rng.normal()));
                }
            }
            labels.push(class);
        }
    }
    Dataset::new(
        [n, 3, s, s],
        Payload::U8(pixels),
        labels,
        Dataset::default_names(k),
        vec![
            ("source".into(), "synth_longtail".into()),
            ("seed".into(), seed.to_string()),
            ("params".into(), format!("K={k} base={base_count} decay={decay} size={s}")),
        ],
    )
}

/// Class proportions of the fundus stand-in, grades 0..4.
pub const FUNDUS_PROPORTIONS: [f64; 5] = [0.45, 0.12, 0.19, 0.18, 0.06];

/// Split sizes of the fundus stand-in: train, validation, test.
pub const FUNDUS_SPLITS: [usize; 3] = [1080, 120, 400];

/// Per-split class counts proportional to [`FUNDUS_PROPORTIONS`], with the
/// rounding remainder given to the largest class.
pub fn fundus_counts(n: usize) -> Vec<usize> {
    let mut c: Vec<usize> = FUNDUS_PROPORTIONS.iter().map(|p| (p * n as f64).round() as usize).collect();
    let total: usize = c.iter().sum();
    c[0] = c[0] + n - total;
    c
}

/// Fundus-like 28x28 RGB images whose grade controls the number of small
/// dark lesions and bright exudates on a reddish disc. Adjacent grades
/// overlap in lesion count, so the task is learnable but not separable.
pub fn fundus_standin(n: usize, seed: u64, split: &str) -> Result<Dataset> {
    const S: usize = 28;
    let counts = fundus_counts(n);
    let mut rng = Rng::new(seed, 0xf0_7d);
    let mut labels: Vec<usize> = counts.iter().enumerate().flat_map(|(g, &c)| std::iter::repeat(g).take(c)).collect();
    rng.shuffle(&mut labels);
    let mean_lesions = [0.5, 3.0, 6.0, 10.0, 15.0];
    let mut pixels = Vec::with_capacity(n * 3 * S * S);
    for &grade in &labels {
        let mut img = [[0.0f64; S * S]; 3];
        let tint = [rng.uniform_range(0.65, 0.85), rng.uniform_range(0.3, 0.42), rng.uniform_range(0.12, 0.22)];
        let brightness = rng.uniform_range(0.75, 1.1);
        let (cx, cy) = (13.5 + rng.uniform_range(-1.0, 1.0), 13.5 + rng.uniform_range(-1.0, 1.0));
        let radius = rng.uniform_range(11.0, 13.0);
        let side = if rng.bernoulli(0.5) { -1.0 } else { 1.0 };
        let (dx0, dy0) = (cx + side * rng.uniform_range(4.0, 6.0), cy + rng.uniform_range(-1.5, 1.5));
        for y in 0..S {
            for x in 0..S {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                let r = ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt() / radius;
                let disc = if r < 1.0 { brightness * (1.0 - 0.35 * r * r) } else { 0.0 };
                let optic = 0.5 * (-((fx - dx0).powi(2) + (fy - dy0).powi(2)) / 4.0).exp();
                for ch in 0..3 {
                    img[ch][y * S + x] = disc * tint[ch] + optic * if r < 1.0 { 1.0 } else { 0.0 };
                }
            }
        }
        let lam = mean_lesions[grade] * rng.uniform_range(0.6, 1.4);
        let lesions = poisson(&mut rng, lam);
        for i in 0..lesions {
            let ang = rng.uniform_range(0.0, std::f64::consts::TAU);
            let rad = radius * 0.85 * rng.uniform().sqrt();
            let (lx, ly) = (cx + rad * ang.cos(), cy + rad * ang.sin());
            let exudate = grade >= 2 && i % 3 == 0;
            let size = if grade >= 3 && i % 4 == 1 { 1.6 } else { 0.8 };
            for y in 0..S {
                for x in 0..S {
                    let d2 = (x as f64 + 0.5 - lx).powi(2) + (y as f64 + 0.5 - ly).powi(2);
                    let w = (-d2 / (2.0 * size * size)).exp();
                    if w < 0.02 {
                        continue;
                    }
                    if exudate {
                        img[0][y * S + x] += 0.35 * w;
                        img[1][y * S + x] += 0.45 * w;
                        img[2][y * S + x] += 0.1 * w;
                    } else {
                        img[0][y * S + x] *= 1.0 - 0.6 * w;
                        img[1][y * S + x] *= 1.0 - 0.7 * w;
                        img[2][y * S + x] *= 1.0 - 0.5 * w;
                    }
                }
            }
        }
        for plane in &img {
            for &v in plane.iter() {
                pixels.push(to_u8(v + 0.03 * rng.normal()));
            }
        }
    }
    Dataset::new(
        [n, 3, S, S],
        Payload::U8(pixels),
        labels,
        (0..5).map(|g| format!("grade_{g}")).collect(),
        vec![
            ("source".into(), "fundus_standin".into()),
            ("seed".into(), seed.to_string()),
            ("split".into(), split.into()),
        ],
    )
}

/// Knuth's multiplication method; fine for the small means used here.
fn poisson(rng: &mut Rng, lam: f64) -> usize {
    let limit = (-lam).exp();
    let mut k = 0;
    let mut p = rng.uniform();
    while p > limit {
        k += 1;
        p *= rng.uniform();
    }
    k
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_follow_decay() {
        assert_eq!(longtail_counts(8, 400, 0.6), vec![400, 240, 144, 86, 52, 31, 19, 11]);
        assert_eq!(longtail_counts(3, 20, 1.0), vec![20, 20, 20]);
        assert_eq!(longtail_counts(4, 10, 0.1), vec![10, 5, 5, 5]);
    }

    #[test]
    fn patterns_are_distinct() {
        for k in [8usize, 24, 43] {
            let levels = k.div_ceil(12).max(2);
            let ps: Vec<Pattern> = (0..k.min(4 * levels * 3)).map(|i| pattern(i, levels)).collect();
            for i in 0..ps.len() {
                for j in 0..i {
                    assert_ne!(ps[i], ps[j], "K={k}: classes {i} and {j}");
                }
            }
        }
    }

    #[test]
    fn fundus_split_sizes() {
        for n in FUNDUS_SPLITS {
            let c = fundus_counts(n);
            assert_eq!(c.iter().sum::<usize>(), n);
        }
        assert_eq!(fundus_counts(1080), vec![486, 130, 205, 194, 65]);
    }
}
