//! Few-Pixel attack: differential evolution (DE/rand/1/bin) over candidate
//! sets of `(row, col, value per channel)` pixel edits.

use super::Model;
use crate::error::{Error, Result};
use crate::net::softmax;
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct FewPixelParams {
    pub n_pixels: usize,
    pub population: usize,
    pub iterations: usize,
    /// Differential weight.
    pub f: f64,
    /// Crossover probability.
    pub cr: f64,
}

impl Default for FewPixelParams {
    fn default() -> Self {
        Self {
            n_pixels: 1,
            population: 400,
            iterations: 75,
            f: 0.5,
            cr: 0.9,
        }
    }
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
}

impl Geometry {
    fn gene_len(&self) -> usize {
        2 + self.c
    }

    fn bounds(&self, k: usize) -> (f64, f64) {
        match k % self.gene_len() {
            0 => (0.0, self.h as f64),
            1 => (0.0, self.w as f64),
            _ => (0.0, 1.0),
        }
    }

    fn clip(&self, k: usize, v: f64) -> f64 {
        let (lo, hi) = self.bounds(k);
        // Coordinates live in [0, size) so that floor stays in range.
        if hi > 1.0 {
            v.clamp(lo, hi - 1e-9)
        } else {
            v.clamp(lo, hi)
        }
    }

    fn apply(&self, img: &[f64], cand: &[f64], out: &mut [f64]) {
        out.copy_from_slice(img);
        for gene in cand.chunks(self.gene_len()) {
            let (r, col) = (gene[0] as usize, gene[1] as usize);
            for ch in 0..self.c {
                out[(ch * self.h + r) * self.w + col] = gene[2 + ch];
            }
        }
    }
}

/// True-class probability and misclassification flag of each candidate.
fn evaluate(model: &dyn Model, geo: &Geometry, img: &[f64], label: usize, pop: &[Vec<f64>]) -> Result<Vec<(f64, bool)>> {
    let per = img.len();
    let mut batch = Tensor::zeros(&[pop.len(), geo.c, geo.h, geo.w]);
    for (i, cand) in pop.iter().enumerate() {
        geo.apply(img, cand, &mut batch.data_mut()[i * per..(i + 1) * per]);
    }
    let logits = model.logits(&batch)?;
    let probs = softmax(&logits)?;
    Ok((0..pop.len())
        .map(|i| {
            let row = logits.row(i);
            let top = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            (probs.row(i)[label], top != label)
        })
        .collect())
}

fn distinct_three(n: usize, skip: usize, rng: &mut Rng) -> [usize; 3] {
    let mut picked = [usize::MAX; 3];
    let mut k = 0;
    while k < 3 {
        let v = rng.below(n);
        if v != skip && !picked[..k].contains(&v) {
            picked[k] = v;
            k += 1;
        }
    }
    picked
}

fn attack_one(model: &dyn Model, geo: &Geometry, img: &[f64], label: usize, p: &FewPixelParams, rng: &mut Rng) -> Result<Vec<f64>> {
    let dim = p.n_pixels * geo.gene_len();
    let mut pop: Vec<Vec<f64>> = (0..p.population)
        .map(|_| {
            (0..dim)
                .map(|k| {
                    let (lo, hi) = geo.bounds(k);
                    rng.uniform_scalar(lo, hi)
                })
                .collect()
        })
        .collect();
    let mut fit = evaluate(model, geo, img, label, &pop)?;
    let mut out = vec![0.0; img.len()];
    for _ in 0..p.iterations {
        if fit.iter().any(|f| f.1) {
            break;
        }
        let trials: Vec<Vec<f64>> = (0..p.population)
            .map(|i| {
                let [a, b, c] = distinct_three(p.population, i, rng);
                let forced = rng.below(dim);
                (0..dim)
                    .map(|k| {
                        if k == forced || rng.bernoulli(p.cr) {
                            geo.clip(k, pop[a][k] + p.f * (pop[b][k] - pop[c][k]))
                        } else {
                            pop[i][k]
                        }
                    })
                    .collect()
            })
            .collect();
        let tfit = evaluate(model, geo, img, label, &trials)?;
        for (i, (t, tf)) in trials.into_iter().zip(tfit).enumerate() {
            if tf.0 <= fit[i].0 {
                pop[i] = t;
                fit[i] = tf;
            }
        }
    }
    let best = (0..pop.len())
        .min_by(|&i, &j| {
            // Misclassifying candidates first, then lowest true-class probability.
            (!fit[i].1, fit[i].0).partial_cmp(&(!fit[j].1, fit[j].0)).expect("finite fitness")
        })
        .expect("non-empty population");
    geo.apply(img, &pop[best], &mut out);
    Ok(out)
}

/// Changes at most `n_pixels` pixels (all channels) of each image to minimise
/// the true-class probability; stops early once a candidate misclassifies.
pub fn few_pixel(model: &dyn Model, x: &Tensor, y: &[usize], p: &FewPixelParams, rng: &mut Rng) -> Result<Tensor> {
    let &[n, c, h, w] = x.shape() else {
        return Err(Error::invalid("few_pixel", format!("expected N×C×H×W input, got {:?}", x.shape())));
    };
    if y.len() != n {
        return Err(Error::invalid("few_pixel", format!("{} labels for {n} images", y.len())));
    }
    if p.population < 4 {
        return Err(Error::invalid("few_pixel", "population must be at least 4"));
    }
    if !(0.0..=2.0).contains(&p.f) || !(0.0..=1.0).contains(&p.cr) {
        return Err(Error::invalid("few_pixel", format!("bad F {} or CR {}", p.f, p.cr)));
    }
    if p.n_pixels == 0 {
        return Ok(x.clone());
    }
    let geo = Geometry { c, h, w };
    let per = c * h * w;
    let mut adv = x.clone();
    for i in 0..n {
        let img = &x.data()[i * per..(i + 1) * per];
        let out = attack_one(model, &geo, img, y[i], p, rng)?;
        adv.data_mut()[i * per..(i + 1) * per].copy_from_slice(&out);
    }
    Ok(adv)
}

#[cfg(test)]
mod tests {
    use super::super::testing::LinearModel;
    use super::*;

    /// 1×3×3 images; class 1 wins only when pixel (1, 2) exceeds 0.8.
    fn gate() -> LinearModel {
        // On a 0.5 background: class 0 scores 4 + v, class 1 scores 6v.
        let mut w = Tensor::zeros(&[2, 9]);
        w.data_mut()[..9].fill(1.0);
        w.data_mut()[9 + 5] = 6.0;
        LinearModel::new(w)
    }

    fn changed_pixels(a: &Tensor, b: &Tensor, c: usize, hw: usize) -> Vec<usize> {
        let n = a.dim(0);
        (0..n * hw)
            .filter(|&k| {
                let (i, p) = (k / hw, k % hw);
                (0..c).any(|ch| a.data()[(i * c + ch) * hw + p] != b.data()[(i * c + ch) * hw + p])
            })
            .collect()
    }

    #[test]
    fn finds_the_single_pixel_an_exhaustive_search_finds() {
        let m = gate();
        let x = Tensor::full(&[1, 1, 3, 3], 0.5);
        // Exhaustive oracle over position and a fine value grid.
        let mut oracle = Vec::new();
        for pos in 0..9 {
            for v in 0..=100 {
                let mut t = x.clone();
                t.data_mut()[pos] = v as f64 / 100.0;
                let l = m.logits(&t).unwrap();
                if l.data()[1] > l.data()[0] {
                    oracle.push(pos);
                }
            }
        }
        oracle.dedup();
        assert_eq!(oracle, vec![5]);
        let p = FewPixelParams {
            population: 40,
            iterations: 30,
            ..FewPixelParams::default()
        };
        let adv = few_pixel(&m, &x, &[0], &p, &mut Rng::new(3)).unwrap();
        let l = m.logits(&adv).unwrap();
        assert!(l.data()[1] > l.data()[0]);
        assert_eq!(changed_pixels(&adv, &x, 1, 9), vec![5]);
    }

    #[test]
    fn respects_pixel_budget() {
        let mut rng = Rng::new(0);
        let m = LinearModel::new(rng.normal(&[4, 3 * 25], 0.0, 1.0).unwrap());
        let x = rng.uniform(&[3, 3, 5, 5], 0.0, 1.0).unwrap();
        for n_pixels in [1, 2, 3] {
            let p = FewPixelParams {
                n_pixels,
                population: 10,
                iterations: 5,
                ..FewPixelParams::default()
            };
            let adv = few_pixel(&m, &x, &[0, 1, 2], &p, &mut rng).unwrap();
            let changed = changed_pixels(&adv, &x, 3, 25);
            for i in 0..3 {
                assert!(changed.iter().filter(|&&k| k / 25 == i).count() <= n_pixels);
            }
            assert!(adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let zero = FewPixelParams { n_pixels: 0, ..FewPixelParams::default() };
        assert_eq!(few_pixel(&m, &x, &[0, 1, 2], &zero, &mut rng).unwrap(), x);
    }

    #[test]
    fn early_stop_bounds_queries() {
        let m = gate();
        let x = Tensor::full(&[1, 1, 3, 3], 0.5);
        let p = FewPixelParams { population: 8, iterations: 1000, ..FewPixelParams::default() };
        few_pixel(&m, &x, &[1], &p, &mut Rng::new(1)).unwrap();
        // Label 1 is already wrong for the clean image, so the initial
        // population misclassifies and no generation runs.
        assert_eq!(m.calls.get(), 8);
    }
}
