//! Multiplicative triple scorers over block-contiguous real vectors.
//!
//! Complex, quaternion and Clifford embeddings are stored component-major:
//! a ComplEx vector of dimension `d` holds `d/2` real parts followed by
//! `d/2` imaginary parts, a QMult vector holds four blocks `(a, b, c, d)`,
//! and a Keci vector holds the scalar block followed by `p` positive and
//! `q` negative basis-vector blocks.
//!
//! Every scorer is trilinear and can be written as `⟨compose(h, r), t⟩`,
//! which is what training uses to score one `(h, r)` against all tails.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    DistMult,
    ComplEx,
    QMult,
    Keci,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::DistMult => "DistMult",
            Family::ComplEx => "ComplEx",
            Family::QMult => "QMult",
            Family::Keci => "Keci",
        })
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "distmult" => Ok(Family::DistMult),
            "complex" => Ok(Family::ComplEx),
            "qmult" => Ok(Family::QMult),
            "keci" => Ok(Family::Keci),
            _ => Err(Error::Config(format!("unknown model family {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub family: Family,
    pub dim: usize,
    pub p: usize,
    pub q: usize,
}

impl ScorerConfig {
    pub fn new(family: Family, dim: usize, p: usize, q: usize) -> Result<Self> {
        let cfg = Self { family, dim, p, q };
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        let k = cfg.blocks();
        if dim % k != 0 {
            return Err(Error::Config(format!(
                "{family} needs a dimension divisible by {k}, got {dim}"
            )));
        }
        Ok(cfg)
    }

    /// Number of contiguous component blocks.
    pub fn blocks(&self) -> usize {
        match self.family {
            Family::DistMult => 1,
            Family::ComplEx => 2,
            Family::QMult => 4,
            Family::Keci => self.p + self.q + 1,
        }
    }

    fn check(&self, vs: &[&[f64]]) -> Result<()> {
        for v in vs {
            if v.len() != self.dim {
                return Err(shape_err("score", &[self.dim], &[v.len()]));
            }
        }
        Ok(())
    }

    pub fn score(&self, h: &[f64], r: &[f64], t: &[f64]) -> Result<f64> {
        self.check(&[h, r, t])?;
        match self.family {
            Family::DistMult => score_distmult(h, r, t),
            Family::ComplEx => score_complex(h, r, t),
            Family::QMult => score_qmult(h, r, t),
            Family::Keci => score_keci(h, r, t, self.p, self.q),
        }
    }

    /// The vector `c` with `score(h, r, t) = ⟨c, t⟩`.
    pub fn compose(&self, h: &[f64], r: &[f64]) -> Result<Vec<f64>> {
        self.check(&[h, r])?;
        let k = self.blocks();
        let s = self.dim / k;
        let b = |v: &[f64], i: usize| -> Vec<f64> { v[i * s..(i + 1) * s].to_vec() };
        let mul = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(a, b)| a * b).collect() };
        let lin = |terms: &[(f64, Vec<f64>)]| -> Vec<f64> {
            (0..s)
                .map(|i| terms.iter().map(|(c, v)| c * v[i]).sum())
                .collect()
        };
        let blocks: Vec<Vec<f64>> = match self.family {
            Family::DistMult => vec![mul(h, r)],
            Family::ComplEx => {
                let (hr, hi, rr, ri) = (b(h, 0), b(h, 1), b(r, 0), b(r, 1));
                vec![
                    lin(&[(1.0, mul(&hr, &rr)), (-1.0, mul(&hi, &ri))]),
                    lin(&[(1.0, mul(&hr, &ri)), (1.0, mul(&hi, &rr))]),
                ]
            }
            Family::QMult => hamilton(&[b(h, 0), b(h, 1), b(h, 2), b(h, 3)], &[
                b(r, 0),
                b(r, 1),
                b(r, 2),
                b(r, 3),
            ]),
            Family::Keci => {
                let mut scalar = vec![(1.0, mul(&b(h, 0), &b(r, 0)))];
                for i in 1..k {
                    let sign = if i <= self.p { 1.0 } else { -1.0 };
                    scalar.push((sign, mul(&b(h, i), &b(r, i))));
                }
                let mut out = vec![lin(&scalar)];
                for i in 1..k {
                    out.push(lin(&[
                        (1.0, mul(&b(h, 0), &b(r, i))),
                        (1.0, mul(&b(h, i), &b(r, 0))),
                    ]));
                }
                out
            }
        };
        Ok(blocks.concat())
    }

    /// Row-wise [`ScorerConfig::compose`] on the tape for `[n, d]` inputs.
    pub fn compose_tape(&self, tape: &mut Tape<'_>, h: Var, r: Var) -> Result<Var> {
        let d = self.dim;
        for v in [h, r] {
            let s = tape.shape(v);
            if s.len() != 2 || s[1] != d {
                return Err(shape_err("compose", &[d], s));
            }
        }
        let k = self.blocks();
        let s = d / k;
        let mut hb = Vec::with_capacity(k);
        let mut rb = Vec::with_capacity(k);
        for i in 0..k {
            hb.push(if k == 1 { h } else { tape.slice_cols(h, i * s, s)? });
            rb.push(if k == 1 { r } else { tape.slice_cols(r, i * s, s)? });
        }
        let blocks: Vec<Var> = match self.family {
            Family::DistMult => vec![tape.mul(h, r)?],
            Family::ComplEx => {
                let rr = tape.mul(hb[0], rb[0])?;
                let ii = tape.mul(hb[1], rb[1])?;
                let ri = tape.mul(hb[0], rb[1])?;
                let ir = tape.mul(hb[1], rb[0])?;
                vec![tape.sub(rr, ii)?, tape.add(ri, ir)?]
            }
            Family::QMult => {
                // signs[c][(i, j)] of h_i r_j contributing to component c
                const TABLE: [[(usize, usize, f64); 4]; 4] = [
                    [(0, 0, 1.0), (1, 1, -1.0), (2, 2, -1.0), (3, 3, -1.0)],
                    [(0, 1, 1.0), (1, 0, 1.0), (2, 3, 1.0), (3, 2, -1.0)],
                    [(0, 2, 1.0), (1, 3, -1.0), (2, 0, 1.0), (3, 1, 1.0)],
                    [(0, 3, 1.0), (1, 2, 1.0), (2, 1, -1.0), (3, 0, 1.0)],
                ];
                let mut out = Vec::with_capacity(4);
                for row in TABLE {
                    let mut acc: Option<Var> = None;
                    for (i, j, sign) in row {
                        let term = tape.mul(hb[i], rb[j])?;
                        acc = Some(match acc {
                            None => term,
                            Some(a) if sign > 0.0 => tape.add(a, term)?,
                            Some(a) => tape.sub(a, term)?,
                        });
                    }
                    out.push(acc.expect("four terms"));
                }
                out
            }
            Family::Keci => {
                let mut scalar = tape.mul(hb[0], rb[0])?;
                for i in 1..k {
                    let term = tape.mul(hb[i], rb[i])?;
                    scalar = if i <= self.p {
                        tape.add(scalar, term)?
                    } else {
                        tape.sub(scalar, term)?
                    };
                }
                let mut out = vec![scalar];
                for i in 1..k {
                    let a = tape.mul(hb[0], rb[i])?;
                    let b = tape.mul(hb[i], rb[0])?;
                    out.push(tape.add(a, b)?);
                }
                out
            }
        };
        if blocks.len() == 1 {
            Ok(blocks[0])
        } else {
            tape.concat_cols(&blocks)
        }
    }
}

fn hamilton(h: &[Vec<f64>; 4], r: &[Vec<f64>; 4]) -> Vec<Vec<f64>> {
    let s = h[0].len();
    let mut out = vec![vec![0.0; s]; 4];
    for i in 0..s {
        let (a1, b1, c1, d1) = (h[0][i], h[1][i], h[2][i], h[3][i]);
        let (a2, b2, c2, d2) = (r[0][i], r[1][i], r[2][i], r[3][i]);
        out[0][i] = a1 * a2 - b1 * b2 - c1 * c2 - d1 * d2;
        out[1][i] = a1 * b2 + b1 * a2 + c1 * d2 - d1 * c2;
        out[2][i] = a1 * c2 - b1 * d2 + c1 * a2 + d1 * b2;
        out[3][i] = a1 * d2 + b1 * c2 - c1 * b2 + d1 * a2;
    }
    out
}

fn same_len(h: &[f64], r: &[f64], t: &[f64], multiple: usize) -> Result<usize> {
    if h.len() != r.len() || h.len() != t.len() {
        return Err(shape_err("score", &[h.len(), r.len()], &[t.len()]));
    }
    if multiple == 0 || h.len() % multiple != 0 {
        return Err(Error::Config(format!(
            "dimension {} not divisible by {multiple}",
            h.len()
        )));
    }
    Ok(h.len() / multiple)
}

/// `Σ hᵢ rᵢ tᵢ`.
pub fn score_distmult(h: &[f64], r: &[f64], t: &[f64]) -> Result<f64> {
    same_len(h, r, t, 1)?;
    Ok(h.iter().zip(r).zip(t).map(|((a, b), c)| a * b * c).sum())
}

/// `Re(⟨h, r, conj(t)⟩)` with real parts first, imaginary parts second.
pub fn score_complex(h: &[f64], r: &[f64], t: &[f64]) -> Result<f64> {
    let s = same_len(h, r, t, 2)?;
    Ok((0..s)
        .map(|i| {
            let (hr, hi) = (h[i], h[s + i]);
            let (rr, ri) = (r[i], r[s + i]);
            let (tr, ti) = (t[i], t[s + i]);
            hr * rr * tr + hr * ri * ti + hi * rr * ti - hi * ri * tr
        })
        .sum())
}

/// Inner product of the blockwise Hamilton product `h ⊗ r` with `t`.
pub fn score_qmult(h: &[f64], r: &[f64], t: &[f64]) -> Result<f64> {
    let s = same_len(h, r, t, 4)?;
    let blocks = |v: &[f64]| -> [Vec<f64>; 4] {
        [0, 1, 2, 3].map(|i| v[i * s..(i + 1) * s].to_vec())
    };
    let prod = hamilton(&blocks(h), &blocks(r));
    Ok(prod
        .iter()
        .enumerate()
        .map(|(c, block)| {
            block
                .iter()
                .zip(&t[c * s..(c + 1) * s])
                .map(|(x, y)| x * y)
                .sum::<f64>()
        })
        .sum())
}

/// Grade-≤1 part of the Clifford product in `Cl_{p,q}` paired with `t`.
pub fn score_keci(h: &[f64], r: &[f64], t: &[f64], p: usize, q: usize) -> Result<f64> {
    let k = p + q + 1;
    let s = same_len(h, r, t, k)?;
    let at = |v: &[f64], block: usize, i: usize| v[block * s + i];
    let mut total = 0.0;
    for i in 0..s {
        let mut scalar = at(h, 0, i) * at(r, 0, i);
        for b in 1..=p {
            scalar += at(h, b, i) * at(r, b, i);
        }
        for b in p + 1..k {
            scalar -= at(h, b, i) * at(r, b, i);
        }
        total += scalar * at(t, 0, i);
        for b in 1..k {
            total += (at(h, 0, i) * at(r, b, i) + at(h, b, i) * at(r, 0, i)) * at(t, b, i);
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut impl Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn distmult_examples() {
        assert_eq!(score_distmult(&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(score_distmult(&[2.0, 3.0], &[1.0, -1.0], &[1.0, 1.0]).unwrap(), -1.0);
        assert!(score_distmult(&[1.0], &[1.0, 2.0], &[1.0]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (h, r, t) = (rand_vec(&mut rng, 6), rand_vec(&mut rng, 6), rand_vec(&mut rng, 6));
        assert_eq!(
            score_distmult(&h, &r, &t).unwrap(),
            score_distmult(&t, &r, &h).unwrap()
        );
    }

    #[test]
    fn complex_examples() {
        // (1+i)(1+i)conj(1+i) = 2i(1-i) = 2 + 2i
        assert_eq!(score_complex(&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]).unwrap(), 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (h, r, t) = (rand_vec(&mut rng, 8), rand_vec(&mut rng, 8), rand_vec(&mut rng, 8));
        let real = |v: &[f64]| [&v[..4], &[0.0; 4][..]].concat();
        assert!(
            (score_complex(&real(&h), &real(&r), &real(&t)).unwrap()
                - score_distmult(&h[..4], &r[..4], &t[..4]).unwrap())
            .abs()
                < 1e-12
        );
        let imag_r = [&[0.0; 4][..], &r[4..]].concat();
        let a = score_complex(&h, &imag_r, &t).unwrap();
        let b = score_complex(&t, &imag_r, &h).unwrap();
        assert!((a + b).abs() < 1e-12);
        assert!(score_complex(&[1.0], &[1.0], &[1.0]).is_err());
    }

    #[test]
    fn qmult_examples() {
        let i = [0.0, 1.0, 0.0, 0.0];
        let j = [0.0, 0.0, 1.0, 0.0];
        let k = [0.0, 0.0, 0.0, 1.0];
        assert_eq!(score_qmult(&i, &j, &k).unwrap(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (h, t) = (rand_vec(&mut rng, 8), rand_vec(&mut rng, 8));
        let one = [1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let dot: f64 = h.iter().zip(&t).map(|(a, b)| a * b).sum();
        assert!((score_qmult(&h, &one, &t).unwrap() - dot).abs() < 1e-12);
        assert!(score_qmult(&[1.0; 6], &[1.0; 6], &[1.0; 6]).is_err());
    }

    #[test]
    fn keci_term_expansion() {
        // h = (0, v), r = (0, w), t = (u, 0), q = 1: −(v∘w)·u
        let (v, w, u) = (0.7, -1.3, 2.0);
        let s = score_keci(&[0.0, v], &[0.0, w], &[u, 0.0], 0, 1).unwrap();
        assert!((s + v * w * u).abs() < 1e-15);
        let s = score_keci(&[0.0, v], &[0.0, w], &[u, 0.0], 1, 0).unwrap();
        assert!((s - v * w * u).abs() < 1e-15);
        assert!(score_keci(&[1.0; 4], &[1.0; 4], &[1.0; 4], 1, 1).is_err());
    }

    #[test]
    fn config_validates_dimension() {
        assert!(ScorerConfig::new(Family::ComplEx, 3, 0, 0).is_err());
        assert!(ScorerConfig::new(Family::QMult, 6, 0, 0).is_err());
        assert!(ScorerConfig::new(Family::Keci, 30, 1, 2).is_err());
        assert!(ScorerConfig::new(Family::Keci, 33, 1, 1).is_ok());
        assert!(ScorerConfig::new(Family::DistMult, 0, 0, 0).is_err());
        assert_eq!("keci".parse::<Family>().unwrap(), Family::Keci);
    }

    #[test]
    fn compose_matches_direct_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (family, p, q) in [
            (Family::DistMult, 0, 0),
            (Family::ComplEx, 0, 0),
            (Family::QMult, 0, 0),
            (Family::Keci, 0, 1),
            (Family::Keci, 2, 1),
            (Family::Keci, 1, 0),
        ] {
            let d = 12;
            let cfg = ScorerConfig::new(family, d, p, q).unwrap();
            for _ in 0..50 {
                let (h, r, t) = (rand_vec(&mut rng, d), rand_vec(&mut rng, d), rand_vec(&mut rng, d));
                let c = cfg.compose(&h, &r).unwrap();
                let via: f64 = c.iter().zip(&t).map(|(a, b)| a * b).sum();
                assert!((via - cfg.score(&h, &r, &t).unwrap()).abs() < 1e-12, "{family}");

                let mut tape = Tape::new();
                let hv = tape.constant(Tensor::new(&[1, d], h.clone()).unwrap());
                let rv = tape.constant(Tensor::new(&[1, d], r.clone()).unwrap());
                let cv = cfg.compose_tape(&mut tape, hv, rv).unwrap();
                for (a, b) in tape.value(cv).data().iter().zip(&c) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn trilinear_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for family in [Family::DistMult, Family::ComplEx, Family::QMult, Family::Keci] {
            let cfg = ScorerConfig::new(family, 8, 0, 1).unwrap();
            let (h, r, t) = (rand_vec(&mut rng, 8), rand_vec(&mut rng, 8), rand_vec(&mut rng, 8));
            let alpha = -2.5;
            let ah: Vec<f64> = h.iter().map(|x| alpha * x).collect();
            let base = cfg.score(&h, &r, &t).unwrap();
            assert!((cfg.score(&ah, &r, &t).unwrap() - alpha * base).abs() < 1e-12);
        }
    }
}
