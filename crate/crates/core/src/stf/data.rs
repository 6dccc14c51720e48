//! Synthetic sequence classification.
//!
//! Each token is drawn around one of `classes` cluster centres. Exactly one
//! position carries an additive marker vector, and the label is the cluster of
//! that marked token, so the model has to find it among the distractors. All
//! tokens also carry a shared offset that gives queries a constant component
//! to attend with.

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: DenseMatrix,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub seq: usize,
    pub d: usize,
    centres: Vec<Vec<f64>>,
    marker: Vec<f64>,
    offset: Vec<f64>,
    pub noise: f64,
}

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

fn remove_component(v: &mut [f64], dir: &[f64]) {
    let p: f64 = v.iter().zip(dir).map(|(a, b)| a * b).sum();
    v.iter_mut().zip(dir).for_each(|(a, b)| *a -= p * b);
}

impl SyntheticTask {
    pub fn new(seq: usize, d: usize, classes: usize, noise: f64, rng: &mut Rng) -> Result<Self> {
        if seq < 2 || d < 3 || classes < 2 {
            return Err(Error::InvalidArgument(
                "task needs seq >= 2, d >= 3 and at least two classes".into(),
            ));
        }
        let gauss = |rng: &mut Rng| (0..d).map(|_| rng.normal()).collect::<Vec<f64>>();
        let mut marker = gauss(rng);
        unit(&mut marker);
        let mut offset = gauss(rng);
        remove_component(&mut offset, &marker);
        unit(&mut offset);
        let centres = (0..classes)
            .map(|_| {
                let mut c = gauss(rng);
                remove_component(&mut c, &marker);
                remove_component(&mut c, &offset);
                unit(&mut c);
                c.iter_mut().for_each(|v| *v *= 2.0);
                c
            })
            .collect();
        marker.iter_mut().for_each(|v| *v *= 3.0);
        offset.iter_mut().for_each(|v| *v *= 2.0);
        Ok(Self {
            seq,
            d,
            centres,
            marker,
            offset,
            noise,
        })
    }

    pub fn classes(&self) -> usize {
        self.centres.len()
    }

    pub fn sample(&self, rng: &mut Rng) -> Sample {
        let marked = rng.below(self.seq);
        let mut label = 0;
        let mut x = DenseMatrix::zeros(self.seq, self.d);
        for t in 0..self.seq {
            let c = rng.below(self.centres.len());
            if t == marked {
                label = c;
            }
            for (j, v) in x.row_mut(t).iter_mut().enumerate() {
                *v = self.centres[c][j] + self.offset[j] + self.noise * rng.normal();
                if t == marked {
                    *v += self.marker[j];
                }
            }
        }
        Sample { x, label }
    }

    pub fn generate(&self, n: usize, rng: &mut Rng) -> Vec<Sample> {
        (0..n).map(|_| self.sample(rng)).collect()
    }
}
