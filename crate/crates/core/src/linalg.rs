//! Small dense symmetric solves for GLM / GLS normal equations.

/// Row-major square matrix.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct SquareMatrix {
    pub k: usize,
    pub a: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(k: usize) -> Self {
        Self {
            k,
            a: vec![0.0; k * k],
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.k + j]
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        self.a[i * self.k + j] += v;
    }
}

/// Lower Cholesky factor of an SPD matrix.
pub(crate) struct Cholesky {
    k: usize,
    l: Vec<f64>,
}

/// Columns whose pivot collapsed relative to their original diagonal.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct RankDeficiency {
    pub columns: Vec<usize>,
}

const PIVOT_TOL: f64 = 1e-10;

impl Cholesky {
    pub fn factor(m: &SquareMatrix) -> Result<Self, RankDeficiency> {
        let k = m.k;
        let mut l = vec![0.0; k * k];
        let mut bad = Vec::new();
        for j in 0..k {
            let mut d = m.at(j, j);
            for p in 0..j {
                d -= l[j * k + p] * l[j * k + p];
            }
            let scale = m.at(j, j).abs().max(f64::MIN_POSITIVE);
            if !(d > PIVOT_TOL * scale) || m.at(j, j) <= 0.0 {
                bad.push(j);
                continue;
            }
            let djj = d.sqrt();
            l[j * k + j] = djj;
            for i in j + 1..k {
                let mut s = m.at(i, j);
                for p in 0..j {
                    s -= l[i * k + p] * l[j * k + p];
                }
                l[i * k + j] = s / djj;
            }
        }
        if bad.is_empty() {
            Ok(Self { k, l })
        } else {
            Err(RankDeficiency { columns: bad })
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let k = self.k;
        let mut z = b.to_vec();
        for i in 0..k {
            let mut s = z[i];
            for p in 0..i {
                s -= self.l[i * k + p] * z[p];
            }
            z[i] = s / self.l[i * k + i];
        }
        for i in (0..k).rev() {
            let mut s = z[i];
            for p in i + 1..k {
                s -= self.l[p * k + i] * z[p];
            }
            z[i] = s / self.l[i * k + i];
        }
        z
    }
}
