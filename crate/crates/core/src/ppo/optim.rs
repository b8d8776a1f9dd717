//! Adam over flat parameter views.

use crate::nn::ByteReader;
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(num_params: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One descent step. Panics if the parameter count changed.
    pub fn step<'a, 'b>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut f64>,
        grads: impl IntoIterator<Item = &'b f64>,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut n = 0;
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            n += 1;
        }
        assert_eq!(n, self.m.len(), "parameter count changed under the optimizer");
    }

    pub fn write_bytes(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.m.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.t.to_le_bytes());
        for x in [self.learning_rate, self.beta1, self.beta2, self.eps] {
            out.extend_from_slice(&x.to_bits().to_le_bytes());
        }
        for x in self.m.iter().chain(&self.v) {
            out.extend_from_slice(&x.to_bits().to_le_bytes());
        }
    }

    pub(crate) fn read_bytes(r: &mut ByteReader<'_>) -> Result<Self> {
        let n = r.u64()? as usize;
        let t = r.u64()?;
        let learning_rate = r.f64()?;
        let beta1 = r.f64()?;
        let beta2 = r.f64()?;
        let eps = r.f64()?;
        let m = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let v = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        Ok(Self { learning_rate, beta1, beta2, eps, m, v, t })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..500 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            opt.step(x.iter_mut(), g.iter());
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn zero_gradient_leaves_params_bitwise() {
        let mut x = vec![0.123, -4.5];
        let before = x.clone();
        let mut opt = Adam::new(2, 0.1);
        opt.step(x.iter_mut(), [0.0, 0.0].iter());
        assert_eq!(x, before);
    }

    #[test]
    fn state_round_trip() {
        let mut x = vec![1.0, 2.0, 3.0];
        let mut opt = Adam::new(3, 0.01);
        opt.step(x.iter_mut(), [0.5, -0.5, 1.0].iter());
        let mut buf = Vec::new();
        opt.write_bytes(&mut buf);
        let back = Adam::read_bytes(&mut ByteReader::new(&buf)).unwrap();
        assert_eq!(back, opt);
    }
}
