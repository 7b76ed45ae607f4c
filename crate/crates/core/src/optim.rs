//! AdamW with decoupled weight decay.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, Default)]
pub struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Moments {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// Zeroes the moments of `range` (used when a codeword is re-seeded).
    pub fn reset_range(&mut self, range: std::ops::Range<usize>) {
        self.m[range.clone()].iter_mut().for_each(|x| *x = 0.0);
        self.v[range].iter_mut().for_each(|x| *x = 0.0);
    }

    pub fn step(&mut self, opt: &AdamW, params: &mut [f64], grads: &[f64], decay: bool) {
        assert_eq!(params.len(), grads.len());
        if self.m.len() != params.len() {
            *self = Self::new(params.len());
        }
        self.t += 1;
        let bc1 = 1.0 - opt.beta1.powi(self.t as i32);
        let bc2 = 1.0 - opt.beta2.powi(self.t as i32);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if decay && opt.weight_decay > 0.0 {
                *p -= opt.lr * opt.weight_decay * *p;
            }
            *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
            *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
        }
    }
}
