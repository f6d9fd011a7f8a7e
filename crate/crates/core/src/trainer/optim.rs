use crate::segnet::Param;

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub buffers: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: &[Param]) -> Self {
        Sgd {
            buffers: params.iter().map(|p| vec![0.0; p.values.len()]).collect(),
        }
    }

    /// `buf <- momentum * buf + grad + wd * param; param <- param - lr * buf`.
    pub fn step(
        &mut self,
        params: &mut [Param],
        grads: &[Vec<f64>],
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) {
        sgd_step(params, grads, &mut self.buffers, lr, momentum, weight_decay);
    }
}

pub fn sgd_step(
    params: &mut [Param],
    grads: &[Vec<f64>],
    buffers: &mut [Vec<f64>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for ((p, g), buf) in params.iter_mut().zip(grads).zip(buffers.iter_mut()) {
        for ((w, &gv), b) in p.values.iter_mut().zip(g).zip(buf.iter_mut()) {
            *b = momentum * *b + gv + weight_decay * *w;
            *w -= lr * *b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Vec<Param> {
        vec![Param {
            name: "w".into(),
            shape: vec![1],
            values: vec![v],
        }]
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = scalar(0.7);
        let mut opt = Sgd::new(&p);
        opt.step(&mut p, &[vec![0.0]], 0.1, 0.9, 0.0);
        assert_eq!(p[0].values[0], 0.7);
    }

    #[test]
    fn plain_step() {
        let mut p = scalar(1.0);
        let mut opt = Sgd::new(&p);
        opt.step(&mut p, &[vec![1.0]], 0.1, 0.0, 0.0);
        assert_eq!(p[0].values[0], 0.9);
    }

    #[test]
    fn momentum_matches_recurrence() {
        let (lr, mu, wd, g) = (0.05, 0.9, 1e-4, 0.3);
        let mut p = scalar(1.0);
        let mut opt = Sgd::new(&p);
        let (mut w, mut b) = (1.0f64, 0.0f64);
        for _ in 0..2 {
            opt.step(&mut p, &[vec![g]], lr, mu, wd);
            b = mu * b + g + wd * w;
            w -= lr * b;
        }
        assert_eq!(p[0].values[0], w);
        assert_eq!(opt.buffers[0][0], b);
    }
}
