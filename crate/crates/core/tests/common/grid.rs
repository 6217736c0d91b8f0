//! Exact posterior moments of a scalar Poisson state-space model by
//! forward-backward recursion on a dense grid.

pub struct ScalarPoisson {
    pub a: f64,
    /// Input drive `b u_t` per bin.
    pub drive: Vec<f64>,
    /// Loadings and offsets of the `p` neurons.
    pub c: Vec<f64>,
    pub d: Vec<f64>,
    /// `T x p` counts.
    pub counts: Vec<Vec<u32>>,
}

pub struct GridMoments {
    /// Filtered `p(x_t | y_{1:t})` moments, `t = 0..=T`.
    pub filt_mean: Vec<f64>,
    pub filt_var: Vec<f64>,
    pub smooth_mean: Vec<f64>,
    pub smooth_var: Vec<f64>,
    /// `Cov(x_t, x_{t+1} | y)`, `t = 0..T`.
    pub smooth_cross: Vec<f64>,
}

pub fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn log_normal_pdf(x: f64, mean: f64) -> f64 {
    -0.5 * (x - mean).powi(2) - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

fn normalize(w: &mut [f64]) {
    let m = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in w.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in w.iter_mut() {
        *v /= s;
    }
}

fn moments(xs: &[f64], w: &[f64]) -> (f64, f64) {
    let mean: f64 = xs.iter().zip(w).map(|(x, p)| x * p).sum();
    let var: f64 = xs.iter().zip(w).map(|(x, p)| (x - mean).powi(2) * p).sum();
    (mean, var)
}

impl ScalarPoisson {
    fn log_lik(&self, t: usize, x: f64) -> f64 {
        self.c
            .iter()
            .zip(&self.d)
            .zip(&self.counts[t])
            .map(|((c, d), &y)| {
                let eta = c * x + d;
                y as f64 * eta - eta.exp()
            })
            .sum()
    }

    pub fn posterior_moments(&self, xs: &[f64]) -> GridMoments {
        let n = xs.len();
        let t_len = self.counts.len();
        // log transition kernel for each step is log N(x' ; a x + drive_t, 1)
        let mut alpha: Vec<Vec<f64>> = Vec::with_capacity(t_len + 1);
        let mut a0: Vec<f64> = xs.iter().map(|&x| log_normal_pdf(x, 0.0)).collect();
        normalize(&mut a0);
        alpha.push(a0);
        for t in 0..t_len {
            let prev = &alpha[t];
            let mut next = vec![0.0; n];
            for (j, &xn) in xs.iter().enumerate() {
                let mut s = 0.0;
                for (i, &xp) in xs.iter().enumerate() {
                    if prev[i] > 0.0 {
                        s += prev[i] * log_normal_pdf(xn, self.a * xp + self.drive[t]).exp();
                    }
                }
                next[j] = s.max(f64::MIN_POSITIVE).ln() + self.log_lik(t, xn);
            }
            normalize(&mut next);
            alpha.push(next);
        }
        // β_t(x) ∝ ∫ N(x' ; a x + drive, 1) lik_{t+1}(x') β_{t+1}(x') dx'
        let mut beta = vec![vec![1.0 / n as f64; n]; t_len + 1];
        for t in (0..t_len).rev() {
            let mut lw: Vec<f64> = xs.iter().map(|&x| self.log_lik(t, x)).collect();
            let m = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for (v, b) in lw.iter_mut().zip(&beta[t + 1]) {
                *v = (*v - m).exp() * b;
            }
            let mut cur = vec![0.0; n];
            for (i, &xp) in xs.iter().enumerate() {
                let mut s = 0.0;
                for (j, &xn) in xs.iter().enumerate() {
                    if lw[j] > 0.0 {
                        s += lw[j] * log_normal_pdf(xn, self.a * xp + self.drive[t]).exp();
                    }
                }
                cur[i] = s;
            }
            let total: f64 = cur.iter().sum();
            for v in cur.iter_mut() {
                *v /= total;
            }
            beta[t] = cur;
        }
        let mut out = GridMoments {
            filt_mean: Vec::new(),
            filt_var: Vec::new(),
            smooth_mean: Vec::new(),
            smooth_var: Vec::new(),
            smooth_cross: Vec::new(),
        };
        for t in 0..=t_len {
            let (m, v) = moments(xs, &alpha[t]);
            out.filt_mean.push(m);
            out.filt_var.push(v);
            let mut post: Vec<f64> = alpha[t].iter().zip(&beta[t]).map(|(a, b)| a * b).collect();
            let s: f64 = post.iter().sum();
            post.iter_mut().for_each(|v| *v /= s);
            let (m, v) = moments(xs, &post);
            out.smooth_mean.push(m);
            out.smooth_var.push(v);
        }
        for t in 0..t_len {
            let mut total = 0.0;
            let mut sum_xy = 0.0;
            let ll: Vec<f64> = xs.iter().map(|&x| self.log_lik(t, x)).collect();
            let m = ll.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lw: Vec<f64> = ll.iter().zip(&beta[t + 1]).map(|(l, b)| (l - m).exp() * b).collect();
            for (i, &xp) in xs.iter().enumerate() {
                if alpha[t][i] == 0.0 {
                    continue;
                }
                for (j, &xn) in xs.iter().enumerate() {
                    let w = alpha[t][i] * log_normal_pdf(xn, self.a * xp + self.drive[t]).exp() * lw[j];
                    total += w;
                    sum_xy += w * xp * xn;
                }
            }
            out.smooth_cross
                .push(sum_xy / total - out.smooth_mean[t] * out.smooth_mean[t + 1]);
        }
        out
    }
}
