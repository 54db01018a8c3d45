//! Cubic 3D FFTs built from batched 1D transforms, with optional pruning when
//! the input (inverse) or the wanted output (forward) lives on a small subset
//! of frequencies per axis.

use std::sync::Arc;

use num_complex::Complex64 as C64;
use rustfft::{Fft, FftPlanner};

pub struct Fft3 {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

/// Lines processed per batched 1D call.
const BATCH: usize = 64;

impl Fft3 {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::<f64>::new();
        Fft3 {
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.n * self.n * self.n
    }

    /// Grid index of the integer frequency `g` (any sign).
    pub fn wrap(&self, g: i64) -> usize {
        g.rem_euclid(self.n as i64) as usize
    }

    /// Unnormalized transform along `axis` for every line whose two other
    /// coordinates lie in `sel_a` × `sel_b` (ordered as the remaining axes).
    fn pass(&self, data: &mut [C64], axis: usize, sel_a: &[usize], sel_b: &[usize], forward: bool) {
        let n = self.n;
        let plan = if forward { &self.fwd } else { &self.inv };
        let stride = [n * n, n, 1][axis];
        let (sa, sb) = match axis {
            0 => (n, 1),
            1 => (n * n, 1),
            _ => (n * n, n),
        };
        let mut scratch = vec![C64::new(0.0, 0.0); plan.get_inplace_scratch_len()];
        if axis == 2 {
            // contiguous lines
            for &a in sel_a {
                for &b in sel_b {
                    let base = a * sa + b * sb;
                    plan.process_with_scratch(&mut data[base..base + n], &mut scratch);
                }
            }
            return;
        }
        let lines: Vec<usize> = sel_a
            .iter()
            .flat_map(|&a| sel_b.iter().map(move |&b| a * sa + b * sb))
            .collect();
        let mut buf = vec![C64::new(0.0, 0.0); BATCH * n];
        for chunk in lines.chunks(BATCH) {
            for (l, &base) in chunk.iter().enumerate() {
                let dst = &mut buf[l * n..(l + 1) * n];
                for (t, d) in dst.iter_mut().enumerate() {
                    *d = data[base + t * stride];
                }
            }
            let used = chunk.len() * n;
            plan.process_with_scratch(&mut buf[..used], &mut scratch);
            for (l, &base) in chunk.iter().enumerate() {
                let src = &buf[l * n..(l + 1) * n];
                for (t, s) in src.iter().enumerate() {
                    data[base + t * stride] = *s;
                }
            }
        }
    }

    /// f(r) = Σ_g c(g) e^{+2πi g·r/n}, assuming `data` is zero outside
    /// `support`³ (grid indices).
    pub fn inverse_pruned(&self, data: &mut [C64], support: &[usize]) {
        let all: Vec<usize> = (0..self.n).collect();
        self.pass(data, 2, support, support, false);
        self.pass(data, 1, support, &all, false);
        self.pass(data, 0, &all, &all, false);
    }

    /// Unnormalized forward transform, exact only on `wanted`³ (grid indices).
    pub fn forward_pruned(&self, data: &mut [C64], wanted: &[usize]) {
        let all: Vec<usize> = (0..self.n).collect();
        self.pass(data, 0, &all, &all, true);
        self.pass(data, 1, wanted, &all, true);
        self.pass(data, 2, wanted, wanted, true);
    }

    pub fn inverse(&self, data: &mut [C64]) {
        let all: Vec<usize> = (0..self.n).collect();
        self.inverse_pruned(data, &all);
    }

    pub fn forward(&self, data: &mut [C64]) {
        let all: Vec<usize> = (0..self.n).collect();
        self.forward_pruned(data, &all);
    }
}
