use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{dense_forward, fan_in_bound, ops, ParamId, ParamStore, Tape, Tensor2D, Var};

const NAMES: [&str; 10] = [
    "denoiser.in.weight",
    "denoiser.in.bias",
    "denoiser.fc1.weight",
    "denoiser.fc1.bias",
    "denoiser.fc2.weight",
    "denoiser.fc2.bias",
    "denoiser.fc3.weight",
    "denoiser.fc3.bias",
    "denoiser.out.weight",
    "denoiser.out.bias",
];

/// Scale applied to the noisy latent before the input layer.
pub fn input_scale(t: f64) -> f64 {
    1.0 / (t * t + 1.0).sqrt()
}

/// Output mixing `(skip, out)` with `ε̂ = skip·z_t + out·F(z_t, t)`.
/// With `F = 0` this is the exact noise predictor for unit-Gaussian data,
/// and network error is damped by `1/√(t²+1)` at high noise.
pub fn output_mix(t: f64) -> (f64, f64) {
    let q = t * t + 1.0;
    (t / q, 1.0 / q.sqrt())
}

/// Sinusoidal embedding of `ln(t)/4` with `width` channels: the first half
/// holds cosines, the second half sines, at frequencies
/// `10000^(-k/(half-1))` for `k = 0..half`. An odd trailing channel is zero.
pub fn time_embedding(t: f64, width: usize) -> Vec<f64> {
    let half = width / 2;
    let u = t.ln() / 4.0;
    let mut out = vec![0.0; width];
    for k in 0..half {
        let freq = if half > 1 {
            10000f64.powf(-(k as f64) / (half - 1) as f64)
        } else {
            1.0
        };
        out[k] = (u * freq).cos();
        out[half + k] = (u * freq).sin();
    }
    out
}

/// Noise predictor `Md → h → 2h → 2h → h → Md` with SiLU activations and an
/// additive time embedding after the input layer.
#[derive(Clone, Debug)]
pub struct DenoiserMlp {
    latent_dim: usize,
    hidden: usize,
    ids: [ParamId; 10],
}

impl DenoiserMlp {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, latent_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let shapes = Self::shapes(latent_dim, hidden);
        let ids = std::array::from_fn(|i| {
            let (rows, cols) = shapes[i];
            // weights and biases share the fan-in of their layer
            let fan_in = if i % 2 == 0 { rows } else { shapes[i - 1].0 };
            store.add_uniform(NAMES[i], rows, cols, fan_in_bound(fan_in), rng)
        });
        Self {
            latent_dim,
            hidden,
            ids,
        }
    }

    pub fn bind(store: &ParamStore, latent_dim: usize, hidden: usize) -> Result<Self> {
        let shapes = Self::shapes(latent_dim, hidden);
        let mut ids = [ParamId(0); 10];
        for (i, name) in NAMES.iter().enumerate() {
            let id = store
                .id_of(name)
                .ok_or_else(|| Error::Integrity(format!("missing parameter {name}")))?;
            if store.get(id).shape() != shapes[i] {
                return Err(Error::Integrity(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    store.get(id).shape(),
                    shapes[i]
                )));
            }
            ids[i] = id;
        }
        Ok(Self {
            latent_dim,
            hidden,
            ids,
        })
    }

    fn shapes(md: usize, h: usize) -> [(usize, usize); 10] {
        [
            (md, h),
            (1, h),
            (h, 2 * h),
            (1, 2 * h),
            (2 * h, 2 * h),
            (1, 2 * h),
            (2 * h, h),
            (1, h),
            (h, md),
            (1, md),
        ]
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Parameter handle of the output layer weight and bias.
    pub fn output_layer(&self) -> (ParamId, ParamId) {
        (self.ids[8], self.ids[9])
    }

    fn inputs(&self, z: &Tensor2D, t: &[f64]) -> Result<(Tensor2D, Tensor2D)> {
        if z.cols() != self.latent_dim || z.rows() != t.len() {
            return Err(Error::dim(format!(
                "denoiser input {:?} with {} times, latent width {}",
                z.shape(),
                t.len(),
                self.latent_dim
            )));
        }
        if let Some(bad) = t.iter().find(|&&t| !(t > 0.0 && t.is_finite())) {
            return Err(Error::Domain(format!("denoiser time must be positive, got {bad}")));
        }
        let mut x = z.clone();
        let mut emb = Tensor2D::zeros(t.len(), self.hidden);
        for (r, &tr) in t.iter().enumerate() {
            let c = input_scale(tr);
            x.row_mut(r).iter_mut().for_each(|v| *v *= c);
            emb.row_mut(r).copy_from_slice(&time_embedding(tr, self.hidden));
        }
        Ok((x, emb))
    }

    /// Records `ε̂` for a batch of noisy latents with per-row times.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, z: &Tensor2D, t: &[f64]) -> Result<Var> {
        let (x, emb) = self.inputs(z, t)?;
        let x = tape.constant(x);
        let emb = tape.constant(emb);
        let p: Vec<Var> = self.ids.iter().map(|&id| tape.param(store, id)).collect();
        let h = tape.dense(x, p[0], p[1])?;
        let mut h = tape.add(h, emb)?;
        for l in 1..4 {
            let a = tape.dense(h, p[2 * l], p[2 * l + 1])?;
            h = tape.silu(a);
        }
        tape.dense(h, p[8], p[9])
    }

    /// `ε̂` without recording gradients.
    pub fn predict(&self, store: &ParamStore, z: &Tensor2D, t: &[f64]) -> Result<Tensor2D> {
        let (x, emb) = self.inputs(z, t)?;
        let p = |i: usize| store.get(self.ids[i]);
        let mut h = dense_forward(&x, p(0), p(1).data())?;
        h.add_assign(&emb)?;
        for l in 1..4 {
            h = dense_forward(&h, p(2 * l), p(2 * l + 1).data())?.map(ops::silu);
        }
        let out = dense_forward(&h, p(8), p(9).data())?;
        if !out.is_finite() {
            return Err(Error::Numeric("denoiser produced a non-finite output".into()));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(md: usize, h: usize) -> (ParamStore, DenoiserMlp) {
        let mut store = ParamStore::new();
        let n = DenoiserMlp::init(&mut store, md, h, &mut ChaCha8Rng::seed_from_u64(4));
        (store, n)
    }

    #[test]
    fn embedding_ladder() {
        let e = time_embedding(1.0, 6);
        assert_eq!(e, vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        let t = 0.3f64;
        let e = time_embedding(t, 5);
        let u = t.ln() / 4.0;
        assert!((e[0] - u.cos()).abs() < 1e-15);
        assert!((e[1] - (u * 1e-4).cos()).abs() < 1e-15);
        assert!((e[3] - (u * 1e-4).sin()).abs() < 1e-15);
        assert_eq!(e[4], 0.0);
    }

    #[test]
    fn zero_head_predicts_zero() {
        let (mut store, n) = net(3, 8);
        let (w, b) = n.output_layer();
        *store.get_mut(w) = Tensor2D::zeros(8, 3);
        *store.get_mut(b) = Tensor2D::zeros(1, 3);
        let out = n.predict(&store, &Tensor2D::filled(2, 3, 7.0), &[0.5, 40.0]).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_trace_of_tiny_net() {
        let (mut store, n) = net(2, 4);
        let set = |store: &mut ParamStore, name: &str, rows: usize, cols: usize, f: &dyn Fn(usize) -> f64| {
            let id = store.id_of(name).unwrap();
            *store.get_mut(id) = Tensor2D::new(rows, cols, (0..rows * cols).map(f).collect()).unwrap();
        };
        set(&mut store, "denoiser.in.weight", 2, 4, &|i| 0.1 * i as f64);
        set(&mut store, "denoiser.in.bias", 1, 4, &|_| 0.0);
        set(&mut store, "denoiser.fc1.weight", 4, 8, &|i| {
            if i % 9 == 0 {
                1.0
            } else {
                0.0
            }
        });
        set(&mut store, "denoiser.fc1.bias", 1, 8, &|_| 0.0);
        set(&mut store, "denoiser.fc2.weight", 8, 8, &|i| {
            if i % 9 == 0 {
                1.0
            } else {
                0.0
            }
        });
        set(&mut store, "denoiser.fc2.bias", 1, 8, &|_| 0.0);
        set(&mut store, "denoiser.fc3.weight", 8, 4, &|i| {
            if i % 5 == 0 {
                1.0
            } else {
                0.0
            }
        });
        set(&mut store, "denoiser.fc3.bias", 1, 4, &|_| 0.0);
        set(&mut store, "denoiser.out.weight", 4, 2, &|i| {
            if i < 2 {
                1.0
            } else {
                0.0
            }
        });
        set(&mut store, "denoiser.out.bias", 1, 2, &|_| 0.5);

        // t = 1: input scale 1/√2, embedding [cos 0, cos 0, sin 0, sin 0]
        let z = [1.0, 2.0];
        let c = 1.0 / 2f64.sqrt();
        let h0 = [
            c * (z[0] * 0.0 + z[1] * 0.4) + 1.0,
            c * (z[0] * 0.1 + z[1] * 0.5) + 1.0,
            c * (z[0] * 0.2 + z[1] * 0.6),
            c * (z[0] * 0.3 + z[1] * 0.7),
        ];
        let silu = |x: f64| x / (1.0 + (-x).exp());
        // identity-like layers pass channel 0 (and channel 1 up to fc3)
        let a = silu(silu(silu(h0[0])));
        let expected = [a + 0.5, a + 0.5];
        let out = n.predict(&store, &Tensor2D::row_vector(z.to_vec()), &[1.0]).unwrap();
        for (o, e) in out.data().iter().zip(expected) {
            assert!((o - e).abs() < 1e-14, "{o} vs {e}");
        }
    }

    #[test]
    fn tape_and_plain_paths_agree() {
        let (store, n) = net(4, 6);
        let z = Tensor2D::new(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin() * 3.0).collect()).unwrap();
        let t = [0.01, 1.3, 60.0];
        let mut tape = Tape::new();
        let v = n.forward(&mut tape, &store, &z, &t).unwrap();
        let plain = n.predict(&store, &z, &t).unwrap();
        assert!(tape.value(v).max_abs_diff(&plain) < 1e-13);
        assert_eq!(plain, n.predict(&store, &z, &t).unwrap());
    }

    #[test]
    fn rejects_non_positive_time() {
        let (store, n) = net(2, 4);
        assert!(matches!(
            n.predict(&store, &Tensor2D::zeros(1, 2), &[0.0]),
            Err(Error::Domain(_))
        ));
    }
}
