use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Hyperparams;
use crate::tensor::{Real, Tensor};

/// Two-layer perceptron `w2 · silu(w1 · x + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<P> {
    pub w1: P,
    pub b1: P,
    pub w2: P,
    pub b2: P,
}

/// Node-level update weights. `Nmu` is the gated update over
/// `m ⊕ ‖V m⃗‖`; `Painn` is the residual PaiNN-style update used by the
/// vanilla ablation.
#[derive(Debug, Clone, PartialEq)]
pub enum UpdateParams<P> {
    Nmu {
        w_s: P,
        w_g: P,
        w_h2: P,
        u: P,
        v: P,
    },
    Painn {
        u: P,
        v: P,
        mlp: Mlp<P>,
    },
}

/// Global distribute (`w_dist`, `mlp_dist`) and aggregate (`w_agg`,
/// `mlp_agg`) weights of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalParams<P> {
    pub w_dist: P,
    pub mlp_dist: Mlp<P>,
    pub w_agg: P,
    pub mlp_agg: Mlp<P>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<P> {
    pub w_h: P,
    pub w_u: P,
    pub w_v: P,
    /// `[F, K]` maps from Gaussian basis values to per-feature filters.
    pub rbf_h: P,
    pub rbf_u: P,
    pub rbf_v: P,
    pub update: UpdateParams<P>,
    pub global: Option<GlobalParams<P>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReadoutParams<P> {
    pub mlp_energy: Mlp<P>,
    /// `[1, F]` contraction of the F output vectors into one force.
    pub w_f: P,
}

/// Every trainable tensor of the network, generic over the slot type so the
/// same layout serves storage (`Tensor<T>`), tape handles (`Var`) and
/// gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<P> {
    /// `[vocab, F]`, row `z − 1` for atomic number `z`.
    pub embedding: P,
    /// Trainable initial global scalar `[1, F]`.
    pub global_init: Option<P>,
    pub layers: Vec<LayerParams<P>>,
    pub readout: ReadoutParams<P>,
}

type Visitor<'a, P, Q> = dyn FnMut(&str, &P) -> Q + 'a;

impl<P> Mlp<P> {
    fn map<Q>(&self, prefix: &str, f: &mut Visitor<'_, P, Q>) -> Mlp<Q> {
        Mlp {
            w1: f(&format!("{prefix}.w1"), &self.w1),
            b1: f(&format!("{prefix}.b1"), &self.b1),
            w2: f(&format!("{prefix}.w2"), &self.w2),
            b2: f(&format!("{prefix}.b2"), &self.b2),
        }
    }
}

impl<P> ModelParams<P> {
    /// Visits every slot in canonical order with its dotted name.
    pub fn map<Q>(&self, f: &mut Visitor<'_, P, Q>) -> ModelParams<Q> {
        let embedding = f("embedding", &self.embedding);
        let global_init = self.global_init.as_ref().map(|g| f("global_init", g));
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(t, l)| {
                let p = format!("layers.{t}");
                LayerParams {
                    w_h: f(&format!("{p}.w_h"), &l.w_h),
                    w_u: f(&format!("{p}.w_u"), &l.w_u),
                    w_v: f(&format!("{p}.w_v"), &l.w_v),
                    rbf_h: f(&format!("{p}.rbf_h"), &l.rbf_h),
                    rbf_u: f(&format!("{p}.rbf_u"), &l.rbf_u),
                    rbf_v: f(&format!("{p}.rbf_v"), &l.rbf_v),
                    update: match &l.update {
                        UpdateParams::Nmu { w_s, w_g, w_h2, u, v } => UpdateParams::Nmu {
                            w_s: f(&format!("{p}.nmu.w_s"), w_s),
                            w_g: f(&format!("{p}.nmu.w_g"), w_g),
                            w_h2: f(&format!("{p}.nmu.w_h2"), w_h2),
                            u: f(&format!("{p}.nmu.u"), u),
                            v: f(&format!("{p}.nmu.v"), v),
                        },
                        UpdateParams::Painn { u, v, mlp } => UpdateParams::Painn {
                            u: f(&format!("{p}.painn.u"), u),
                            v: f(&format!("{p}.painn.v"), v),
                            mlp: mlp.map(&format!("{p}.painn.mlp"), f),
                        },
                    },
                    global: l.global.as_ref().map(|g| GlobalParams {
                        w_dist: f(&format!("{p}.global.w_dist"), &g.w_dist),
                        mlp_dist: g.mlp_dist.map(&format!("{p}.global.mlp_dist"), f),
                        w_agg: f(&format!("{p}.global.w_agg"), &g.w_agg),
                        mlp_agg: g.mlp_agg.map(&format!("{p}.global.mlp_agg"), f),
                    }),
                }
            })
            .collect();
        let readout = ReadoutParams {
            mlp_energy: self.readout.mlp_energy.map("readout.mlp_energy", f),
            w_f: f("readout.w_f", &self.readout.w_f),
        };
        ModelParams {
            embedding,
            global_init,
            layers,
            readout,
        }
    }

    /// `(name, slot)` pairs in canonical order.
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut names = Vec::new();
        self.map(&mut |n, _| names.push(n.to_string()));
        let mut slots: Vec<&P> = Vec::with_capacity(names.len());
        self.collect_refs(&mut slots);
        names.into_iter().zip(slots).collect()
    }

    fn collect_refs<'a>(&'a self, out: &mut Vec<&'a P>) {
        out.push(&self.embedding);
        if let Some(g) = &self.global_init {
            out.push(g);
        }
        let mlp = |m: &'a Mlp<P>, out: &mut Vec<&'a P>| {
            out.extend([&m.w1, &m.b1, &m.w2, &m.b2]);
        };
        for l in &self.layers {
            out.extend([&l.w_h, &l.w_u, &l.w_v, &l.rbf_h, &l.rbf_u, &l.rbf_v]);
            match &l.update {
                UpdateParams::Nmu { w_s, w_g, w_h2, u, v } => out.extend([w_s, w_g, w_h2, u, v]),
                UpdateParams::Painn { u, v, mlp: m } => {
                    out.extend([u, v]);
                    mlp(m, out);
                }
            }
            if let Some(g) = &l.global {
                out.push(&g.w_dist);
                mlp(&g.mlp_dist, out);
                out.push(&g.w_agg);
                mlp(&g.mlp_agg, out);
            }
        }
        mlp(&self.readout.mlp_energy, out);
        out.push(&self.readout.w_f);
    }

    pub fn slots_mut(&mut self) -> Vec<&mut P> {
        let mut out: Vec<&mut P> = Vec::new();
        out.push(&mut self.embedding);
        if let Some(g) = &mut self.global_init {
            out.push(g);
        }
        fn mlp<'a, P>(m: &'a mut Mlp<P>, out: &mut Vec<&'a mut P>) {
            out.push(&mut m.w1);
            out.push(&mut m.b1);
            out.push(&mut m.w2);
            out.push(&mut m.b2);
        }
        for l in &mut self.layers {
            out.push(&mut l.w_h);
            out.push(&mut l.w_u);
            out.push(&mut l.w_v);
            out.push(&mut l.rbf_h);
            out.push(&mut l.rbf_u);
            out.push(&mut l.rbf_v);
            match &mut l.update {
                UpdateParams::Nmu { w_s, w_g, w_h2, u, v } => {
                    out.push(w_s);
                    out.push(w_g);
                    out.push(w_h2);
                    out.push(u);
                    out.push(v);
                }
                UpdateParams::Painn { u, v, mlp: m } => {
                    out.push(u);
                    out.push(v);
                    mlp(m, &mut out);
                }
            }
            if let Some(g) = &mut l.global {
                out.push(&mut g.w_dist);
                mlp(&mut g.mlp_dist, &mut out);
                out.push(&mut g.w_agg);
                mlp(&mut g.mlp_agg, &mut out);
            }
        }
        mlp(&mut self.readout.mlp_energy, &mut out);
        out.push(&mut self.readout.w_f);
        out
    }
}

impl<T: Real> ModelParams<Tensor<T>> {
    /// Glorot-uniform matrices, zero biases, embedding rows
    /// uniform(−1, 1)/√F and a zero initial global scalar.
    pub fn init(h: &Hyperparams, rng: &mut ChaCha8Rng) -> Self {
        let (f, k) = (h.features, h.num_rbf);
        let mut g = |rows: usize, cols: usize| -> Tensor<T> {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            let v: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
            Tensor::from_f64(&[rows, cols], &v).expect("shape")
        };
        let mut layers = Vec::with_capacity(h.layers);
        for _ in 0..h.layers {
            let w_h = g(f, f);
            let w_u = g(f, f);
            let w_v = g(f, f);
            let rbf_h = g(f, k);
            let rbf_u = g(f, k);
            let rbf_v = g(f, k);
            let update = if h.use_nmu {
                UpdateParams::Nmu {
                    w_s: g(f, 2 * f),
                    w_g: g(f, 2 * f),
                    w_h2: g(f, 2 * f),
                    u: g(f, f),
                    v: g(f, f),
                }
            } else {
                let u = g(f, f);
                let v = g(f, f);
                let mlp = Mlp {
                    w1: g(f, 2 * f),
                    b1: Tensor::zeros(&[f]),
                    w2: g(3 * f, f),
                    b2: Tensor::zeros(&[3 * f]),
                };
                UpdateParams::Painn { u, v, mlp }
            };
            let global = if h.use_global {
                let w_dist = g(f, f);
                let mlp_dist = Mlp {
                    w1: g(f, 2 * f),
                    b1: Tensor::zeros(&[f]),
                    w2: g(f, f),
                    b2: Tensor::zeros(&[f]),
                };
                let w_agg = g(f, f);
                let mlp_agg = Mlp {
                    w1: g(f, 2 * f),
                    b1: Tensor::zeros(&[f]),
                    w2: g(f, f),
                    b2: Tensor::zeros(&[f]),
                };
                Some(GlobalParams {
                    w_dist,
                    mlp_dist,
                    w_agg,
                    mlp_agg,
                })
            } else {
                None
            };
            layers.push(LayerParams {
                w_h,
                w_u,
                w_v,
                rbf_h,
                rbf_u,
                rbf_v,
                update,
                global,
            });
        }
        let readout = ReadoutParams {
            mlp_energy: Mlp {
                w1: g(f, f),
                b1: Tensor::zeros(&[f]),
                w2: g(1, f),
                b2: Tensor::zeros(&[1]),
            },
            w_f: g(1, f),
        };
        let vocab = h.element_vocab as usize;
        let scale = 1.0 / (f as f64).sqrt();
        let emb: Vec<f64> = (0..vocab * f)
            .map(|_| rng.random_range(-1.0..1.0) * scale)
            .collect();
        let embedding = Tensor::from_f64(&[vocab, f], &emb).expect("shape");
        let global_init = h.use_global.then(|| Tensor::zeros(&[1, f]));
        ModelParams {
            embedding,
            global_init,
            layers,
            readout,
        }
    }

    pub fn count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.all_finite())
    }
}
